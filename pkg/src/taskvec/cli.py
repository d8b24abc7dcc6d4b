"""Command-line interface wiring the library into the end-to-end workflow.

Subcommands: diff, saliency, mask, merge, prop1, hscore. Progress goes to
stderr; reports and data go to files or stdout. Exit codes: 0 success,
2 I/O failure, 3 incompatible inputs, 4 invalid arguments or recipe.
Each subcommand accepts --config pointing at a JSON file whose keys match
the long flag names; explicit flags win over config values.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

from . import merging, saliency, theory
from .task_vector import (
    TaskVector,
    diff,
    load_task_vector,
    save_task_vector,
)
from .tensor_store import (
    Checkpoint,
    CompatibilityError,
    FormatError,
    checkpoint_fingerprint,
    load_checkpoint,
    save_checkpoint,
)

EXIT_OK = 0
EXIT_IO = 2
EXIT_INCOMPATIBLE = 3
EXIT_INVALID = 4

_METHOD_NAMES = {
    "weight-average": "weight_average",
    "task-arithmetic": "task_arithmetic",
    "ties": "ties",
    "adamerging": "adamerging_apply",
    "pcb": "pcb_apply",
    "wise-ft": "wise_ft",
}

_LAMBDA_DEFAULTS = {"task_arithmetic": 0.3, "ties": 0.3, "pcb_apply": 1.2}


def _log(message: str) -> None:
    print(message, file=sys.stderr)


class _Parser(argparse.ArgumentParser):
    """argparse that reports usage errors with exit code 4."""

    def error(self, message: str):  # noqa: D102 - argparse hook
        self.print_usage(sys.stderr)
        _log(f"error: {message}")
        raise SystemExit(EXIT_INVALID)


@dataclass
class RunConfig:
    """Resolved inputs of a merge run."""

    method: str
    base_path: str | None
    finetuned_paths: list[str]
    taskvec_paths: list[str]
    eta: float
    lambda_spec: object
    keep_fraction: float | None
    alpha: float | None
    seed: int
    output_path: str
    report_path: str | None

    def validate(self) -> None:
        if self.method not in _METHOD_NAMES.values():
            raise ValueError(f"unknown method {self.method!r}")
        if not (0.0 <= self.eta <= 1.0):
            raise ValueError(f"eta must be in [0, 1], got {self.eta}")
        if not self.finetuned_paths and not self.taskvec_paths:
            raise ValueError("need at least one --finetuned or --taskvec input")
        inputs = set(self.finetuned_paths) | set(self.taskvec_paths)
        if self.base_path is not None:
            inputs.add(self.base_path)
        if self.output_path in inputs:
            raise ValueError("output path must differ from every input path")


def _load_config(path: str | None) -> dict:
    if path is None:
        return {}
    obj = json.loads(Path(path).read_text())
    if not isinstance(obj, dict):
        raise ValueError("config file must hold a JSON object")
    return obj


def _opt(args: argparse.Namespace, config: dict, key: str, default=None):
    value = getattr(args, key, None)
    if value is not None:
        return value
    if key in config:
        return config[key]
    return default


def _write_report(obj: dict, path: str | None) -> None:
    text = json.dumps(obj, indent=2) + "\n"
    if path is None:
        sys.stdout.write(text)
    else:
        Path(path).write_text(text)
        _log(f"wrote report {path}")


def _parse_lambda(raw) -> float | list[float]:
    if isinstance(raw, (int, float)):
        return float(raw)
    if isinstance(raw, list):
        return [float(v) for v in raw]
    parts = str(raw).split(",")
    values = [float(p) for p in parts]
    return values[0] if len(values) == 1 else values


def _load_lambda_table(path: str, tvs: Sequence[TaskVector], layer_names: list[str]):
    """Read a coefficient table; layer_names null marks a task-wise table."""
    obj = json.loads(Path(path).read_text())
    rows = obj.get("lambdas")
    if rows is None:
        raise ValueError("lambda table file needs a 'lambdas' field")
    table_layers = obj.get("layer_names")
    if table_layers is None:
        values = [float(v) for v in rows]
        if len(values) != len(tvs):
            raise ValueError(
                f"lambda table has {len(values)} tasks, expected {len(tvs)}"
            )
        return values, False
    if sorted(table_layers) != sorted(layer_names):
        raise ValueError("lambda table layer names do not match the checkpoint")
    col = {name: i for i, name in enumerate(table_layers)}
    if len(rows) != len(tvs):
        raise ValueError(f"lambda table has {len(rows)} rows, expected {len(tvs)}")
    return [[float(row[col[name]]) for name in layer_names] for row in rows], True


def _load_mask_file(path: str):
    if path.endswith(".json"):
        obj = json.loads(Path(path).read_text())
        if "shared_mask" in obj:
            obj = obj["shared_mask"]
        return saliency.SharedMask.from_json_dict(obj)
    return saliency.ParameterMask.from_checkpoint(load_checkpoint(path))


def _saliency_pipeline_mask(tvs: Sequence[TaskVector], eta: float) -> saliency.SharedMask:
    matrix = saliency.compute_saliency(tvs)
    return saliency.or_masks(saliency.threshold_mask(matrix, eta))


def _check_provenance(base: Checkpoint, tvs: Sequence[TaskVector]) -> None:
    fingerprint = checkpoint_fingerprint(base)
    for tv in tvs:
        if tv.base_fingerprint is not None and tv.base_fingerprint != fingerprint:
            _log(
                f"warning: task vector {tv.id!r} was derived from a different base "
                "(fingerprint mismatch)"
            )


def cmd_diff(args: argparse.Namespace) -> int:
    config = _load_config(args.config)
    base_path = _opt(args, config, "base")
    finetuned = _opt(args, config, "finetuned") or []
    out = _opt(args, config, "out")
    if base_path is None or len(finetuned) != 1 or out is None:
        raise ValueError("diff needs --base, exactly one --finetuned, and --out")
    if out in (base_path, finetuned[0]):
        raise ValueError("output path must differ from every input path")
    base = load_checkpoint(base_path)
    tuned = load_checkpoint(finetuned[0])
    task_id = _opt(args, config, "task_id") or Path(finetuned[0]).stem
    tv = diff(tuned, base, task_id=task_id)
    save_task_vector(tv, out)
    _log(f"wrote task vector {out} ({len(tv.entries)} layers)")
    return EXIT_OK


def _load_tvs(paths: Sequence[str]) -> list[TaskVector]:
    if not paths:
        raise ValueError("need at least one --taskvec input")
    return [load_task_vector(p) for p in paths]


def _score_matrix(tvs: Sequence[TaskVector], score: str) -> saliency.SaliencyMatrix:
    if score == "absolute":
        return saliency.compute_absolute_score(tvs)
    return saliency.compute_saliency(tvs)


def _write_scores_csv(matrix: saliency.SaliencyMatrix, path: str, maskset=None) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        header = ["task_id", "layer", "score"]
        if maskset is not None:
            header.append("mask")
        writer.writerow(header)
        for i, task_id in enumerate(matrix.task_ids):
            for j, layer in enumerate(matrix.layer_names):
                row = [task_id, layer, repr(float(matrix.scores[i, j]))]
                if maskset is not None:
                    row.append(int(maskset.masks[i, j]))
                writer.writerow(row)
    _log(f"wrote csv {path}")


def cmd_saliency(args: argparse.Namespace) -> int:
    config = _load_config(args.config)
    tvs = _load_tvs(_opt(args, config, "taskvec") or [])
    score = _opt(args, config, "score", "deviation")
    matrix = _score_matrix(tvs, score)
    _write_report(matrix.to_json_dict(), _opt(args, config, "report"))
    csv_path = _opt(args, config, "csv")
    if csv_path:
        _write_scores_csv(matrix, csv_path)
    plot_path = _opt(args, config, "plot")
    if plot_path:
        from . import plots

        plots.save_saliency_figure(matrix, plot_path)
        _log(f"wrote figure {plot_path}")
    return EXIT_OK


def cmd_mask(args: argparse.Namespace) -> int:
    config = _load_config(args.config)
    tvs = _load_tvs(_opt(args, config, "taskvec") or [])
    eta = float(_opt(args, config, "eta", 0.7))
    granularity = _opt(args, config, "granularity", "layer")
    seed = _opt(args, config, "seed")

    if granularity == "parameter":
        mask = saliency.parameter_saliency_mask(tvs, eta)
        out = _opt(args, config, "out")
        if out is None:
            raise ValueError("parameter granularity needs --out for the mask tensors")
        save_checkpoint(mask.to_checkpoint(), out)
        _log(f"wrote parameter mask {out}")
        report = {
            "eta": eta,
            "granularity": "parameter",
            "kept_parameters": mask.ones_count(),
            "total_parameters": int(
                sum(arr.size for arr in mask.entries.values())
            ),
            "kept_per_layer": {
                name: int(arr.sum()) for name, arr in mask.entries.items()
            },
        }
        _write_report(report, _opt(args, config, "report"))
        return EXIT_OK

    if _opt(args, config, "random", False):
        shared = saliency.random_layer_mask(
            tvs[0].layer_names, eta, int(seed if seed is not None else 0)
        )
        report = {
            "eta": eta,
            "granularity": "layer",
            "mode": "random",
            "seed": int(seed if seed is not None else 0),
            "shared_mask": shared.to_json_dict(),
        }
        _write_report(report, _opt(args, config, "report"))
        return EXIT_OK

    score = _opt(args, config, "score", "deviation")
    matrix = _score_matrix(tvs, score)
    maskset = saliency.threshold_mask(matrix, eta)
    shared = saliency.or_masks(maskset)
    report = {
        "eta": eta,
        "granularity": "layer",
        "score": score,
        "saliency": matrix.to_json_dict(),
        "task_masks": {
            "task_ids": list(maskset.task_ids),
            "layer_names": list(maskset.layer_names),
            "values": [[int(v) for v in row] for row in maskset.masks],
        },
        "shared_mask": shared.to_json_dict(),
    }
    _write_report(report, _opt(args, config, "report"))
    csv_path = _opt(args, config, "csv")
    if csv_path:
        _write_scores_csv(matrix, csv_path, maskset)
    plot_path = _opt(args, config, "plot")
    if plot_path:
        from . import plots

        plots.save_saliency_figure(matrix, plot_path, maskset, shared)
        _log(f"wrote figure {plot_path}")
    return EXIT_OK


def _merge_mask(args, config, method: str, tvs: Sequence[TaskVector], eta: float):
    """Resolve the mask: explicit file, disabled, or the saliency pipeline."""
    mask_file = _opt(args, config, "mask")
    no_mask = _opt(args, config, "no_mask", False)
    if mask_file and no_mask:
        raise ValueError("--mask and --no-mask are mutually exclusive")
    if method in ("weight_average", "wise_ft"):
        if mask_file:
            raise ValueError(f"{method} does not take a mask")
        return None, "none"
    if no_mask:
        return None, "none"
    if mask_file:
        return _load_mask_file(mask_file), f"file:{Path(mask_file).name}"
    return _saliency_pipeline_mask(tvs, eta), "saliency"


def cmd_merge(args: argparse.Namespace) -> int:
    config = _load_config(args.config)
    cli_method = _opt(args, config, "method")
    if cli_method is None:
        raise ValueError("merge needs --method")
    method = _METHOD_NAMES.get(str(cli_method).replace("_", "-"))
    if method is None:
        raise ValueError(f"unknown method {cli_method!r}")

    run = RunConfig(
        method=method,
        base_path=_opt(args, config, "base"),
        finetuned_paths=list(_opt(args, config, "finetuned") or []),
        taskvec_paths=list(_opt(args, config, "taskvec") or []),
        eta=float(_opt(args, config, "eta", 0.7)),
        lambda_spec=_opt(args, config, "lambda_spec"),
        keep_fraction=_opt(args, config, "keep_fraction"),
        alpha=_opt(args, config, "alpha"),
        seed=int(_opt(args, config, "seed", 0)),
        output_path=_opt(args, config, "out") or "",
        report_path=_opt(args, config, "report"),
    )
    if not run.output_path:
        raise ValueError("merge needs --out")
    run.validate()

    base = load_checkpoint(run.base_path) if run.base_path else None
    ckpts: list[Checkpoint] = []
    tvs: list[TaskVector] = []

    if method == "weight_average":
        if not run.finetuned_paths:
            raise ValueError("weight-average needs --finetuned checkpoints")
        ckpts = [load_checkpoint(p) for p in run.finetuned_paths]
    elif method == "wise_ft":
        if len(run.finetuned_paths) != 1:
            raise ValueError("wise-ft needs exactly one --finetuned checkpoint")
        if base is None:
            raise ValueError("wise-ft needs --base")
        ckpts = [load_checkpoint(run.finetuned_paths[0])]
    else:
        if base is None:
            raise ValueError(f"{cli_method} needs --base")
        if run.taskvec_paths:
            tvs = _load_tvs(run.taskvec_paths)
        else:
            tvs = [
                diff(load_checkpoint(p), base, task_id=Path(p).stem)
                for p in run.finetuned_paths
            ]
        _check_provenance(base, tvs)

    preprocess = _opt(args, config, "preprocess", "none")
    if preprocess == "dare":
        p = float(_opt(args, config, "dare_p", 0.9))
        tvs = [merging.dare(tv, p, run.seed) for tv in tvs]
    elif preprocess == "mwp":
        keep = float(_opt(args, config, "mwp_keep", 0.2))
        tvs = [merging.mwp(tv, keep) for tv in tvs]
    elif preprocess != "none":
        raise ValueError(f"unknown preprocess {preprocess!r}")

    mask, mask_source = _merge_mask(args, config, method, tvs, run.eta)

    lambda_spec = run.lambda_spec
    merge_eta = run.eta
    table_path = _opt(args, config, "lambda_table")
    if method == "adamerging_apply":
        if table_path is None:
            raise ValueError("adamerging needs --lambda-table")
        lambda_spec, layerwise = _load_lambda_table(table_path, tvs, base.layer_names)
        # layer-wise coefficients get rescaled by eta after pruning;
        # task-wise coefficients apply as-is
        if not layerwise:
            merge_eta = 1.0
    elif lambda_spec is not None:
        lambda_spec = _parse_lambda(lambda_spec)
    else:
        lambda_spec = _LAMBDA_DEFAULTS.get(method)

    keep_fraction = run.keep_fraction
    if method == "ties" and keep_fraction is None:
        keep_fraction = 0.2
    alpha = run.alpha
    if method == "wise_ft" and alpha is None:
        alpha = 0.5

    betas = [load_checkpoint(p) for p in (_opt(args, config, "beta") or [])]
    if method == "pcb_apply" and len(betas) != len(tvs):
        raise ValueError(
            f"pcb needs one --beta file per task vector ({len(tvs)} expected)"
        )

    recipe = merging.MergeRecipe(
        method=method,
        lambda_spec=lambda_spec,
        eta=merge_eta,
        mask_source=mask_source,
        keep_fraction=float(keep_fraction) if keep_fraction is not None else None,
        seed=run.seed,
        alpha=float(alpha) if alpha is not None else None,
    )
    merged = merging.run_recipe(
        recipe, base, tvs=tvs, ckpts=ckpts, mask=mask, betas=betas
    )
    if preprocess != "none":
        metadata = dict(merged.metadata or {})
        metadata["merge.preprocess"] = preprocess
        merged = Checkpoint(entries=merged.entries, metadata=metadata)
    save_checkpoint(merged, run.output_path)
    _log(f"wrote merged checkpoint {run.output_path}")

    layer_names = merged.layer_names
    cli_names = {v: k for k, v in _METHOD_NAMES.items()}
    report = {
        "method": cli_names[method],
        "eta": run.eta,
        "lambda": lambda_spec,
        "keep_fraction": keep_fraction,
        "alpha": alpha,
        "seed": run.seed,
        "preprocess": preprocess,
        "mask": mask_source,
        "layers_total": len(layer_names),
    }
    if isinstance(mask, saliency.SharedMask):
        report["mask_ones_count"] = mask.ones_count()
        report["layer_names"] = layer_names
        report["pruned_flags"] = [int(v == 0) for v in mask.values]
    elif isinstance(mask, saliency.ParameterMask):
        report["mask_ones_count"] = mask.ones_count()
        report["kept_per_layer"] = {
            name: int(arr.sum()) for name, arr in mask.entries.items()
        }
    else:
        report["mask_ones_count"] = len(layer_names)
        report["layer_names"] = layer_names
        report["pruned_flags"] = [0] * len(layer_names)
    if run.report_path is not None:
        _write_report(report, run.report_path)
    return EXIT_OK


def cmd_prop1(args: argparse.Namespace) -> int:
    config = _load_config(args.config)
    spec_args = dict(
        tasks=int(_opt(args, config, "tasks", 8)),
        dim=int(_opt(args, config, "dim", 64)),
        subset_size=int(_opt(args, config, "subset_size", 8)),
        signal=float(_opt(args, config, "signal", 1.0)),
        noise=float(_opt(args, config, "noise", 0.01)),
    )
    seed = int(_opt(args, config, "seed", 0))
    trials = int(_opt(args, config, "trials", 1))
    if trials < 1:
        raise ValueError("trials must be >= 1")

    reports = [
        theory.prop1_experiment(theory.SyntheticSpec(seed=seed + t, **spec_args))
        for t in range(trials)
    ]
    if trials == 1:
        payload = reports[0].to_json_dict()
    else:
        passes = sum(r.passed for r in reports)
        payload = {
            "K": spec_args["tasks"],
            "dim": spec_args["dim"],
            "subset_size": spec_args["subset_size"],
            "signal": spec_args["signal"],
            "noise": spec_args["noise"],
            "seed_start": seed,
            "trials": trials,
            "passes": passes,
            "pass_rate": passes / trials,
            "sqrt_K": reports[0].threshold,
            "ratios": [
                r.ratio if math.isfinite(r.ratio) else None for r in reports
            ],
        }
    _write_report(payload, _opt(args, config, "report"))

    csv_path = _opt(args, config, "csv")
    if csv_path:
        with open(csv_path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["seed", "dv_k1", "dv_k2", "ratio", "passed"])
            for t, r in enumerate(reports):
                writer.writerow(
                    [
                        seed + t,
                        repr(r.dv_per_task[0]),
                        repr(r.dv_per_task[1]),
                        repr(r.ratio) if math.isfinite(r.ratio) else "inf",
                        int(r.passed),
                    ]
                )
        _log(f"wrote csv {csv_path}")
    plot_path = _opt(args, config, "plot")
    if plot_path:
        from . import plots

        plots.save_ratio_figure(
            [r.ratio for r in reports], reports[0].threshold, plot_path
        )
        _log(f"wrote figure {plot_path}")
    return EXIT_OK


def cmd_hscore(args: argparse.Namespace) -> int:
    value = theory.h_score(args.id_avg, args.ood_avg)
    print(f"{value:.1f}")
    return EXIT_OK


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="JSON config file; flags override it")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="taskvec", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("diff", parents=[], help="compute a task vector")
    p.add_argument("--base")
    p.add_argument("--finetuned", action="append")
    p.add_argument("--task-id", dest="task_id")
    p.add_argument("--out")
    _add_common(p)
    p.set_defaults(fn=cmd_diff)

    p = sub.add_parser("saliency", help="score layers of task vectors")
    p.add_argument("--taskvec", action="append")
    p.add_argument("--score", choices=["deviation", "absolute"])
    p.add_argument("--report")
    p.add_argument("--csv")
    p.add_argument("--plot")
    _add_common(p)
    p.set_defaults(fn=cmd_saliency)

    p = sub.add_parser("mask", help="build pruning masks from task vectors")
    p.add_argument("--taskvec", action="append")
    p.add_argument("--eta", type=float)
    p.add_argument("--score", choices=["deviation", "absolute"])
    p.add_argument("--granularity", choices=["layer", "parameter"])
    p.add_argument("--random", action="store_const", const=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.add_argument("--report")
    p.add_argument("--csv")
    p.add_argument("--plot")
    _add_common(p)
    p.set_defaults(fn=cmd_mask)

    p = sub.add_parser("merge", help="merge checkpoints via task vectors")
    p.add_argument("--method", choices=sorted(_METHOD_NAMES))
    p.add_argument("--base")
    p.add_argument("--finetuned", action="append")
    p.add_argument("--taskvec", action="append")
    p.add_argument("--eta", type=float)
    p.add_argument("--lambda", dest="lambda_spec")
    p.add_argument("--lambda-table", dest="lambda_table")
    p.add_argument("--keep-fraction", dest="keep_fraction", type=float)
    p.add_argument("--alpha", type=float)
    p.add_argument("--beta", action="append")
    p.add_argument("--mask")
    p.add_argument("--no-mask", dest="no_mask", action="store_const", const=True)
    p.add_argument("--preprocess", choices=["none", "dare", "mwp"])
    p.add_argument("--dare-p", dest="dare_p", type=float)
    p.add_argument("--mwp-keep", dest="mwp_keep", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.add_argument("--report")
    _add_common(p)
    p.set_defaults(fn=cmd_merge)

    p = sub.add_parser("prop1", help="synthetic diversity separation check")
    p.add_argument("--tasks", type=int)
    p.add_argument("--dim", type=int)
    p.add_argument("--subset-size", dest="subset_size", type=int)
    p.add_argument("--signal", type=float)
    p.add_argument("--noise", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--trials", type=int)
    p.add_argument("--report")
    p.add_argument("--csv")
    p.add_argument("--plot")
    _add_common(p)
    p.set_defaults(fn=cmd_prop1)

    p = sub.add_parser("hscore", help="harmonic mean of ID and OOD averages")
    p.add_argument("id_avg", type=float)
    p.add_argument("ood_avg", type=float)
    p.set_defaults(fn=cmd_hscore)

    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.fn(args)
    except (FormatError, OSError) as exc:
        _log(f"error: {exc}")
        return EXIT_IO
    except CompatibilityError as exc:
        _log(f"error: {exc}")
        return EXIT_INCOMPATIBLE
    except (ValueError, KeyError, json.JSONDecodeError) as exc:
        _log(f"error: {exc}")
        return EXIT_INVALID


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
