"""Merging algorithms over a base checkpoint and task vectors.

Every mask-aware method treats a pruned layer by copying the base tensor's
bytes directly, so pruning reverts those layers bitwise. Elementwise math
runs on float32 values with float64 accumulation, folding over task
vectors in input order; outputs are stored in the base checkpoint's dtype.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from . import rng
from .parallel import map_layers
from .saliency import ParameterMask, SharedMask, _check_eta
from .task_vector import TaskVector, check_alignment, _shapes
from .tensor_store import (
    Checkpoint,
    CompatibilityError,
    Dtype,
    Tensor,
    validate_compatibility,
)

METHODS = (
    "weight_average",
    "task_arithmetic",
    "ties",
    "adamerging_apply",
    "pcb_apply",
    "wise_ft",
)


def _require_tvs(base: Checkpoint, tvs: Sequence[TaskVector]) -> dict[str, tuple[int, ...]]:
    if not tvs:
        raise CompatibilityError("no task vectors given")
    shapes = _shapes(base)
    for tv in tvs:
        check_alignment(shapes, tv)
    return shapes


def _shared_flags(mask: SharedMask | None, names: Sequence[str]) -> dict[str, bool]:
    if mask is None:
        return {name: True for name in names}
    if mask.layer_names != list(names):
        raise CompatibilityError(
            f"mask covers {len(mask.layer_names)} layers "
            f"but the checkpoint has {len(names)}, or names differ"
        )
    return {name: bool(v) for name, v in zip(mask.layer_names, mask.values)}


def _param_arrays(mask: ParameterMask, shapes: dict[str, tuple[int, ...]]) -> dict[str, np.ndarray]:
    if mask.layer_names != list(shapes):
        raise CompatibilityError("parameter mask layers do not match checkpoint")
    for name, arr in mask.entries.items():
        if arr.shape != shapes[name]:
            raise CompatibilityError(f"parameter mask shape mismatch for {name!r}")
    return mask.entries


def _finite(value: float, what: str) -> float:
    if not math.isfinite(value):
        raise ValueError(f"non-finite {what} {value!r}")
    return float(value)


def weight_average(ckpts: Sequence[Checkpoint]) -> Checkpoint:
    """Elementwise mean of the checkpoints, in the first one's dtype."""
    validate_compatibility(ckpts)
    first = ckpts[0]
    k = len(ckpts)

    def one(name: str) -> Tensor:
        acc = np.zeros(first.entries[name].shape, dtype=np.float64)
        for ckpt in ckpts:
            acc = acc + ckpt.entries[name].to_f32().astype(np.float64)
        return Tensor.from_f32((acc / k).astype(np.float32), first.entries[name].dtype)

    return Checkpoint(entries=map_layers(one, first.layer_names), metadata=first.metadata)


def _masked_delta_merge(
    base: Checkpoint,
    names: Sequence[str],
    flags: dict[str, bool],
    delta_fn,
) -> Checkpoint:
    """Assemble base + delta per layer, copying base bytes where pruned."""

    def one(name: str) -> Tensor:
        tensor = base.entries[name]
        if not flags[name]:
            return tensor
        out = tensor.to_f32().astype(np.float64) + delta_fn(name)
        return Tensor.from_f32(out.astype(np.float32), tensor.dtype)

    return Checkpoint(entries=map_layers(one, list(names)), metadata=base.metadata)


def task_arithmetic(
    base: Checkpoint,
    tvs: Sequence[TaskVector],
    coeff: float,
    mask: SharedMask | ParameterMask | None = None,
) -> Checkpoint:
    """base + coeff * sum of task vectors, with pruned layers left at base."""
    shapes = _require_tvs(base, tvs)
    _finite(coeff, "coefficient")
    param = _param_arrays(mask, shapes) if isinstance(mask, ParameterMask) else None
    flags = _shared_flags(mask if isinstance(mask, SharedMask) else None, list(shapes))

    def delta(name: str) -> np.ndarray:
        acc = np.zeros(shapes[name], dtype=np.float64)
        for tv in tvs:
            acc = acc + tv.entries[name].to_f32().astype(np.float64)
        acc = coeff * acc
        if param is not None:
            acc = acc * param[name]
        return acc

    return _masked_delta_merge(base, list(shapes), flags, delta)


def _trim_flat(flat: np.ndarray, keep_fraction: float) -> np.ndarray:
    """Zero all but the top keep_fraction of entries by absolute value.

    Ranking is global over the flat vector; ties keep the lowest index.
    """
    n_keep = math.floor(flat.size * keep_fraction)
    if n_keep >= flat.size:
        return flat.copy()
    out = np.zeros_like(flat)
    order = np.argsort(-np.abs(flat), kind="stable")
    keep = order[:n_keep]
    out[keep] = flat[keep]
    return out


def _apply_mask_to_flats(
    flats: dict[str, np.ndarray],
    flags: dict[str, bool],
    param: dict[str, np.ndarray] | None,
) -> dict[str, np.ndarray]:
    out = {}
    for name, flat in flats.items():
        if not flags[name]:
            out[name] = np.zeros_like(flat)
        elif param is not None:
            out[name] = flat * param[name].ravel()
        else:
            out[name] = flat
    return out


def ties_merge(
    base: Checkpoint,
    tvs: Sequence[TaskVector],
    keep_fraction: float,
    coeff: float,
    mask: SharedMask | ParameterMask | None = None,
) -> Checkpoint:
    """Trim, sign-elect, and disjoint-mean the (masked) task vectors.

    Per task, all but the top keep_fraction of parameters by magnitude are
    zeroed (ranked over the whole vector). Per parameter, the sign of the
    summed survivors wins and only agreeing tasks contribute to the mean;
    exact cancellation yields zero.
    """
    if not (0.0 < keep_fraction <= 1.0):
        raise ValueError(f"keep_fraction must be in (0, 1], got {keep_fraction}")
    shapes = _require_tvs(base, tvs)
    _finite(coeff, "coefficient")
    param = _param_arrays(mask, shapes) if isinstance(mask, ParameterMask) else None
    flags = _shared_flags(mask if isinstance(mask, SharedMask) else None, list(shapes))
    names = list(shapes)

    sizes = {name: base.entries[name].element_count for name in names}
    trimmed: list[np.ndarray] = []
    for tv in tvs:
        flats = {name: tv.entries[name].to_f32().ravel() for name in names}
        flats = _apply_mask_to_flats(flats, flags, param)
        joined = (
            np.concatenate([flats[name] for name in names])
            if names
            else np.zeros(0, dtype=np.float32)
        )
        trimmed.append(_trim_flat(joined, keep_fraction).astype(np.float64))

    total = np.zeros_like(trimmed[0])
    pos_sum = np.zeros_like(trimmed[0])
    neg_sum = np.zeros_like(trimmed[0])
    pos_cnt = np.zeros_like(trimmed[0])
    neg_cnt = np.zeros_like(trimmed[0])
    for vec in trimmed:
        total = total + vec
        positive = vec > 0
        negative = vec < 0
        pos_sum = pos_sum + np.where(positive, vec, 0.0)
        neg_sum = neg_sum + np.where(negative, vec, 0.0)
        pos_cnt += positive
        neg_cnt += negative
    elected = np.sign(total)
    merged = np.zeros_like(total)
    np.divide(pos_sum, pos_cnt, out=merged, where=(elected > 0) & (pos_cnt > 0))
    np.divide(neg_sum, neg_cnt, out=merged, where=(elected < 0) & (neg_cnt > 0))

    offsets = {}
    cursor = 0
    for name in names:
        offsets[name] = cursor
        cursor += sizes[name]

    def delta(name: str) -> np.ndarray:
        start = offsets[name]
        block = merged[start : start + sizes[name]].reshape(shapes[name])
        return coeff * block

    return _masked_delta_merge(base, names, flags, delta)


def adamerging_apply(
    base: Checkpoint,
    tvs: Sequence[TaskVector],
    coeff_table: np.ndarray | Sequence[float] | Sequence[Sequence[float]],
    eta: float,
    mask: SharedMask | ParameterMask | None = None,
) -> Checkpoint:
    """base + sum of eta * coeff[k][l] * tv_k per layer, mask-aware.

    A flat K-vector of coefficients is broadcast across layers (task-wise
    form); a K x L table assigns one coefficient per task and layer.
    """
    shapes = _require_tvs(base, tvs)
    _check_eta(eta)
    names = list(shapes)
    table = np.asarray(coeff_table, dtype=np.float64)
    if table.ndim == 1:
        table = np.repeat(table[:, None], len(names), axis=1)
    if table.shape != (len(tvs), len(names)):
        raise ValueError(
            f"coefficient table shape {table.shape} does not match "
            f"{len(tvs)} tasks x {len(names)} layers"
        )
    if not np.isfinite(table).all():
        raise ValueError("non-finite coefficient in table")
    param = _param_arrays(mask, shapes) if isinstance(mask, ParameterMask) else None
    flags = _shared_flags(mask if isinstance(mask, SharedMask) else None, names)
    col = {name: i for i, name in enumerate(names)}

    def delta(name: str) -> np.ndarray:
        acc = np.zeros(shapes[name], dtype=np.float64)
        for k, tv in enumerate(tvs):
            scale = eta * table[k, col[name]]
            acc = acc + scale * tv.entries[name].to_f32().astype(np.float64)
        if param is not None:
            acc = acc * param[name]
        return acc

    return _masked_delta_merge(base, names, flags, delta)


def pcb_apply(
    base: Checkpoint,
    tvs: Sequence[TaskVector],
    betas: Sequence[Checkpoint],
    coeffs: Sequence[float],
    mask: SharedMask | ParameterMask | None = None,
) -> Checkpoint:
    """Per-parameter weighted mean of scaled task vectors.

    delta = sum_k beta_k * tv_k * coeff_k / sum_k beta_k, defined as zero
    where the beta weights sum to zero. The beta importance scores are an
    external input.
    """
    shapes = _require_tvs(base, tvs)
    if len(betas) != len(tvs):
        raise ValueError(f"got {len(betas)} beta sets for {len(tvs)} task vectors")
    if len(coeffs) != len(tvs):
        raise ValueError(f"got {len(coeffs)} coefficients for {len(tvs)} task vectors")
    for coeff in coeffs:
        _finite(coeff, "coefficient")
    for beta in betas:
        names = set(shapes)
        if beta.entries.keys() != names:
            raise CompatibilityError("beta tensors do not match checkpoint layers")
        for name, tensor in beta.entries.items():
            if tensor.shape != shapes[name]:
                raise CompatibilityError(f"beta shape mismatch for {name!r}")
            if (tensor.to_f32() < 0).any():
                raise ValueError(f"negative beta weight in {name!r}")
    param = _param_arrays(mask, shapes) if isinstance(mask, ParameterMask) else None
    flags = _shared_flags(mask if isinstance(mask, SharedMask) else None, list(shapes))

    def delta(name: str) -> np.ndarray:
        num = np.zeros(shapes[name], dtype=np.float64)
        den = np.zeros(shapes[name], dtype=np.float64)
        for tv, beta, coeff in zip(tvs, betas, coeffs):
            weight = beta.entries[name].to_f32().astype(np.float64)
            num = num + weight * tv.entries[name].to_f32().astype(np.float64) * coeff
            den = den + weight
        out = np.zeros_like(num)
        np.divide(num, den, out=out, where=den > 0)
        if param is not None:
            out = out * param[name]
        return out

    return _masked_delta_merge(base, list(shapes), flags, delta)


def dare(tv: TaskVector, p: float, seed: int) -> TaskVector:
    """Drop elements with probability p and rescale survivors by 1/(1-p).

    Drops are keyed by (seed, layer name, flat index), so the result is
    independent of evaluation order.
    """
    if not (0.0 <= p < 1.0):
        raise ValueError(f"drop probability must be in [0, 1), got {p}")

    def one(name: str) -> Tensor:
        tensor = tv.entries[name]
        draws = rng.uniform(seed, f"dare/{name}", tensor.element_count)
        flat = tensor.to_f32().ravel().astype(np.float64)
        kept = np.where(draws >= p, flat / (1.0 - p), 0.0)
        return Tensor.from_f32(
            kept.astype(np.float32).reshape(tensor.shape), Dtype.F32
        )

    entries = map_layers(one, tv.layer_names)
    return TaskVector(id=tv.id, entries=entries, base_fingerprint=tv.base_fingerprint)


def mwp(tv: TaskVector, keep_fraction: float) -> TaskVector:
    """Keep only the top keep_fraction of parameters by magnitude, no rescale."""
    if not (0.0 < keep_fraction <= 1.0):
        raise ValueError(f"keep_fraction must be in (0, 1], got {keep_fraction}")
    names = tv.layer_names
    flats = [tv.entries[name].to_f32().ravel() for name in names]
    joined = np.concatenate(flats) if names else np.zeros(0, dtype=np.float32)
    trimmed = _trim_flat(joined, keep_fraction)
    entries = {}
    cursor = 0
    for name, flat in zip(names, flats):
        block = trimmed[cursor : cursor + flat.size]
        cursor += flat.size
        entries[name] = Tensor.from_f32(
            block.reshape(tv.entries[name].shape), Dtype.F32
        )
    return TaskVector(id=tv.id, entries=entries, base_fingerprint=tv.base_fingerprint)


def wise_ft(base: Checkpoint, finetuned: Checkpoint, alpha: float) -> Checkpoint:
    """Interpolate (1 - alpha) * base + alpha * finetuned elementwise."""
    if not (0.0 <= alpha <= 1.0):
        raise ValueError(f"mixing coefficient must be in [0, 1], got {alpha}")
    validate_compatibility([base, finetuned])

    def one(name: str) -> Tensor:
        b = base.entries[name].to_f32().astype(np.float64)
        f = finetuned.entries[name].to_f32().astype(np.float64)
        out = (1.0 - alpha) * b + alpha * f
        return Tensor.from_f32(out.astype(np.float32), base.entries[name].dtype)

    return Checkpoint(entries=map_layers(one, base.layer_names), metadata=base.metadata)


@dataclass(frozen=True)
class MergeRecipe:
    """Declarative description of one merge run."""

    method: str
    lambda_spec: float | list[float] | list[list[float]] | None = None
    eta: float = 0.7
    mask_source: str = "saliency"
    keep_fraction: float | None = None
    seed: int | None = None
    alpha: float | None = None

    def validate(self) -> None:
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}")
        _check_eta(self.eta)
        scalar = isinstance(self.lambda_spec, (int, float))
        if self.method in ("task_arithmetic", "ties") and not scalar:
            raise ValueError(f"{self.method} needs a scalar lambda")
        if self.method == "pcb_apply" and not (
            scalar or isinstance(self.lambda_spec, list)
        ):
            raise ValueError("pcb_apply needs a scalar or per-task lambda list")
        if self.method == "adamerging_apply" and not isinstance(self.lambda_spec, list):
            raise ValueError("adamerging_apply needs a per-task coefficient table")
        if self.keep_fraction is not None and self.method != "ties":
            raise ValueError("keep_fraction applies to ties only")
        if self.method == "ties" and self.keep_fraction is None:
            raise ValueError("ties needs keep_fraction")
        if self.method == "wise_ft" and self.alpha is None:
            raise ValueError("wise_ft needs alpha")

    def canonical_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, separators=(",", ":"))


def run_recipe(
    recipe: MergeRecipe,
    base: Checkpoint | None,
    tvs: Sequence[TaskVector] = (),
    ckpts: Sequence[Checkpoint] = (),
    mask: SharedMask | ParameterMask | None = None,
    betas: Sequence[Checkpoint] = (),
) -> Checkpoint:
    """Execute a validated recipe and stamp it into the output metadata."""
    recipe.validate()
    if recipe.method == "weight_average":
        merged = weight_average(ckpts)
    elif recipe.method == "wise_ft":
        if base is None or len(ckpts) != 1:
            raise ValueError("wise_ft needs a base and exactly one fine-tuned checkpoint")
        merged = wise_ft(base, ckpts[0], recipe.alpha)
    elif base is None:
        raise ValueError(f"{recipe.method} needs a base checkpoint")
    elif recipe.method == "task_arithmetic":
        merged = task_arithmetic(base, tvs, float(recipe.lambda_spec), mask)
    elif recipe.method == "ties":
        merged = ties_merge(
            base, tvs, recipe.keep_fraction, float(recipe.lambda_spec), mask
        )
    elif recipe.method == "adamerging_apply":
        merged = adamerging_apply(base, tvs, recipe.lambda_spec, recipe.eta, mask)
    else:
        coeffs = recipe.lambda_spec
        if isinstance(coeffs, (int, float)):
            coeffs = [float(coeffs)] * len(tvs)
        merged = pcb_apply(base, tvs, betas, coeffs, mask)

    metadata = dict(merged.metadata or {})
    metadata["merge.recipe"] = recipe.canonical_json()
    return Checkpoint(entries=merged.entries, metadata=metadata)
