"""Acceptance suite: one test per release criterion, each printing a
pass/fail line. Tolerances are fixed here and nowhere else."""

import functools
import math
import sys
import time

import numpy as np
import pytest
import reference as ref
from conftest import (
    as_flat_lists,
    checkpoint_from,
    lattice,
    random_instance,
    taskvector_from,
)

import taskvec
from taskvec import (
    Checkpoint,
    Dtype,
    SyntheticSpec,
    Tensor,
    compute_saliency,
    dare,
    h_score,
    load_checkpoint,
    mwp,
    or_masks,
    pcb_apply,
    prop1_experiment,
    save_checkpoint,
    task_arithmetic,
    threshold_mask,
    ties_merge,
)

VALUE_TOL = 1e-12


def criterion(number: int, title: str):
    """Print the criterion verdict even under pytest capture."""

    def wrap(fn):
        @functools.wraps(fn)
        def run(*args, **kwargs):
            try:
                result = fn(*args, **kwargs)
            except BaseException:
                print(f"criterion {number} ({title}): FAIL", file=sys.__stdout__)
                raise
            print(f"criterion {number} ({title}): PASS", file=sys.__stdout__)
            return result

        return run

    return wrap


HSCORE_VITB32 = [
    (48.0, 61.5, 53.9),
    (90.5, 49.7, 64.2),
    (65.8, 61.3, 63.5),
    (69.1, 51.3, 58.9),
    (72.8, 60.9, 66.3),
    (72.9, 58.0, 64.6),
    (72.7, 61.3, 66.5),
    (71.1, 53.2, 60.9),
    (75.4, 56.5, 64.6),
    (73.7, 53.7, 62.1),
    (76.1, 56.6, 64.9),
    (80.1, 57.7, 67.1),
    (77.3, 61.7, 68.6),
    (81.1, 57.6, 67.4),
    (77.1, 61.4, 68.4),
    (75.8, 53.2, 62.5),
    (77.3, 59.7, 67.4),
]


@criterion(1, "h-score reproduction")
def test_criterion_1_hscore_reproduction():
    start = time.perf_counter()
    for id_avg, ood_avg, printed in HSCORE_VITB32:
        assert abs(h_score(id_avg, ood_avg) - printed) <= 0.05, (id_avg, ood_avg)
    assert time.perf_counter() - start < 1.0


@criterion(2, "oracle equivalence")
def test_criterion_2_oracle_equivalence():
    start = time.perf_counter()
    for seed in range(100):
        base_vals, tv_values = random_instance(seed, max_tasks=5, max_layers=12)
        base = checkpoint_from(base_vals)
        tvs = [taskvector_from(v, f"t{i}") for i, v in enumerate(tv_values)]
        naive_base = as_flat_lists(base_vals)
        naive_tvs = [as_flat_lists(v) for v in tv_values]
        pick = np.random.default_rng(10_000 + seed)
        eta = float(pick.choice([0.0, 0.3, 0.7, 1.0]))
        keep = float(pick.choice([0.25, 0.5, 0.75, 1.0]))
        names = base.layer_names

        matrix = compute_saliency(tvs)
        want_scores = ref.ref_saliency(naive_tvs)
        np.testing.assert_allclose(matrix.scores, want_scores, atol=VALUE_TOL)

        maskset = threshold_mask(matrix, eta)
        want_masks = ref.ref_threshold(want_scores, eta)
        assert maskset.masks.tolist() == want_masks

        shared = or_masks(maskset)
        assert shared.values.tolist() == ref.ref_or(want_masks)
        naive_shared = dict(zip(names, shared.values.tolist()))

        got_ta = task_arithmetic(base, tvs, 0.3, shared)
        want_ta = ref.ref_task_arithmetic(naive_base, naive_tvs, 0.3, naive_shared)
        for name in names:
            np.testing.assert_allclose(
                got_ta.entries[name].to_f32().ravel(), want_ta[name], atol=VALUE_TOL
            )

        got_ties = ties_merge(base, tvs, keep, 0.3, shared)
        want_ties = ref.ref_ties(naive_base, naive_tvs, keep, 0.3, naive_shared)
        for name in names:
            np.testing.assert_allclose(
                got_ties.entries[name].to_f32().ravel(), want_ties[name], atol=VALUE_TOL
            )

        got_mwp = mwp(tvs[0], keep)
        want_mwp = ref.ref_mwp(naive_tvs[0], keep)
        for name in names:
            np.testing.assert_array_equal(
                got_mwp.entries[name].to_f32().ravel(),
                np.array(want_mwp[name], dtype=np.float32),
            )

        beta_vals = [
            {n: np.abs(lattice(pick, base.entries[n].shape)) for n in names}
            for _ in tvs
        ]
        betas = [checkpoint_from(v) for v in beta_vals]
        coeffs = [float(c) for c in pick.choice([0.5, 1.0, 1.2], size=len(tvs))]
        got_pcb = pcb_apply(base, tvs, betas, coeffs, shared)
        want_pcb = ref.ref_pcb(
            naive_base,
            naive_tvs,
            [as_flat_lists(v) for v in beta_vals],
            coeffs,
            naive_shared,
        )
        for name in names:
            np.testing.assert_allclose(
                got_pcb.entries[name].to_f32().ravel(), want_pcb[name], atol=VALUE_TOL
            )
    assert time.perf_counter() - start < 30.0


@criterion(3, "pretrained recovery")
def test_criterion_3_pretrained_recovery():
    start = time.perf_counter()
    rng = np.random.default_rng(77)
    for _ in range(8):
        n_layers = int(rng.integers(1, 9))
        shapes = {f"l{i:02d}.w": (int(rng.integers(1, 6)),) for i in range(n_layers)}
        base = checkpoint_from({n: lattice(rng, s) for n, s in shapes.items()})
        tv = taskvector_from({n: lattice(rng, s) for n, s in shapes.items()}, "only")
        for eta in (1.0 / n_layers + 1e-9, 0.4, 0.7, 1.0):
            if eta > 1.0 or eta <= 1.0 / n_layers:
                continue
            shared = or_masks(threshold_mask(compute_saliency([tv]), eta))
            merged = task_arithmetic(base, [tv], 0.3, shared)
            for name in base.entries:
                assert merged.entries[name].data == base.entries[name].data
    assert time.perf_counter() - start < 1.0


@criterion(4, "mask cardinality and OR dominance")
def test_criterion_4_cardinality_and_dominance():
    rng = np.random.default_rng(4)
    for _ in range(50):
        k = int(rng.integers(1, 6))
        n_layers = int(rng.integers(1, 13))
        # distinct scores per row: a shuffled strictly increasing sequence
        rows = np.stack(
            [rng.permutation(np.arange(1, n_layers + 1)) + rng.uniform(0, 0.25)
             for _ in range(k)]
        ).astype(float)
        matrix = taskvec.SaliencyMatrix(
            task_ids=[f"t{i}" for i in range(k)],
            layer_names=[f"l{i}" for i in range(n_layers)],
            scores=rows,
        )
        for eta in (0.0, 0.3, 0.7, 1.0):
            maskset = threshold_mask(matrix, eta)
            expected_ones = n_layers - math.floor(n_layers * eta)
            for row in maskset.masks:
                assert int(row.sum()) == expected_ones
            shared = or_masks(maskset)
            assert (shared.values >= maskset.masks).all()


@criterion(5, "scale and translation invariance")
def test_criterion_5_invariances():
    for seed in range(20):
        rng = np.random.default_rng(200 + seed)
        n_layers = int(rng.integers(2, 8))
        shapes = {f"l{i}.w": (int(rng.integers(1, 8)),) for i in range(n_layers)}
        tv_values = [
            {n: rng.normal(size=s).astype(np.float32) for n, s in shapes.items()}
            for _ in range(3)
        ]
        tvs = [taskvector_from(v, f"t{i}") for i, v in enumerate(tv_values)]
        base_masks = threshold_mask(compute_saliency(tvs), 0.7).masks.tolist()

        for scale in (0.5, 2.0, 3.0):
            scaled = [
                taskvector_from(
                    {n: np.float32(scale) * v for n, v in vals.items()}, f"t{i}"
                )
                for i, vals in enumerate(tv_values)
            ]
            scaled_masks = threshold_mask(compute_saliency(scaled), 0.7).masks.tolist()
            assert scaled_masks == base_masks

        shift_layer = f"l{int(rng.integers(0, n_layers))}.w"
        shift = rng.normal(size=shapes[shift_layer]).astype(np.float32)
        shifted = [
            taskvector_from(
                {
                    n: (v + shift if n == shift_layer else v)
                    for n, v in vals.items()
                },
                f"t{i}",
            )
            for i, vals in enumerate(tv_values)
        ]
        before = compute_saliency(tvs).scores
        after = compute_saliency(shifted).scores
        np.testing.assert_allclose(after, before, atol=1e-6)


@criterion(6, "dare unbiasedness and determinism")
def test_criterion_6_dare():
    n = 100_000
    p = 0.9
    tv = taskvector_from({"w": np.full(n, 2.0, dtype=np.float32)}, "const")
    out = dare(tv, p, seed=2024)
    values = out.entries["w"].to_f32().astype(np.float64)
    # survivors are 2/(1-p) with probability 1-p: mean 2, per-element
    # variance 4p/(1-p) = 36
    stderr = math.sqrt(36.0 / n)
    assert abs(values.mean() - 2.0) <= 3.0 * stderr
    again = dare(tv, p, seed=2024)
    assert again.entries["w"].data == out.entries["w"].data


@criterion(7, "synthetic diversity separation")
def test_criterion_7_prop1_separation():
    start = time.perf_counter()
    passes = 0
    for seed in range(100):
        spec = SyntheticSpec(
            tasks=8, dim=64, subset_size=8, signal=1.0, noise=0.01, seed=seed
        )
        report = prop1_experiment(spec)
        passes += report.ratio > math.sqrt(8)
    assert passes >= 95
    assert time.perf_counter() - start < 10.0


@criterion(8, "safetensors round-trip")
def test_criterion_8_round_trip(tmp_path):
    rng = np.random.default_rng(8)
    dtypes = [Dtype.F64, Dtype.F32, Dtype.F16, Dtype.BF16]
    for case in range(50):
        entries = {}
        for i in range(int(rng.integers(1, 5))):
            dtype = dtypes[int(rng.integers(0, 4))]
            shape = tuple(
                int(d) for d in rng.integers(1, 5, size=int(rng.integers(0, 3)))
            )
            count = int(np.prod(shape)) if shape else 1
            raw = rng.bytes(count * dtype.itemsize)
            entries[f"t{case}.{i}"] = Tensor(dtype=dtype, shape=shape, data=raw)
        ckpt = Checkpoint(entries=entries, metadata={"case": str(case)})
        first = tmp_path / f"{case}-first.safetensors"
        second = tmp_path / f"{case}-second.safetensors"
        save_checkpoint(ckpt, first)
        save_checkpoint(load_checkpoint(first), second)
        assert first.read_bytes() == second.read_bytes()
