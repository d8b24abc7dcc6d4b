"""Diversity of task-vector neuron blocks and the synthetic separation check.

The diversity of a task at a chosen block of coordinates is the Euclidean
norm of that block's deviation from the cross-task mean block. The
synthetic experiment plants a large-magnitude block into one task, fills
everything else with Gaussian noise, and checks that the planted task's
diversity beats the noise task's by more than sqrt(K).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .task_vector import TaskVector
from .tensor_store import Dtype, Tensor

SYNTHETIC_LAYER = "block"


@dataclass(frozen=True)
class NeuronSelector:
    """A set of flat parameter indices within one layer."""

    layer_name: str
    index_set: tuple[int, ...]

    def __post_init__(self) -> None:
        if len(self.index_set) == 0:
            raise ValueError("selector needs at least one index")
        if len(set(self.index_set)) != len(self.index_set):
            raise ValueError("selector indices must be unique")
        if any(i < 0 for i in self.index_set):
            raise ValueError("selector indices must be nonnegative")


@dataclass(frozen=True)
class SyntheticSpec:
    """Parameters of the planted-block separation experiment."""

    tasks: int
    dim: int
    subset_size: int
    signal: float
    noise: float
    seed: int

    def __post_init__(self) -> None:
        if self.tasks < 2:
            raise ValueError("need at least two tasks")
        if not (1 <= self.subset_size <= self.dim):
            raise ValueError("subset size must be in [1, dim]")
        if not (self.signal > 0):
            raise ValueError("signal magnitude must be positive")
        if self.noise < 0:
            raise ValueError("noise level must be nonnegative")


@dataclass(frozen=True)
class DiversityReport:
    dv_per_task: list[float]
    ratio: float
    threshold: float
    passed: bool

    def to_json_dict(self) -> dict:
        return {
            "K": len(self.dv_per_task),
            "dv_k1": self.dv_per_task[0],
            "dv_k2": self.dv_per_task[1],
            "ratio": self.ratio if math.isfinite(self.ratio) else None,
            "sqrt_K": self.threshold,
            "passed": self.passed,
        }


def diversity(tvs: Sequence[TaskVector], selector: NeuronSelector) -> list[float]:
    """Norm of each task's selected block's deviation from the mean block."""
    if not tvs:
        raise ValueError("no task vectors given")
    indices = np.asarray(selector.index_set, dtype=np.intp)
    blocks = []
    for tv in tvs:
        tensor = tv.entries.get(selector.layer_name)
        if tensor is None:
            raise ValueError(f"selector layer {selector.layer_name!r} not found")
        if indices.max() >= tensor.element_count:
            raise ValueError(
                f"selector index {int(indices.max())} out of range for "
                f"{selector.layer_name!r} with {tensor.element_count} elements"
            )
        blocks.append(tensor.to_f32().ravel()[indices].astype(np.float64))
    mean = np.zeros_like(blocks[0])
    for block in blocks:
        mean = mean + block
    mean /= len(blocks)
    return [float(np.linalg.norm(block - mean)) for block in blocks]


def prop1_experiment(spec: SyntheticSpec) -> DiversityReport:
    """Plant a discriminative block in task 0 and compare diversities.

    Deterministic given the spec: the planted signs and all noise draws
    come from one seeded generator. The ratio compares task 0 (planted)
    against task 1 (noise only); a zero denominator reports infinity.
    """
    gen = np.random.default_rng(spec.seed)
    if spec.noise > 0:
        values = gen.normal(0.0, spec.noise, size=(spec.tasks, spec.dim))
    else:
        values = np.zeros((spec.tasks, spec.dim))
    signs = gen.integers(0, 2, size=spec.subset_size) * 2 - 1
    values[0, : spec.subset_size] = spec.signal * signs

    tvs = [
        TaskVector(
            id=f"task{k}",
            entries={
                SYNTHETIC_LAYER: Tensor.from_f32(
                    values[k].astype(np.float32), Dtype.F32
                )
            },
        )
        for k in range(spec.tasks)
    ]
    selector = NeuronSelector(
        layer_name=SYNTHETIC_LAYER, index_set=tuple(range(spec.subset_size))
    )
    dv = diversity(tvs, selector)
    threshold = math.sqrt(spec.tasks)
    if dv[1] > 0:
        ratio = dv[0] / dv[1]
        passed = ratio > threshold
    else:
        ratio = math.inf
        passed = dv[0] > 0
    return DiversityReport(dv_per_task=dv, ratio=ratio, threshold=threshold, passed=passed)


def h_score(id_avg: float, ood_avg: float) -> float:
    """Harmonic mean of the two average accuracies."""
    if id_avg <= 0 or ood_avg <= 0:
        raise ValueError("both averages must be positive")
    return 2.0 * id_avg * ood_avg / (id_avg + ood_avg)
