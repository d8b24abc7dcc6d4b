"""Layer saliency scoring and pruning masks.

The saliency of a layer within one task vector is the mean absolute
deviation of its parameters from the cross-task mean at that layer. Layers
scoring at or below the floor(L*eta)-th smallest score in their row are
pruned; the shared mask keeps a layer if any task keeps it. Baseline
scorers and mask generators used for ablations live here too, along with
the parameter-granularity variant of the same thresholding.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import rng
from .parallel import map_layers
from .task_vector import TaskVector, check_alignment, _shapes
from .tensor_store import Checkpoint, CompatibilityError, Dtype, Tensor


@dataclass(frozen=True)
class SaliencyMatrix:
    """K x L nonnegative layer scores with task and layer labels."""

    task_ids: list[str]
    layer_names: list[str]
    scores: np.ndarray

    def __post_init__(self) -> None:
        arr = np.asarray(self.scores, dtype=np.float64)
        if arr.shape != (len(self.task_ids), len(self.layer_names)):
            raise ValueError(
                f"scores shape {arr.shape} does not match "
                f"{len(self.task_ids)} tasks x {len(self.layer_names)} layers"
            )
        if np.isnan(arr).any():
            raise ValueError("saliency scores contain NaN")
        if (arr < 0).any():
            raise ValueError("saliency scores must be nonnegative")
        object.__setattr__(self, "scores", arr)

    def to_json_dict(self) -> dict:
        return {
            "task_ids": list(self.task_ids),
            "layer_names": list(self.layer_names),
            "scores": [[float(v) for v in row] for row in self.scores],
        }

    @classmethod
    def from_json_dict(cls, obj: dict) -> "SaliencyMatrix":
        return cls(
            task_ids=list(obj["task_ids"]),
            layer_names=list(obj["layer_names"]),
            scores=np.asarray(obj["scores"], dtype=np.float64),
        )


@dataclass(frozen=True)
class LayerMaskSet:
    """Per-task binary layer masks produced by thresholding."""

    task_ids: list[str]
    layer_names: list[str]
    masks: np.ndarray
    eta: float

    def __post_init__(self) -> None:
        arr = np.asarray(self.masks, dtype=np.uint8)
        if arr.shape != (len(self.task_ids), len(self.layer_names)):
            raise ValueError("mask shape does not match task/layer labels")
        if not np.isin(arr, (0, 1)).all():
            raise ValueError("mask values must be 0 or 1")
        object.__setattr__(self, "masks", arr)


@dataclass(frozen=True)
class SharedMask:
    """Single binary layer mask; 1 keeps the layer's task-vector delta."""

    layer_names: list[str]
    values: np.ndarray

    def __post_init__(self) -> None:
        arr = np.asarray(self.values, dtype=np.uint8)
        if arr.shape != (len(self.layer_names),):
            raise ValueError("mask length does not match layer names")
        if not np.isin(arr, (0, 1)).all():
            raise ValueError("mask values must be 0 or 1")
        object.__setattr__(self, "values", arr)

    def ones_count(self) -> int:
        return int(self.values.sum())

    def to_json_dict(self) -> dict:
        return {
            "layer_names": list(self.layer_names),
            "values": [int(v) for v in self.values],
        }

    @classmethod
    def from_json_dict(cls, obj: dict) -> "SharedMask":
        return cls(layer_names=list(obj["layer_names"]), values=obj["values"])


@dataclass(frozen=True)
class ParameterMask:
    """Elementwise binary masks matching the layer catalog shapes."""

    entries: dict[str, np.ndarray]

    def __post_init__(self) -> None:
        ordered = {
            name: np.asarray(arr, dtype=bool)
            for name, arr in sorted(self.entries.items())
        }
        object.__setattr__(self, "entries", ordered)

    @property
    def layer_names(self) -> list[str]:
        return list(self.entries)

    def ones_count(self) -> int:
        return int(sum(arr.sum() for arr in self.entries.values()))

    def to_checkpoint(self) -> Checkpoint:
        entries = {
            name: Tensor.from_f32(arr.astype(np.float32), Dtype.F32)
            for name, arr in self.entries.items()
        }
        return Checkpoint(entries=entries, metadata={"mask.kind": "parameter"})

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint) -> "ParameterMask":
        return cls(
            entries={name: t.to_f32() != 0.0 for name, t in ckpt.entries.items()}
        )


def _aligned_tvs(tvs: Sequence[TaskVector]) -> dict[str, tuple[int, ...]]:
    if not tvs:
        raise CompatibilityError("no task vectors given")
    shapes = _shapes(tvs[0])
    for tv in tvs[1:]:
        check_alignment(shapes, tv)
    return shapes


def compute_saliency(tvs: Sequence[TaskVector]) -> SaliencyMatrix:
    """Mean absolute deviation from the cross-task mean, per task and layer."""
    shapes = _aligned_tvs(tvs)
    k = len(tvs)

    def one(name: str) -> np.ndarray:
        flats = [tv.entries[name].to_f32().ravel().astype(np.float64) for tv in tvs]
        mean = np.zeros_like(flats[0])
        for flat in flats:
            mean = mean + flat
        mean /= k
        d = flats[0].size
        if d == 0:
            return np.zeros(k)
        return np.array([np.abs(flat - mean).sum() / d for flat in flats])

    columns = map_layers(one, list(shapes))
    scores = np.stack([columns[name] for name in shapes], axis=1)
    return SaliencyMatrix(
        task_ids=[tv.id for tv in tvs], layer_names=list(shapes), scores=scores
    )


def compute_absolute_score(tvs: Sequence[TaskVector]) -> SaliencyMatrix:
    """Ablation scorer: mean absolute value of each layer, per task."""
    shapes = _aligned_tvs(tvs)

    def one(name: str) -> np.ndarray:
        out = []
        for tv in tvs:
            flat = tv.entries[name].to_f32().ravel().astype(np.float64)
            out.append(np.abs(flat).sum() / flat.size if flat.size else 0.0)
        return np.array(out)

    columns = map_layers(one, list(shapes))
    scores = np.stack([columns[name] for name in shapes], axis=1)
    return SaliencyMatrix(
        task_ids=[tv.id for tv in tvs], layer_names=list(shapes), scores=scores
    )


def _check_eta(eta: float) -> None:
    if not (0.0 <= eta <= 1.0):
        raise ValueError(f"pruning ratio must be in [0, 1], got {eta}")


def threshold_mask(matrix: SaliencyMatrix, eta: float) -> LayerMaskSet:
    """Keep layers strictly above the floor(L*eta)-th smallest row score.

    floor(L*eta) == 0 keeps everything; ties at the threshold are pruned.
    """
    _check_eta(eta)
    if np.isnan(matrix.scores).any():
        raise ValueError("saliency scores contain NaN")
    n_layers = len(matrix.layer_names)
    cutoff_rank = math.floor(n_layers * eta)
    masks = np.ones_like(matrix.scores, dtype=np.uint8)
    if cutoff_rank > 0:
        for row, scores in enumerate(matrix.scores):
            threshold = np.sort(scores)[cutoff_rank - 1]
            masks[row] = scores > threshold
    return LayerMaskSet(
        task_ids=list(matrix.task_ids),
        layer_names=list(matrix.layer_names),
        masks=masks,
        eta=eta,
    )


def or_masks(maskset: LayerMaskSet) -> SharedMask:
    """Elementwise OR across tasks: prune only where every task prunes."""
    return SharedMask(
        layer_names=list(maskset.layer_names),
        values=maskset.masks.max(axis=0),
    )


def random_layer_mask(layer_names: Sequence[str] | int, eta: float, seed: int) -> SharedMask:
    """Ablation baseline: keep L - floor(L*eta) layers chosen by a seeded draw.

    Selection is keyed by (seed, position), so the same seed and layer count
    always retain the same positions.
    """
    _check_eta(eta)
    if isinstance(layer_names, int):
        width = len(str(max(layer_names - 1, 0)))
        layer_names = [f"layer_{i:0{width}d}" for i in range(layer_names)]
    names = list(layer_names)
    n_layers = len(names)
    n_keep = n_layers - math.floor(n_layers * eta)
    draws = rng.uniform(seed, "random-layer-mask", n_layers)
    keep = np.argsort(draws, kind="stable")[:n_keep]
    values = np.zeros(n_layers, dtype=np.uint8)
    values[keep] = 1
    return SharedMask(layer_names=names, values=values)


def parameter_saliency_mask(tvs: Sequence[TaskVector], eta: float) -> ParameterMask:
    """Parameter-granularity variant: threshold each task's deviation scores
    over all parameters at once, then OR the per-task masks."""
    _check_eta(eta)
    shapes = _aligned_tvs(tvs)
    k = len(tvs)
    names = list(shapes)

    flats = {
        name: [tv.entries[name].to_f32().ravel().astype(np.float64) for tv in tvs]
        for name in names
    }
    deviations: list[np.ndarray] = []
    for task in range(k):
        parts = []
        for name in names:
            mean = np.zeros_like(flats[name][0])
            for flat in flats[name]:
                mean = mean + flat
            mean /= k
            parts.append(np.abs(flats[name][task] - mean))
        deviations.append(np.concatenate(parts) if parts else np.zeros(0))

    total = deviations[0].size
    cutoff_rank = math.floor(total * eta)
    combined = np.zeros(total, dtype=bool)
    if cutoff_rank == 0:
        combined[:] = True
    else:
        for dev in deviations:
            threshold = np.sort(dev)[cutoff_rank - 1]
            combined |= dev > threshold

    entries: dict[str, np.ndarray] = {}
    offset = 0
    for name in names:
        size = flats[name][0].size
        entries[name] = combined[offset : offset + size].reshape(shapes[name])
        offset += size
    return ParameterMask(entries=entries)
