"""Task vectors: the per-layer deltas between fine-tuned and base weights."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .parallel import map_layers
from .tensor_store import (
    Checkpoint,
    CompatibilityError,
    Dtype,
    Tensor,
    checkpoint_fingerprint,
    load_checkpoint,
    save_checkpoint,
    validate_compatibility,
)

BASE_FINGERPRINT_KEY = "taskvec.base_fingerprint"
TASK_ID_KEY = "taskvec.id"


@dataclass(frozen=True)
class TaskVector:
    """Per-layer weight deltas of one fine-tuned model, stored as F32."""

    id: str
    entries: dict[str, Tensor]
    base_fingerprint: str | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "entries", dict(sorted(self.entries.items())))

    @property
    def layer_names(self) -> list[str]:
        return list(self.entries)


def check_alignment(reference_names_shapes: dict[str, tuple[int, ...]], tv: TaskVector) -> None:
    """Require the task vector to cover exactly the reference layers/shapes."""
    names = reference_names_shapes.keys()
    got = tv.entries.keys()
    if names != got:
        missing = names - got
        if missing:
            raise CompatibilityError(f"task vector {tv.id!r} missing tensor {min(missing)!r}")
        raise CompatibilityError(
            f"task vector {tv.id!r} has extra tensor {min(got - names)!r}"
        )
    for name, shape in reference_names_shapes.items():
        if tv.entries[name].shape != shape:
            raise CompatibilityError(
                f"shape mismatch for {name!r} in task vector {tv.id!r}"
            )


def _shapes(ckpt_or_tv) -> dict[str, tuple[int, ...]]:
    return {name: t.shape for name, t in ckpt_or_tv.entries.items()}


def diff(finetuned: Checkpoint, base: Checkpoint, task_id: str = "task") -> TaskVector:
    """Fine-tuned minus base, elementwise in float32."""
    validate_compatibility([finetuned, base])

    def one(name: str) -> Tensor:
        delta = finetuned.entries[name].to_f32() - base.entries[name].to_f32()
        return Tensor.from_f32(delta, Dtype.F32)

    entries = map_layers(one, base.layer_names)
    return TaskVector(
        id=task_id, entries=entries, base_fingerprint=checkpoint_fingerprint(base)
    )


def apply(base: Checkpoint, delta: TaskVector, coeff: float) -> Checkpoint:
    """base + coeff * delta, stored back in the base checkpoint's dtype."""
    if not math.isfinite(coeff):
        raise ValueError(f"non-finite coefficient {coeff!r}")
    check_alignment(_shapes(base), delta)

    def one(name: str) -> Tensor:
        tensor = base.entries[name]
        values = tensor.to_f32().astype(np.float64)
        values += coeff * delta.entries[name].to_f32().astype(np.float64)
        return Tensor.from_f32(values.astype(np.float32), tensor.dtype)

    return Checkpoint(entries=map_layers(one, base.layer_names), metadata=base.metadata)


def linear_combine(terms: Sequence[tuple[TaskVector, float]], task_id: str = "combined") -> TaskVector:
    """Sum of coeff_k * tv_k, accumulated in float64 in input order."""
    if not terms:
        raise CompatibilityError("no task vectors given")
    first = terms[0][0]
    shapes = _shapes(first)
    for tv, coeff in terms:
        check_alignment(shapes, tv)
        if not math.isfinite(coeff):
            raise ValueError(f"non-finite coefficient {coeff!r}")

    def one(name: str) -> Tensor:
        acc = np.zeros(shapes[name], dtype=np.float64)
        for tv, coeff in terms:
            acc = acc + coeff * tv.entries[name].to_f32().astype(np.float64)
        return Tensor.from_f32(acc.astype(np.float32), Dtype.F32)

    return TaskVector(id=task_id, entries=map_layers(one, list(shapes)))


def save_task_vector(tv: TaskVector, path: str | Path) -> None:
    """Persist a task vector as safetensors with provenance metadata."""
    metadata = {TASK_ID_KEY: tv.id}
    if tv.base_fingerprint is not None:
        metadata[BASE_FINGERPRINT_KEY] = tv.base_fingerprint
    save_checkpoint(Checkpoint(entries=tv.entries, metadata=metadata), path)


def load_task_vector(path: str | Path) -> TaskVector:
    ckpt = load_checkpoint(path)
    meta = ckpt.metadata or {}
    return TaskVector(
        id=meta.get(TASK_ID_KEY, Path(path).stem),
        entries=ckpt.entries,
        base_fingerprint=meta.get(BASE_FINGERPRINT_KEY),
    )
