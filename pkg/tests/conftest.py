from __future__ import annotations

import numpy as np
import pytest

from taskvec import Checkpoint, Dtype, TaskVector, Tensor


def tensor_from(values, dtype: Dtype = Dtype.F32) -> Tensor:
    return Tensor.from_f32(np.asarray(values, dtype=np.float32), dtype)


def checkpoint_from(named_values: dict, dtype: Dtype = Dtype.F32, metadata=None) -> Checkpoint:
    entries = {name: tensor_from(vals, dtype) for name, vals in named_values.items()}
    return Checkpoint(entries=entries, metadata=metadata)


def taskvector_from(named_values: dict, task_id: str = "t") -> TaskVector:
    entries = {name: tensor_from(vals) for name, vals in named_values.items()}
    return TaskVector(id=task_id, entries=entries)


def lattice(rng: np.random.Generator, shape) -> np.ndarray:
    """Random float32 values exact on a dyadic lattice (multiples of 2^-6)."""
    return (rng.integers(-64, 65, size=shape) * 2.0**-6).astype(np.float32)


def random_shapes(rng: np.random.Generator, n_layers: int, max_elements: int = 16):
    """Random layer names and small shapes, including scalars and matrices."""
    letters = "abcdefghjkmnpqrstuvwxyz"
    picks = rng.choice(len(letters), size=n_layers, replace=False)
    names = sorted(f"{letters[i]}.block" for i in picks)
    shapes = []
    for _ in range(n_layers):
        kind = rng.integers(0, 3)
        if kind == 0:
            shapes.append(())
        elif kind == 1:
            shapes.append((int(rng.integers(1, max_elements + 1)),))
        else:
            a = int(rng.integers(1, 5))
            b = int(rng.integers(1, max_elements // a + 1))
            shapes.append((a, b))
    return dict(zip(names, shapes))


def random_instance(seed: int, max_tasks: int = 5, max_layers: int = 12):
    """One random merging problem: base values plus K task-vector deltas."""
    rng = np.random.default_rng(seed)
    n_tasks = int(rng.integers(1, max_tasks + 1))
    n_layers = int(rng.integers(1, max_layers + 1))
    shapes = random_shapes(rng, n_layers)
    base = {name: lattice(rng, shape) for name, shape in shapes.items()}
    tvs = [
        {name: lattice(rng, shape) for name, shape in shapes.items()}
        for _ in range(n_tasks)
    ]
    return base, tvs


def as_flat_lists(named_arrays: dict) -> dict:
    """Library-side arrays to the naive reference's flat float lists."""
    return {
        name: [float(v) for v in np.asarray(arr, dtype=np.float32).ravel()]
        for name, arr in named_arrays.items()
    }


def ckpt_values(ckpt: Checkpoint) -> dict:
    return {name: t.to_f32() for name, t in ckpt.entries.items()}


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
