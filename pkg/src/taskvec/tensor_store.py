"""In-memory checkpoint model and safetensors file I/O.

The on-disk format is the safetensors layout: an 8-byte little-endian
unsigned header length N, N bytes of JSON mapping tensor names to
``{"dtype", "shape", "data_offsets"}`` (plus an optional ``__metadata__``
string map), followed by the raw tensor buffers with no gaps. Writing is
deterministic: tensors are laid out in lexicographic name order, so two
saves of the same checkpoint are byte-identical.

Only float dtypes F64/F32/F16/BF16 are supported. Raw bytes are the
source of truth for every tensor; arithmetic elsewhere decodes to float32
on demand and re-encodes with round-to-nearest-even.
"""

from __future__ import annotations

import enum
import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np


class FormatError(ValueError):
    """Raised for malformed safetensors files."""


class CompatibilityError(ValueError):
    """Raised when checkpoints disagree on names, shapes, or dtypes."""


class Dtype(str, enum.Enum):
    F64 = "F64"
    F32 = "F32"
    F16 = "F16"
    BF16 = "BF16"

    @property
    def itemsize(self) -> int:
        return _ITEMSIZE[self]


_ITEMSIZE = {Dtype.F64: 8, Dtype.F32: 4, Dtype.F16: 2, Dtype.BF16: 2}

# Little-endian numpy dtypes; BF16 has no numpy dtype and is handled by hand.
_NP_DTYPE = {Dtype.F64: "<f8", Dtype.F32: "<f4", Dtype.F16: "<f2"}


def _bf16_bytes_to_f32(data: bytes) -> np.ndarray:
    u16 = np.frombuffer(data, dtype="<u2")
    return (u16.astype(np.uint32) << np.uint32(16)).view("<f4")


def _f32_to_bf16_bytes(arr: np.ndarray) -> bytes:
    u32 = np.ascontiguousarray(arr, dtype="<f4").view("<u4")
    # Round-to-nearest-even via the carry trick; NaN forced quiet to avoid
    # the bias overflowing the exponent field.
    bias = np.uint32(0x7FFF) + ((u32 >> np.uint32(16)) & np.uint32(1))
    out = ((u32 + bias) >> np.uint32(16)).astype("<u2")
    nan = np.isnan(arr)
    if nan.any():
        quiet = ((u32 >> np.uint32(16)).astype("<u2")) | np.uint16(0x0040)
        out = np.where(nan, quiet, out)
    return out.astype("<u2").tobytes()


@dataclass(frozen=True)
class Tensor:
    """One named parameter block: dtype, shape, and its raw bytes."""

    dtype: Dtype
    shape: tuple[int, ...]
    data: bytes

    def __post_init__(self) -> None:
        if any(d < 0 for d in self.shape):
            raise ValueError(f"negative dimension in shape {self.shape}")
        expected = self.element_count * self.dtype.itemsize
        if len(self.data) != expected:
            raise ValueError(
                f"buffer holds {len(self.data)} bytes, shape {list(self.shape)} "
                f"with dtype {self.dtype.value} needs {expected}"
            )

    @property
    def element_count(self) -> int:
        n = 1
        for d in self.shape:
            n *= d
        return n

    def to_f32(self) -> np.ndarray:
        """Decode the buffer to a float32 array of this tensor's shape."""
        if self.dtype is Dtype.BF16:
            flat = _bf16_bytes_to_f32(self.data)
        else:
            flat = np.frombuffer(self.data, dtype=_NP_DTYPE[self.dtype])
            if self.dtype is not Dtype.F32:
                with np.errstate(over="ignore"):
                    flat = flat.astype("<f4")
        return flat.reshape(self.shape).copy()

    @classmethod
    def from_f32(cls, values: np.ndarray, dtype: Dtype) -> "Tensor":
        """Encode a float32 array into a tensor of the given storage dtype.

        Narrowing conversions use round-to-nearest-even; values beyond the
        target range become infinities.
        """
        arr = np.ascontiguousarray(values, dtype="<f4")
        if dtype is Dtype.BF16:
            data = _f32_to_bf16_bytes(arr)
        elif dtype is Dtype.F32:
            data = arr.tobytes()
        else:
            with np.errstate(over="ignore"):
                data = arr.astype(_NP_DTYPE[dtype]).tobytes()
        return cls(dtype=dtype, shape=tuple(int(d) for d in values.shape), data=data)


@dataclass(frozen=True)
class Checkpoint:
    """An ordered map of named tensors plus optional string metadata.

    Entries are kept in lexicographic name order; that order is the
    canonical layer indexing used by everything downstream.
    """

    entries: dict[str, Tensor]
    metadata: dict[str, str] | None = None

    def __post_init__(self) -> None:
        ordered = dict(sorted(self.entries.items()))
        object.__setattr__(self, "entries", ordered)

    @property
    def layer_names(self) -> list[str]:
        return list(self.entries)

    def __len__(self) -> int:
        return len(self.entries)


@dataclass(frozen=True)
class LayerInfo:
    name: str
    dtype: Dtype
    shape: tuple[int, ...]


@dataclass(frozen=True)
class LayerCatalog:
    """Shared layer structure of a family of compatible checkpoints."""

    layers: tuple[LayerInfo, ...] = field(default_factory=tuple)

    @property
    def names(self) -> list[str]:
        return [info.name for info in self.layers]

    def __len__(self) -> int:
        return len(self.layers)


def validate_compatibility(ckpts: Sequence[Checkpoint]) -> LayerCatalog:
    """Check that all checkpoints share names, shapes, and dtypes.

    Returns the common catalog in lexicographic name order; raises
    CompatibilityError naming the first offending tensor otherwise.
    """
    if not ckpts:
        raise CompatibilityError("no checkpoints given")
    first = ckpts[0]
    for other in ckpts[1:]:
        missing = first.entries.keys() - other.entries.keys()
        extra = other.entries.keys() - first.entries.keys()
        if missing:
            raise CompatibilityError(f"missing tensor {min(missing)!r}")
        if extra:
            raise CompatibilityError(f"extra tensor {min(extra)!r}")
        for name, ref in first.entries.items():
            got = other.entries[name]
            if got.shape != ref.shape:
                raise CompatibilityError(
                    f"shape mismatch for {name!r}: {list(ref.shape)} vs {list(got.shape)}"
                )
            if got.dtype is not ref.dtype:
                raise CompatibilityError(
                    f"dtype mismatch for {name!r}: {ref.dtype.value} vs {got.dtype.value}"
                )
    return LayerCatalog(
        tuple(LayerInfo(name, t.dtype, t.shape) for name, t in first.entries.items())
    )


def _header_bytes(ckpt: Checkpoint) -> bytes:
    header: dict[str, object] = {}
    if ckpt.metadata is not None:
        header["__metadata__"] = dict(ckpt.metadata)
    offset = 0
    for name, tensor in ckpt.entries.items():
        end = offset + len(tensor.data)
        header[name] = {
            "dtype": tensor.dtype.value,
            "shape": list(tensor.shape),
            "data_offsets": [offset, end],
        }
        offset = end
    return json.dumps(header, separators=(",", ":"), ensure_ascii=False).encode("utf-8")


def checkpoint_fingerprint(ckpt: Checkpoint) -> str:
    """Hex digest of the checkpoint's canonical serialized header."""
    return hashlib.sha256(_header_bytes(ckpt)).hexdigest()


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    """Write a checkpoint as a safetensors file (deterministic layout)."""
    header = _header_bytes(ckpt)
    with open(path, "wb") as fh:
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for tensor in ckpt.entries.values():
            fh.write(tensor.data)


def load_checkpoint(path: str | Path) -> Checkpoint:
    """Read a safetensors file, materializing every tensor.

    Rejects malformed headers, unsupported dtypes, and any layout whose
    data regions overlap, leave gaps, or run past the buffer.
    """
    raw = Path(path).read_bytes()
    if len(raw) < 8:
        raise FormatError("malformed header length: file shorter than 8 bytes")
    (header_len,) = struct.unpack("<Q", raw[:8])
    if header_len > len(raw) - 8:
        raise FormatError("malformed header length: header runs past end of file")
    try:
        header = json.loads(raw[8 : 8 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"header is not valid JSON: {exc}") from exc
    if not isinstance(header, dict):
        raise FormatError("header JSON must be an object")

    data = raw[8 + header_len :]
    metadata: dict[str, str] | None = None
    entries: dict[str, Tensor] = {}
    spans: list[tuple[int, int, str]] = []
    for name, desc in header.items():
        if name == "__metadata__":
            if not isinstance(desc, dict) or not all(
                isinstance(k, str) and isinstance(v, str) for k, v in desc.items()
            ):
                raise FormatError("__metadata__ must map strings to strings")
            metadata = dict(desc)
            continue
        if not isinstance(desc, dict):
            raise FormatError(f"tensor entry {name!r} is not an object")
        try:
            dtype = Dtype(desc["dtype"])
        except (KeyError, ValueError):
            raise FormatError(
                f"unsupported dtype {desc.get('dtype')!r} for tensor {name!r}"
            ) from None
        shape = desc.get("shape")
        if not isinstance(shape, list) or not all(
            isinstance(d, int) and d >= 0 for d in shape
        ):
            raise FormatError(f"invalid shape for tensor {name!r}")
        offsets = desc.get("data_offsets")
        if not isinstance(offsets, list) or len(offsets) != 2 or not all(
            isinstance(o, int) for o in offsets
        ):
            raise FormatError(f"invalid data_offsets for tensor {name!r}")
        begin, end = offsets
        if begin < 0 or end < begin or end > len(data):
            raise FormatError(f"offset out of bounds for tensor {name!r}")
        n_elem = 1
        for d in shape:
            n_elem *= d
        if end - begin != n_elem * dtype.itemsize:
            raise FormatError(
                f"data_offsets span {end - begin} bytes but tensor {name!r} needs "
                f"{n_elem * dtype.itemsize}"
            )
        spans.append((begin, end, name))
        entries[name] = Tensor(dtype=dtype, shape=tuple(shape), data=data[begin:end])

    cursor = 0
    for begin, end, name in sorted(spans):
        if begin < cursor:
            raise FormatError(f"overlapping data regions at tensor {name!r}")
        if begin > cursor:
            raise FormatError(f"gap in data regions before tensor {name!r}")
        cursor = end
    if cursor != len(data):
        raise FormatError("trailing bytes after last tensor")

    return Checkpoint(entries=entries, metadata=metadata)
