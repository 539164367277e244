"""Feature tensors, the SGT on-disk format, and flatten/stack conventions.

Everything downstream (solvers, banks, the scoring pipeline) moves data
through the three types defined here.  The flatten convention is fixed:
row-major over (row, column) with channels last, i.e. the flat index of
channel ``ch`` at pixel ``(y, x)`` of an ``h x w x c`` map is
``(y * w + x) * c + ch``.  That keeps the per-pixel channel slice of a
flattened vector contiguous, which the score conversion relies on.

SGT file layout (all integers little-endian):

    magic "SGT1" | u8 rank (=3) | u32 h | u32 w | u32 c | u32 level |
    h*w*c float32 payload in flatten order
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

SGT_MAGIC = b"SGT1"
_HEADER = struct.Struct("<4sBIIII")

# Refuse headers whose payload would exceed this many elements.
MAX_ELEMENTS = 2**31


class TensorFormatError(Exception):
    """Base class for SGT read/write failures."""


class BadMagicError(TensorFormatError):
    pass


class DimensionOverflowError(TensorFormatError):
    pass


class NonFiniteValueError(TensorFormatError):
    pass


class TruncatedPayloadError(TensorFormatError):
    pass


@dataclass(frozen=True)
class FeatureTensor:
    """One ``h x w x c`` float32 feature map at a single hierarchy level."""

    level: int
    data: np.ndarray  # shape (h, w, c), float32

    def __post_init__(self):
        if self.level < 1:
            raise ValueError(f"level must be >= 1, got {self.level}")
        if self.data.ndim != 3:
            raise ValueError(f"data must be h x w x c, got shape {self.data.shape}")
        if self.data.dtype != np.float32:
            object.__setattr__(self, "data", self.data.astype(np.float32))
        if not np.all(np.isfinite(self.data)):
            raise NonFiniteValueError("feature tensor contains NaN or Inf")

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.data.shape)  # type: ignore[return-value]


@dataclass(frozen=True)
class FlatFeature:
    """A flattened feature map, tagged with the id of its source image."""

    values: np.ndarray  # 1-D float64
    source_id: str = ""

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 1:
            raise ValueError(f"values must be 1-D, got shape {v.shape}")
        object.__setattr__(self, "values", v)

    @property
    def dim(self) -> int:
        return self.values.shape[0]


@dataclass(frozen=True)
class DictionaryMatrix:
    """Column-stacked flat features with cached column norms.

    ``matrix[:, i]`` is the i-th feature; indices are 0-based everywhere.
    """

    matrix: np.ndarray  # (dim, n) float64
    column_ids: tuple[str, ...]
    column_norms: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        if self.matrix.ndim != 2:
            raise ValueError("matrix must be 2-D")
        if len(self.column_ids) != self.matrix.shape[1]:
            raise ValueError("one id per column required")
        if self.column_norms is None:
            object.__setattr__(
                self, "column_norms", np.linalg.norm(self.matrix, axis=0)
            )

    @property
    def dim(self) -> int:
        return self.matrix.shape[0]

    @property
    def n_columns(self) -> int:
        return self.matrix.shape[1]

    def column(self, i: int) -> np.ndarray:
        return self.matrix[:, i]


def flatten(t: FeatureTensor, source_id: str = "") -> FlatFeature:
    """Flatten a feature tensor in the canonical (row, column, channel) order."""
    return FlatFeature(t.data.reshape(-1).astype(np.float64), source_id=source_id)


def reshape(flat: FlatFeature, shape: tuple[int, int, int], level: int) -> FeatureTensor:
    """Inverse of :func:`flatten`; exact for values that originated as float32."""
    h, w, c = shape
    if flat.dim != h * w * c:
        raise ValueError(f"cannot reshape dim {flat.dim} into {shape}")
    return FeatureTensor(level=level, data=flat.values.reshape(h, w, c).astype(np.float32))


def stack_dictionary(features: list[FlatFeature]) -> DictionaryMatrix:
    """Stack flat features as matrix columns, caching their L2 norms."""
    if not features:
        raise ValueError("cannot stack an empty feature list")
    dim = features[0].dim
    for f in features:
        if f.dim != dim:
            raise ValueError(f"dimension mismatch: {f.dim} != {dim} (id={f.source_id!r})")
    matrix = np.column_stack([f.values for f in features])
    ids = tuple(f.source_id for f in features)
    return DictionaryMatrix(matrix=matrix, column_ids=ids)


def write_tensor(t: FeatureTensor, path: str | Path) -> None:
    path = Path(path)
    header = _HEADER.pack(SGT_MAGIC, 3, t.height, t.width, t.channels, t.level)
    payload = t.data.reshape(-1).astype("<f4").tobytes()
    path.write_bytes(header + payload)


def read_tensor(path: str | Path) -> FeatureTensor:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise TruncatedPayloadError(f"{path}: file shorter than the header")
    magic, rank, h, w, c, level = _HEADER.unpack_from(raw)
    if magic != SGT_MAGIC:
        raise BadMagicError(f"{path}: bad magic {magic!r}")
    if rank != 3:
        raise TensorFormatError(f"{path}: unsupported rank {rank}")
    if min(h, w, c) < 1:
        raise TensorFormatError(f"{path}: non-positive dimension {(h, w, c)}")
    n = int(h) * int(w) * int(c)
    if n > MAX_ELEMENTS:
        raise DimensionOverflowError(f"{path}: {h}x{w}x{c} exceeds element limit")
    if level < 1:
        raise TensorFormatError(f"{path}: level must be >= 1, got {level}")
    payload = raw[_HEADER.size:]
    if len(payload) != 4 * n:
        raise TruncatedPayloadError(
            f"{path}: expected {4 * n} payload bytes, found {len(payload)}"
        )
    data = np.frombuffer(payload, dtype="<f4").reshape(h, w, c)
    if not np.all(np.isfinite(data)):
        raise NonFiniteValueError(f"{path}: payload contains NaN or Inf")
    return FeatureTensor(level=level, data=data.copy())
