"""Synthetic union-of-subspaces benchmarks.

Two generators: :func:`union_of_subspaces` draws plain unit-norm vectors
from random low-dimensional subspaces (solver-level experiments), and
:func:`gen_synthetic` builds a full multi-level feature-map dataset with
planted block anomalies and ground-truth masks (pipeline and metric
experiments).

The multi-level layout mirrors a convolutional hierarchy: each level up
halves the spatial grid and doubles the channels, so the flattened
dimension halves.  Every image keeps one coefficient vector that is shared
across levels against per-level orthonormal bases, which makes the levels
of one image consistent the way backbone features of one image are.
Anomalies are fixed-norm random perturbations confined to a spatial block,
scaled to each level's grid; masks mark the matching block at output
resolution.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor_io import FeatureTensor


@dataclass(frozen=True)
class SyntheticSpec:
    ambient_dim: int = 2048  # flattened dim of the finest level
    subspace_dim: int = 5
    n_subspaces: int = 1
    points_per_subspace: int = 60
    noise_sigma: float = 0.0  # per-coordinate noise std
    anomaly_block: tuple[int, int, int, int] = (4, 4, 4, 4)  # y0, x0, h, w
    seed: int = 0
    grid: tuple[int, int] = (16, 16)  # finest-level spatial size
    levels: tuple[int, ...] = (2, 3)
    ref_level: int = 4
    n_test: int = 10  # anomalous test samples
    n_normal_test: int = 0
    anomaly_norm: float = 0.5  # perturbation L2 norm per level
    mask_size: tuple[int, int] = (256, 256)
    # Optional anisotropy: this fraction of nominal points only uses the
    # first cluster_dims coefficient directions, leaving the remaining
    # directions to a minority of spanning points.
    cluster_dims: int = 0
    cluster_fraction: float = 0.0

    def __post_init__(self):
        if self.subspace_dim >= self.ambient_dim:
            raise ValueError("subspace_dim must be < ambient_dim")
        if not 0.0 <= self.cluster_fraction <= 1.0:
            raise ValueError("cluster_fraction must be in [0, 1]")
        if self.cluster_fraction > 0 and not 1 <= self.cluster_dims < self.subspace_dim:
            raise ValueError("cluster_dims must be in [1, subspace_dim) when clustering")
        gh, gw = self.grid
        if self.ambient_dim % (gh * gw) != 0:
            raise ValueError("ambient_dim must be divisible by the grid area")
        depth = self.ref_level - min(self.levels)
        if depth < 0:
            raise ValueError("ref_level must be >= the finest level")
        if gh % (1 << depth) or gw % (1 << depth):
            raise ValueError("grid must be divisible by 2^(ref_level - min level)")
        if self.subspace_dim >= self.ambient_dim >> depth:
            raise ValueError("subspace_dim must be < the deepest level's dim")
        y0, x0, bh, bw = self.anomaly_block
        if min(y0, x0) < 0 or min(bh, bw) < 1 or y0 + bh > gh or x0 + bw > gw:
            raise ValueError(f"anomaly block {self.anomaly_block} exceeds grid {self.grid}")
        mh, mw = self.mask_size
        if mh % gh or mw % gw:
            raise ValueError("mask_size must be an integer multiple of the grid")

    def level_shapes(self) -> dict[int, tuple[int, int, int]]:
        gh, gw = self.grid
        channels = self.ambient_dim // (gh * gw)
        shapes = {}
        for lv in sorted({*self.levels, self.ref_level}):
            f = 1 << (lv - min(self.levels))
            shapes[lv] = (gh // f, gw // f, channels * f)
        return shapes


@dataclass(frozen=True)
class SyntheticDataset:
    spec: SyntheticSpec
    nominal: dict[str, dict[int, FeatureTensor]]
    test: dict[str, dict[int, FeatureTensor]]
    masks: dict[str, np.ndarray]  # (H, W) bool; all-false for normal samples
    nominal_subspace: dict[str, int] = field(default_factory=dict)
    test_subspace: dict[str, int] = field(default_factory=dict)


def union_of_subspaces(
    ambient_dim: int,
    subspace_dim: int,
    n_subspaces: int,
    points_per_subspace: int,
    seed: int,
    noise_sigma: float = 0.0,
) -> tuple[np.ndarray, np.ndarray, list[np.ndarray]]:
    """Columns drawn from random subspaces: (data (D, n), labels, bases)."""
    rng = np.random.default_rng(seed)
    bases = [_orthonormal_basis(rng, ambient_dim, subspace_dim) for _ in range(n_subspaces)]
    cols, labels = [], []
    for p in range(n_subspaces * points_per_subspace):
        s = p % n_subspaces
        cols.append(_unit_point(rng, bases[s], noise_sigma))
        labels.append(s)
    return np.column_stack(cols), np.asarray(labels), bases


def _orthonormal_basis(rng: np.random.Generator, dim: int, d: int) -> np.ndarray:
    q, _ = np.linalg.qr(rng.standard_normal((dim, d)))
    return q[:, :d]


def _unit_point(rng: np.random.Generator, basis: np.ndarray, noise_sigma: float) -> np.ndarray:
    a = rng.standard_normal(basis.shape[1])
    x = basis @ (a / np.linalg.norm(a))
    if noise_sigma > 0:
        x = x + noise_sigma * rng.standard_normal(basis.shape[0])
    return x


def _block_at_level(
    spec: SyntheticSpec, shape: tuple[int, int, int]
) -> tuple[slice, slice]:
    y0, x0, bh, bw = spec.anomaly_block
    f = spec.grid[0] // shape[0]
    ys = slice(y0 // f, max(y0 // f + 1, (y0 + bh) // f))
    xs = slice(x0 // f, max(x0 // f + 1, (x0 + bw) // f))
    return ys, xs


def gen_synthetic(spec: SyntheticSpec) -> SyntheticDataset:
    """Deterministic dataset from the spec; same seed, same bytes."""
    rng = np.random.default_rng(spec.seed)
    shapes = spec.level_shapes()
    all_levels = sorted(shapes)

    bases: dict[tuple[int, int], np.ndarray] = {}
    for s in range(spec.n_subspaces):
        for lv in all_levels:
            h, w, c = shapes[lv]
            bases[(s, lv)] = _orthonormal_basis(rng, h * w * c, spec.subspace_dim)

    def make_sample(subspace: int, clusterable: bool = False) -> dict[int, FeatureTensor]:
        a = rng.standard_normal(spec.subspace_dim)
        clustered = rng.uniform() < spec.cluster_fraction
        if clusterable and clustered:
            a[spec.cluster_dims :] = 0.0
        a /= np.linalg.norm(a)
        feats = {}
        for lv in all_levels:
            h, w, c = shapes[lv]
            x = bases[(subspace, lv)] @ a
            if spec.noise_sigma > 0:
                x = x + spec.noise_sigma * rng.standard_normal(x.size)
            feats[lv] = FeatureTensor(level=lv, data=x.reshape(h, w, c).astype(np.float32))
        return feats

    def plant_anomaly(feats: dict[int, FeatureTensor]) -> dict[int, FeatureTensor]:
        out = {}
        for lv in all_levels:
            shape = shapes[lv]
            ys, xs = _block_at_level(spec, shape)
            bump = np.zeros(shape)
            bump[ys, xs, :] = rng.standard_normal(bump[ys, xs, :].shape)
            bump *= spec.anomaly_norm / np.linalg.norm(bump)
            out[lv] = FeatureTensor(
                level=lv, data=(feats[lv].data.astype(np.float64) + bump).astype(np.float32)
            )
        return out

    nominal: dict[str, dict[int, FeatureTensor]] = {}
    nominal_subspace: dict[str, int] = {}
    for i in range(spec.n_subspaces * spec.points_per_subspace):
        sid = f"n{i:04d}"
        nominal_subspace[sid] = i % spec.n_subspaces
        nominal[sid] = make_sample(i % spec.n_subspaces, clusterable=True)

    mh, mw = spec.mask_size
    fy, fx = mh // spec.grid[0], mw // spec.grid[1]
    y0, x0, bh, bw = spec.anomaly_block
    block_mask = np.zeros((mh, mw), dtype=bool)
    block_mask[y0 * fy : (y0 + bh) * fy, x0 * fx : (x0 + bw) * fx] = True

    test: dict[str, dict[int, FeatureTensor]] = {}
    masks: dict[str, np.ndarray] = {}
    test_subspace: dict[str, int] = {}
    for i in range(spec.n_test + spec.n_normal_test):
        sid = f"t{i:04d}"
        test_subspace[sid] = i % spec.n_subspaces
        feats = make_sample(i % spec.n_subspaces)
        if i < spec.n_test:
            test[sid] = plant_anomaly(feats)
            masks[sid] = block_mask.copy()
        else:
            test[sid] = feats
            masks[sid] = np.zeros((mh, mw), dtype=bool)

    return SyntheticDataset(
        spec=spec,
        nominal=nominal,
        test=test,
        masks=masks,
        nominal_subspace=nominal_subspace,
        test_subspace=test_subspace,
    )
