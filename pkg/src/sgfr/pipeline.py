"""End-to-end scoring of one test sample against a memory bank.

Steps, in order: sample a candidate subset at the reference level, run the
sparse reconstruction at every scoring level restricted to that subset,
reduce each residual to a per-pixel score grid (channel-wise L2 norm),
upsample every grid to the output resolution with bilinear interpolation
(align-corners), aggregate across levels (mean by default), then smooth
once with a Gaussian kernel (sigma=4 by default, radius ceil(4*sigma),
reflect padding).
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .memory_bank import MemoryBank, SampledSubset, full_subset, sample_random, sample_subspace
from .omp import OmpConfig, omp_solve
from .tensor_io import FeatureTensor, flatten


@dataclass(frozen=True)
class PipelineConfig:
    scoring_levels: tuple[int, ...] = (2, 3)
    ref_level: int = 4
    s_ref: int = 40
    s: int = 17
    residual_threshold: float = 1e-6
    output_size: tuple[int, int] = (256, 256)
    smoothing_sigma: float = 4.0
    aggregation: str = "mean"  # "mean" | "sum"
    correlation_mode: str = "absolute"
    normalize_columns: bool = True

    def __post_init__(self):
        if not self.scoring_levels:
            raise ValueError("at least one scoring level required")
        if any(lv >= self.ref_level for lv in self.scoring_levels):
            raise ValueError(
                f"scoring levels {self.scoring_levels} must all be below "
                f"the reference level {self.ref_level}"
            )
        if self.smoothing_sigma <= 0:
            raise ValueError("smoothing_sigma must be > 0")
        if self.s < 1 or self.s_ref < 1:
            raise ValueError("s and s_ref must be >= 1")
        if self.aggregation not in ("mean", "sum"):
            raise ValueError(f"unknown aggregation {self.aggregation!r}")

    def omp_config(self, budget: int) -> OmpConfig:
        return OmpConfig(
            sparsity_budget=budget,
            residual_threshold=self.residual_threshold,
            correlation_mode=self.correlation_mode,
            normalize_columns=self.normalize_columns,
        )


@dataclass(frozen=True)
class LevelScore:
    grid: np.ndarray  # (h_l, w_l)
    residual_norm: float
    iterations: int
    degenerate: bool


@dataclass(frozen=True)
class AnomalyMap:
    scores: np.ndarray  # (H, W), nonnegative
    per_level: dict[int, LevelScore]
    subset: SampledSubset
    timing_ms: dict[str, float] = field(default_factory=dict)


def residual_to_scores(e: np.ndarray, shape: tuple[int, int, int]) -> np.ndarray:
    """Per-pixel L2 norm over the channel entries of a flat residual."""
    h, w, c = shape
    e = np.asarray(e, dtype=np.float64)
    if e.ndim != 1 or e.size != h * w * c:
        raise ValueError(f"residual of size {e.size} does not match shape {shape}")
    return np.linalg.norm(e.reshape(h, w, c), axis=2)


def upsample_bilinear(grid: np.ndarray, target: tuple[int, int]) -> np.ndarray:
    """Bilinear resize with the align-corners convention.

    Output corners sample the input corners exactly; constant grids stay
    constant at any target size.
    """
    grid = np.asarray(grid, dtype=np.float64)
    h, w = grid.shape
    out_h, out_w = target

    def positions(n_in: int, n_out: int) -> np.ndarray:
        if n_out == 1 or n_in == 1:
            return np.zeros(n_out)
        return np.arange(n_out) * (n_in - 1) / (n_out - 1)

    ys = positions(h, out_h)
    xs = positions(w, out_w)
    y0 = np.minimum(np.floor(ys).astype(np.intp), h - 1)
    x0 = np.minimum(np.floor(xs).astype(np.intp), w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (ys - y0)[:, None]
    wx = (xs - x0)[None, :]

    top = grid[np.ix_(y0, x0)] * (1 - wx) + grid[np.ix_(y0, x1)] * wx
    bottom = grid[np.ix_(y1, x0)] * (1 - wx) + grid[np.ix_(y1, x1)] * wx
    return top * (1 - wy) + bottom * wy


def gaussian_kernel(sigma: float) -> np.ndarray:
    """1-D Gaussian taps, truncated at radius ceil(4*sigma), summing to 1."""
    radius = int(np.ceil(4.0 * sigma))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def gaussian_smooth(grid: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian convolution with reflect padding at the borders."""
    if sigma <= 0:
        raise ValueError("sigma must be > 0")
    grid = np.asarray(grid, dtype=np.float64)
    kernel = gaussian_kernel(sigma)
    radius = (kernel.size - 1) // 2

    def convolve_rows(a: np.ndarray) -> np.ndarray:
        padded = np.pad(a, ((0, 0), (radius, radius)), mode="reflect")
        out = np.zeros_like(a)
        for i, k in enumerate(kernel):
            out += k * padded[:, i : i + a.shape[1]]
        return out

    return convolve_rows(convolve_rows(grid).T).T


def aggregate_levels(grids: list[np.ndarray], mode: str = "mean") -> np.ndarray:
    if not grids:
        raise ValueError("no grids to aggregate")
    shape = grids[0].shape
    for g in grids:
        if g.shape != shape:
            raise ValueError(f"shape mismatch: {g.shape} != {shape}")
    stacked = np.stack(grids)
    if mode == "mean":
        return stacked.mean(axis=0)
    if mode == "sum":
        return stacked.sum(axis=0)
    raise ValueError(f"unknown aggregation {mode!r}")


def _check_features(
    bank: MemoryBank, test_features: dict[int, FeatureTensor], cfg: PipelineConfig
) -> None:
    for lv in (*cfg.scoring_levels, cfg.ref_level):
        if lv not in test_features:
            raise ValueError(f"test sample is missing level {lv}")
        if lv not in bank.levels:
            raise ValueError(f"bank has no dictionary for level {lv}")
        if test_features[lv].shape != bank.level_shapes[lv]:
            raise ValueError(
                f"level {lv} shape {test_features[lv].shape} does not match "
                f"bank shape {bank.level_shapes[lv]}"
            )


def score_sample(
    bank: MemoryBank,
    test_features: dict[int, FeatureTensor],
    cfg: PipelineConfig = PipelineConfig(),
    subset_method: str = "subspace",
    rng_seed: int = 0,
) -> AnomalyMap:
    """Score one test sample; see the module docstring for the stages.

    ``subset_method`` switches between the subspace sampler (default), a
    seeded random baseline, and ``"full"`` (no sampling).
    """
    _check_features(bank, test_features, cfg)

    t0 = time.perf_counter()
    if subset_method == "subspace":
        y_ref = flatten(test_features[cfg.ref_level])
        subset = sample_subspace(bank, y_ref, cfg.s_ref, cfg.omp_config(cfg.s_ref))
    elif subset_method == "random":
        subset = sample_random(bank, cfg.s_ref, rng_seed)
    elif subset_method == "full":
        subset = full_subset(bank)
    else:
        raise ValueError(f"unknown subset method {subset_method!r}")
    t_sample = time.perf_counter() - t0

    per_level: dict[int, LevelScore] = {}
    upsampled: list[np.ndarray] = []
    level_ms: dict[int, float] = {}
    for lv in sorted(cfg.scoring_levels):
        t1 = time.perf_counter()
        y = flatten(test_features[lv])
        code = omp_solve(y, bank.levels[lv], subset.indices, cfg.omp_config(cfg.s))
        grid = residual_to_scores(code.residual.values, bank.level_shapes[lv])
        per_level[lv] = LevelScore(
            grid=grid,
            residual_norm=code.residual_norm,
            iterations=code.iterations,
            degenerate=code.degenerate,
        )
        upsampled.append(upsample_bilinear(grid, cfg.output_size))
        level_ms[lv] = (time.perf_counter() - t1) * 1e3

    combined = aggregate_levels(upsampled, cfg.aggregation)
    scores = gaussian_smooth(combined, cfg.smoothing_sigma)
    total_ms = (time.perf_counter() - t0) * 1e3
    timing = {
        "sampling": t_sample * 1e3,
        "per_level": level_ms,
        "total": total_ms,
    }
    return AnomalyMap(scores=scores, per_level=per_level, subset=subset, timing_ms=timing)
