"""Pixel-level AUROC and per-region overlap (PRO) metrics.

AUROC pools every pixel of every sample and integrates the ROC curve by
trapezoid over the distinct score values, which matches the pairwise
Mann-Whitney statistic with the usual 0.5 credit for ties.

PRO sweeps the same distinct thresholds; at each one it computes the
detected fraction of every 8-connected ground-truth component (equal
weight per component, pooled across samples) and the false-positive rate
over pooled negative pixels.  The mean overlap is integrated over
fpr in [0, max_fpr] as a left-continuous step function of the achieved
operating points and normalized by max_fpr, so score maps that detect
nothing below the FPR cap earn exactly zero.  For all-distinct scores the
step integral coincides with the trapezoid rule, since consecutive
operating points then differ by a single pixel.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, replace
from typing import Iterable, Sequence

import numpy as np
from scipy import ndimage

from .memory_bank import MemoryBank, coverage_error
from .pipeline import PipelineConfig, score_sample
from .tensor_io import FeatureTensor

_EIGHT_CONNECTED = np.ones((3, 3), dtype=int)


class EvaluationError(Exception):
    pass


def connected_components(mask: np.ndarray) -> list[np.ndarray]:
    """8-connected components of a boolean mask, as boolean pixel masks.

    Ordered by first-scanned pixel (row-major), so the output is
    deterministic.
    """
    mask = np.asarray(mask, dtype=bool)
    labeled, n = ndimage.label(mask, structure=_EIGHT_CONNECTED)
    return [labeled == i for i in range(1, n + 1)]


@dataclass(frozen=True)
class GroundTruthMask:
    mask: np.ndarray  # (H, W) bool
    components: tuple[np.ndarray, ...]

    @classmethod
    def from_array(cls, mask: np.ndarray) -> "GroundTruthMask":
        mask = np.asarray(mask, dtype=bool)
        return cls(mask=mask, components=tuple(connected_components(mask)))


@dataclass(frozen=True)
class EvalReport:
    auroc: float
    pro: float
    curve: tuple[tuple[float, float], ...]  # (fpr, mean overlap) points
    n_samples: int
    config: dict


def _pool(scores: Sequence[np.ndarray], masks: Sequence[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    if len(scores) != len(masks) or not scores:
        raise EvaluationError("need one mask per score map, at least one sample")
    flat_s, flat_m = [], []
    for s, m in zip(scores, masks):
        s = np.asarray(s, dtype=np.float64)
        m = np.asarray(m, dtype=bool)
        if s.shape != m.shape:
            raise EvaluationError(f"score shape {s.shape} != mask shape {m.shape}")
        flat_s.append(s.reshape(-1))
        flat_m.append(m.reshape(-1))
    return np.concatenate(flat_s), np.concatenate(flat_m)


def pixel_auroc(scores: Sequence[np.ndarray], masks: Sequence[np.ndarray]) -> float:
    """AUROC over all pixels pooled across the sample set."""
    s, m = _pool(scores, masks)
    n_pos = int(m.sum())
    n_neg = m.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise EvaluationError("mask pool must contain positives and negatives")
    order = np.argsort(-s, kind="stable")
    s_sorted = s[order]
    m_sorted = m[order]
    # last index of each run of equal scores -> cumulative counts there
    last = np.nonzero(np.diff(s_sorted))[0]
    edges = np.concatenate([last, [s.size - 1]])
    tp = np.cumsum(m_sorted)[edges]
    fp = np.cumsum(~m_sorted)[edges]
    tpr = np.concatenate([[0.0], tp / n_pos])
    fpr = np.concatenate([[0.0], fp / n_neg])
    return float(np.trapezoid(tpr, fpr))


def _pro_curve(
    scores: Sequence[np.ndarray], masks: Sequence[np.ndarray]
) -> tuple[np.ndarray, np.ndarray]:
    """Achieved (fpr, mean component overlap) points, fpr ascending."""
    s, m = _pool(scores, masks)
    components: list[np.ndarray] = []
    for sc, mk in zip(scores, masks):
        sc = np.asarray(sc, dtype=np.float64)
        for comp in connected_components(np.asarray(mk, dtype=bool)):
            components.append(np.sort(sc[comp]))
    if not components:
        raise EvaluationError("no ground-truth components in the sample set")
    neg_scores = s[~m]
    if neg_scores.size == 0:
        raise EvaluationError("mask pool has no negative pixels")

    thresholds = np.unique(s)[::-1]
    neg_sorted = np.sort(neg_scores)
    # count of negatives >= t
    fp = neg_scores.size - np.searchsorted(neg_sorted, thresholds, side="left")
    fpr = fp / neg_scores.size
    overlap = np.zeros(thresholds.size)
    for comp_scores in components:
        hits = comp_scores.size - np.searchsorted(comp_scores, thresholds, side="left")
        overlap += hits / comp_scores.size
    overlap /= len(components)
    return fpr, overlap


def _step_integral(fpr: np.ndarray, value: np.ndarray, max_fpr: float) -> float:
    """Integrate a left step function of achieved points over [0, max_fpr]."""
    # Deduplicate equal fpr, keeping the best achieved value there.
    uniq_fpr, inverse = np.unique(fpr, return_inverse=True)
    best = np.zeros(uniq_fpr.size)
    np.maximum.at(best, inverse, value)
    if uniq_fpr[0] > 0.0:
        uniq_fpr = np.concatenate([[0.0], uniq_fpr])
        best = np.concatenate([[0.0], best])
    clipped = np.minimum(uniq_fpr, max_fpr)
    widths = np.diff(np.concatenate([clipped, [max_fpr]]))
    return float(np.sum(widths * best))


def pro_score(
    scores: Sequence[np.ndarray], masks: Sequence[np.ndarray], max_fpr: float = 0.30
) -> float:
    if not 0.0 < max_fpr <= 1.0:
        raise EvaluationError("max_fpr must be in (0, 1]")
    fpr, overlap = _pro_curve(scores, masks)
    return _step_integral(fpr, overlap, max_fpr) / max_fpr


def evaluate(
    scores: Sequence[np.ndarray],
    masks: Sequence[np.ndarray],
    max_fpr: float = 0.30,
    config: dict | None = None,
) -> EvalReport:
    auroc = pixel_auroc(scores, masks)
    fpr, overlap = _pro_curve(scores, masks)
    pro = _step_integral(fpr, overlap, max_fpr) / max_fpr
    keep = fpr <= max_fpr
    curve = tuple(zip(fpr[keep].tolist(), overlap[keep].tolist()))
    return EvalReport(
        auroc=auroc, pro=pro, curve=curve, n_samples=len(scores), config=config or {}
    )


def ablate_sampling(
    bank: MemoryBank,
    samples: dict[str, dict[int, FeatureTensor]],
    masks: dict[str, np.ndarray],
    s_ref_grid: Iterable[int],
    methods: Sequence[str] = ("subspace", "random"),
    base_cfg: PipelineConfig = PipelineConfig(),
    seed: int = 0,
    tie_s_to_half: bool = True,
) -> list[dict]:
    """Metric table over (method, s_ref) cells on a fixed sample set.

    The reconstruction budget follows the harness convention s = s_ref / 2
    unless ``tie_s_to_half`` is off.  Random subsets are reseeded per
    sample so repeated calls reproduce bit-identical tables.
    """
    sample_ids = sorted(samples)
    rows: list[dict] = []
    for method in methods:
        for s_ref in s_ref_grid:
            s = max(1, s_ref // 2) if tie_s_to_half else base_cfg.s
            cfg = replace(base_cfg, s_ref=s_ref, s=s)
            score_maps, mask_list, cover, elapsed = [], [], [], []
            for i, sid in enumerate(sample_ids):
                t0 = time.perf_counter()
                amap = score_sample(
                    bank,
                    samples[sid],
                    cfg,
                    subset_method=method,
                    rng_seed=seed * 100003 + i,
                )
                elapsed.append((time.perf_counter() - t0) * 1e3)
                score_maps.append(amap.scores)
                mask_list.append(masks[sid])
                if method == "full":
                    cover.append(0.0)
                else:
                    cover.append(coverage_error(bank, bank.ref_level, amap.subset.indices))
            rows.append(
                {
                    "method": method,
                    "s_ref": int(s_ref),
                    "auroc": pixel_auroc(score_maps, mask_list),
                    "pro": pro_score(score_maps, mask_list),
                    "coverage_error": float(np.mean(cover)),
                    "ms_per_sample": float(np.mean(elapsed)),
                }
            )
    return rows
