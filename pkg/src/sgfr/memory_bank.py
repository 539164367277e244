"""Nominal feature dictionaries per hierarchy level, and per-query sampling.

A bank holds one dictionary per level, column-aligned so that column i at
every level comes from the same nominal image.  The reference level (the
deepest one) is reserved for subspace sampling: a pursuit of the query's
reference feature against the full bank; its support becomes the candidate
subset used by every scoring level.  Because a sparse pursuit picks atoms
from the query's own subspace, the span of that small subset keeps covering
the nominal features that were left out of it.

Bank directories hold one ``<image_id>_l<level>.sgt`` file per image per
level plus ``manifest.json``.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .omp import OmpConfig, SparseCode, omp_solve
from .tensor_io import (
    DictionaryMatrix,
    FeatureTensor,
    FlatFeature,
    flatten,
    read_tensor,
    stack_dictionary,
)

MANIFEST_NAME = "manifest.json"
MANIFEST_VERSION = 1

_SGT_NAME = re.compile(r"^(?P<id>.+)_l(?P<level>\d+)\.sgt$")


class BankError(Exception):
    """Inconsistent or incomplete bank directory."""


@dataclass(frozen=True)
class MemoryBank:
    levels: dict[int, DictionaryMatrix]
    nominal_ids: tuple[str, ...]
    ref_level: int
    level_shapes: dict[int, tuple[int, int, int]]
    manifest: dict

    def __post_init__(self):
        if self.ref_level not in self.levels:
            raise BankError(f"reference level {self.ref_level} missing from bank")
        n = len(self.nominal_ids)
        for level, d in self.levels.items():
            if d.n_columns != n:
                raise BankError(f"level {level} has {d.n_columns} columns, expected {n}")
            if d.column_ids != self.nominal_ids:
                raise BankError(f"level {level} columns not aligned with nominal ids")

    @property
    def n_nominal(self) -> int:
        return len(self.nominal_ids)


@dataclass(frozen=True)
class SampledSubset:
    """A restricted candidate index set plus how it was chosen."""

    indices: tuple[int, ...]  # ascending
    method: str  # "subspace" | "random" | "full"
    ref_code: SparseCode | None = None


def _scan_feature_dir(feature_dir: Path) -> dict[str, dict[int, Path]]:
    found: dict[str, dict[int, Path]] = {}
    for p in sorted(feature_dir.iterdir()):
        m = _SGT_NAME.match(p.name)
        if m:
            found.setdefault(m.group("id"), {})[int(m.group("level"))] = p
    return found


def bank_from_tensors(
    tensors: dict[str, dict[int, "FeatureTensor"]],
    levels: list[int],
    ref_level: int,
    created_params: dict | None = None,
) -> MemoryBank:
    """Assemble a bank from in-memory tensors keyed by image id and level."""
    wanted = sorted(set(levels) | {ref_level})
    if not tensors:
        raise BankError("no nominal tensors given")
    ids = tuple(sorted(tensors))

    dictionaries: dict[int, DictionaryMatrix] = {}
    shapes: dict[int, tuple[int, int, int]] = {}
    for level in wanted:
        flats: list[FlatFeature] = []
        for image_id in ids:
            t = tensors[image_id].get(level)
            if t is None:
                raise BankError(f"id {image_id!r} has no tensor for level {level}")
            if level in shapes and t.shape != shapes[level]:
                raise BankError(
                    f"shape mismatch at level {level}: id {image_id!r} has "
                    f"{t.shape}, expected {shapes[level]}"
                )
            shapes.setdefault(level, t.shape)
            flats.append(flatten(t, source_id=image_id))
        dictionaries[level] = stack_dictionary(flats)

    manifest = {
        "version": MANIFEST_VERSION,
        "nominal_ids": list(ids),
        "levels": [
            {"level": lv, "h": shapes[lv][0], "w": shapes[lv][1], "c": shapes[lv][2]}
            for lv in wanted
        ],
        "l_ref": ref_level,
        "created_params": created_params or {},
    }
    return MemoryBank(
        levels=dictionaries,
        nominal_ids=ids,
        ref_level=ref_level,
        level_shapes=shapes,
        manifest=manifest,
    )


def build_bank(
    feature_dir: str | Path,
    levels: list[int],
    ref_level: int,
    created_params: dict | None = None,
    manifest_path: str | Path | None = None,
) -> MemoryBank:
    """Assemble aligned dictionaries from a directory of SGT files.

    ``levels`` are the scoring levels; ``ref_level`` is added on top.  The
    manifest is written next to the tensors unless ``manifest_path`` says
    otherwise.
    """
    feature_dir = Path(feature_dir)
    if not feature_dir.is_dir():
        raise BankError(f"feature directory not found: {feature_dir}")
    found = _scan_feature_dir(feature_dir)
    if not found:
        raise BankError(f"no SGT tensors in {feature_dir}")
    wanted = sorted(set(levels) | {ref_level})
    tensors: dict[str, dict[int, "FeatureTensor"]] = {}
    for image_id, by_level in found.items():
        tensors[image_id] = {
            lv: read_tensor(path) for lv, path in by_level.items() if lv in wanted
        }
    bank = bank_from_tensors(tensors, levels, ref_level, created_params)
    out = Path(manifest_path) if manifest_path else feature_dir / MANIFEST_NAME
    out.write_text(json.dumps(bank.manifest, indent=2, sort_keys=True) + "\n")
    return bank


def load_bank(bank_dir: str | Path) -> MemoryBank:
    """Reload a bank from its directory using the manifest written at build.

    Read-only: the manifest is consumed, not rewritten.
    """
    bank_dir = Path(bank_dir)
    manifest_file = bank_dir / MANIFEST_NAME
    if not manifest_file.is_file():
        raise BankError(f"no {MANIFEST_NAME} in {bank_dir}; run the bank command first")
    manifest = json.loads(manifest_file.read_text())
    levels = [entry["level"] for entry in manifest["levels"]]
    ref_level = manifest["l_ref"]
    scoring = [lv for lv in levels if lv != ref_level]
    found = _scan_feature_dir(bank_dir)
    if not found:
        raise BankError(f"no SGT tensors in {bank_dir}")
    wanted = set(levels) | {ref_level}
    tensors = {
        image_id: {lv: read_tensor(path) for lv, path in by_level.items() if lv in wanted}
        for image_id, by_level in found.items()
    }
    bank = bank_from_tensors(
        tensors, scoring, ref_level, created_params=manifest.get("created_params")
    )
    if list(bank.nominal_ids) != manifest["nominal_ids"]:
        raise BankError(
            f"{bank_dir} contents diverged from the manifest; rebuild the bank"
        )
    return bank


def sample_subspace(
    bank: MemoryBank,
    y_ref: FlatFeature,
    s_ref: int,
    cfg: OmpConfig | None = None,
) -> SampledSubset:
    """Pursue the query's reference-level feature; keep the support.

    The subset is recomputed per test sample: which nominal features span
    the right subspace depends on the query.
    """
    ref_dict = bank.levels[bank.ref_level]
    if not 1 <= s_ref <= bank.n_nominal:
        raise ValueError(f"s_ref must be in [1, {bank.n_nominal}], got {s_ref}")
    base = cfg or OmpConfig()
    ref_cfg = OmpConfig(
        sparsity_budget=s_ref,
        residual_threshold=base.residual_threshold,
        correlation_mode=base.correlation_mode,
        normalize_columns=base.normalize_columns,
    )
    code = omp_solve(y_ref, ref_dict, range(bank.n_nominal), ref_cfg)
    return SampledSubset(
        indices=tuple(sorted(code.coefficients)),
        method="subspace",
        ref_code=code,
    )


def sample_random(bank: MemoryBank, s_ref: int, rng_seed: int) -> SampledSubset:
    """Uniform subset without replacement; reproducible from the seed."""
    if not 1 <= s_ref <= bank.n_nominal:
        raise ValueError(f"s_ref must be in [1, {bank.n_nominal}], got {s_ref}")
    rng = np.random.default_rng(rng_seed)
    idx = rng.choice(bank.n_nominal, size=s_ref, replace=False)
    return SampledSubset(indices=tuple(sorted(int(i) for i in idx)), method="random")


def full_subset(bank: MemoryBank) -> SampledSubset:
    return SampledSubset(indices=tuple(range(bank.n_nominal)), method="full")


def _span_residual_norms(d: DictionaryMatrix, subset: tuple[int, ...]) -> np.ndarray:
    """L2 distance of every column to the span of the subset columns.

    Subset members are exactly representable by themselves, so their
    distance is identically zero; the rest project through a least-squares
    solve (SVD-backed, so a rank-deficient subset still projects cleanly).
    """
    basis = d.matrix[:, list(subset)]
    out = np.zeros(d.n_columns)
    others = np.setdiff1d(np.arange(d.n_columns), np.asarray(subset, dtype=np.intp))
    if others.size == 0:
        return out
    targets = d.matrix[:, others]
    coef, *_ = np.linalg.lstsq(basis, targets, rcond=None)
    out[others] = np.linalg.norm(targets - basis @ coef, axis=0)
    return out


def coverage_error(bank: MemoryBank, level: int, subset: tuple[int, ...]) -> float:
    """Mean distance of the bank's features to the span of the subset.

    Measures how well a linear combination of the sampled features can
    stand in for the ones that were dropped from the bank.
    """
    if len(subset) == 0:
        raise ValueError("subset must be nonempty")
    d = bank.levels[level]
    return float(np.mean(_span_residual_norms(d, subset)))


def nn_matching_error(bank: MemoryBank, level: int, subset: tuple[int, ...]) -> float:
    """Mean distance of the bank's features to their nearest subset member.

    The matching-based counterpart of :func:`coverage_error`: the caller's
    subset plays the role of the retained memory and each feature is scored
    by its closest stored vector rather than by a span projection.
    """
    if len(subset) == 0:
        raise ValueError("subset must be nonempty")
    d = bank.levels[level]
    best = np.full(d.n_columns, np.inf)
    for i in subset:
        dist = np.linalg.norm(d.matrix - d.matrix[:, i : i + 1], axis=0)
        np.minimum(best, dist, out=best)
    best[list(subset)] = 0.0
    return float(np.mean(best))
