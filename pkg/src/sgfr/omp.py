"""Greedy sparse reconstruction of a query against a feature dictionary.

Solves ``min_c ||y - X c||_2  s.t.  ||c||_0 <= s`` restricted to a caller
supplied candidate column set, by orthogonal matching pursuit: pick the
best-correlated remaining column, re-fit least squares on the accumulated
support, update the residual, stop when the sparsity budget is exhausted
or the residual norm drops to the threshold.  The final residual is the
anomalous part of the query: whatever the nominal dictionary cannot
express.

The least-squares refit appends one column per iteration to a QR
factorization, so a full solve costs O(dim * |candidates| * s) like the
plain correlation scans.  Rank-deficient supports (duplicate nominal
features) fall back to a tiny ridge solve and set a degeneracy flag
instead of failing.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
from scipy.linalg import solve_triangular

from .tensor_io import DictionaryMatrix, FlatFeature

# Relative drop in the new QR diagonal below which a column counts as
# linearly dependent on the current support.
_RANK_TOL = 1e-10
_RIDGE_SCALE = 1e-10


@dataclass(frozen=True)
class OmpConfig:
    """Termination and atom-selection knobs.

    ``correlation_mode="absolute"`` with ``normalize_columns=True`` is the
    default: scores are |x_j . e| / ||x_j||, the standard pursuit rule.
    ``"signed"`` with ``normalize_columns=False`` scores raw x_j . e, kept
    as an option for the literal textbook selection rule.
    """

    sparsity_budget: int = 17
    residual_threshold: float = 1e-6
    correlation_mode: str = "absolute"  # "absolute" | "signed"
    normalize_columns: bool = True

    def __post_init__(self):
        if self.sparsity_budget < 1:
            raise ValueError("sparsity_budget must be >= 1")
        if self.residual_threshold < 0:
            raise ValueError("residual_threshold must be >= 0")
        if self.correlation_mode not in ("absolute", "signed"):
            raise ValueError(f"unknown correlation_mode {self.correlation_mode!r}")


@dataclass(frozen=True)
class SparseCode:
    """Result of one pursuit: coefficients on a support plus the residual."""

    coefficients: dict[int, float]
    support: tuple[int, ...]  # in selection order
    residual: FlatFeature
    residual_norm: float
    iterations: int
    degenerate: bool = False
    residual_history: tuple[float, ...] = ()


class _IncrementalLstsq:
    """Least squares on a growing column set via one-column QR updates.

    The orthonormal basis is stored row-wise (contiguous rows) so both
    products in an append run as clean BLAS calls; appending column k
    costs O(dim * k).  After an append, ``last_q``/``last_qty`` expose the
    new basis vector and its coefficient so the caller can downdate a
    residual with one axpy instead of re-projecting.
    """

    def __init__(self, dim: int, budget: int):
        self._qt = np.empty((budget, dim))
        self._r = np.zeros((budget, budget))
        self._qty = np.empty(budget)
        self.k = 0
        self.degenerate = False
        self.last_q: np.ndarray | None = None
        self.last_qty = 0.0

    def append(self, col: np.ndarray, y: np.ndarray) -> None:
        k = self.k
        col_norm = np.linalg.norm(col)
        if k:
            w = self._qt[:k] @ col
            u = col - np.dot(w, self._qt[:k])
            rho = np.linalg.norm(u)
            if rho < 0.7 * col_norm:
                # Near-dependent column: a single reorthogonalization pass
                # restores basis orthogonality to working precision.
                w2 = self._qt[:k] @ u
                u -= np.dot(w2, self._qt[:k])
                w += w2
                rho = np.linalg.norm(u)
        else:
            w = np.empty(0)
            u = col.copy()
            rho = col_norm
        if rho <= _RANK_TOL * max(col_norm, 1.0):
            self.degenerate = True
            # Placeholder row keeps indices aligned; solves switch to the
            # ridge path from here on.
            self._qt[k] = 0.0
            self._r[:k, k] = w
            self._r[k, k] = 0.0
            self._qty[k] = 0.0
            self.last_q = None
            self.last_qty = 0.0
        else:
            q_new = u / rho
            self._qt[k] = q_new
            self._r[:k, k] = w
            self._r[k, k] = rho
            qty = float(q_new @ y)
            self._qty[k] = qty
            self.last_q = q_new
            self.last_qty = qty
        self.k = k + 1

    def solve(self) -> np.ndarray:
        return solve_triangular(self._r[: self.k, : self.k], self._qty[: self.k])


def _ridge_solve(cols: np.ndarray, y: np.ndarray) -> np.ndarray:
    gram = cols.T @ cols
    lam = _RIDGE_SCALE * np.trace(gram) / gram.shape[0]
    return np.linalg.solve(gram + lam * np.eye(gram.shape[0]), cols.T @ y)


def _scores(e: np.ndarray, X: DictionaryMatrix, idx: np.ndarray, cfg: OmpConfig) -> np.ndarray:
    s = X.matrix[:, idx].T @ e
    if cfg.normalize_columns:
        norms = X.column_norms[idx].copy()
        norms[norms == 0.0] = 1.0
        s = s / norms
    if cfg.correlation_mode == "absolute":
        s = np.abs(s)
    return s


def select_atom(
    e: FlatFeature | np.ndarray,
    X: DictionaryMatrix,
    remaining: Iterable[int],
    cfg: OmpConfig = OmpConfig(),
) -> int:
    """Index in ``remaining`` with the largest correlation score.

    Ties break to the smallest index: candidates are scanned in ascending
    order and the first maximum wins.
    """
    idx = np.asarray(sorted(remaining), dtype=np.intp)
    if idx.size == 0:
        raise ValueError("remaining candidate set is empty")
    ev = e.values if isinstance(e, FlatFeature) else np.asarray(e, dtype=np.float64)
    return int(idx[np.argmax(_scores(ev, X, idx, cfg))])


def ls_on_support(
    y: FlatFeature | np.ndarray,
    X: DictionaryMatrix,
    support: Sequence[int],
) -> tuple[np.ndarray, bool]:
    """Least-squares coefficients of y on the given columns.

    Returns ``(coefficients aligned with support order, degenerate)``.
    A rank-deficient column set is solved with a tiny ridge penalty
    (lambda = 1e-10 * trace(Xs' Xs) / |support|) instead of raising.
    """
    if len(support) == 0:
        raise ValueError("support must be nonempty")
    yv = y.values if isinstance(y, FlatFeature) else np.asarray(y, dtype=np.float64)
    cols = X.matrix[:, list(support)]
    rank = np.linalg.matrix_rank(cols)
    if rank < cols.shape[1]:
        return _ridge_solve(cols, yv), True
    coef, *_ = np.linalg.lstsq(cols, yv, rcond=None)
    return coef, False


def update_residual(
    y: FlatFeature | np.ndarray,
    X: DictionaryMatrix,
    coefficients: dict[int, float],
) -> np.ndarray:
    """e = y - X c, evaluated over the nonzero coefficients only."""
    yv = y.values if isinstance(y, FlatFeature) else np.asarray(y, dtype=np.float64)
    if not coefficients:
        return yv.copy()
    idx = list(coefficients.keys())
    c = np.array([coefficients[i] for i in idx])
    return yv - X.matrix[:, idx] @ c


def omp_solve(
    y: FlatFeature,
    X: DictionaryMatrix,
    candidates: Iterable[int],
    cfg: OmpConfig = OmpConfig(),
) -> SparseCode:
    """Run the pursuit loop; see the module docstring for the recipe.

    ``candidates`` restricts which dictionary columns may enter the
    support, so a pre-sampled memory subset plugs in directly.
    """
    if y.dim != X.dim:
        raise ValueError(f"query dim {y.dim} != dictionary dim {X.dim}")
    cand = np.asarray(sorted(set(int(i) for i in candidates)), dtype=np.intp)
    if cand.size == 0:
        raise ValueError("candidate set is empty")
    if cand[0] < 0 or cand[-1] >= X.n_columns:
        raise ValueError("candidate index out of range")

    yv = y.values
    e = yv.copy()
    e_norm = float(np.linalg.norm(e))
    budget = min(cfg.sparsity_budget, cand.size)

    # One contiguous view/copy of the candidate columns up front; the
    # correlation scan each iteration is then a single clean GEMV.
    if cand.size == X.n_columns:
        sub = X.matrix
    else:
        sub = np.ascontiguousarray(X.matrix[:, cand])
    norms = X.column_norms[cand].copy()
    norms[norms == 0.0] = 1.0

    solver = _IncrementalLstsq(X.dim, budget)
    selected: list[int] = []
    taken = np.zeros(cand.size, dtype=bool)
    sel_rows = np.empty((budget, X.dim))
    history: list[float] = []
    k = 0
    while k < budget and e_norm > cfg.residual_threshold:
        scores = sub.T @ e
        if cfg.normalize_columns:
            scores /= norms
        if cfg.correlation_mode == "absolute":
            np.abs(scores, out=scores)
        scores[taken] = -np.inf
        pos = int(np.argmax(scores))
        taken[pos] = True
        selected.append(int(cand[pos]))
        sel_rows[k] = sub[:, pos]

        solver.append(sel_rows[k], yv)
        if solver.degenerate:
            # Ridge path recomputes everything; rare (duplicate columns).
            coef = _ridge_solve(sel_rows[: k + 1].T, yv)
            e = yv - np.dot(coef, sel_rows[: k + 1])
        else:
            # The least-squares residual is y minus its projection onto the
            # selected span, so one new basis vector downdates it directly.
            e -= solver.last_qty * solver.last_q
        prev_norm = e_norm
        e_norm = float(np.linalg.norm(e))
        # Exact least squares never increases the residual; the ridge
        # fallback may, by about the regularization scale, so it is exempt.
        assert solver.degenerate or e_norm <= prev_norm * (1.0 + 1e-9) + 1e-12, (
            "residual norm grew"
        )
        history.append(e_norm)
        k += 1

    if k == 0:
        coef = np.empty(0)
    elif not solver.degenerate:
        coef = solver.solve()
    coefficients = {j: float(c) for j, c in zip(selected, coef)}
    return SparseCode(
        coefficients=coefficients,
        support=tuple(selected),
        residual=FlatFeature(e, source_id=y.source_id),
        residual_norm=e_norm,
        iterations=k,
        degenerate=solver.degenerate,
        residual_history=tuple(history),
    )
