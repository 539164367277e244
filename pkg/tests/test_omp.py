import itertools

import numpy as np
import pytest

from sgfr.omp import OmpConfig, ls_on_support, omp_solve, select_atom, update_residual
from sgfr.tensor_io import FlatFeature, stack_dictionary


def make_dict(matrix, prefix="c"):
    matrix = np.asarray(matrix, dtype=np.float64)
    return stack_dictionary(
        [FlatFeature(matrix[:, i], source_id=f"{prefix}{i}") for i in range(matrix.shape[1])]
    )


def greedy_oracle(y, X, s, eps, mode="absolute", normalize=True):
    """Naive per-step reimplementation: scan columns, lstsq, recompute."""
    support = []
    e = y.copy()
    while len(support) < min(s, X.shape[1]) and np.linalg.norm(e) > eps:
        best_j, best_score = -1, -np.inf
        for j in range(X.shape[1]):
            if j in support:
                continue
            x = X[:, j]
            norm = np.sqrt(np.sum(x * x)) if normalize else 1.0
            score = float(np.dot(x, e)) / (norm if norm > 0 else 1.0)
            if mode == "absolute":
                score = abs(score)
            if score > best_score:
                best_j, best_score = j, score
        support.append(best_j)
        coef, *_ = np.linalg.lstsq(X[:, support], y, rcond=None)
        e = y - X[:, support] @ coef
    return support, e


def brute_force_best_residual(y, X, s):
    best = np.linalg.norm(y)
    for size in range(1, min(s, X.shape[1]) + 1):
        for combo in itertools.combinations(range(X.shape[1]), size):
            coef, *_ = np.linalg.lstsq(X[:, list(combo)], y, rcond=None)
            best = min(best, np.linalg.norm(y - X[:, list(combo)] @ coef))
    return best


# ---------------------------------------------------------------- residual


def test_update_residual_zero_coefficients():
    d = make_dict(np.eye(3))
    y = np.array([1.0, 2.0, 3.0])
    assert np.array_equal(update_residual(y, d, {}), y)


def test_update_residual_exact_representation():
    d = make_dict(np.eye(3))
    y = np.array([2.0, 0.0, -1.0])
    e = update_residual(y, d, {0: 2.0, 2: -1.0})
    assert np.linalg.norm(e) <= 1e-8


def test_update_residual_matches_naive_loop():
    rng = np.random.default_rng(21)
    X = rng.standard_normal((6, 4))
    d = make_dict(X)
    y = rng.standard_normal(6)
    coeffs = {0: 0.3, 2: -1.2}
    got = update_residual(y, d, coeffs)
    expected = np.array(
        [y[i] - sum(c * X[i, j] for j, c in coeffs.items()) for i in range(6)]
    )
    assert np.allclose(got, expected, atol=1e-12)


# ------------------------------------------------------------ ls_on_support


def test_ls_single_unit_atom_is_projection():
    rng = np.random.default_rng(2)
    x = rng.standard_normal(5)
    x /= np.linalg.norm(x)
    d = make_dict(x[:, None])
    y = rng.standard_normal(5)
    coef, degenerate = ls_on_support(y, d, [0])
    assert not degenerate
    assert coef[0] == pytest.approx(float(x @ y), abs=1e-12)


def test_ls_spanning_support_zeroes_residual():
    rng = np.random.default_rng(3)
    X = rng.standard_normal((4, 4))
    d = make_dict(X)
    y = rng.standard_normal(4)
    coef, _ = ls_on_support(y, d, [0, 1, 2, 3])
    assert np.linalg.norm(y - X @ coef) <= 1e-8


def test_ls_matches_normal_equations_oracle():
    rng = np.random.default_rng(4)
    X = rng.standard_normal((8, 3))
    d = make_dict(X)
    y = rng.standard_normal(8)
    coef, degenerate = ls_on_support(y, d, [0, 1, 2])
    oracle = np.linalg.solve(X.T @ X, X.T @ y)
    assert not degenerate
    assert np.allclose(coef, oracle, atol=1e-9)
    # optimality: residual orthogonal to the span
    resid = y - X @ coef
    assert np.max(np.abs(X.T @ resid)) <= 1e-9


def test_ls_rank_deficiency_uses_ridge_and_flags():
    x = np.array([1.0, 2.0, 0.0])
    d = make_dict(np.column_stack([x, x]))  # duplicate column
    coef, degenerate = ls_on_support(np.array([1.0, 2.0, 1.0]), d, [0, 1])
    assert degenerate
    assert np.all(np.isfinite(coef))


def test_ls_empty_support_rejected():
    d = make_dict(np.eye(2))
    with pytest.raises(ValueError):
        ls_on_support(np.ones(2), d, [])


# ------------------------------------------------------------- select_atom


def test_select_atom_exact_alignment():
    d = make_dict(np.eye(4))
    e = np.array([0.0, 0.0, 2.0, 0.0])
    assert select_atom(e, d, range(4)) == 2


def test_select_atom_tie_breaks_to_lower_index():
    x = np.array([1.0, 0.0])
    d = make_dict(np.column_stack([x, x]))
    assert select_atom(np.array([1.0, 0.0]), d, [0, 1]) == 0
    assert select_atom(np.array([1.0, 0.0]), d, [1]) == 1


def test_select_atom_matches_exhaustive_scan():
    rng = np.random.default_rng(6)
    for cfg in (
        OmpConfig(),
        OmpConfig(correlation_mode="signed"),
        OmpConfig(normalize_columns=False),
        OmpConfig(correlation_mode="signed", normalize_columns=False),
    ):
        X = rng.standard_normal((7, 6))
        d = make_dict(X)
        e = rng.standard_normal(7)
        best_j, best_score = -1, -np.inf
        for j in range(6):
            score = float(X[:, j] @ e)
            if cfg.normalize_columns:
                score /= np.linalg.norm(X[:, j])
            if cfg.correlation_mode == "absolute":
                score = abs(score)
            if score > best_score:
                best_j, best_score = j, score
        assert select_atom(e, d, range(6), cfg) == best_j


def test_select_atom_empty_remaining():
    d = make_dict(np.eye(2))
    with pytest.raises(ValueError):
        select_atom(np.ones(2), d, [])


# --------------------------------------------------------------- omp_solve


def test_zero_query_terminates_immediately():
    d = make_dict(np.eye(3))
    code = omp_solve(FlatFeature(np.zeros(3)), d, range(3))
    assert code.iterations == 0
    assert code.support == ()
    assert code.coefficients == {}
    assert code.residual_norm == 0.0


def test_exact_column_match_stops_after_one_atom():
    rng = np.random.default_rng(7)
    q, _ = np.linalg.qr(rng.standard_normal((6, 4)))
    d = make_dict(q)
    code = omp_solve(FlatFeature(q[:, 3].copy()), d, range(4), OmpConfig(sparsity_budget=2))
    assert code.support == (3,)
    assert code.coefficients[3] == pytest.approx(1.0, abs=1e-9)
    assert code.residual_norm <= 1e-6
    assert code.iterations == 1


def test_two_orthogonal_subspaces_recover_in_subspace_support():
    # 3 columns spanning a 2-dim subspace, 3 spanning an orthogonal one.
    rng = np.random.default_rng(8)
    basis, _ = np.linalg.qr(rng.standard_normal((5, 4)))
    u, v = basis[:, :2], basis[:, 2:]

    def unit_points(b, n):
        a = rng.standard_normal((2, n))
        pts = b @ a
        return pts / np.linalg.norm(pts, axis=0)

    X = np.column_stack([unit_points(u, 3), unit_points(v, 3)])
    d = make_dict(X)
    y = 0.6 * X[:, 0] + 0.8 * X[:, 1]
    code = omp_solve(FlatFeature(y), d, range(6), OmpConfig(sparsity_budget=2))
    assert code.residual_norm <= 1e-6
    assert set(code.support) <= {0, 1, 2}
    # Oracle: of all size-2 supports, the best-residual ones live in subspace 1.
    best_resid, best_combo = np.inf, None
    for combo in itertools.combinations(range(6), 2):
        coef, *_ = np.linalg.lstsq(X[:, list(combo)], y, rcond=None)
        r = np.linalg.norm(y - X[:, list(combo)] @ coef)
        if r < best_resid:
            best_resid, best_combo = r, combo
    assert best_resid <= 1e-9
    assert set(best_combo) <= {0, 1, 2}


def test_matches_greedy_oracle_all_modes():
    rng = np.random.default_rng(9)
    for trial in range(40):
        dim = int(rng.integers(3, 9))
        n = int(rng.integers(2, 9))
        s = int(rng.integers(1, 4))
        X = rng.standard_normal((dim, n))
        y = rng.standard_normal(dim)
        mode = ("absolute", "signed")[trial % 2]
        normalize = bool(trial % 3 != 0)
        cfg = OmpConfig(sparsity_budget=s, correlation_mode=mode, normalize_columns=normalize)
        code = omp_solve(FlatFeature(y), make_dict(X), range(n), cfg)
        oracle_support, oracle_e = greedy_oracle(
            y, X, s, cfg.residual_threshold, mode=mode, normalize=normalize
        )
        assert list(code.support) == oracle_support
        assert code.residual_norm == pytest.approx(np.linalg.norm(oracle_e), abs=1e-9)


def test_residual_never_beats_brute_force_and_recovers_selected_spans():
    rng = np.random.default_rng(10)
    for _ in range(25):
        dim = int(rng.integers(4, 9))
        n = int(rng.integers(3, 9))
        s = 3
        X = rng.standard_normal((dim, n))
        X /= np.linalg.norm(X, axis=0)
        planted = rng.choice(n, size=min(2, n), replace=False)
        y = X[:, planted] @ rng.standard_normal(planted.size)
        code = omp_solve(FlatFeature(y), make_dict(X), range(n), OmpConfig(sparsity_budget=s))
        assert code.residual_norm >= brute_force_best_residual(y, X, s) - 1e-9
        if set(planted) <= set(code.support):
            assert code.residual_norm <= 1e-6


def test_residual_norm_monotone_per_iteration():
    rng = np.random.default_rng(12)
    for _ in range(20):
        X = rng.standard_normal((10, 8))
        y = rng.standard_normal(10)
        code = omp_solve(
            FlatFeature(y), make_dict(X), range(8), OmpConfig(sparsity_budget=6)
        )
        history = (float(np.linalg.norm(y)),) + code.residual_history
        assert all(b <= a + 1e-12 for a, b in zip(history, history[1:]))


def test_support_restricted_to_candidates():
    rng = np.random.default_rng(13)
    X = rng.standard_normal((6, 8))
    candidates = [1, 4, 6]
    code = omp_solve(
        FlatFeature(rng.standard_normal(6)),
        make_dict(X),
        candidates,
        OmpConfig(sparsity_budget=5),
    )
    assert set(code.support) <= set(candidates)
    assert code.iterations <= len(candidates)


def test_sparse_code_invariants():
    rng = np.random.default_rng(14)
    X = rng.standard_normal((9, 6))
    d = make_dict(X)
    y = rng.standard_normal(9)
    code = omp_solve(FlatFeature(y), d, range(6), OmpConfig(sparsity_budget=3))
    assert set(code.support) == set(code.coefficients)
    assert len(code.support) <= 3
    recomputed = update_residual(y, d, code.coefficients)
    rel = np.linalg.norm(code.residual.values - recomputed) / max(np.linalg.norm(y), 1e-30)
    assert rel <= 1e-5
    for j in code.support:
        unit = X[:, j] / np.linalg.norm(X[:, j])
        assert abs(unit @ code.residual.values) <= 1e-4


def test_duplicate_columns_set_degenerate_flag_not_crash():
    x = np.array([1.0, 1.0, 0.0])
    X = np.column_stack([x, x, np.array([0.0, 0.0, 1.0])])
    code = omp_solve(
        FlatFeature(np.array([2.0, 2.0, 3.0])),
        make_dict(X),
        range(3),
        OmpConfig(sparsity_budget=3, residual_threshold=0.0),
    )
    assert code.degenerate
    assert np.all(np.isfinite(code.residual.values))
    assert code.residual_norm <= 1e-5


def test_identical_inputs_identical_outputs():
    rng = np.random.default_rng(15)
    X = rng.standard_normal((12, 9))
    y = rng.standard_normal(12)
    a = omp_solve(FlatFeature(y.copy()), make_dict(X.copy()), range(9))
    b = omp_solve(FlatFeature(y.copy()), make_dict(X.copy()), range(9))
    assert a.support == b.support
    assert a.coefficients == b.coefficients
    assert np.array_equal(a.residual.values, b.residual.values)
    assert a.residual_norm == b.residual_norm


def test_dim_mismatch_rejected():
    d = make_dict(np.eye(3))
    with pytest.raises(ValueError):
        omp_solve(FlatFeature(np.zeros(4)), d, range(3))


def test_empty_candidates_rejected():
    d = make_dict(np.eye(3))
    with pytest.raises(ValueError):
        omp_solve(FlatFeature(np.zeros(3)), d, [])


def test_config_validation():
    with pytest.raises(ValueError):
        OmpConfig(sparsity_budget=0)
    with pytest.raises(ValueError):
        OmpConfig(residual_threshold=-1.0)
    with pytest.raises(ValueError):
        OmpConfig(correlation_mode="sideways")
