import numpy as np
import pytest

from sgfr.synthetic import SyntheticSpec, gen_synthetic, union_of_subspaces
from sgfr.tensor_io import flatten


def dataset_arrays(ds):
    chunks = []
    for group in (ds.nominal, ds.test):
        for sid in sorted(group):
            for lv in sorted(group[sid]):
                chunks.append(group[sid][lv].data.tobytes())
    for sid in sorted(ds.masks):
        chunks.append(ds.masks[sid].tobytes())
    return b"".join(chunks)


def test_union_points_live_in_their_subspaces():
    X, labels, bases = union_of_subspaces(50, 4, 3, 10, seed=0)
    assert X.shape == (50, 30)
    for j in range(X.shape[1]):
        b = bases[labels[j]]
        resid = X[:, j] - b @ (b.T @ X[:, j])
        assert np.linalg.norm(resid) <= 1e-10
        assert np.linalg.norm(X[:, j]) == pytest.approx(1.0, abs=1e-12)


def test_noise_free_test_points_project_onto_nominal_span():
    spec = SyntheticSpec(
        ambient_dim=128,
        subspace_dim=3,
        n_subspaces=2,
        points_per_subspace=10,
        noise_sigma=0.0,
        anomaly_block=(0, 0, 2, 2),
        seed=3,
        grid=(4, 4),
        levels=(2,),
        ref_level=3,
        n_test=0,
        n_normal_test=4,
        mask_size=(32, 32),
    )
    ds = gen_synthetic(spec)
    for lv in (2, 3):
        for sid, feats in ds.test.items():
            y = flatten(feats[lv]).values
            same = [
                flatten(ds.nominal[nid][lv]).values
                for nid in ds.nominal
                if ds.nominal_subspace[nid] == ds.test_subspace[sid]
            ]
            A = np.column_stack(same)
            coef, *_ = np.linalg.lstsq(A, y, rcond=None)
            assert np.linalg.norm(y - A @ coef) <= 1e-6  # float32 storage floor


def test_plane_in_r3_has_rank_two():
    spec = SyntheticSpec(
        ambient_dim=3,
        subspace_dim=2,
        n_subspaces=1,
        points_per_subspace=50,
        noise_sigma=0.0,
        anomaly_block=(0, 0, 1, 1),
        seed=42,
        grid=(1, 1),
        levels=(2,),
        ref_level=2,
        n_test=0,
        mask_size=(8, 8),
    )
    ds = gen_synthetic(spec)
    X = np.column_stack([flatten(ds.nominal[sid][2]).values for sid in sorted(ds.nominal)])
    # Independent decomposition oracle: singular values beyond the 2nd vanish.
    svals = np.linalg.svd(X, compute_uv=False)
    assert svals[1] > 1e-3
    assert np.all(svals[2:] <= 1e-5)


def test_same_seed_bit_identical():
    spec = SyntheticSpec(seed=7, points_per_subspace=8, n_test=3, mask_size=(64, 64))
    assert dataset_arrays(gen_synthetic(spec)) == dataset_arrays(gen_synthetic(spec))


def test_different_seed_differs():
    a = SyntheticSpec(seed=7, points_per_subspace=8, n_test=3, mask_size=(64, 64))
    b = SyntheticSpec(seed=8, points_per_subspace=8, n_test=3, mask_size=(64, 64))
    assert dataset_arrays(gen_synthetic(a)) != dataset_arrays(gen_synthetic(b))


def test_block_exceeding_grid_rejected():
    with pytest.raises(ValueError, match="block"):
        SyntheticSpec(anomaly_block=(10, 10, 8, 8), grid=(16, 16))


def test_level_shape_chain_halves_spatial_doubles_channels():
    spec = SyntheticSpec(ambient_dim=2048, grid=(16, 16), levels=(2, 3), ref_level=4)
    shapes = spec.level_shapes()
    assert shapes[2] == (16, 16, 8)
    assert shapes[3] == (8, 8, 16)
    assert shapes[4] == (4, 4, 32)
    dims = {lv: h * w * c for lv, (h, w, c) in shapes.items()}
    assert dims[3] == dims[2] // 2 and dims[4] == dims[3] // 2


def test_masks_mark_scaled_block():
    spec = SyntheticSpec(
        points_per_subspace=6, n_test=1, anomaly_block=(4, 4, 4, 4),
        grid=(16, 16), mask_size=(64, 64),
    )
    ds = gen_synthetic(spec)
    mask = ds.masks[sorted(ds.masks)[0]]
    expected = np.zeros((64, 64), dtype=bool)
    expected[16:32, 16:32] = True
    assert np.array_equal(mask, expected)


def test_anomaly_confined_to_block():
    spec = SyntheticSpec(
        points_per_subspace=6, n_test=1, n_normal_test=0, noise_sigma=0.0,
        anomaly_block=(4, 4, 4, 4), grid=(16, 16), seed=5,
    )
    ds = gen_synthetic(spec)
    sid = sorted(ds.test)[0]
    # Regenerate the same stream without anomalies to isolate the bump.
    clean = gen_synthetic(SyntheticSpec(**{**vars(spec), "anomaly_norm": 0.0}))
    for lv, t in ds.test[sid].items():
        diff = t.data.astype(np.float64) - clean.test[sid][lv].data.astype(np.float64)
        grid = np.linalg.norm(diff, axis=2)
        f = 16 // t.data.shape[0]
        inside = grid[4 // f : max(4 // f + 1, 8 // f), 4 // f : max(4 // f + 1, 8 // f)]
        assert np.linalg.norm(diff) > 0
        assert inside.sum() == pytest.approx(grid.sum(), rel=1e-9)


def test_cluster_fraction_limits_used_directions():
    spec = SyntheticSpec(
        ambient_dim=64,
        subspace_dim=6,
        points_per_subspace=40,
        noise_sigma=0.0,
        anomaly_block=(0, 0, 1, 1),
        seed=2,
        grid=(2, 2),
        levels=(2,),
        ref_level=2,
        n_test=0,
        mask_size=(2, 2),
        cluster_dims=2,
        cluster_fraction=1.0,
    )
    ds = gen_synthetic(spec)
    X = np.column_stack([flatten(ds.nominal[sid][2]).values for sid in sorted(ds.nominal)])
    svals = np.linalg.svd(X, compute_uv=False)
    assert svals[1] > 1e-3
    assert np.all(svals[2:] <= 1e-5)  # all points in a 2-dim slice
