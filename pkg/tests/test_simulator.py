import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pvmc import simulator as sim
from pvmc.exceptions import ConfigurationError, ModelError


def test_uniform_phantom_is_constant():
    ph = sim.make_phantom("uniform", 32, 32, 10.0, 1)
    assert ph.activity.shape == (32, 32)
    assert np.all(ph.activity == 10.0)


@pytest.mark.parametrize("kind", sim.PHANTOM_KINDS)
def test_phantoms_are_deterministic_and_nonnegative(kind):
    a = sim.make_phantom(kind, 32, 40, 10.0, 1)
    b = sim.make_phantom(kind, 32, 40, 10.0, 1)
    assert a.activity.tobytes() == b.activity.tobytes()
    assert a.activity.shape == (40, 32)
    assert a.activity.min() >= 0 and a.activity.max() > 0


def test_lesion_contrast_in_expected_range():
    ph = sim.make_phantom("lesion", 64, 64, 5.0, 7)
    ratio = ph.activity.max() / np.median(ph.activity)
    assert 2.0 <= ratio <= 8.0


@pytest.mark.parametrize(
    "args",
    [("uniform", 4, 32, 1.0), ("uniform", 32, 32, 0.0), ("uniform", 32, 32, -1.0), ("stars", 32, 32, 1.0)],
)
def test_phantom_rejects_bad_arguments(args):
    with pytest.raises(ConfigurationError):
        sim.make_phantom(*args, seed=0)


def test_delta_system_is_identity():
    system = sim.make_system((8, 8), 1, "delta", 0.0, 0)
    assert system.num_lors == 64
    assert all(system.voxel_pairs(v) == [(v, 1.0)] for v in range(64))
    assert np.all(system.corrections == 1.0)
    assert sim.analytic_k(system).k == 1.0


@pytest.mark.parametrize("m", [9, 18, 27])
def test_box3_analytic_k_is_one_over_m(m):
    system = sim.make_system((12, 10), m, "box3", 0.0, 0)
    rep = sim.analytic_k(system)
    assert rep.k == pytest.approx(1 / m, rel=1e-12)
    assert rep.spread < 1e-12


def test_delta_with_parallel_lors():
    assert sim.analytic_k(sim.make_system((8, 8), 4, "delta", 0.0, 0)).k == pytest.approx(0.25)


def test_gauss3_analytic_k_matches_brute_force_double_loop():
    system = sim.make_system((32, 32), 9, "gauss3", 0.2, 3)
    rep = sim.analytic_k(system)
    ratios = []
    for v in range(system.num_voxels):
        num = den = 0.0
        for j, w in system.voxel_pairs(v):
            c = system.corrections[j]
            num += w * w * c * c
            den += w * c
        ratios.append(num / den)
    assert rep.k > 0
    assert abs(rep.k - np.mean(ratios)) < 1e-12
    np.testing.assert_allclose(rep.per_voxel, ratios, rtol=0, atol=1e-12)


def test_gauss3_k_without_corrections_is_sum_of_squared_weights():
    g = np.exp(-np.array([2, 1, 2, 1, 0, 1, 2, 1, 2]) / (2 * sim.GAUSS3_SIGMA**2))
    g /= g.sum()
    assert sim.analytic_k(sim.make_system((16, 16), 9, "gauss3", 0.0, 0)).k == pytest.approx((g**2).sum(), rel=1e-12)


def test_corrections_drawn_inside_spread():
    system = sim.make_system((16, 16), 9, "box3", 0.3, 4)
    assert system.corrections.min() >= 0.7 and system.corrections.max() <= 1.3
    assert system.corrections.std() > 0.1


@pytest.mark.parametrize(
    "args",
    [((8, 8), 0, "delta", 0.0), ((8, 8), 9, "delta", 0.6), ((8, 8), 4, "box3", 0.0), ((8, 8), 9, "sinc", 0.0)],
)
def test_make_system_rejects_bad_arguments(args):
    with pytest.raises(ConfigurationError):
        sim.make_system(*args, seed=0)


def test_system_model_validates_weights():
    import scipy.sparse as sp

    with pytest.raises(ModelError):
        sim.SystemModel(sp.csr_matrix(np.ones((4, 2))), np.array([1.0, -1.0]), (2, 2))
    with pytest.raises(ModelError):
        sim.SystemModel(sp.csr_matrix(np.ones((3, 2))), np.ones(2), (2, 2))
    with pytest.raises(ModelError):
        sim.analytic_k(sim.SystemModel(sp.csr_matrix((4, 2)), np.ones(2), (2, 2)))


def test_zero_activity_gives_zero_counts():
    act = np.ones((8, 8))
    act[2:5, 3:6] = 0.0
    ph = sim.Phantom(act)
    system = sim.make_system((8, 8), 1, "delta", 0.0, 0)
    for seed in range(20):
        counts = sim.sample_counts(ph, system, 50.0, seed).counts.reshape(8, 8)
        assert np.all(counts[2:5, 3:6] == 0)


def test_counts_deterministic_per_seed():
    ph = sim.make_phantom("disks", 16, 16, 10.0, 2)
    system = sim.make_system((16, 16), 9, "gauss3", 0.1, 0)
    a = sim.sample_counts(ph, system, 0.5, 11).counts
    b = sim.sample_counts(ph, system, 0.5, 11).counts
    c = sim.sample_counts(ph, system, 0.5, 12).counts
    assert np.array_equal(a, b) and not np.array_equal(a, c)
    assert a.dtype.kind in "iu" and a.min() >= 0


def test_high_dose_counts_recover_activity():
    ph = sim.make_phantom("checker", 8, 8, 3.0, 0)
    system = sim.make_system((8, 8), 1, "delta", 0.0, 0)
    dose = 1e4
    mean = np.mean([sim.sample_counts(ph, system, dose, s).counts for s in range(1000)], axis=0) / dose
    np.testing.assert_allclose(mean, sim.forward_project(ph, system), rtol=0.01)


def test_counts_have_poisson_moments():
    ph = sim.make_phantom("uniform", 8, 8, 1.0, 0)
    system = sim.make_system((8, 8), 1, "delta", 0.0, 0)
    draws = np.stack([sim.sample_counts(ph, system, 3.0, s).counts for s in range(2000)]).ravel()
    assert draws.mean() == pytest.approx(3.0, rel=0.01)
    assert draws.var() == pytest.approx(3.0, rel=0.03)


def test_delta_reconstruction_equals_counts():
    ph = sim.make_phantom("disks", 16, 16, 10.0, 2)
    system = sim.make_system((16, 16), 1, "delta", 0.0, 0)
    counts = sim.sample_counts(ph, system, 1.0, 5)
    img = sim.reconstruct(counts, system)
    np.testing.assert_array_equal(img.values, counts.counts.reshape(16, 16))
    assert img.shape == (16, 16)


def test_zero_counts_reconstruct_to_zero():
    system = sim.make_system((8, 8), 9, "gauss3", 0.2, 0)
    assert np.all(sim.reconstruct(np.zeros(system.num_lors, dtype=np.int64), system).values == 0)


def test_reconstruct_dimension_mismatch():
    system = sim.make_system((8, 8), 9, "gauss3", 0.0, 0)
    with pytest.raises(ModelError):
        sim.reconstruct(np.zeros(10, dtype=np.int64), system)


@settings(max_examples=20, deadline=None)
@given(a=st.integers(0, 7), seed=st.integers(0, 1000))
def test_reconstruction_is_linear_in_counts(a, seed):
    system = sim.make_system((8, 8), 9, "gauss3", 0.2, 1)
    counts = np.random.default_rng(seed).poisson(4.0, size=system.num_lors)
    np.testing.assert_allclose(
        sim.reconstruct(a * counts, system).values, a * sim.reconstruct(counts, system).values, rtol=1e-12, atol=1e-12
    )


def test_monte_carlo_ratio_invariant_to_activity_scale():
    # k depends on the system only; the empirical var/mean ratio must agree at two activity levels
    system = sim.make_system((8, 8), 9, "gauss3", 0.0, 0)
    k = sim.analytic_k(system).k
    for level in (2.0, 50.0):
        ph = sim.make_phantom("uniform", 8, 8, level, 0)
        rng = np.random.default_rng(int(level))
        lam = sim.forward_project(ph, system)
        vals = np.stack([system.weights @ (system.corrections * rng.poisson(lam)) for _ in range(4000)])
        ratio = vals.var(axis=0, ddof=1).mean() / vals.mean()
        assert ratio == pytest.approx(k, rel=0.03)


def test_dataset_pairs_share_intensity_scale():
    system = sim.make_system((16, 16), 9, "gauss3", 0.0, 0)
    ds = sim.make_dataset(3, "uniform", system, 0.02, 1.0, seed=5, base_activity=500.0)
    assert len(ds) == 3 and ds.analytic_k == sim.analytic_k(system).k
    for p in ds.pairs:
        assert p.noisy.mean() == pytest.approx(p.target.mean(), rel=0.1)  # ~2% sd from 2560 counts
        np.testing.assert_allclose(p.clean, 0.02 * 500.0)


def test_dataset_images_independent_of_pair_count():
    system = sim.make_system((16, 16), 9, "gauss3", 0.0, 0)
    short = sim.make_dataset(2, "lesion", system, 0.01, 1.0, seed=9)
    long = sim.make_dataset(5, "lesion", system, 0.01, 1.0, seed=9)
    for a, b in zip(short.pairs, long.pairs):
        assert a.noisy.tobytes() == b.noisy.tobytes()


def test_equal_doses_differ_only_by_noise():
    system = sim.make_system((16, 16), 9, "gauss3", 0.0, 0)
    p = sim.make_dataset(1, "disks", system, 0.5, 0.5, seed=3).pairs[0]
    assert not np.array_equal(p.noisy, p.target)
    assert abs((p.noisy - p.target).mean()) < 0.05 * p.clean.mean()


def test_dataset_rejects_inverted_doses():
    system = sim.make_system((16, 16), 1, "delta", 0.0, 0)
    with pytest.raises(ConfigurationError):
        sim.make_dataset(2, "uniform", system, 1.0, 0.5, seed=0)


def test_dataset_roundtrip(tmp_path):
    system = sim.make_system((16, 16), 9, "gauss3", 0.0, 0)
    ds = sim.make_dataset(2, "lesion", system, 0.01, 1.0, seed=1)
    meta = sim.save_dataset(ds, tmp_path)
    assert meta["image_dtype"] == "<f4"
    raw = np.load(tmp_path / meta["pairs"][0]["noisy"])
    assert raw.dtype == np.dtype("<f4") and raw.flags.c_contiguous
    back = sim.load_dataset(tmp_path)
    assert back.analytic_k == ds.analytic_k and len(back) == 2
    np.testing.assert_allclose(back.pairs[1].target, ds.pairs[1].target, rtol=1e-6)
