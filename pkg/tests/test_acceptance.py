"""End-to-end acceptance checks on the synthetic low-dose setting.

Every test reports its verdict through the ``verdict`` fixture, so the run
ends with one PASS/FAIL line per criterion. Training runs are shared through
the session-scoped ``lab`` fixture.

Toy scale: 64x64 lesion phantoms, gauss3 kernel (9 LORs per voxel, no
correction spread), low dose 0.01 against full dose 1.0, depth-3 toy U-Net,
300 epochs. Lambda values are the reference grid times ``LAMBDA_SCALE``.
"""

from __future__ import annotations

import hashlib
import itertools
import time

import numpy as np
import pytest

from pvmc import autodiff as ad
from pvmc import diagnostics as dg
from pvmc import gradcheck as gc
from pvmc import patchstats as ps
from pvmc import simulator as sim
from pvmc import trainer as tr
from pvmc.denoiser import NetConfig

pytestmark = pytest.mark.slow

LOW_DOSE, FULL_DOSE = 0.01, 1.0
LAMBDA_SCALE = 100.0
MAIN_LAMBDA = 1e-5 * LAMBDA_SCALE
LAMBDA_GRID = sorted(lam * LAMBDA_SCALE for lam in tr.FULL_SCALE_LAMBDAS)
NET = NetConfig(depth=3, base_channels=8)


class Lab:
    """Lazily built datasets and cached training runs."""

    def __init__(self):
        self.system = sim.make_system((64, 64), 9, "gauss3", 0.0, 1)
        self.k_ref = sim.analytic_k(self.system).k
        make = lambda n, seed: sim.make_dataset(n, "lesion", self.system, LOW_DOSE, FULL_DOSE, seed)  # noqa: E731
        self.splits = {"A": make(40, 11), "B": make(40, 21), "C": make(40, 31)}
        self.val = make(20, 12)
        self.test = make(20, 13)
        self._runs: dict = {}
        self._big = None

    def run(self, lam: float, split: str = "A") -> tr.TrainRun:
        key = (lam, split)
        if key not in self._runs:
            cfg = tr.TrainConfig.toy(lambda_weight=lam)
            self._runs[key] = tr.train(self.splits[split], self.val, NET, cfg)
        return self._runs[key]

    def test_psnr(self, run: tr.TrainRun, data=None) -> float:
        data = data or self.test
        return dg.quality_report(run.model("best").predict(data.arrays("noisy")), data.arrays("target")).mean_psnr

    def big(self):
        """128x128 data for the patch sweep: same pixel budget per epoch as split A."""
        if self._big is None:
            system = sim.make_system((128, 128), 9, "gauss3", 0.0, 1)
            make = lambda n, seed: sim.make_dataset(n, "lesion", system, LOW_DOSE, FULL_DOSE, seed)  # noqa: E731
            self._big = (make(10, 41), make(5, 42), make(5, 43))
        return self._big


@pytest.fixture(scope="session")
def lab():
    return Lab()


def _fmt(v):
    return f"{v:.4g}"


# 1 ---------------------------------------------------------------------------------
def test_c01_gradient_three_way_agreement(verdict):
    prev = ad.default_dtype()
    ad.set_default_dtype(np.float64)
    t0 = time.perf_counter()
    try:
        vs_ad, vs_fd = gc.check_pvmc(patch_sizes=((2, 2), (4, 4), (16, 16)), patches_per_size=40, seed=0)
    finally:
        ad.set_default_dtype(prev)
    elapsed = time.perf_counter() - t0
    ok = vs_ad.rel_error <= 1e-6 and vs_fd.rel_error <= 1e-6 and vs_fd.n_cases >= 100 and elapsed < 60
    verdict(1, ok, f"patches={vs_fd.n_cases} analytic_vs_autodiff={vs_ad.rel_error:.2e} "
                   f"analytic_vs_fd={vs_fd.rel_error:.2e} runtime={elapsed:.1f}s")
    assert ok


# 2 ---------------------------------------------------------------------------------
def test_c02_learned_k_recovers_analytic_slope(lab, verdict):
    runs = [lab.run(MAIN_LAMBDA, s) for s in "ABC"]
    ks = np.array([r.final_k for r in runs])
    rel_err = np.abs(ks - lab.k_ref) / lab.k_ref
    spread = max(abs(a - b) / min(a, b) for a, b in itertools.combinations(ks, 2))
    minutes = sum(r.wall_time for r in runs) / 60
    ok = bool(np.all(rel_err <= 0.05)) and spread <= 0.02 and minutes < 30
    verdict(2, ok, f"analytic_k={lab.k_ref:.4f} learned={np.round(ks, 4).tolist()} "
                   f"max_rel_err={rel_err.max():.2%} pairwise_spread={spread:.2%} train_time={minutes:.1f}min")
    assert ok


# 3 ---------------------------------------------------------------------------------
def test_c03_monte_carlo_variance_mean_ratio(verdict):
    t0 = time.perf_counter()
    system = sim.make_system((16, 16), 9, "gauss3", 0.0, 1)
    kr = sim.analytic_k(system)
    phantom = sim.make_phantom("uniform", 16, 16, 20.0, 0)
    lam = sim.forward_project(phantom, system)
    rng = np.random.default_rng(2024)
    n_total, chunk = 100_000, 5_000
    s1 = np.zeros(system.num_voxels)
    s2 = np.zeros(system.num_voxels)
    for _ in range(n_total // chunk):
        vals = sim.reconstruct(rng.poisson(lam, size=(chunk, lam.size)), system).values.reshape(chunk, -1)
        s1 += vals.sum(axis=0)
        s2 += (vals * vals).sum(axis=0)
    mean = s1 / n_total
    var = (s2 - n_total * mean**2) / (n_total - 1)
    ratio = var / mean
    elapsed = time.perf_counter() - t0
    rel = abs(ratio.mean() - kr.k) / kr.k
    worst_voxel = float(np.max(np.abs(ratio - kr.per_voxel) / kr.per_voxel))
    ok = rel <= 0.02 and elapsed < 300
    verdict(3, ok, f"realizations={n_total} empirical={ratio.mean():.5f} analytic={kr.k:.5f} rel={rel:.3%} "
                   f"worst_voxel_rel={worst_voxel:.2%} runtime={elapsed:.0f}s")
    assert ok


# 4 ---------------------------------------------------------------------------------
def test_c04_gradient_magnitude_scales_as_inverse_sqrt_mean(verdict):
    t0 = time.perf_counter()
    k = 0.4
    rng = np.random.default_rng(4)
    levels = np.exp(rng.uniform(0.0, np.log(1000.0), size=(60, 1, 1)))
    y = np.broadcast_to(levels, (60, 32, 32)).copy()
    x = y + rng.standard_normal(y.shape) * np.sqrt(k * y)
    rows = ps.grad_magnitude_profile(x, y, k, np.logspace(0, 3, 7), size=(8, 8), n_patches=6000)
    slope, decades = ps.loglog_slope(rows)
    elapsed = time.perf_counter() - t0
    ok = abs(slope + 0.5) <= 0.15 and decades >= 2.0 and elapsed < 300
    verdict(4, ok, f"slope={slope:.3f} decades={decades:.2f} runtime={elapsed:.1f}s")
    assert ok


# 5 ---------------------------------------------------------------------------------
def test_c05_consistency_improves_without_psnr_loss(lab, verdict):
    pvmc, base = lab.run(MAIN_LAMBDA), lab.run(0.0)
    x = lab.test.arrays("noisy")
    med_p = dg.consistency_ratio(pvmc.model("best"), lab.k_ref, x).median_abs_dev
    med_b = dg.consistency_ratio(base.model("best"), lab.k_ref, x).median_abs_dev
    psnr_p, psnr_b = lab.test_psnr(pvmc), lab.test_psnr(base)
    ok = med_p < med_b and psnr_p - psnr_b >= -0.3
    verdict(5, ok, f"median|pi-1| pvmc={med_p:.4f} baseline={med_b:.4f}; "
                   f"psnr pvmc={psnr_p:.3f} baseline={psnr_b:.3f} delta={psnr_p - psnr_b:+.3f}dB")
    assert ok


# 6 ---------------------------------------------------------------------------------
def _digests(fn):
    out = []

    def hook(step, arrays):
        h = hashlib.sha256()
        for a in arrays:
            h.update(a.tobytes())
        out.append(h.hexdigest())

    fn(hook)
    return out


def test_c06_lambda_zero_matches_plain_l1_bitwise(lab, verdict):
    cfg = tr.TrainConfig.toy(epochs=3, lambda_weight=0.0)
    data = lab.splits["A"]
    a = _digests(lambda h: tr.train(data, lab.val, NET, cfg, objective="pvmc", on_step=h))
    b = _digests(lambda h: tr.train_l1(data, lab.val, NET, cfg, on_step=h))
    ok = len(a) == len(b) > 0 and a == b
    verdict(6, ok, f"steps={len(a)} identical={sum(x == y for x, y in zip(a, b))}")
    assert ok


# 7 ---------------------------------------------------------------------------------
def test_c07_bias_identity_gap(lab, verdict):
    x, clean = lab.test.arrays("noisy"), lab.test.arrays("clean")
    pvmc = lab.run(MAIN_LAMBDA)
    k = pvmc.best_k  # learned by the PVMC run, applied to both models
    rp = dg.bias_report(pvmc.model("best"), k, x, clean, n_boot=1000)
    rb = dg.bias_report(lab.run(0.0).model("best"), k, x, clean, n_boot=1000)
    ok = rp.gap <= rb.gap

    def show(r):
        return (f"gap={_fmt(r.gap)} CI=[{_fmt(r.ci_gap[0])}, {_fmt(r.ci_gap[1])}] "
                f"lhs={_fmt(r.lhs)} rhs={_fmt(r.rhs)} cov={_fmt(r.cov)}+-{_fmt(r.se_cov)}")

    verdict(7, ok, f"k={k:.4f} pvmc {show(rp)} | baseline {show(rb)}")
    assert ok


# 8 ---------------------------------------------------------------------------------
def test_c08_oracle_moments_vanish(lab, verdict):
    x, clean = lab.test.arrays("noisy"), lab.test.arrays("clean")
    rep = dg.moment_report(lambda z: clean, lab.k_ref, x, patches_per_image=512, n_boot=1000)
    within = rep.within(3.0)
    ok = rep.n_patches >= 10_000 and within["m1"] and within["m2"]
    verdict(8, ok, f"patches={rep.n_patches} m1={_fmt(rep.m1)} (se {_fmt(rep.se_m1)}) "
                   f"m2={_fmt(rep.m2)} (se {_fmt(rep.se_m2)})")
    assert ok


# 9 ---------------------------------------------------------------------------------
def test_c09_lambda_sweep_has_interior_maximum(lab, verdict):
    psnrs = [lab.test_psnr(lab.run(lam)) for lam in LAMBDA_GRID]
    best = int(np.argmax(psnrs))
    ok = 0 < best < len(LAMBDA_GRID) - 1
    curve = " ".join(f"{lam:g}:{p:.3f}" for lam, p in zip(LAMBDA_GRID, psnrs))
    verdict(9, ok, f"lambda sweep argmax={LAMBDA_GRID[best]:g} [{curve}]")
    assert ok


def test_c09_patch_sweep_band_and_full_image_degradation(lab, verdict):
    train_set, val_set, test_set = lab.big()
    base = tr.TrainConfig.toy(lambda_weight=MAIN_LAMBDA, batch_size=2, patches_per_image=32)
    psnr = {}
    for side in (8, 16, 32, 64, 128):
        cfg = tr.TrainConfig.from_dict({**base.to_dict(), "patch_size": [side, side]})
        psnr[side] = lab.test_psnr(tr.train(train_set, val_set, NET, cfg), test_set)
    band = [psnr[s] for s in (8, 16, 32, 64)]
    width = max(band) - min(band)
    ok = width <= 0.5 and psnr[128] < min(band)
    verdict(9, ok, f"patch sweep band={width:.3f}dB full_image={psnr[128]:.3f} "
                   f"[{' '.join(f'{s}:{p:.3f}' for s, p in psnr.items())}]")
    assert ok


# 10 --------------------------------------------------------------------------------
def test_c10_metric_sanity(verdict):
    rng = np.random.default_rng(10)
    # integer-valued images keep shifted differences exact in floating point
    a = rng.integers(0, 200, (48, 48)).astype(np.float64)
    b = a + rng.integers(-5, 6, a.shape)
    checks = {
        "ssim_self": dg.ssim(a, a, 200.0) == 1.0,
        "psnr_shift": dg.psnr(a + 37.0, b + 37.0, 200.0) == dg.psnr(a, b, 200.0),
        "ssim_symmetry": dg.ssim(a, b, 200.0) == dg.ssim(b, a, 200.0),
    }
    ok = all(checks.values())
    verdict(10, ok, " ".join(f"{k}={'ok' if v else 'broken'}" for k, v in checks.items()))
    assert ok
