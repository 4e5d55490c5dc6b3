"""Image-quality metrics and moment/bias diagnostics for trained denoisers.

Moment conventions, for noisy input x, prediction y_hat, residual r = x - y_hat
and patches p:

* m1  = mean(x - y_hat) over all held-out voxels
* m2  = mean_p [ Var_p(r) - (k * Mean_p(y_hat) + eps) ]
* cov = mean_p Cov_p(r, y_hat)

Standard errors come from a cluster bootstrap that resamples whole images,
because patches drawn from the same image overlap and are not independent.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import patchstats as ps
from .exceptions import UsageError

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
N_BOOTSTRAP = 1000


# ---------------------------------------------------------------------------
# PSNR / SSIM
# ---------------------------------------------------------------------------
def psnr(a, b, data_range: float | None = None) -> float:
    """Peak signal-to-noise ratio in dB; identical images give ``inf``.

    ``data_range`` defaults to max(b), i.e. the reference image's maximum.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise UsageError(f"psnr shape mismatch {a.shape} vs {b.shape}")
    if data_range is None:
        data_range = float(b.max())
    if not data_range > 0:
        raise UsageError("data_range must be positive")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(data_range**2 / mse)


def _gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    half = size // 2
    g = np.exp(-(np.arange(-half, half + 1) ** 2) / (2.0 * sigma**2))
    return g / g.sum()


def _filter_valid(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Separable 'valid' weighted average over every full window position."""
    n = g.size
    rows = sliding_window_view(img, n, axis=0) @ g  # (H-n+1, W)
    return sliding_window_view(rows, n, axis=1) @ g


def ssim(a, b, data_range: float | None = None) -> float:
    """Mean SSIM with an 11x11 Gaussian window (sigma 1.5), K1=0.01, K2=0.03.

    Statistics are computed only where the window fits entirely inside the
    image. ``data_range`` defaults to max(b).
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise UsageError(f"ssim shape mismatch {a.shape} vs {b.shape}")
    if a.ndim != 2 or min(a.shape) < SSIM_WINDOW:
        raise UsageError(f"ssim needs 2-D images of at least {SSIM_WINDOW}x{SSIM_WINDOW}")
    if data_range is None:
        data_range = float(b.max())
    if not data_range > 0:
        raise UsageError("data_range must be positive")
    g = _gaussian_window()
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    mu_a = _filter_valid(a, g)
    mu_b = _filter_valid(b, g)
    var_a = _filter_valid(a * a, g) - mu_a**2
    var_b = _filter_valid(b * b, g) - mu_b**2
    cov = _filter_valid(a * b, g) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


@dataclass
class QualityReport:
    psnr: list[float]
    ssim: list[float]
    data_range: list[float]

    @property
    def mean_psnr(self) -> float:
        return float(np.mean(self.psnr))

    @property
    def mean_ssim(self) -> float:
        return float(np.mean(self.ssim))

    def to_dict(self) -> dict:
        return {
            "psnr": [_finite_or_str(v) for v in self.psnr],
            "ssim": self.ssim,
            "data_range": self.data_range,
            "mean_psnr": _finite_or_str(self.mean_psnr),
            "mean_ssim": self.mean_ssim,
            "data_range_convention": "per-image max of the reference",
        }


def _finite_or_str(v: float):
    return v if math.isfinite(v) else str(v)


def quality_report(pred, target) -> QualityReport:
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise UsageError(f"prediction/target shape mismatch {pred.shape} vs {target.shape}")
    pred = pred.reshape((-1,) + pred.shape[-2:])
    target = target.reshape(pred.shape)
    ranges = [float(t.max()) for t in target]
    return QualityReport(
        [psnr(p, t, r) for p, t, r in zip(pred, target, ranges)],
        [ssim(p, t, r) for p, t, r in zip(pred, target, ranges)],
        ranges,
    )


# ---------------------------------------------------------------------------
# moment and bias diagnostics
# ---------------------------------------------------------------------------
def _predict(model, x: np.ndarray) -> np.ndarray:
    if model is None:
        return x
    if callable(model) and not hasattr(model, "predict"):
        return np.asarray(model(x), dtype=np.float64)
    return np.asarray(model.predict(x), dtype=np.float64)


def _patch_starts(shape, size, patches_per_image: int, seed: int) -> np.ndarray:
    n = shape[0]
    spec = ps.PatchSpec(size=size, count=patches_per_image * n, seed=seed)
    return ps.sample_patches(shape[-2:], spec, n_images=n)


def cluster_bootstrap_se(per_image: list[np.ndarray], stat: Callable[[np.ndarray], float] = np.mean,
                         n_boot: int = N_BOOTSTRAP, seed: int = 0) -> float:
    """Bootstrap SE of ``stat`` over the pooled values, resampling whole images."""
    rng = np.random.default_rng(seed)
    n = len(per_image)
    if n < 2:
        return math.nan
    reps = np.empty(n_boot)
    for b in range(n_boot):
        pick = rng.integers(0, n, size=n)
        reps[b] = stat(np.concatenate([per_image[i] for i in pick]))
    return float(reps.std(ddof=1))


def _by_image(values: np.ndarray, starts: np.ndarray, n_images: int) -> list[np.ndarray]:
    return [values[starts[:, 0] == i] for i in range(n_images)]


@dataclass
class MomentReport:
    m1: float
    m2: float
    cov: float
    n_patches: int
    se_m1: float
    se_m2: float
    se_cov: float
    k: float
    epsilon: float
    m2_true_signal: float | None = None
    se_m2_true_signal: float | None = None

    def within(self, n_se: float = 3.0) -> dict[str, bool]:
        return {"m1": abs(self.m1) <= n_se * self.se_m1, "m2": abs(self.m2) <= n_se * self.se_m2}

    def to_dict(self) -> dict:
        return asdict(self)


def moment_report(model, k: float, noisy, patch_size=(16, 16), patches_per_image: int = 64,
                  seed: int = 0, epsilon: float = ps.DEFAULT_EPSILON, clean=None,
                  n_boot: int = N_BOOTSTRAP) -> MomentReport:
    """GMM moment conditions m1, m2 and the residual/output covariance on held-out images.

    ``model`` is anything with ``predict`` or a callable; ``None`` means the
    identity denoiser. ``clean`` (the noise-free signal, when known) adds the
    variant of m2 that uses the true signal instead of y_hat.
    """
    x = np.asarray(noisy, dtype=np.float64)
    x = x.reshape((-1,) + x.shape[-2:])
    y_hat = _predict(model, x).reshape(x.shape)
    n = x.shape[0]
    starts = _patch_starts(x.shape, patch_size, patches_per_image, seed)
    st = ps.patch_statistics(x, y_hat, starts, patch_size, k, epsilon)
    g2 = st.var_r - (k * st.mean_y + epsilon)

    resid = (x - y_hat).reshape(n, -1)
    m1 = float(resid.mean())
    se_m1 = cluster_bootstrap_se(list(resid), seed=seed, n_boot=n_boot)
    g2_img = _by_image(g2, starts, n)
    cov_img = _by_image(st.cov_ry, starts, n)

    report = MomentReport(
        m1=m1,
        m2=float(g2.mean()),
        cov=float(st.cov_ry.mean()),
        n_patches=int(len(starts)),
        se_m1=se_m1,
        se_m2=cluster_bootstrap_se(g2_img, seed=seed + 1, n_boot=n_boot),
        se_cov=cluster_bootstrap_se(cov_img, seed=seed + 2, n_boot=n_boot),
        k=float(k),
        epsilon=float(epsilon),
    )
    if clean is not None:
        y = np.asarray(clean, dtype=np.float64).reshape(x.shape)
        idx = ps.ad.patch_flat_indices(x.shape, starts, (patch_size[1], patch_size[0]))
        mean_true = y.reshape(-1)[idx].mean(axis=1)
        g2t = st.var_r - (k * mean_true + epsilon)
        report.m2_true_signal = float(g2t.mean())
        report.se_m2_true_signal = cluster_bootstrap_se(_by_image(g2t, starts, n), seed=seed + 3, n_boot=n_boot)
    return report


@dataclass
class BiasReport:
    lhs: float
    rhs: float
    gap: float
    se_gap: float
    ci_gap: tuple[float, float]
    cov: float
    se_cov: float
    k: float
    n_patches: int

    def to_dict(self) -> dict:
        d = asdict(self)
        d["ci_gap"] = list(self.ci_gap)
        return d


def bias_report(model, k: float, noisy, truth, patch_size=(16, 16), patches_per_image: int = 64,
                seed: int = 0, n_boot: int = N_BOOTSTRAP) -> BiasReport:
    """Bias identity check: lhs = mean(y_hat - y), rhs = -(1/k) mean_p Var_p(y_hat).

    ``gap`` = |lhs - rhs|; its bootstrap CI resamples whole images. The
    residual/output covariance premise is reported alongside.
    """
    x = np.asarray(noisy, dtype=np.float64)
    x = x.reshape((-1,) + x.shape[-2:])
    y = np.asarray(truth, dtype=np.float64).reshape(x.shape)
    y_hat = _predict(model, x).reshape(x.shape)
    n = x.shape[0]
    starts = _patch_starts(x.shape, patch_size, patches_per_image, seed)
    st = ps.patch_statistics(x, y_hat, starts, patch_size, k)
    err = (y_hat - y).reshape(n, -1)
    var_by_img = _by_image(st.var_y, starts, n)
    cov_by_img = _by_image(st.cov_ry, starts, n)

    def gap_of(img_idx):
        lhs = np.concatenate([err[i] for i in img_idx]).mean()
        rhs = -np.concatenate([var_by_img[i] for i in img_idx]).mean() / k
        return abs(lhs - rhs)

    lhs = float(err.mean())
    rhs = float(-st.var_y.mean() / k)
    rng = np.random.default_rng(seed)
    reps = np.array([gap_of(rng.integers(0, n, size=n)) for _ in range(n_boot)]) if n > 1 else np.array([math.nan])
    lo, hi = np.percentile(reps, [2.5, 97.5]) if n > 1 else (math.nan, math.nan)
    return BiasReport(
        lhs=lhs,
        rhs=rhs,
        gap=abs(lhs - rhs),
        se_gap=float(reps.std(ddof=1)) if n > 1 else math.nan,
        ci_gap=(float(lo), float(hi)),
        cov=float(st.cov_ry.mean()),
        se_cov=cluster_bootstrap_se(cov_by_img, seed=seed + 1, n_boot=n_boot),
        k=float(k),
        n_patches=int(len(starts)),
    )


@dataclass
class ConsistencyReport:
    pi: np.ndarray = field(repr=False)
    median: float
    q25: float
    q75: float
    median_abs_dev: float
    hist_edges: np.ndarray = field(repr=False)
    hist_counts: np.ndarray = field(repr=False)

    @property
    def iqr(self) -> float:
        return self.q75 - self.q25

    def to_dict(self) -> dict:
        return {
            "median": self.median,
            "q25": self.q25,
            "q75": self.q75,
            "iqr": self.iqr,
            "median_abs_pi_minus_1": self.median_abs_dev,
            "mean_pi": float(self.pi.mean()),
            "n_patches": int(self.pi.size),
        }


def consistency_ratio(model, k: float, noisy, patch_size=(16, 16), patches_per_image: int = 64,
                      seed: int = 0, epsilon: float = ps.DEFAULT_EPSILON, bins=None) -> ConsistencyReport:
    """Distribution of pi_p on held-out images, with a histogram and summary."""
    x = np.asarray(noisy, dtype=np.float64)
    x = x.reshape((-1,) + x.shape[-2:])
    y_hat = _predict(model, x).reshape(x.shape)
    starts = _patch_starts(x.shape, patch_size, patches_per_image, seed)
    pi = ps.patch_statistics(x, y_hat, starts, patch_size, k, epsilon).pi
    q25, med, q75 = np.percentile(pi, [25, 50, 75])
    edges = np.asarray(bins) if bins is not None else np.linspace(0.0, 3.0, 61)
    counts, edges = np.histogram(np.clip(pi, edges[0], edges[-1]), bins=edges)
    return ConsistencyReport(pi, float(med), float(q25), float(q75), float(np.median(np.abs(pi - 1.0))), edges, counts)


# ---------------------------------------------------------------------------
# report writers
# ---------------------------------------------------------------------------
def write_json(obj: dict, path) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True, default=_json_default))


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not JSON serializable: {type(o)}")


def write_histogram_csv(report: ConsistencyReport, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["bin_low", "bin_high", "count"])
        for lo, hi, c in zip(report.hist_edges[:-1], report.hist_edges[1:], report.hist_counts):
            w.writerow([float(lo), float(hi), int(c)])
