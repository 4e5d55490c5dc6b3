"""Patch sampling, unbiased patch statistics and the PVMC loss.

Patches are axis-aligned blocks of ``size = (s_x, s_y)`` voxels (columns,
rows) addressed by start triples ``(image_index, y0, x0)``. For each patch p
with residual r = x - y_hat the consistency ratio is

    pi_p = Var_p(r) / (k * Mean_p(y_hat) + eps)

and the loss is the mean of |pi_p - 1| over patches. ``pvmc_loss`` builds it
from autodiff primitives; ``pvmc_grad_analytic`` evaluates the closed-form
gradient so the two can be checked against each other.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .exceptions import ConfigurationError, GraphError

DEFAULT_EPSILON = 1e-6


@dataclass
class PatchSpec:
    size: tuple[int, int] = (16, 16)
    count: int = 64
    seed: int = 0

    def __post_init__(self):
        self.size = tuple(int(s) for s in self.size)
        if len(self.size) != 2 or min(self.size) < 1:
            raise ConfigurationError(f"invalid patch size {self.size}")
        if self.size[0] * self.size[1] < 2:
            raise ConfigurationError("patches need at least 2 voxels for an unbiased variance")
        if self.count < 1:
            raise ConfigurationError("patch count must be >= 1")

    @property
    def voxels(self) -> int:
        return self.size[0] * self.size[1]

    def rng(self) -> np.random.Generator:
        return np.random.default_rng(self.seed)


@dataclass
class PvmcState:
    """Learnable Poisson slope stored as k = exp(kappa), plus eps and the loss weight."""

    kappa: Tensor
    epsilon: float = DEFAULT_EPSILON
    lambda_weight: float = 1e-5

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ConfigurationError("epsilon must be positive")
        if self.lambda_weight < 0:
            raise ConfigurationError("lambda_weight must be >= 0")

    @classmethod
    def from_k(cls, k: float, epsilon: float = DEFAULT_EPSILON, lambda_weight: float = 1e-5,
               dtype=None, requires_grad: bool = True) -> "PvmcState":
        if not k > 0:
            raise ConfigurationError("k must be positive")
        dtype = dtype or ad.default_dtype()
        kappa = Tensor(np.asarray(math.log(k), dtype=dtype), requires_grad=requires_grad, name="kappa")
        return cls(kappa, epsilon, lambda_weight)

    @property
    def k(self) -> float:
        return float(np.exp(self.kappa.data))

    def k_tensor(self) -> Tensor:
        return ad.exp(self.kappa)


@dataclass
class PatchStats:
    mean_y: np.ndarray
    var_r: np.ndarray
    pi: np.ndarray
    mean_r: np.ndarray = field(default=None)
    var_y: np.ndarray = field(default=None)
    cov_ry: np.ndarray = field(default=None)

    def __len__(self):
        return self.pi.size


def sample_patches(image_dims: Sequence[int], spec: PatchSpec, rng: np.random.Generator | None = None,
                   n_images: int = 1) -> np.ndarray:
    """Draw ``spec.count`` patch starts, uniform over all valid positions.

    ``image_dims`` is (height, width). Patches are assigned to images
    round-robin. Returns an int array of shape (P, 3): (image, y0, x0).
    """
    height, width = int(image_dims[0]), int(image_dims[1])
    sx, sy = spec.size
    if sx > width or sy > height:
        raise ConfigurationError(f"patch {spec.size} does not fit in image {width}x{height}")
    rng = spec.rng() if rng is None else rng
    y0 = rng.integers(0, height - sy + 1, size=spec.count)
    x0 = rng.integers(0, width - sx + 1, size=spec.count)
    img = np.arange(spec.count) % max(1, n_images)
    return np.stack([img, y0, x0], axis=1).astype(np.int64)


def patch_mean(z, patch, size):
    """Mean over one patch of a Tensor or array (``patch`` = (image, y0, x0) or (y0, x0))."""
    block = _gather(z, patch, size)
    return block.mean()


def patch_var_unbiased(z, patch, size):
    """Unbiased (1/(S-1)) variance over one patch."""
    if size[0] * size[1] < 2:
        raise ConfigurationError("unbiased variance needs at least 2 voxels")
    block = _gather(z, patch, size)
    s = size[0] * size[1]
    if isinstance(block, Tensor):
        dev = block - ad.broadcast_to(block.mean(axis=1, keepdims=True), block.shape)
        return ad.square(dev).sum() / (s - 1)
    return float(((block - block.mean()) ** 2).sum() / (s - 1))


def _gather(z, patch, size):
    p = np.asarray(patch, dtype=np.int64).reshape(-1)
    if p.size == 2:
        p = np.concatenate([[0], p])
    sx, sy = size
    if isinstance(z, Tensor):
        return ad.extract_patches(z, p[None, :], (sy, sx))
    z = np.asarray(z)
    lead = z.reshape((-1,) + z.shape[-2:])
    return lead[p[0], p[1] : p[1] + sy, p[2] : p[2] + sx].reshape(1, -1)


def _as_const(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x.detach()
    return Tensor(np.asarray(x, dtype=like.dtype))


def pvmc_terms(x, y_hat: Tensor, starts, size, k, epsilon: float = DEFAULT_EPSILON,
               stop_gradient_mean: bool = False) -> Tensor:
    """Per-patch consistency ratios pi_p as a (P,) tensor.

    ``k`` is a Tensor (e.g. ``state.k_tensor()``) or a float.
    """
    if not isinstance(y_hat, Tensor):
        y_hat = Tensor(y_hat)
    xt = _as_const(x, y_hat)
    if xt.shape != y_hat.shape:
        raise GraphError(f"x and y_hat shapes differ: {xt.shape} vs {y_hat.shape}")
    sx, sy = size
    s = sx * sy
    if s < 2:
        raise ConfigurationError("patches need at least 2 voxels")
    block = (sy, sx)
    yp = ad.extract_patches(y_hat, starts, block)
    rp = ad.extract_patches(xt, starts, block) - yp
    dev = rp - ad.broadcast_to(rp.mean(axis=1, keepdims=True), rp.shape)
    var_r = ad.square(dev).sum(axis=1) / (s - 1)
    mean_y = (yp.detach() if stop_gradient_mean else yp).mean(axis=1)
    return var_r / (k * mean_y + epsilon)


def pvmc_loss(x, y_hat: Tensor, starts, size, state: PvmcState | float,
              epsilon: float | None = None, stop_gradient_mean: bool = False) -> Tensor:
    """Mean over patches of |pi_p - 1|; differentiable w.r.t. y_hat and the state's kappa."""
    if isinstance(state, PvmcState):
        k = state.k_tensor()
        eps = state.epsilon if epsilon is None else epsilon
    else:
        k = float(state)
        eps = DEFAULT_EPSILON if epsilon is None else epsilon
    pi = pvmc_terms(x, y_hat, starts, size, k, eps, stop_gradient_mean)
    return ad.abs(pi - 1.0).mean()


# ---------------------------------------------------------------------------
# closed-form gradient
# ---------------------------------------------------------------------------
def _block_arrays(x, y_hat, patch, size):
    x = x.data if isinstance(x, Tensor) else np.asarray(x)
    y_hat = y_hat.data if isinstance(y_hat, Tensor) else np.asarray(y_hat)
    return _gather(x, patch, size)[0], _gather(y_hat, patch, size)[0]


def pvmc_grad_analytic(x, y_hat, patch, size, k: float, epsilon: float = DEFAULT_EPSILON) -> np.ndarray:
    """d|pi_p - 1| / d y_hat for every voxel of one patch, shape (s_y, s_x).

    sgn(pi-1) * [ -2 (r_k - rbar)/(S-1) * D - k Var_p(r)/S ] / D^2
    with D = k * Mean_p(y_hat) + eps. The subgradient at pi = 1 is 0.
    """
    xb, yb = _block_arrays(x, y_hat, patch, size)
    s = xb.size
    r = xb - yb
    rbar = r.mean()
    var_r = ((r - rbar) ** 2).sum() / (s - 1)
    d = k * yb.mean() + epsilon
    sign = np.sign(var_r / d - 1.0)
    grad = sign * ((-2.0 * (r - rbar) / (s - 1)) * d - k * var_r / s) / d**2
    return grad.reshape(size[1], size[0])


def pvmc_grad_k_analytic(x, y_hat, patch, size, k: float, epsilon: float = DEFAULT_EPSILON) -> float:
    """d|pi_p - 1| / dk for one patch: sgn(pi-1) * (-Var_p(r) * Mean_p(y_hat) / D^2)."""
    xb, yb = _block_arrays(x, y_hat, patch, size)
    s = xb.size
    r = xb - yb
    var_r = ((r - r.mean()) ** 2).sum() / (s - 1)
    ybar = yb.mean()
    d = k * ybar + epsilon
    return float(np.sign(var_r / d - 1.0) * (-var_r * ybar / d**2))


def pvmc_grad_analytic_image(x, y_hat, starts, size, k: float, epsilon: float = DEFAULT_EPSILON) -> np.ndarray:
    """Gradient of the full PVMC loss (mean over patches) w.r.t. every voxel of y_hat."""
    y_arr = y_hat.data if isinstance(y_hat, Tensor) else np.asarray(y_hat)
    out = np.zeros(y_arr.shape, dtype=np.float64)
    lead = out.reshape((-1,) + out.shape[-2:])
    starts = np.asarray(starts, dtype=np.int64).reshape(-1, 3)
    sx, sy = size
    for p in starts:
        g = pvmc_grad_analytic(x, y_arr, p, size, k, epsilon)
        lead[p[0], p[1] : p[1] + sy, p[2] : p[2] + sx] += g
    return out / len(starts)


# ---------------------------------------------------------------------------
# vectorized statistics (numpy only, no graph)
# ---------------------------------------------------------------------------
def patch_statistics(x, y_hat, starts, size, k: float, epsilon: float = DEFAULT_EPSILON) -> PatchStats:
    """Per-patch Mean_p(y_hat), Var_p(r), pi_p plus residual/output covariance terms."""
    x = np.asarray(x, dtype=np.float64)
    y_hat = np.asarray(y_hat, dtype=np.float64)
    sx, sy = size
    s = sx * sy
    idx = ad.patch_flat_indices(x.shape, starts, (sy, sx))
    xp = x.reshape(-1)[idx]
    yp = y_hat.reshape(-1)[idx]
    rp = xp - yp
    mean_y = yp.mean(axis=1)
    mean_r = rp.mean(axis=1)
    dr = rp - mean_r[:, None]
    dy = yp - mean_y[:, None]
    var_r = (dr**2).sum(axis=1) / (s - 1)
    var_y = (dy**2).sum(axis=1) / (s - 1)
    cov = (dr * dy).sum(axis=1) / (s - 1)
    pi = var_r / (k * mean_y + epsilon)
    return PatchStats(mean_y, var_r, pi, mean_r, var_y, cov)


def patch_gradient_magnitudes(x, y_hat, starts, size, k: float, epsilon: float = DEFAULT_EPSILON) -> tuple[np.ndarray, np.ndarray]:
    """Mean patch intensity and mean |dL_p/dy_k| over the patch, for every patch."""
    x = np.asarray(x, dtype=np.float64)
    y_hat = np.asarray(y_hat, dtype=np.float64)
    sx, sy = size
    s = sx * sy
    idx = ad.patch_flat_indices(x.shape, starts, (sy, sx))
    yp = y_hat.reshape(-1)[idx]
    rp = x.reshape(-1)[idx] - yp
    dr = rp - rp.mean(axis=1, keepdims=True)
    var_r = (dr**2).sum(axis=1) / (s - 1)
    ybar = yp.mean(axis=1)
    d = k * ybar + epsilon
    sign = np.sign(var_r / d - 1.0)
    g = sign[:, None] * ((-2.0 * dr / (s - 1)) * d[:, None] - (k * var_r / s)[:, None]) / (d**2)[:, None]
    return ybar, np.abs(g).mean(axis=1)


@dataclass
class ProfileRow:
    bin_low: float
    bin_high: float
    mean_intensity: float
    mean_abs_grad: float
    n_samples: int


PROFILE_COLUMNS = ("bin_low", "bin_high", "mean_intensity", "mean_abs_grad", "n_samples")


def grad_magnitude_profile(x_images, y_hat_images, state: PvmcState | float, bins, size=(16, 16),
                           n_patches: int = 10_000, seed: int = 0, min_per_bin: int = 100,
                           epsilon: float | None = None) -> list[ProfileRow]:
    """Bin patches by mean intensity and average the analytic gradient magnitude per bin.

    ``y_hat_images`` may be an array or a callable mapping the noisy batch
    to predictions. Bins with fewer than ``min_per_bin`` patches are reported
    with NaN statistics rather than dropped.
    """
    x = np.asarray(x_images, dtype=np.float64)
    y_hat = y_hat_images(x) if callable(y_hat_images) else y_hat_images
    y_hat = np.asarray(y_hat, dtype=np.float64)
    if isinstance(state, PvmcState):
        k, eps = state.k, state.epsilon
    else:
        k, eps = float(state), DEFAULT_EPSILON
    eps = eps if epsilon is None else epsilon
    lead = x.reshape((-1,) + x.shape[-2:])
    spec = PatchSpec(size=size, count=n_patches, seed=seed)
    starts = sample_patches(lead.shape[-2:], spec, n_images=lead.shape[0])
    ybar, gmag = patch_gradient_magnitudes(lead, y_hat.reshape(lead.shape), starts, size, k, eps)
    edges = np.asarray(bins, dtype=np.float64)
    rows = []
    which = np.digitize(ybar, edges) - 1
    for b in range(len(edges) - 1):
        sel = which == b
        n = int(sel.sum())
        if n >= min_per_bin:
            rows.append(ProfileRow(edges[b], edges[b + 1], float(ybar[sel].mean()), float(gmag[sel].mean()), n))
        else:
            rows.append(ProfileRow(edges[b], edges[b + 1], math.nan, math.nan, n))
    return rows


def loglog_slope(rows: Iterable[ProfileRow]) -> tuple[float, float]:
    """Least-squares slope of log(mean |grad|) vs log(mean intensity) over populated bins.

    Returns (slope, decades spanned).
    """
    pts = [(r.mean_intensity, r.mean_abs_grad) for r in rows
           if np.isfinite(r.mean_intensity) and r.mean_intensity > 0 and r.mean_abs_grad > 0]
    if len(pts) < 2:
        raise ConfigurationError("need at least two populated bins for a slope")
    lx, lg = np.log10(np.array(pts)).T
    slope = np.polyfit(lx, lg, 1)[0]
    return float(slope), float(lx.max() - lx.min())


def write_profile_csv(rows: Iterable[ProfileRow], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(PROFILE_COLUMNS)
        for r in rows:
            w.writerow([r.bin_low, r.bin_high, r.mean_intensity, r.mean_abs_grad, r.n_samples])
