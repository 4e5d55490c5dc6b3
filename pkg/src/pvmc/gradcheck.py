"""Finite-difference verification of autodiff rules and the closed-form PVMC gradient.

Relative error between two gradient arrays a and b is normwise:
max|a - b| / max(max|a|, max|b|), which stays meaningful when individual
entries are near zero.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from . import patchstats as ps
from .autodiff import Tensor

FD_STEP = 1e-5
OP_TOLERANCE = 1e-6
PVMC_TOLERANCE = 1e-6
PVMC_AUTODIFF_TOLERANCE = 1e-10


def relative_error(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    scale = max(np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0))
    if scale == 0.0:
        return 0.0
    return float(np.abs(a - b).max() / scale)


def numerical_gradient(f: Callable[..., float], arrays: list[np.ndarray], h: float = FD_STEP) -> list[np.ndarray]:
    """Central differences of scalar ``f(*arrays)`` w.r.t. every entry of every array."""
    grads = []
    for arr in arrays:
        g = np.zeros_like(arr, dtype=np.float64)
        flat = arr.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = f(*arrays)
            flat[i] = orig - h
            fm = f(*arrays)
            flat[i] = orig
            gflat[i] = (fp - fm) / (2 * h)
        grads.append(g)
    return grads


@dataclass
class CheckResult:
    name: str
    rel_error: float
    tolerance: float
    n_cases: int = 1

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.rel_error) and self.rel_error < self.tolerance)

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status} {self.name:<28s} max_rel_err={self.rel_error:.3e} tol={self.tolerance:.0e}"


def _away_from_zero(rng, shape, lo=0.1, hi=2.0):
    return rng.uniform(lo, hi, size=shape) * rng.choice([-1.0, 1.0], size=shape)


def _positive(rng, shape):
    return rng.uniform(0.5, 2.0, size=shape)


def _normal(rng, shape):
    return rng.standard_normal(shape)


# name -> (function of tensors, list of (shape, generator))
OP_CASES: dict[str, tuple[Callable, list]] = {
    "add": (lambda a, b: ad.add(a, b), [((4, 5), _normal), ((4, 5), _normal)]),
    "add_scalar_tensor": (lambda a, b: ad.add(a, b), [((4, 5), _normal), ((), _normal)]),
    "sub": (lambda a, b: ad.sub(a, b), [((4, 5), _normal), ((4, 5), _normal)]),
    "mul": (lambda a, b: ad.mul(a, b), [((4, 5), _normal), ((4, 5), _normal)]),
    "div": (lambda a, b: ad.div(a, b), [((4, 5), _normal), ((4, 5), _away_from_zero)]),
    "scalar_mul": (lambda a: ad.mul(a, 2.5), [((4, 5), _normal)]),
    "sum": (lambda a: ad.sum(a), [((4, 5), _normal)]),
    "sum_axis": (lambda a: ad.sum(a, axis=1), [((4, 5), _normal)]),
    "mean": (lambda a: ad.mean(a), [((4, 5), _normal)]),
    "mean_axis_keepdims": (lambda a: ad.mean(a, axis=1, keepdims=True), [((4, 5), _normal)]),
    "square": (lambda a: ad.square(a), [((4, 5), _normal)]),
    "sqrt": (lambda a: ad.sqrt(a), [((4, 5), _positive)]),
    "abs": (lambda a: ad.abs(a), [((4, 5), _away_from_zero)]),
    "exp": (lambda a: ad.exp(a), [((4, 5), _normal)]),
    "log": (lambda a: ad.log(a), [((4, 5), _positive)]),
    "relu": (lambda a: ad.relu(a), [((4, 5), _away_from_zero)]),
    "broadcast_to": (lambda a: ad.broadcast_to(a, (4, 5)), [((4, 1), _normal)]),
    "reshape": (lambda a: ad.reshape(a, (5, 4)), [((4, 5), _normal)]),
    "slice": (lambda a: a[1:3, 2:], [((4, 5), _normal)]),
    "extract_patches": (
        lambda a: ad.extract_patches(a, [(0, 0, 0), (0, 1, 2), (0, 1, 1)], (3, 3)),
        [((4, 5), _normal)],
    ),
    "concat": (lambda a, b: ad.concat([a, b], axis=3), [((1, 4, 5, 2), _normal), ((1, 4, 5, 3), _normal)]),
    "conv2d": (lambda x, w, b: ad.conv2d(x, w, b), [((2, 4, 5, 2), _normal), ((3, 3, 2, 3), _normal), ((3,), _normal)]),
    "conv2d_1x1": (lambda x, w: ad.conv2d(x, w), [((1, 4, 5, 3), _normal), ((1, 1, 3, 2), _normal)]),
    "conv_transpose2d": (
        lambda x, w, b: ad.conv_transpose2d(x, w, b),
        [((2, 4, 5, 2), _normal), ((2, 2, 2, 3), _normal), ((3,), _normal)],
    ),
    "maxpool2d": (lambda x: ad.maxpool2d(x), [((2, 4, 6, 2), _normal)]),
}


def check_op(name: str, seed: int = 0, h: float = FD_STEP) -> CheckResult:
    """Compare backward() against central differences for one registered op.

    The op output is contracted with a fixed random weight tensor so the
    upstream gradient is not uniform.
    """
    fn, inputs = OP_CASES[name]
    rng = np.random.default_rng(seed)
    arrays = [np.asarray(gen(rng, shape), dtype=np.float64) for shape, gen in inputs]
    out_shape = fn(*[Tensor(a) for a in arrays]).shape
    weights = rng.standard_normal(out_shape)

    def scalar(*arrs):
        return float((fn(*[Tensor(a) for a in arrs]).data * weights).sum())

    tensors = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    out = fn(*tensors)
    ad.sum(ad.mul(out, Tensor(weights))).backward()
    numeric = numerical_gradient(scalar, [a.copy() for a in arrays], h)
    err = max(relative_error(t.grad, n) for t, n in zip(tensors, numeric))
    return CheckResult(name, err, OP_TOLERANCE)


def check_pvmc(patch_sizes=((2, 2), (4, 4), (16, 16)), patches_per_size: int = 40, seed: int = 0,
               h: float = FD_STEP) -> tuple[CheckResult, CheckResult]:
    """Closed-form single-patch gradient vs autodiff and vs central differences.

    Each draw uses a fresh 24x24 image pair with Poisson-like residuals and a
    random k, so pi_p varies on both sides of 1.
    """
    rng = np.random.default_rng(seed)
    worst_ad = 0.0
    worst_fd = 0.0
    checked = 0
    for size in patch_sizes:
        sx, sy = size
        for _ in range(patches_per_size):
            y = rng.uniform(1.0, 20.0, size=(24, 24))
            x = y + rng.standard_normal((24, 24)) * np.sqrt(y) * rng.uniform(0.5, 1.5)
            k = float(rng.uniform(0.3, 2.0))
            eps = 1e-6
            start = np.array([[0, rng.integers(0, 24 - sy + 1), rng.integers(0, 24 - sx + 1)]])
            yt = Tensor(y.copy(), requires_grad=True)
            loss = ps.pvmc_loss(x, yt, start, size, k, epsilon=eps)
            if abs(float(loss.data)) < 1e-4:
                continue  # too close to the kink for a meaningful finite difference
            loss.backward()
            analytic = ps.pvmc_grad_analytic(x, y, start[0], size, k, eps)
            y0, x0 = start[0, 1], start[0, 2]
            auto = yt.grad[y0 : y0 + sy, x0 : x0 + sx]
            worst_ad = max(worst_ad, relative_error(analytic, auto))

            block = y[y0 : y0 + sy, x0 : x0 + sx].copy()

            def scalar(b):
                yy = y.copy()
                yy[y0 : y0 + sy, x0 : x0 + sx] = b
                return float(ps.pvmc_loss(x, Tensor(yy), start, size, k, epsilon=eps).data)

            numeric = numerical_gradient(scalar, [block], h)[0]
            worst_fd = max(worst_fd, relative_error(analytic, numeric))
            checked += 1
    return (
        CheckResult("pvmc_analytic_vs_autodiff", worst_ad, PVMC_AUTODIFF_TOLERANCE, checked),
        CheckResult("pvmc_analytic_vs_finite_diff", worst_fd, PVMC_TOLERANCE, checked),
    )


def run_gradcheck(seed: int = 0, ops=None) -> list[CheckResult]:
    """Full suite in 64-bit: every registered op, then the PVMC three-way comparison."""
    previous = ad.default_dtype()
    ad.set_default_dtype(np.float64)
    try:
        results = [check_op(name, seed) for name in (ops or OP_CASES)]
        results.extend(check_pvmc(seed=seed))
    finally:
        ad.set_default_dtype(previous)
    return results
