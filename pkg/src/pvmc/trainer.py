"""Joint optimization of L_total = L1 + lambda * L_PVMC with a learnable Poisson slope.

The slope is parameterized as k = exp(kappa) and updated by the same Adam
optimizer and learning rate as the network weights. Three RNG streams are
derived from the seed: network init, batch shuffling, and per-step patch
sampling; the patch stream never influences the other two, so a lambda=0 run
follows exactly the same trajectory as the plain L1 trainer.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from . import diagnostics as dg
from . import patchstats as ps
from .autodiff import Tensor
from .denoiser import NetConfig, UNet, save_checkpoint
from .exceptions import ConfigurationError
from .simulator import Dataset

log = logging.getLogger(__name__)

FULL_SCALE_LAMBDAS = (0.0, 1e-2, 1e-3, 5e-4, 1e-4, 5e-5, 1e-5, 5e-6, 1e-6)
FULL_SCALE_PATCH_SIZES = (4, 8, 16, 32, 64, 128)


@dataclass
class TrainConfig:
    """Training hyperparameters. Defaults are the published full-scale settings."""

    epochs: int = 1500
    batch_size: int = 16
    lr_initial: float = 1e-4
    lr_min: float = 1e-7
    plateau_factor: float = 0.5
    plateau_patience: int = 20
    early_stopping_patience: int | None = 100
    seed: int = 3407
    lambda_weight: float = 1e-5
    patch_size: tuple[int, int] = (16, 16)
    patches_per_image: int = 8
    k_init: float = 0.8
    epsilon: float = ps.DEFAULT_EPSILON
    beta1: float = 0.9
    beta2: float = 0.999
    eps_opt: float = 1e-8
    stop_gradient_mean: bool = False
    dtype: str = "float32"
    eval_patches_per_image: int = 32

    def __post_init__(self):
        self.patch_size = tuple(int(s) for s in self.patch_size)
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigurationError("epochs and batch_size must be >= 1")
        if not 0 < self.lr_min <= self.lr_initial:
            raise ConfigurationError("need 0 < lr_min <= lr_initial")
        if self.lambda_weight < 0:
            raise ConfigurationError("lambda_weight must be >= 0")
        if not self.k_init > 0:
            raise ConfigurationError("k_init must be positive")
        if not 0 < self.plateau_factor < 1:
            raise ConfigurationError("plateau_factor must lie in (0, 1)")
        if self.dtype not in ("float32", "float64"):
            raise ConfigurationError("dtype must be float32 or float64")

    @classmethod
    def toy(cls, **overrides) -> "TrainConfig":
        """Desk-scale settings for 64x64 synthetic images on a CPU.

        beta2 is lowered to 0.99: with a zero-initialized head the first
        updates see k * Mean(y_hat) near zero, and the resulting kappa gradient
        spikes would otherwise dominate Adam's second moment for thousands
        of steps and stall k.
        """
        base = dict(epochs=300, batch_size=8, lr_initial=2e-3, lr_min=1e-7, plateau_patience=20,
                    early_stopping_patience=None, seed=3407, lambda_weight=1e-3, beta2=0.99)
        base.update(overrides)
        return cls(**base)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["patch_size"] = list(self.patch_size)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


# ---------------------------------------------------------------------------
# optimizer and scheduler
# ---------------------------------------------------------------------------
@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0

    @classmethod
    def zeros_like(cls, params: Sequence[np.ndarray]) -> "AdamState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params], 0)


def adam_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray | None], state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> AdamState:
    """One bias-corrected Adam update, applied in place to ``params``.

    A ``None`` gradient is treated as zero.
    """
    state.t += 1
    bc1 = 1.0 - beta1**state.t
    bc2 = 1.0 - beta2**state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g is None:
            g = np.zeros_like(p)
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        step = (lr / bc1) * m / (np.sqrt(v / bc2) + eps)
        p -= step.astype(p.dtype, copy=False)
    return state


@dataclass
class ReduceOnPlateau:
    lr: float
    factor: float = 0.5
    patience: int = 20
    min_lr: float = 1e-7
    best: float = -math.inf
    bad_epochs: int = 0

    def step(self, metric: float) -> float:
        if metric > self.best:
            self.best = metric
            self.bad_epochs = 0
        else:
            self.bad_epochs += 1
            if self.bad_epochs > self.patience:
                self.lr = max(self.lr * self.factor, self.min_lr)
                self.bad_epochs = 0
        return self.lr


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------
@dataclass
class TrainRun:
    config: TrainConfig
    net_config: NetConfig
    history: list[dict] = field(default_factory=list)
    best_epoch: int = -1
    best_psnr: float = -math.inf
    best_state: dict = field(default_factory=dict, repr=False)
    best_k: float = math.nan
    final_state: dict = field(default_factory=dict, repr=False)
    status: str = "completed"
    diverged_epoch: int | None = None
    analytic_k: float | None = None
    wall_time: float = 0.0
    objective: str = "pvmc"
    checkpoint: str | None = None

    @property
    def final_k(self) -> float:
        return self.history[-1]["k"] if self.history else math.nan

    @property
    def k_trajectory(self) -> np.ndarray:
        return np.array([h["k"] for h in self.history])

    def model(self, which: str = "best") -> UNet:
        net = UNet(self.net_config, params=None, dtype=self.config.dtype)
        net.load_state_dict(self.best_state if which == "best" else self.final_state)
        return net

    def to_dict(self) -> dict:
        return {
            "config": self.config.to_dict(),
            "net_config": self.net_config.to_dict(),
            "history": self.history,
            "best_epoch": self.best_epoch,
            "best_psnr": self.best_psnr,
            "best_k": self.best_k,
            "final_k": self.final_k,
            "status": self.status,
            "diverged_epoch": self.diverged_epoch,
            "analytic_k": self.analytic_k,
            "objective": self.objective,
            "checkpoint": self.checkpoint,
        }

    def save(self, directory) -> Path:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        save_checkpoint(self.best_state, directory / "checkpoint", extra={"k": self.best_k, "epoch": self.best_epoch})
        self.checkpoint = "checkpoint"
        path = directory / "train_run.json"
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True, default=dg._json_default))
        return path


def _stream(seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, *key]))


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for i in range(0, n, batch_size):
        yield order[i : i + batch_size]


def _validate(net: UNet, val_x: np.ndarray, val_y: np.ndarray, k: float, cfg: TrainConfig, epoch: int) -> dict:
    pred = net.predict(val_x)
    q = dg.quality_report(pred, val_y)
    size = cfg.patch_size
    rec = {"val_psnr": q.mean_psnr, "val_ssim": q.mean_ssim}
    if size[0] <= val_x.shape[-1] and size[1] <= val_x.shape[-2]:
        starts = dg._patch_starts(val_x.shape, size, cfg.eval_patches_per_image, seed=10_000 + epoch)
        st = ps.patch_statistics(val_x, pred, starts, size, k, cfg.epsilon)
        rec["m1"] = float((val_x - pred).mean())
        rec["m2"] = float((st.var_r - (k * st.mean_y + cfg.epsilon)).mean())
        rec["median_abs_pi_minus_1"] = float(np.median(np.abs(st.pi - 1.0)))
        rec["mean_pi"] = float(st.pi.mean())
    return rec


def train(train_set: Dataset, val_set: Dataset, net_config: NetConfig | None = None,
          config: TrainConfig | None = None, objective: str = "pvmc", progress=None, on_step=None) -> TrainRun:
    """Train the denoiser end-to-end.

    ``objective="pvmc"`` optimizes L1 + lambda * PVMC jointly with k;
    ``objective="l1"`` is the plain L1 baseline (no PVMC graph, k frozen).
    ``progress`` receives each epoch record; ``on_step(step, arrays)`` sees
    the parameter arrays (network weights, then kappa) after every update.
    """
    cfg = config or TrainConfig()
    net_config = net_config or NetConfig()
    if objective not in ("pvmc", "l1"):
        raise ConfigurationError(f"unknown objective {objective!r}")
    if len(train_set) == 0 or len(val_set) == 0:
        raise ConfigurationError("train and validation sets must be nonempty")
    dtype = np.dtype(cfg.dtype)
    x_all = train_set.arrays("noisy").astype(dtype)[:, None]
    y_all = train_set.arrays("target").astype(dtype)[:, None]
    val_x = val_set.arrays("noisy").astype(np.float64)
    val_y = val_set.arrays("target").astype(np.float64)
    net_config.check_input(x_all.shape)
    height, width = x_all.shape[-2:]
    if cfg.patch_size[0] > width or cfg.patch_size[1] > height:
        raise ConfigurationError(f"patch {cfg.patch_size} does not fit {width}x{height} images")

    net = UNet(net_config, seed=cfg.seed, dtype=dtype)
    state = ps.PvmcState.from_k(cfg.k_init, cfg.epsilon, cfg.lambda_weight, dtype=dtype)
    params = net.parameters() + [state.kappa]
    adam = AdamState.zeros_like([p.data for p in params])
    sched = ReduceOnPlateau(cfg.lr_initial, cfg.plateau_factor, cfg.plateau_patience, cfg.lr_min)
    shuffle_rng = _stream(cfg.seed, 1)
    run = TrainRun(cfg, net_config, analytic_k=train_set.analytic_k, objective=objective)
    lam = Tensor(np.asarray(cfg.lambda_weight, dtype=dtype))
    t0 = time.perf_counter()
    step = 0
    stale = 0

    for epoch in range(cfg.epochs):
        l1_sum = pv_sum = 0.0
        n_seen = 0
        lr = sched.lr
        for idx in _batches(len(x_all), cfg.batch_size, shuffle_rng):
            xb = Tensor(x_all[idx])
            yb = Tensor(y_all[idx])
            y_hat = net(xb)
            l1 = ad.abs(y_hat - yb).mean()
            spec = ps.PatchSpec(cfg.patch_size, cfg.patches_per_image * len(idx))
            starts = ps.sample_patches((height, width), spec, rng=_stream(cfg.seed, 2, step), n_images=len(idx))
            if objective == "pvmc":
                pv = ps.pvmc_loss(xb, y_hat, starts, cfg.patch_size, state,
                                  stop_gradient_mean=cfg.stop_gradient_mean)
                total = l1 + lam * pv
            else:
                # monitored only; the baseline graph never sees it
                with ad.no_grad():
                    pv = ps.pvmc_loss(xb.data, Tensor(y_hat.data), starts, cfg.patch_size, state.k)
                total = l1
            pv_val = float(pv.data)
            l1_val = float(l1.data)
            if not (math.isfinite(l1_val) and math.isfinite(float(total.data))):
                run.status = "diverged"
                run.diverged_epoch = epoch
                log.error("non-finite loss at epoch %d", epoch)
                break
            for p in params:
                p.grad = None
            total.backward()
            adam_step([p.data for p in params], [p.grad for p in params], adam, lr, cfg.beta1, cfg.beta2, cfg.eps_opt)
            if on_step is not None:
                on_step(step, [p.data for p in params])
            l1_sum += l1_val * len(idx)
            pv_sum += pv_val * len(idx)
            n_seen += len(idx)
            step += 1
        if run.status == "diverged":
            break

        k = state.k
        rec = {"epoch": epoch, "l1": l1_sum / n_seen, "pvmc": pv_sum / n_seen, "k": k, "lr": lr}
        rec["total"] = rec["l1"] + cfg.lambda_weight * rec["pvmc"] if objective == "pvmc" else rec["l1"]
        rec.update(_validate(net, val_x, val_y, k, cfg, epoch))
        run.history.append(rec)
        if progress is not None:
            progress(rec)
        if rec["val_psnr"] > run.best_psnr:
            run.best_psnr = rec["val_psnr"]
            run.best_epoch = epoch
            run.best_state = net.state_dict()
            run.best_k = k
            stale = 0
        else:
            stale += 1
        sched.step(rec["val_psnr"])
        if cfg.early_stopping_patience is not None and stale > cfg.early_stopping_patience:
            run.status = "early_stopped"
            break

    run.final_state = net.state_dict()
    run.wall_time = time.perf_counter() - t0
    return run


def train_l1(train_set: Dataset, val_set: Dataset, net_config: NetConfig | None = None,
             config: TrainConfig | None = None, progress=None, on_step=None) -> TrainRun:
    """Plain L1 U-Net baseline with the same seeds and data order."""
    return train(train_set, val_set, net_config, config, objective="l1", progress=progress, on_step=on_step)


def progress_line(rec: dict) -> str:
    return f"epoch={rec['epoch']} l1={rec['l1']:.6g} pvmc={rec['pvmc']:.6g} k={rec['k']:.6g} psnr={rec['val_psnr']:.4f}"


# ---------------------------------------------------------------------------
# ablations and k calibration
# ---------------------------------------------------------------------------
ABLATION_COLUMNS = ("lambda", "patch", "psnr", "ssim", "final_k", "mean_pi", "median_abs_pi_minus_1", "status")


def full_scale_grid(lambdas=FULL_SCALE_LAMBDAS, patch_sizes=FULL_SCALE_PATCH_SIZES, fixed_patch: int = 16,
               fixed_lambda: float = 1e-5) -> list[tuple[float, int]]:
    """The two one-dimensional sweeps: lambda at a fixed patch, patch at a fixed lambda."""
    cells = [(lam, fixed_patch) for lam in lambdas]
    cells += [(fixed_lambda, p) for p in patch_sizes if (fixed_lambda, p) not in cells]
    return cells


def ablate(cells: Sequence[tuple[float, int]], train_set: Dataset, val_set: Dataset,
           net_config: NetConfig | None, base_config: TrainConfig, progress=None) -> list[dict]:
    """One training run per (lambda, square patch side) cell with shared seeds.

    A failing cell is recorded with its error and the grid continues.
    """
    if not cells:
        raise ConfigurationError("ablation grid is empty")
    rows = []
    for lam, patch in cells:
        cfg = replace(base_config, lambda_weight=float(lam), patch_size=(int(patch), int(patch)))
        row = {"lambda": float(lam), "patch": int(patch)}
        try:
            run = train(train_set, val_set, net_config, cfg)
            last = run.history[run.best_epoch] if run.best_epoch >= 0 else {}
            model = run.model("best")
            q = dg.quality_report(model.predict(val_set.arrays("noisy")), val_set.arrays("target"))
            row.update(psnr=q.mean_psnr, ssim=q.mean_ssim, final_k=run.final_k,
                       mean_pi=last.get("mean_pi", math.nan),
                       median_abs_pi_minus_1=last.get("median_abs_pi_minus_1", math.nan), status=run.status)
        except Exception as exc:  # noqa: BLE001 - recorded per cell
            log.exception("ablation cell lambda=%g patch=%d failed", lam, patch)
            row.update(psnr=math.nan, ssim=math.nan, final_k=math.nan, mean_pi=math.nan,
                       median_abs_pi_minus_1=math.nan, status=f"failed: {exc}")
        rows.append(row)
        if progress is not None:
            progress(row)
    return rows


def write_ablation_csv(rows: Sequence[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=ABLATION_COLUMNS)
        w.writeheader()
        for r in rows:
            w.writerow({c: r.get(c) for c in ABLATION_COLUMNS})


@dataclass
class CalibrationResult:
    runs: list[TrainRun]
    analytic_k: float

    @property
    def ks(self) -> list[float]:
        return [r.final_k for r in self.runs]

    @property
    def max_pairwise_rel_diff(self) -> float:
        ks = np.array(self.ks)
        return float((ks.max() - ks.min()) / ks.mean())

    @property
    def max_rel_error(self) -> float:
        return float(np.max(np.abs(np.array(self.ks) - self.analytic_k)) / self.analytic_k)

    def to_dict(self) -> dict:
        return {
            "ks": self.ks,
            "analytic_k": self.analytic_k,
            "max_pairwise_rel_diff": self.max_pairwise_rel_diff,
            "max_rel_error_vs_analytic": self.max_rel_error,
            "k_trajectories": [r.k_trajectory.tolist() for r in self.runs],
        }


def calibrate_k(train_set: Dataset, val_set: Dataset, net_config: NetConfig | None, config: TrainConfig,
                n_splits: int = 3, progress=None) -> CalibrationResult:
    """Train on ``n_splits`` disjoint, equal parts of ``train_set`` and compare the learned k."""
    if len(train_set) < n_splits:
        raise ConfigurationError("not enough training pairs for the requested splits")
    parts = np.array_split(np.arange(len(train_set)), n_splits)
    runs = [train(train_set.subset(p), val_set, net_config, config, progress=progress) for p in parts]
    return CalibrationResult(runs, train_set.analytic_k)
