"""Command-line entry point.

    pvmc <simulate|gradcheck|train|eval|ablate|calibrate-k> --config <path> [--out <dir>] [--seed <n>]

Exit codes: 0 success, 1 I/O error, 2 configuration error, 3 verification
failure. ``PVMC_THREADS`` caps the BLAS thread pool.
"""

from __future__ import annotations

import argparse
import copy
import csv
import hashlib
import json
import logging
import os
import sys
import time
from contextlib import nullcontext
from pathlib import Path

import numpy as np

from . import __version__
from . import diagnostics as dg
from . import gradcheck as gc
from . import simulator as sim
from . import trainer as tr
from .denoiser import NetConfig, UNet, load_checkpoint
from .exceptions import ConfigurationError, VerificationError

log = logging.getLogger("pvmc")

EXIT_OK, EXIT_IO, EXIT_CONFIG, EXIT_VERIFY = 0, 1, 2, 3
COMMANDS = ("simulate", "gradcheck", "train", "eval", "ablate", "calibrate-k")

DEFAULTS: dict[str, dict] = {
    "simulate": {
        "phantom_kind": "lesion",
        "width": 64,
        "height": 64,
        "base_activity": 100.0,
        "lors_per_voxel": 9,
        "kernel": "gauss3",
        "correction_spread": 0.0,
        "system_seed": 1,
        "low_dose": 0.01,
        "full_dose": 1.0,
        "n_train": 40,
        "n_val": 20,
        "n_test": 20,
        "seed": 3407,
    },
    "gradcheck": {"seed": 0, "ops": None},
    "train": {"dataset": None, "objective": "pvmc", "net": {}, "train": {}, "preset": "toy"},
    "eval": {
        "dataset": None,
        "split": "test",
        "runs": {},
        "reference_k": "analytic",
        "patch_size": 16,
        "patches_per_image": 64,
        "n_boot": 1000,
        "seed": 0,
        "dump_images": 0,
    },
    "ablate": {
        "dataset": None,
        "patch_dataset": None,
        "net": {},
        "train": {},
        "preset": "toy",
        "lambdas": list(tr.FULL_SCALE_LAMBDAS),
        "patch_sizes": list(tr.FULL_SCALE_PATCH_SIZES),
        "fixed_patch": 16,
        "fixed_lambda": None,
    },
    "calibrate-k": {"dataset": None, "net": {}, "train": {}, "preset": "toy", "n_splits": 3, "max_rel_spread": None},
}


# ---------------------------------------------------------------------------
# config and manifest helpers
# ---------------------------------------------------------------------------
def _merge(base: dict, override: dict, where: str = "config") -> dict:
    out = copy.deepcopy(base)
    for key, val in override.items():
        if key not in base:
            raise ConfigurationError(f"unknown key {where}.{key}")
        if isinstance(base[key], dict) and base[key] and isinstance(val, dict):
            out[key] = _merge(base[key], val, f"{where}.{key}")
        else:
            out[key] = val
    return out


def resolve_config(command: str, path: str | None, seed: int | None) -> dict:
    raw: dict = {}
    if path is not None:
        try:
            raw = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"config {path} is not valid JSON: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigurationError("config root must be a JSON object")
    cfg = _merge(DEFAULTS[command], raw)
    if seed is not None:
        if "seed" in cfg:
            cfg["seed"] = seed
        if "train" in cfg:
            cfg["train"] = {**cfg["train"], "seed": seed}
    return cfg


def sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def hash_tree(root: Path, exclude=("manifest.json",)) -> dict[str, str]:
    root = Path(root)
    if root.is_file():
        return {root.name: sha256_file(root)}
    return {
        str(p.relative_to(root)): sha256_file(p)
        for p in sorted(root.rglob("*"))
        if p.is_file() and p.name not in exclude
    }


def write_manifest(out: Path, command: str, config: dict, inputs: dict[str, str], timings: dict) -> Path:
    manifest = {
        "command": command,
        "version": __version__,
        "config": config,
        "inputs": {name: {"path": str(p), "sha256": hash_tree(Path(p))} for name, p in inputs.items() if p},
        "outputs": hash_tree(out),
        "timings_s": timings,
    }
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True, default=dg._json_default))
    return path


def _require_dir(value, what: str) -> Path:
    if not value:
        raise ConfigurationError(f"{what} is required")
    p = Path(value)
    if not p.exists():
        raise FileNotFoundError(f"{what} not found: {p}")
    return p


def _dataset_split(root: Path, split: str) -> sim.Dataset:
    d = root / split
    if not (d / "dataset.json").exists():
        raise FileNotFoundError(f"no {split!r} split under {root}")
    return sim.load_dataset(d)


def _train_config(cfg: dict) -> tr.TrainConfig:
    preset = cfg.get("preset", "toy")
    if preset not in ("toy", "full"):
        raise ConfigurationError(f"unknown preset {preset!r}; expected 'toy' or 'full'")
    try:
        if preset == "toy":
            return tr.TrainConfig.toy(**cfg["train"])
        return tr.TrainConfig.from_dict(cfg["train"])
    except TypeError as exc:
        raise ConfigurationError(f"bad train config: {exc}") from exc


def _net_config(cfg: dict) -> NetConfig:
    try:
        return NetConfig(**cfg["net"])
    except TypeError as exc:
        raise ConfigurationError(f"bad net config: {exc}") from exc


def _print_progress(rec: dict) -> None:
    print(tr.progress_line(rec), flush=True)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------
def cmd_simulate(cfg: dict, out: Path) -> dict:
    system = sim.make_system((cfg["height"], cfg["width"]), cfg["lors_per_voxel"], cfg["kernel"],
                             cfg["correction_spread"], cfg["system_seed"])
    kr = sim.analytic_k(system)
    summary = {"analytic_k": kr.k, "analytic_k_spread": kr.spread, "system_id": system.id, "splits": {}}
    for i, split in enumerate(("train", "val", "test")):
        n = cfg[f"n_{split}"]
        if n == 0:
            continue
        # each split owns a disjoint seed stream derived from the master seed
        split_seed = int(np.random.SeedSequence([cfg["seed"], i]).generate_state(1)[0])
        ds = sim.make_dataset(n, cfg["phantom_kind"], system, cfg["low_dose"], cfg["full_dose"], split_seed,
                              cfg["base_activity"])
        sim.save_dataset(ds, out / split, extra={"split": split, "analytic_k_spread": kr.spread})
        summary["splits"][split] = n
    dg.write_json(summary, out / "summary.json")
    print(f"analytic_k={kr.k:.6g} spread={kr.spread:.3g} splits={summary['splits']}")
    return {}


def cmd_gradcheck(cfg: dict, out: Path) -> dict:
    unknown = set(cfg["ops"] or ()) - set(gc.OP_CASES)
    if unknown:
        raise ConfigurationError(f"unknown ops {sorted(unknown)}; known: {sorted(gc.OP_CASES)}")
    results = gc.run_gradcheck(seed=cfg["seed"], ops=cfg["ops"])
    for r in results:
        print(r.line())
    report = {"results": [{"name": r.name, "rel_error": r.rel_error, "tolerance": r.tolerance,
                           "passed": r.passed} for r in results]}
    dg.write_json(report, out / "gradcheck.json")
    failed = [r.name for r in results if not r.passed]
    if failed:
        raise VerificationError(f"gradient check failed for: {', '.join(failed)}")
    print(f"all {len(results)} gradient checks passed")
    return {}


def cmd_train(cfg: dict, out: Path) -> dict:
    root = _require_dir(cfg["dataset"], "dataset")
    train_set, val_set = _dataset_split(root, "train"), _dataset_split(root, "val")
    run = tr.train(train_set, val_set, _net_config(cfg), _train_config(cfg), objective=cfg["objective"],
                   progress=_print_progress)
    run.save(out)
    with open(out / "history.csv", "w", newline="") as fh:
        cols = sorted({k for h in run.history for k in h})
        w = csv.DictWriter(fh, fieldnames=cols)
        w.writeheader()
        w.writerows(run.history)
    print(f"status={run.status} best_epoch={run.best_epoch} best_psnr={run.best_psnr:.4f} "
          f"final_k={run.final_k:.6g} analytic_k={run.analytic_k:.6g}")
    if run.status == "diverged":
        raise VerificationError(f"training diverged at epoch {run.diverged_epoch}")
    return {"dataset": root}


def load_run_model(run_dir) -> tuple[UNet, float, dict]:
    run_dir = Path(run_dir)
    meta = json.loads((run_dir / "train_run.json").read_text())
    arrays, extra = load_checkpoint(run_dir / meta.get("checkpoint", "checkpoint"))
    net_cfg = NetConfig(**meta["net_config"])
    model = UNet(net_cfg, dtype=meta["config"]["dtype"])
    model.load_state_dict(arrays)
    return model, float(extra.get("k", meta["best_k"])), meta


def _write_pgm(path: Path, img: np.ndarray) -> None:
    lo, hi = float(img.min()), float(img.max())
    scaled = np.zeros_like(img) if hi <= lo else (img - lo) / (hi - lo)
    data = np.round(scaled * 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{data.shape[1]} {data.shape[0]}\n255\n".encode())
        fh.write(data.tobytes())


def cmd_eval(cfg: dict, out: Path) -> dict:
    root = _require_dir(cfg["dataset"], "dataset")
    if not cfg["runs"]:
        raise ConfigurationError("eval needs at least one entry in 'runs' (name -> train output dir)")
    data = _dataset_split(root, cfg["split"])
    x, target, clean = data.arrays("noisy"), data.arrays("target"), data.arrays("clean")
    ref = cfg["reference_k"]
    size = (cfg["patch_size"], cfg["patch_size"])
    common = dict(patch_size=size, patches_per_image=cfg["patches_per_image"], seed=cfg["seed"])
    report = {"split": cfg["split"], "n_images": len(data), "analytic_k": data.analytic_k,
              "input_quality": dg.quality_report(x, target).to_dict(), "models": {}}
    inputs = {"dataset": root}
    for name, run_dir in cfg["runs"].items():
        run_dir = _require_dir(run_dir, f"runs.{name}")
        inputs[f"run:{name}"] = run_dir
        model, learned_k, _ = load_run_model(run_dir)
        k_ref = data.analytic_k if ref == "analytic" else learned_k if ref == "learned" else float(ref)
        pred = model.predict(x)
        cons = dg.consistency_ratio(model, k_ref, x, **common)
        entry = {
            "learned_k": learned_k,
            "reference_k": k_ref,
            "quality": dg.quality_report(pred, target).to_dict(),
            "moments": dg.moment_report(model, k_ref, x, clean=clean, n_boot=cfg["n_boot"], **common).to_dict(),
            "bias": dg.bias_report(model, k_ref, x, clean, n_boot=cfg["n_boot"], **common).to_dict(),
            "consistency": cons.to_dict(),
            "consistency_learned_k": dg.consistency_ratio(model, learned_k, x, **common).to_dict(),
        }
        dg.write_histogram_csv(cons, out / f"pi_histogram_{name}.csv")
        report["models"][name] = entry
        q = entry["quality"]
        print(f"model={name} psnr={q['mean_psnr']} ssim={q['mean_ssim']:.4f} "
              f"median_abs_pi_minus_1={cons.median_abs_dev:.4f} bias_gap={entry['bias']['gap']:.4g}")
        for i in range(min(int(cfg["dump_images"]), len(x))):
            strip = np.concatenate([x[i], pred[i], target[i], np.abs(x[i] - pred[i])], axis=1)
            _write_pgm(out / f"triptych_{name}_{i:03d}.pgm", strip)
    dg.write_json(report, out / "eval.json")
    return inputs


def cmd_ablate(cfg: dict, out: Path) -> dict:
    root = _require_dir(cfg["dataset"], "dataset")
    base = _train_config(cfg)
    net = _net_config(cfg)
    fixed_lambda = base.lambda_weight if cfg["fixed_lambda"] is None else float(cfg["fixed_lambda"])
    train_set, val_set = _dataset_split(root, "train"), _dataset_split(root, "val")
    lam_cells = [(lam, cfg["fixed_patch"]) for lam in cfg["lambdas"]]
    patch_cells = [(fixed_lambda, p) for p in cfg["patch_sizes"]]

    def show(row):
        print(f"lambda={row['lambda']:g} patch={row['patch']} psnr={row['psnr']:.4f} "
              f"final_k={row['final_k']:.5g} status={row['status']}", flush=True)

    rows = tr.ablate(lam_cells, train_set, val_set, net, base, progress=show) if lam_cells else []
    inputs = {"dataset": root}
    if patch_cells:
        proot = root
        if cfg["patch_dataset"]:
            proot = _require_dir(cfg["patch_dataset"], "patch_dataset")
            inputs["patch_dataset"] = proot
            train_set, val_set = _dataset_split(proot, "train"), _dataset_split(proot, "val")
        rows += tr.ablate(patch_cells, train_set, val_set, net, base, progress=show)
    for row in rows[: len(lam_cells)]:
        row["sweep"] = "lambda"
    for row in rows[len(lam_cells):]:
        row["sweep"] = "patch"
    tr.write_ablation_csv(rows, out / "ablation.csv")
    dg.write_json({"rows": rows}, out / "ablation.json")
    return inputs


def cmd_calibrate_k(cfg: dict, out: Path) -> dict:
    root = _require_dir(cfg["dataset"], "dataset")
    train_set, val_set = _dataset_split(root, "train"), _dataset_split(root, "val")
    res = tr.calibrate_k(train_set, val_set, _net_config(cfg), _train_config(cfg), cfg["n_splits"])
    dg.write_json(res.to_dict(), out / "calibration.json")
    with open(out / "k_trajectories.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch"] + [f"split{i}" for i in range(len(res.runs))])
        for e, ks in enumerate(zip(*[r.k_trajectory for r in res.runs])):
            w.writerow([e, *ks])
    print(" ".join(f"k{i}={k:.6g}" for i, k in enumerate(res.ks))
          + f" analytic_k={res.analytic_k:.6g} max_pairwise_rel_diff={res.max_pairwise_rel_diff:.4%}"
          + f" max_rel_error={res.max_rel_error:.4%}")
    limit = cfg["max_rel_spread"]
    if limit is not None and res.max_pairwise_rel_diff > float(limit):
        raise VerificationError(f"k spread {res.max_pairwise_rel_diff:.4%} exceeds {float(limit):.4%}")
    return {"dataset": root}


HANDLERS = {
    "simulate": cmd_simulate,
    "gradcheck": cmd_gradcheck,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "calibrate-k": cmd_calibrate_k,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pvmc", description="Poisson variance-mean consistency denoising toolkit")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", help="JSON config; omitted keys take defaults")
    p.add_argument("--out", default=None, help="output directory (default: runs/<command>)")
    p.add_argument("--seed", type=int, default=None, help="override the config seed")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def _thread_limit():
    raw = os.environ.get("PVMC_THREADS")
    if not raw:
        return nullcontext()
    try:
        n = int(raw)
    except ValueError as exc:
        raise ConfigurationError(f"PVMC_THREADS must be an integer, got {raw!r}") from exc
    if n < 1:
        raise ConfigurationError("PVMC_THREADS must be >= 1")
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    out = Path(args.out or Path("runs") / args.command)
    try:
        cfg = resolve_config(args.command, args.config, args.seed)
        with _thread_limit():
            out.mkdir(parents=True, exist_ok=True)
            t0 = time.perf_counter()
            inputs = HANDLERS[args.command](cfg, out) or {}
            elapsed = time.perf_counter() - t0
        if args.config:
            inputs = {"config": args.config, **inputs}
        write_manifest(out, args.command, cfg, inputs, {"total": elapsed})
    except VerificationError as exc:
        print(f"verification failed: {exc}", file=sys.stderr)
        return EXIT_VERIFY
    except (ConfigurationError, ValueError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
