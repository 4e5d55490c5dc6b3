"""Synthetic PET count simulation with a known Poisson slope.

The system model is image-space: the LOR grid coincides with the voxel grid,
with ``lors_per_voxel / F`` parallel LORs at every grid position, where F is
the kernel footprint (1 for ``delta``, 9 for ``box3``/``gauss3``). Voxel i
reconstructs from every LOR whose position lies in its footprint, so

    y_hat_i = sum_j w_ij c_j N_j,    N_j ~ Poisson(dose * activity[pos(j)])

Boundaries wrap around, so with ``correction_spread=0`` every voxel has the
same weights and the per-voxel Poisson slope is exactly uniform.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .exceptions import ConfigurationError, ModelError

PHANTOM_KINDS = ("uniform", "disks", "checker", "lesion")
KERNELS = ("delta", "box3", "gauss3")
GAUSS3_SIGMA = 0.5


@dataclass(frozen=True)
class Phantom:
    activity: np.ndarray
    kind: str = "custom"
    seed: int | None = None

    def __post_init__(self):
        act = np.asarray(self.activity, dtype=np.float64)
        if act.ndim != 2:
            raise ConfigurationError("phantom activity must be a 2-D grid")
        if np.any(act < 0) or not np.any(act > 0):
            raise ConfigurationError("phantom activity must be >= 0 with at least one positive voxel")
        object.__setattr__(self, "activity", act)

    @property
    def height(self) -> int:
        return self.activity.shape[0]

    @property
    def width(self) -> int:
        return self.activity.shape[1]

    @property
    def id(self) -> str:
        return hashlib.sha256(self.activity.tobytes()).hexdigest()[:12]


@dataclass(frozen=True)
class SystemModel:
    """Sparse reconstruction weights ``w_ij`` (voxel x LOR) and LOR corrections ``c_j``."""

    weights: sp.csr_matrix
    corrections: np.ndarray
    dims: tuple[int, int]
    kernel: str = "custom"
    lor_positions: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        w = sp.csr_matrix(self.weights, dtype=np.float64)
        c = np.asarray(self.corrections, dtype=np.float64)
        if w.shape[0] != self.dims[0] * self.dims[1]:
            raise ModelError("weight matrix rows must equal the voxel count")
        if w.shape[1] != c.size:
            raise ModelError("one correction factor per LOR required")
        if w.nnz and w.data.min() < 0:
            raise ModelError("reconstruction weights must be nonnegative")
        if np.any(c <= 0):
            raise ModelError("correction factors must be positive")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "corrections", c)

    @property
    def num_lors(self) -> int:
        return self.corrections.size

    @property
    def num_voxels(self) -> int:
        return self.dims[0] * self.dims[1]

    @property
    def id(self) -> str:
        h = hashlib.sha256()
        h.update(self.weights.data.tobytes())
        h.update(self.weights.indices.tobytes())
        h.update(self.weights.indptr.tobytes())
        h.update(self.corrections.tobytes())
        return h.hexdigest()[:12]

    def voxel_pairs(self, voxel: int) -> list[tuple[int, float]]:
        """(lor_index, w) pairs of one voxel."""
        row = self.weights.getrow(voxel)
        return list(zip(row.indices.tolist(), row.data.tolist()))


@dataclass(frozen=True)
class CountRealization:
    counts: np.ndarray
    seed: int | None = None

    def __post_init__(self):
        counts = np.asarray(self.counts)
        if counts.dtype.kind not in "iu" or np.any(counts < 0):
            raise ModelError("counts must be nonnegative integers")
        object.__setattr__(self, "counts", counts.astype(np.int64, copy=False))


@dataclass(frozen=True)
class ReconImage:
    values: np.ndarray
    provenance: tuple = ()

    @property
    def shape(self):
        return self.values.shape


@dataclass(frozen=True)
class KReport:
    """Result of :func:`analytic_k`: the mean slope plus per-voxel ratios."""

    k: float
    per_voxel: np.ndarray

    @property
    def spread(self) -> float:
        """Max relative deviation of per-voxel ratios from the mean."""
        return float(np.max(np.abs(self.per_voxel - self.k)) / self.k)

    def __float__(self):
        return self.k


# ---------------------------------------------------------------------------
# phantoms
# ---------------------------------------------------------------------------
def make_phantom(kind: str, width: int, height: int, base_activity: float, seed: int) -> Phantom:
    """Generate a synthetic 2-D activity map.

    ``lesion`` embeds 1-4 hot ellipses (2x-8x the local background) in a
    smooth background that stays within +-15% of ``base_activity``.
    """
    if kind not in PHANTOM_KINDS:
        raise ConfigurationError(f"unknown phantom kind {kind!r}; expected one of {PHANTOM_KINDS}")
    if width < 8 or height < 8:
        raise ConfigurationError("phantom dimensions must be >= 8")
    if not base_activity > 0:
        raise ConfigurationError("base_activity must be positive")
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    act = np.full((height, width), float(base_activity))

    if kind == "disks":
        for _ in range(int(rng.integers(2, 6))):
            cy, cx = rng.uniform(0.15, 0.85) * height, rng.uniform(0.15, 0.85) * width
            r = rng.uniform(0.06, 0.2) * min(width, height)
            level = rng.uniform(0.3, 3.0)
            act[(yy - cy) ** 2 + (xx - cx) ** 2 <= r * r] = base_activity * level
    elif kind == "checker":
        cell = max(2, min(width, height) // 8)
        board = ((yy // cell + xx // cell) % 2).astype(bool)
        act[board] = 2.0 * base_activity
    elif kind == "lesion":
        phase = rng.uniform(0, 2 * np.pi, size=2)
        bg = 1.0 + 0.15 * np.sin(2 * np.pi * yy / height + phase[0]) * np.cos(2 * np.pi * xx / width + phase[1])
        act = base_activity * bg
        for _ in range(int(rng.integers(1, 5))):
            cy, cx = rng.uniform(0.2, 0.8) * height, rng.uniform(0.2, 0.8) * width
            ay = rng.uniform(0.04, 0.12) * height
            ax = rng.uniform(0.04, 0.12) * width
            theta = rng.uniform(0, np.pi)
            dy, dx = yy - cy, xx - cx
            u = dx * np.cos(theta) + dy * np.sin(theta)
            v = -dx * np.sin(theta) + dy * np.cos(theta)
            inside = (u / ax) ** 2 + (v / ay) ** 2 <= 1.0
            contrast = rng.uniform(2.5, 6.5)
            act[inside] = base_activity * contrast
    return Phantom(activity=act, kind=kind, seed=seed)


# ---------------------------------------------------------------------------
# system model
# ---------------------------------------------------------------------------
def kernel_weights(kernel: str) -> tuple[np.ndarray, np.ndarray]:
    """Footprint offsets (F, 2) as (dy, dx) and normalized weights (F,)."""
    if kernel == "delta":
        return np.zeros((1, 2), dtype=np.int64), np.ones(1)
    if kernel in ("box3", "gauss3"):
        offsets = np.array([(dy, dx) for dy in (-1, 0, 1) for dx in (-1, 0, 1)], dtype=np.int64)
        if kernel == "box3":
            g = np.ones(9)
        else:
            g = np.exp(-(offsets**2).sum(axis=1) / (2 * GAUSS3_SIGMA**2))
        return offsets, g / g.sum()
    raise ConfigurationError(f"unknown kernel {kernel!r}; expected one of {KERNELS}")


def make_system(
    phantom_dims: tuple[int, int],
    lors_per_voxel: int,
    kernel: str,
    correction_spread: float,
    seed: int,
) -> SystemModel:
    """Build an image-space system matrix.

    ``phantom_dims`` is (height, width). ``lors_per_voxel`` is the number of
    LORs each voxel reconstructs from and must be a multiple of the kernel
    footprint. Each footprint weight is split evenly across the parallel
    LORs at that position, so a ``box3`` system with M LORs has w = 1/M.
    """
    height, width = (int(d) for d in phantom_dims)
    if height < 1 or width < 1:
        raise ConfigurationError("system dimensions must be positive")
    if lors_per_voxel < 1:
        raise ConfigurationError("lors_per_voxel must be >= 1")
    if not 0.0 <= correction_spread <= 0.5:
        raise ConfigurationError("correction_spread must lie in [0, 0.5]")
    offsets, g = kernel_weights(kernel)
    footprint = len(g)
    if lors_per_voxel % footprint:
        raise ConfigurationError(
            f"kernel {kernel!r} has a {footprint}-position footprint; lors_per_voxel must be a multiple of it"
        )
    angles = lors_per_voxel // footprint
    n_vox = height * width
    n_lors = n_vox * angles

    vy, vx = np.divmod(np.arange(n_vox), width)
    rows, cols, vals = [], [], []
    for (dy, dx), gw in zip(offsets, g):
        pos = ((vy + dy) % height) * width + (vx + dx) % width
        for a in range(angles):
            rows.append(np.arange(n_vox))
            cols.append(pos * angles + a)
            vals.append(np.full(n_vox, gw / angles))
    weights = sp.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n_vox, n_lors)
    )
    rng = np.random.default_rng(seed)
    if correction_spread > 0:
        corrections = rng.uniform(1 - correction_spread, 1 + correction_spread, size=n_lors)
    else:
        corrections = np.ones(n_lors)
    lor_positions = np.repeat(np.arange(n_vox), angles)
    return SystemModel(weights, corrections, (height, width), kernel, lor_positions)


def analytic_k(system: SystemModel) -> KReport:
    """Poisson slope: per-voxel sum(w^2 c^2) / sum(w c), averaged over voxels."""
    wc = system.weights.multiply(system.corrections[None, :]).tocsr()
    den = np.asarray(wc.sum(axis=1)).ravel()
    num = np.asarray(wc.multiply(wc).sum(axis=1)).ravel()
    if np.any(den <= 0):
        raise ModelError("a voxel has all-zero reconstruction weights")
    ratios = num / den
    return KReport(float(ratios.mean()), ratios)


def _lor_positions(system: SystemModel) -> np.ndarray:
    if system.lor_positions is not None:
        return system.lor_positions
    raise ModelError("system model has no LOR geometry; pass explicit LOR means instead")


def forward_project(phantom: Phantom, system: SystemModel) -> np.ndarray:
    """Expected counts per LOR at unit dose: the activity seen at each LOR's position."""
    if phantom.activity.shape != system.dims:
        raise ModelError(f"phantom dims {phantom.activity.shape} != system dims {system.dims}")
    return phantom.activity.ravel()[_lor_positions(system)]


def sample_counts(phantom: Phantom, system: SystemModel, dose_scale: float, seed: int) -> CountRealization:
    """Draw N_j ~ Poisson(dose_scale * lambda_j) independently for every LOR."""
    if not dose_scale > 0:
        raise ConfigurationError("dose_scale must be positive")
    lam = dose_scale * forward_project(phantom, system)
    rng = np.random.default_rng(seed)
    return CountRealization(rng.poisson(lam), seed)


def reconstruct(counts: CountRealization | np.ndarray, system: SystemModel, provenance: tuple = ()) -> ReconImage:
    """Exact linear reconstruction y_hat = W (c * N); no thresholding."""
    n = counts.counts if isinstance(counts, CountRealization) else np.asarray(counts)
    if n.shape[-1] != system.num_lors:
        raise ModelError(f"count vector has {n.shape[-1]} LORs, system has {system.num_lors}")
    corrected = n * system.corrections
    if corrected.ndim == 1:
        values = system.weights @ corrected
        return ReconImage(values.reshape(system.dims), provenance)
    # batch of realizations: (R, num_lors) -> (R, H, W)
    values = (system.weights @ corrected.T).T
    return ReconImage(values.reshape((-1,) + system.dims), provenance)


def expected_image(phantom: Phantom, system: SystemModel, dose_scale: float = 1.0) -> np.ndarray:
    """Noise-free reconstruction E[y_hat] = W (c * dose * lambda)."""
    lam = dose_scale * forward_project(phantom, system)
    return (system.weights @ (system.corrections * lam)).reshape(system.dims)


# ---------------------------------------------------------------------------
# paired datasets
# ---------------------------------------------------------------------------
@dataclass
class ImagePair:
    noisy: np.ndarray
    target: np.ndarray
    clean: np.ndarray
    phantom_seed: int
    low_seed: int
    full_seed: int


@dataclass
class Dataset:
    pairs: list[ImagePair]
    analytic_k: float
    low_dose: float
    full_dose: float
    phantom_kind: str
    system_id: str
    seed: int

    def __len__(self):
        return len(self.pairs)

    def arrays(self, which: str = "noisy") -> np.ndarray:
        return np.stack([getattr(p, which) for p in self.pairs])

    def subset(self, indices) -> "Dataset":
        return Dataset(
            [self.pairs[i] for i in indices], self.analytic_k, self.low_dose,
            self.full_dose, self.phantom_kind, self.system_id, self.seed,
        )


def _stream_seeds(seed: int, index: int) -> tuple[int, int, int]:
    ss = np.random.SeedSequence([seed, index])
    a, b, c = ss.generate_state(3)
    return int(a), int(b), int(c)


def make_dataset(
    n_pairs: int,
    phantom_kind: str,
    system: SystemModel,
    low_dose: float,
    full_dose: float,
    seed: int,
    base_activity: float = 100.0,
) -> Dataset:
    """Paired low/full-dose reconstructions of identical phantoms.

    Each reconstruction is divided by its dose and multiplied by
    ``low_dose``, i.e. everything is expressed on the low-dose count scale.
    The noisy input is then the raw low-dose reconstruction and its Poisson
    slope is exactly ``analytic_k``. Image ``i`` draws all randomness from
    the stream ``(seed, i)``.
    """
    if n_pairs < 1:
        raise ConfigurationError("n_pairs must be >= 1")
    if not 0 < low_dose <= full_dose:
        raise ConfigurationError("need 0 < low_dose <= full_dose")
    height, width = system.dims
    pairs = []
    for i in range(n_pairs):
        s_ph, s_lo, s_hi = _stream_seeds(seed, i)
        phantom = make_phantom(phantom_kind, width, height, base_activity, s_ph)
        low = reconstruct(sample_counts(phantom, system, low_dose, s_lo), system).values
        full = reconstruct(sample_counts(phantom, system, full_dose, s_hi), system).values
        clean = expected_image(phantom, system, low_dose)
        pairs.append(ImagePair(low, full * (low_dose / full_dose), clean, s_ph, s_lo, s_hi))
    k = analytic_k(system).k
    return Dataset(pairs, k, low_dose, full_dose, phantom_kind, system.id, seed)


# ---------------------------------------------------------------------------
# persistence: little-endian float32 NPY images plus a JSON manifest
# ---------------------------------------------------------------------------
IMAGE_DTYPE = np.dtype("<f4")
_FIELDS = ("noisy", "target", "clean")


def save_dataset(dataset: Dataset, directory, extra: dict | None = None) -> dict:
    """Write every pair as ``<field>_<i>.npy`` and return the manifest entry for this split."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    pairs = []
    for i, p in enumerate(dataset.pairs):
        entry = {"index": i, "phantom_seed": p.phantom_seed, "low_seed": p.low_seed, "full_seed": p.full_seed}
        for name in _FIELDS:
            fname = f"{name}_{i:04d}.npy"
            np.save(directory / fname, np.ascontiguousarray(getattr(p, name), dtype=IMAGE_DTYPE))
            entry[name] = fname
        pairs.append(entry)
    meta = {
        "analytic_k": dataset.analytic_k,
        "low_dose": dataset.low_dose,
        "full_dose": dataset.full_dose,
        "phantom_kind": dataset.phantom_kind,
        "system_id": dataset.system_id,
        "seed": dataset.seed,
        "image_dtype": IMAGE_DTYPE.str,
        "pairs": pairs,
    }
    if extra:
        meta.update(extra)
    (directory / "dataset.json").write_text(json.dumps(meta, indent=2, sort_keys=True))
    return meta


def load_dataset(directory) -> Dataset:
    directory = Path(directory)
    meta = json.loads((directory / "dataset.json").read_text())
    pairs = []
    for e in meta["pairs"]:
        arrs = [np.load(directory / e[name]).astype(np.float64) for name in _FIELDS]
        pairs.append(ImagePair(*arrs, e["phantom_seed"], e["low_seed"], e["full_seed"]))
    return Dataset(pairs, meta["analytic_k"], meta["low_dose"], meta["full_dose"],
                   meta["phantom_kind"], meta["system_id"], meta["seed"])
