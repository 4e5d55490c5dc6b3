"""Small U-Net style encoder-decoder built on :mod:`pvmc.autodiff`.

Each encoder level is two 3x3 conv + ReLU blocks followed by 2x2 max
pooling; the deepest level is the bottleneck. The decoder upsamples with
2x2 stride-2 transposed convolutions, concatenates the matching encoder
features and applies two more conv blocks. A zero-initialized 1x1 conv
maps to a single output channel with identity activation.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .exceptions import ConfigurationError

Params = Dict[str, Tensor]

FULL_SCALE_CHANNELS = (64, 128, 256, 512)


@dataclass
class NetConfig:
    depth: int = 3
    base_channels: int = 8
    channel_schedule: tuple[int, ...] | None = None
    kernel_size: int = 3
    in_channels: int = 1
    out_channels: int = 1

    def __post_init__(self):
        if self.depth < 1:
            raise ConfigurationError("depth must be >= 1")
        if self.channel_schedule is None:
            self.channel_schedule = tuple(self.base_channels * 2**i for i in range(self.depth))
        self.channel_schedule = tuple(int(c) for c in self.channel_schedule)
        if len(self.channel_schedule) != self.depth:
            raise ConfigurationError("channel_schedule needs one entry per level")
        if min(self.channel_schedule) < 1:
            raise ConfigurationError("channel counts must be positive")
        self.base_channels = self.channel_schedule[0]
        if self.kernel_size % 2 == 0:
            raise ConfigurationError("kernel_size must be odd")
        if self.in_channels != 1 or self.out_channels != 1:
            raise ConfigurationError("the denoiser is single-channel in and out")

    @classmethod
    def full_scale(cls) -> "NetConfig":
        return cls(depth=4, channel_schedule=FULL_SCALE_CHANNELS)

    @property
    def divisor(self) -> int:
        return 2 ** (self.depth - 1)

    def check_input(self, shape) -> None:
        h, w = shape[-2], shape[-1]
        if h % self.divisor or w % self.divisor:
            raise ConfigurationError(
                f"spatial dims {(h, w)} must be divisible by {self.divisor} at depth {self.depth}"
            )

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channel_schedule"] = list(self.channel_schedule)
        return d


def _conv_shapes(config: NetConfig) -> list[tuple[str, tuple[int, ...], int]]:
    """(name, shape, fan_in) for every weight tensor, in a fixed order."""
    k = config.kernel_size
    ch = config.channel_schedule
    shapes = []
    prev = config.in_channels
    for lvl, c in enumerate(ch):
        shapes.append((f"enc{lvl}.conv1.w", (k, k, prev, c), prev * k * k))
        shapes.append((f"enc{lvl}.conv2.w", (k, k, c, c), c * k * k))
        prev = c
    for lvl in range(config.depth - 2, -1, -1):
        c_in, c = ch[lvl + 1], ch[lvl]
        shapes.append((f"up{lvl}.w", (2, 2, c_in, c), c_in))
        shapes.append((f"dec{lvl}.conv1.w", (k, k, 2 * c, c), 2 * c * k * k))
        shapes.append((f"dec{lvl}.conv2.w", (k, k, c, c), c * k * k))
    shapes.append(("head.w", (1, 1, ch[0], config.out_channels), ch[0]))
    return shapes


def init_params(config: NetConfig, seed: int = 0, dtype=None) -> Params:
    """He (fan-in) normal init, zero biases, zero-initialized output layer."""
    dtype = np.dtype(dtype or ad.default_dtype())
    rng = np.random.default_rng(seed)
    params: Params = {}
    for name, shape, fan_in in _conv_shapes(config):
        if name == "head.w":
            w = np.zeros(shape)
        else:
            w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)
        params[name] = Tensor(w.astype(dtype), requires_grad=True, name=name)
        n_out = shape[3]
        bname = name[:-2] + ".b"
        params[bname] = Tensor(np.zeros(n_out, dtype=dtype), requires_grad=True, name=bname)
    return params


def forward(params: Params, x, config: NetConfig) -> Tensor:
    """Map an (N, 1, H, W) batch to denoised estimates of the same shape.

    Internally activations are channels-last; with a single channel the
    layout change is a free reshape.
    """
    if not isinstance(x, Tensor):
        x = Tensor(np.asarray(x, dtype=params["head.w"].dtype))
    if x.ndim == 2:
        x = x.reshape(1, 1, *x.shape)
    if x.ndim != 4 or x.shape[1] != 1:
        raise ConfigurationError(f"expected an (N, 1, H, W) input, got {x.shape}")
    config.check_input(x.shape)
    n, _, height, width = x.shape

    def block(h, prefix):
        h = ad.relu(ad.conv2d(h, params[f"{prefix}.conv1.w"], params[f"{prefix}.conv1.b"]))
        return ad.relu(ad.conv2d(h, params[f"{prefix}.conv2.w"], params[f"{prefix}.conv2.b"]))

    skips = []
    h = x.reshape(n, height, width, 1)
    for lvl in range(config.depth):
        h = block(h, f"enc{lvl}")
        if lvl < config.depth - 1:
            skips.append(h)
            h = ad.maxpool2d(h)
    for lvl in range(config.depth - 2, -1, -1):
        h = ad.conv_transpose2d(h, params[f"up{lvl}.w"], params[f"up{lvl}.b"])
        h = ad.concat([h, skips[lvl]], axis=3)
        h = block(h, f"dec{lvl}")
    out = ad.conv2d(h, params["head.w"], params["head.b"])
    return out.reshape(n, 1, height, width)


class UNet:
    """Parameter container with a callable forward pass."""

    def __init__(self, config: NetConfig | None = None, seed: int = 0, params: Params | None = None, dtype=None):
        self.config = config or NetConfig()
        self.params = params if params is not None else init_params(self.config, seed, dtype)

    def __call__(self, x) -> Tensor:
        return forward(self.params, x, self.config)

    def predict(self, x, batch_size: int = 8) -> np.ndarray:
        """Forward pass without graph recording; returns (N, H, W) or (H, W) arrays."""
        arr = np.asarray(x)
        squeeze = arr.ndim == 2
        batch = arr.reshape((-1, 1) + arr.shape[-2:])
        dtype = self.params["head.w"].dtype
        out = []
        with ad.no_grad():
            for i in range(0, len(batch), batch_size):
                out.append(self(Tensor(batch[i : i + batch_size].astype(dtype))).data[:, 0])
        res = np.concatenate(out)
        return res[0] if squeeze else res

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for k, v in state.items():
            self.params[k].data = np.asarray(v, dtype=self.params[k].dtype).copy()


# ---------------------------------------------------------------------------
# checkpoints: one NPY per tensor plus a JSON index (name -> file, shape)
# ---------------------------------------------------------------------------
def save_checkpoint(arrays: dict[str, np.ndarray], directory, extra: dict | None = None) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    index = {"tensors": {}}
    for name, arr in arrays.items():
        fname = name.replace("/", "_") + ".npy"
        np.save(directory / fname, np.ascontiguousarray(arr))
        index["tensors"][name] = {"file": fname, "shape": list(np.shape(arr)), "dtype": str(np.asarray(arr).dtype)}
    if extra:
        index.update(extra)
    path = directory / "index.json"
    path.write_text(json.dumps(index, indent=2, sort_keys=True))
    return path


def load_checkpoint(directory) -> tuple[dict[str, np.ndarray], dict]:
    directory = Path(directory)
    index = json.loads((directory / "index.json").read_text())
    arrays = {}
    for name, meta in index["tensors"].items():
        arr = np.load(directory / meta["file"])
        if list(arr.shape) != meta["shape"]:
            raise ConfigurationError(f"checkpoint tensor {name} has shape {arr.shape}, index says {meta['shape']}")
        arrays[name] = arr
    extra = {k: v for k, v in index.items() if k != "tensors"}
    return arrays, extra
