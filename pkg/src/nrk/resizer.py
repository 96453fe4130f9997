"""Neural Resizer: frozen super-resolution, bilinear skip, learned residual refinement.

    out = g_theta(T(g_phi(f_sr(img)))) + T(f_sr(img))

``g_phi`` extracts features at high resolution, ``T`` (bilinear) brings them
to the target side, and ``g_theta`` refines them into an image-shaped residual.
"""
from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from . import checkpoint
from .conv import conv2d
from .resample import affine_grid, bicubic_resize, bilinear_resize, grid_sample
from .tensor import (
    ContractError,
    Tensor,
    as_tensor,
    clamp,
    leaky_relu,
    linear,
    mean,
    no_grad,
    parameter,
    reshape,
)

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    pass


def _scale(value: Fraction, side: int, what: str) -> int:
    out = value * side
    if out.denominator != 1 or out <= 0:
        raise ConfigError(f"{what} factor {value} does not map side {side} to a positive integer")
    return int(out)


@dataclass
class ResizerConfig:
    h: Fraction = Fraction(2)
    t: Fraction = Fraction(2, 3)
    base_channels: int = 16
    num_residual_blocks: int = 2
    leaky_slope: float = 0.2
    kernel_size: int = 3
    channels: int = 1

    def __post_init__(self):
        self.h = Fraction(self.h)
        self.t = Fraction(self.t)

    def hr_side(self, side: int) -> int:
        return _scale(self.h, side, "high-resolution")

    def target_side(self, side: int) -> int:
        return _scale(self.t, side, "target")


@dataclass
class SrStandin:
    """Frozen stand-in for a pretrained super-resolution network.

    ``bicubic_upsample`` is a plain Catmull-Rom upscale; ``frozen_cnn`` adds the
    residual of a small three-layer conv net run on that upscale. Output is
    clamped to [0, 1] in both modes. The weights never require grad.
    """

    mode: str = "bicubic_upsample"
    h: Fraction = Fraction(2)
    weights: dict = field(default_factory=dict)

    def __post_init__(self):
        self.h = Fraction(self.h)
        if self.mode not in ("bicubic_upsample", "frozen_cnn"):
            raise ConfigError(f"unknown SR mode {self.mode!r}")
        if self.mode == "frozen_cnn" and not self.weights:
            raise ConfigError("frozen_cnn SR stand-in needs a weights file")
        self.weights = {k: Tensor(np.asarray(v, dtype=np.float32)) for k, v in self.weights.items()}

    @classmethod
    def from_checkpoint(cls, path, h=Fraction(2)) -> "SrStandin":
        if path is None:
            raise ConfigError("frozen_cnn SR stand-in needs a weights file")
        state = checkpoint.load(path)
        return cls("frozen_cnn", h, {k[len("sr."):]: v for k, v in state.items() if k.startswith("sr.")})

    def state(self) -> dict[str, np.ndarray]:
        return {f"sr.{k}": v.data for k, v in self.weights.items()}

    def digest(self) -> str:
        md = hashlib.sha256()
        for k, v in sorted(self.weights.items()):
            md.update(k.encode())
            md.update(v.data.tobytes())
        return md.hexdigest()


SR_LAYERS = (("conv1", 1, 8, 3), ("conv2", 8, 8, 3), ("conv3", 8, 1, 3))


def init_sr_weights(rng: np.random.Generator, channels: int = 1) -> dict[str, np.ndarray]:
    out = {}
    for name, cin, cout, k in SR_LAYERS:
        cin = channels if name == "conv1" else cin
        cout = channels if name == "conv3" else cout
        bound = np.sqrt(6.0 / (cin * k * k))
        w = rng.uniform(-bound, bound, (cout, cin, k, k))
        if name == "conv3":
            w *= 0.1
        out[f"{name}.weight"] = w.astype(np.float32)
        out[f"{name}.bias"] = np.zeros(cout, np.float32)
    return out


def _sr_residual(u: Tensor, w: dict) -> Tensor:
    r = leaky_relu(conv2d(u, w["conv1.weight"], w["conv1.bias"], padding=1), 0.2)
    r = leaky_relu(conv2d(r, w["conv2.weight"], w["conv2.bias"], padding=1), 0.2)
    return conv2d(r, w["conv3.weight"], w["conv3.bias"], padding=1)


def sr_forward(img: Tensor, sr: SrStandin) -> Tensor:
    H, W = img.shape[-2:]
    up = bicubic_resize(img, _scale(sr.h, H, "SR"), _scale(sr.h, W, "SR"))
    if sr.mode == "frozen_cnn":
        up = up + _sr_residual(up, sr.weights)
    return clamp(up, 0.0, 1.0)


def train_sr_standin(low: np.ndarray, high: np.ndarray, h=Fraction(2), steps: int = 300,
                     lr: float = 1e-3, batch_size: int = 16, seed: int = 0) -> SrStandin:
    """Fit the frozen_cnn residual on (degraded, clean) pairs with Adam, then freeze it."""
    from .optim import Adam

    rng = np.random.default_rng(seed)
    params = {k: parameter(v, k) for k, v in init_sr_weights(rng, low.shape[1]).items()}
    opt = Adam(params, lr=lr)
    for step in range(steps):
        idx = rng.choice(len(low), size=min(batch_size, len(low)), replace=False)
        lo, hi = Tensor(low[idx]), Tensor(high[idx])
        up = bicubic_resize(lo, hi.shape[-2], hi.shape[-1])
        diff = up + _sr_residual(up, params) - hi
        loss = mean(diff * diff)
        loss.backward()
        opt.step()
        opt.zero_grad()
        if step % 100 == 0:
            log.debug("sr step %d loss %.5f", step, loss.item())
    return SrStandin("frozen_cnn", h, {k: v.data.copy() for k, v in params.items()})


# -- trainable heads -------------------------------------------------------

def _kaiming(rng, cout, cin, k, slope):
    gain = np.sqrt(2.0 / (1.0 + slope ** 2))
    bound = gain * np.sqrt(3.0 / (cin * k * k))
    return rng.uniform(-bound, bound, (cout, cin, k, k)).astype(np.float32)


def init_resizer(cfg: ResizerConfig, rng: np.random.Generator, stn: bool = False) -> dict[str, Tensor]:
    n, c, k, s = cfg.base_channels, cfg.channels, cfg.kernel_size, cfg.leaky_slope
    raw = {
        "g_phi.conv1.weight": _kaiming(rng, n, c, k, s),
        "g_phi.conv1.bias": np.zeros(n, np.float32),
        "g_phi.conv2.weight": _kaiming(rng, n, n, 1, s),
        "g_phi.conv2.bias": np.zeros(n, np.float32),
    }
    for i in range(cfg.num_residual_blocks):
        for j in (1, 2):
            raw[f"g_theta.block{i}.conv{j}.weight"] = _kaiming(rng, n, n, k, s)
            raw[f"g_theta.block{i}.conv{j}.bias"] = np.zeros(n, np.float32)
    # zero final layer: training starts exactly at T(f_sr(img))
    raw["g_theta.out.weight"] = np.zeros((c, n, k, k), np.float32)
    raw["g_theta.out.bias"] = np.zeros(c, np.float32)
    if stn:
        raw.update(init_stn(rng, c))
    return {name: parameter(v, name) for name, v in raw.items()}


def g_phi(x: Tensor, p: dict, cfg: ResizerConfig) -> Tensor:
    pad = cfg.kernel_size // 2
    x = leaky_relu(conv2d(x, p["g_phi.conv1.weight"], p["g_phi.conv1.bias"], padding=pad), cfg.leaky_slope)
    return leaky_relu(conv2d(x, p["g_phi.conv2.weight"], p["g_phi.conv2.bias"]), cfg.leaky_slope)


def g_theta(x: Tensor, p: dict, cfg: ResizerConfig) -> Tensor:
    pad = cfg.kernel_size // 2
    for i in range(cfg.num_residual_blocks):
        pre = f"g_theta.block{i}"
        r = conv2d(x, p[f"{pre}.conv1.weight"], p[f"{pre}.conv1.bias"], padding=pad)
        r = leaky_relu(r, cfg.leaky_slope)
        r = conv2d(r, p[f"{pre}.conv2.weight"], p[f"{pre}.conv2.bias"], padding=pad)
        x = x + r
    return conv2d(x, p["g_theta.out.weight"], p["g_theta.out.bias"], padding=pad)


def check_params(params: dict, cfg: ResizerConfig) -> None:
    out_ch = params["g_theta.out.weight"].shape[0]
    if out_ch != cfg.channels:
        raise ContractError(f"g_theta emits {out_ch} channels but the image has {cfg.channels}")


def ltr_resize(hr: Tensor, params: dict, cfg: ResizerConfig, out_side: int) -> Tensor:
    """Learned downscale of an already-upscaled image to ``out_side``."""
    base = bilinear_resize(hr, out_side, out_side)
    feats = bilinear_resize(g_phi(hr, params, cfg), out_side, out_side)
    return g_theta(feats, params, cfg) + base


def neural_resize(img: Tensor, params: dict, cfg: ResizerConfig, sr: SrStandin) -> Tensor:
    img = as_tensor(img)
    return ltr_resize(sr_forward(img, sr), params, cfg, cfg.target_side(img.shape[-2]))


# -- spatial transformer ----------------------------------------------------

STN_HIDDEN = 8
IDENTITY_THETA = np.array([1, 0, 0, 0, 1, 0], np.float32)


def init_stn(rng: np.random.Generator, channels: int = 1) -> dict[str, np.ndarray]:
    return {
        "stn.conv1.weight": _kaiming(rng, STN_HIDDEN, channels, 3, 0.2),
        "stn.conv1.bias": np.zeros(STN_HIDDEN, np.float32),
        "stn.conv2.weight": _kaiming(rng, STN_HIDDEN, STN_HIDDEN, 3, 0.2),
        "stn.conv2.bias": np.zeros(STN_HIDDEN, np.float32),
        "stn.fc.weight": np.zeros((STN_HIDDEN, 6), np.float32),
        "stn.fc.bias": IDENTITY_THETA.copy(),
    }


def stn_theta(img: Tensor, p: dict) -> Tensor:
    x = leaky_relu(conv2d(img, p["stn.conv1.weight"], p["stn.conv1.bias"], stride=2, padding=1), 0.2)
    x = leaky_relu(conv2d(x, p["stn.conv2.weight"], p["stn.conv2.bias"], stride=2, padding=1), 0.2)
    x = mean(x, axis=(2, 3))
    return reshape(linear(x, p["stn.fc.weight"], p["stn.fc.bias"]), (img.shape[0], 2, 3))


def stn_align(img: Tensor, params: dict) -> Tensor:
    img = as_tensor(img)
    H, W = img.shape[-2:]
    return grid_sample(img, affine_grid(stn_theta(img, params), H, W))


# -- visualisation ------------------------------------------------------------

def difference_map(img, params: dict, cfg: ResizerConfig, sr: SrStandin) -> np.ndarray:
    """Per-sample |neural_resize - bilinear| scaled so each map's max is 1."""
    arr = np.asarray(img.data if isinstance(img, Tensor) else img, dtype=np.float32)
    single = arr.ndim == 3
    if single:
        arr = arr[None]
    x = Tensor(arr)
    side = cfg.target_side(arr.shape[-2])
    with no_grad():
        diff = np.abs(neural_resize(x, params, cfg, sr).data - bilinear_resize(x, side, side).data)
    peak = diff.reshape(len(diff), -1).max(axis=1)
    scale = np.where(peak > 0, peak, 1.0).astype(np.float32)
    maps = diff / scale[:, None, None, None]
    return maps[0] if single else maps
