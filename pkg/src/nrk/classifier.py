"""Small ViT-style classifier: patch embedding, global self-attention, class-token readout."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import (
    DimensionError,
    Tensor,
    add,
    as_tensor,
    broadcast_to,
    concat,
    gelu,
    layer_norm,
    linear,
    matmul,
    reshape,
    softmax,
    transpose,
)


@dataclass
class ClassifierConfig:
    input_side: int = 32
    patch_size: int = 4
    embed_dim: int = 64
    depth: int = 4
    heads: int = 4
    num_classes: int = 8
    mlp_ratio: float = 2.0
    channels: int = 1

    def __post_init__(self):
        if self.input_side % self.patch_size:
            raise ValueError(f"input_side {self.input_side} is not divisible by patch_size {self.patch_size}")
        if self.embed_dim % self.heads:
            raise ValueError(f"embed_dim {self.embed_dim} is not divisible by heads {self.heads}")

    @property
    def num_patches(self) -> int:
        return (self.input_side // self.patch_size) ** 2

    @property
    def patch_dim(self) -> int:
        return self.channels * self.patch_size ** 2

    @property
    def hidden_dim(self) -> int:
        return int(round(self.embed_dim * self.mlp_ratio))


def _trunc_normal(rng, shape, std=0.02):
    return np.clip(rng.normal(0.0, std, shape), -2 * std, 2 * std).astype(np.float32)


def _xavier(rng, fan_in, fan_out):
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, (fan_in, fan_out)).astype(np.float32)


def init_classifier(cfg: ClassifierConfig, rng: np.random.Generator) -> dict[str, Tensor]:
    D, Hd = cfg.embed_dim, cfg.hidden_dim
    raw = {
        "patch.weight": _xavier(rng, cfg.patch_dim, D),
        "patch.bias": np.zeros(D, np.float32),
        "cls_token": _trunc_normal(rng, (1, 1, D)),
        "pos_embed": np.zeros((1, cfg.num_patches + 1, D), np.float32),
    }
    for i in range(cfg.depth):
        b = f"blocks.{i}"
        raw.update({
            f"{b}.norm1.gain": np.ones(D, np.float32),
            f"{b}.norm1.bias": np.zeros(D, np.float32),
            f"{b}.attn.qkv.weight": _trunc_normal(rng, (D, 3 * D)),
            f"{b}.attn.proj.weight": _trunc_normal(rng, (D, D)),
            f"{b}.attn.proj.bias": np.zeros(D, np.float32),
            f"{b}.norm2.gain": np.ones(D, np.float32),
            f"{b}.norm2.bias": np.zeros(D, np.float32),
            f"{b}.mlp.fc1.weight": _trunc_normal(rng, (D, Hd)),
            f"{b}.mlp.fc1.bias": np.zeros(Hd, np.float32),
            f"{b}.mlp.fc2.weight": _trunc_normal(rng, (Hd, D)),
            f"{b}.mlp.fc2.bias": np.zeros(D, np.float32),
        })
    raw.update({
        "norm.gain": np.ones(D, np.float32),
        "norm.bias": np.zeros(D, np.float32),
        "head.weight": _trunc_normal(rng, (D, cfg.num_classes)),
        "head.bias": np.zeros(cfg.num_classes, np.float32),
    })
    return {k: Tensor(v, requires_grad=True, name=k) for k, v in raw.items()}


def count_parameters(params: dict) -> int:
    return int(sum(int(np.prod(p.shape)) for p in params.values()))


def standardize(img: Tensor, eps: float = 1e-5) -> Tensor:
    """Zero-mean, unit-variance per image (over channels and pixels)."""
    B = img.shape[0]
    flat = reshape(img, (B, -1))
    return reshape(layer_norm(flat, eps=eps), img.shape)


def patchify(img: Tensor, p: int) -> Tensor:
    B, C, S, _ = img.shape
    g = S // p
    x = reshape(img, (B, C, g, p, g, p))
    x = transpose(x, (0, 2, 4, 1, 3, 5))
    return reshape(x, (B, g * g, C * p * p))


def attention(x: Tensor, params: dict, prefix: str, heads: int, maps: list | None = None) -> Tensor:
    B, T, D = x.shape
    dh = D // heads
    qkv = linear(x, params[f"{prefix}.qkv.weight"])
    qkv = transpose(reshape(qkv, (B, T, 3, heads, dh)), (2, 0, 3, 1, 4))
    q, k, v = qkv[0], qkv[1], qkv[2]
    scores = matmul(q, transpose(k, (0, 1, 3, 2))) * (1.0 / np.sqrt(dh))
    att = softmax(scores, axis=-1)
    if maps is not None:
        maps.append(att.data)
    out = transpose(matmul(att, v), (0, 2, 1, 3))
    out = reshape(out, (B, T, D))
    return linear(out, params[f"{prefix}.proj.weight"], params[f"{prefix}.proj.bias"])


def classify(img, params: dict, cfg: ClassifierConfig, attention_maps: list | None = None) -> Tensor:
    """Logits ``[B, num_classes]`` for images ``[B, C, S, S]`` with ``S == cfg.input_side``.

    If ``attention_maps`` is a list, each block's softmaxed attention array is appended to it.
    """
    img = as_tensor(img)
    if img.ndim != 4 or img.shape[-1] != cfg.input_side or img.shape[-2] != cfg.input_side:
        raise DimensionError(f"classifier expects [B, C, {cfg.input_side}, {cfg.input_side}] input, got {img.shape}")
    B = img.shape[0]
    x = patchify(standardize(img), cfg.patch_size)
    x = linear(x, params["patch.weight"], params["patch.bias"])
    cls = broadcast_to(params["cls_token"], (B, 1, cfg.embed_dim))
    x = add(concat([cls, x], axis=1), params["pos_embed"])
    for i in range(cfg.depth):
        b = f"blocks.{i}"
        h = layer_norm(x, params[f"{b}.norm1.gain"], params[f"{b}.norm1.bias"])
        x = x + attention(h, params, f"{b}.attn", cfg.heads, attention_maps)
        h = layer_norm(x, params[f"{b}.norm2.gain"], params[f"{b}.norm2.bias"])
        h = gelu(linear(h, params[f"{b}.mlp.fc1.weight"], params[f"{b}.mlp.fc1.bias"]))
        x = x + linear(h, params[f"{b}.mlp.fc2.weight"], params[f"{b}.mlp.fc2.bias"])
    x = layer_norm(x, params["norm.gain"], params["norm.bias"])
    return linear(x[:, 0], params["head.weight"], params["head.bias"])


__all__ = ["ClassifierConfig", "init_classifier", "classify", "count_parameters"]
