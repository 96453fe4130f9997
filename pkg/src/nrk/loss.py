"""Cross-entropy, prior-distribution label smoothing (PDLS) and its focal variant.

For logits ``z`` with softmax ``p`` and majority label ``k`` the per-class PDLS term is

    L_c = (alpha * [c == k] + (1 - alpha) * d[k, c]) * log p_c

and the focal variant sums ``-(1 - p_c) ** gamma * L_c`` over classes; batches are averaged.
"""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .tensor import Tensor, as_tensor, exp, log_softmax, mean, neg, pow, sum

log = logging.getLogger(__name__)

KINDS = ("ce", "pdls", "fpdls")


class LossConfigError(ValueError):
    pass


@dataclass
class LossConfig:
    kind: str = "fpdls"
    alpha: float = 0.5
    gamma: float = 2.0

    def __post_init__(self):
        self.kind = self.kind.lower()
        if self.kind not in KINDS:
            raise LossConfigError(f"loss kind must be one of {KINDS}, got {self.kind!r}")
        if not 0.0 <= self.alpha <= 1.0:
            raise LossConfigError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.gamma < 0:
            raise LossConfigError(f"gamma must be >= 0, got {self.gamma}")


def majority_label(counts) -> int:
    """argmax of the vote counts; ``np.argmax`` already breaks ties toward the lowest index."""
    counts = np.asarray(counts)
    if counts.sum() <= 0:
        raise ValueError("vote counts must have a positive total")
    return int(np.argmax(counts))


def normalize_votes(counts) -> np.ndarray:
    counts = np.asarray(counts, dtype=np.float64)
    total = counts.sum()
    if total <= 0:
        raise ValueError("vote counts must have a positive total")
    return counts / total


class PriorMatrix:
    """Row-stochastic class-confusion prior ``d[k, c]`` indexed by majority label ``k``."""

    def __init__(self, d):
        d = np.array(d, dtype=np.float64)
        if d.ndim != 2 or d.shape[0] != d.shape[1]:
            raise ValueError(f"prior must be square, got {d.shape}")
        if (d < 0).any() or not np.allclose(d.sum(axis=1), 1.0, atol=1e-6):
            raise ValueError("prior rows must be non-negative and sum to 1")
        d.setflags(write=False)
        self.d = d

    @property
    def num_classes(self) -> int:
        return self.d.shape[0]

    def __array__(self, dtype=None, copy=None):
        return self.d if dtype is None else self.d.astype(dtype)

    @classmethod
    def identity(cls, n: int) -> "PriorMatrix":
        return cls(np.eye(n))

    def save(self, path) -> None:
        lines = [" ".join(repr(float(v)) for v in row) for row in self.d]
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "PriorMatrix":
        rows = [line.split() for line in Path(path).read_text(encoding="utf-8").splitlines() if line.strip()]
        return cls([[float(v) for v in row] for row in rows])


def build_prior_matrix(votes: Iterable[Sequence[int]], num_classes: int | None = None) -> PriorMatrix:
    """Average normalized vote vectors grouped by majority label.

    Classes that never win a majority fall back to a one-hot row (with a warning).
    """
    votes = [np.asarray(v) for v in votes]
    if num_classes is None:
        num_classes = len(votes[0])
    acc = np.zeros((num_classes, num_classes))
    n = np.zeros(num_classes)
    for v in votes:
        k = majority_label(v)
        acc[k] += normalize_votes(v)
        n[k] += 1
    missing = np.flatnonzero(n == 0)
    if len(missing):
        warnings.warn(f"no samples with majority label(s) {missing.tolist()}; using one-hot prior rows")
    for k in missing:
        acc[k, k] = 1.0
        n[k] = 1
    d = acc / n[:, None]
    return PriorMatrix(d / d.sum(axis=1, keepdims=True))


def _labels(k) -> np.ndarray:
    return np.asarray(k, dtype=np.int64).reshape(-1)


def smoothed_targets(k, prior: PriorMatrix, alpha: float, dtype=np.float32) -> np.ndarray:
    if not 0.0 <= alpha <= 1.0:
        raise LossConfigError(f"alpha must lie in [0, 1], got {alpha}")
    k = _labels(k)
    d = np.asarray(prior)
    if k.min() < 0 or k.max() >= d.shape[0]:
        raise LossConfigError(f"labels must lie in [0, {d.shape[0]}), got {k.min()}..{k.max()}")
    onehot = np.eye(d.shape[0])[k]
    return (alpha * onehot + (1.0 - alpha) * d[k]).astype(dtype)


def pdls_per_class(z: Tensor, k, prior: PriorMatrix, alpha: float) -> Tensor:
    """Per-class PDLS terms ``[B, C]``; every entry is <= 0."""
    z = as_tensor(z)
    w = smoothed_targets(k, prior, alpha, z.data.dtype)
    return log_softmax(z, axis=1) * w


def cross_entropy(z: Tensor, k) -> Tensor:
    z = as_tensor(z)
    k = _labels(k)
    logp = log_softmax(z, axis=1)
    return neg(mean(logp[np.arange(len(k)), k]))


def fpdls(z: Tensor, k, prior: PriorMatrix | None, cfg: LossConfig) -> Tensor:
    """Scalar loss for ``cfg.kind``; CE ignores ``prior`` and ``alpha``.

    The focal factor stays in the graph, so its derivative reaches the logits too.
    """
    z = as_tensor(z)
    if cfg.kind == "ce":
        return cross_entropy(z, k)
    terms = pdls_per_class(z, k, prior, cfg.alpha)
    if cfg.kind == "fpdls":
        p = exp(log_softmax(z, axis=1))
        terms = pow(1.0 - p, cfg.gamma) * terms
    return neg(mean(sum(terms, axis=1)))


def loss_fn(cfg: LossConfig, prior: PriorMatrix | None = None):
    return lambda z, k: fpdls(z, k, prior, cfg)
