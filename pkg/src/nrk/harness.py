"""Joint training of resizer + classifier, evaluation, gradient checks, ablations."""
from __future__ import annotations

import csv
import io
import logging
import math
import typing
from dataclasses import dataclass, field, fields, replace
from fractions import Fraction
from pathlib import Path

import numpy as np

from . import checkpoint
from .classifier import ClassifierConfig, classify, init_classifier
from .data import Dataset, augment, write_pgm
from .loss import LossConfig, PriorMatrix, build_prior_matrix, fpdls
from .optim import make_optimizer
from .resample import bilinear_resize, resize_array
from .resizer import (
    ResizerConfig,
    SrStandin,
    check_params,
    init_resizer,
    init_sr_weights,
    ltr_resize,
    neural_resize,
    sr_forward,
    stn_align,
)
from .tensor import Tensor, no_grad, precision

log = logging.getLogger(__name__)

SETTINGS = {
    # setting: (upscale, learned downscale, stn)
    "a": ("none", False, False),
    "b": ("bilinear", True, False),
    "c": ("sr", False, False),
    "d": ("sr", True, False),
    "e": ("sr", True, True),
}


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 64
    lr: float = 1e-4
    lr_decay_factor: float = 0.25
    lr_decay_every: int = 10
    optimizer: str = "adam"
    momentum: float = 0.9
    weight_decay: float = 0.0
    setting: str = "d"
    seed: int = 0
    augment: bool = True
    eval_batch_size: int = 128
    orig_side: int = 48
    sr_mode: str = "bicubic_upsample"
    sr_weights: str | None = None
    loss: LossConfig = field(default_factory=LossConfig)
    resizer: ResizerConfig = field(default_factory=ResizerConfig)
    classifier: ClassifierConfig = field(default_factory=ClassifierConfig)

    def __post_init__(self):
        if self.setting not in SETTINGS:
            raise ValueError(f"setting must be one of {sorted(SETTINGS)}, got {self.setting!r}")
        if self.lr < 0:
            raise ValueError(f"lr must be non-negative, got {self.lr}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        side = self.resizer.target_side(self.orig_side)
        if side != self.classifier.input_side:
            raise ValueError(
                f"resizer maps {self.orig_side} -> {side} but the classifier expects {self.classifier.input_side}"
            )

    def lr_at(self, epoch: int) -> float:
        return self.lr * self.lr_decay_factor ** (epoch // self.lr_decay_every)


# -- config files --------------------------------------------------------------

_SECTIONS = {"loss": LossConfig, "resizer": ResizerConfig, "classifier": ClassifierConfig}
_LOSS_KEYS = {"loss": "kind", "alpha": "alpha", "gamma": "gamma"}


def _coerce(value: str, tp):
    if tp is bool:
        return value.strip().lower() in ("1", "true", "yes", "on")
    if tp is Fraction:
        return Fraction(value.strip())
    origin = typing.get_origin(tp)
    if origin is list:
        (inner,) = typing.get_args(tp)
        return [inner(v) for v in value.replace(",", " ").split()]
    if origin in (typing.Union, getattr(__import__("types"), "UnionType", None)):
        args = [a for a in typing.get_args(tp) if a is not type(None)]
        if value.strip().lower() in ("", "none"):
            return None
        return _coerce(value, args[0])
    return tp(value.strip())


def parse_config_text(text: str) -> dict[str, str]:
    out = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {lineno}: expected 'key = value', got {line!r}")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def config_from_mapping(values: dict[str, str]) -> tuple[TrainConfig, dict[str, str]]:
    """Route flat ``key = value`` pairs onto TrainConfig and its nested sections.

    Returns the config plus any keys it did not consume (data options, etc).
    """
    top = {f.name for f in fields(TrainConfig)} - set(_SECTIONS)
    hints = typing.get_type_hints(TrainConfig)
    kw: dict = {}
    sect: dict[str, dict] = {name: {} for name in _SECTIONS}
    rest = {}
    sect_hints = {name: typing.get_type_hints(cls) for name, cls in _SECTIONS.items()}
    for key, raw in values.items():
        if key in _LOSS_KEYS:
            f = _LOSS_KEYS[key]
            sect["loss"][f] = _coerce(raw, sect_hints["loss"][f])
        elif key == "channels":
            sect["resizer"]["channels"] = sect["classifier"]["channels"] = int(raw)
        elif key in top:
            kw[key] = _coerce(raw, hints[key])
        else:
            for name, cls in _SECTIONS.items():
                if name != "loss" and key in sect_hints[name]:
                    sect[name][key] = _coerce(raw, sect_hints[name][key])
                    break
            else:
                rest[key] = raw
    for name, cls in _SECTIONS.items():
        kw[name] = cls(**sect[name])
    return TrainConfig(**kw), rest


def config_to_text(cfg: TrainConfig) -> str:
    lines = []
    for f in fields(cfg):
        if f.name in _SECTIONS:
            continue
        lines.append(f"{f.name} = {getattr(cfg, f.name)}")
    lines += [f"loss = {cfg.loss.kind}", f"alpha = {cfg.loss.alpha!r}", f"gamma = {cfg.loss.gamma!r}"]
    for sec in ("resizer", "classifier"):
        obj = getattr(cfg, sec)
        for f in fields(obj):
            lines.append(f"{f.name} = {getattr(obj, f.name)}")
    return "\n".join(lines) + "\n"


# -- model ---------------------------------------------------------------------

class Model:
    """Resizer front end (per ablation setting) followed by the classifier."""

    def __init__(self, cfg: TrainConfig, sr: SrStandin | None = None, rng: np.random.Generator | None = None):
        self.cfg = cfg
        rng = rng if rng is not None else np.random.default_rng([cfg.seed, 0])
        up, learned, stn = SETTINGS[cfg.setting]
        self.resizer = init_resizer(cfg.resizer, rng, stn=stn) if learned else {}
        if learned:
            check_params(self.resizer, cfg.resizer)
        self.classifier = init_classifier(cfg.classifier, rng)
        if sr is None and up == "sr":
            if cfg.sr_mode == "frozen_cnn":
                sr = SrStandin.from_checkpoint(cfg.sr_weights, cfg.resizer.h)
            else:
                sr = SrStandin(cfg.sr_mode, cfg.resizer.h)
        self.sr = sr

    def params(self) -> dict[str, Tensor]:
        out = {f"resizer.{k}": v for k, v in self.resizer.items()}
        out.update({f"classifier.{k}": v for k, v in self.classifier.items()})
        return out

    def front_end(self, x: Tensor) -> Tensor:
        cfg = self.cfg
        up, learned, stn = SETTINGS[cfg.setting]
        side = x.shape[-2]
        out = cfg.resizer.target_side(side)
        if up == "none":
            return bilinear_resize(x, out, out)
        if up == "bilinear":
            hr = cfg.resizer.hr_side(side)
            return ltr_resize(bilinear_resize(x, hr, hr), self.resizer, cfg.resizer, out)
        if stn:
            x = stn_align(x, self.resizer)
        if learned:
            return neural_resize(x, self.resizer, cfg.resizer, self.sr)
        return bilinear_resize(sr_forward(x, self.sr), out, out)

    def __call__(self, images) -> Tensor:
        x = images if isinstance(images, Tensor) else Tensor(images)
        return classify(self.front_end(x), self.classifier, self.cfg.classifier)

    def state(self) -> dict[str, np.ndarray]:
        st = {k: v.data for k, v in self.params().items()}
        if self.sr is not None and self.sr.mode == "frozen_cnn":
            st.update(self.sr.state())
        return st

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        checkpoint.assign(self.params(), state)
        if self.sr is not None and self.sr.mode == "frozen_cnn" and "sr.conv1.weight" in state:
            checkpoint.assign(self.sr.weights, state, prefix="sr.")


# -- metrics -------------------------------------------------------------------

@dataclass
class MetricsRow:
    epoch: int
    split: str
    acc: float
    recall: list[float]
    mean_recall: float
    loss: float

    @staticmethod
    def header(num_classes: int) -> list[str]:
        return ["epoch", "split", "acc", "mean_recall"] + [f"recall_{i}" for i in range(num_classes)] + ["loss"]

    def as_row(self) -> list[str]:
        return [str(self.epoch), self.split, f"{self.acc:.6f}", f"{self.mean_recall:.6f}"] + [
            f"{r:.6f}" for r in self.recall
        ] + [f"{self.loss:.6f}"]


def summarize(pred: np.ndarray, labels: np.ndarray, num_classes: int, loss: float, epoch: int, split: str) -> MetricsRow:
    correct = pred == labels
    recall = []
    present = []
    for c in range(num_classes):
        mask = labels == c
        recall.append(float(correct[mask].mean()) if mask.any() else 0.0)
        if mask.any():
            present.append(recall[-1])
    acc = float(correct.mean()) if len(labels) else 0.0
    mean_recall = float(np.mean(present)) if present else 0.0
    return MetricsRow(epoch, split, acc, recall, mean_recall, loss)


def predict(logits: np.ndarray) -> np.ndarray:
    """argmax with ties going to the lowest class index."""
    return np.argmax(logits, axis=1)


def evaluate(model: Model, dataset: Dataset, split: str, prior: PriorMatrix | None = None,
             epoch: int = -1) -> MetricsRow:
    images, labels, _, _ = dataset.arrays(split)
    n_cls = model.cfg.classifier.num_classes
    if prior is None:
        prior = PriorMatrix.identity(n_cls)
    bs = model.cfg.eval_batch_size
    preds, total = [], 0.0
    with no_grad():
        for i in range(0, len(labels), bs):
            z = model(images[i:i + bs])
            total += fpdls(z, labels[i:i + bs], prior, model.cfg.loss).item() * len(z.data)
            preds.append(predict(z.data))
    pred = np.concatenate(preds) if preds else np.zeros(0, np.int64)
    loss = total / max(len(labels), 1)
    return summarize(pred, labels, n_cls, loss, epoch, split)


# -- training ------------------------------------------------------------------

@dataclass
class TrainResult:
    model: Model
    rows: list[MetricsRow]
    lrs: list[float]
    best: MetricsRow | None
    prior: PriorMatrix
    metrics_csv: str


def _write_rows(rows, num_classes) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(MetricsRow.header(num_classes))
    for r in rows:
        w.writerow(r.as_row())
    return buf.getvalue()


def full_state(model: Model, opt, prior: PriorMatrix, epoch: int) -> dict[str, np.ndarray]:
    st = dict(model.state())
    st.update(opt.state())
    st["loss.prior"] = np.asarray(prior, dtype=np.float32)
    st["meta.epoch"] = np.array([epoch], np.float32)
    return st


def train(cfg: TrainConfig, dataset: Dataset, out_dir=None, sr: SrStandin | None = None,
          model: Model | None = None, on_epoch=None) -> TrainResult:
    """Train for ``cfg.epochs`` epochs, evaluating the val split after each one.

    With ``out_dir`` set, writes config.txt, metrics.csv, schedule.csv and the
    ``last.nrkp`` / ``best.nrkp`` checkpoints there. ``on_epoch(epoch, model)``
    runs after each epoch; a truthy return ends training early.
    """
    n_cls = dataset.manifest.num_classes
    if cfg.classifier.num_classes != n_cls:
        raise ValueError(f"classifier has {cfg.classifier.num_classes} classes, dataset has {n_cls}")
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.txt").write_text(config_to_text(cfg), encoding="utf-8")

    model = model or Model(cfg, sr=sr)
    params = model.params()
    opt = make_optimizer(cfg.optimizer, params, cfg.lr, cfg.momentum, cfg.weight_decay)
    images, labels, votes, _ = dataset.arrays("train")
    prior = build_prior_matrix(votes, n_cls) if len(votes) else PriorMatrix.identity(n_cls)
    has_val = len(dataset.arrays("val")[1]) > 0
    shuffle_rng = np.random.default_rng([cfg.seed, 1])
    aug_rng = np.random.default_rng([cfg.seed, 2])

    rows: list[MetricsRow] = []
    lrs: list[float] = []
    best: MetricsRow | None = None
    n = len(labels)
    for epoch in range(cfg.epochs):
        lr = cfg.lr_at(epoch)
        opt.lr = lr
        lrs.append(lr)
        order = shuffle_rng.permutation(n)
        preds, seen, total = [], [], 0.0
        for bi, start in enumerate(range(0, n, cfg.batch_size)):
            idx = order[start:start + cfg.batch_size]
            batch = images[idx]
            if cfg.augment:
                batch = np.stack([augment(img, aug_rng) for img in batch])
            z = model(batch)
            loss = fpdls(z, labels[idx], prior, cfg.loss)
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingDiverged(f"non-finite loss {value} at epoch {epoch}, batch {bi}, lr {lr:g}")
            loss.backward()
            opt.step()
            opt.zero_grad()
            total += value * len(idx)
            preds.append(predict(z.data))
            seen.append(labels[idx])
        train_row = summarize(np.concatenate(preds), np.concatenate(seen), n_cls, total / n, epoch, "train")
        rows.append(train_row)
        if has_val:
            val_row = evaluate(model, dataset, "val", prior, epoch)
            rows.append(val_row)
            improved = best is None or val_row.acc > best.acc
        else:
            val_row = None
            improved = True
        log.info("epoch %d lr %.3g train loss %.4f acc %.4f%s", epoch, lr, train_row.loss, train_row.acc,
                 f" val acc {val_row.acc:.4f}" if val_row else "")
        if improved:
            best = val_row
        if out is not None:
            state = full_state(model, opt, prior, epoch)
            checkpoint.save(out / "last.nrkp", state)
            if improved:
                checkpoint.save(out / "best.nrkp", state)
            (out / "metrics.csv").write_text(_write_rows(rows, n_cls), encoding="utf-8")
            (out / "schedule.csv").write_text(
                "epoch,lr\n" + "".join(f"{e},{v!r}\n" for e, v in enumerate(lrs)), encoding="utf-8"
            )
        if on_epoch is not None and on_epoch(epoch, model):
            break
    return TrainResult(model, rows, lrs, best, prior, _write_rows(rows, n_cls))


def load_model(cfg: TrainConfig, ckpt_path) -> tuple[Model, PriorMatrix]:
    state = checkpoint.load(ckpt_path)
    sr = None
    if SETTINGS[cfg.setting][0] == "sr" and cfg.sr_mode == "frozen_cnn" and "sr.conv1.weight" in state:
        sr = SrStandin("frozen_cnn", cfg.resizer.h, {k[3:]: v for k, v in state.items() if k.startswith("sr.")})
    model = Model(cfg, sr=sr)
    model.load_state(state)
    prior = PriorMatrix(state["loss.prior"].astype(np.float64)) if "loss.prior" in state else None
    return model, prior


# -- gradient check --------------------------------------------------------------

@dataclass
class GradCheckReport:
    max_rel_error: dict[str, float]
    checked: dict[str, int]
    nonsmooth: dict[str, int]
    tolerance: float

    @property
    def vacuous(self) -> list[str]:
        """Tensors with non-zero gradient where every probe hit a kink, so nothing was compared."""
        return [k for k, n in self.checked.items() if n == 0 and self.nonsmooth[k] > 0]

    @property
    def passed(self) -> bool:
        return all(v <= self.tolerance for v in self.max_rel_error.values()) and not self.vacuous

    def __str__(self) -> str:
        lines = [
            f"{k}: max rel err {v:.2e} over {self.checked[k]} elements ({self.nonsmooth[k]} non-smooth resampled)"
            for k, v in self.max_rel_error.items()
        ]
        if self.vacuous:
            lines.append(f"unchecked (all probes non-smooth): {', '.join(self.vacuous)}")
        lines.append("PASS" if self.passed else "FAIL")
        return "\n".join(lines)


def tiny_config(setting: str = "e", loss: LossConfig | None = None, **overrides) -> TrainConfig:
    """Depth-1, embed-8 classifier on 12x12 originals: the scale used for gradient checks."""
    kw = dict(
        setting=setting,
        orig_side=12,
        batch_size=2,
        sr_mode="frozen_cnn" if SETTINGS[setting][0] == "sr" else "bicubic_upsample",
        loss=loss or LossConfig("fpdls", 0.5, 2.0),
        resizer=ResizerConfig(h=Fraction(2), t=Fraction(2, 3), base_channels=4, num_residual_blocks=1),
        classifier=ClassifierConfig(input_side=8, patch_size=4, embed_dim=8, depth=1, heads=2, num_classes=3),
    )
    kw.update(overrides)
    return TrainConfig(**kw)


def gradient_check(cfg: TrainConfig, eps: float = 1e-3, tol: float = 1e-2, samples: int = 8,
                   seed: int = 0, max_tries: int = 128) -> GradCheckReport:
    """Central finite differences vs tape gradients on a random batch.

    Runs in float64 so the difference quotient is not dominated by round-off.
    Every parameter is jittered first: a zero-initialised output layer would
    otherwise block all upstream gradients and make the check vacuous.

    leaky_relu, clamp and bilinear sampling are piecewise linear, so a
    ``+-eps`` stencil can straddle a kink and the quotient stops being a
    derivative estimate. Such elements are detected by comparing the ``eps``
    and ``eps/2`` quotients and replaced by another random element.
    """
    rng = np.random.default_rng(seed)
    n_cls = cfg.classifier.num_classes
    side = cfg.orig_side
    with precision(np.float64):
        sr = None
        if SETTINGS[cfg.setting][0] == "sr":
            weights = init_sr_weights(rng, cfg.resizer.channels) if cfg.sr_mode == "frozen_cnn" else {}
            sr = SrStandin(cfg.sr_mode, cfg.resizer.h, weights)
        model = Model(cfg, sr=sr, rng=rng)
        params = model.params()
        for p in params.values():
            p.data += rng.normal(0.0, 0.1, p.shape)
        coarse = rng.random((cfg.batch_size, cfg.resizer.channels, 2, 2))
        # smooth inputs keep the sampler's slope jumps (second differences) small
        x = 0.15 + 0.7 * resize_array(coarse, side, side, "bicubic").clip(0, 1)
        k = rng.integers(0, n_cls, cfg.batch_size)
        prior = PriorMatrix(rng.dirichlet(np.ones(n_cls), n_cls))

        def f() -> float:
            with no_grad():
                return fpdls(model(x), k, prior, cfg.loss).item()

        def probe(flat, i):
            orig = flat[i]
            vals = {}
            for h in (eps, eps / 2, 0.0, -eps / 2, -eps):
                flat[i] = orig + h
                vals[h] = f()
            flat[i] = orig
            central = (vals[eps] - vals[-eps]) / (2 * eps)
            half = (vals[eps / 2] - vals[-eps / 2]) / eps
            # smooth f: bend(h) = h * f'' + O(h^3), so bend(eps) == 2 * bend(eps / 2);
            # a kink inside the stencil breaks that scaling or the central agreement
            bend_full = (vals[eps] - 2 * vals[0.0] + vals[-eps]) / eps
            bend_half = (vals[eps / 2] - 2 * vals[0.0] + vals[-eps / 2]) / (eps / 2)
            return central, max(abs(central - half), abs(bend_full - 2 * bend_half))

        loss = fpdls(model(x), k, prior, cfg.loss)
        loss.backward()
        errs, counts, kinks = {}, {}, {}
        for name, p in params.items():
            flat = p.data.reshape(-1)
            gflat = p.grad.reshape(-1)
            worst, used, bumped = 0.0, 0, 0
            for i in rng.permutation(flat.size)[:max_tries]:
                if used >= samples:
                    break
                num, wobble = probe(flat, i)
                ana = gflat[i]
                scale = max(abs(num), abs(ana))
                if scale < 1e-6:
                    continue
                if wobble > 0.25 * tol * scale:
                    bumped += 1
                    continue
                worst = max(worst, abs(num - ana) / scale)
                used += 1
            errs[name], counts[name], kinks[name] = worst, used, bumped
    return GradCheckReport(errs, counts, kinks, tol)


# -- ablation ------------------------------------------------------------------

ABLATION_HEADER = ["setting", "loss", "seeds", "acc_mean", "acc_std", "mean_recall_mean", "mean_recall_std", "status"]


@dataclass
class CellResult:
    setting: str
    loss: str
    accs: list[float]
    recalls: list[float]
    status: str = "ok"

    def as_row(self) -> list[str]:
        def ms(v):
            return (f"{np.mean(v):.6f}", f"{np.std(v):.6f}") if v else ("", "")

        return [self.setting, self.loss, str(len(self.accs)), *ms(self.accs), *ms(self.recalls), self.status]


def ablate(grid, base: TrainConfig, dataset: Dataset, seeds=(0, 1, 2), sr: SrStandin | None = None,
           out_csv=None) -> list[CellResult]:
    """Train every (setting, loss-kind) cell once per seed; report final val accuracy and mean recall."""
    results = []
    for setting, kind in grid:
        cell = CellResult(setting, kind, [], [])
        try:
            for s in seeds:
                cfg = replace(base, setting=setting, seed=s, loss=replace(base.loss, kind=kind))
                res = train(cfg, dataset, sr=sr)
                final = [r for r in res.rows if r.split == "val"][-1]
                cell.accs.append(final.acc)
                cell.recalls.append(final.mean_recall)
        except Exception as exc:  # a failed cell must not stop the grid
            log.exception("cell (%s, %s) failed", setting, kind)
            cell.status = f"failed: {type(exc).__name__}: {exc}".replace(",", ";")
        results.append(cell)
    if out_csv is not None:
        with open(out_csv, "w", newline="", encoding="utf-8") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(ABLATION_HEADER)
            for c in results:
                w.writerow(c.as_row())
    return results


# -- difference maps ------------------------------------------------------------

def export_diffmaps(model: Model, images: np.ndarray, ids, out_dir) -> list[Path]:
    """Write ``<id>_bi.pgm``, ``<id>_nr.pgm`` and ``<id>_diff.pgm`` per sample."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    x = Tensor(np.asarray(images, np.float32))
    side = model.cfg.resizer.target_side(x.shape[-2])
    with no_grad():
        nr = model.front_end(x).data
        bi = bilinear_resize(x, side, side).data
    diff = np.abs(nr - bi)
    peak = diff.reshape(len(diff), -1).max(axis=1)
    diff = diff / np.where(peak > 0, peak, 1.0)[:, None, None, None]
    written = []
    for i, sid in enumerate(ids):
        for tag, arr in (("bi", bi[i]), ("nr", nr[i]), ("diff", diff[i])):
            path = out / f"{sid}_{tag}.pgm"
            write_pgm(path, np.clip(arr, 0.0, 1.0))
            written.append(path)
    return written
