"""Vote-annotated image datasets: FERPlus-style CSV ingestion and a synthetic generator.

CSV schema: ``name,usage,vote_0,...,vote_{C-1}`` with an optional trailing
``pixels`` column holding space-separated 8-bit values (row-major). Without
it, each ``name`` is a binary PGM (P5, maxval 255) under the images directory.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .loss import majority_label
from .resample import resize_array

log = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")
USAGE_TO_SPLIT = {"Training": "train", "PublicTest": "val", "PrivateTest": "test"}
SPLIT_TO_USAGE = {v: k for k, v in USAGE_TO_SPLIT.items()}
FERPLUS_CLASSES = ["neutral", "happiness", "surprise", "sadness", "anger", "disgust", "fear", "contempt"]


class CsvFormatError(ValueError):
    pass


@dataclass
class Sample:
    id: str
    image: np.ndarray  # [C, H, W] float32 in [0, 1]
    votes: np.ndarray  # [num_classes] int
    majority_label: int
    split: str
    true_label: int | None = None


@dataclass
class DatasetManifest:
    num_classes: int
    class_names: list[str]
    image_side: int
    counts: dict[str, int]
    source: str


@dataclass
class Dataset:
    manifest: DatasetManifest
    samples: list[Sample]
    _cache: dict = field(default_factory=dict, repr=False)

    def split(self, name: str) -> list[Sample]:
        return [s for s in self.samples if s.split == name]

    def arrays(self, name: str):
        """(images [N,C,H,W], labels [N], votes [N,C], ids) for one split."""
        if name not in self._cache:
            ss = self.split(name)
            if ss:
                imgs = np.stack([s.image for s in ss]).astype(np.float32)
                votes = np.stack([s.votes for s in ss])
            else:
                side = self.manifest.image_side
                imgs = np.zeros((0, 1, side, side), np.float32)
                votes = np.zeros((0, self.manifest.num_classes), np.int64)
            labels = np.array([s.majority_label for s in ss], dtype=np.int64)
            self._cache[name] = (imgs, labels, votes, [s.id for s in ss])
        return self._cache[name]

    def class_counts(self, name: str) -> list[int]:
        labels = self.arrays(name)[1]
        return np.bincount(labels, minlength=self.manifest.num_classes).tolist()


def _manifest(samples, num_classes, class_names, source) -> DatasetManifest:
    side = samples[0].image.shape[-1] if samples else 0
    counts = {sp: sum(1 for s in samples if s.split == sp) for sp in SPLITS}
    return DatasetManifest(num_classes, list(class_names), side, counts, source)


# -- PGM ----------------------------------------------------------------------

def write_pgm(path, img: np.ndarray) -> None:
    """Write a [H, W] (or [1, H, W]) float image in [0, 1] as 8-bit P5."""
    q = quantize(img)
    if q.ndim == 3:
        q = q[0]
    h, w = q.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(q.tobytes())


def quantize(img: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(img) * 255.0), 0, 255).astype(np.uint8)


def read_pgm(path) -> np.ndarray:
    """Read an 8-bit P5 file as a uint8 [H, W] array."""
    buf = Path(path).read_bytes()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(buf) and buf[pos:pos + 1].isspace():
            pos += 1
        if buf[pos:pos + 1] == b"#":
            while pos < len(buf) and buf[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos:pos + 1].isspace():
            pos += 1
        tokens.append(buf[start:pos])
    pos += 1  # single whitespace byte before the raster
    if tokens[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM (magic {tokens[0]!r})")
    w, h, maxval = (int(t) for t in tokens[1:])
    if maxval != 255:
        raise ValueError(f"{path}: only maxval 255 is supported, got {maxval}")
    return np.frombuffer(buf, dtype=np.uint8, count=w * h, offset=pos).reshape(h, w).copy()


# -- CSV ----------------------------------------------------------------------

def load_ferplus_csv(images_path, labels_path, class_names=None) -> Dataset:
    """Parse a labels CSV; pixels come from an inline ``pixels`` column or PGM files.

    Rows with no votes are dropped; rows whose image file is missing are skipped.
    """
    labels_path = Path(labels_path)
    images_dir = Path(images_path) if images_path is not None else labels_path.parent
    samples: list[Sample] = []
    dropped = missing = 0
    with open(labels_path, newline="", encoding="utf-8") as f:
        reader = csv.reader(f)
        header = next(reader)
        inline = header[-1] == "pixels"
        vote_cols = header[2:-1] if inline else header[2:]
        n_cls = len(vote_cols)
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise CsvFormatError(f"{labels_path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            name, usage = row[0], row[1]
            try:
                votes = np.array([int(v) for v in row[2:2 + n_cls]], dtype=np.int64)
            except ValueError:
                raise CsvFormatError(f"{labels_path}:{lineno}: malformed vote field in {row[2:2 + n_cls]}") from None
            if (votes < 0).any():
                raise CsvFormatError(f"{labels_path}:{lineno}: negative vote count")
            if usage not in USAGE_TO_SPLIT:
                raise CsvFormatError(f"{labels_path}:{lineno}: unknown usage tag {usage!r}")
            if votes.sum() == 0:
                dropped += 1
                continue
            if inline:
                px = np.array(row[-1].split(), dtype=np.float32)
                side = int(round(np.sqrt(px.size)))
                if side * side != px.size:
                    raise CsvFormatError(f"{labels_path}:{lineno}: {px.size} pixels is not a square image")
                img = px.reshape(1, side, side) / 255.0
            else:
                path = images_dir / name
                if not path.exists():
                    log.warning("missing image %s (line %d), row skipped", path, lineno)
                    missing += 1
                    continue
                img = read_pgm(path)[None].astype(np.float32) / 255.0
            samples.append(Sample(name, img.astype(np.float32), votes, majority_label(votes), USAGE_TO_SPLIT[usage]))
    if dropped:
        log.info("dropped %d rows with zero votes", dropped)
    if missing:
        log.warning("skipped %d rows with missing images", missing)
    sides = {s.image.shape for s in samples}
    if len(sides) > 1:
        raise CsvFormatError(f"{labels_path}: images have mixed shapes {sorted(sides)}")
    if class_names is None:
        class_names = FERPLUS_CLASSES if n_cls == len(FERPLUS_CLASSES) else [f"class_{i}" for i in range(n_cls)]
    return Dataset(_manifest(samples, n_cls, class_names, "ferplus_csv"), samples)


def write_ferplus_csv(dataset: Dataset, labels_path, images_dir=None) -> None:
    """Write the dataset in the labels-CSV schema.

    Pixels go inline unless ``images_dir`` is given, in which case each sample
    becomes ``<images_dir>/<id>.pgm`` (grayscale only).
    """
    n = dataset.manifest.num_classes
    header = ["name", "usage"] + [f"vote_{i}" for i in range(n)]
    if images_dir is None:
        header.append("pixels")
    else:
        Path(images_dir).mkdir(parents=True, exist_ok=True)
    with open(labels_path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(header)
        for s in dataset.samples:
            row = [s.id if images_dir is None else f"{s.id}.pgm", SPLIT_TO_USAGE[s.split]]
            row += [str(int(v)) for v in s.votes]
            if images_dir is None:
                row.append(" ".join(map(str, quantize(s.image[0]).ravel())))
            else:
                write_pgm(Path(images_dir) / f"{s.id}.pgm", s.image)
            w.writerow(row)


# -- synthetic ----------------------------------------------------------------

@dataclass
class SynthConfig:
    num_classes: int = 8
    side: int = 48
    samples_per_class: list[int] = field(default_factory=lambda: [100] * 8)
    annotators: int = 10
    confusion_temperature: float = 0.5
    seed: int = 0
    val_fraction: float = 0.25
    render_scale: int = 2
    noise_sigma: float = 0.1

    def __post_init__(self):
        self.samples_per_class = [int(n) for n in self.samples_per_class]
        if len(self.samples_per_class) != self.num_classes:
            raise ValueError(f"samples_per_class has {len(self.samples_per_class)} entries for {self.num_classes} classes")
        if min(self.samples_per_class) < 0:
            raise ValueError("samples_per_class entries must be >= 0")
        if self.annotators < 1:
            raise ValueError("annotators must be >= 1")
        if self.confusion_temperature < 0:
            raise ValueError("confusion_temperature must be >= 0")

    def val_counts(self) -> list[int]:
        return [int(np.ceil(n * self.val_fraction)) for n in self.samples_per_class]


def class_geometry(k: int, num_classes: int) -> tuple[float, float]:
    """(orientation in radians, signed curvature) of class ``k``'s stroke prototype."""
    angle = np.pi * k / num_classes
    curvature = 0.035 if k % 2 else -0.035
    return angle, curvature


def render_prototype(k: int, num_classes: int, side: int, rng: np.random.Generator | None = None) -> np.ndarray:
    """Draw class ``k``'s bar/arc stroke on a ``side``-pixel canvas, with optional pose jitter."""
    angle, curv = class_geometry(k, num_classes)
    cx = cy = (side - 1) / 2.0
    width = side / 48.0
    if rng is not None:
        angle += rng.normal(0.0, np.deg2rad(4.0))
        cx += rng.uniform(-0.08, 0.08) * side
        cy += rng.uniform(-0.08, 0.08) * side
        width *= rng.uniform(0.8, 1.25)
    yy, xx = np.mgrid[0:side, 0:side].astype(np.float64)
    u = (xx - cx) * np.cos(angle) + (yy - cy) * np.sin(angle)
    v = -(xx - cx) * np.sin(angle) + (yy - cy) * np.cos(angle)
    u_n = u / side * 48.0
    dist = np.abs(v / side * 48.0 - curv * u_n ** 2) * side / 48.0
    half_len = 0.35 * side
    stroke = np.exp(-(dist / width) ** 2) * (np.abs(u) < half_len)
    return (0.25 + 0.65 * stroke).astype(np.float32)


def confusion_row(k: int, num_classes: int, temperature: float) -> np.ndarray:
    """Annotator vote probabilities for true class ``k``; neighbouring orientations are confused."""
    c = np.arange(num_classes)
    ring = np.minimum(np.abs(c - k), num_classes - np.abs(c - k))
    if temperature == 0:
        return (ring == 0).astype(np.float64)
    logits = -ring / temperature
    p = np.exp(logits - logits.max())
    return p / p.sum()


def synth_generate(cfg: SynthConfig) -> Dataset:
    """Seeded synthetic dataset: per-class stroke prototypes rendered at
    ``render_scale * side``, degraded to ``side`` by bicubic downscale, then
    Gaussian pixel noise; votes drawn from a softened confusion of the true class."""
    rng = np.random.default_rng(cfg.seed)
    big = cfg.side * cfg.render_scale
    samples: list[Sample] = []
    plan = [("train", cfg.samples_per_class), ("val", cfg.val_counts())]
    for split, counts in plan:
        idx = 0
        for k, n in enumerate(counts):
            p = confusion_row(k, cfg.num_classes, cfg.confusion_temperature)
            for _ in range(n):
                hi = render_prototype(k, cfg.num_classes, big, rng)
                lo = resize_array(hi, cfg.side, cfg.side, "bicubic")
                lo = lo + rng.normal(0.0, cfg.noise_sigma, lo.shape)
                img = np.clip(lo, 0.0, 1.0).astype(np.float32)[None]
                votes = rng.multinomial(cfg.annotators, p).astype(np.int64)
                samples.append(Sample(f"synth_{split}_{idx:05d}", img, votes, majority_label(votes), split, k))
                idx += 1
    names = [f"class_{i}" for i in range(cfg.num_classes)]
    return Dataset(_manifest(samples, cfg.num_classes, names, "synthetic"), samples)


def degradation_pairs(num_classes: int, side: int, n: int, render_scale: int = 2, seed: int = 0):
    """(low [n,1,side,side], high [n,1,side*s,side*s]) noise-free pairs for fitting the SR stand-in."""
    rng = np.random.default_rng(seed)
    big = side * render_scale
    hi = np.stack([render_prototype(int(rng.integers(num_classes)), num_classes, big, rng) for _ in range(n)])
    lo = np.clip(resize_array(hi, side, side, "bicubic"), 0.0, 1.0)
    return lo[:, None].astype(np.float32), hi[:, None].astype(np.float32)


# -- per-image transforms ------------------------------------------------------

def downscale_then_pipeline(img: np.ndarray, side: int = 48) -> np.ndarray:
    """Bicubic-downscale a [C, H, W] image to ``side`` before it enters the resizer."""
    H, W = img.shape[-2:]
    if H < side or W < side:
        raise ValueError(f"source image {H}x{W} is smaller than the pipeline side {side}")
    if H == side and W == side:
        return img
    return np.clip(resize_array(img, side, side, "bicubic"), 0.0, 1.0).astype(img.dtype)


def augment(img: np.ndarray, rng: np.random.Generator, flip_p: float = 0.5, pad: int = 4) -> np.ndarray:
    """Horizontal flip and pad-then-crop. No rotation."""
    out = img
    if rng.random() < flip_p:
        out = out[..., ::-1]
    if pad:
        H, W = out.shape[-2:]
        dy, dx = rng.integers(0, 2 * pad + 1, size=2)
        padded = np.pad(out, ((0, 0), (pad, pad), (pad, pad)))
        out = padded[:, dy:dy + H, dx:dx + W]
    return np.ascontiguousarray(out)
