"""Command-line entry point: ``nrk {train,eval,gradcheck,ablate,diffmap,synth}``."""
from __future__ import annotations

import argparse
import logging
import os
import sys
import typing
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import harness
from .data import Dataset, SynthConfig, downscale_then_pipeline, load_ferplus_csv, synth_generate, write_ferplus_csv

log = logging.getLogger("nrk")

FLAG_KEYS = ("seed", "setting", "loss", "alpha", "gamma", "epochs", "lr", "lr_decay_factor", "batch_size",
             "sr_mode", "sr_weights")


def _limit_threads() -> None:
    n = os.environ.get("NRK_THREADS")
    if n:
        from threadpoolctl import threadpool_limits

        threadpool_limits(int(n))


def _gather(args) -> dict[str, str]:
    values: dict[str, str] = {}
    if getattr(args, "config", None):
        values.update(harness.parse_config_text(Path(args.config).read_text(encoding="utf-8")))
    for key in FLAG_KEYS:
        v = getattr(args, key, None)
        if v is not None:
            values[key] = str(v)
    if getattr(args, "data", None):
        values["data"] = args.data
    if getattr(args, "images", None):
        values["images"] = args.images
    return values


def synth_config(rest: dict[str, str]) -> SynthConfig:
    hints = typing.get_type_hints(SynthConfig)
    kw = {}
    for f in fields(SynthConfig):
        key = f"synth_{f.name}"
        if key in rest:
            kw[f.name] = harness._coerce(rest[key], hints[f.name])
    if "synth_temperature" in rest:
        kw["confusion_temperature"] = float(rest["synth_temperature"])
    return SynthConfig(**kw)


def load_dataset(rest: dict[str, str], orig_side: int) -> Dataset:
    src = rest.get("data", "synth")
    if src == "synth":
        ds = synth_generate(synth_config(rest))
    else:
        ds = load_ferplus_csv(rest.get("images"), src)
    if ds.manifest.image_side < orig_side:
        raise ValueError(f"dataset images ({ds.manifest.image_side} px) are smaller than orig_side {orig_side}")
    if ds.manifest.image_side > orig_side:
        for s in ds.samples:
            s.image = downscale_then_pipeline(s.image, orig_side)
        ds.manifest.image_side = orig_side
        ds._cache.clear()
    return ds


def _configs(args):
    cfg, rest = harness.config_from_mapping(_gather(args))
    return cfg, rest


def cmd_train(args) -> int:
    cfg, rest = _configs(args)
    ds = load_dataset(rest, cfg.orig_side)
    out = Path(args.out or f"runs/{cfg.setting}_{cfg.loss.kind}_s{cfg.seed}")
    res = harness.train(cfg, ds, out_dir=out)
    extra = "".join(f"{k} = {v}\n" for k, v in rest.items())
    if extra:
        with open(out / "config.txt", "a", encoding="utf-8") as f:
            f.write(extra)
    print(f"wrote {out}")
    if res.best is not None:
        print(",".join(harness.MetricsRow.header(len(res.best.recall))))
        print(",".join(res.best.as_row()))
    return 0


def cmd_eval(args) -> int:
    run = Path(args.out)
    values = harness.parse_config_text((run / "config.txt").read_text(encoding="utf-8"))
    cfg, rest = harness.config_from_mapping(values)
    ds = load_dataset(rest, cfg.orig_side)
    model, prior = harness.load_model(cfg, args.checkpoint or run / "best.nrkp")
    row = harness.evaluate(model, ds, args.split, prior)
    print(",".join(harness.MetricsRow.header(len(row.recall))))
    print(",".join(row.as_row()))
    return 0


def cmd_gradcheck(args) -> int:
    from .loss import LossConfig

    loss = LossConfig(args.loss or "fpdls", args.alpha if args.alpha is not None else 0.5,
                      args.gamma if args.gamma is not None else 2.0)
    report = harness.gradient_check(harness.tiny_config(args.setting or "e", loss), seed=args.seed or 0)
    print(report)
    return 0 if report.passed else 1


def cmd_ablate(args) -> int:
    cfg, rest = _configs(args)
    ds = load_dataset(rest, cfg.orig_side)
    grid = [(s, k) for s in args.settings.split(",") for k in args.losses.split(",")]
    out = Path(args.out or "runs/ablation")
    out.mkdir(parents=True, exist_ok=True)
    cells = harness.ablate(grid, cfg, ds, seeds=tuple(range(args.seeds)), out_csv=out / "ablation.csv")
    print((out / "ablation.csv").read_text(encoding="utf-8"), end="")
    return 0 if all(c.status == "ok" for c in cells) else 1


def cmd_diffmap(args) -> int:
    run = Path(args.run)
    values = harness.parse_config_text((run / "config.txt").read_text(encoding="utf-8"))
    cfg, rest = harness.config_from_mapping(values)
    ds = load_dataset(rest, cfg.orig_side)
    model, _ = harness.load_model(cfg, args.checkpoint or run / "best.nrkp")
    images, _, _, ids = ds.arrays(args.split)
    files = harness.export_diffmaps(model, images[:args.count], ids[:args.count], args.out or run / "diffmaps")
    print(f"wrote {len(files)} files")
    return 0


def cmd_synth(args) -> int:
    _, rest = _configs(args)
    if args.seed is not None:
        rest["synth_seed"] = str(args.seed)
    ds = synth_generate(synth_config(rest))
    out = Path(args.out or "data/synth")
    out.mkdir(parents=True, exist_ok=True)
    write_ferplus_csv(ds, out / "labels.csv", out / "images" if args.pgm else None)
    print(f"wrote {len(ds.samples)} samples to {out}; train counts {ds.class_counts('train')}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="nrk", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, data=True):
        sp.add_argument("--config")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--setting", choices=sorted(harness.SETTINGS))
        sp.add_argument("--loss", choices=["ce", "pdls", "fpdls"])
        sp.add_argument("--alpha", type=float)
        sp.add_argument("--gamma", type=float)
        sp.add_argument("--epochs", type=int)
        sp.add_argument("--lr", type=float)
        sp.add_argument("--lr_decay_factor", type=float)
        sp.add_argument("--batch_size", type=int)
        sp.add_argument("--sr_mode", choices=["bicubic_upsample", "frozen_cnn"])
        sp.add_argument("--sr_weights")
        sp.add_argument("--out")
        if data:
            sp.add_argument("--data", help="'synth' or a labels CSV path")
            sp.add_argument("--images", help="directory of PGM images for a CSV without a pixels column")

    common(sub.add_parser("train", help="train resizer + classifier"))
    sp = sub.add_parser("eval", help="evaluate a checkpoint")
    sp.add_argument("--out", required=True, help="run directory written by train")
    sp.add_argument("--checkpoint")
    sp.add_argument("--split", default="val", choices=["train", "val", "test"])
    common(sub.add_parser("gradcheck", help="finite-difference gradient check"), data=False)
    sp = sub.add_parser("ablate", help="run a setting x loss grid")
    common(sp)
    sp.add_argument("--settings", default="a,d")
    sp.add_argument("--losses", default="ce,fpdls")
    sp.add_argument("--seeds", type=int, default=3)
    sp = sub.add_parser("diffmap", help="export bilinear / neural / difference PGMs")
    sp.add_argument("--run", required=True, help="run directory written by train")
    sp.add_argument("--checkpoint")
    sp.add_argument("--out")
    sp.add_argument("--split", default="val")
    sp.add_argument("--count", type=int, default=8)
    sp = sub.add_parser("synth", help="write a synthetic dataset as CSV")
    common(sp, data=False)
    sp.add_argument("--pgm", action="store_true", help="write PGM files instead of an inline pixels column")
    return p


COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
    "ablate": cmd_ablate,
    "diffmap": cmd_diffmap,
    "synth": cmd_synth,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    _limit_threads()
    np.seterr(over="ignore", under="ignore")
    return COMMANDS[args.command](args)


if __name__ == "__main__":
    sys.exit(main())
