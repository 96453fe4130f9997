"""Fit the frozen_cnn SR stand-in on synthetic (degraded, clean) pairs and save it.

    python3 scripts/train_sr_standin.py --out sr.nrkp
    nrk train --sr_mode frozen_cnn --sr_weights sr.nrkp
"""
import argparse

from nrk import checkpoint
from nrk.data import degradation_pairs
from nrk.resizer import train_sr_standin


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--out", default="sr.nrkp")
    p.add_argument("--side", type=int, default=48, help="low-resolution side of the training pairs")
    p.add_argument("--pairs", type=int, default=256)
    p.add_argument("--steps", type=int, default=300)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--seed", type=int, default=0)
    a = p.parse_args()
    low, high = degradation_pairs(8, a.side, a.pairs, seed=a.seed)
    sr = train_sr_standin(low, high, steps=a.steps, lr=a.lr, seed=a.seed)
    checkpoint.save(a.out, sr.state())
    print(f"wrote {a.out} (sha256 {sr.digest()[:16]})")


if __name__ == "__main__":
    main()
