"""Setting a vs d and FPDLS vs CE on the imbalanced synthetic set, three seeds each.

Uses the same budget as the acceptance tests (10 epochs, lr 1e-3, quartered
after epoch 5) and prints final-epoch val accuracy and mean recall.
"""
import argparse
import time

import numpy as np

from nrk.data import SynthConfig, synth_generate
from nrk.harness import TrainConfig, train
from nrk.loss import LossConfig

IMBALANCE = [200, 200, 200, 200, 100, 50, 25, 25]


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--decay_every", type=int, default=5)
    p.add_argument("--seeds", type=int, default=3)
    p.add_argument("--cells", default="a:fpdls,d:fpdls,d:ce")
    a = p.parse_args()
    ds = synth_generate(SynthConfig(samples_per_class=IMBALANCE, confusion_temperature=0.5, seed=0))
    print("setting,loss,seed,val_acc,val_mean_recall,seconds")
    summary = {}
    for cell in a.cells.split(","):
        setting, kind = cell.split(":")
        for seed in range(a.seeds):
            cfg = TrainConfig(epochs=a.epochs, lr=a.lr, lr_decay_every=a.decay_every, setting=setting, seed=seed,
                              loss=LossConfig(kind))
            t0 = time.perf_counter()
            final = [r for r in train(cfg, ds).rows if r.split == "val"][-1]
            print(f"{setting},{kind},{seed},{final.acc:.4f},{final.mean_recall:.4f},{time.perf_counter() - t0:.0f}",
                  flush=True)
            summary.setdefault(cell, []).append((final.acc, final.mean_recall))
    for cell, v in summary.items():
        acc, mr = np.mean(v, axis=0)
        print(f"# {cell}: mean acc {acc:.4f}, mean recall {mr:.4f}")


if __name__ == "__main__":
    main()
