"""Degradation of a trained STGNN-MEAN when its embeddings are perturbed.

For each regularizer the model is trained once per seed, then evaluated with
noisy, rearranged, mean and resampled embedding tables.
"""
import argparse

import numpy as np

from embreg.experiments import DatasetSpec, ModelSpec, build, run_perturbation_analysis
from embreg.regularizers import Dropout, Forgetting, Variational
from embreg.training import TrainConfig, fit

VARIANTS = {"none": (), "dropout": (Dropout(),), "variational": (Variational(),),
            "forgetting": (Forgetting(period=5, warm_up=10, halt_epoch=30),)}


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", default="0,1,2,3,4")
    ap.add_argument("--epochs", type=int, default=40)
    ap.add_argument("--draws", type=int, default=3)
    args = ap.parse_args()

    data = DatasetSpec(profile="graph_diffusion", n_series=20, n_steps=1500, seed=0).prepare()
    spec = ModelSpec(family="STGNN-MEAN", d_h=16, d_e=16)
    kinds = ["noise", "rearranged", "mean", "sampled"]
    for name, regs in VARIANTS.items():
        deg: dict = {}
        for seed in (int(s) for s in args.seeds.split(",")):
            net, table = build(spec, data, seed, regs)
            fit(net, table, data, TrainConfig(learning_rate=0.005, max_epochs=args.epochs,
                                              max_batches_per_epoch=10, regularizers=regs, seed=seed))
            res = run_perturbation_analysis((net, table), data, kinds, (0.1, 0.5), range(args.draws), regs)
            for label, s in res.summary.items():
                if label != "baseline":
                    deg.setdefault(label, []).append(s["mean"] - res.baseline)
        cells = "  ".join(f"{k} {np.mean(v):+.3f}" for k, v in deg.items())
        print(f"{name:12s} degradation  {cells}", flush=True)


if __name__ == "__main__":
    main()
