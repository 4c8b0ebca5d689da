"""Transductive benchmark: RNN with and without embeddings, under each regularizer.

    python scripts/run_transductive.py --seeds 0,1,2,3,4 --out runs/transductive.csv
"""
import argparse

from embreg.experiments import DatasetSpec, ModelSpec, run_transductive, write_csv
from embreg.regularizers import L1, L2, Clustering, Dropout, Forgetting, Variational
from embreg.training import TrainConfig

VARIANTS = {
    "no-emb": (0, ()),
    "emb": (None, ()),
    "l1": (None, (L1(),)),
    "l2": (None, (L2(),)),
    "clustering": (None, (Clustering(),)),
    "dropout": (None, (Dropout(),)),
    "variational": (None, (Variational(),)),
    "forgetting": (None, (Forgetting(period=5, warm_up=10, halt_epoch=30),)),
}


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--family", default="RNN")
    ap.add_argument("--profile", default="local_offsets")
    ap.add_argument("--seeds", default="0,1,2,3,4")
    ap.add_argument("--epochs", type=int, default=30)
    ap.add_argument("--batches", type=int, default=10)
    ap.add_argument("--d-e", type=int, default=8)
    ap.add_argument("--variants", default=",".join(VARIANTS))
    ap.add_argument("--out")
    args = ap.parse_args()

    seeds = [int(s) for s in args.seeds.split(",")]
    ds = DatasetSpec(profile=args.profile, n_series=20, n_steps=2000, seed=0)
    data = ds.prepare()
    train = TrainConfig(learning_rate=0.005, max_epochs=args.epochs, max_batches_per_epoch=args.batches)
    rows = []
    for name in args.variants.split(","):
        d_e, regs = VARIANTS[name]
        model = ModelSpec(family=args.family, d_e=args.d_e if d_e is None else d_e)
        res = run_transductive(ds, model, regs, seeds, train, data=data)
        s = res.summary["test_mae"]
        print(f"{name:12s} test MAE {s['mean']:.4f} ± {s['std']:.4f}  (n={s['n']})", flush=True)
        rows.extend({**r, "regularizer": name} for r in res.rows)
    if args.out:
        write_csv(rows, args.out)


if __name__ == "__main__":
    main()
