"""Validation learning curves of embedding variants; writes curves and mean/std bands."""
import argparse

from embreg.experiments import CurveVariant, DatasetSpec, ModelSpec, run_learning_curves
from embreg.regularizers import L2, Dropout, Forgetting, Variational
from embreg.training import TrainConfig


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", default="0,1,2")
    ap.add_argument("--epochs", type=int, default=40)
    ap.add_argument("--d-e", type=int, default=16)
    ap.add_argument("--out", default="runs/curves.csv")
    args = ap.parse_args()

    variants = [CurveVariant("no-emb", d_e=0), CurveVariant("emb"), CurveVariant("l2", (L2(),)),
                CurveVariant("dropout", (Dropout(),)), CurveVariant("variational", (Variational(),)),
                CurveVariant("forgetting", (Forgetting(period=5, warm_up=10, halt_epoch=30),))]
    ds = DatasetSpec(profile="local_offsets", n_series=20, n_steps=2000, seed=0)
    _, bands = run_learning_curves(ds, ModelSpec(d_e=args.d_e), variants, [int(s) for s in args.seeds.split(",")],
                                   TrainConfig(learning_rate=0.005, max_epochs=args.epochs,
                                               max_batches_per_epoch=10), args.out)
    last = {b["variant"]: b for b in bands}
    for name, b in last.items():
        print(f"{name:12s} final val MAE {b['mean']:.4f} ± {b['std']:.4f}")
    print(f"curves written to {args.out}")


if __name__ == "__main__":
    main()
