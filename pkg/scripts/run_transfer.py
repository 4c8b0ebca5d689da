"""Two-source to one-target transfer with frozen global weights.

Prints the target test MAE per fine-tune budget for every seed.
"""
import argparse

from embreg.config import parse_budget
from embreg.experiments import DatasetSpec, ModelSpec, TransferPlan, budget_label, run_transfer, write_csv
from embreg.training import TrainConfig


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", default="0,1,2,3,4")
    ap.add_argument("--budgets", default="zero-shot,2d,14d")
    ap.add_argument("--source-epochs", type=int, default=30)
    ap.add_argument("--finetune-epochs", type=int, default=100)
    ap.add_argument("--out")
    args = ap.parse_args()

    budgets = tuple(parse_budget(b) for b in args.budgets.split(","))
    mk = lambda s: DatasetSpec(profile="graph_diffusion", n_series=20, n_steps=1500, seed=s, name=f"syn{s}")
    rows = []
    for seed in (int(s) for s in args.seeds.split(",")):
        plan = TransferPlan(
            sources=(mk(100 + 3 * seed), mk(101 + 3 * seed)), target=mk(102 + 3 * seed), budgets=budgets,
            model=ModelSpec("STGNN-MEAN", d_h=16, d_e=8),
            source_train=TrainConfig(learning_rate=0.005, max_epochs=args.source_epochs, max_batches_per_epoch=10),
            finetune_train=TrainConfig(learning_rate=0.01, max_epochs=args.finetune_epochs,
                                       max_batches_per_epoch=5, early_stop_patience=min(20, args.finetune_epochs)),
            seed=seed)
        res = run_transfer(plan)
        cells = "  ".join(f"{budget_label(b)} {res.table[budget_label(b)]:.4f}" for b in budgets)
        print(f"seed {seed}: {cells}  frozen={res.frozen}", flush=True)
        rows.extend(res.rows)
    if args.out:
        write_csv(rows, args.out)


if __name__ == "__main__":
    main()
