"""MSS + exp-log Dice against a single-head U-Net with plain Dice, over several seeds.

    python scripts/ablation.py --workdir runs/ablation --epochs 3 --seeds 0 1 2
"""
import argparse
import csv
import dataclasses
from pathlib import Path

from threadpoolctl import threadpool_limits

from mssunet import config as C
from mssunet import experiment


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--workdir", required=True)
    ap.add_argument("--epochs", type=int, default=10)
    ap.add_argument("--iterations", type=int, default=100)
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--tta", choices=("mirror", "none"), default="mirror")
    args = ap.parse_args()

    work = Path(args.workdir)
    cfg = C.apply_profile(C.Config(), "desk")
    cfg = dataclasses.replace(cfg, infer=dataclasses.replace(cfg.infer, tta=args.tta))
    experiment.make_data(cfg, work, 20, 5)
    rows = []
    with threadpool_limits(limits=1):
        for seed in args.seeds:
            c = dataclasses.replace(cfg, train=dataclasses.replace(
                cfg.train, epochs=args.epochs, iterations_per_epoch=args.iterations, seed=seed))
            for name, variant in (("mss_explog", c), ("classic_plain", experiment.ablation_config(c))):
                res = experiment.run(variant, work / f"{name}_{seed}", data_dir=work)
                rows.append({"seed": seed, "variant": name, "kidney_dice": res.kidney_dice,
                             "tumor_dice": res.tumor_dice})
                print(f"seed {seed} {name:14s} kidney {res.kidney_dice:.4f} tumor {res.tumor_dice:.4f}",
                      flush=True)
    with open(work / "ablation.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)


if __name__ == "__main__":
    main()
