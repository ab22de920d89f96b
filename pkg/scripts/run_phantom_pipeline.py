"""Phantom experiment: generate data, train, infer, postprocess, evaluate.

    python scripts/run_phantom_pipeline.py --workdir runs/desk --epochs 10
"""
import argparse
import dataclasses
import logging
import time

from threadpoolctl import threadpool_limits

from mssunet import config as C
from mssunet import experiment
from mssunet.metrics import format_table


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--workdir", required=True)
    ap.add_argument("--config", help="base config JSON (defaults otherwise)")
    ap.add_argument("--profile", default="desk", choices=sorted(C.PROFILES))
    ap.add_argument("--epochs", type=int, default=10)
    ap.add_argument("--iterations", type=int, default=100)
    ap.add_argument("--seed", type=int, default=0, help="training seed")
    ap.add_argument("--n-train", type=int, default=20)
    ap.add_argument("--n-test", type=int, default=5)
    ap.add_argument("--tta", choices=("mirror", "none"))
    ap.add_argument("--ablation", action="store_true", help="single head, plain Dice term")
    ap.add_argument("--threads", type=int, default=1)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    cfg = C.load(args.config) if args.config else C.Config()
    cfg = C.apply_profile(cfg, args.profile)
    cfg = dataclasses.replace(cfg, train=dataclasses.replace(
        cfg.train, epochs=args.epochs, iterations_per_epoch=args.iterations, seed=args.seed))
    if args.tta:
        cfg = dataclasses.replace(cfg, infer=dataclasses.replace(cfg.infer, tta=args.tta))
    if args.ablation:
        cfg = experiment.ablation_config(cfg)

    t0 = time.perf_counter()
    with threadpool_limits(limits=args.threads):
        res = experiment.run(cfg, args.workdir, args.n_train, args.n_test,
                             on_epoch=lambda r: print(f"epoch {r['epoch']:3d} loss {r['train_loss']:.4f}",
                                                      flush=True))
    cfg.save(res.path("config.json"))
    print(format_table(res.summary))
    print(f"done in {(time.perf_counter() - t0) / 60:.1f} min; outputs in {res.workdir}")


if __name__ == "__main__":
    main()
