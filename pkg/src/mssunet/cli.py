"""Command-line entry point: ``mssunet <subcommand> ...``.

Each subcommand reads and writes only the paths it is given. Errors are
reported as one ``error: ...`` line on stderr with exit status 1 (2 for
usage errors, as argparse does).
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

from . import config as C
from . import pipeline as P
from .metrics import format_table
from .nn.checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .nn.train import write_history_csv
from .phantom import PlacementError, generate_cohort
from .preprocess import PreprocessStats
from .volume import VolumeFormatError

log = logging.getLogger("mssunet")


def _load_config(path) -> C.Config:
    return C.Config() if path is None else C.load(path)


def _stats_from(meta: dict) -> PreprocessStats | None:
    s = meta.get("stats")
    return None if s is None else PreprocessStats(**s)


# -- subcommands ---------------------------------------------------------------

def cmd_phantom_gen(args) -> int:
    cfg = _load_config(args.config)
    spec = cfg.phantom
    if args.seed is not None:
        spec = dataclasses.replace(spec, seed=args.seed)
    entries = generate_cohort(spec, args.count, args.out, start_index=args.start,
                              prefix=args.prefix)
    print(f"wrote {len(entries)} phantoms to {args.out}")
    return 0


def cmd_preprocess(args) -> int:
    cfg = _load_config(args.config)
    frozen = PreprocessStats.from_json(args.stats) if args.stats else None
    if frozen is None and args.stats_out is None:
        raise ValueError("--stats-out is required unless --stats supplies frozen statistics")
    stats = P.preprocess_dir(cfg, args.inp, args.out, frozen)
    if args.stats_out:
        stats.to_json(args.stats_out)
    print(f"preprocessed {args.inp} -> {args.out} "
          f"(clip [{stats.p_low:.4g}, {stats.p_high:.4g}], fg {stats.fg_mean:.4g} +- {stats.fg_std:.4g})")
    return 0


def _train_config(args) -> C.Config:
    cfg = _load_config(args.config)
    if args.profile:
        cfg = C.apply_profile(cfg, args.profile)
    net, loss, train = cfg.net, cfg.loss, cfg.train
    if args.no_mss:
        net = dataclasses.replace(net, deep_supervision=False)
    if args.plain_dice:
        loss = dataclasses.replace(loss, plain_dice=True)
    overrides = {k: v for k, v in (("seed", args.seed), ("epochs", args.epochs),
                                   ("iterations_per_epoch", args.iterations)) if v is not None}
    train = dataclasses.replace(train, **overrides)
    return dataclasses.replace(cfg, net=net, loss=loss, train=train)


def cmd_train(args) -> int:
    cfg = _train_config(args)
    stats = PreprocessStats.from_json(args.stats)

    def report(row):
        print(f"epoch {row['epoch']:3d}  loss {row['train_loss']:.5f}  lr {row['lr']:.2e}", flush=True)

    result = P.train_from_dir(cfg, args.data, on_epoch=report)
    save_checkpoint(result.net, args.checkpoint_out, P.checkpoint_meta(cfg, stats))
    write_history_csv(result.history, args.history_out)
    print(f"checkpoint {args.checkpoint_out}, history {args.history_out}"
          + (" (stopped on plateau)" if result.stopped_early else ""))
    return 0


def cmd_infer(args) -> int:
    net, meta = load_checkpoint(args.checkpoint)
    if args.config is not None:
        cfg = C.load(args.config)
    elif "config" in meta:
        cfg = C.from_dict(meta["config"])
    else:
        cfg = C.Config()
    if args.tta is not None:
        cfg = dataclasses.replace(cfg, infer=dataclasses.replace(cfg.infer, tta=args.tta))
    stats = PreprocessStats.from_json(args.stats) if args.stats else _stats_from(meta)
    if stats is None:
        raise ValueError("no preprocessing statistics: pass --stats")
    cases = P.infer_dir(net, cfg, stats, args.inp, args.out, args.save_probs)
    print(f"predicted {len(cases)} cases into {args.out}")
    return 0


def cmd_postprocess(args) -> int:
    cfg = _load_config(args.config)
    conn = args.connectivity or cfg.postprocess.connectivity
    audits = P.postprocess_dir(args.inp, args.out, conn, cfg.postprocess.second_kidney_ratio,
                               args.audit)
    dropped = sum(len(a.get(k, {}).get("dropped", [])) for a in audits.values()
                  for k in ("kidney", "tumor"))
    print(f"postprocessed {len(audits)} cases, dropped {dropped} components")
    return 0


def cmd_evaluate(args) -> int:
    summary_out = args.summary_out
    if summary_out is None and args.report_out is not None:
        summary_out = Path(args.report_out).with_suffix(".summary.json")
    _, summary = P.evaluate_dirs(args.pred, args.truth, args.report_out, args.boxplot_out,
                                 summary_out)
    print(format_table(summary))
    return 0


# -- parser --------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="mssunet", description=__doc__.splitlines()[0])
    ap.add_argument("--threads", type=int, default=None,
                    help="cap BLAS/OpenMP threads (1 gives bit-reproducible runs)")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    ph = sub.add_parser("phantom", help="synthetic data")
    ph_sub = ph.add_subparsers(dest="phantom_command", required=True)
    g = ph_sub.add_parser("gen", help="generate phantom cases")
    g.add_argument("--config")
    g.add_argument("--out", required=True)
    g.add_argument("--count", type=int, required=True)
    g.add_argument("--start", type=int, default=0, help="index of the first case")
    g.add_argument("--prefix", default="case")
    g.add_argument("--seed", type=int, default=None, help="override phantom.seed")
    g.set_defaults(func=cmd_phantom_gen)

    p = sub.add_parser("preprocess", help="clip, normalise and resample a directory")
    p.add_argument("--config")
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--stats-out")
    p.add_argument("--stats", help="frozen statistics to apply instead of computing them")
    p.set_defaults(func=cmd_preprocess)

    t = sub.add_parser("train", help="train a network on preprocessed data")
    t.add_argument("--config")
    t.add_argument("--data", required=True)
    t.add_argument("--stats", required=True)
    t.add_argument("--checkpoint-out", required=True)
    t.add_argument("--history-out", required=True)
    t.add_argument("--profile", choices=sorted(C.PROFILES))
    t.add_argument("--no-mss", action="store_true", help="single full-resolution head")
    t.add_argument("--plain-dice", action="store_true", help="1 - SD instead of the exp-log term")
    t.add_argument("--seed", type=int)
    t.add_argument("--epochs", type=int)
    t.add_argument("--iterations", type=int, help="iterations per epoch")
    t.set_defaults(func=cmd_train)

    i = sub.add_parser("infer", help="sliding-window prediction")
    i.add_argument("--checkpoint", required=True)
    i.add_argument("--in", dest="inp", required=True)
    i.add_argument("--stats")
    i.add_argument("--out", required=True)
    i.add_argument("--config", help="override the config stored in the checkpoint")
    i.add_argument("--tta", choices=("mirror", "none"))
    i.add_argument("--save-probs", action="store_true")
    i.set_defaults(func=cmd_infer)

    q = sub.add_parser("postprocess", help="connected-component cleanup")
    q.add_argument("--config")
    q.add_argument("--in", dest="inp", required=True)
    q.add_argument("--out", required=True)
    q.add_argument("--connectivity", type=int, choices=(6, 26))
    q.add_argument("--audit")
    q.set_defaults(func=cmd_postprocess)

    e = sub.add_parser("evaluate", help="per-case metrics and cohort summary")
    e.add_argument("--pred", required=True)
    e.add_argument("--truth", required=True)
    e.add_argument("--report-out", required=True)
    e.add_argument("--summary-out")
    e.add_argument("--boxplot-out")
    e.set_defaults(func=cmd_evaluate)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.threads is not None:
            from threadpoolctl import threadpool_limits

            with threadpool_limits(limits=args.threads):
                return args.func(args)
        return args.func(args)
    except (C.ConfigError, CheckpointError, VolumeFormatError, PlacementError,
            FileNotFoundError, ValueError, KeyError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
