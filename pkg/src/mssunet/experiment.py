"""End-to-end phantom experiment: generate, preprocess, train, infer,
postprocess, evaluate. Used by the scripts and the acceptance tests."""
from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass
from pathlib import Path

from . import pipeline as P
from .config import Config
from .nn.checkpoint import save_checkpoint
from .nn.train import write_history_csv
from .phantom import generate_cohort

log = logging.getLogger(__name__)

TEST_START = 1000  # test phantoms use indices far from the training ones


@dataclass
class ExperimentResult:
    summary: dict
    reports: list
    history: list
    workdir: Path

    @property
    def kidney_dice(self) -> float:
        return self.summary["kidney"]["dice"]["mean"]

    @property
    def tumor_dice(self) -> float:
        return self.summary["tumor"]["dice"]["mean"]

    def path(self, name: str) -> Path:
        return self.workdir / name


def make_data(cfg: Config, workdir, n_train: int, n_test: int) -> None:
    work = Path(workdir)
    generate_cohort(cfg.phantom, n_train, work / "raw_train")
    generate_cohort(cfg.phantom, n_test, work / "raw_test", start_index=TEST_START)


def run(cfg: Config, workdir, n_train: int = 20, n_test: int = 5, on_epoch=None,
        data_dir=None) -> ExperimentResult:
    """Run the whole chain in ``workdir``; everything it writes stays below it.

    With ``data_dir`` the phantoms are read from its ``raw_train`` and
    ``raw_test`` instead of being generated into ``workdir``.
    """
    work = Path(workdir)
    work.mkdir(parents=True, exist_ok=True)
    data = work if data_dir is None else Path(data_dir)
    if data_dir is None:
        make_data(cfg, work, n_train, n_test)
    stats = P.preprocess_dir(cfg, data / "raw_train", work / "pp_train")
    stats.to_json(work / "stats.json")
    result = P.train_from_dir(cfg, work / "pp_train", on_epoch=on_epoch)
    save_checkpoint(result.net, work / "net.ckpt", P.checkpoint_meta(cfg, stats))
    write_history_csv(result.history, work / "history.csv")
    P.infer_dir(result.net, cfg, stats, data / "raw_test", work / "pred")
    P.postprocess_dir(work / "pred", work / "post", cfg.postprocess.connectivity,
                      cfg.postprocess.second_kidney_ratio, work / "audit.json")
    reports, summary = P.evaluate_dirs(work / "post", data / "raw_test", work / "report.csv",
                                       summary_out=work / "summary.json")
    return ExperimentResult(summary, reports, result.history, work)


def ablation_config(cfg: Config) -> Config:
    """Classic single-head U-Net trained with 1 - SD in place of the exp-log term."""
    return dataclasses.replace(
        cfg,
        net=dataclasses.replace(cfg.net, deep_supervision=False),
        loss=dataclasses.replace(cfg.loss, plain_dice=True),
    )
