import csv
import json
import shutil
import subprocess
import sys

import pytest

from mssunet.cli import main
from mssunet.config import Config


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def chain(tmp_path_factory):
    """Phantoms -> preprocess -> short train -> infer -> postprocess -> evaluate."""
    d = tmp_path_factory.mktemp("chain")
    cfg = d / "cfg.json"
    Config().save(cfg)
    assert run("phantom", "gen", "--config", cfg, "--out", d / "raw", "--count", 3) == 0
    assert run("phantom", "gen", "--config", cfg, "--out", d / "test", "--count", 2, "--start", 1000) == 0
    assert run("preprocess", "--config", cfg, "--in", d / "raw", "--out", d / "pp",
               "--stats-out", d / "stats.json") == 0
    common = ["--config", cfg, "--data", d / "pp", "--stats", d / "stats.json", "--profile", "desk",
              "--epochs", 2, "--iterations", 2, "--seed", 3]
    assert run("train", *common, "--checkpoint-out", d / "net.ckpt", "--history-out", d / "h.csv") == 0
    assert run("train", *common, "--no-mss", "--plain-dice", "--checkpoint-out", d / "base.ckpt",
               "--history-out", d / "h_base.csv") == 0
    assert run("infer", "--checkpoint", d / "net.ckpt", "--in", d / "test", "--out", d / "pred",
               "--tta", "none", "--save-probs") == 0
    assert run("postprocess", "--in", d / "pred", "--out", d / "post", "--audit", d / "audit.json") == 0
    assert run("evaluate", "--pred", d / "post", "--truth", d / "test", "--report-out", d / "report.csv",
               "--boxplot-out", d / "box.svg") == 0
    return d


def test_chain_outputs(chain, capsys):
    rows = list(csv.DictReader(open(chain / "report.csv")))
    assert {r["case"] for r in rows} == {"case_01000", "case_01001"}
    assert {r["class"] for r in rows} == {"kidney", "tumor"}
    assert (chain / "report.summary.json").exists() and (chain / "box.svg").exists()
    assert sorted(p.name for p in (chain / "pred").iterdir() if p.name.endswith(".json")) == [
        "case_01000_pred.mvol.json", "case_01000_prob.mvol.json",
        "case_01001_pred.mvol.json", "case_01001_prob.mvol.json"]
    audit = json.loads((chain / "audit.json").read_text())
    assert set(audit) == {"case_01000", "case_01001"}
    header = open(chain / "h.csv").readline().strip()
    assert header == "epoch,train_loss,val_loss,mean_dice,lr"


def test_ablation_history_differs(chain):
    assert (chain / "h.csv").read_text() != (chain / "h_base.csv").read_text()


def test_infer_and_preprocess_are_idempotent(chain, tmp_path):
    assert run("infer", "--checkpoint", chain / "net.ckpt", "--in", chain / "test", "--out", tmp_path / "p2",
               "--tta", "none", "--save-probs") == 0
    for f in (chain / "pred").iterdir():
        assert (tmp_path / "p2" / f.name).read_bytes() == f.read_bytes()
    assert run("preprocess", "--in", chain / "raw", "--out", tmp_path / "pp2", "--stats",
               chain / "stats.json", "--config", chain / "cfg.json") == 0
    for f in (chain / "pp").iterdir():
        assert (tmp_path / "pp2" / f.name).read_bytes() == f.read_bytes()


def test_evaluate_truth_against_itself(chain, tmp_path, capsys):
    # headers name their payload file, so payloads keep their original names
    for f in (chain / "test").glob("*_seg.*"):
        shutil.copy(f, tmp_path / f.name)
    for f in (chain / "test").glob("*_seg.mvol.json"):
        shutil.copy(f, tmp_path / f.name.replace("_seg", "_pred"))
    assert run("evaluate", "--pred", tmp_path, "--truth", chain / "test", "--report-out",
               tmp_path / "r.csv") == 0
    rows = list(csv.DictReader(open(tmp_path / "r.csv")))
    assert all(float(r["dice"]) == 1.0 for r in rows)
    out = capsys.readouterr().out
    assert "Dice" in out and "1.000" in out


def test_errors_exit_nonzero_with_diagnostic(tmp_path, capsys):
    assert run("preprocess", "--in", tmp_path / "nope", "--out", tmp_path / "o",
               "--stats-out", tmp_path / "s.json") == 1
    assert "error:" in capsys.readouterr().err
    (tmp_path / "bad.json").write_text(json.dumps({"schema_version": 1, "net": {"levles": 3}}))
    assert run("phantom", "gen", "--config", tmp_path / "bad.json", "--out", tmp_path, "--count", 1) == 1
    assert "net.levles" in capsys.readouterr().err
    (tmp_path / "x.ckpt").write_bytes(b"garbage")
    assert run("infer", "--checkpoint", tmp_path / "x.ckpt", "--in", tmp_path, "--out", tmp_path) == 1
    assert "bad magic" in capsys.readouterr().err
    with pytest.raises(SystemExit) as exc:
        run("train", "--bogus")
    assert exc.value.code == 2


def test_module_entry_point():
    out = subprocess.run([sys.executable, "-m", "mssunet", "--help"], capture_output=True, text=True)
    assert out.returncode == 0 and "phantom" in out.stdout
