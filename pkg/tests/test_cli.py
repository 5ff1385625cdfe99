import csv
import json

import pytest

from conftest import TINY
from iuf.cli import main
from iuf.exceptions import NonFiniteLossError


def _sets(extra=()):
    args = []
    for k, v in {**TINY, **dict(extra)}.items():
        args += ["--set", f"{k}={v}"]
    return args


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli") / "run"
    assert main(["train", "--protocol", "3-1", "--seed", "7", "--out", str(out)] + _sets()) == 0
    return out


def test_train_writes_two_step_run(trained):
    assert (trained / "step_2" / "checkpoint" / "manifest.json").is_file()
    with open(trained / "metrics.csv") as fh:
        assert {r["step"] for r in csv.DictReader(fh)} == {"1", "2"}
    assert json.loads((trained / "manifest.json").read_text())["seed"] == 7


def test_eval_reproduces_rows_and_heatmaps(trained):
    before = (trained / "metrics.csv").read_bytes()
    pngs = sorted((trained / "heatmaps").rglob("*.png"))
    images = {p: p.read_bytes() for p in pngs}
    assert main(["eval", "--run", str(trained), "--step", "2"]) == 0
    assert (trained / "metrics.csv").read_bytes() == before
    assert all(p.read_bytes() == b for p, b in images.items())


def test_eval_step_beyond_last(trained, capsys):
    assert main(["eval", "--run", str(trained), "--step", "3"]) == 2
    assert "step 3" in capsys.readouterr().err


def test_eval_missing_checkpoint(trained, tmp_path):
    (tmp_path / "config.snapshot").write_text((trained / "config.snapshot").read_text())
    assert main(["eval", "--run", str(tmp_path), "--step", "1"]) == 2


def test_report_single_and_comparison(trained, tmp_path, capsys):
    summary = tmp_path / "summary.json"
    assert main(["report", str(trained), "--json", str(summary)]) == 0
    run = json.loads(summary.read_text())["runs"][0]
    assert {k for k in run if k.endswith(("_acc", "_fm"))} == {"pixel_acc", "pixel_fm", "image_acc", "image_fm"}

    ablated = tmp_path / "no_us"
    assert main(["train", "--protocol", "3-1", "--seed", "7", "--ablate", "us", "--out", str(ablated)]
                + _sets({"eval.heatmaps": "off"})) == 0
    with open(ablated / "losses.csv") as fh:
        assert {r["update_mode"] for r in csv.DictReader(fh)} == {"vanilla"}
    assert json.loads((ablated / "manifest.json").read_text())["components"]["us"] is False
    capsys.readouterr()
    assert main(["report", str(trained), str(ablated), "--json", str(summary)]) == 0
    table = capsys.readouterr().out
    assert "full [seed 7]" in table and "w/o US [seed 7]" in table
    assert [r["label"] for r in json.loads(summary.read_text())["runs"]] == ["full", "w/o US"]


def test_report_needs_runs():
    assert main(["report"]) == 2


def test_report_rejects_mixed_protocols(trained, tmp_path):
    other = tmp_path / "other"
    other.mkdir()
    text = (trained / "config.snapshot").read_text().replace("protocol=3-1", "protocol=2-2")
    (other / "config.snapshot").write_text(text)
    (other / "metrics.csv").write_text((trained / "metrics.csv").read_text())
    assert main(["report", str(trained), str(other), "--json", str(tmp_path / "s.json")]) == 2


def test_unknown_key_exits_2(tmp_path, capsys):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("seed=1\nloss.lambda7=3\n")
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "r")]) == 2
    assert "loss.lambda7" in capsys.readouterr().err


def test_bad_protocol_exits_2(tmp_path):
    assert main(["train", "--protocol", "9-9", "--out", str(tmp_path / "r")] + _sets()) == 2


def test_numeric_abort_exits_3(tmp_path, monkeypatch):
    def boom(*a, **k):
        raise NonFiniteLossError(1, 1, {"loss": float("nan")})

    monkeypatch.setattr("iuf.cli.run_incremental", boom)
    assert main(["train", "--out", str(tmp_path / "r")]) == 3


def test_default_output_root(tmp_path, monkeypatch):
    monkeypatch.setenv("IUF_OUT", str(tmp_path))
    assert main(["train", "--protocol", "4"] + _sets({"eval.heatmaps": "off", "train.epochs": 1})) == 0
    runs = list(tmp_path.iterdir())
    assert len(runs) == 1 and (runs[0] / "metrics.csv").is_file()
