import json
import subprocess
import sys
from pathlib import Path

import pytest

from onebit_lamb.cli import main

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


@pytest.mark.parametrize("ratio, expected", [("0.167", 4.565), ("0.193", 4.108), ("1", 1.0)])
def test_volume(capsys, ratio, expected):
    assert main(["volume", "--warmup-ratio", ratio, "--baseline-bits", "16"]) == 0
    assert float(capsys.readouterr().out) == pytest.approx(expected, abs=1e-3)


def test_volume_rejects_bad_ratio(capsys):
    assert main(["volume", "--warmup-ratio", "2"]) == 2
    assert "error" in capsys.readouterr().err


def _short_config(tmp_path, name, **extra):
    text = (CONFIGS / name).read_text() + "total_steps = 60\nwarmup_steps = 20\n"
    text += "".join(f"{k} = {v}\n" for k, v in extra.items())
    path = tmp_path / name
    path.write_text(text)
    return path


def test_train_prints_summary(tmp_path, capsys):
    cfg = _short_config(tmp_path, "quadratic_onebit.cfg")
    assert main(["train", "--config", str(cfg), "--output-dir", str(tmp_path / "out")]) == 0
    summary = json.loads(capsys.readouterr().out)
    assert summary["steps"] == 60 and summary["compressed_collectives"] == 40
    assert (tmp_path / "out" / "metrics.csv").exists()


def test_compare_prints_table(tmp_path, capsys):
    paths = [_short_config(tmp_path, n) for n in ("quadratic_onebit.cfg", "quadratic_lamb.cfg")]
    assert main(["compare", "--configs", *map(str, paths)]) == 0
    out = capsys.readouterr().out
    assert "quadratic/onebit_lamb" in out and "quadratic/lamb" in out


def test_trace_coefficients(tmp_path, capsys):
    cfg = _short_config(tmp_path, "drift_onebit.cfg")
    assert main(["trace-coefficients", "--config", str(cfg), "--output-dir", str(tmp_path)]) == 0
    out = capsys.readouterr().out
    assert out.count(": ok") == 4
    assert (tmp_path / "trace_q3.csv").exists()


def test_unknown_key_is_reported(tmp_path, capsys):
    bad = tmp_path / "bad.cfg"
    bad.write_text("colour = blue\n")
    assert main(["train", "--config", str(bad)]) == 2
    assert "unknown key" in capsys.readouterr().err


def test_module_entry_point():
    out = subprocess.run([sys.executable, "-m", "onebit_lamb", "volume", "--warmup-ratio", "0.167"],
                         capture_output=True, text=True, check=True).stdout
    assert out.strip() == "4.565"
