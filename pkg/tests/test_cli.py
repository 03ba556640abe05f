"""End-to-end command line stages on a tiny corpus and model."""

import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from nextscale.cli import main
from nextscale.model import VarModel
from nextscale.tokenizer import AutoencoderWeights
from nextscale.checkpoint import load_checkpoint

CORPUS = {"samples_per_class": 6, "subject_count": 3}
MODEL = {"width": 16, "blocks": 2, "heads": 2, "head_dim": 8, "ffn_hidden": 32}


def _write(path, obj) -> str:
    path.write_text(json.dumps(obj))
    return str(path)


def _rows(path) -> list[dict]:
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """Chained tokenizer -> prior -> tuned run shared by the stage tests."""
    root = tmp_path_factory.mktemp("cli")
    tok_out, var_out, ft_out = root / "tok", root / "var", root / "ft"

    cfg = _write(root / "tok.json", {"corpus": CORPUS, "tokenizer": {"steps": 60}})
    assert main(["pretrain-tokenizer", "--config", cfg, "--out", str(tok_out)]) == 0
    tok = str(tok_out / "tokenizer.varp")

    cfg = _write(
        root / "var.json",
        {
            "inputs": {"tokenizer": tok},
            "corpus": CORPUS,
            "model": MODEL,
            "pretrain": {"steps": 8},
        },
    )
    assert main(["pretrain-var", "--config", cfg, "--out", str(var_out)]) == 0
    prior = str(var_out / "prior.varp")

    cfg = _write(
        root / "ft.json",
        {
            "inputs": {"tokenizer": tok, "model": prior},
            "corpus": CORPUS,
            "finetune": {"steps": 4},
        },
    )
    assert main(["finetune", "--config", cfg, "--out", str(ft_out)]) == 0

    return {
        "root": root,
        "tok_out": tok_out, "var_out": var_out, "ft_out": ft_out,
        "tok": tok, "prior": prior, "tuned": str(ft_out / "tuned.varp"),
    }


def test_pretrain_tokenizer_stage(pipeline):
    weights = load_checkpoint(pipeline["tok"])
    assert isinstance(weights, AutoencoderWeights)
    rows = _rows(pipeline["tok_out"] / "tokenizer_train.csv")
    assert len(rows) == 60
    assert list(rows[0]) == ["step", "loss", "recon", "codebook", "commit"]
    assert all(np.isfinite(float(r["loss"])) for r in rows)
    assert float(rows[-1]["recon"]) < float(rows[0]["recon"])


def test_pretrain_var_stage(pipeline):
    model = load_checkpoint(pipeline["prior"])
    assert isinstance(model, VarModel)
    assert model.cfg.width == 16 and model.cfg.prompt_vocab == model.vocab.size
    rows = _rows(pipeline["var_out"] / "pretrain_train.csv")
    assert len(rows) == 8
    assert list(rows[0]) == ["step", "loss"] + [f"ce_scale_{k}" for k in (1, 2, 3, 4, 5)]


def test_finetune_stage_moves_only_unfrozen_roles(pipeline):
    prior = load_checkpoint(pipeline["prior"])
    tuned = load_checkpoint(pipeline["tuned"])
    rows = _rows(pipeline["ft_out"] / "finetune_train.csv")
    assert len(rows) == 4
    assert list(rows[0]) == ["step", "loss_wce", "loss_distill", "loss_total", "lr"]
    assert np.array_equal(
        prior.params["block0.sa.wq"].data, tuned.params["block0.sa.wq"].data
    )
    assert not np.array_equal(
        prior.params["block0.ca.wq"].data, tuned.params["block0.ca.wq"].data
    )


def test_sample_stage_is_deterministic(pipeline, tmp_path):
    cfg = _write(
        tmp_path / "s.json",
        {
            "inputs": {"tokenizer": pipeline["tok"], "model": pipeline["tuned"]},
            "sampler": {"top_k": 8},
            "sample": {"count": 2, "prompt": "a circle on dark"},
        },
    )
    for sub in ("a", "b"):
        assert main(["sample", "--config", cfg, "--out", str(tmp_path / sub)]) == 0
    for name in (
        "sample_000.ppm", "sample_000.json", "sample_000.tokens.csv",
        "sample_001.ppm", "sample_001.json", "sample_001.tokens.csv",
    ):
        a, b = (tmp_path / s / name for s in ("a", "b"))
        assert a.read_bytes() == b.read_bytes()

    side = json.loads((tmp_path / "a" / "sample_001.json").read_text())
    assert side["prompt"] == "a circle on dark"
    assert side["seed"] == 1 and side["top_k"] == 8
    assert len(side["per_scale_entropy"]) == 5
    grid = _rows(tmp_path / "a" / "sample_000.tokens.csv")
    assert len(grid) == 1 + 4 + 16 + 36 + 64
    assert [int(g["k"]) for g in grid[:2]] == [1, 2]


def test_analyze_weights_stage(pipeline, tmp_path):
    cfg = _write(
        tmp_path / "w.json",
        {"inputs": {"original": pipeline["prior"], "tuned": pipeline["tuned"]}},
    )
    out = tmp_path / "deep" / "nested" / "dir"
    assert main(["analyze-weights", "--config", cfg, "--out", str(out)]) == 0
    byrole = {
        r["role"]: float(r["ratio"])
        for r in _rows(out / "weight_report.csv")
        if r["block"] == "all"
    }
    assert byrole["SA"] == 0.0 and byrole["NORM"] == 0.0
    assert byrole["EMB"] == 0.0 and byrole["HEAD"] == 0.0
    assert byrole["CA"] > 0.0 and byrole["FFN"] > 0.0 and byrole["TEXT"] > 0.0


def test_analyze_scales_stage(pipeline, tmp_path):
    cfg = _write(
        tmp_path / "sc.json",
        {
            "inputs": {"tokenizer": pipeline["tok"]},
            "corpus": CORPUS,
            "scales": {"images": 8, "dumps": 1},
        },
    )
    assert main(["analyze-scales", "--config", cfg, "--out", str(tmp_path / "o")]) == 0
    rows = _rows(tmp_path / "o" / "corruption.csv")
    assert [int(r["k"]) for r in rows] == [0, 1, 2, 3, 4, 5]
    mse = [float(r["mse"]) for r in rows]
    assert mse[0] > mse[-1] >= 0.0
    for k in range(6):
        assert (tmp_path / "o" / f"corrupt_img0_k{k}.ppm").exists()
    assert not (tmp_path / "o" / "corrupt_img1_k0.ppm").exists()


def test_evaluate_stage(pipeline, tmp_path):
    cfg = _write(
        tmp_path / "e.json",
        {
            "inputs": {"tokenizer": pipeline["tok"], "model": pipeline["tuned"]},
            "corpus": CORPUS,
            "eval": {
                "subject_samples": 3,
                "class_samples": 3,
                "prompts": ["a square on light"],
            },
        },
    )
    assert main(["evaluate", "--config", cfg, "--out", str(tmp_path / "o")]) == 0
    rows = _rows(tmp_path / "o" / "eval_report.csv")
    assert [r["metric"] for r in rows[:3]] == ["fidelity", "pres", "div"]
    assert all(r["subject"] == "<S*> circle" for r in rows)
    assert {r["metric"] for r in rows[3:]} == {"fidelity", "div"}
    assert all(r["prompt"] == "a square on light" for r in rows[3:])
    for r in rows:
        v = float(r["value"])
        assert -1.0 <= v <= 2.0 and np.isfinite(v)


def test_selfcheck_passes(capsys):
    assert main(["selfcheck"]) == 0
    out = capsys.readouterr().out
    assert out.count(": ok") == 5
    assert "FAILED" not in out


def test_config_errors_exit_2(pipeline, tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text('{\n  "corpus": {},\n  "tokenizer": {\n    "stepz": 3\n  }\n}\n')
    rc = main(["pretrain-tokenizer", "--config", str(bad), "--out", str(tmp_path / "o")])
    assert rc == 2
    err = capsys.readouterr().err
    assert "bad.json:4" in err and "stepz" in err

    cfg = _write(
        tmp_path / "m.json",
        {"inputs": {"original": str(tmp_path / "ghost.varp"), "tuned": pipeline["tuned"]}},
    )
    assert main(["analyze-weights", "--config", cfg, "--out", str(tmp_path / "o")]) == 2
    assert "cannot read checkpoint" in capsys.readouterr().err


def test_wrong_checkpoint_kind_exits_2(pipeline, tmp_path, capsys):
    cfg = _write(
        tmp_path / "k.json",
        {
            "inputs": {"tokenizer": pipeline["tok"], "model": pipeline["tok"]},
            "sample": {"count": 1},
        },
    )
    assert main(["sample", "--config", cfg, "--out", str(tmp_path / "o")]) == 2
    assert "not a model checkpoint" in capsys.readouterr().err


@pytest.mark.filterwarnings("ignore::RuntimeWarning")  # divergence is the point
def test_numeric_divergence_exits_3(tmp_path, capsys):
    cfg = _write(
        tmp_path / "n.json",
        {"corpus": CORPUS, "tokenizer": {"steps": 3, "lr": 1e150}},
    )
    rc = main(["pretrain-tokenizer", "--config", cfg, "--out", str(tmp_path / "o")])
    assert rc == 3
    assert "numeric abort" in capsys.readouterr().err


def test_module_and_script_entry_points():
    r = subprocess.run(
        [sys.executable, "-m", "nextscale", "--help"],
        capture_output=True, text=True,
    )
    assert r.returncode == 0 and "selfcheck" in r.stdout
    r = subprocess.run(["nextscale", "--help"], capture_output=True, text=True)
    assert r.returncode == 0 and "pretrain-tokenizer" in r.stdout
