from __future__ import annotations

import json

import numpy as np
import pytest

from c2gm.cli import main, resolve
from c2gm.images import load_png, save_png


@pytest.fixture(scope="module")
def store(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    code = main(["build-dataset", "--synthetic", "--source", str(root / "src"), "--store", str(root / "store"),
                 "--roots", "14/3/5", "--depth", "4", "--tile-px", "32"])
    assert code == 0
    return root / "store"


@pytest.fixture(scope="module")
def pyramid(store, tmp_path_factory):
    out = tmp_path_factory.mktemp("pyr")
    code = main(["cascade", "--mock", "--store", str(store), "--seed-level", "14", "--seed-col", "3",
                 "--seed-row", "5", "--n", "1", "--m", "4", "--latent-factor", "2", "--steps", "3",
                 "--threads", "2", "--out", str(out)])
    assert code == 0
    return out


def test_missing_command_is_usage_error(capsys):
    assert main([]) == 2


def test_unknown_flag_is_usage_error(capsys):
    assert main(["train", "--bogus"]) == 2


def test_config_precedence(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("# training overrides\nsteps = 5\nbatch-size = 4\nfixture = true\n")
    assert resolve(["train"]).steps is None
    ns = resolve(["train", "--config", str(cfg)])
    assert (ns.steps, ns.batch_size, ns.fixture) == (5, 4, True)
    assert resolve(["train", "--config", str(cfg), "--steps", "7"]).steps == 7


@pytest.mark.parametrize("text", ["nonsense = 1\n", "steps = many\n", "just words\n", "profile = giant\n"])
def test_bad_config_is_usage_error(tmp_path, capsys, text):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text(text)
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "x.ckpt")]) == 2


def test_missing_required_option(capsys):
    assert main(["evaluate", "--pred", "somewhere"]) == 2
    assert "--truth" in capsys.readouterr().err


def test_build_dataset_manifest(store):
    lines = (store / "manifest_2x.tsv").read_text().splitlines()
    assert sum(not line.startswith("#") for line in lines) == 1 + 4 + 16 + 64 + 256


def test_cascade_outputs(pyramid):
    counts = {z: len(list((pyramid / str(z)).glob("*.png"))) for z in range(15, 19)}
    assert counts == {15: 4, 16: 16, 17: 64, 18: 256}
    assert sorted(p.name for p in pyramid.glob("canvas_*.png")) == [f"canvas_{z}.png" for z in range(15, 19)]
    assert load_png(pyramid / "canvas_18.png").shape == (3, 512, 512)
    assert len((pyramid / "provenance.jsonl").read_text().splitlines()) == 340
    config = json.loads((pyramid / "run_config.json").read_text())
    assert config["m"] == 4 and config["mock"] is True


def test_cascade_missing_seed_exits_1(store, tmp_path, capsys):
    code = main(["cascade", "--mock", "--store", str(store), "--seed-level", "14", "--seed-col", "0",
                 "--out", str(tmp_path / "o")])
    assert code == 1
    assert "not found" in capsys.readouterr().err


def test_cascade_needs_one_generator(store, tmp_path, capsys):
    assert main(["cascade", "--store", str(store), "--seed-level", "14", "--out", str(tmp_path / "o")]) == 2


def test_stitch_reproduces_canvas(pyramid, tmp_path, capsys):
    out = tmp_path / "s.png"
    assert main(["stitch", "--tiles", str(pyramid / "16"), "--out", str(out)]) == 0
    assert np.array_equal(load_png(out), load_png(pyramid / "canvas_16.png"))


def test_stitch_reports_gap(tmp_path, capsys):
    for c, r in ((0, 0), (1, 1)):
        save_png(tmp_path / "t" / f"{c}_{r}.png", np.zeros((3, 4, 4)))
    assert main(["stitch", "--tiles", str(tmp_path / "t"), "--out", str(tmp_path / "s.png")]) == 1
    assert "0/0/1" in capsys.readouterr().err


def test_evaluate_identical(pyramid, tmp_path, capsys):
    out = tmp_path / "report.tsv"
    assert main(["evaluate", "--pred", str(pyramid / "15"), "--truth", str(pyramid / "15"), "--out", str(out)]) == 0
    header, row = out.read_text().splitlines()
    assert header == "level\tn\tpsnr\tssim\tfid_lite"
    cells = row.split("\t")
    assert cells[2] == "inf" and cells[3] == "1.0000" and float(cells[4]) < 1e-6


def test_evaluate_against_store(pyramid, store, capsys):
    assert main(["evaluate", "--pred", str(pyramid), "--truth", str(store), "--truth-store",
                 "--skip-levels", "14"]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert [line.split("\t")[0] for line in lines] == ["level", "15", "16", "17", "18", "all"]


def test_train_fixture_writes_run(tmp_path, capsys):
    ckpt = tmp_path / "m.ckpt"
    assert main(["train", "--fixture", "--steps", "2", "--batch-size", "2", "--out", str(ckpt)]) == 0
    meta = json.loads((tmp_path / "m.ckpt.json").read_text())
    assert meta["overrides"] == {"steps": 2, "batch_size": 2} and meta["pairs"] == 16
    assert (tmp_path / "m.log.tsv").read_text().startswith("step\tloss\tlr\twallclock_s\n")


def test_grad_check_subset(capsys):
    assert main(["grad-check", "--only", "conv2d,linear"]) == 0
    out = capsys.readouterr().out
    assert "conv2d" in out and "linear" in out


def test_grad_check_unknown_layer(capsys):
    assert main(["grad-check", "--only", "warp-drive"]) == 2


def test_selftest_quick(capsys):
    assert main(["selftest", "--quick"]) == 0
    out = capsys.readouterr().out
    assert "FAIL" not in out and out.rstrip().endswith("selftest passed")
