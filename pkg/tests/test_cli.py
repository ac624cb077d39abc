import json

import numpy as np
import pytest

from patchadapt.cli import main
from patchadapt.dataio import read_dataset
from patchadapt.uncertainty import read_split_manifest

TINY = "n_source = 12\nn_target = 12\nn_test = 6\niters = 2\npretrain_iters = 3\n"


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "c.cfg").write_text(TINY)
    assert main(["gen-data", "--config", str(root / "c.cfg"), "--out", str(root / "data")]) == 0
    return root


def run(work, *args):
    return main([a.format(w=work) for a in args])


def test_gen_data_layout(work):
    for split in ("source", "source_test", "target", "target_val", "target_test"):
        assert (work / "data" / split / "manifest.tsv").exists()
    assert all(s.label is None for s in read_dataset(work / "data" / "target"))


def test_stagewise_pipeline(work, capsys):
    common = ["--config", "{w}/c.cfg", "--data", "{w}/data"]
    assert run(work, "pretrain", *common, "--out", "{w}/pre.ckpt") == 0
    assert run(work, "rank", *common, "--checkpoint", "{w}/pre.ckpt", "--gamma", "0.5",
               "--out", "{w}/split.tsv") == 0
    ranked = read_split_manifest(work / "split.tsv")
    assert sum(r.bucket == "easy" for r in ranked) == len(ranked) // 2
    assert run(work, "adapt", *common, "--stage", "1a", "--checkpoint", "{w}/pre.ckpt",
               "--split", "{w}/split.tsv", "--out", "{w}/s1a.ckpt") == 0
    assert run(work, "adapt", *common, "--stage", "1b", "--checkpoint", "{w}/s1a.ckpt",
               "--split", "{w}/split.tsv", "--out", "{w}/s1b.ckpt") == 0
    assert run(work, "pseudo-label", *common, "--checkpoint", "{w}/s1b.ckpt", "--split",
               "{w}/split.tsv", "--out", "{w}/pseudo") == 0
    pseudo = read_dataset(work / "pseudo")
    assert len(pseudo) == len(ranked) // 2 and all(s.label is not None for s in pseudo)
    for stage, src, dst in (("2a", "s1b", "s2a"), ("2b", "s2a", "s2b")):
        assert run(work, "adapt", *common, "--stage", stage, "--checkpoint", f"{{w}}/{src}.ckpt",
                   "--split", "{w}/split.tsv", "--pseudo", "{w}/pseudo",
                   "--out", f"{{w}}/{dst}.ckpt") == 0
    capsys.readouterr()
    assert run(work, "eval", "--checkpoint", "{w}/s2b.ckpt", "--data", "{w}/data/target_test",
               "--out", "{w}/eval.json", "--png-dir", "{w}/png") == 0
    rep = json.loads((work / "eval.json").read_text())
    assert rep["checkpoint_stage"] == "stage2b" and rep["n_samples"] == 6
    from PIL import Image
    img = Image.open(sorted((work / "png").iterdir())[0])
    assert img.mode == "P" and img.size == (32, 32)
    assert np.asarray(img).max() < 6


def test_adapt_requires_inputs(work, capsys):
    assert run(work, "pretrain", "--config", "{w}/c.cfg", "--data", "{w}/data", "--out", "{w}/p.ckpt") == 0
    capsys.readouterr()
    assert run(work, "adapt", "--config", "{w}/c.cfg", "--data", "{w}/data", "--stage", "1a",
               "--checkpoint", "{w}/p.ckpt", "--out", "{w}/x.ckpt") != 0
    assert "--split" in capsys.readouterr().err


def test_run_is_deterministic_and_reports(work, capsys):
    for name, mode in (("r1", "canonical"), ("r2", "canonical"), ("r3", "reverse_both")):
        assert run(work, "run", "--config", "{w}/c.cfg", "--mode", mode, "--seed", "7",
                   "--out", f"{{w}}/{name}") == 0
    assert (work / "r1" / "report.json").read_bytes() == (work / "r2" / "report.json").read_bytes()
    for ck in (work / "r1" / "checkpoints").iterdir():
        assert ck.read_bytes() == (work / "r2" / "checkpoints" / ck.name).read_bytes()
    capsys.readouterr()
    assert run(work, "report", "{w}/r1", "{w}/r3/report.json", "--out", "{w}/table.tsv") == 0
    lines = capsys.readouterr().out.splitlines()
    assert len(lines) == 3
    assert lines[1].startswith("hard -> easy, D_E") and lines[2].startswith("easy -> hard, D_F")


@pytest.mark.parametrize("argv,needle", [
    (["frobnicate"], "invalid choice"),
    (["run", "--mode", "canonical", "--out", "x", "--bogus"], "unrecognized"),
    (["eval", "--checkpoint", "/nonexistent.ckpt", "--data", "/nonexistent"], "no such checkpoint"),
    (["report", "/nonexistent/report.json"], "no such report"),
    (["run", "--config", "/nonexistent.cfg", "--out", "x"], "nonexistent.cfg"),
])
def test_errors_exit_nonzero_with_message(argv, needle, capsys):
    assert main(argv) != 0
    assert needle in capsys.readouterr().err


def test_bad_gamma(work, capsys):
    assert run(work, "rank", "--data", "{w}/data", "--checkpoint", "{w}/p.ckpt", "--gamma", "1.5",
               "--out", "{w}/s.tsv") != 0
    assert "gamma" in capsys.readouterr().err


def test_pretrain_shows_domain_gap(tmp_path):
    # default benchmark and pretrain budget: source test beats target test
    assert main(["gen-data", "--seed", "0", "--out", str(tmp_path / "data")]) == 0
    assert main(["pretrain", "--data", str(tmp_path / "data"), "--out", str(tmp_path / "pre.ckpt")]) == 0
    miou = {}
    for split in ("source_test", "target_test"):
        assert main(["eval", "--checkpoint", str(tmp_path / "pre.ckpt"), "--data",
                     str(tmp_path / "data" / split), "--out", str(tmp_path / f"{split}.json")]) == 0
        miou[split] = json.loads((tmp_path / f"{split}.json").read_text())["test"]["miou"]
    assert miou["source_test"] > miou["target_test"]
