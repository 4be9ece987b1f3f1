import subprocess
import sys

import numpy as np
import pytest

from priormask import cli
from priormask import maskbranch as mb
from priormask import trainer as T
from priormask.config import load_config
from priormask.priors import load_bank
from priormask.synthdata import SplitSpec, load_dataset

TINY = "image_side = 64\nmax_level = 2\nmin_level = 0\nwidth = 4\nk = 3\nbatch = 2\nsteps = 2\n"


@pytest.fixture(scope="module")
def ws(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    (d / "tiny.cfg").write_text(TINY)
    cfg = str(d / "tiny.cfg")
    assert cli.main(["gen-data", "--config", cfg, "--seed", "7", "--scenes", "8", "--out", str(d / "train.bin")]) == 0
    assert cli.main(["gen-data", "--config", cfg, "--seed", "8", "--scenes", "4", "--out", str(d / "test.bin")]) == 0
    assert cli.main(["build-priors", "--config", cfg, "--data", str(d / "train.bin"), "--out", str(d / "bank.bin")]) == 0
    assert cli.main(["train", "--config", cfg, "--data", str(d / "train.bin"), "--bank", str(d / "bank.bin"),
                     "--out", str(d / "run")]) == 0
    return d, cfg


def test_gen_data_is_idempotent(tmp_path, ws):
    d, cfg = ws
    assert cli.main(["gen-data", "--config", cfg, "--seed", "7", "--scenes", "8", "--out", str(tmp_path / "x.bin")]) == 0
    assert (tmp_path / "x.bin").read_bytes() == (d / "train.bin").read_bytes()
    assert len(load_dataset(d / "train.bin")) == 8


def test_build_priors_counts(tmp_path, ws):
    d, cfg = ws
    assert load_bank(d / "bank.bin").total_priors() == 3
    out = tmp_path / "spec.bin"
    assert cli.main(["build-priors", "--config", cfg, "--data", str(d / "train.bin"), "--mode", "specific",
                     "--k", "1", "--out", str(out)]) == 0
    bank = load_bank(out)
    seen_present = {i.class_id for s in load_dataset(d / "train.bin") for i in s.instances} & SplitSpec.default().seen_mask_classes
    assert bank.total_priors() == len(seen_present) * 1


def test_class_specific_twelve_priors(tmp_path):
    (tmp_path / "c.cfg").write_text(TINY)
    cfg = str(tmp_path / "c.cfg")
    assert cli.main(["gen-data", "--config", cfg, "--seed", "1", "--scenes", "40", "--out", str(tmp_path / "d.bin")]) == 0
    assert cli.main(["build-priors", "--config", cfg, "--data", str(tmp_path / "d.bin"), "--mode", "specific",
                     "--k", "4", "--out", str(tmp_path / "b.bin")]) == 0
    assert load_bank(tmp_path / "b.bin").total_priors() == 12


def test_train_zero_steps_gives_init(tmp_path, ws):
    d, cfg = ws
    assert cli.main(["train", "--config", cfg, "--steps", "0", "--data", str(d / "train.bin"),
                     "--bank", str(d / "bank.bin"), "--out", str(tmp_path)]) == 0
    tcfg = load_config(cfg).train
    assert mb.load_checkpoint(tmp_path / "checkpoint.bin") == mb.HeadWeights.init(4, 3, tcfg.patch_side, 0)
    assert (tmp_path / "history.csv").read_text() == "step,L_prior,L_coarse,L_fine\n"


def test_eval_default_equals_perturb_none(tmp_path, ws, capsys):
    d, cfg = ws
    base = ["eval", "--config", cfg, "--data", str(d / "test.bin"), "--checkpoint", str(d / "run/checkpoint.bin"),
            "--bank", str(d / "bank.bin")]
    assert cli.main(base + ["--out", str(tmp_path / "a")]) == 0
    assert cli.main(base + ["--perturb", "none", "--out", str(tmp_path / "b")]) == 0
    assert (tmp_path / "a/reports.csv").read_bytes() == (tmp_path / "b/reports.csv").read_bytes()
    assert "IoU" in capsys.readouterr().out


def test_ablate_matches_harness(tmp_path, ws):
    d, cfg = ws
    assert cli.main(["ablate", "--config", cfg, "--data", str(d / "train.bin"), "--test-data", str(d / "test.bin"),
                     "--out", str(tmp_path)]) == 0
    rows = [l.split(",") for l in (tmp_path / "reports.csv").read_text().splitlines()[1:]]
    iou = {r[0]: float(r[4]) for r in rows if r[2] == "all" and r[3] == "iou"}
    assert set(iou) == {"neither", "embed-only", "shape-only", "both"}
    tcfg = load_config(cfg).train
    grid = T.run_ablation_grid(tcfg, load_dataset(d / "train.bin"), load_dataset(d / "test.bin"), SplitSpec.default())
    assert iou["both"] == pytest.approx(grid[(1, 1)].report.mean_iou, abs=1e-6)
    assert iou["neither"] == pytest.approx(grid[(0, 0)].report.mean_iou, abs=1e-6)


def test_export_viz(tmp_path, ws):
    d, cfg = ws
    out = tmp_path / "viz"
    args = ["export-viz", "--config", cfg, "--data", str(d / "test.bin"), "--checkpoint", str(d / "run/checkpoint.bin"),
            "--bank", str(d / "bank.bin"), "--limit", "2", "--out", str(out)]
    assert cli.main(args) == 0
    files = sorted(out.glob("*.pgm"))
    assert any(f.name == "prior_atlas.pgm" for f in files)
    for f in files:
        assert f.read_bytes().startswith(b"P5\n")
    tcfg = load_config(cfg).train
    scenes = load_dataset(d / "test.bin")[:2]
    preds = T.predict(mb.load_checkpoint(d / "run/checkpoint.bin"), scenes, load_bank(d / "bank.bin"), tcfg)
    for p in preds:
        fine = cli.read_pgm(out / f"s{p.scene_idx:04d}_i{p.inst_idx:02d}_fine.pgm")
        np.testing.assert_array_equal(fine >= 128, 1 / (1 + np.exp(-p.output.fine_logits)) >= 0.5)
        np.testing.assert_array_equal(T.fine_mask_to_image((fine >= 128).astype(np.uint8), p.spec, 64).astype(bool),
                                      p.mask)
    again = tmp_path / "viz2"
    assert cli.main(args[:-1] + [str(again)]) == 0
    for f in files:
        assert f.read_bytes() == (again / f.name).read_bytes()


def test_all_ones_prior_exports_255(tmp_path):
    cli.write_pgm(tmp_path / "p.pgm", np.ones((5, 7)))
    img = cli.read_pgm(tmp_path / "p.pgm")
    assert img.shape == (5, 7) and (img == 255).all()
    assert (tmp_path / "p.pgm").read_bytes().startswith(b"P5\n7 5\n255\n")


def test_missing_inputs_exit_1(tmp_path, ws, capsys):
    d, cfg = ws
    assert cli.main(["eval", "--config", cfg, "--data", str(d / "test.bin"), "--checkpoint",
                     str(tmp_path / "none.bin"), "--bank", str(d / "bank.bin"), "--out", str(tmp_path)]) == 1
    assert cli.main(["train", "--config", cfg, "--data", str(tmp_path / "none.bin"), "--out", str(tmp_path)]) == 1
    assert "error" in capsys.readouterr().err


def test_bad_args_exit_2(tmp_path, ws):
    d, cfg = ws
    with pytest.raises(SystemExit) as info:
        cli.main(["train", "--steps", "many"])
    assert info.value.code == 2
    assert cli.main(["train", "--config", cfg, "--set", "bogus=1", "--data", str(d / "train.bin")]) == 2
    assert cli.main(["sweep-data", "--config", cfg, "--data", str(d / "train.bin"), "--test-data",
                     str(d / "test.bin"), "--fractions", "2", "--out", str(tmp_path)]) == 2


@pytest.mark.parametrize("command", [None, "gen-data", "build-priors", "train", "eval", "ablate", "robustness",
                                     "sweep-data", "sweep-capacity", "export-viz"])
def test_help_exits_zero(command):
    argv = [command, "--help"] if command else ["--help"]
    with pytest.raises(SystemExit) as info:
        cli.main(argv)
    assert info.value.code == 0


def test_help_documents_global_flags(capsys):
    with pytest.raises(SystemExit):
        cli.main(["train", "--help"])
    text = capsys.readouterr().out
    for flag in ("--config", "--seed", "--out"):
        assert flag in text


def test_console_script_entry():
    proc = subprocess.run([sys.executable, "-m", "priormask.cli", "gen-data", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0 and "--scenes" in proc.stdout
