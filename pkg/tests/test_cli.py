import json
import subprocess
import sys

import numpy as np
import pytest

from lcanet import cli, config, pnm, training
from lcanet.data import load_dataset
from lcanet.evaluation import evaluate_dataset


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert cli.main(["gen-data", "--out", str(root / "train"), "--count", "8", "--size", "32", "--seed", "2"]) == 0
    cfg = root / "run.cfg"
    cfg.write_text(
        f"data_dir={root / 'train'}\nout_dir={root / 'run'}\n"
        "model.input_size=32,32\nmodel.stage_channels=4,4,8,8,8\nmodel.decoder_channels=4\n"
        "model.lcb.kernel_size=3\nloss.ohem_min_pixels=64\n"
        "optim.max_iter=10\noptim.batch_size=2\noptim.base_lr=0.01\n"
    )
    assert cli.main(["train", "--config", str(cfg)]) == 0
    return root


def test_gen_data_count_and_reproducibility(workspace, tmp_path):
    lines = (workspace / "train" / "manifest.txt").read_text().splitlines()
    assert len(lines) == 8
    assert len(list((workspace / "train" / "images").glob("*.ppm"))) == 8
    assert len(list((workspace / "train" / "masks").glob("*.pgm"))) == 8
    assert cli.main(["gen-data", "--out", str(tmp_path / "d"), "--count", "8", "--size", "32", "--seed", "2"]) == 0
    for p in (workspace / "train").rglob("*"):
        if p.is_file():
            assert p.read_bytes() == (tmp_path / "d" / p.relative_to(workspace / "train")).read_bytes()


def test_gen_data_rejects_bad_size(tmp_path, capsys):
    assert cli.main(["gen-data", "--out", str(tmp_path / "x"), "--size", "40"]) == 2
    assert "multiple of 32" in capsys.readouterr().err


def test_train_outputs(workspace):
    run = workspace / "run"
    rows = (run / "train_log.csv").read_text().splitlines()
    assert len(rows) == 11
    assert (run / "model.lcam").read_bytes()[:4] == b"LCAM"


def test_train_is_repeatable(workspace, tmp_path):
    assert cli.main(["train", "--config", str(workspace / "run.cfg"), "--out-dir", str(tmp_path / "again")]) == 0
    a = (workspace / "run" / "train_log.csv").read_text().splitlines()[:11]
    b = (tmp_path / "again" / "train_log.csv").read_text().splitlines()[:11]
    assert a == b


def test_train_config_errors(tmp_path, capsys):
    bad = tmp_path / "bad.cfg"
    bad.write_text("model.attention_kind=magic\n")
    assert cli.main(["train", "--config", str(bad)]) == 2
    assert "attention_kind" in capsys.readouterr().err
    assert cli.main(["train", "--config", str(tmp_path / "missing.cfg")]) == 2
    bad.write_text(f"data_dir={tmp_path / 'nothing'}\n")
    assert cli.main(["train", "--config", str(bad)]) == 2


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_train_numeric_failure_exit_code(workspace, tmp_path):
    cfg = tmp_path / "hot.cfg"
    cfg.write_text((workspace / "run.cfg").read_text() + f"optim.base_lr=1e6\noptim.max_iter=40\nout_dir={tmp_path / 'hot'}\n")
    assert cli.main(["train", "--config", str(cfg)]) == 3


def test_eval_report_matches_in_process(workspace, tmp_path):
    out = tmp_path / "report.json"
    model_path = workspace / "run" / "model.lcam"
    assert cli.main(["eval", "--model", str(model_path), "--data", str(workspace / "train"),
                     "--out", str(out)]) == 0
    report = json.loads(out.read_text())
    assert set(report) == {"max_f", "mae", "per_threshold_f", "n_images"}
    assert 0 <= report["max_f"] <= 1 and 0 <= report["mae"] <= 1 and report["n_images"] == 8
    cfg = config.load(workspace / "run" / "run.cfg", env={})
    model = training.load_model(model_path, cfg)
    direct = evaluate_dataset(model, load_dataset(workspace / "train"), cfg.augment.mean, cfg.optim.batch_size)
    assert report["max_f"] == direct.max_f and report["mae"] == direct.mae


def test_eval_ground_truth_as_prediction(workspace, tmp_path, capsys):
    out = tmp_path / "gt.json"
    assert cli.main(["eval", "--oracle-gt", "--data", str(workspace / "train"), "--out", str(out)]) == 0
    report = json.loads(out.read_text())
    assert report["max_f"] == 1.0 and report["mae"] == 0.0
    assert "maxF=1.0000" in capsys.readouterr().out


def test_eval_missing_inputs(workspace, tmp_path):
    assert cli.main(["eval", "--model", str(tmp_path / "none.lcam"), "--data", str(workspace / "train")]) == 2
    assert cli.main(["eval", "--model", str(workspace / "run" / "model.lcam"), "--data", str(tmp_path)]) == 2
    assert cli.main(["eval", "--data", str(workspace / "train")]) == 2


def test_eval_checkpoint_garbage(workspace, tmp_path):
    junk = tmp_path / "junk.lcam"
    junk.write_bytes(b"LCAMxx")
    assert cli.main(["eval", "--model", str(junk), "--data", str(workspace / "train"),
                     "--config", str(workspace / "run" / "run.cfg")]) == 2


def test_dump_attention(workspace, tmp_path):
    image = workspace / "train" / "images" / "00000.ppm"
    out = tmp_path / "maps"
    assert cli.main(["dump-attention", "--model", str(workspace / "run" / "model.lcam"),
                     "--image", str(image), "--out", str(out)]) == 0
    files = sorted(p.name for p in out.iterdir())
    assert files == ["acf_scale_0.1.pgm", "acf_scale_0.3.pgm", "acf_scale_0.5.pgm", "coarse.pgm", "refined.pgm"]
    # predictions come back at input size, attention maps at the size of the level they were computed on
    for name in ("coarse.pgm", "refined.pgm"):
        assert (out / name).read_bytes().startswith(b"P5\n32 32\n255\n")

    cfg = config.load(workspace / "run" / "run.cfg", env={})
    model = training.load_model(workspace / "run" / "model.lcam", cfg)
    from lcanet.data import subtract_mean
    from lcanet.tensor import Tensor, no_grad
    with no_grad():
        fwd = model(Tensor(subtract_mean(pnm.read(image), cfg.augment.mean)[None]))
    level = min(lvl for lvl, _ in fwd.attention)
    for s in (0.1, 0.3, 0.5):
        expected = fwd.attention[(level, s)][0, 0]
        saved = pnm.read(out / f"acf_scale_{s:g}.pgm")
        assert saved.shape == expected.shape
        assert np.abs(saved - np.clip(expected, 0.0, 1.0)).max() <= 0.5 / 255 + 1e-6


def test_dump_attention_missing_image(workspace, tmp_path):
    assert cli.main(["dump-attention", "--model", str(workspace / "run" / "model.lcam"),
                     "--image", str(tmp_path / "no.ppm"), "--out", str(tmp_path / "o")]) == 2


def test_ablate_cli(workspace, tmp_path, capsys):
    table = tmp_path / "table.csv"
    assert cli.main(["ablate", "--config", str(workspace / "run.cfg"), "--variants", "baseline",
                     "--out-dir", str(tmp_path / "abl"), "--out", str(table)]) == 0
    lines = table.read_text().splitlines()
    assert lines[0] == "variant,max_f,mae" and len(lines) == 2 and lines[1].startswith("baseline,")
    capsys.readouterr()
    assert cli.main(["ablate", "--config", str(workspace / "run.cfg"), "--variants", "grb,bogus"]) == 2
    err = capsys.readouterr().err
    assert "bogus" in err and "local_affinity" in err


def test_usage_errors():
    assert cli.main([]) == 2
    assert cli.main(["train"]) == 2
    assert cli.main(["--help"]) == 0


def test_console_entry_point_runs():
    proc = subprocess.run([sys.executable, "-m", "lcanet.cli", "gen-data", "--out", "/dev/null/x", "--size", "33"],
                          capture_output=True, text=True)
    assert proc.returncode == 2 and "lcanet:" in proc.stderr
