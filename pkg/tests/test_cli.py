import json

import pytest

from dynsky.cli import (
    EXIT_NUMERIC,
    EXIT_OK,
    EXIT_PRECONDITION,
    EXIT_USAGE,
    CliError,
    load_config,
    run,
)
from dynsky.sky_image import load_png

SPEC = {"resolution": 64, "seed": 4, "layers": [{"velocity": [2.0, 1.0], "coverage": 0.6}]}


def write_config(path, **extra):
    cfg = {"resolution": 64, "width_scale": 0.125, "substeps": 3, "keyframes": 2,
           "train": {"epochs": 3, "learning_rate": 1e-3}, "dataset": "data",
           "checkpoints": "ckpt", "train_fraction": 0.75}
    cfg.update(extra)
    path.write_text(json.dumps(cfg))
    return path


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("ws")
    (root / "spec.json").write_text(json.dumps(SPEC))
    assert run(["make-synthetic", "--spec", str(root / "spec.json"), "--frames", "8", "--out", str(root / "data")]) == 0
    cfg = write_config(root / "cfg.json")
    assert run(["train", "--config", str(cfg), "--role", "flownet"]) == EXIT_OK
    assert run(["train", "--config", str(cfg), "--role", "cloudnet"]) == EXIT_OK
    return root


class TestConfig:
    def test_defaults(self):
        cfg = load_config(None)
        assert cfg.resolution == 128 and cfg.substeps == 30

    def test_unknown_field(self, tmp_path):
        p = tmp_path / "c.json"
        p.write_text(json.dumps({"resolutoin": 64}))
        with pytest.raises(CliError, match="resolutoin"):
            load_config(p)

    def test_json_error_has_position(self, tmp_path):
        p = tmp_path / "c.json"
        p.write_text('{\n  "resolution": 64,\n}')
        with pytest.raises(CliError, match=r"c.json:3:1"):
            load_config(p)

    def test_relative_paths(self, tmp_path):
        p = write_config(tmp_path / "c.json")
        assert load_config(p).dataset == str(tmp_path / "data")

    def test_invalid_value(self, tmp_path):
        p = write_config(tmp_path / "c.json", substeps=4)
        with pytest.raises(CliError, match="invalid"):
            load_config(p)

    def test_home_env(self, monkeypatch, tmp_path):
        monkeypatch.setenv("DYNSKY_HOME", str(tmp_path))
        assert load_config(None).checkpoint_dir() == tmp_path / "checkpoints"


class TestCommands:
    def test_make_synthetic_layout(self, workspace):
        data = workspace / "data"
        assert len(list((data / "frames").glob("*.png"))) == 8
        assert len(list((data / "flow").glob("*.skfl"))) == 8
        assert json.loads((data / "sequence.json").read_text())["frames"] == 8

    def test_train_outputs(self, workspace):
        ck = workspace / "ckpt"
        lines = (ck / "flownet_loss.csv").read_text().splitlines()
        assert lines[0] == "epoch,total,mse" and len(lines) == 4
        assert (ck / "cloudnet.ckpt").is_file()

    def test_synthesize(self, workspace):
        out = workspace / "syn"
        code = run(["synthesize", "--config", str(workspace / "cfg.json"), "--input",
                    str(workspace / "data/frames/000000.png"), "--out", str(out)])
        assert code == EXIT_OK
        man = json.loads((out / "manifest.json").read_text())
        assert len(man["frames"]) == 2 * 3 + 1
        assert [f["index"] for f in man["frames"]] == list(range(7))
        for f in man["frames"]:
            assert (out / f["png"]).is_file() and (out / f["pfm"]).is_file()
        assert load_png(out / man["frames"][0]["png"]).width == 64

    def test_evaluate_perfect_stub(self, workspace, capsys):
        out = workspace / "eval_stub"
        assert run(["evaluate", "--test", str(workspace / "data"), "--perfect-stub", "--out", str(out)]) == 0
        report = json.loads((out / "report.json").read_text())
        assert report["mse"] == 0.0 and report["psnr"] == "inf"
        assert "PSNR" in capsys.readouterr().out

    def test_evaluate_models(self, workspace):
        out = workspace / "eval"
        assert run(["evaluate", "--config", str(workspace / "cfg.json"), "--test",
                    str(workspace / "data"), "--out", str(out)]) == 0
        report = json.loads((out / "report.json").read_text())
        assert report["frame_count"] == 7 and report["mse"] > 0

    def test_histogram(self, workspace):
        out = workspace / "hist"
        assert run(["histogram", "--real", str(workspace / "data"), "--generated",
                    str(workspace / "data"), "--bins", "0,0.5,1,2,4,8", "--out", str(out)]) == 0
        summary = json.loads((out / "histogram_summary.json").read_text())
        assert summary["mean_distance"] == 0.0
        assert len((out / "histogram.csv").read_text().splitlines()) == 1 + 7 * 5


class TestExitCodes:
    def test_cloudnet_without_flownet(self, workspace, tmp_path):
        cfg = write_config(tmp_path / "c.json", dataset=str(workspace / "data"))
        assert run(["train", "--config", str(cfg), "--role", "cloudnet"]) == EXIT_PRECONDITION

    def test_missing_dataset(self, tmp_path):
        cfg = write_config(tmp_path / "c.json")
        assert run(["train", "--config", str(cfg), "--role", "flownet"]) == EXIT_USAGE

    def test_resolution_mismatch(self, workspace, tmp_path):
        cfg = write_config(tmp_path / "c.json", resolution=32, dataset=str(workspace / "data"))
        assert run(["train", "--config", str(cfg), "--role", "flownet"]) == EXIT_PRECONDITION

    def test_divergence(self, workspace, tmp_path):
        cfg = write_config(tmp_path / "c.json", dataset=str(workspace / "data"),
                           train={"epochs": 2, "learning_rate": 1e30})
        assert run(["train", "--config", str(cfg), "--role", "flownet"]) == EXIT_NUMERIC

    def test_missing_checkpoint(self, workspace, tmp_path):
        code = run(["synthesize", "--checkpoints", str(tmp_path), "--input",
                    str(workspace / "data/frames/000000.png"), "--out", str(tmp_path / "o")])
        assert code == EXIT_USAGE

    def test_bad_spec(self, tmp_path):
        (tmp_path / "s.json").write_text("{")
        assert run(["make-synthetic", "--spec", str(tmp_path / "s.json"), "--frames", "3",
                    "--out", str(tmp_path / "o")]) == EXIT_USAGE

    def test_argparse_usage(self):
        with pytest.raises(SystemExit) as info:
            run(["train"])
        assert info.value.code == 2
