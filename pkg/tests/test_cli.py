import json

import pytest

from aweunet.cli import main
from aweunet.config import ExperimentConfig, dump_config, load_config, parse_config_text
from aweunet.errors import ConfigError


class TestConfig:
    def test_defaults(self):
        cfg = ExperimentConfig()
        assert cfg.optimizer.lr == 2e-4 and cfg.optimizer.beta1 == 0.9 and cfg.optimizer.beta2 == 0.999
        assert cfg.model.input_size == 224 and cfg.loss_weights == (1.0, 1.0)
        assert cfg.threshold == 0.5 and cfg.pad_fraction == 0.10

    def test_parse_and_dump_roundtrip(self):
        cfg = parse_config_text("""
            # comment
            model.base_width = 8
            loss_weights = 1.0, 0.5
            augment = false
            phantom.nodule_radius_range = 7, 9
        """)
        assert cfg.model.base_width == 8 and cfg.loss_weights == (1.0, 0.5)
        assert cfg.augment is False and cfg.phantom.nodule_radius_range == (7.0, 9.0)
        assert parse_config_text(dump_config(cfg)) == cfg

    @pytest.mark.parametrize("text", ["nope = 1", "model = 3", "epochs = many", "augment = maybe",
                                      "loss_weights = 1", "just words"])
    def test_rejects(self, text):
        with pytest.raises(ConfigError):
            parse_config_text(text)

    def test_validation_on_load(self, tmp_path):
        p = tmp_path / "c.txt"
        p.write_text("model.input_size = 100\n")
        with pytest.raises(ConfigError):
            load_config(p)
        assert load_config(p, {"model.input_size": "64"}).model.input_size == 64


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    return code, capsys.readouterr()


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    return tmp_path_factory.mktemp("cli")


TINY = ["--set", "model.base_width=4", "--set", "model.input_size=16"]


class TestCommands:
    def test_help_lists_keys(self, capsys):
        with pytest.raises(SystemExit) as exc:
            main(["--help"])
        assert exc.value.code == 0
        out = capsys.readouterr().out
        assert "model.base_width" in out and "optimizer.lr" in out

    def test_pipeline(self, capsys, workdir):
        data, run_dir = workdir / "data", workdir / "run"
        code, out = run(capsys, "synth", "--set", "phantom.n_images=10", "--seed", 3, "--out", data)
        assert code == 0 and json.loads(out.out) == {"root": str(data), "train": 7, "val": 1, "test": 2}

        code, out = run(capsys, "train", *TINY, "--set", f"dataset_root={data}", "--set", "epochs=1",
                        "--out", run_dir)
        assert code == 0 and (run_dir / "best.pt").exists()

        code, out = run(capsys, "eval", "--set", f"dataset_root={data}", "--checkpoint", run_dir / "best.pt",
                        "--split", "test", "--out", workdir / "eval")
        assert code == 0 and set(json.loads(out.out)) >= {"dsc", "iou", "auc_roc"}
        assert (workdir / "eval" / "metrics.json").exists()

        code, out = run(capsys, "predict", "--set", f"dataset_root={data}", "--checkpoint",
                        run_dir / "best.pt", "--out", workdir / "pred")
        assert code == 0
        assert set(json.loads(out.out).values()) <= {"ok", "no_rois"}
        header = (workdir / "pred" / "detections.csv").read_text().splitlines()[0]
        assert header == "image,x,y,w,h,score"

        code, out = run(capsys, "detect-eval", "--set", f"dataset_root={data}", "--out", workdir / "det")
        assert code == 0 and 0.0 <= json.loads(out.out)["ap"] <= 1.0

        # detections produced by one run are accepted as an external detector
        csv_path = workdir / "det" / "detections.csv"
        code, out = run(capsys, "detect-eval", "--set", f"dataset_root={data}", "--detector",
                        f"csv:{csv_path}", "--out", workdir / "det2")
        assert code == 0
        assert (workdir / "det2" / "metrics.json").read_text() == (workdir / "det" / "metrics.json").read_text()

    def test_contract_violation_exit_2(self, capsys, workdir):
        code, out = run(capsys, "train", "--set", "model.input_size=100", "--out", workdir / "x")
        assert code == 2 and "input_size" in out.err
        code, out = run(capsys, "train", "--set", "epochs", "--out", workdir / "x")
        assert code == 2
        code, _ = run(capsys, "predict", "--detector", "magic", "--checkpoint", workdir / "missing.pt")
        assert code == 2

    def test_io_error_exit_3(self, capsys, workdir):
        code, out = run(capsys, "eval", "--checkpoint", workdir / "missing.pt",
                        "--set", f"dataset_root={workdir / 'nothing'}")
        assert code == 3 and out.err
        code, _ = run(capsys, "train", *TINY, "--set", f"dataset_root={workdir / 'nothing'}")
        assert code == 3
