import csv
import json
from dataclasses import replace

import numpy as np
import pytest
import torch

from aweunet.boxes import BoundingBox, Detection
from aweunet.config import ExperimentConfig
from aweunet.dataset import DatasetManifest
from aweunet.errors import ContractViolation
from aweunet.experiments import (Checkpoint, evaluate, evaluate_split, jitter_box, load_samples,
                                 make_phantoms, model_predictor, predict_pipeline, sample_arrays,
                                 train, write_evaluation, write_pipeline_outputs)
from aweunet.model import ModelConfig, build_model
from aweunet.phantoms import PhantomSpec

TINY = ModelConfig(base_width=4, input_size=16)


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("phantoms")
    return make_phantoms(PhantomSpec(n_images=10, seed=5), root)


def _config(**kw):
    base = ExperimentConfig(model=TINY, epochs=1, batch_size=4, augment=False)
    return replace(base, **kw)


def _oracle_predictor(manifest, split, size, pad=0.10):
    """Replays the ground-truth ROI masks in the order evaluation requests them."""
    queue = [sample_arrays(s, size, pad)[1].astype(np.float64)
             for s in load_samples(manifest, manifest.split(split))]

    def predict(patches):
        out = np.stack(queue[:len(patches)])
        del queue[:len(patches)]
        return out

    return predict


class TestCheckpoint:
    def test_roundtrip_bitwise(self, tmp_path):
        model = build_model(TINY, seed=4)
        ck = Checkpoint(model.state_dict(), TINY, epoch=3, best_val_dsc=0.5, seed=4)
        ck.save(tmp_path / "m.pt")
        back = Checkpoint.load(tmp_path / "m.pt")
        assert (back.epoch, back.best_val_dsc, back.seed, back.model_config) == (3, 0.5, 4, TINY)
        x = torch.rand(2, 1, 16, 16)
        model.eval()
        with torch.no_grad():
            assert torch.equal(back.build()(x), model(x))

    def test_config_mismatch(self, tmp_path):
        Checkpoint(build_model(TINY).state_dict(), TINY).save(tmp_path / "m.pt")
        with pytest.raises(ContractViolation):
            Checkpoint.load(tmp_path / "m.pt", expect=replace(TINY, base_width=8))

    def test_bad_format(self, tmp_path):
        torch.save({"format": 99}, tmp_path / "m.pt")
        with pytest.raises(ContractViolation):
            Checkpoint.load(tmp_path / "m.pt")


class TestTrain:
    def test_one_epoch_outputs(self, dataset, tmp_path):
        result = train(_config(), dataset, out_dir=tmp_path)
        assert len(result.log) == 1
        for name in ("best.pt", "last.pt", "trainlog.csv", "config.txt"):
            assert (tmp_path / name).exists()
        rows = list(csv.DictReader(open(tmp_path / "trainlog.csv")))
        assert len(rows) == 1 and list(rows[0]) == ["epoch", "train_loss", "val_loss", "val_dsc",
                                                    "val_iou", "wall_seconds"]
        assert np.isfinite(float(rows[0]["train_loss"]))

    def test_same_seed_same_losses(self, dataset):
        cfg = _config(epochs=2, augment=True, box_jitter=0.1)
        a = train(cfg, dataset)
        b = train(cfg, dataset)
        assert [r["train_loss"] for r in a.log] == [r["train_loss"] for r in b.log]
        x = torch.rand(1, 1, 16, 16)
        with torch.no_grad():
            assert torch.equal(a.last.build()(x), b.last.build()(x))

    def test_different_seed_differs(self, dataset):
        a = train(_config(seed=1), dataset)
        b = train(_config(seed=2), dataset)
        assert a.log[0]["train_loss"] != b.log[0]["train_loss"]

    def test_empty_train_split(self, dataset):
        only_test = DatasetManifest([replace(e, split="test") for e in dataset.entries], root=dataset.root)
        with pytest.raises(ContractViolation):
            train(_config(), only_test)

    def test_missing_file_named(self, dataset):
        broken = DatasetManifest([replace(dataset.entries[0], image="images/gone.png")]
                                 + list(dataset.entries[1:]), root=dataset.root)
        with pytest.raises(FileNotFoundError, match="gone.png"):
            load_samples(broken, broken.entries)


def test_jitter_box_bounds():
    rng = np.random.default_rng(0)
    box = BoundingBox(100, 100, 20, 20)
    assert jitter_box(box, rng, 0.0) == box
    for _ in range(50):
        j = jitter_box(box, rng, 0.2)
        assert 16 <= j.w <= 24 and 16 <= j.h <= 24
        assert abs(j.x + j.w / 2 - 110) <= 2 + 1e-9


class TestEvaluate:
    def test_oracle_predictor_is_perfect(self, dataset, tmp_path):
        ev = evaluate_split(dataset, "test", _oracle_predictor(dataset, "test", 32), 32)
        assert ev.metrics["dsc"] == 1.0 and ev.metrics["iou"] == 1.0
        assert ev.metrics["sen"] == ev.metrics["spe"] == ev.metrics["acc"] == 1.0
        assert ev.metrics["auc_roc"] == pytest.approx(1.0)
        assert ev.metrics["n_images"] == len(dataset.split("test")) == len(ev.per_image)
        write_evaluation(ev, tmp_path)
        metrics = json.loads((tmp_path / "metrics.json").read_text())
        for key in ("acc", "sen", "spe", "dsc", "iou", "dsc_std", "pooled_dsc", "auc_roc", "auc_pr",
                    "aggregation", "split", "threshold"):
            assert key in metrics
        assert (tmp_path / "roc.csv").read_text().startswith("threshold,x,y")
        assert len((tmp_path / "per_image.csv").read_text().splitlines()) == 1 + len(ev.per_image)

    def test_checkpoint_evaluation(self, dataset, tmp_path):
        ck = Checkpoint(build_model(TINY, seed=0).state_dict(), TINY)
        ev = evaluate(ck, dataset, "val", out_dir=tmp_path)
        assert 0.0 <= ev.metrics["dsc"] <= 1.0
        assert (tmp_path / "pr.csv").exists()

    def test_bad_threshold_and_empty_split(self, dataset):
        pred = _oracle_predictor(dataset, "test", 32)
        with pytest.raises(ContractViolation):
            evaluate_split(dataset, "test", pred, 32, threshold=0.0)
        empty = DatasetManifest([replace(e, split="train") for e in dataset.entries], root=dataset.root)
        with pytest.raises(ContractViolation):
            evaluate_split(empty, "test", pred, 32)


class TestPipeline:
    def test_no_rois_gives_empty_mask(self, tmp_path):
        img = np.zeros((512, 512), np.uint8)
        res = predict_pipeline(img, lambda p: np.zeros((len(p), 16, 16)), 16)
        assert res.status == "no_rois" and res.mask.shape == (512, 512) and not res.mask.any()
        write_pipeline_outputs({"images/blank.png": res}, tmp_path)
        assert json.loads((tmp_path / "status.json").read_text()) == {"images/blank.png": "no_rois"}
        assert (tmp_path / "masks" / "blank.png").exists()

    def test_constant_one_predictor_fills_windows(self, dataset):
        from aweunet.dataset import read_gray
        e = dataset.split("test")[0]
        img = read_gray(dataset.path(e.image))
        box = e.boxes[0]
        res = predict_pipeline(img, lambda p: np.ones((len(p), 16, 16)), 16,
                               detections=[Detection(box, 0.9)], pad_fraction=0.0)
        assert res.status == "ok"
        assert res.mask.sum() == box.area
        assert res.mask[int(box.y):int(box.y1), int(box.x):int(box.x1)].all()

    def test_model_predictor_shapes(self):
        pred = model_predictor(build_model(TINY, seed=0), batch_size=3)
        out = pred(np.random.default_rng(0).random((5, 1, 16, 16)))
        assert out.shape == (5, 16, 16) and ((0 <= out) & (out <= 1)).all()
