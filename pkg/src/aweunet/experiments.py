"""Training, evaluation and end-to-end prediction workflows."""
from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .boxes import BoundingBox, Detection
from .config import ExperimentConfig, dump_config
from .dataset import (DatasetManifest, Entry, load_dataset, read_gray, read_mask, split_dataset,
                      write_manifest, write_mask)
from .detection import propose_rois_baseline, write_detections
from .errors import ContractViolation, TrainingDiverged
from .metrics import (ConfusionCounts, combined_loss, confusion_counts, overlap_from_counts,
                      pixel_metrics, pr_curve, roc_curve)
from .model import AWEUNet, ModelConfig, build_model, nodule_probability
from .phantoms import PhantomSpec, generate_phantoms
from .preprocess import (CropWindow, augment, crop_resize_mask, crop_resize_roi,
                         extract_lung_region, resize_bilinear)

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = 1
TRAINLOG_HEADER = ["epoch", "train_loss", "val_loss", "val_dsc", "val_iou", "wall_seconds"]

# (N, 1, S, S) float patches in [0, 1] -> (N, S, S) nodule probabilities
Predictor = Callable[[np.ndarray], np.ndarray]


# ------------------------------------------------------------ checkpoints

@dataclass
class Checkpoint:
    state_dict: dict[str, torch.Tensor]
    model_config: ModelConfig
    epoch: int = 0
    best_val_dsc: float = float("nan")
    seed: int = 0

    def save(self, path: str | Path) -> None:
        torch.save({
            "format": CHECKPOINT_FORMAT,
            "state_dict": {k: v.detach().cpu().clone() for k, v in self.state_dict.items()},
            "model_config": self.model_config.to_dict(),
            "epoch": self.epoch,
            "best_val_dsc": self.best_val_dsc,
            "seed": self.seed,
        }, path)

    @classmethod
    def load(cls, path: str | Path, expect: ModelConfig | None = None) -> "Checkpoint":
        raw = torch.load(path, map_location="cpu", weights_only=True)
        if raw.get("format") != CHECKPOINT_FORMAT:
            raise ContractViolation(f"{path}: unsupported checkpoint format {raw.get('format')!r}")
        config = ModelConfig(**raw["model_config"])
        if expect is not None and expect != config:
            raise ContractViolation(f"{path}: checkpoint model config {config} != requested {expect}")
        return cls(raw["state_dict"], config, raw["epoch"], raw["best_val_dsc"], raw["seed"])

    def build(self) -> AWEUNet:
        model = AWEUNet(self.model_config)
        model.load_state_dict(self.state_dict)
        model.eval()
        return model


def model_predictor(model: AWEUNet, batch_size: int = 16) -> Predictor:
    dtype = next(model.parameters()).dtype

    @torch.no_grad()
    def predict(patches: np.ndarray) -> np.ndarray:
        out = []
        for start in range(0, len(patches), batch_size):
            x = torch.as_tensor(patches[start:start + batch_size], dtype=dtype)
            out.append(nodule_probability(model(x)).double().numpy())
        return np.concatenate(out) if out else np.zeros((0,) + patches.shape[2:])

    return predict


# ---------------------------------------------------------------- samples

@dataclass
class RoiSample:
    entry: Entry
    box: BoundingBox
    image: np.ndarray = field(repr=False)  # lung-extracted slice
    mask: np.ndarray = field(repr=False)   # full-slice 0/1 mask


def load_samples(manifest: DatasetManifest, entries: Sequence[Entry]) -> list[RoiSample]:
    samples = []
    for e in entries:
        try:
            image = read_gray(manifest.path(e.image))
            mask = read_mask(manifest.path(e.mask))
        except FileNotFoundError as exc:
            raise FileNotFoundError(f"entry {e.image}: missing file {exc.filename}") from exc
        lung = extract_lung_region(image).image
        for b in e.boxes:
            samples.append(RoiSample(e, b, lung, mask))
    return samples


def jitter_box(box: BoundingBox, rng: np.random.Generator, amount: float) -> BoundingBox:
    if amount <= 0:
        return box
    sx, sy = rng.uniform(1 - amount, 1 + amount, 2)
    dx, dy = rng.uniform(-amount / 2, amount / 2, 2)
    w, h = box.w * sx, box.h * sy
    cx = box.x + box.w / 2 + dx * box.w
    cy = box.y + box.h / 2 + dy * box.h
    return BoundingBox(cx - w / 2, cy - h / 2, w, h)


def sample_arrays(sample: RoiSample, size: int, pad_fraction: float, box: BoundingBox | None = None):
    roi = crop_resize_roi(sample.image, box or sample.box, pad_fraction, size)
    return roi.patch, crop_resize_mask(sample.mask, roi.window, size)


# ------------------------------------------------------------------ train

@dataclass
class TrainResult:
    best: Checkpoint
    last: Checkpoint
    log: list[dict]


def _seed_everything(seed: int, threads: int) -> None:
    torch.manual_seed(seed)
    torch.set_num_threads(threads)


def _evaluate_samples(model: AWEUNet, samples, config: ExperimentConfig):
    if not samples:
        return float("nan"), float("nan"), float("nan")
    size = config.model.input_size
    patches, masks = zip(*(sample_arrays(s, size, config.pad_fraction) for s in samples))
    x = torch.as_tensor(np.stack(patches), dtype=torch.float32)
    t = torch.as_tensor(np.stack(masks), dtype=torch.float32)
    model.eval()
    with torch.no_grad():
        prob = nodule_probability(model(x))
        loss = float(combined_loss(prob, t, config.loss_weights))
    pred = (prob >= config.threshold).numpy().astype(np.uint8)
    overlaps = [overlap_from_counts(confusion_counts(p, m)) for p, m in zip(pred, masks)]
    dsc, iou = np.mean(overlaps, axis=0)
    return loss, float(dsc), float(iou)


def train(config: ExperimentConfig, manifest: DatasetManifest | None = None,
          out_dir: str | Path | None = None, progress: Callable[[dict], None] | None = None) -> TrainResult:
    """Optimise the combined BCE + soft-IoU loss on ROIs of the train split.

    Writes ``best.pt``, ``last.pt`` and ``trainlog.csv`` when ``out_dir`` is given.
    """
    config.validate()
    manifest = manifest if manifest is not None else load_dataset(config.dataset_root)
    train_samples = load_samples(manifest, manifest.split("train"))
    val_samples = load_samples(manifest, manifest.split("val"))
    if not train_samples:
        raise ContractViolation("train split has no ROIs")

    _seed_everything(config.seed, config.threads)
    model = build_model(config.model, seed=config.seed)
    opt_cfg = config.optimizer
    optimizer = torch.optim.Adam(model.parameters(), lr=opt_cfg.lr,
                                 betas=(opt_cfg.beta1, opt_cfg.beta2), eps=opt_cfg.eps)
    size = config.model.input_size
    aug = config.augmentation
    rows: list[dict] = []
    best_dsc = -1.0
    best_state = None
    best_epoch = 0
    started = time.perf_counter()

    for epoch in range(1, config.epochs + 1):
        rng = np.random.default_rng([config.seed, epoch])
        order = rng.permutation(len(train_samples))
        model.train()
        losses = []
        for b_idx, start in enumerate(range(0, len(order), config.batch_size)):
            patches, masks = [], []
            for k in order[start:start + config.batch_size]:
                s = train_samples[k]
                p, m = sample_arrays(s, size, config.pad_fraction,
                                     jitter_box(s.box, rng, config.box_jitter))
                if config.augment:
                    p, m = augment(p, m[None], aug, draw_seed=int(rng.integers(2**31)))
                    m = m[0]
                patches.append(p)
                masks.append(m)
            x = torch.as_tensor(np.stack(patches), dtype=torch.float32)
            t = torch.as_tensor(np.stack(masks), dtype=torch.float32)
            loss = combined_loss(nodule_probability(model(x)), t, config.loss_weights)
            if not torch.isfinite(loss):
                raise TrainingDiverged(epoch, b_idx, float(loss))
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            losses.append(loss.item())

        val_loss, val_dsc, val_iou = _evaluate_samples(model, val_samples, config)
        row = {"epoch": epoch, "train_loss": float(np.mean(losses)), "val_loss": val_loss,
               "val_dsc": val_dsc, "val_iou": val_iou,
               "wall_seconds": time.perf_counter() - started}
        rows.append(row)
        if progress:
            progress(row)
        score = val_dsc if np.isfinite(val_dsc) else -row["train_loss"]
        if best_state is None or score > best_dsc:
            best_dsc, best_epoch = score, epoch
            best_state = {k: v.detach().clone() for k, v in model.state_dict().items()}

    last_dsc = rows[-1]["val_dsc"]
    best_val = best_dsc if val_samples else float("nan")
    last = Checkpoint({k: v.detach().clone() for k, v in model.state_dict().items()},
                      config.model, config.epochs, last_dsc, config.seed)
    best = Checkpoint(best_state, config.model, best_epoch, best_val, config.seed)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        best.save(out / "best.pt")
        last.save(out / "last.pt")
        write_trainlog(out / "trainlog.csv", rows)
        (out / "config.txt").write_text(dump_config(config), encoding="utf-8")
    return TrainResult(best, last, rows)


def write_trainlog(path: str | Path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=TRAINLOG_HEADER, lineterminator="\n")
        writer.writeheader()
        for r in rows:
            writer.writerow({k: (repr(float(v)) if k != "epoch" else v) for k, v in r.items()})


# --------------------------------------------------------------- evaluate

@dataclass
class Evaluation:
    metrics: dict[str, float | str | int]
    per_image: list[dict]
    roc: object
    pr: object


_METRIC_KEYS = ("acc", "sen", "spe", "dsc", "iou")


def evaluate_split(manifest: DatasetManifest, split: str, predictor: Predictor,
                   input_size: int, threshold: float = 0.5, pad_fraction: float = 0.10) -> Evaluation:
    """Metrics on the gt-box ROIs of ``split``; one row per image (its ROIs pooled)."""
    if not 0.0 < threshold < 1.0:
        raise ContractViolation(f"threshold must lie in (0, 1), got {threshold}")
    entries = manifest.split(split)
    if not entries:
        raise ContractViolation(f"split {split!r} is empty")
    rows, all_scores, all_gt = [], [], []
    pooled = ConfusionCounts(0, 0, 0, 0)
    for e in entries:
        samples = load_samples(manifest, [e])
        counts = ConfusionCounts(0, 0, 0, 0)
        if samples:
            patches, masks = zip(*(sample_arrays(s, input_size, pad_fraction) for s in samples))
            prob = predictor(np.stack(patches))
            for p, m in zip(prob, masks):
                counts = counts + confusion_counts((p >= threshold).astype(np.uint8), m)
                all_scores.append(np.asarray(p, dtype=np.float64).ravel())
                all_gt.append(np.asarray(m).ravel())
        if counts.total == 0:
            raise ContractViolation(f"entry {e.image} has no ground-truth boxes to evaluate")
        pooled = pooled + counts
        acc, sen, spe = pixel_metrics(counts)
        dsc, iou = overlap_from_counts(counts)
        rows.append({"image": e.image, "acc": acc, "sen": sen, "spe": spe, "dsc": dsc, "iou": iou})

    scores = np.concatenate(all_scores)
    gt = np.concatenate(all_gt)
    roc, auc_roc = roc_curve(scores, gt)
    pr, auc_pr = pr_curve(scores, gt)
    metrics: dict[str, float | str | int] = {}
    for k in _METRIC_KEYS:
        values = np.array([r[k] for r in rows])
        metrics[k] = float(values.mean())
        metrics[f"{k}_std"] = float(values.std())
    p_acc, p_sen, p_spe = pixel_metrics(pooled)
    p_dsc, p_iou = overlap_from_counts(pooled)
    metrics.update(pooled_acc=p_acc, pooled_sen=p_sen, pooled_spe=p_spe,
                   pooled_dsc=p_dsc, pooled_iou=p_iou, auc_roc=auc_roc, auc_pr=auc_pr,
                   aggregation="per_image_mean", split=split, threshold=threshold,
                   n_images=len(rows))
    return Evaluation(metrics, rows, roc, pr)


def write_evaluation(ev: Evaluation, out_dir: str | Path) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.json").write_text(json.dumps(ev.metrics, indent=2) + "\n", encoding="utf-8")
    with open(out / "per_image.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["image", *_METRIC_KEYS], lineterminator="\n")
        writer.writeheader()
        writer.writerows(ev.per_image)
    ev.roc.to_csv(out / "roc.csv")
    ev.pr.to_csv(out / "pr.csv")


def evaluate(checkpoint: Checkpoint | str | Path, manifest: DatasetManifest, split: str = "test",
             threshold: float = 0.5, pad_fraction: float = 0.10,
             out_dir: str | Path | None = None) -> Evaluation:
    if not isinstance(checkpoint, Checkpoint):
        checkpoint = Checkpoint.load(checkpoint)
    model = checkpoint.build()
    ev = evaluate_split(manifest, split, model_predictor(model),
                        checkpoint.model_config.input_size, threshold, pad_fraction)
    if out_dir is not None:
        write_evaluation(ev, out_dir)
    return ev


# ---------------------------------------------------------------- predict

@dataclass
class PipelineResult:
    mask: np.ndarray         # uint8 0/1, same shape as the input slice
    probability: np.ndarray  # float64 canvas, max-combined over ROIs
    detections: list[Detection]
    status: str              # "ok" or "no_rois"


def predict_pipeline(image, predictor: Predictor, input_size: int,
                     detections: list[Detection] | None = None, threshold: float = 0.5,
                     pad_fraction: float = 0.10) -> PipelineResult:
    """Lung extraction, ROI proposal, per-ROI segmentation and canvas paste-back.

    ``detections`` overrides the baseline detector (e.g. imported from CSV).
    """
    img = np.asarray(image)
    lung = extract_lung_region(img).image
    dets = propose_rois_baseline(img) if detections is None else list(detections)
    canvas = np.zeros(img.shape, dtype=np.float64)
    if not dets:
        log.warning("no ROI proposals; emitting an empty mask")
        return PipelineResult(np.zeros(img.shape, dtype=np.uint8), canvas, [], "no_rois")
    rois = [crop_resize_roi(lung, d.box, pad_fraction, input_size) for d in dets]
    probs = predictor(np.stack([r.patch for r in rois]))
    for roi, prob in zip(rois, probs):
        win: CropWindow = roi.window
        pasted = np.clip(resize_bilinear(prob, win.shape), 0.0, 1.0)
        view = canvas[win.y0:win.y1, win.x0:win.x1]
        np.maximum(view, pasted, out=view)
    return PipelineResult((canvas >= threshold).astype(np.uint8), canvas, dets, "ok")


# ---------------------------------------------------------------- phantoms

def make_phantoms(spec: PhantomSpec, out_dir: str | Path, split_seed: int | None = None) -> DatasetManifest:
    """Render phantoms, split them 70/10/20 and write ``manifest.csv``."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"output directory {out} is not writable: {exc}") from exc
    raw = generate_phantoms(spec, out)
    manifest = split_dataset(raw.entries, spec.seed if split_seed is None else split_seed, root=out)
    write_manifest(manifest, out / "manifest.csv")
    return manifest


def write_pipeline_outputs(results: dict[str, PipelineResult], out_dir: str | Path) -> None:
    out = Path(out_dir)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    write_detections(out / "detections.csv", {k: r.detections for k, r in results.items()})
    status = {}
    for name, r in results.items():
        write_mask(out / "masks" / Path(name).name, r.mask)
        status[name] = r.status
    (out / "status.json").write_text(json.dumps(status, indent=2) + "\n", encoding="utf-8")


__all__ = [
    "Checkpoint", "Evaluation", "PipelineResult", "TrainResult",
    "evaluate", "evaluate_split", "make_phantoms", "model_predictor", "predict_pipeline",
    "train", "write_evaluation", "write_pipeline_outputs", "write_trainlog",
]
