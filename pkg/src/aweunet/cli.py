"""Command line entry point: ``aweunet {synth,train,eval,predict,detect-eval}``.

Exit codes: 0 success, 2 contract or configuration violation, 3 I/O error,
1 anything else (e.g. training divergence).
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .config import ExperimentConfig, keys_help, load_config
from .dataset import load_dataset, read_gray
from .detection import (dataset_average_precision, propose_rois_baseline, read_detections,
                        write_detections)
from .errors import AWEUNetError, ContractViolation
from .experiments import (Checkpoint, evaluate, make_phantoms, model_predictor, predict_pipeline,
                          train, write_pipeline_outputs)

log = logging.getLogger("aweunet")

EXIT_OK, EXIT_ERROR, EXIT_CONTRACT, EXIT_IO = 0, 1, 2, 3


def _overrides(args) -> dict[str, str]:
    out = dict(kv.split("=", 1) for kv in (args.set or []))
    out = {k.strip(): v.strip() for k, v in out.items()}
    if getattr(args, "seed", None) is not None:
        out["seed"] = str(args.seed)
    if getattr(args, "threshold", None) is not None:
        out["threshold"] = str(args.threshold)
    return out


def _config(args) -> ExperimentConfig:
    for kv in args.set or []:
        if "=" not in kv:
            raise ContractViolation(f"--set expects key=value, got {kv!r}")
    return load_config(args.config, _overrides(args))


def _out_dir(args, config: ExperimentConfig) -> Path:
    return Path(args.out or config.output_dir)


def cmd_synth(args) -> int:
    config = _config(args)
    spec = config.phantom
    if args.seed is not None:
        from dataclasses import replace
        spec = replace(spec, seed=args.seed)
    out = Path(args.out or config.dataset_root)
    manifest = make_phantoms(spec, out)
    print(json.dumps({"root": str(out), **manifest.counts()}))
    return EXIT_OK


def cmd_train(args) -> int:
    config = _config(args)
    out = _out_dir(args, config)

    def progress(row):
        log.info("epoch %d train_loss %.5f val_dsc %.4f", row["epoch"], row["train_loss"], row["val_dsc"])

    result = train(config, out_dir=out, progress=progress)
    print(json.dumps({"best_epoch": result.best.epoch, "best_val_dsc": result.best.best_val_dsc,
                      "epochs": len(result.log), "out": str(out)}))
    return EXIT_OK


def _checkpoint(args, config) -> Checkpoint:
    path = args.checkpoint or (Path(config.output_dir) / "best.pt")
    return Checkpoint.load(path)


def cmd_eval(args) -> int:
    config = _config(args)
    ck = _checkpoint(args, config)
    manifest = load_dataset(config.dataset_root)
    ev = evaluate(ck, manifest, args.split, config.threshold, config.pad_fraction, _out_dir(args, config))
    print(json.dumps({k: ev.metrics[k] for k in ("acc", "sen", "spe", "dsc", "iou", "auc_roc", "auc_pr")}))
    return EXIT_OK


def _external(detector: str) -> dict | None:
    if detector == "baseline":
        return None
    if detector.startswith("csv:"):
        return read_detections(detector[4:])
    raise ContractViolation(f"--detector must be 'baseline' or 'csv:PATH', got {detector!r}")


def cmd_predict(args) -> int:
    config = _config(args)
    external = _external(args.detector)
    ck = _checkpoint(args, config)
    predictor = model_predictor(ck.build())
    if args.images:
        items = [(str(p), Path(p)) for p in args.images]
    else:
        manifest = load_dataset(config.dataset_root)
        items = [(e.image, manifest.path(e.image)) for e in manifest.split(args.split)]
    results = {}
    for key, path in items:
        dets = None if external is None else external.get(key, external.get(Path(key).name, []))
        results[key] = predict_pipeline(read_gray(path), predictor, ck.model_config.input_size,
                                        dets, config.threshold, config.pad_fraction)
        if results[key].status != "ok":
            log.warning("%s: %s", key, results[key].status)
    write_pipeline_outputs(results, _out_dir(args, config))
    print(json.dumps({k: r.status for k, r in results.items()}))
    return EXIT_OK


def cmd_detect_eval(args) -> int:
    config = _config(args)
    manifest = load_dataset(config.dataset_root)
    entries = manifest.split(args.split)
    external = _external(args.detector)
    preds = {}
    for e in entries:
        if external is None:
            preds[e.image] = propose_rois_baseline(read_gray(manifest.path(e.image)))
        else:
            preds[e.image] = external.get(e.image, [])
    gts = {e.image: list(e.boxes) for e in entries}
    ap = dataset_average_precision(preds, gts, args.iou_min)
    out = _out_dir(args, config)
    out.mkdir(parents=True, exist_ok=True)
    write_detections(out / "detections.csv", preds)
    metrics = {"ap": ap, "iou_min": args.iou_min, "split": args.split,
               "n_images": len(entries), "n_gt": sum(len(v) for v in gts.values())}
    (out / "metrics.json").write_text(json.dumps(metrics, indent=2) + "\n", encoding="utf-8")
    print(json.dumps(metrics))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="aweunet", description="Two-stage lung nodule detection and AWEU-Net segmentation.",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="config file keys (flat 'key = value' lines, dotted sections):\n" + keys_help())
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, threshold=False):
        p.add_argument("--config", type=Path, help="key = value config file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", type=Path, help="output directory")
        if threshold:
            p.add_argument("--threshold", type=float)

    common(sub.add_parser("synth", help="generate a phantom dataset"))
    common(sub.add_parser("train", help="train AWEU-Net on the train split"))
    for name, helptext in (("eval", "evaluate a checkpoint on a split"),
                           ("predict", "run the end-to-end detection + segmentation pipeline")):
        p = sub.add_parser(name, help=helptext)
        common(p, threshold=True)
        p.add_argument("--checkpoint", type=Path)
        p.add_argument("--split", choices=("train", "val", "test"), default="test")
        if name == "predict":
            p.add_argument("--detector", default="baseline", help="baseline or csv:PATH")
            p.add_argument("images", nargs="*", type=Path, help="slices (default: the split's images)")
    p = sub.add_parser("detect-eval", help="average precision of ROI proposals on a split")
    common(p)
    p.add_argument("--split", choices=("train", "val", "test"), default="test")
    p.add_argument("--detector", default="baseline", help="baseline or csv:PATH")
    p.add_argument("--iou-min", type=float, default=0.5)
    return parser


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "eval": cmd_eval,
            "predict": cmd_predict, "detect-eval": cmd_detect_eval}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except ContractViolation as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONTRACT
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except AWEUNetError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
