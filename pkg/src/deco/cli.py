"""Command-line entry point: synth / train / eval / infer / gradcheck / slots / ablate."""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np
import yaml

from . import __version__
from .ablate import ablate
from .checkpoint import load_checkpoint, restore_model
from .config import RunConfig, config_from_dict, load_config
from .core import Tensor, ops, grad_check
from .data import generate_scene, read_coco, write_coco, normalize_image
from .evaluation import evaluate_ap, export_query_slots, report_to_csv, report_to_text
from .model import build_model
from .train import ListStore, collect_detections, collect_slot_outputs, train_run


def _model_from_checkpoint(path: str):
    ck = load_checkpoint(path)
    cfg = config_from_dict(yaml.safe_load(ck["config_text"]))
    model = build_model(cfg.model, seed=cfg.train.seed)
    restore_model(model, ck["params"])
    return model, cfg, ck


def cmd_synth(args) -> int:
    cfg = load_config(args.config)
    count = args.count if args.count is not None else cfg.data.count
    scenes = [generate_scene(cfg.data, i) for i in range(count)]
    path = write_coco(scenes, args.out)
    n_boxes = sum(len(s.annotations) for s in scenes)
    print(f"wrote {count} scenes ({n_boxes} boxes) to {args.out} ({path})")
    return 0


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    summary = train_run(cfg, args.out, resume=args.resume, log=print)
    if summary["ckpt_path"]:
        print(f"done: epochs {summary['epochs_run']}, ap50 {summary['ap50']:.4f}, "
              f"checkpoint {summary['ckpt_path']}")
    return 0


def cmd_eval(args) -> int:
    model, cfg, _ = _model_from_checkpoint(args.ckpt)
    scenes = read_coco(args.data)
    store = ListStore(scenes)
    detections, gt_rows = collect_detections(model, store, cfg.data)
    report = evaluate_ap(detections, gt_rows)
    print(report_to_text(report))
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(report_to_csv(report))
        print(f"wrote {args.out}")
    return 0


def cmd_infer(args) -> int:
    from PIL import Image

    model, cfg, _ = _model_from_checkpoint(args.ckpt)
    with Image.open(args.image) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    img = arr.transpose(2, 0, 1)
    h, w = img.shape[1], img.shape[2]
    x = Tensor(normalize_image(img, cfg.data.norm_mean, cfg.data.norm_std))
    out = model.predict(x)
    from .core.ops import softmax_probs
    probs = softmax_probs(out.class_logits.data)
    results = []
    stem = os.path.splitext(os.path.basename(args.image))[0]
    image_id = int(stem.split("_")[-1]) if stem.split("_")[-1].isdigit() else 0
    for slot in range(probs.shape[0]):
        conf = float(probs[slot, :-1].max())
        cls = int(probs[slot, :-1].argmax())
        cx, cy, bw, bh = (float(v) for v in out.boxes.data[slot])
        if conf < args.threshold:
            continue
        results.append({
            "image_id": image_id,
            "category_id": cls,
            "bbox": [(cx - bw / 2) * w, (cy - bh / 2) * h, bw * w, bh * h],
            "score": conf,
        })
    with open(args.out, "w", encoding="utf-8") as fh:
        json.dump(results, fh, indent=1)
    print(f"wrote {len(results)} detections to {args.out}")
    return 0


def cmd_gradcheck(args) -> int:
    from .verify import composed_grad_check, op_grad_checks

    failures = 0

    def report(name: str, err: float, tol: float = 1e-5):
        nonlocal failures
        ok = err < tol
        failures += 0 if ok else 1
        print(f"{'PASS' if ok else 'FAIL'} {name}: max rel err {err:.3e}")

    for name, err in op_grad_checks():
        report(name, err)
    report("composed encoder-decoder-loss", composed_grad_check())
    print("all checks passed" if failures == 0 else f"{failures} checks FAILED")
    return 1 if failures else 0


def cmd_slots(args) -> int:
    model, cfg, _ = _model_from_checkpoint(args.ckpt)
    scenes = read_coco(args.data)
    rows = collect_slot_outputs(model, ListStore(scenes), cfg.data)
    csv = export_query_slots(rows, threshold=args.threshold)
    with open(args.out, "w", encoding="utf-8") as fh:
        fh.write(csv)
    print(f"wrote {len(csv.splitlines()) - 1} slot rows to {args.out}")
    return 0


def cmd_ablate(args) -> int:
    cfg = load_config(args.config)
    path = ablate(cfg, args.axis, args.out, log=print)
    print(f"wrote {path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="deco",
                                description="Query-based convolutional object detection")
    p.add_argument("--version", action="version", version=f"deco {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic dataset directory")
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--count", type=int, default=None)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("train", help="train a model")
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--resume", default=None)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="evaluate a checkpoint on a dataset directory")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--out", default=None)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("infer", help="run inference on one image")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--image", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--threshold", type=float, default=0.0)
    s.set_defaults(func=cmd_infer)

    s = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    s.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("slots", help="export per-query-slot predictions as CSV")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--threshold", type=float, default=0.5)
    s.set_defaults(func=cmd_slots)

    s = sub.add_parser("ablate", help="sweep one design axis, training per value")
    s.add_argument("--config", required=True)
    s.add_argument("--axis", required=True)
    s.add_argument("--out", default="ablation")
    s.set_defaults(func=cmd_ablate)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
