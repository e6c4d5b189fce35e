"""Training loop: deterministic data order, two-group AdamW, per-epoch metrics.

Every random draw is keyed by (seed, stream, epoch), so a resumed run replays
exactly the epochs a straight run would have performed.
"""

from __future__ import annotations

import os

import numpy as np

from .checkpoint import load_checkpoint, restore_model, save_checkpoint
from .config import RunConfig, config_to_yaml
from .core import Tensor, backward, no_grad
from .core.ops import softmax_probs
from .data import (flip_scene_horizontal, generate_scene, normalize_image,
                   scene_to_uint8, uint8_to_image)
from .evaluation import DetectionRecord, evaluate_ap
from .matching import CostWeights, batch_prediction_loss
from .model import build_model
from .nn import check_param_cover
from .optim import AdamW

_ORDER_STREAM = 101
_FLIP_STREAM = 202

METRICS_HEADER = "epoch,lr,total,class,l1,giou,ap50"


class SceneStore:
    """Scenes held as uint8 images plus annotation lists; index-addressed."""

    def __init__(self, data_cfg, start: int, count: int):
        s = data_cfg.image_size
        self.start = start
        self.count = count
        self.images = np.empty((count, 3, s, s), dtype=np.uint8)
        self.annotations = []
        for i in range(count):
            scene = generate_scene(data_cfg, start + i)
            self.images[i] = scene_to_uint8(scene)
            self.annotations.append(scene.annotations)

    def get(self, i: int):
        return uint8_to_image(self.images[i]), self.annotations[i]

    def image_id(self, i: int) -> int:
        return self.start + i


class ListStore:
    """Store view over already-materialized scenes (e.g. read from disk)."""

    def __init__(self, scenes: list):
        self.scenes = scenes
        self.count = len(scenes)

    def get(self, i: int):
        scene = self.scenes[i]
        return scene.image, scene.annotations

    def image_id(self, i: int) -> int:
        return self.scenes[i].index


def assemble_batch(store: SceneStore, indices, data_cfg, flips=None):
    """Stack normalized images and gather per-image gt lists."""
    imgs = []
    gts = []
    for k, i in enumerate(indices):
        img, ann = store.get(int(i))
        if flips is not None and flips[int(i)]:
            img, ann = flip_scene_horizontal(img, ann)
        imgs.append(normalize_image(img, data_cfg.norm_mean, data_cfg.norm_std))
        gts.append(list(ann))
    return Tensor(np.stack(imgs)), gts


def _to_pixels_xyxy(box, w: int, h: int) -> np.ndarray:
    cx, cy, bw, bh = (float(v) for v in box)
    return np.array([(cx - bw / 2) * w, (cy - bh / 2) * h,
                     (cx + bw / 2) * w, (cy + bh / 2) * h])


def collect_detections(model, store, data_cfg, batch_size: int = 16):
    """Final-layer predictions over a store; returns (detections, gt rows)."""
    detections = []
    gt_rows = []
    with no_grad():
        for lo in range(0, store.count, batch_size):
            indices = range(lo, min(lo + batch_size, store.count))
            xb, gts = assemble_batch(store, indices, data_cfg)
            _, _, ih, iw = xb.shape
            logits, boxes = model.forward_batched(xb)[-1]
            probs = softmax_probs(logits.data)
            for k, i in enumerate(indices):
                image_id = store.image_id(i)
                conf = probs[k, :, :-1].max(axis=1)
                cls = probs[k, :, :-1].argmax(axis=1)
                for slot in range(probs.shape[1]):
                    detections.append(DetectionRecord(
                        image_id=image_id, class_id=int(cls[slot]),
                        confidence=float(conf[slot]),
                        box_xyxy=_to_pixels_xyxy(boxes.data[k, slot], iw, ih)))
                for gcls, gbox in gts[k]:
                    gt_rows.append((image_id, int(gcls), _to_pixels_xyxy(gbox, iw, ih)))
    return detections, gt_rows


def collect_slot_outputs(model, store, data_cfg, batch_size: int = 16) -> list:
    """Per-image (softmax probs [N,K+1], normalized boxes [N,4]) rows."""
    rows = []
    with no_grad():
        for lo in range(0, store.count, batch_size):
            indices = range(lo, min(lo + batch_size, store.count))
            xb, _ = assemble_batch(store, indices, data_cfg)
            logits, boxes = model.forward_batched(xb)[-1]
            probs = softmax_probs(logits.data)
            for k in range(len(indices)):
                rows.append((probs[k], boxes.data[k].copy()))
    return rows


def holdout_ap50(model, store: SceneStore, data_cfg) -> float:
    detections, gt_rows = collect_detections(model, store, data_cfg)
    return evaluate_ap(detections, gt_rows, thresholds=(0.5,)).ap50


def _loss_weights(loss_cfg) -> CostWeights:
    return CostWeights(class_weight=loss_cfg.class_weight, l1_weight=loss_cfg.l1_weight,
                       giou_weight=loss_cfg.giou_weight,
                       no_object_weight=loss_cfg.no_object_weight)


def train_run(cfg: RunConfig, out_dir: str, resume: str | None = None, log=None) -> dict:
    """Run the configured training; returns a summary dict.

    Writes metrics.csv, config.yaml and ckpt.deco under ``out_dir``.  With
    ``resume`` pointing at a checkpoint the run continues after its recorded
    epoch and appends to the existing metrics file.
    """
    cfg.validate()
    say = log or (lambda msg: None)
    os.makedirs(out_dir, exist_ok=True)
    tcfg, dcfg = cfg.train, cfg.data

    model = build_model(cfg.model, seed=tcfg.seed)
    backbone, rest = model.param_groups()
    check_param_cover((backbone, rest), model)
    opt = AdamW({"backbone": (backbone, tcfg.lr_backbone), "rest": (rest, tcfg.lr)},
                weight_decay=tcfg.weight_decay)
    weights = _loss_weights(cfg.loss)

    start_epoch = 1
    if resume is not None:
        ck = load_checkpoint(resume)
        restore_model(model, ck["params"])
        if ck["optimizer_state"] is not None:
            opt.load_state_arrays(ck["optimizer_state"])
        start_epoch = int(ck["meta"]["epochs_completed"]) + 1
        say(f"resumed after epoch {start_epoch - 1}")

    with open(os.path.join(out_dir, "config.yaml"), "w", encoding="utf-8") as fh:
        fh.write(config_to_yaml(cfg))

    if tcfg.overfit_steps > 0:
        return _overfit_run(cfg, model, opt, weights, out_dir, say)

    say(f"generating {dcfg.count} train + {dcfg.holdout} holdout scenes")
    train_store = SceneStore(dcfg, 0, dcfg.count)
    holdout_store = SceneStore(dcfg, dcfg.count, dcfg.holdout)

    metrics_path = os.path.join(out_dir, "metrics.csv")
    ckpt_path = os.path.join(out_dir, "ckpt.deco")
    mode = "a" if (resume is not None and os.path.exists(metrics_path)) else "w"
    metrics = open(metrics_path, mode, encoding="utf-8")
    if mode == "w":
        metrics.write(METRICS_HEADER + "\n")

    config_text = config_to_yaml(cfg)
    summary = {"epochs_run": start_epoch - 1, "ap50": 0.0, "loss": float("nan"),
               "metrics_path": metrics_path, "ckpt_path": ckpt_path}
    try:
        for epoch in range(start_epoch, tcfg.epochs + 1):
            factor = 0.1 if epoch > tcfg.lr_drop_epoch else 1.0
            opt.set_lr({"backbone": tcfg.lr_backbone * factor, "rest": tcfg.lr * factor})
            lr_now = tcfg.lr * factor

            order = np.random.default_rng((tcfg.seed, _ORDER_STREAM, epoch)).permutation(dcfg.count)
            if dcfg.flip_augment:
                flips = np.random.default_rng((tcfg.seed, _FLIP_STREAM, epoch)).random(dcfg.count) < 0.5
            else:
                flips = None

            sums = np.zeros(4)  # total, class, l1, giou
            steps = 0
            for lo in range(0, dcfg.count, tcfg.batch_size):
                xb, gts = assemble_batch(train_store, order[lo:lo + tcfg.batch_size],
                                         dcfg, flips)
                outs = model.forward_batched(xb)
                breakdown = batch_prediction_loss(outs, gts, weights, aux=cfg.loss.aux)
                backward(breakdown.total)
                opt.step()
                model.zero_grad()
                sums += (breakdown.total.item(), breakdown.class_loss,
                         breakdown.l1_loss, breakdown.giou_loss)
                steps += 1

            ap50 = holdout_ap50(model, holdout_store, dcfg)
            avg = sums / max(steps, 1)
            metrics.write(f"{epoch},{lr_now:.8f},{avg[0]:.6f},{avg[1]:.6f},"
                          f"{avg[2]:.6f},{avg[3]:.6f},{ap50:.6f}\n")
            metrics.flush()
            say(f"epoch {epoch}: loss {avg[0]:.4f} ap50 {ap50:.4f}")

            save_checkpoint(ckpt_path, [(n, p.data) for n, p in model.named_parameters()],
                            config_text, {"epochs_completed": epoch},
                            optimizer_state=opt.state_arrays())
            summary.update(epochs_run=epoch, ap50=ap50, loss=float(avg[0]))
            if tcfg.target_ap50 is not None and ap50 >= tcfg.target_ap50:
                say(f"target ap50 {tcfg.target_ap50} reached, stopping")
                break
    finally:
        metrics.close()
    return summary


def _overfit_run(cfg, model, opt, weights, out_dir, say) -> dict:
    """Repeat one fixed batch; the quick sanity mode."""
    tcfg, dcfg = cfg.train, cfg.data
    store = SceneStore(dcfg, 0, tcfg.batch_size)
    xb, gts = assemble_batch(store, range(tcfg.batch_size), dcfg)
    losses = []
    path = os.path.join(out_dir, "overfit.csv")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("step,total\n")
        for step in range(1, tcfg.overfit_steps + 1):
            outs = model.forward_batched(xb)
            breakdown = batch_prediction_loss(outs, gts, weights, aux=cfg.loss.aux)
            backward(breakdown.total)
            opt.step()
            model.zero_grad()
            losses.append(breakdown.total.item())
            fh.write(f"{step},{losses[-1]:.6f}\n")
            if step % 20 == 0:
                say(f"overfit step {step}: loss {losses[-1]:.4f}")
    return {"losses": losses, "metrics_path": path, "epochs_run": 0,
            "ap50": 0.0, "ckpt_path": None}
