"""Ablation sweeps: retrain the configured model along one design axis."""

from __future__ import annotations

import copy
import os

from .config import RunConfig
from .train import train_run


class AblateError(ValueError):
    pass


def _factor_pairs(n: int):
    pairs = []
    for w in range(1, n + 1):
        if n % w == 0:
            pairs.append((w, n // w))
    return pairs


def axis_values(cfg: RunConfig, axis: str):
    if axis == "upsample":
        return ["dynamic", "4x4", "8x8"]
    if axis == "layers":
        return [1, 3, 6]
    if axis == "kernel":
        return [5, 7, 9, 11]
    if axis == "fusion":
        return ["add", "multiply", "concat_conv"]
    if axis == "query_shape":
        return [f"{w}x{h}" for w, h in _factor_pairs(cfg.model.num_queries)]
    raise AblateError(
        f"unknown axis '{axis}'; valid axes: upsample, layers, kernel, fusion, query_shape")


def apply_axis(cfg: RunConfig, axis: str, value) -> RunConfig:
    out = copy.deepcopy(cfg)
    m = out.model
    if axis == "upsample":
        m.cim_fixed_size = None if value == "dynamic" else tuple(int(v) for v in value.split("x"))
    elif axis == "layers":
        m.decoder_layers = int(value)
    elif axis == "kernel":
        m.sim_kernel = int(value)
        m.cim_kernel = int(value)
    elif axis == "fusion":
        m.fusion_mode = value
    elif axis == "query_shape":
        m.query_shape = tuple(int(v) for v in value.split("x"))
    else:
        raise AblateError(
            f"unknown axis '{axis}'; valid axes: upsample, layers, kernel, fusion, query_shape")
    return out.validate()


def ablate(cfg: RunConfig, axis: str, out_dir: str, log=None) -> str:
    """One training run per axis value, shared seed; writes a CSV table."""
    say = log or (lambda msg: None)
    values = axis_values(cfg, axis)
    os.makedirs(out_dir, exist_ok=True)
    csv_path = os.path.join(out_dir, f"ablate_{axis}.csv")
    with open(csv_path, "w", encoding="utf-8") as fh:
        fh.write("value,ap50,loss\n")
        for value in values:
            say(f"axis {axis} = {value}")
            run_cfg = apply_axis(cfg, axis, value)
            run_dir = os.path.join(out_dir, f"{axis}_{value}")
            summary = train_run(run_cfg, run_dir)
            fh.write(f"{value},{summary['ap50']:.6f},{summary['loss']:.6f}\n")
            fh.flush()
    return csv_path
