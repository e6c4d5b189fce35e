"""AdamW with named parameter groups and mutable learning rates."""

from __future__ import annotations

import numpy as np


class OptimError(ValueError):
    pass


class AdamW:
    """Bias-corrected Adam with decoupled weight decay.

    ``groups`` maps group name -> (named params, lr), where named params is a
    list of (name, Parameter).  Parameter names must be unique across groups;
    they key the persisted optimizer state.
    """

    def __init__(self, groups: dict, betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.0):
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.groups = {}
        self.state = {}
        seen = set()
        for gname, (named, lr) in groups.items():
            self.groups[gname] = {"params": list(named), "lr": float(lr)}
            for name, p in named:
                if name in seen:
                    raise OptimError(f"parameter '{name}' listed twice")
                seen.add(name)
                self.state[name] = {
                    "m": np.zeros_like(p.data),
                    "v": np.zeros_like(p.data),
                }

    def set_lr(self, lrs: dict):
        for gname, lr in lrs.items():
            if gname not in self.groups:
                raise OptimError(f"unknown parameter group '{gname}'")
            self.groups[gname]["lr"] = float(lr)

    def lr_of(self, gname: str) -> float:
        return self.groups[gname]["lr"]

    def step(self):
        self.t += 1
        b1, b2 = self.betas
        bc1 = 1.0 - b1 ** self.t
        bc2 = 1.0 - b2 ** self.t
        for group in self.groups.values():
            lr = group["lr"]
            for name, p in group["params"]:
                g = p.grad
                if g is None:
                    g = np.zeros_like(p.data)
                if g.shape != p.data.shape:
                    raise OptimError(
                        f"gradient shape {g.shape} mismatches parameter '{name}' {p.data.shape}")
                st = self.state[name]
                st["m"] = b1 * st["m"] + (1.0 - b1) * g
                st["v"] = b2 * st["v"] + (1.0 - b2) * (g * g)
                m_hat = st["m"] / bc1
                v_hat = st["v"] / bc2
                update = m_hat / (np.sqrt(v_hat) + self.eps)
                if self.weight_decay:
                    update = update + self.weight_decay * p.data
                p.data -= lr * update

    # persisted as {"t": int, "moments": {name: (m, v)}}
    def state_arrays(self) -> dict:
        return {"t": self.t,
                "moments": {name: (st["m"], st["v"]) for name, st in self.state.items()}}

    def load_state_arrays(self, payload: dict):
        self.t = int(payload["t"])
        for name, (m, v) in payload["moments"].items():
            if name not in self.state:
                raise OptimError(f"optimizer state for unknown parameter '{name}'")
            if m.shape != self.state[name]["m"].shape:
                raise OptimError(f"optimizer state shape mismatch for '{name}'")
            self.state[name]["m"] = m.copy()
            self.state[name]["v"] = v.copy()
