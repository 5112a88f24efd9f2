"""AdamW over dicts of numpy arrays (decoupled weight decay, bias-corrected)."""

from __future__ import annotations

import numpy as np


class AdamW:
    def __init__(
        self,
        lr: float = 1e-3,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        weight_decay: float = 0.0,
    ):
        self.lr = float(lr)
        self.betas = (float(betas[0]), float(betas[1]))
        self.eps = float(eps)
        self.weight_decay = float(weight_decay)
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray], lr: float | None = None) -> None:
        """One update, in place. ``lr`` overrides the stored rate (schedules)."""
        lr = self.lr if lr is None else float(lr)
        b1, b2 = self.betas
        self.t += 1
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for name, p in params.items():
            g = grads[name]
            if name not in self.m:
                self.m[name] = np.zeros_like(p)
                self.v[name] = np.zeros_like(p)
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            if self.weight_decay:
                update = update + self.weight_decay * p
            p -= lr * update

    def state_arrays(self) -> list[tuple[str, np.ndarray]]:
        out = []
        for name in sorted(self.m):
            out.append((f"m.{name}", self.m[name]))
            out.append((f"v.{name}", self.v[name]))
        return out

    def load_state(self, arrays: dict[str, np.ndarray], t: int) -> None:
        self.t = int(t)
        self.m = {k[2:]: v.copy() for k, v in arrays.items() if k.startswith("m.")}
        self.v = {k[2:]: v.copy() for k, v in arrays.items() if k.startswith("v.")}
