"""Adam with decoupled weight decay over dicts of named parameter blocks.

Blocks update in sorted key order, in place. Weight decay multiplies the
parameter directly (decoupled form), never enters the moments, and can be
switched off per call for fitting stages that should not shrink toward
zero.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = ["AdamConfig", "AdamState", "adam_step"]


@dataclass(frozen=True)
class AdamConfig:
    learning_rate: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-2


class AdamState:
    """First/second moment accumulators plus the shared step counter."""

    def __init__(self, blocks: dict):
        self.m = {k: np.zeros_like(v) for k, v in blocks.items()}
        self.v = {k: np.zeros_like(v) for k, v in blocks.items()}
        self.step = 0

    def copy(self) -> "AdamState":
        out = AdamState({})
        out.m = {k: v.copy() for k, v in self.m.items()}
        out.v = {k: v.copy() for k, v in self.v.items()}
        out.step = self.step
        return out


def adam_step(blocks: dict, grads: dict, state: AdamState,
              cfg: AdamConfig) -> None:
    """One update of every block in `blocks`, in place.

    grads must hold a finite array per block key; a non-finite gradient
    raises RuntimeError rather than poisoning the moments.
    """
    state.step += 1
    t = state.step
    c1 = 1.0 - cfg.beta1 ** t
    c2 = 1.0 - cfg.beta2 ** t
    for key in sorted(blocks):
        g = grads[key]
        if not np.all(np.isfinite(g)):
            raise RuntimeError(f"non-finite gradient for block {key!r} "
                               f"at optimizer step {t}")
        m = state.m[key]
        v = state.v[key]
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * g * g
        upd = (m / c1) / (np.sqrt(v / c2) + cfg.eps)
        if cfg.weight_decay != 0.0:
            upd = upd + cfg.weight_decay * blocks[key]
        blocks[key] -= cfg.learning_rate * upd
