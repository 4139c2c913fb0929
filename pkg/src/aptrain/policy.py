"""Between-epoch precision adjustment driven by each layer's Gavg."""
from __future__ import annotations

import math
from dataclasses import dataclass

from .quantizer import K_MAX, K_MIN


@dataclass(frozen=True)
class PolicyConfig:
    t_min: float = 6.0
    t_max: float = math.inf
    k_min: int = K_MIN
    k_max: int = K_MAX
    step: int = 1

    def __post_init__(self):
        if math.isnan(self.t_min) or math.isnan(self.t_max):
            raise ValueError("thresholds must not be NaN")
        if self.t_min > self.t_max:
            raise ValueError(f"t_min ({self.t_min}) must not exceed t_max ({self.t_max})")
        if not K_MIN <= self.k_min <= self.k_max <= K_MAX:
            raise ValueError(f"need {K_MIN} <= k_min <= k_max <= {K_MAX}")
        if self.step < 1:
            raise ValueError("step must be >= 1")


@dataclass(frozen=True)
class BitwidthChange:
    epoch: int
    layer_id: int
    old: int
    new: int
    gavg: float


def adjust(k: int, gavg: float, cfg: PolicyConfig) -> int:
    if gavg < cfg.t_min and k < cfg.k_max:
        return min(k + cfg.step, cfg.k_max)
    if gavg > cfg.t_max and k > cfg.k_min:
        return max(k - cfg.step, cfg.k_min)
    return k


def adjust_all(layers, cfg: PolicyConfig, epoch: int = 0) -> list:
    """Apply :func:`adjust` to every layer with a Gavg average and re-code the changed ones.

    Layers that have not been measured yet (``gavg_ema is None``) are left alone.
    """
    events = []
    for i, layer in enumerate(layers):
        if layer.gavg_ema is None:
            continue
        old = layer.bitwidth
        new = adjust(old, layer.gavg_ema, cfg)
        if new != old:
            events.append(BitwidthChange(epoch, i, old, new, layer.gavg_ema))
            layer.set_bitwidth(new)
    return events
