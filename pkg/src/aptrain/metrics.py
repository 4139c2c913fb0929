"""Per-layer underflow metric and its moving average."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class GavgSample:
    layer_id: int
    value: float
    iteration: int


def gavg(grad_w, eps: float) -> float:
    """Mean of ``|g| / eps`` over a weight gradient.

    Values near zero mean almost every proposed update is smaller than the
    weight grid resolution, i.e. the layer has stopped learning.
    """
    if not eps > 0:
        raise ValueError(f"eps must be positive, got {eps!r}")
    g = np.asarray(grad_w, dtype=np.float64)
    return float(np.mean(np.abs(g)) / eps)


def ema_update(prev, sample: float, beta: float) -> float:
    if not 0.0 <= beta < 1.0:
        raise ValueError(f"beta must lie in [0, 1), got {beta!r}")
    if prev is None:
        return float(sample)
    return beta * prev + (1.0 - beta) * sample


def default_interval(iters_per_epoch: int, samples_per_epoch: int = 8) -> int:
    return max(1, -(-iters_per_epoch // samples_per_epoch))


def maybe_collect(iteration: int, interval: int, layers, beta: float = 0.9):
    """Fold this step's Gavg into every layer's EMA when ``iteration % interval == 0``.

    Reads ``layer.grad_w`` from the backward pass just run. Returns the new
    samples (empty list on non-trigger iterations).
    """
    if interval < 1:
        raise ValueError("interval must be >= 1")
    if iteration % interval:
        return []
    samples = []
    for i, layer in enumerate(layers):
        value = gavg(layer.grad_w, layer.epsilon())
        layer.gavg_ema = ema_update(layer.gavg_ema, value, beta)
        samples.append(GavgSample(i, value, iteration))
    return samples
