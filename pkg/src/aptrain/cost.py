"""Bit-level training energy and parameter memory, normalized to a 32-bit model.

There is no hardware model behind these numbers: one multiply-accumulate at
k bits costs ``k`` units (``linear``) or ``k**2`` units (``quadratic``), and
every MAC is counted three times per sample (forward, grad-input,
grad-weight).
"""
from __future__ import annotations

import numpy as np

PASSES = 3
# scale + zero point, each stored as one 32-bit word
PARAM_OVERHEAD_WORDS = 2

COST_FNS = {
    "linear": lambda k: float(k),
    "quadratic": lambda k: float(k) ** 2,
}


def _cost_fn(name):
    try:
        return COST_FNS[name]
    except KeyError:
        raise ValueError(f"cost_fn must be one of {sorted(COST_FNS)}, got {name!r}") from None


def iteration_energy(layers, batch_size: int, cost_fn: str = "linear", bitwidths=None) -> float:
    """Energy of one training iteration; ``bitwidths`` overrides each layer's k."""
    cost = _cost_fn(cost_fn)
    ks = [l.bitwidth for l in layers] if bitwidths is None else bitwidths
    return float(sum(PASSES * l.mac_count * batch_size * cost(k) for l, k in zip(layers, ks)))


def iteration_energy_32(layers, batch_size: int, cost_fn: str = "linear") -> float:
    return iteration_energy(layers, batch_size, cost_fn, [32] * len(layers))


def memory_bits(layers, bitwidths=None, overhead_words=PARAM_OVERHEAD_WORDS) -> int:
    ks = [l.bitwidth for l in layers] if bitwidths is None else bitwidths
    return int(sum(l.weight_count * k + 32 * (l.bias_count + overhead_words)
                   for l, k in zip(layers, ks)))


def memory_footprint(layers, overhead_words=PARAM_OVERHEAD_WORDS):
    """Return ``(bits, bits / bits_at_32)``."""
    bits = memory_bits(layers, overhead_words=overhead_words)
    bits32 = memory_bits(layers, [32] * len(layers), overhead_words)
    return bits, bits / bits32


class CostLedger:
    """Running energy total plus the 32-bit counterpart used to normalize it."""

    def __init__(self, cost_fn: str = "linear"):
        _cost_fn(cost_fn)
        self.cost_fn = cost_fn
        self.cumulative_energy = 0.0
        self.cumulative_energy_32 = 0.0
        self.memory_bits = 0
        self.memory_bits_32 = 0

    def charge_iteration(self, layers, batch_size: int) -> float:
        e = iteration_energy(layers, batch_size, self.cost_fn)
        self.cumulative_energy += e
        self.cumulative_energy_32 += iteration_energy_32(layers, batch_size, self.cost_fn)
        return e

    def update_memory(self, layers):
        self.memory_bits = memory_bits(layers)
        self.memory_bits_32 = memory_bits(layers, [32] * len(layers))

    @property
    def energy_norm(self) -> float:
        if not self.cumulative_energy_32:
            return 0.0
        return self.cumulative_energy / self.cumulative_energy_32

    @property
    def memory_norm(self) -> float:
        return self.memory_bits / self.memory_bits_32 if self.memory_bits_32 else 0.0


def energy_to_accuracy(accuracies, energies, target: float):
    """Cumulative energy at the first epoch whose accuracy reaches ``target``.

    Returns ``None`` when the target is never reached.
    """
    acc = np.asarray(accuracies, dtype=np.float64)
    hit = np.flatnonzero(acc >= target)
    if hit.size == 0:
        return None
    return float(energies[hit[0]])
