"""Adaptive-precision training loop.

Each epoch runs minibatch SGD on quantized weights. Every ``interval``
iterations the per-layer Gavg is sampled into a moving average, and at the
epoch boundary the policy moves each layer's bitwidth by at most one bit.
Moving averages are cleared after each boundary so the next decision only
reflects the precision that was actually in force.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, fields

import numpy as np

from .cost import CostLedger, COST_FNS
from .data import Dataset, batches
from .metrics import default_interval, maybe_collect
from .nn import ROUNDING_MODES, DivergenceError, Network, build_network, sgd_step_quantized
from .policy import PolicyConfig, adjust_all
from .quantizer import K_MAX, K_MIN

log = logging.getLogger(__name__)

MODES = ("apt", "fixed", "fp32")
_MODE_ALIASES = {"fixed-k": "fixed", "fp32-reference": "fp32"}


@dataclass
class TrainConfig:
    mode: str = "apt"
    initial_bitwidth: int = 6
    t_min: float = 6.0
    t_max: float = math.inf
    epochs: int = 200
    batch_size: int = 128
    lr: float = 0.1
    decay_epochs: tuple = (100, 150)
    decay_factor: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-4
    interval: int | None = None  # None: ceil(iterations_per_epoch / 8)
    ema_beta: float = 0.9
    rounding: str = "nearest"
    seed: int = 0
    cost_fn: str = "linear"

    def __post_init__(self):
        self.mode = _MODE_ALIASES.get(self.mode, self.mode)
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch size must be >= 1")
        if not K_MIN <= self.initial_bitwidth <= K_MAX:
            raise ValueError(f"initial bitwidth must lie in [{K_MIN}, {K_MAX}]")
        self.decay_epochs = tuple(sorted(int(e) for e in self.decay_epochs))
        if any(not 0 < e < self.epochs for e in self.decay_epochs):
            raise ValueError(f"decay epochs {self.decay_epochs} must lie in (0, {self.epochs})")
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if self.interval is not None and self.interval < 1:
            raise ValueError("interval must be >= 1")
        if not 0.0 <= self.ema_beta < 1.0:
            raise ValueError("ema beta must lie in [0, 1)")
        if self.rounding not in ROUNDING_MODES:
            raise ValueError(f"rounding must be one of {ROUNDING_MODES}")
        if self.cost_fn not in COST_FNS:
            raise ValueError(f"cost fn must be one of {sorted(COST_FNS)}")
        self.policy  # validates thresholds

    @property
    def policy(self) -> PolicyConfig:
        return PolicyConfig(self.t_min, self.t_max)

    @classmethod
    def desk(cls, **overrides):
        """20-epoch recipe with the learning-rate drops scaled to epochs 10 and 15."""
        return cls(**{"epochs": 20, "decay_epochs": (10, 15), **overrides})

    @classmethod
    def field_names(cls):
        return [f.name for f in fields(cls)]


@dataclass(frozen=True)
class TrainRecord:
    epoch: int
    bitwidths: tuple
    gavg: tuple  # per-layer Gavg average that drove this epoch's adjustment
    train_loss: float
    test_acc: float
    energy_norm: float  # cumulative, relative to the same run at 32 bits
    mem_norm: float
    lr: float


class TrainingDiverged(RuntimeError):
    def __init__(self, message, history, epoch, iteration):
        super().__init__(message)
        self.history = history
        self.epoch = epoch
        self.iteration = iteration


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    drops = sum(epoch >= e for e in cfg.decay_epochs)
    return cfg.lr * cfg.decay_factor ** drops


def evaluate(net: Network, ds: Dataset) -> float:
    if len(ds) == 0:
        raise ValueError("empty test set")
    return float(np.mean(net.predict(ds.images) == ds.labels))


def make_network(cfg: TrainConfig, arch: str, ds: Dataset, hidden=128) -> Network:
    bits = None if cfg.mode == "fp32" else cfg.initial_bitwidth
    return build_network(arch, ds.sample_shape, ds.class_count, bits, cfg.seed, hidden)


@dataclass
class Trainer:
    cfg: TrainConfig
    net: Network
    train: Dataset
    test: Dataset
    history: list = field(default_factory=list)
    # (global_iteration, epoch, BitwidthChange); adjustments only ever land on epoch boundaries
    events: list = field(default_factory=list)
    batch_sizes: list = field(default_factory=list)

    def __post_init__(self):
        self.ledger = CostLedger(self.cfg.cost_fn)
        self.layers = self.net.param_layers
        if self.cfg.mode == "fp32" and any(l.quantized for l in self.layers):
            raise ValueError("fp32 mode needs an unquantized network")
        if self.cfg.mode != "fp32" and not all(l.quantized for l in self.layers):
            raise ValueError(f"{self.cfg.mode} mode needs a quantized network")
        self.iters_per_epoch = -(-len(self.train) // self.cfg.batch_size)
        self.interval = self.cfg.interval or default_interval(self.iters_per_epoch)
        self.global_iter = 0

    def run(self) -> list:
        for epoch in range(self.cfg.epochs):
            self.run_epoch(epoch)
        return self.history

    def run_epoch(self, epoch: int) -> TrainRecord:
        cfg = self.cfg
        lr = lr_at(epoch, cfg)
        total_loss, seen = 0.0, 0
        for it, (x, y) in enumerate(batches(self.train, cfg.batch_size, cfg.seed, True, epoch)):
            # divergence is detected explicitly below
            with np.errstate(over="ignore", invalid="ignore"):
                loss = self.net.loss_and_grads(x, y)
            if not math.isfinite(loss):
                self._diverged("non-finite loss", epoch, it)
            maybe_collect(it, self.interval, self.layers, cfg.ema_beta)
            self.ledger.charge_iteration(self.layers, len(y))
            self.batch_sizes.append(len(y))
            try:
                for layer in self.layers:
                    sgd_step_quantized(layer, layer.grad_w, layer.grad_b, lr, cfg.momentum,
                                       cfg.weight_decay, cfg.rounding)
            except DivergenceError as exc:
                self._diverged(str(exc), epoch, it)
            total_loss += loss * len(y)
            seen += len(y)
            self.global_iter += 1

        self.ledger.update_memory(self.layers)
        record = TrainRecord(
            epoch=epoch,
            bitwidths=tuple(l.bitwidth for l in self.layers),
            gavg=tuple(l.gavg_ema for l in self.layers),
            train_loss=total_loss / seen,
            test_acc=evaluate(self.net, self.test),
            energy_norm=self.ledger.energy_norm,
            mem_norm=self.ledger.memory_norm,
            lr=lr,
        )
        self.history.append(record)
        if cfg.mode == "apt":
            for ev in adjust_all(self.layers, cfg.policy, epoch):
                self.events.append((self.global_iter, epoch, ev))
        for layer in self.layers:
            layer.gavg_ema = None
        log.info("epoch %d loss %.4f acc %.4f bits %s energy %.3f",
                 epoch, record.train_loss, record.test_acc, list(record.bitwidths),
                 record.energy_norm)
        return record

    def _diverged(self, message, epoch, it):
        raise TrainingDiverged(f"{message} at epoch {epoch}, iteration {it}",
                               list(self.history), epoch, it)


def run_training(cfg: TrainConfig, net: Network, train: Dataset, test: Dataset) -> list:
    """Train ``net`` in place and return one :class:`TrainRecord` per epoch."""
    return Trainer(cfg, net, train, test).run()
