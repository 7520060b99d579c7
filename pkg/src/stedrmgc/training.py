"""Adam training loop over lag-window instances.

Objective per batch: squared error summed over every (instance, pair) cell
plus ``l2_weight * sum ||W||^2`` over 2-D weight matrices (biases are not
penalized).
"""
from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import tensor_core as tc
from .data import TrainingInstance, stack_instances
from .errors import ConfigError, DataError, DivergenceError
from .model import Network, stack_graphs
from .tensor_core import Tensor

logger = logging.getLogger(__name__)


@dataclass
class TrainingConfig:
    learning_rate: float = 5e-5
    lr_decay: float = 1e-6
    decay_mode: str = "inverse"  # "inverse": lr0/(1+decay*step); "exponential": lr0*(1-decay)**step
    batch_size: int = 32
    epochs: int = 100
    l2_weight: float = 1e-4
    seed: int = 0
    shuffle: bool = True
    with_replacement: bool = False
    patience: int = 20
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ConfigError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.l2_weight < 0:
            raise ConfigError(f"l2_weight must be >= 0, got {self.l2_weight}")
        if self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}")
        if self.decay_mode not in ("inverse", "exponential"):
            raise ConfigError(f"unknown decay_mode {self.decay_mode!r}")

    def lr_at(self, step: int) -> float:
        if self.decay_mode == "inverse":
            return self.learning_rate / (1.0 + self.lr_decay * step)
        return self.learning_rate * (1.0 - self.lr_decay) ** step


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def loss(
    pred: Tensor,
    target,
    params: dict[str, Tensor] | None = None,
    l2_weight: float = 0.0,
    weight_names: Sequence[str] | None = None,
) -> Tensor:
    """Summed squared error plus the L2 penalty on the named weights."""
    y = target if isinstance(target, Tensor) else Tensor(target)
    if pred.shape != y.shape:
        if pred.ndim == y.ndim + 1 and pred.shape[-1] == 1 and pred.shape[:-1] == y.shape:
            y = tc.reshape(y, pred.shape)
        else:
            raise DataError(f"prediction shape {pred.shape} does not match target {y.shape}")
    total = tc.sum_squares(tc.sub(pred, y))
    if l2_weight and params:
        names = weight_names if weight_names is not None else [n for n, p in params.items() if p.ndim == 2]
        for n in names:
            total = tc.add(total, tc.mul(Tensor(l2_weight), tc.sum_squares(params[n])))
    return total


def adam_step(
    params: dict[str, Tensor], grads: dict[str, np.ndarray], state: AdamState, config: TrainingConfig
) -> float:
    """Apply one bias-corrected Adam update in place. Returns the lr used."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise DivergenceError(f"non-finite gradient for parameter {name!r}")
    lr = config.lr_at(state.step)
    state.step += 1
    b1, b2 = config.beta1, config.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.data.shape:
            raise ConfigError(f"gradient for {name!r} has shape {g.shape}, parameter {p.data.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + config.eps)
    return lr


@dataclass
class EpochLog:
    epoch: int
    lr: float
    train_loss: float
    val_loss: float | None
    wall_seconds: float

    def line(self) -> str:
        val = "" if self.val_loss is None else repr(self.val_loss)
        return f"{self.epoch},{self.lr!r},{self.train_loss!r},{val},{self.wall_seconds:.3f}"


LOG_HEADER = "epoch,lr,train_loss,val_loss,wall_seconds"


@dataclass
class TrainResult:
    model: Network
    log: list[EpochLog]
    best_epoch: int | None
    state: AdamState
    stopped_early: bool = False


def evaluate_loss(model: Network, instances: Sequence[TrainingInstance], a_stack=None, batch_size: int = 256) -> float:
    """Mean per-instance squared error (no regularization, no clamp)."""
    total = 0.0
    for s in range(0, len(instances), batch_size):
        X, Y = stack_instances(instances[s : s + batch_size])
        pred = model.forward(Tensor(X), a_stack).data[..., 0]
        total += float(np.sum((pred - Y) ** 2))
    return total / max(len(instances), 1)


def _graph_stack(model: Network, graph_set):
    if not model.needs_graphs:
        return None
    if graph_set is None:
        raise ConfigError(f"{model.kind} needs a graph set")
    stack = graph_set.stack() if hasattr(graph_set, "stack") else np.asarray(graph_set)
    K, N = stack.shape[0], stack.shape[1]
    if (N, K) != (model.arch.N, model.arch.K):
        raise ConfigError(f"graph set has N={N}, K={K}; model expects N={model.arch.N}, K={model.arch.K}")

    return stack_graphs(stack)


def train(
    model: Network,
    instances: Sequence[TrainingInstance],
    config: TrainingConfig,
    graph_set=None,
    validation: Sequence[TrainingInstance] | None = None,
    on_epoch: Callable[[EpochLog], None] | None = None,
) -> TrainResult:
    """Fit ``model`` in place with Adam over epoch-wise shuffled batches.

    With a validation set the best-validation parameters are restored at
    the end and training stops after ``config.patience`` epochs without
    improvement. A non-finite loss or gradient restores the last good
    parameters and raises :class:`DivergenceError`.
    """
    if not instances:
        raise DataError("training set is empty")
    a_stack = _graph_stack(model, graph_set)
    rng = np.random.default_rng(config.seed)
    state = AdamState()
    X_all, Y_all = stack_instances(instances)
    n = len(instances)
    log: list[EpochLog] = []
    best_val = math.inf
    best_state = None
    best_epoch = None
    since_best = 0
    stopped = False
    t0 = time.perf_counter()

    # overflow is caught by the explicit finiteness checks below
    with np.errstate(over="ignore", invalid="ignore"):
        for epoch in range(config.epochs):
            if config.with_replacement:
                order = rng.integers(0, n, size=n)
            elif config.shuffle:
                order = rng.permutation(n)
            else:
                order = np.arange(n)
            epoch_loss = 0.0
            for s in range(0, n, config.batch_size):
                idx = order[s : s + config.batch_size]
                good = model.state_dict()
                tc.zero_grad(model.parameters())
                pred = model.forward(Tensor(X_all[idx]), a_stack)
                total = loss(pred, Y_all[idx], model.params, config.l2_weight, model.weight_names)
                if not math.isfinite(total.item()):
                    model.load_state_dict(good)
                    raise DivergenceError(f"loss became non-finite at epoch {epoch}")
                total.backward()
                grads = {k: p.grad for k, p in model.params.items() if p.grad is not None}
                try:
                    adam_step(model.params, grads, state, config)
                except DivergenceError:
                    model.load_state_dict(good)
                    raise
                epoch_loss += float(np.sum((pred.data[..., 0] - Y_all[idx]) ** 2))
            val_loss = evaluate_loss(model, validation, a_stack) if validation else None
            entry = EpochLog(epoch, config.lr_at(state.step), epoch_loss / n, val_loss, time.perf_counter() - t0)
            log.append(entry)
            logger.debug(entry.line())
            if on_epoch is not None:
                on_epoch(entry)
            if val_loss is not None:
                if val_loss < best_val:
                    best_val, best_state, best_epoch, since_best = val_loss, model.state_dict(), epoch, 0
                else:
                    since_best += 1
                    if since_best >= config.patience:
                        stopped = True
                        break

    if best_state is not None:
        model.load_state_dict(best_state)
    return TrainResult(model, log, best_epoch, state, stopped)
