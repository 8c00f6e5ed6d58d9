"""Adaptive Computation Time baseline.

A learned halting score p_t is produced after each thinking step; iteration
stops at the first step N where the cumulative score reaches 1 - epsilon.
Steps before N are weighted by p_t, step N by the remainder
R = 1 - sum_{t<N} p_t, so the weights always sum to one. The ponder cost is
N + R per sample.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .ndtensor import (
    ConvParams,
    Module,
    Tensor,
    conv2d,
    global_avg_pool,
    reshape,
    sigmoid,
)


@dataclass
class ActConfig:
    tau: float = 0.5
    epsilon: float = 0.01
    t_max: int = 30

    def __post_init__(self):
        if not 0.0 < self.epsilon < 1.0:
            raise ConfigError(f"epsilon must be in (0, 1), got {self.epsilon}")
        if self.tau < 0:
            raise ConfigError(f"tau must be non-negative, got {self.tau}")
        if self.t_max < 1:
            raise ConfigError(f"t_max must be >= 1, got {self.t_max}")


@dataclass
class ActState:
    """Halting record for a batch; arrays are indexed [step, sample]."""

    p: np.ndarray
    halt_step: np.ndarray  # 1-based
    remainder: np.ndarray
    weights: np.ndarray
    ponder: Tensor  # mean over samples of N + R, differentiable through R

    @property
    def mean_halt_step(self) -> float:
        return float(self.halt_step.mean())


class HaltingUnit(Module):
    """1x1 convolution to one channel, global average pool, sigmoid."""

    def __init__(self, channels: int, rng: np.random.Generator):
        self.conv = ConvParams.create(channels, 1, 1, rng, init="glorot")


def halting_score(unit: HaltingUnit, h: Tensor) -> Tensor:
    """Per-sample halting probability, shape [N]."""
    s = global_avg_pool(conv2d(h, unit.conv))
    return reshape(sigmoid(s), (h.shape[0],))


def halting_schedule(p, epsilon: float, t_max: int | None = None) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Halt step, remainder and weights for a score sequence.

    ``p`` has shape [T] or [T, N]. Returns (halt_step [N], remainder [N],
    weights [T, N]); steps after the halt get weight 0.
    """
    p = np.asarray(p, dtype=np.float64)
    squeeze = p.ndim == 1
    if squeeze:
        p = p[:, None]
    T = p.shape[0] if t_max is None else min(t_max, p.shape[0])
    p = p[:T]
    cum = np.cumsum(p, axis=0)
    reached = cum >= 1.0 - epsilon
    reached[-1] = True
    halt_idx = reached.argmax(axis=0)
    steps = np.arange(T)[:, None]
    before = steps < halt_idx[None, :]
    remainder = 1.0 - np.where(before, p, 0.0).sum(axis=0)
    weights = np.where(before, p, 0.0) + np.where(steps == halt_idx[None, :], remainder[None, :], 0.0)
    halt_step = halt_idx + 1
    if squeeze:
        return halt_step[:1], remainder[:1], weights[:, 0]
    return halt_step, remainder, weights


def state_from_scores(p, epsilon: float, t_max: int | None = None) -> ActState:
    halt_step, remainder, weights = halting_schedule(p, epsilon, t_max)
    ponder = Tensor(np.mean(halt_step + remainder))
    return ActState(np.asarray(p, dtype=np.float64), halt_step, remainder, weights, ponder)


@dataclass
class ActOutputs:
    hidden: Tensor
    logits_main: Tensor
    logits_aux: Tensor


def act_run(net, X, cfg: ActConfig) -> tuple[ActState, ActOutputs]:
    """Iterate with per-sample halting; read out from the weighted state."""
    if net.halt is None:
        raise ConfigError("network was built without a halting unit (set act = true)")
    scores: list[Tensor] = []
    states: list[Tensor] = []
    n = None
    cum = None
    for t, h in enumerate(net.iterate(X, cfg.t_max), start=1):
        p = halting_score(net.halt, h)
        scores.append(p)
        states.append(h)
        n = h.shape[0]
        cum = p.data.copy() if cum is None else cum + p.data
        if np.all(cum >= 1.0 - cfg.epsilon):
            break

    T = len(scores)
    p_num = np.stack([s.data for s in scores])
    halt_step, remainder, weights = halting_schedule(p_num, cfg.epsilon, cfg.t_max)
    halt_idx = halt_step - 1

    # Weights rebuilt from the score tensors so gradients reach the halting unit.
    remainder_t = Tensor(np.ones(n))
    for t in range(T):
        before = (t < halt_idx).astype(np.float64)
        remainder_t = remainder_t - scores[t] * before
    hidden = None
    for t in range(T):
        before = (t < halt_idx).astype(np.float64)
        at = (t == halt_idx).astype(np.float64)
        w = scores[t] * before + remainder_t * at
        term = reshape(w, (n, 1, 1, 1)) * states[t]
        hidden = term if hidden is None else hidden + term
    ponder = (remainder_t + halt_step.astype(np.float64)).mean()
    main, aux = net.heads(hidden)
    state = ActState(p_num, halt_step, remainder, weights, ponder)
    return state, ActOutputs(hidden, main, aux)


def act_loss(task_loss: Tensor, state: ActState, cfg: ActConfig) -> Tensor:
    return task_loss + cfg.tau * state.ponder
