"""Trace-based STDP, its sample-temporal batched form, and weight normalization.

Every postsynaptic spike adds ``x_trace - x_offset`` to each of the neuron's
incoming synapses, where the trace is an exponentially decaying sum of
presynaptic activity.  Contributions are summed over a batch of samples and
timesteps and applied once, divided by the number of sample-steps.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DegenerateWeights

log = logging.getLogger(__name__)


@dataclass
class TraceState:
    x_trace: np.ndarray
    lambda_plus: float = 0.99

    @classmethod
    def zeros(cls, shape, lambda_plus: float = 0.99) -> "TraceState":
        return cls(np.zeros(shape), lambda_plus)


@dataclass(frozen=True)
class StdpConfig:
    x_offset: float = 0.3
    lambda_plus: float = 0.99
    n_batch: int = 32
    t_batch: int = 30

    def __post_init__(self):
        if self.x_offset < 0:
            raise ConfigError(f"x_offset must be >= 0, got {self.x_offset}")
        if not 0.0 <= self.lambda_plus < 1.0:
            raise ConfigError(f"lambda_plus must be in [0, 1), got {self.lambda_plus}")
        if self.n_batch < 1 or self.t_batch < 1:
            raise ConfigError("n_batch and t_batch must be positive")


@dataclass
class UpdateAccumulator:
    """Summed weight changes waiting for the next batched application.

    ``sample_steps`` counts the (sample, timestep) pairs folded in; a full
    batch holds ``n_batch * t_batch`` of them.
    """

    delta_w: np.ndarray
    contribution_count: np.ndarray
    sample_steps: int = 0

    @classmethod
    def zeros(cls, weight_shape) -> "UpdateAccumulator":
        return cls(np.zeros(weight_shape), np.zeros(weight_shape[0], dtype=np.int64))

    def clear(self) -> None:
        self.delta_w[...] = 0.0
        self.contribution_count[...] = 0
        self.sample_steps = 0

    def merge(self, other: "UpdateAccumulator") -> "UpdateAccumulator":
        return UpdateAccumulator(self.delta_w + other.delta_w,
                                 self.contribution_count + other.contribution_count,
                                 self.sample_steps + other.sample_steps)

    @property
    def empty(self) -> bool:
        return not self.contribution_count.any()


def trace_step(trace: TraceState, pre_spikes) -> TraceState:
    """x' = lambda_plus * x + pre, element-wise."""
    return TraceState(trace.lambda_plus * trace.x_trace + np.asarray(pre_spikes, dtype=float),
                      trace.lambda_plus)


def accumulate_stdp(acc: UpdateAccumulator, trace: TraceState, post_spikes,
                    x_offset: float) -> UpdateAccumulator:
    """Fold one timestep of a dense layer into ``acc`` in place.

    ``trace.x_trace`` is (batch, n_in) and ``post_spikes`` is (batch, n_out);
    ``acc.delta_w`` is (n_out, n_in).  Each call counts ``batch`` sample-steps.
    """
    post = np.asarray(post_spikes)
    x = trace.x_trace
    if post.ndim == 1:
        post = post[None]
    if x.ndim == 1:
        x = x[None]
    if post.shape[0] != x.shape[0] or acc.delta_w.shape != (post.shape[1], x.shape[1]):
        raise ConfigError(
            f"STDP shape mismatch: trace {x.shape}, post {post.shape}, weights {acc.delta_w.shape}")
    rows, cols = np.nonzero(post)
    if rows.size:
        np.add.at(acc.delta_w, cols, x[rows] - x_offset)
        np.add.at(acc.contribution_count, cols, 1)
    acc.sample_steps += post.shape[0]
    return acc


def apply_stb_update(weights: np.ndarray, acc: UpdateAccumulator, cfg: StdpConfig) -> np.ndarray:
    """Return ``weights + delta_w / (N_batch * T_batch)`` and clear ``acc``.

    The divisor is the number of sample-steps actually accumulated, which is
    ``cfg.n_batch * cfg.t_batch`` for a full batch; a trailing partial batch
    is averaged over what it holds.
    """
    if acc.empty:
        log.debug("apply_stb_update: no postsynaptic spikes in batch, weights unchanged")
        acc.clear()
        return weights
    denom = acc.sample_steps or cfg.n_batch * cfg.t_batch
    out = weights + acc.delta_w.reshape(weights.shape) / denom
    acc.clear()
    return out


def normalize_fc(weights: np.ndarray, a_minus_fc: float = 0.01) -> np.ndarray:
    """Scale each row (one postsynaptic neuron) so its mean equals ``a_minus_fc``."""
    mean = weights.mean(axis=1, keepdims=True)
    zero = np.flatnonzero(mean[:, 0] == 0.0)
    if zero.size:
        raise DegenerateWeights("fc neuron", int(zero[0]))
    return a_minus_fc * weights / mean


def normalize_conv(weights: np.ndarray, a_minus_conv: float = 1.0) -> np.ndarray:
    """Standardize each output-channel kernel to zero mean, std ``a_minus_conv``.

    Uses the population standard deviation over the kernel's elements.
    """
    flat = weights.reshape(weights.shape[0], -1)
    mean = flat.mean(axis=1, keepdims=True)
    std = flat.std(axis=1, keepdims=True)
    zero = np.flatnonzero(std[:, 0] == 0.0)
    if zero.size:
        raise DegenerateWeights("conv channel", int(zero[0]))
    return (a_minus_conv * (flat - mean) / std).reshape(weights.shape)


def window_stdp_oracle(pre_spike_times, post_spike_times, a_plus: float,
                       tau_plus: float, x_offset: float) -> float:
    """Brute-force pairwise sum of the unilateral window

        W(dt) = a_plus * exp(-dt / tau_plus) - x_offset,   dt = t_post - t_pre > 0

    over every pre/post pair.  Pairs with dt <= 0 contribute nothing.
    """
    total = 0.0
    for t_post in post_spike_times:
        for t_pre in pre_spike_times:
            dt = t_post - t_pre
            if dt > 0:
                total += a_plus * math.exp(-dt / tau_plus) - x_offset
    return total


def tau_from_lambda(lambda_plus: float) -> float:
    """Window time constant whose one-step decay equals ``lambda_plus``."""
    return -1.0 / math.log(lambda_plus)
