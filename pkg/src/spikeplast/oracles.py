"""Brute-force reference implementations for the property tests.

Everything here runs plain Python loops, one scalar at a time.  The references share only elementary functions (the sigmoid used by
the synaptic filter) with the optimized code, so agreement between the two
checks the vectorized bookkeeping rather than re-running it.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit


@dataclass
class OracleScenario:
    """A small layer configuration plus the inputs and winner draws to replay.

    ``kind`` is ``"conv"`` (weights (C_out, C_in, k, k), inputs (N, C_in, H, W))
    or ``"fc"`` (weights (n_out, n_in), inputs (N, n_in)).  ``draws`` has one
    uniform number per (sample, timestep) and drives every winner choice.
    """

    kind: str
    weights: np.ndarray
    inputs: np.ndarray
    timesteps: int
    draws: np.ndarray
    tau: float = 2.0
    capacitance: float = 1.0
    asf: bool = True
    atb: bool = True
    alic: bool = True
    alpha_asf: float = 8.0
    beta_asf: float = 1.6
    alpha_inh: float = 1.625
    beta_thresh: float = 1.0
    theta_init: float = 10.0
    theta_plus: np.ndarray | None = None
    scope: str = "sample"
    gate_on_winner: bool = True
    reset_losers: bool = True
    extra: dict = field(default_factory=dict)


def _conv_currents(w, x):
    c_out, c_in, k, _ = w.shape
    h_out, w_out = x.shape[1] - k + 1, x.shape[2] - k + 1
    cur = np.zeros((c_out, h_out, w_out))
    for o in range(c_out):
        for y in range(h_out):
            for z in range(w_out):
                total = 0.0
                for c in range(c_in):
                    for dy in range(k):
                        for dz in range(k):
                            total += w[o, c, dy, dz] * x[c, y + dy, z + dz]
                cur[o, y, z] = total
    return cur


def _fc_currents(w, x):
    cur = np.zeros(w.shape[0])
    for j in range(w.shape[0]):
        total = 0.0
        for i in range(w.shape[1]):
            total += w[j, i] * x[i]
        cur[j] = total
    return cur


def _sample_currents(sc: OracleScenario):
    fn = _conv_currents if sc.kind == "conv" else _fc_currents
    return [fn(sc.weights, sc.inputs[n]) for n in range(sc.inputs.shape[0])]


def _thresholds(sc: OracleScenario, cur):
    if sc.kind == "conv":
        if not sc.atb:
            return np.full(cur.shape, sc.theta_init)
        peak = max(float(v) for v in cur.ravel())
        return np.full(cur.shape, sc.beta_thresh * peak)
    thr = np.empty(cur.shape)
    for j in range(cur.shape[0]):
        plus = sc.theta_plus[j] if (sc.atb and sc.theta_plus is not None) else 0.0
        thr[j] = sc.theta_init + plus
    return thr


def _drive(sc: OracleScenario, i, thr):
    if not sc.asf:
        return i
    if thr <= 0:
        return 0.0
    sigma = -sc.alpha_asf * i / thr + sc.beta_asf
    return float(thr * expit(-sigma))


def oracle_dense_lif(sc: OracleScenario) -> np.ndarray:
    """Spike raster (N, T, *neuron_shape) of the layer's forward dynamics.

    Per step: LIF integration of the (optionally filtered) current, one
    uniformly drawn winner per sample, then inhibition of every non-winner
    whose current exceeds half the reference maximum.
    """
    currents = _sample_currents(sc)
    n = len(currents)
    shape = currents[0].shape
    size = currents[0].size
    decay = 1.0 - 1.0 / sc.tau
    thresholds = [_thresholds(sc, c).ravel() for c in currents]
    flat_cur = [c.ravel() for c in currents]
    drives = [[_drive(sc, float(flat_cur[s][j]), float(thresholds[s][j])) for j in range(size)]
              for s in range(n)]
    batch_peak = max(float(v) for c in flat_cur for v in c)
    u = [[0.0] * size for _ in range(n)]
    raster = np.zeros((n, sc.timesteps, size), dtype=bool)
    for t in range(sc.timesteps):
        winners = []
        for s in range(n):
            fired = []
            for j in range(size):
                thr = thresholds[s][j]
                v = decay * u[s][j] + drives[s][j] / sc.capacitance
                crossed = thr > 0 and v >= thr
                if crossed:
                    fired.append(j)
                    if not sc.alic or sc.reset_losers:
                        v = 0.0
                u[s][j] = v
            if not sc.alic:
                for j in fired:
                    raster[s, t, j] = True
                winners.append(None)
                continue
            if fired:
                k = len(fired)
                rank = min(math.floor(sc.draws[s, t] * k), k - 1)
                win = fired[rank]
                raster[s, t, win] = True
                u[s][win] = 0.0
                winners.append(win)
            else:
                winners.append(None)
        if not sc.alic:
            continue
        for s in range(n):
            peak = batch_peak if sc.scope == "batch" else max(float(v) for v in flat_cur[s])
            if peak <= 0:
                continue
            if sc.gate_on_winner and winners[s] is None:
                continue
            for j in range(size):
                if j != winners[s] and flat_cur[s][j] > peak / 2:
                    u[s][j] = u[s][j] - sc.alpha_inh * peak
    return raster.reshape((n, sc.timesteps) + shape)


def oracle_unbatched_stdp(pre: np.ndarray, post: np.ndarray, lambda_plus: float,
                          x_offset: float) -> np.ndarray:
    """Mean of the per-(sample, timestep) trace-STDP updates.

    ``pre`` is (N, T, n_in), ``post`` is (N, T, n_out); returns (n_out, n_in).
    Each trace starts at 0 for every sample and includes same-step
    presynaptic activity before the postsynaptic read.
    """
    n_samples, steps, n_in = pre.shape
    n_out = post.shape[2]
    total = [[0.0] * n_in for _ in range(n_out)]
    for s in range(n_samples):
        trace = [0.0] * n_in
        for t in range(steps):
            for i in range(n_in):
                trace[i] = lambda_plus * trace[i] + float(pre[s, t, i])
            for j in range(n_out):
                if post[s, t, j]:
                    for i in range(n_in):
                        total[j][i] += trace[i] - x_offset
    count = n_samples * steps
    return np.array([[v / count for v in row] for row in total])


def first_spike_time(current: float, threshold: float, tau: float, capacitance: float = 1.0,
                     limit: int = 10_000) -> int | None:
    """Smallest t >= 1 with ``(i / C) * sum_{k<t} (1 - 1/tau)**k >= threshold``."""
    decay = 1.0 - 1.0 / tau
    if current <= 0:
        return None
    for t in range(1, limit + 1):
        if current / capacitance * (1 - decay ** t) / (1 - decay) >= threshold:
            return t
    return None
