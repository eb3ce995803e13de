"""Discrete-time leaky integrate-and-fire dynamics.

The membrane follows

    u[t] = (1 - 1/tau) * u[t-1] + i[t] / C

and a neuron whose updated potential reaches its threshold emits a spike and
is reset to 0 within the same step.  Potentials have no lower bound, so
lateral inhibition may leave them negative.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, NumericalDivergence


@dataclass(frozen=True)
class NeuronConfig:
    tau_mem: float = 2.0
    capacitance: float = 1.0
    resistance: float = 1.0  # continuous-time only; the discrete update ignores it

    def __post_init__(self):
        if not self.tau_mem > 1.0:
            raise ConfigError(f"tau_mem must be > 1, got {self.tau_mem}")
        if not self.capacitance > 0.0:
            raise ConfigError(f"capacitance must be > 0, got {self.capacitance}")

    @property
    def decay(self) -> float:
        return 1.0 - 1.0 / self.tau_mem


@dataclass
class MembraneState:
    u: np.ndarray
    fired: np.ndarray

    @classmethod
    def zeros(cls, shape, dtype=np.float64) -> "MembraneState":
        return cls(np.zeros(shape, dtype=dtype), np.zeros(shape, dtype=bool))


def _check_finite(arr: np.ndarray, layer: str, what: str) -> None:
    if not np.isfinite(arr).all():
        bad = np.argwhere(~np.isfinite(arr))[0]
        raise NumericalDivergence(layer, tuple(int(i) for i in bad), what)


def lif_step(state: MembraneState, input_current, threshold, config: NeuronConfig,
             layer: str = "lif") -> tuple[MembraneState, np.ndarray]:
    """Advance every neuron by one timestep.

    ``threshold`` broadcasts against ``state.u``; an infinite threshold
    silences a neuron for the step.  Returns the new state and the boolean
    spike array (identical to ``new_state.fired``).
    """
    current = np.asarray(input_current)
    _check_finite(current, layer, "input current")
    u = config.decay * state.u + current / config.capacitance
    _check_finite(u, layer, "membrane potential")
    spikes = u >= threshold
    u = np.where(spikes, 0.0, u)
    return MembraneState(u, spikes), spikes


def first_passage(drive, threshold, config: NeuronConfig, timesteps: int) -> np.ndarray:
    """Step index (1-based) at which a neuron starting from rest first fires.

    Assumes a constant drive and threshold with no lateral interaction; the
    neuron then fires periodically with this period because every reset
    restarts the identical trajectory.  0 marks neurons that stay silent for
    ``timesteps`` steps.  Iterates the same floating-point recurrence as
    :func:`lif_step`, so periods agree exactly with a step-by-step run.
    """
    drive = np.asarray(drive, dtype=float)
    thr = np.broadcast_to(np.asarray(threshold, dtype=float), drive.shape)
    flat_d = drive.ravel()
    flat_t = thr.ravel()
    period = np.zeros(flat_d.shape, dtype=np.int64)
    active = np.flatnonzero(flat_d > 0)
    d = flat_d[active] / config.capacitance
    t_active = flat_t[active]
    u = np.zeros_like(d)
    for n in range(1, timesteps + 1):
        if active.size == 0:
            break
        u = config.decay * u + d
        hit = u >= t_active
        if hit.any():
            period[active[hit]] = n
            keep = ~hit
            active, d, t_active, u = active[keep], d[keep], t_active[keep], u[keep]
        if n % 16 == 0 and active.size:
            # stalled neurons: potential stopped growing below threshold
            grow = config.decay * u + d > u
            if not grow.all():
                active, d, t_active, u = active[grow], d[grow], t_active[grow], u[grow]
    return period.reshape(drive.shape)
