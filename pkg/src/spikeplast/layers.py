"""Spiking layers and the pooling/normalization glue between them.

The convolutional layer adapts its threshold, filter and inhibition per
sample; the fully connected layer keeps homeostatic per-neuron thresholds.

Per-timestep order inside a competitive layer:

1. input current from the (constant, direct-encoded) presynaptic activity
2. firing threshold (max-current scaled for conv, theta_init + theta_plus for fc)
3. adaptive synaptic filter on the current
4. LIF integrate and fire
5. winner-take-all: one surviving spike per sample
6. adaptive lateral inhibition of strongly driven non-winners

Inputs are held fixed for a whole presentation, so the presynaptic trace at
step t is ``x * g[t]`` with ``g[t] = lambda * g[t-1] + 1``.  Layers use that
factorisation to fold STDP contributions without materialising per-step
traces; :mod:`spikeplast.plasticity` holds the general per-step form.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

from .errors import ConfigError
from .neuron import MembraneState, NeuronConfig, first_passage, lif_step
from .plasticity import (StdpConfig, UpdateAccumulator, apply_stb_update, normalize_conv,
                         normalize_fc)

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# stateless building blocks
# ---------------------------------------------------------------------------

def conv_patches(x: np.ndarray, kernel: int) -> np.ndarray:
    """(N, C, H, W) -> (N, H-k+1, W-k+1, C*k*k) view of every valid patch."""
    if x.ndim != 4:
        raise ConfigError(f"expected (N, C, H, W) input, got shape {x.shape}")
    if x.shape[2] < kernel or x.shape[3] < kernel:
        raise ConfigError(f"input {x.shape[2:]} smaller than kernel {kernel}")
    win = sliding_window_view(x, (kernel, kernel), axis=(2, 3))  # N,C,H',W',k,k
    n, c, h, w = win.shape[:4]
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(n, h, w, c * kernel * kernel)


def conv_forward_current(weights: np.ndarray, spikes_in: np.ndarray) -> np.ndarray:
    """Valid, stride-1 cross-correlation of inputs with every kernel.

    ``weights`` is (C_out, C_in, k, k), ``spikes_in`` is (N, C_in, H, W);
    returns (N, C_out, H-k+1, W-k+1).
    """
    c_out, c_in, k, k2 = weights.shape
    if k != k2:
        raise ConfigError("only square kernels are supported")
    if spikes_in.ndim != 4 or spikes_in.shape[1] != c_in:
        raise ConfigError(f"input shape {spikes_in.shape} does not match kernels {weights.shape}")
    patches = conv_patches(np.asarray(spikes_in, dtype=float), k)
    out = patches @ weights.reshape(c_out, -1).T  # N,H',W',C_out
    return out.transpose(0, 3, 1, 2)


def asf_filter(current, threshold, alpha_asf: float, beta_asf: float):
    """Sigmoid reshaping of the current relative to the firing threshold.

    delta(i) = thr / (1 + exp(sigma)),  sigma = -alpha * i / thr + beta

    The output lies in (0, thr).  ``threshold`` broadcasts against ``current``.
    """
    thr = np.asarray(threshold, dtype=float)
    if np.any(thr <= 0):
        raise ConfigError("adaptive synaptic filter needs a positive threshold")
    sigma = -alpha_asf * np.asarray(current) / thr + beta_asf
    return thr * expit(-sigma)


def atb_conv_threshold(current: np.ndarray, beta_thresh: float = 1.0) -> np.ndarray:
    """Per-sample threshold: ``beta_thresh`` times the sample's largest current."""
    return beta_thresh * current.reshape(current.shape[0], -1).max(axis=1)


def wta_select(spikes: np.ndarray, rng=None, draws=None) -> np.ndarray:
    """Keep one uniformly chosen spike per sample, zero the rest.

    The choice is driven by one uniform number per sample, either ``draws``
    (shape (N,)) or fresh values from ``rng``: with k firing neurons the
    ``floor(r * k)``-th of them in C order survives.
    """
    spikes = np.asarray(spikes, dtype=bool)
    n = spikes.shape[0]
    flat = spikes.reshape(n, -1)
    k = flat.sum(axis=1)
    if draws is None:
        draws = (rng if rng is not None else np.random.default_rng()).random(n)
    rank = np.minimum(np.floor(np.asarray(draws) * k), np.maximum(k - 1, 0))
    out = np.zeros_like(flat)
    live = np.flatnonzero(k)
    if live.size:
        csum = np.cumsum(flat[live], axis=1)
        idx = np.argmax(csum > rank[live, None], axis=1)
        out[live, idx] = True
    return out.reshape(spikes.shape)


def alic_inhibit(membrane: MembraneState, current: np.ndarray, winner_spikes: np.ndarray,
                 alpha_inh: float, i_max=None, gate_on_winner: bool = True) -> MembraneState:
    """Subtract ``alpha_inh * i_max`` from every non-winner driven above ``i_max / 2``.

    ``i_max`` defaults to the largest current over the whole batch.  Only
    samples that produced a winner this step inhibit their neighbours.
    """
    if i_max is None:
        i_max = float(current.max())
    i_max = np.asarray(i_max, dtype=float)
    n = current.shape[0]
    gate = (current > i_max / 2) & ~winner_spikes & (i_max > 0)
    if gate_on_winner:
        has_winner = winner_spikes.reshape(n, -1).any(axis=1)
        gate &= has_winner.reshape((n,) + (1,) * (current.ndim - 1))
    u = np.where(gate, membrane.u - alpha_inh * i_max, membrane.u)
    return MembraneState(u, membrane.fired)


def atb_fc_update(theta_plus: np.ndarray, spike_counts: np.ndarray, alpha_plus: float,
                  theta_init: float, gamma: float) -> np.ndarray:
    """Homeostatic threshold step for one batch.

    Raise every neuron's offset by ``alpha_plus`` per spike, then shift all
    offsets down by however far the largest threshold exceeds ``gamma``,
    flooring them at 0.
    """
    theta = theta_plus + alpha_plus * np.asarray(spike_counts, dtype=float)
    excess = theta_init + theta.max() - gamma
    if excess > 0:
        theta = np.maximum(theta - excess, 0.0)
    return theta


def max_pool(spikes: np.ndarray, window: int = 2) -> np.ndarray:
    """OR over non-overlapping windows; trailing odd rows/columns are dropped."""
    n, c, h, w = spikes.shape
    h2, w2 = h // window, w // window
    s = spikes[:, :, :h2 * window, :w2 * window].reshape(n, c, h2, window, w2, window)
    return s.any(axis=(3, 5))


def pooled_periodic_counts(period: np.ndarray, timesteps: int, window: int = 2) -> np.ndarray:
    """Spike counts of :func:`max_pool` output for periodically firing inputs.

    ``period`` (N, C, H, W) holds each neuron's firing period (0 = silent).
    A pooled unit spikes at step t when any of its inputs has a period
    dividing t; the union is counted exactly by inclusion-exclusion.
    """
    n, c, h, w = period.shape
    h2, w2 = h // window, w // window
    p = period[:, :, :h2 * window, :w2 * window].reshape(n, c, h2, window, w2, window)
    p = p.transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h2, w2, window * window).astype(np.int64)
    p = np.where(p > 0, p, timesteps + 1)
    m = p.shape[-1]
    total = np.zeros((n, c, h2, w2), dtype=np.int64)
    for mask in range(1, 1 << m):
        members = [i for i in range(m) if mask >> i & 1]
        lcm = p[..., members[0]]
        for i in members[1:]:
            lcm = np.minimum(np.lcm(lcm, p[..., i]), timesteps + 1)
        sign = 1 if len(members) % 2 else -1
        total += sign * (timesteps // lcm)
    return total.astype(float)


def spike_normalize(spike_counts: np.ndarray) -> np.ndarray:
    """Divide each sample's counts by that sample's maximum; silent samples stay 0."""
    counts = np.asarray(spike_counts, dtype=float)
    flat = counts.reshape(counts.shape[0], -1)
    peak = flat.max(axis=1, keepdims=True)
    out = np.divide(flat, peak, out=np.zeros_like(flat), where=peak > 0)
    return out.reshape(counts.shape)


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------

@dataclass
class Mechanisms:
    """Which adaptive mechanisms a layer runs.

    ``alic`` covers both the winner-take-all selection and the membrane
    inhibition that follows it.
    """

    asf: bool = True
    atb: bool = True
    alic: bool = True


@dataclass(frozen=True)
class Competition:
    """How winner-take-all and lateral inhibition are applied.

    ``scope`` picks the reference current for inhibition: ``"batch"`` uses
    the largest current anywhere in the batch, ``"sample"`` each sample's own
    largest current.  With ``gate_on_winner`` only samples that produced a
    winner this step inhibit.  ``reset_losers`` resets every neuron that
    crossed threshold, winner or not; otherwise losers keep their potential.
    ``at_inference`` keeps competition running when the layer is not learning.
    """

    scope: str = "sample"
    gate_on_winner: bool = True
    reset_losers: bool = True
    at_inference: bool = False

    def __post_init__(self):
        if self.scope not in ("batch", "sample"):
            raise ConfigError(f"inhibition scope must be 'batch' or 'sample', got {self.scope!r}")


class _Spiking:
    """Shared timestep logic for the competitive layers."""

    name = "layer"

    def step(self, membrane: MembraneState, current, drive, thr, draws=None, compete=True):
        """One timestep; returns (membrane, output spikes).

        ``draws`` holds one uniform number per sample for the winner choice.
        """
        lif_thr = np.where(thr > 0, thr, np.inf)
        comp = self.competition
        if not (compete and self.mech.alic):
            return lif_step(membrane, drive, lif_thr, self.neuron, self.name)
        if comp.reset_losers:
            membrane, spikes = lif_step(membrane, drive, lif_thr, self.neuron, self.name)
            spikes = wta_select(spikes, draws=draws)
        else:
            u = self.neuron.decay * membrane.u + drive / self.neuron.capacitance
            spikes = wta_select(u >= lif_thr, draws=draws)
            membrane = MembraneState(np.where(spikes, 0.0, u), spikes)
        if comp.scope == "sample":
            i_max = current.reshape(current.shape[0], -1).max(axis=1)
            i_max = i_max.reshape((-1,) + (1,) * (current.ndim - 1))
        else:
            i_max = None
        membrane = alic_inhibit(membrane, current, spikes, self.alpha_inh, i_max,
                                comp.gate_on_winner)
        return membrane, spikes

    def _competing(self, learn, compete):
        if compete is None:
            compete = learn or self.competition.at_inference
        return compete and self.mech.alic

    @staticmethod
    def _draws(draws, rng, n, timesteps):
        if draws is not None:
            draws = np.asarray(draws, dtype=float)
            if draws.shape != (n, timesteps):
                raise ConfigError(f"draw transcript must be ({n}, {timesteps}), got {draws.shape}")
            return draws
        if rng is None:
            raise ConfigError("a seeded rng or a draw transcript is required when competition is on")
        return rng.random((timesteps, n)).T


class ConvLayer(_Spiking):
    """Spiking convolution (valid, stride 1) trained with batched STDP."""

    name = "conv"

    def __init__(self, weights: np.ndarray, *, beta_thresh=1.0, alpha_asf=8.0, beta_asf=1.6,
                 alpha_inh=1.625, theta_init=10.0, a_minus_conv=1.0,
                 neuron: NeuronConfig = NeuronConfig(10.0),
                 mechanisms: Mechanisms | None = None, competition: Competition | None = None):
        self.weights = np.asarray(weights, dtype=float)
        self.competition = competition or Competition()
        self.beta_thresh = beta_thresh
        self.alpha_asf = alpha_asf
        self.beta_asf = beta_asf
        self.alpha_inh = alpha_inh
        self.theta_init = theta_init
        self.a_minus_conv = a_minus_conv
        self.neuron = neuron
        self.mech = mechanisms or Mechanisms()

    @classmethod
    def initialize(cls, in_channels, out_channels, kernel, rng, **kw) -> "ConvLayer":
        w = rng.random((out_channels, in_channels, kernel, kernel))
        layer = cls(w, **kw)
        layer.weights = normalize_conv(layer.weights, layer.a_minus_conv)
        return layer

    @property
    def kernel(self) -> int:
        return self.weights.shape[-1]

    def output_shape(self, in_shape):
        c, h, w = in_shape
        return (self.weights.shape[0], h - self.kernel + 1, w - self.kernel + 1)

    def thresholds(self, current: np.ndarray) -> np.ndarray:
        """Per-sample firing threshold broadcastable against ``current``."""
        n = current.shape[0]
        if self.mech.atb:
            thr = atb_conv_threshold(current, self.beta_thresh)
        else:
            thr = np.full(n, float(self.theta_init))
        return thr.reshape((n,) + (1,) * (current.ndim - 1))

    def drive(self, current: np.ndarray, thr: np.ndarray) -> np.ndarray:
        """Current actually integrated by the membrane (filtered when ASF is on)."""
        if not self.mech.asf:
            return current
        out = np.zeros_like(current)
        ok = thr[:, 0, 0, 0] > 0
        if ok.any():
            out[ok] = asf_filter(current[ok], thr[ok], self.alpha_asf, self.beta_asf)
        return out

    def present(self, x: np.ndarray, timesteps: int, *, rng=None, learn=False,
                stdp: StdpConfig | None = None, compete=None, record=False, draws=None):
        """Simulate one presentation of a batch of direct-encoded inputs.

        Returns pooled spike counts (N, C, H'/2, W'/2).  With ``learn`` the
        kernels receive a batched STDP update every ``stdp.t_batch`` steps,
        followed by kernel standardization.  ``compete`` defaults to ``learn``
        unless the layer's competition also runs at inference.  Winner
        choices consume ``draws`` (N, timesteps) when given, else ``rng``.
        With ``record`` a list of per-step unpooled spike arrays is returned too.
        """
        x = np.asarray(x, dtype=float)
        compete = self._competing(learn, compete)
        stdp = stdp or StdpConfig()
        n = x.shape[0]
        transcript = self._draws(draws, rng, n, timesteps) if compete else None
        if not (learn or record or compete):
            current = conv_forward_current(self.weights, x)
            thr = self.thresholds(current)
            drive = self.drive(current, thr)
            period = first_passage(drive, np.where(thr > 0, thr, np.inf), self.neuron, timesteps)
            return pooled_periodic_counts(period, timesteps)
        k = self.kernel
        patches = conv_patches(x, k) if learn else None
        c_out, h, w = self.output_shape(x.shape[1:])
        membrane = MembraneState.zeros((n, c_out, h, w))
        pooled_counts = np.zeros((n, c_out, h // 2, w // 2))
        raster = [] if record else None
        acc = UpdateAccumulator.zeros((c_out, x.shape[1] * k * k))
        weighted = np.zeros((n, c_out, h, w))
        g = 0.0
        current = thr = drive = None
        for t in range(timesteps):
            if current is None:
                current = conv_forward_current(self.weights, x)
                thr = self.thresholds(current)
                drive = self.drive(current, thr)
            step_draws = transcript[:, t] if compete else None
            membrane, spikes = self.step(membrane, current, drive, thr, step_draws, compete)
            pooled_counts += max_pool(spikes)
            if record:
                raster.append(spikes.copy())
            if learn:
                g = stdp.lambda_plus * g + 1.0
                weighted += g * spikes
                acc.contribution_count += spikes.sum(axis=(0, 2, 3))
                acc.sample_steps += n
                if (t + 1) % stdp.t_batch == 0 or t + 1 == timesteps:
                    self._fold(acc, weighted, patches, stdp.x_offset)
                    weighted[...] = 0.0
                    if not acc.empty:
                        self.weights = normalize_conv(
                            apply_stb_update(self.weights, acc, stdp), self.a_minus_conv)
                        current = None
                    acc.clear()
        return (pooled_counts, raster) if record else pooled_counts

    def _fold(self, acc, weighted, patches, x_offset):
        # sum_t s(t) * (x * g[t] - offset) over every spike position
        c_out = weighted.shape[1]
        acc.delta_w += (np.einsum("nchw,nhwp->cp", weighted, patches)
                        - x_offset * acc.contribution_count[:, None])
        assert acc.delta_w.shape[0] == c_out


class FcLayer(_Spiking):
    """Fully connected spiking layer with homeostatic per-neuron thresholds."""

    name = "fc"

    def __init__(self, weights: np.ndarray, *, theta_init=10.0, alpha_plus=0.001, gamma=15.0,
                 alpha_inh=1.625, a_minus_fc=0.01, alpha_asf=8.0, beta_asf=1.6,
                 neuron: NeuronConfig = NeuronConfig(2.0),
                 mechanisms: Mechanisms | None = None, asf=False,
                 competition: Competition | None = None):
        self.weights = np.asarray(weights, dtype=float)
        self.competition = competition or Competition(at_inference=True)
        self.theta_plus = np.zeros(self.weights.shape[0])
        self.theta_init = theta_init
        self.alpha_plus = alpha_plus
        self.gamma = gamma
        self.alpha_inh = alpha_inh
        self.a_minus_fc = a_minus_fc
        self.alpha_asf = alpha_asf
        self.beta_asf = beta_asf
        self.neuron = neuron
        self.mech = mechanisms or Mechanisms()
        self.asf = asf and self.mech.asf

    @classmethod
    def initialize(cls, n_in, n_out, rng, **kw) -> "FcLayer":
        layer = cls(rng.random((n_out, n_in)), **kw)
        layer.weights = normalize_fc(layer.weights, layer.a_minus_fc)
        return layer

    @property
    def threshold(self) -> np.ndarray:
        if self.mech.atb:
            return self.theta_init + self.theta_plus
        return np.full(self.weights.shape[0], float(self.theta_init))

    def forward_current(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.ndim != 2 or x.shape[1] != self.weights.shape[1]:
            raise ConfigError(f"fc input {x.shape} does not match weights {self.weights.shape}")
        return x @ self.weights.T

    def drive(self, current: np.ndarray, thr: np.ndarray) -> np.ndarray:
        if not self.asf:
            return current
        return asf_filter(current, np.broadcast_to(thr, current.shape), self.alpha_asf,
                          self.beta_asf)

    def present(self, x: np.ndarray, timesteps: int, *, rng=None, learn=False,
                stdp: StdpConfig | None = None, compete=None, record=False, draws=None):
        """Simulate one presentation; returns spike counts (N, n_out).

        With ``learn``, weights get a batched STDP update (then row
        normalization) and thresholds a homeostatic update every
        ``stdp.t_batch`` steps.
        """
        x = np.asarray(x, dtype=float)
        compete = self._competing(learn, compete)
        stdp = stdp or StdpConfig()
        n = x.shape[0]
        transcript = self._draws(draws, rng, n, timesteps) if compete else None
        if not (learn or record or compete):
            current = self.forward_current(x)
            thr = self.threshold
            period = first_passage(self.drive(current, thr), thr, self.neuron, timesteps)
            return np.where(period > 0, timesteps // np.maximum(period, 1), 0).astype(float)
        n_out = self.weights.shape[0]
        membrane = MembraneState.zeros((n, n_out))
        counts = np.zeros((n, n_out))
        raster = [] if record else None
        acc = UpdateAccumulator.zeros(self.weights.shape)
        weighted = np.zeros((n, n_out))
        window_counts = np.zeros(n_out)
        g = 0.0
        current = drive = None
        thr = self.threshold
        for t in range(timesteps):
            if current is None:
                current = self.forward_current(x)
                thr = self.threshold
                drive = self.drive(current, thr)
            step_draws = transcript[:, t] if compete else None
            membrane, spikes = self.step(membrane, current, drive, thr, step_draws, compete)
            counts += spikes
            if record:
                raster.append(spikes.copy())
            if learn:
                g = stdp.lambda_plus * g + 1.0
                weighted += g * spikes
                step_counts = spikes.sum(axis=0)
                window_counts += step_counts
                acc.contribution_count += step_counts.astype(np.int64)
                acc.sample_steps += n
                if (t + 1) % stdp.t_batch == 0 or t + 1 == timesteps:
                    if not acc.empty:
                        acc.delta_w += weighted.T @ x - stdp.x_offset * acc.contribution_count[:, None]
                        self.weights = normalize_fc(apply_stb_update(self.weights, acc, stdp),
                                                    self.a_minus_fc)
                        current = None
                    if self.mech.atb:
                        self.theta_plus = atb_fc_update(self.theta_plus, window_counts,
                                                        self.alpha_plus, self.theta_init, self.gamma)
                        current = None
                    acc.clear()
                    weighted[...] = 0.0
                    window_counts[...] = 0.0
        return (counts, raster) if record else counts
