"""Layer-wise training and vote-based evaluation of whole networks."""
from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .errors import ConfigError, NumericalDivergence
from .layers import Competition, ConvLayer, FcLayer, Mechanisms, spike_normalize
from .neuron import NeuronConfig
from .plasticity import StdpConfig

log = logging.getLogger(__name__)

N_CLASSES = 10

# Winner draws at inference come from one generator per sample, keyed by the
# run seed, this tag and the sample position, so predictions do not depend
# on how samples are grouped into batches.
_INFERENCE_STREAM = 0x5EED


@dataclass
class NetworkSpec:
    """Everything needed to rebuild and retrain one network."""

    in_shape: tuple = (1, 28, 28)
    kernel: int = 5
    conv_channels: int = 12
    fc_neurons: int = 6400
    timesteps: int = 300
    a_minus_fc: float = 0.01
    a_minus_conv: float = 1.0
    alpha_inh: float = 1.625
    theta_init: float = 10.0
    alpha_asf: float = 8.0
    beta_asf: float = 1.6
    alpha_plus: float = 0.001
    lambda_plus: float = 0.99
    beta_thresh: float = 1.0
    x_offset: float = 0.3
    gamma: float = 15.0
    tau_conv: float = 10.0
    tau_fc: float = 2.0
    n_batch: int = 32
    t_batch: int = 30
    epochs_conv: int = 1
    epochs_fc: int = 3
    asf: bool = True
    alic: bool = True
    atb: bool = True
    fc_asf: bool = False
    inhibition_scope: str = "sample"
    inhibition_gated: bool = True
    reset_losers: bool = True
    conv_compete_at_inference: bool = False
    fc_compete_at_inference: bool = True
    readout: str = "mean"

    def __post_init__(self):
        self.in_shape = tuple(int(v) for v in self.in_shape)
        self.validate()

    def validate(self) -> None:
        if len(self.in_shape) != 3 or min(self.in_shape) < 1:
            raise ConfigError(f"in_shape must be (channels, height, width), got {self.in_shape}")
        for name in ("kernel", "conv_channels", "fc_neurons", "timesteps", "n_batch", "t_batch"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be a positive integer")
        for name in ("epochs_conv", "epochs_fc"):
            if int(getattr(self, name)) < 0:
                raise ConfigError(f"{name} must be >= 0")
        for name in ("a_minus_fc", "a_minus_conv", "theta_init", "alpha_asf", "beta_thresh"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")
        for name in ("alpha_inh", "alpha_plus", "x_offset"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if not 0 <= self.lambda_plus < 1:
            raise ConfigError("lambda_plus must lie in [0, 1)")
        if self.gamma < self.theta_init:
            raise ConfigError("gamma must be at least theta_init")
        if self.tau_conv <= 1 or self.tau_fc <= 1:
            raise ConfigError("membrane time constants must exceed 1")
        if self.inhibition_scope not in ("batch", "sample"):
            raise ConfigError("inhibition_scope must be 'batch' or 'sample'")
        if self.readout not in ("mean", "max"):
            raise ConfigError("readout must be 'mean' or 'max'")
        c, h, w = self.in_shape
        if h - self.kernel + 1 < 2 or w - self.kernel + 1 < 2:
            raise ConfigError(f"kernel {self.kernel} too large for input {self.in_shape}")

    @classmethod
    def for_dataset(cls, dataset: str, **overrides) -> "NetworkSpec":
        presets = {
            "mnist": dict(in_shape=(1, 28, 28), kernel=5, conv_channels=12, fc_neurons=6400),
            "mnist5k": dict(in_shape=(1, 28, 28), kernel=5, conv_channels=12, fc_neurons=6400),
            "fashion": dict(in_shape=(1, 28, 28), kernel=3, conv_channels=64, fc_neurons=6400),
            "cifar10": dict(in_shape=(3, 32, 32), kernel=5, conv_channels=64, fc_neurons=3200),
        }
        if dataset not in presets:
            raise ConfigError(f"unknown dataset {dataset!r}")
        return cls(**{**presets[dataset], **overrides})

    @property
    def conv_out_shape(self) -> tuple:
        c, h, w = self.in_shape
        k = self.kernel
        return (self.conv_channels, (h - k + 1) // 2, (w - k + 1) // 2)

    @property
    def fc_inputs(self) -> int:
        return int(np.prod(self.conv_out_shape))

    @property
    def mechanisms(self) -> Mechanisms:
        return Mechanisms(asf=self.asf, alic=self.alic, atb=self.atb)

    @property
    def stdp(self) -> StdpConfig:
        return StdpConfig(self.x_offset, self.lambda_plus, self.n_batch, self.t_batch)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["in_shape"] = list(self.in_shape)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkSpec":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown network keys: {sorted(unknown)}")
        return cls(**d)

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


@dataclass
class VotingTable:
    assignment: np.ndarray  # class per fc neuron, -1 when silent on every class
    response_matrix: np.ndarray  # mean firing rate per (neuron, class)

    @classmethod
    def from_responses(cls, rates: np.ndarray, labels: np.ndarray) -> "VotingTable":
        labels = np.asarray(labels)
        resp = np.zeros((rates.shape[1], N_CLASSES))
        for c in range(N_CLASSES):
            mask = labels == c
            if mask.any():
                resp[:, c] = rates[mask].mean(axis=0)
        assignment = np.where(resp.max(axis=1) > 0, resp.argmax(axis=1), -1)
        return cls(assignment.astype(np.int64), resp)


@dataclass
class MetricsRecord:
    epoch: int
    split: str
    accuracy: float
    per_class_accuracy: np.ndarray
    confusion: np.ndarray  # (true, predicted) counts
    unpredicted: np.ndarray  # per true class, samples with no prediction (-1)
    wall_time: float
    label: str = ""

    def csv_row(self) -> dict:
        row = {"label": self.label, "epoch": self.epoch, "split": self.split,
               "accuracy": f"{self.accuracy:.6f}", "wall_time_s": f"{self.wall_time:.3f}"}
        for c, a in enumerate(self.per_class_accuracy):
            row[f"acc_class_{c}"] = "" if np.isnan(a) else f"{a:.6f}"
        return row

    def to_json(self) -> dict:
        return {"label": self.label, "epoch": self.epoch, "split": self.split,
                "accuracy": self.accuracy,
                "per_class_accuracy": [None if np.isnan(a) else float(a)
                                       for a in self.per_class_accuracy],
                "confusion": self.confusion.tolist(), "unpredicted": self.unpredicted.tolist(),
                "wall_time_s": self.wall_time}


@dataclass
class Network:
    spec: NetworkSpec
    conv: ConvLayer
    fc: FcLayer
    seed: int
    votes: VotingTable | None = None
    history: list = field(default_factory=list)

    @classmethod
    def initialize(cls, spec: NetworkSpec, seed: int) -> "Network":
        rng = np.random.default_rng(seed)
        conv, fc = build_layers(spec, rng)
        return cls(spec, conv, fc, seed)

    def features(self, x: np.ndarray, chunk: int = 256) -> np.ndarray:
        """Spike-normalized pooled conv rates, flattened per sample."""
        out = np.empty((x.shape[0], self.spec.fc_inputs))
        for lo in range(0, x.shape[0], chunk):
            part = x[lo:lo + chunk]
            draws = (inference_draws(self.seed, lo, len(part), self.spec.timesteps, 1)
                     if self.conv._competing(False, None) else None)
            counts = self.conv.present(part, self.spec.timesteps, draws=draws)
            out[lo:lo + chunk] = spike_normalize(counts).reshape(len(part), -1)
        return out

    def fc_rates(self, features: np.ndarray, chunk: int = 256) -> np.ndarray:
        """Fc firing rates (spikes per step) for fixed input features."""
        out = np.empty((features.shape[0], self.spec.fc_neurons))
        for lo in range(0, features.shape[0], chunk):
            part = features[lo:lo + chunk]
            draws = (inference_draws(self.seed, lo, len(part), self.spec.timesteps, 2)
                     if self.fc._competing(False, None) else None)
            out[lo:lo + chunk] = self.fc.present(part, self.spec.timesteps, draws=draws)
        return out / self.spec.timesteps

    def rates(self, x: np.ndarray, chunk: int = 256) -> np.ndarray:
        return self.fc_rates(self.features(x, chunk), chunk)


def inference_draws(seed: int, start: int, n: int, timesteps: int, layer_tag: int) -> np.ndarray:
    """Per-sample winner draws for samples ``start .. start + n - 1``."""
    return np.stack([np.random.default_rng([seed, _INFERENCE_STREAM, layer_tag, start + i])
                     .random(timesteps) for i in range(n)]) if n else np.zeros((0, timesteps))


def build_layers(spec: NetworkSpec, rng) -> tuple[ConvLayer, FcLayer]:
    mech = spec.mechanisms
    conv = ConvLayer.initialize(
        spec.in_shape[0], spec.conv_channels, spec.kernel, rng,
        beta_thresh=spec.beta_thresh, alpha_asf=spec.alpha_asf, beta_asf=spec.beta_asf,
        alpha_inh=spec.alpha_inh, theta_init=spec.theta_init, a_minus_conv=spec.a_minus_conv,
        neuron=NeuronConfig(spec.tau_conv), mechanisms=mech,
        competition=Competition(spec.inhibition_scope, spec.inhibition_gated,
                                spec.reset_losers, spec.conv_compete_at_inference))
    fc = FcLayer.initialize(
        spec.fc_inputs, spec.fc_neurons, rng,
        theta_init=spec.theta_init, alpha_plus=spec.alpha_plus, gamma=spec.gamma,
        alpha_inh=spec.alpha_inh, a_minus_fc=spec.a_minus_fc, alpha_asf=spec.alpha_asf,
        beta_asf=spec.beta_asf, neuron=NeuronConfig(spec.tau_fc), mechanisms=mech,
        asf=spec.fc_asf,
        competition=Competition(spec.inhibition_scope, spec.inhibition_gated,
                                spec.reset_losers, spec.fc_compete_at_inference))
    return conv, fc


def _check_finite(weights: np.ndarray, layer: str, batch_index, dump_dir) -> None:
    if np.isfinite(weights).all():
        return
    bad = tuple(int(i) for i in np.argwhere(~np.isfinite(weights))[0])
    if dump_dir is not None:
        path = Path(dump_dir) / f"divergence_{layer}.npz"
        path.parent.mkdir(parents=True, exist_ok=True)
        np.savez(path, weights=weights, batch_index=np.asarray(batch_index))
        log.error("weights of %s diverged; last batch dumped to %s", layer, path)
    raise NumericalDivergence(layer, bad, "weight")


EpochHook = Callable[[str, int, "Network"], None]


def train_layerwise(spec: NetworkSpec, x: np.ndarray, seed: int, *,
                    on_epoch: EpochHook | None = None, dump_dir=None) -> Network:
    """Train the conv layer on ``x``, freeze it, then train the fc layer on its rates.

    ``x`` holds direct-encoded inputs (N, C, H, W).  Labels are never seen
    here.  ``on_epoch(phase, epoch, network)`` runs after every epoch.
    """
    x = np.asarray(x, dtype=float)
    if x.shape[1:] != spec.in_shape:
        raise ConfigError(f"inputs {x.shape[1:]} do not match network input {spec.in_shape}")
    rng = np.random.default_rng(seed)
    conv, fc = build_layers(spec, rng)
    net = Network(spec, conv, fc, seed)
    stdp = spec.stdp
    for epoch in range(spec.epochs_conv):
        t0 = time.perf_counter()
        order = rng.permutation(len(x))
        for lo in range(0, len(x), spec.n_batch):
            idx = order[lo:lo + spec.n_batch]
            conv.present(x[idx], spec.timesteps, rng=rng, learn=True, stdp=stdp)
            _check_finite(conv.weights, "conv", idx, dump_dir)
        log.info("conv epoch %d done in %.1fs", epoch, time.perf_counter() - t0)
        net.history.append(("conv", epoch, time.perf_counter() - t0))
        if on_epoch:
            on_epoch("conv", epoch, net)
    feats = net.features(x) if spec.epochs_fc else None
    for epoch in range(spec.epochs_fc):
        t0 = time.perf_counter()
        order = rng.permutation(len(x))
        for lo in range(0, len(x), spec.n_batch):
            idx = order[lo:lo + spec.n_batch]
            fc.present(feats[idx], spec.timesteps, rng=rng, learn=True, stdp=stdp)
            _check_finite(fc.weights, "fc", idx, dump_dir)
        log.info("fc epoch %d done in %.1fs", epoch, time.perf_counter() - t0)
        net.history.append(("fc", epoch, time.perf_counter() - t0))
        if on_epoch:
            on_epoch("fc", epoch, net)
    return net


def assign_votes(net: Network, x: np.ndarray, labels: np.ndarray) -> VotingTable:
    net.votes = VotingTable.from_responses(net.rates(x), labels)
    return net.votes


def class_scores(rates: np.ndarray, votes: VotingTable, readout: str = "mean") -> np.ndarray:
    scores = np.zeros((rates.shape[0], N_CLASSES))
    for c in range(N_CLASSES):
        members = votes.assignment == c
        if members.any():
            group = rates[:, members]
            scores[:, c] = group.mean(axis=1) if readout == "mean" else group.max(axis=1)
    return scores


def predict_from_rates(rates: np.ndarray, votes: VotingTable, readout: str = "mean") -> np.ndarray:
    """Class with the strongest assigned group; ties go to the lower class, silence to -1."""
    scores = class_scores(rates, votes, readout)
    return np.where(scores.max(axis=1) > 0, scores.argmax(axis=1), -1)


def predict(net: Network, x: np.ndarray, votes: VotingTable | None = None) -> np.ndarray:
    votes = votes or net.votes
    if votes is None:
        raise ConfigError("network has no voting table; run assign_votes first")
    return predict_from_rates(net.rates(x), votes, net.spec.readout)


def metrics_from_predictions(pred: np.ndarray, labels: np.ndarray, *, epoch=0, split="test",
                             wall_time=0.0, label="") -> MetricsRecord:
    labels = np.asarray(labels, dtype=np.int64)
    pred = np.asarray(pred, dtype=np.int64)
    confusion = np.zeros((N_CLASSES, N_CLASSES), dtype=np.int64)
    ok = pred >= 0
    np.add.at(confusion, (labels[ok], pred[ok]), 1)
    unpredicted = np.bincount(labels[~ok], minlength=N_CLASSES)[:N_CLASSES]
    per_class_n = np.bincount(labels, minlength=N_CLASSES)[:N_CLASSES]
    with np.errstate(invalid="ignore", divide="ignore"):
        per_class = np.where(per_class_n > 0, np.diag(confusion) / per_class_n, np.nan)
    acc = float((pred == labels).mean()) if labels.size else float("nan")
    return MetricsRecord(epoch, split, acc, per_class, confusion, unpredicted, wall_time, label)


def evaluate(net: Network, x: np.ndarray, labels: np.ndarray, *, split="test", epoch=0,
             label="", votes: VotingTable | None = None) -> MetricsRecord:
    t0 = time.perf_counter()
    pred = predict(net, x, votes)
    return metrics_from_predictions(pred, labels, epoch=epoch, split=split,
                                    wall_time=time.perf_counter() - t0, label=label)


ABLATIONS = {
    "baseline": (),
    "w/o ASF": ("asf",),
    "w/o ASF+ALIC": ("asf", "alic"),
    "w/o ASF+ALIC+ATB": ("asf", "alic", "atb"),
}


def disable(spec: NetworkSpec, flags) -> NetworkSpec:
    flags = tuple(flags)
    for f in flags:
        if f not in ("asf", "alic", "atb"):
            raise ConfigError(f"unknown mechanism {f!r}; choose from asf, alic, atb")
    return dataclasses.replace(spec, **{f: False for f in flags})


def train_and_evaluate(spec: NetworkSpec, x_train, y_train, x_test, y_test, seed: int,
                       label: str = "") -> tuple[Network, MetricsRecord]:
    t0 = time.perf_counter()
    net = train_layerwise(spec, x_train, seed)
    assign_votes(net, x_train, y_train)
    rec = evaluate(net, x_test, y_test, epoch=spec.epochs_conv + spec.epochs_fc, label=label)
    rec.wall_time = time.perf_counter() - t0
    return net, rec


def run_ablation(spec: NetworkSpec, flag_sets: dict, x_train, y_train, x_test, y_test,
                 seed: int) -> list[MetricsRecord]:
    """Train and score one network per named set of disabled mechanisms.

    Batched STDP stays on in every run; ATB off means fixed thresholds at
    ``theta_init``.
    """
    records = []
    for name, flags in flag_sets.items():
        _, rec = train_and_evaluate(disable(spec, flags), x_train, y_train, x_test, y_test,
                                    seed, label=name)
        log.info("ablation %s: accuracy %.4f", name, rec.accuracy)
        records.append(rec)
    return records


def kernel_similarity(weights: np.ndarray) -> float:
    """Mean pairwise |cosine| between flattened conv kernels."""
    w = weights.reshape(weights.shape[0], -1)
    w = w / np.linalg.norm(w, axis=1, keepdims=True)
    sim = np.abs(w @ w.T)
    iu = np.triu_indices(len(w), 1)
    return float(sim[iu].mean()) if iu[0].size else 0.0
