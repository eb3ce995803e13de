import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from spikeplast.errors import ConfigError, DegenerateWeights
from spikeplast.oracles import oracle_unbatched_stdp
from spikeplast.plasticity import (StdpConfig, TraceState, UpdateAccumulator, accumulate_stdp,
                                   apply_stb_update, normalize_conv, normalize_fc,
                                   tau_from_lambda, trace_step, window_stdp_oracle)


def test_trace_examples():
    assert trace_step(TraceState(np.array([0.0])), [1]).x_trace[0] == 1.0
    assert trace_step(TraceState(np.array([1.0])), [0]).x_trace[0] == pytest.approx(0.99)
    assert trace_step(TraceState(np.array([0.99])), [1]).x_trace[0] == pytest.approx(1.9801)


def _acc_one(x, post):
    acc = UpdateAccumulator.zeros((1, 1))
    return accumulate_stdp(acc, TraceState(np.array([[x]])), np.array([[post]]), 0.3)


def test_accumulate_examples():
    assert _acc_one(1.0, 0).delta_w[0, 0] == 0.0
    assert _acc_one(1.0, 1).delta_w[0, 0] == pytest.approx(0.7)
    assert _acc_one(0.1, 1).delta_w[0, 0] == pytest.approx(-0.2)
    assert _acc_one(0.1, 1).contribution_count[0] == 1


def test_accumulate_shape_mismatch():
    acc = UpdateAccumulator.zeros((2, 3))
    with pytest.raises(ConfigError):
        accumulate_stdp(acc, TraceState(np.zeros((1, 4))), np.zeros((1, 2)), 0.3)


def test_stb_examples():
    w = np.zeros((1, 1))
    acc = UpdateAccumulator(np.array([[0.7]]), np.array([1]), 1)
    assert apply_stb_update(w, acc, StdpConfig(n_batch=1, t_batch=1))[0, 0] == pytest.approx(0.7)
    assert acc.empty and acc.sample_steps == 0
    acc = UpdateAccumulator(np.array([[0.7 + 0.69 - 0.2 + 0.0]]), np.array([4]), 4)
    out = apply_stb_update(w, acc, StdpConfig(n_batch=2, t_batch=2))
    assert out[0, 0] == pytest.approx(0.2975)


def test_silent_batch_is_noop(caplog):
    w = np.ones((2, 2))
    acc = UpdateAccumulator.zeros((2, 2))
    acc.sample_steps = 4
    with caplog.at_level("DEBUG"):
        out = apply_stb_update(w, acc, StdpConfig())
    assert np.array_equal(out, w)
    assert "no postsynaptic spikes" in caplog.text


def test_stdp_config_validation():
    with pytest.raises(ConfigError):
        StdpConfig(x_offset=-1)
    with pytest.raises(ConfigError):
        StdpConfig(lambda_plus=1.0)
    with pytest.raises(ConfigError):
        StdpConfig(n_batch=0)


def test_normalize_fc_examples():
    assert np.allclose(normalize_fc(np.array([[1.0, 3.0]]), 0.01), [[0.005, 0.015]])
    assert np.allclose(normalize_fc(np.full((1, 5), 7.0), 0.01), 0.01)
    with pytest.raises(DegenerateWeights) as exc:
        normalize_fc(np.array([[1.0, 1.0], [1.0, -1.0]]))
    assert exc.value.index == 1


def test_normalize_conv_examples():
    out = normalize_conv(np.array([[[[0.0, 1.0, 2.0]]]]), 1.0)
    assert np.allclose(out.ravel(), [-1.2247448714, 0.0, 1.2247448714])
    z = normalize_conv(np.random.default_rng(0).random((3, 1, 5, 5)))
    assert np.allclose(normalize_conv(z), z, atol=1e-12)
    with pytest.raises(DegenerateWeights) as exc:
        normalize_conv(np.stack([np.arange(4.0), np.ones(4)]).reshape(2, 1, 2, 2))
    assert exc.value.index == 1


@given(seed=st.integers(0, 10_000), a=st.floats(0.01, 5))
def test_normalize_conv_fixed_point(seed, a):
    w = np.random.default_rng(seed).normal(size=(4, 2, 3, 3)) * 7 + 3
    out = normalize_conv(w, a).reshape(4, -1)
    assert np.all(np.abs(out.mean(axis=1)) < 1e-9)
    assert np.all(np.abs(out.std(axis=1) - a) < 1e-9)


@given(seed=st.integers(0, 10_000), a=st.floats(0.001, 1))
def test_normalize_fc_fixed_point(seed, a):
    w = np.random.default_rng(seed).random((5, 17)) + 0.01
    out = normalize_fc(w, a)
    assert np.all(np.abs(out.mean(axis=1) - a) < 1e-12)


def test_window_oracle_examples():
    tau = tau_from_lambda(0.99)
    assert window_stdp_oracle([0, 3], [], 1.0, tau, 0.3) == 0.0
    assert window_stdp_oracle([0], [1], 1.0, tau, 0.3) == pytest.approx(0.69)
    assert window_stdp_oracle([1], [1], 1.0, tau, 0.3) == 0.0


def _trace_sum(pre_times, post_times, lam, offset, steps):
    trace = TraceState.zeros((1, 1), lam)
    acc = UpdateAccumulator.zeros((1, 1))
    for t in range(steps):
        trace = trace_step(trace, [[1.0 if t in pre_times else 0.0]])
        accumulate_stdp(acc, trace, [[t in post_times]], offset)
    return acc.delta_w[0, 0]


@st.composite
def ordered_trains(draw):
    split = draw(st.integers(1, 9))
    pre = draw(st.sets(st.integers(0, split - 1), min_size=1, max_size=split))
    post = draw(st.sets(st.integers(split, 9), min_size=1, max_size=10 - split))
    return sorted(pre), sorted(post)


@given(trains=ordered_trains(), lam=st.floats(0.5, 0.999))
def test_trace_equals_window_without_offset(trains, lam):
    pre, post = trains
    got = _trace_sum(pre, post, lam, 0.0, 10)
    want = window_stdp_oracle(pre, post, 1.0, tau_from_lambda(lam), 0.0)
    assert abs(got - want) < 1e-9


@given(trains=ordered_trains(), offset=st.floats(0, 1))
def test_trace_equals_window_single_pre_spike(trains, offset):
    pre, post = trains
    pre = pre[:1]
    got = _trace_sum(pre, post, 0.99, offset, 10)
    want = window_stdp_oracle(pre, post, 1.0, tau_from_lambda(0.99), offset)
    assert abs(got - want) < 1e-9


def test_offset_counts_once_per_post_spike():
    # the trace form charges the offset per postsynaptic spike, the pairwise
    # window per pair, so several earlier pre spikes make them differ
    got = _trace_sum([0, 1], [2], 0.99, 0.3, 3)
    want = window_stdp_oracle([0, 1], [2], 1.0, tau_from_lambda(0.99), 0.3)
    assert got == pytest.approx(0.99 ** 2 + 0.99 - 0.3)
    assert want == pytest.approx(0.99 ** 2 + 0.99 - 0.6)


def _stb(pre, post, lam, offset):
    n, steps, n_in = pre.shape
    acc = UpdateAccumulator.zeros((post.shape[2], n_in))
    trace = TraceState.zeros((n, n_in), lam)
    for t in range(steps):
        trace = trace_step(trace, pre[:, t])
        accumulate_stdp(acc, trace, post[:, t], offset)
    return apply_stb_update(np.zeros(acc.delta_w.shape), acc, StdpConfig(offset, lam, n, steps))


@given(seed=st.integers(0, 100_000), n=st.integers(1, 4), steps=st.integers(1, 5))
def test_stb_equals_unbatched_mean(seed, n, steps):
    r = np.random.default_rng(seed)
    pre = r.random((n, steps, 5)) < 0.5
    post = r.random((n, steps, 3)) < 0.4
    got = _stb(pre, post, 0.99, 0.3)
    want = oracle_unbatched_stdp(pre, post, 0.99, 0.3)
    assert np.max(np.abs(got - want)) <= 1e-12


def test_unbatched_oracle_examples():
    pre = np.array([[[1, 0]]])
    post = np.array([[[1]]])
    assert np.allclose(oracle_unbatched_stdp(pre, post, 0.99, 0.3), [[0.7, -0.3]])
    assert np.all(oracle_unbatched_stdp(pre, np.zeros((1, 1, 1)), 0.99, 0.3) == 0)
    assert np.allclose(_stb(pre, post, 0.99, 0.3), [[0.7, -0.3]])


def test_accumulator_merge_is_order_independent(rng):
    parts = [UpdateAccumulator(rng.normal(size=(2, 3)), rng.integers(0, 4, 2), 3) for _ in range(4)]
    a = parts[0].merge(parts[1]).merge(parts[2].merge(parts[3]))
    b = parts[0].merge(parts[1]).merge(parts[2]).merge(parts[3])
    assert np.allclose(a.delta_w, b.delta_w, atol=1e-15)
    assert a.sample_steps == 12 and np.array_equal(a.contribution_count, b.contribution_count)


def test_tau_from_lambda():
    assert math.exp(-1 / tau_from_lambda(0.99)) == pytest.approx(0.99)
