import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from avssm.numeric_core import ShapeError, grad_check, make_rng
from avssm.ssm_core import (ContinuousSsm, DiscreteSteps, discretize_zoh, scan_backward, scan_chunked,
                            scan_sequential, scan_states, zoh_backward)


def random_steps(rng, T, batch=(), N=4):
    shape = (T,) + tuple(batch) + (N,)
    return DiscreteSteps(rng.uniform(0.0, 0.999, shape), rng.normal(size=shape), rng.normal(size=shape))


def naive_scan(a_bar, b_bar, c, x, h0):
    """Per-element loops, no broadcasting: an independent oracle for one channel."""
    T, N = a_bar.shape
    h = np.array(h0, dtype=float)
    ys = []
    for t in range(T):
        for n in range(N):
            h[n] = a_bar[t, n] * h[n] + b_bar[t, n] * x[t]
        ys.append(sum(c[t, n] * h[n] for n in range(N)))
    return np.array(ys), h


# ---------------------------------------------------------------- ZOH

def test_zoh_closed_form():
    a_bar, b_bar = discretize_zoh(np.array([-1.0]), np.array([1.0]), 1.0)
    assert abs(a_bar[0] - math.exp(-1)) < 1e-12
    assert abs(b_bar[0] - (1 - math.exp(-1))) < 1e-12


def test_zoh_small_delta_limit():
    a = np.array([-3.0, -0.2, -7.0])
    b = np.array([0.5, -1.5, 2.0])
    d = 1e-8
    a_bar, b_bar = discretize_zoh(a, b, d)
    assert np.all(np.abs(a_bar - 1) < 1e-7)
    assert np.all(np.abs(b_bar - d * b) < 1e-14)


def test_zoh_removable_singularity():
    _, b_bar = discretize_zoh(np.array([0.0]), np.array([2.0]), 0.5)
    assert b_bar[0] == 1.0


def test_zoh_series_branch_continuous():
    a = np.array([-1.0])
    b = np.array([1.0])
    # straddle the series threshold |delta*a| = 1e-6
    lo = discretize_zoh(a, b, 0.999e-6)[1][0] / 0.999e-6
    hi = discretize_zoh(a, b, 1.001e-6)[1][0] / 1.001e-6
    assert abs(lo - hi) < 1e-8


def test_zoh_rejects_nonpositive_delta():
    with pytest.raises(ValueError):
        discretize_zoh(np.array([-1.0]), np.array([1.0]), 0.0)
    with pytest.raises(ValueError):
        discretize_zoh(np.array([-1.0]), np.array([1.0]), -1.0)


@given(st.floats(-50, -1e-3), st.floats(1e-4, 10))
def test_zoh_abar_in_unit_interval(a, delta):
    a_bar, _ = discretize_zoh(np.array([a]), np.array([1.0]), delta)
    assert 0 < a_bar[0] < 1


def test_zoh_backward_matches_differences():
    rng = make_rng(0)
    a = -np.exp(rng.normal(size=6))
    b = rng.normal(size=6)
    delta = np.exp(rng.normal(-1, 1, size=6))
    delta[:2] = [1e-3, 2e-4]  # derivative series branch
    wa, wb = rng.normal(size=6), rng.normal(size=6)
    ga, gb, gd = zoh_backward(a, b, delta, wa, wb)

    def f(aa=a, bb=b, dd=delta):
        x, y = discretize_zoh(aa, bb, dd)
        return float(wa @ x + wb @ y)

    assert grad_check(lambda v: f(aa=v), ga, a) < 1e-5
    assert grad_check(lambda v: f(bb=v), gb, b) < 1e-5
    assert grad_check(lambda v: f(dd=v), gd, delta) < 1e-5


def test_continuous_ssm_validation():
    with pytest.raises(ValueError):
        ContinuousSsm([-1.0, 0.0], [1.0, 1.0], [1.0, 1.0])
    with pytest.raises(ShapeError):
        ContinuousSsm([-1.0], [1.0, 2.0], [1.0])
    m = ContinuousSsm.from_log([0.0, np.log(2.0)], [1.0, 1.0], [1.0, 1.0])
    assert np.array_equal(m.a_diag, [-1.0, -2.0]) and m.state_dim == 2
    steps = m.discretize(0.1)
    assert steps.a_bar.shape == (1, 2)


# ---------------------------------------------------------------- scans

def test_scan_memoryless():
    rng = make_rng(1)
    T, N = 6, 3
    b_bar, c, x = rng.normal(size=(T, N)), rng.normal(size=(T, N)), rng.normal(size=T)
    y, _ = scan_sequential(DiscreteSteps(np.zeros((T, N)), b_bar, c), x, rng.normal(size=N))
    assert np.allclose(y, np.sum(c * b_bar, axis=1) * x, atol=1e-14)


def test_scan_single_step():
    rng = make_rng(2)
    b, c = rng.normal(size=(1, 4)), rng.normal(size=(1, 4))
    y, h = scan_sequential(DiscreteSteps(rng.uniform(size=(1, 4)), b, c), np.array([1.7]), np.zeros(4))
    assert abs(y[0] - float(c[0] @ b[0]) * 1.7) < 1e-14
    assert np.allclose(h, b[0] * 1.7)


def test_scan_geometric_series():
    T, a, b, c = 50, 0.9, 0.7, 1.3
    steps = DiscreteSteps(np.full((T, 1), a), np.full((T, 1), b), np.full((T, 1), c))
    y, _ = scan_sequential(steps, np.ones(T), np.zeros(1))
    assert abs(y[-1] - c * b * (1 - a**T) / (1 - a)) < 1e-12


def test_scan_matches_naive_loop():
    rng = make_rng(3)
    steps = random_steps(rng, 20, N=3)
    x, h0 = rng.normal(size=20), rng.normal(size=3)
    y, h = scan_sequential(steps, x, h0)
    y_ref, h_ref = naive_scan(*steps, x, h0)
    assert np.allclose(y, y_ref, atol=1e-13) and np.allclose(h, h_ref, atol=1e-13)


def test_scan_batched_equals_per_channel():
    rng = make_rng(4)
    steps = random_steps(rng, 15, batch=(2, 3), N=4)
    x, h0 = rng.normal(size=(15, 2, 3)), rng.normal(size=(2, 3, 4))
    y, _ = scan_sequential(steps, x, h0)
    for i in range(2):
        for j in range(3):
            ys, _ = naive_scan(*(s[:, i, j] for s in steps), x[:, i, j], h0[i, j])
            assert np.allclose(y[:, i, j], ys, atol=1e-13)


def test_scan_chunk_one_bitwise_equal():
    rng = make_rng(5)
    steps = random_steps(rng, 37, batch=(3,), N=4)
    x, h0 = rng.normal(size=(37, 3)), rng.normal(size=(3, 4))
    y1, h1 = scan_sequential(steps, x, h0)
    y2, h2 = scan_chunked(steps, x, h0, 1)
    assert np.array_equal(y1, y2) and np.array_equal(h1, h2)


@pytest.mark.parametrize("chunk", [1, 2, 7, 64, 100, 105])
def test_scan_chunked_equivalence(chunk):
    rng = make_rng(chunk)
    T = 100
    steps = random_steps(rng, T, batch=(2,), N=5)
    x, h0 = rng.normal(size=(T, 2)), rng.normal(size=(2, 5))
    y1, h1 = scan_sequential(steps, x, h0)
    y2, h2 = scan_chunked(steps, x, h0, chunk)
    assert np.max(np.abs(y1 - y2)) < 1e-10 and np.max(np.abs(h1 - h2)) < 1e-10


def test_scan_chunked_long():
    rng = make_rng(6)
    steps = random_steps(rng, 2048, N=4)
    x = rng.normal(size=2048)
    y1, _ = scan_sequential(steps, x, np.zeros(4))
    y2, _ = scan_chunked(steps, x, np.zeros(4), 64)
    assert np.max(np.abs(y1 - y2)) < 1e-6


def test_scan_composition_exact():
    rng = make_rng(7)
    steps = random_steps(rng, 30, N=3)
    x, h0 = rng.normal(size=30), rng.normal(size=3)
    y, h = scan_sequential(steps, x, h0)
    k = 11
    ya, ha = scan_sequential(DiscreteSteps(*(s[:k] for s in steps)), x[:k], h0)
    yb, hb = scan_sequential(DiscreteSteps(*(s[k:] for s in steps)), x[k:], ha)
    assert np.array_equal(np.concatenate([ya, yb]), y) and np.array_equal(hb, h)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(-3, 3), st.floats(-3, 3))
def test_scan_linear_in_x(seed, alpha, beta):
    rng = make_rng(seed)
    steps = random_steps(rng, 25, N=3)
    x1, x2 = rng.normal(size=25), rng.normal(size=25)
    h0 = np.zeros(3)
    y = scan_sequential(steps, alpha * x1 + beta * x2, h0)[0]
    ref = alpha * scan_sequential(steps, x1, h0)[0] + beta * scan_sequential(steps, x2, h0)[0]
    assert np.max(np.abs(y - ref)) < 1e-9


def test_scan_stable_long_horizon():
    T = 100_000
    rng = make_rng(8)
    a = -np.exp(rng.normal(size=4))
    delta = np.exp(rng.normal(-2, 1, size=(T, 1)))
    a_bar, b_bar = discretize_zoh(a, np.ones(4), delta)
    c = np.ones((T, 4))
    x = rng.uniform(-1, 1, size=T)
    _, _, h = scan_states(DiscreteSteps(a_bar, b_bar, c), x, np.zeros(4), chunk=256)
    # |h| <= sup|x| * b_bar / (1 - a_bar) = sup|x| / |a| for ZOH
    assert np.all(np.isfinite(h)) and np.max(np.abs(h)) <= np.max(1.0 / np.abs(a)) + 1e-9


def test_scan_shape_errors():
    rng = make_rng(9)
    steps = random_steps(rng, 5, N=2)
    with pytest.raises(ShapeError):
        scan_sequential(steps, np.zeros(4), np.zeros(2))
    with pytest.raises(ShapeError):
        scan_sequential(steps, np.zeros(5), np.zeros(3))
    with pytest.raises(ValueError):
        scan_chunked(steps, np.zeros(5), np.zeros(2), 0)


def test_scan_empty_sequence():
    steps = DiscreteSteps(np.zeros((0, 2)), np.zeros((0, 2)), np.zeros((0, 2)))
    y, h = scan_chunked(steps, np.zeros(0), np.ones(2), 4)
    assert y.shape == (0,) and np.array_equal(h, np.ones(2))


# ---------------------------------------------------------------- backward

@pytest.mark.parametrize("chunk", [None, 3])
def test_scan_backward_grad_check(chunk):
    rng = make_rng(10)
    T, N = 16, 4
    steps = random_steps(rng, T, N=N)
    x, h0, gy = rng.normal(size=T), rng.normal(size=N), rng.normal(size=T)
    g = scan_backward(steps, x, h0, gy, chunk=chunk)

    def loss(a=steps.a_bar, b=steps.b_bar, c=steps.c, xx=x, hh=h0):
        return float(gy @ scan_sequential(DiscreteSteps(a, b, c), xx, hh)[0])

    assert grad_check(lambda v: loss(a=v), g.a_bar, steps.a_bar) < 1e-4
    assert grad_check(lambda v: loss(b=v), g.b_bar, steps.b_bar) < 1e-4
    assert grad_check(lambda v: loss(c=v), g.c, steps.c) < 1e-4
    assert grad_check(lambda v: loss(xx=v), g.x, x) < 1e-4
    assert grad_check(lambda v: loss(hh=v), g.h0, h0) < 1e-4


def test_scan_backward_zero_upstream():
    rng = make_rng(11)
    steps = random_steps(rng, 8, N=3)
    g = scan_backward(steps, rng.normal(size=8), rng.normal(size=3), np.zeros(8))
    assert all(not np.any(v) for v in g)


def test_scan_backward_h0_unreachable_when_memoryless():
    rng = make_rng(12)
    steps = random_steps(rng, 5, N=3)
    steps = DiscreteSteps(np.zeros_like(steps.a_bar), steps.b_bar, steps.c)
    g = scan_backward(steps, rng.normal(size=5), rng.normal(size=3), rng.normal(size=5))
    assert not np.any(g.h0)


def test_scan_backward_shape_error():
    rng = make_rng(13)
    steps = random_steps(rng, 5, N=3)
    with pytest.raises(ShapeError):
        scan_backward(steps, np.zeros(5), np.zeros(3), np.zeros(4))
