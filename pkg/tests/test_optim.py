import math

import numpy as np
import pytest

from rrdncnn.errors import ConfigError, DimensionError
from rrdncnn.optim import (OptimHyper, OptimState, adam_step, optimizer_step, radam_rectifier,
                           radam_step)


def reference_trajectory(kind, theta0, grad_fn, steps, lr=1e-2, b1=0.9, b2=0.999, eps=1e-8):
    """Scalar-by-scalar second implementation of the same recurrences."""
    theta = [float(x) for x in theta0]
    m = [0.0] * len(theta)
    v = [0.0] * len(theta)
    rho_inf = 2 / (1 - b2) - 1
    for t in range(1, steps + 1):
        g = [float(x) for x in grad_fn(np.array(theta))]
        for i in range(len(theta)):
            m[i] = b1 * m[i] + (1 - b1) * g[i]
            v[i] = b2 * v[i] + (1 - b2) * g[i] ** 2
            mh = m[i] / (1 - b1 ** t)
            vh = v[i] / (1 - b2 ** t)
            if kind == "adam":
                theta[i] -= lr * mh / (math.sqrt(vh) + eps)
                continue
            rho = rho_inf - 2 * t * b2 ** t / (1 - b2 ** t)
            if rho > 4:
                r = math.sqrt((rho - 4) * (rho - 2) * rho_inf / ((rho_inf - 4) * (rho_inf - 2) * rho))
                theta[i] -= lr * r * mh / (math.sqrt(vh) + eps)
            else:
                theta[i] -= lr * mh
    return np.array(theta)


def bowl_grad(theta):
    return 2 * np.array([1.0, 3.0, 0.5]) * (theta - np.array([0.5, -1.0, 2.0]))


@pytest.mark.parametrize("kind", ["adam", "radam"])
def test_trajectory_matches_reference(kind):
    hyper = OptimHyper(kind=kind, lr=1e-2)
    params = {"w": np.array([3.0, 2.0, -1.0])}
    state = OptimState()
    for _ in range(50):
        params, state = optimizer_step(params, {"w": bowl_grad(params["w"])}, state, hyper)
    ref = reference_trajectory(kind, [3.0, 2.0, -1.0], bowl_grad, 50)
    np.testing.assert_allclose(params["w"], ref, rtol=0, atol=1e-6)
    assert state.t == 50


@pytest.mark.parametrize("step", [adam_step, radam_step])
def test_zero_grad_is_noop(step):
    params = {"a": np.arange(6.0).reshape(2, 3), "b": np.ones(2)}
    new, state = step(params, {k: np.zeros_like(p) for k, p in params.items()}, OptimState(),
                      OptimHyper())
    for k in params:
        assert np.array_equal(new[k], params[k])
    assert state.t == 1


def test_adam_first_step_is_signed_lr():
    hyper = OptimHyper(kind="adam", lr=1e-3)
    new, _ = adam_step({"w": np.array([0.0, 0.0])}, {"w": np.array([2.5, -0.1])}, OptimState(), hyper)
    np.testing.assert_allclose(new["w"], [-1e-3, 1e-3], rtol=1e-6)


def test_radam_first_step_is_plain_momentum():
    hyper = OptimHyper(lr=1e-3)
    g = np.array([2.5, -0.1, 7.0])
    new, _ = radam_step({"w": np.zeros(3)}, {"w": g}, OptimState(), hyper)
    np.testing.assert_allclose(new["w"], -1e-3 * g, rtol=1e-12)


def test_rectifier_warmup_window():
    for t in range(1, 5):
        rho, r = radam_rectifier(t, 0.999)
        assert rho <= 4 and r is None
    assert radam_rectifier(1, 0.999)[0] == pytest.approx(1.0, abs=1e-3)
    rho, r = radam_rectifier(6, 0.999)
    assert rho > 4 and 0 < r < 1
    # r_t tends to 1 as t grows
    assert radam_rectifier(100000, 0.999)[1] == pytest.approx(1.0, abs=1e-3)


@pytest.mark.parametrize("kind", ["adam", "radam"])
def test_steps_are_pure(kind):
    rng = np.random.default_rng(0)
    params = {"w": rng.normal(size=(3, 2))}
    grads = {"w": rng.normal(size=(3, 2))}
    state = OptimState.zeros_like(params)
    snap_p, snap_g = params["w"].copy(), grads["w"].copy()
    hyper = OptimHyper(kind=kind)
    a, sa = optimizer_step(params, grads, state, hyper)
    b, sb = optimizer_step(params, grads, state, hyper)
    assert np.array_equal(a["w"], b["w"]) and np.array_equal(sa.v["w"], sb.v["w"])
    assert np.array_equal(params["w"], snap_p) and np.array_equal(grads["w"], snap_g)
    assert state.t == 0 and not state.m["w"].any()


def test_shape_mismatch():
    with pytest.raises(DimensionError):
        radam_step({"w": np.zeros(3)}, {"w": np.zeros(4)}, OptimState(), OptimHyper())
    with pytest.raises(DimensionError):
        radam_step({"w": np.zeros(3)}, {"x": np.zeros(3)}, OptimState(), OptimHyper())
    bad = OptimState(1, {"w": np.zeros(2)}, {"w": np.zeros(2)})
    with pytest.raises(DimensionError):
        adam_step({"w": np.zeros(3)}, {"w": np.zeros(3)}, bad, OptimHyper())


@pytest.mark.parametrize("kw", [dict(kind="sgd"), dict(beta1=1.0), dict(beta2=0.0), dict(lr=0)])
def test_invalid_hyper(kw):
    with pytest.raises(ConfigError):
        OptimHyper(**kw)
