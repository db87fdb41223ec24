"""Finite-difference checks for every hand-written backward pass.

Each check draws random inputs and randomly perturbed parameters, builds the
scalar ``L = sum(w * f(x))`` with a fixed random weighting ``w``, and compares
the analytic gradient of ``L`` with central differences on every coordinate.
Parameters are perturbed away from their initialization because freshly
initialized step sizes give some gradients near 1e-9, below what a
finite difference with ``eps = 1e-5`` can resolve.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, Dict, List

import numpy as np

from . import ag_ssm, hga, losses, network, ssm_core
from .numeric_core import grad_check, make_rng


@dataclass
class CheckResult:
    name: str
    max_rel_error: float
    coords: int
    seconds: float

    def passed(self, tolerance: float) -> bool:
        return self.max_rel_error < tolerance

    def as_record(self, tolerance: float) -> dict:
        return {"check": self.name, "max_rel_error": self.max_rel_error, "coords": self.coords,
                "seconds": round(self.seconds, 4), "tolerance": tolerance,
                "passed": self.passed(tolerance)}


def _check_dict(name, loss_fn, grads: Dict[str, np.ndarray], inputs: Dict[str, np.ndarray],
                eps: float) -> List[CheckResult]:
    """One result per named input; ``loss_fn`` reads ``inputs`` in place."""
    out = []
    for key, x in inputs.items():
        t0 = time.perf_counter()

        def f(v, key=key):
            saved = inputs[key]
            inputs[key] = v
            try:
                return loss_fn()
            finally:
                inputs[key] = saved

        err = grad_check(f, grads[key], x, eps=eps)
        out.append(CheckResult(f"{name}.{key}", err, x.size, time.perf_counter() - t0))
    return out


def check_zoh(rng, eps):
    shape = (5, 4)
    a = -np.exp(rng.normal(0.0, 1.0, shape))
    b = rng.normal(size=shape)
    delta = np.exp(rng.normal(-1.0, 1.0, shape))
    # include a few points inside the Taylor-series branch of the derivative
    delta[0, :2] = 1e-3
    wa, wb = rng.normal(size=shape), rng.normal(size=shape)
    inputs = {"a": a, "b": b, "delta": delta}

    def loss():
        ab, bb = ssm_core.discretize_zoh(inputs["a"], inputs["b"], inputs["delta"])
        return float(np.sum(wa * ab) + np.sum(wb * bb))

    g_a, g_b, g_d = ssm_core.zoh_backward(a, b, delta, wa, wb)
    return _check_dict("ssm_core.zoh_backward", loss, {"a": g_a, "b": g_b, "delta": g_d}, inputs, eps)


def check_scan(rng, eps, chunk=None):
    T, batch, N = 9, 2, 3
    inputs = {
        "a_bar": rng.uniform(0.5, 0.99, (T, batch, N)),
        "b_bar": rng.normal(size=(T, batch, N)),
        "c": rng.normal(size=(T, batch, N)),
        "x": rng.normal(size=(T, batch)),
        "h0": rng.normal(size=(batch, N)),
    }
    gy = rng.normal(size=(T, batch))

    def loss():
        steps = ssm_core.DiscreteSteps(inputs["a_bar"], inputs["b_bar"], inputs["c"])
        y, _ = ssm_core.scan_sequential(steps, inputs["x"], inputs["h0"])
        return float(np.sum(gy * y))

    steps = ssm_core.DiscreteSteps(inputs["a_bar"], inputs["b_bar"], inputs["c"])
    g = ssm_core.scan_backward(steps, inputs["x"], inputs["h0"], gy, chunk=chunk)
    name = "ssm_core.scan_backward" + ("" if chunk is None else f"[chunk={chunk}]")
    return _check_dict(name, loss, g._asdict(), inputs, eps)


def _perturb(params, rng, scale=0.3):
    return {k: v + scale * rng.normal(size=v.shape) for k, v in params.items()}


def check_ag_ssm(rng, eps):
    B, T, D, N = 2, 7, 4, 3
    params = _perturb(ag_ssm.init_params(D, N, rng), rng)
    # push step sizes up so the discretization is far from the identity
    params["delta_base"] = rng.normal(0.0, 0.5, D)
    x_v = rng.normal(size=(B, T, D))
    x_a = rng.normal(size=(B, T, D))
    gy = rng.normal(size=(B, T, D))
    inputs = dict(params, x_v=x_v, x_a=x_a)

    def loss():
        p = {k: inputs[k] for k in ag_ssm.PARAM_NAMES}
        return float(np.sum(gy * ag_ssm.forward(inputs["x_v"], inputs["x_a"], p, chunk=3)))

    _, cache = ag_ssm.forward(x_v, x_a, params, chunk=3, return_cache=True)
    grads, g_xv, g_xa = ag_ssm.backward(cache, gy, params)
    return _check_dict("ag_ssm.backward", loss, dict(grads, x_v=g_xv, x_a=g_xa), inputs, eps)


def check_hga(rng, eps, activation="gelu"):
    F, grid, d_v, d_model, heads, M = 2, (3, 3), 6, 5, 2, 4
    n_v = grid[0] * grid[1]
    params = _perturb(hga.init_params(d_v, d_model, rng, heads=heads), rng, 0.2)
    tokens = rng.normal(size=(F, n_v, d_v))
    mask = rng.random((F, M, n_v)) < 0.4
    mask[..., 0] = True
    pool = mask / mask.sum(axis=-1, keepdims=True)
    g_out = rng.normal(size=(F, M, d_model))
    inputs = dict(params, tokens=tokens)

    def loss():
        p = {k: inputs[k] for k in hga.PARAM_NAMES}
        out = hga.forward(inputs["tokens"], pool, p, heads=heads, activation=activation)
        return float(np.sum(g_out * out))

    _, cache = hga.forward(tokens, pool, params, heads=heads, activation=activation, return_cache=True)
    grads, g_tok = hga.backward(cache, g_out, params)
    return _check_dict(f"hga.backward[{activation}]", loss, dict(grads, tokens=g_tok), inputs, eps)


def check_asl(rng, eps, kind="asl"):
    cfg = losses.AslConfig() if kind == "asl" else losses.AslConfig.for_loss(kind)
    shape = (6, cfg.num_classes)
    p = rng.uniform(0.02, 0.98, shape)
    # just above the margin kink the negative term is ~(p - m)^gamma_neg, far
    # below the difference-quotient noise floor; keep probabilities clear of it
    near = np.abs(p - cfg.margin) < 0.1
    p[near] = cfg.margin + 0.1 + 0.8 * rng.random(int(near.sum()))
    y = (rng.random(shape) < 0.4).astype(np.float64)
    inputs = {"probs": p}

    def loss():
        return losses.asl_loss(inputs["probs"], y, cfg)[0]

    _, g = losses.asl_loss(p, y, cfg)
    return _check_dict(f"asl_metrics.asl_loss[{kind}]", loss, {"probs": g}, inputs, eps)


def check_network(rng, eps, temporal="agssm"):
    B, T, grid, d_v, d_a, C, M = 1, 5, (2, 2), 4, 3, 3, 2
    n_v = grid[0] * grid[1]
    params = network.init_network(rng, d_v=d_v, d_a=d_a, num_classes=C, d_model=4, state_dim=2,
                                  heads=2, temporal=temporal)
    params = _perturb(params, rng, 0.2)
    if temporal == "agssm":
        params["ssm0.delta_base"] = rng.normal(0.0, 0.5, 4)
    tokens = rng.normal(size=(B, T, n_v, d_v))
    mask = rng.random((B, T, M, n_v)) < 0.5
    mask[..., 0] = True
    pool = mask / mask.sum(axis=-1, keepdims=True)
    audio = rng.normal(size=(B, T, d_a))
    gp = rng.normal(size=(B, T, C))
    inputs = dict(params)

    def loss():
        return float(np.sum(gp * network.forward(inputs, tokens, pool, audio, heads=2)))

    _, cache = network.forward(params, tokens, pool, audio, heads=2, return_cache=True)
    grads = network.backward(params, cache, gp)
    return _check_dict(f"network.backward[{temporal}]", loss, grads, inputs, eps)


def suite(seed: int = 0) -> List[Callable]:
    rng = make_rng([seed, 11])
    return [
        lambda eps: check_zoh(rng, eps),
        lambda eps: check_scan(rng, eps),
        lambda eps: check_scan(rng, eps, chunk=4),
        lambda eps: check_ag_ssm(rng, eps),
        lambda eps: check_hga(rng, eps, "gelu"),
        lambda eps: check_hga(rng, eps, "linear"),
        lambda eps: check_asl(rng, eps, "asl"),
        lambda eps: check_asl(rng, eps, "bce"),
        lambda eps: check_asl(rng, eps, "focal"),
        lambda eps: check_network(rng, eps, "agssm"),
        lambda eps: check_network(rng, eps, "framewise"),
    ]


def run_suite(seed: int = 0, eps: float = 1e-5) -> List[CheckResult]:
    results: List[CheckResult] = []
    for check in suite(seed):
        results.extend(check(eps))
    return results
