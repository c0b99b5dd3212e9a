"""Verification suites shared by the CLI and the acceptance tests."""

from __future__ import annotations

import time
from typing import Callable

import numpy as np

from . import tensor as T
from .analysis import verify_prop1, verify_prop2
from .dct import dct2_forward, dct2_inverse, dct_plan, basis_image
from .errors import ParameterError
from .gradcheck import gradcheck
from .loft import AttentionConfig, LoftBlockParams, loft_block_forward
from .tensor import Tensor

SUITES = ("prop1", "prop2", "dct", "grad")

PROP1_TOL = 1e-6
PROP1_CONTROL_MIN = 1e-3
PROP2_TOL = 1e-9
ROUND_TRIP_TOL = 1e-9
PARSEVAL_TOL = 1e-9
ORTHO_TOL = 1e-10
DIRECT_TOL = 1e-8
GRAD_TOL = 1e-3
DCT_EXTENTS = (2, 4, 7, 8, 16)


def direct_dct2(x: np.ndarray) -> np.ndarray:
    """Quadruple-sum DCT-II built from the closed-form cosine products."""
    h, w = x.shape[:2]
    u = np.arange(h)
    v = np.arange(w)
    out = np.zeros(x.shape)
    for p in range(h):
        sp = np.sqrt((1.0 if p == 0 else 2.0) / h)
        cu = np.cos(np.pi * p * (u + 0.5) / h)
        for q in range(w):
            sq = np.sqrt((1.0 if q == 0 else 2.0) / w)
            cv = np.cos(np.pi * q * (v + 0.5) / w)
            basis = sp * sq * np.outer(cu, cv)
            for uu in range(h):
                for vv in range(w):
                    out[p, q] += x[uu, vv] * basis[uu, vv]
    return out


def _result(name: str, passed: bool, start: float, **metrics) -> dict:
    return {"suite": name, "passed": bool(passed), "seconds": round(time.perf_counter() - start, 3), **metrics}


def run_prop1(seeds: int = 100, dims=(16, 16, 8)) -> dict:
    start = time.perf_counter()
    dev = max(verify_prop1(s, tuple(dims)) for s in range(seeds))
    control = verify_prop1(0, tuple(dims), depthwise=True)
    return _result("prop1", dev < PROP1_TOL and control > PROP1_CONTROL_MIN, start,
                   seeds=seeds, max_deviation=dev, tolerance=PROP1_TOL,
                   negative_control_deviation=control)


def run_prop2(seeds: int = 100, dims=(8, 8, 4), windows=(2, 4)) -> dict:
    start = time.perf_counter()
    dev = max(verify_prop2(s, tuple(dims), b) for s in range(seeds) for b in windows)
    return _result("prop2", dev < PROP2_TOL, start, seeds=seeds, windows=list(windows),
                   max_deviation=dev, tolerance=PROP2_TOL)


def run_dct(seed: int = 0, extents=DCT_EXTENTS, channels: int = 3) -> dict:
    start = time.perf_counter()
    rng = np.random.default_rng(seed)
    worst = {"round_trip": 0.0, "parseval": 0.0, "orthonormality": 0.0, "direct": 0.0}
    for h in extents:
        for w in extents:
            plan = dct_plan(h, w)
            x = rng.standard_normal((h, w, channels))
            z = dct2_forward(x, plan).data
            back = dct2_inverse(z, plan).data
            worst["round_trip"] = max(worst["round_trip"], float(np.abs(back - x).max()))
            worst["parseval"] = max(worst["parseval"], abs(float(np.linalg.norm(z) - np.linalg.norm(x))))
            basis = np.stack([basis_image(plan, i, j)[:, :, 0].ravel()
                              for i in range(h) for j in range(w)])
            gram = basis @ basis.T
            worst["orthonormality"] = max(worst["orthonormality"],
                                          float(np.abs(gram - np.eye(h * w)).max()))
            worst["direct"] = max(worst["direct"], float(np.abs(direct_dct2(x) - z).max()))
    passed = (worst["round_trip"] < ROUND_TRIP_TOL and worst["parseval"] < PARSEVAL_TOL
              and worst["orthonormality"] < ORTHO_TOL and worst["direct"] < DIRECT_TOL)
    return _result("dct", passed, start, extents=list(extents), **{f"max_{k}_error": v for k, v in worst.items()})


def block_gradcheck(seed: int = 0, samples: int = 200, dims=(8, 8, 4), window: int = 2,
                    heads: int = 1, config: AttentionConfig | None = None):
    """Finite-difference check of a randomly initialised float64 LoFT block."""
    rng = np.random.default_rng(seed)
    cfg = config or AttentionConfig(channels=dims[2], heads=heads, window=window)
    params = LoftBlockParams.initialize(cfg, rng, dtype=np.float64, std=0.3, gate_noise=0.3)
    leaves = [t for _, t in params.items()]
    x = Tensor(rng.standard_normal(dims), requires_grad=True, name="x")
    for t in leaves:
        t.requires_grad = True
    probe = rng.standard_normal(dims)

    def loss():
        return T.sum_(T.mul(loft_block_forward(x, params, cfg), probe))

    return gradcheck(loss, [x] + leaves, samples=samples, rng=rng)


def run_grad(seed: int = 0, samples: int = 200) -> dict:
    start = time.perf_counter()
    res = block_gradcheck(seed, samples)
    worst = None if res.worst is None else {
        "param": res.worst[0], "index": [int(i) for i in res.worst[1]],
        "analytic": res.worst[2], "numeric": res.worst[3]}
    return _result("grad", res.passed(GRAD_TOL), start, checked=res.checked,
                   max_relative_error=res.max_rel_error, tolerance=GRAD_TOL, worst=worst)


RUNNERS: dict[str, Callable[..., dict]] = {
    "prop1": run_prop1,
    "prop2": run_prop2,
    "dct": run_dct,
    "grad": run_grad,
}


def run_suite(name: str, seeds: int = 100) -> list[dict]:
    if name == "all":
        return [r for suite in SUITES for r in run_suite(suite, seeds)]
    if name not in RUNNERS:
        raise ParameterError(f"unknown suite {name!r}; choose from {SUITES + ('all',)}")
    if name in ("prop1", "prop2"):
        return [RUNNERS[name](seeds=seeds)]
    return [RUNNERS[name]()]
