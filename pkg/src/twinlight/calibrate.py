"""Inverse-lighting calibration: tune fixture dimmers / color temperatures
and camera exposure to maximize similarity against a reference photo.

The objective renders with a fixed seed (common random numbers), so it is
a deterministic function of the parameter vector; search is Nelder-Mead
in a per-axis logistic reparameterization of the box, restarted from
seeded points, with the evaluation budget split evenly across restarts.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Optional

import numpy as np
from scipy.optimize import minimize
from scipy.special import expit

from . import similarity
from .color import DisplayImage, tonemap
from .render import RenderRequest, render
from .scene import Scene, CCT_MIN_K, CCT_MAX_K

FIELD_RANGES = {
    "dimmer": (0.0, 1.0),
    "cct_k": (CCT_MIN_K, CCT_MAX_K),
    "exposure_ev": (-20.0, 20.0),
}


class CalibrationError(Exception):
    def __init__(self, message: str, partial_trace=None):
        super().__init__(message)
        self.partial_trace = partial_trace or ()


@dataclass(frozen=True)
class ParameterSpec:
    """One free axis: a fixture's dimmer or cct_k, or a camera's exposure."""

    kind: str  # "fixture" | "camera"
    target_id: str
    fld: str  # "dimmer" | "cct_k" | "exposure_ev"
    lower: float
    upper: float

    def __post_init__(self):
        if self.kind not in ("fixture", "camera"):
            raise CalibrationError(f"unknown target kind {self.kind!r}")
        if self.kind == "fixture" and self.fld not in ("dimmer", "cct_k"):
            raise CalibrationError(f"fixture parameter must be dimmer or cct_k, got {self.fld!r}")
        if self.kind == "camera" and self.fld != "exposure_ev":
            raise CalibrationError(f"camera parameter must be exposure_ev, got {self.fld!r}")
        lo, hi = FIELD_RANGES[self.fld]
        if not self.lower < self.upper:
            raise CalibrationError(f"{self.fld}: lower must be < upper")
        if self.lower < lo or self.upper > hi:
            raise CalibrationError(
                f"{self.fld}: bounds [{self.lower:g}, {self.upper:g}] outside legal [{lo:g}, {hi:g}]"
            )


@dataclass(frozen=True)
class CalibrationProblem:
    scene: Scene
    camera_id: str
    reference: DisplayImage
    params: tuple[ParameterSpec, ...]
    template: RenderRequest
    encoder: str = "builtin"

    def __post_init__(self):
        if not self.params:
            raise CalibrationError("no free parameters")
        targets = [(p.kind, p.target_id, p.fld) for p in self.params]
        if len(set(targets)) != len(targets):
            raise CalibrationError("parameter targets must be distinct")
        self.scene.camera(self.camera_id)
        for p in self.params:
            if p.kind == "fixture":
                self.scene.fixture(p.target_id)
            else:
                self.scene.camera(p.target_id)


@dataclass(frozen=True)
class CalibrationResult:
    best_params: tuple[float, ...]
    best_percent: float
    trace: tuple[tuple[int, float, tuple[float, ...]], ...]
    evals_used: int

    def best_so_far(self) -> list[float]:
        out, best = [], -np.inf
        for _, pct, _ in self.trace:
            best = max(best, pct)
            out.append(best)
        return out


def apply_parameters(problem: CalibrationProblem, x) -> Scene:
    """The problem scene with the parameter vector written in."""
    scene = problem.scene
    for spec, value in zip(problem.params, x):
        value = float(value)
        if spec.kind == "fixture":
            idx = next(i for i, f in enumerate(scene.fixtures) if f.id == spec.target_id)
            f = scene.fixtures[idx]
            if spec.fld == "dimmer":
                f = replace(f, dimmer=value)
            else:
                f = replace(f, cct_k=value, color_rgb=None)
            scene = replace(scene, fixtures=scene.fixtures[:idx] + (f,) + scene.fixtures[idx + 1 :])
        else:
            idx = next(i for i, c in enumerate(scene.cameras) if c.id == spec.target_id)
            c = replace(scene.cameras[idx], exposure_ev=value)
            scene = replace(scene, cameras=scene.cameras[:idx] + (c,) + scene.cameras[idx + 1 :])
    return scene


def objective(problem: CalibrationProblem, x, threads: int = 1) -> float:
    """Similarity percent of the render at x against the reference."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (len(problem.params),):
        raise CalibrationError(f"expected {len(problem.params)} parameters, got {x.shape}")
    for spec, value in zip(problem.params, x):
        if not spec.lower <= value <= spec.upper:
            raise CalibrationError(
                f"{spec.fld} for {spec.target_id!r}: {value:g} outside "
                f"[{spec.lower:g}, {spec.upper:g}]"
            )
    scene = apply_parameters(problem, x)
    req = replace(problem.template, camera_id=problem.camera_id)
    hdr = render(scene, req, threads=threads)
    img = tonemap(hdr.data, scene.camera(problem.camera_id).exposure_ev)
    encode = similarity.make_encoder(problem.encoder)
    return similarity.similarity_percent(encode(problem.reference), encode(img))


# ---------------------------------------------------------------------------
# bounded Nelder-Mead with restarts

class _BudgetExhausted(Exception):
    pass


def _from_z(problem: CalibrationProblem, z: np.ndarray) -> np.ndarray:
    lo = np.array([p.lower for p in problem.params])
    hi = np.array([p.upper for p in problem.params])
    return lo + (hi - lo) * expit(z)


def _start_point(problem: CalibrationProblem, seed: int, restart: int) -> np.ndarray:
    n = len(problem.params)
    if restart == 0:
        return np.zeros(n)  # box center
    rng = np.random.default_rng([seed & 0xFFFFFFFF, restart])
    u = rng.uniform(0.1, 0.9, size=n)
    return np.log(u / (1.0 - u))


def _run_restart(problem, z0, sub_budget, on_eval, threads):
    evals: list[tuple[float, tuple[float, ...]]] = []

    def fun(z):
        if len(evals) >= sub_budget:
            raise _BudgetExhausted
        x = _from_z(problem, z)
        pct = objective(problem, x, threads=threads)
        evals.append((pct, tuple(float(v) for v in x)))
        if on_eval is not None:
            on_eval(pct, tuple(float(v) for v in x))
        return -pct

    n = z0.shape[0]
    simplex = np.vstack([z0] + [z0 + 0.75 * np.eye(n)[i] for i in range(n)])
    try:
        minimize(
            fun,
            z0,
            method="Nelder-Mead",
            options={
                "maxfev": sub_budget,
                "initial_simplex": simplex,
                "xatol": 1e-6,
                "fatol": 1e-9,
            },
        )
    except _BudgetExhausted:
        pass
    return evals


def calibrate(
    problem: CalibrationProblem,
    budget: int,
    seed: int = 0,
    restarts: int = 1,
    parallel_restarts: int = 1,
    on_eval: Optional[Callable[[float, tuple[float, ...]], None]] = None,
    threads: int = 1,
) -> CalibrationResult:
    """Maximize the objective within the parameter box.

    Deterministic for fixed (problem, budget, seed, restarts); the merge
    across restarts is order-independent, so parallel_restarts changes
    nothing but wall time.
    """
    n = len(problem.params)
    if restarts < 1:
        raise CalibrationError("restarts must be >= 1")
    if budget < 10 * n:
        raise CalibrationError(f"budget too small: need at least {10 * n} (10 per parameter)")
    sub_budget = budget // restarts
    if sub_budget < n + 1:
        raise CalibrationError("budget too small for this many restarts")

    starts = [_start_point(problem, seed, r) for r in range(restarts)]
    per_restart: list[list] = [None] * restarts  # type: ignore[list-item]
    failure: Optional[Exception] = None

    def run(r):
        return _run_restart(problem, starts[r], sub_budget, on_eval, threads)

    if parallel_restarts <= 1 or restarts == 1:
        for r in range(restarts):
            try:
                per_restart[r] = run(r)
            except Exception as e:  # propagate with what we have so far
                failure = e
                break
    else:
        with ThreadPoolExecutor(max_workers=parallel_restarts) as pool:
            futs = {r: pool.submit(run, r) for r in range(restarts)}
            for r in range(restarts):
                try:
                    per_restart[r] = futs[r].result()
                except Exception as e:
                    failure = failure or e

    trace = []
    idx = 0
    for evals in per_restart:
        if evals is None:
            continue
        for pct, params in evals:
            trace.append((idx, pct, params))
            idx += 1
    if failure is not None:
        raise CalibrationError(f"objective failed: {failure}", partial_trace=tuple(trace)) from failure
    if not trace:
        raise CalibrationError("no evaluations performed")

    percents = np.array([pct for _, pct, _ in trace])
    best_i = int(np.argmax(percents))  # first max: lowest restart, then lowest eval
    return CalibrationResult(
        best_params=trace[best_i][2],
        best_percent=float(percents[best_i]),
        trace=tuple(trace),
        evals_used=len(trace),
    )
