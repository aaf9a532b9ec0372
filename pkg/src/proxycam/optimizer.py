"""Proxy-camera construction: fit lens perturbations to measured SFRA targets
with damped least squares and per-parameter dynamic damping."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .optics import LensSystem
from .perturbation import PerturbationVector, apply_perturbation
from .sensor import SensorModel
from .sfr import NYQUIST, SfrCurve, sfra
from .simulation import FovIndex, FovSample, SimulationConfig, simulate_sfr

log = logging.getLogger(__name__)


class SingularStepError(np.linalg.LinAlgError):
    pass


@dataclass(frozen=True)
class OptimizerConfig:
    initial_damping: float = 1.0    # times mean(diag(A^T A)) at the first iteration
    damping: str = "dynamic"        # or "fixed"
    decrease: float = 2.0           # eps / decrease when the linear model holds
    increase: float = 4.0           # eps * increase otherwise
    agreement: float = 0.25         # allowed relative mismatch, predicted vs actual
    eps_bounds: tuple[float, float] = (1e-12, 1e8)   # relative to the initial scale
    max_iter: int = 200
    grad_tol: float = 1e-8
    ftol: float = 1e-12             # stop when the predicted decrease is below ftol * f^T f
    metric: str = "sfra"            # or "mtf": SFR at mtf_frequency
    mtf_frequency: float = 0.5 * NYQUIST
    workers: int = 1

    def __post_init__(self):
        if self.damping not in ("dynamic", "fixed"):
            raise ValueError("damping must be 'dynamic' or 'fixed'")
        if self.metric not in ("sfra", "mtf"):
            raise ValueError("metric must be 'sfra' or 'mtf'")
        if not self.initial_damping > 0:
            raise ValueError("initial damping must be positive")


def metric_value(curve: SfrCurve, config: OptimizerConfig) -> float:
    if config.metric == "sfra":
        return sfra(curve).value
    return curve.at(config.mtf_frequency)


@dataclass
class ProxyProblem:
    """Merit chain: perturb, trace, PSF, synthetic edge, SFR, metric, residual.

    Residuals are ``target - simulated`` over the FoVs listed in ``targets``;
    FoVs whose simulation fails are masked with NaN.
    """

    ideal: LensSystem
    template: PerturbationVector
    fovs: Sequence[FovSample]
    targets: Mapping[FovIndex, float]
    sensor: SensorModel
    sim: SimulationConfig
    config: OptimizerConfig = field(default_factory=OptimizerConfig)
    evaluations: int = 0

    def __post_init__(self):
        self.sim = self.sim.merit_mode()
        self.fovs = [f for f in self.fovs if f.index in self.targets]
        if not self.fovs:
            raise ValueError("no FoV has a target")
        self.order = [f.index for f in self.fovs]
        self.target_vec = np.array([self.targets[i] for i in self.order], dtype=float)

    def system(self, x) -> LensSystem:
        return apply_perturbation(self.ideal, self.template.with_free_normalized(x))

    def curves(self, x) -> dict:
        self.evaluations += 1
        return simulate_sfr(self.system(x), self.fovs, self.sensor, self.sim)

    def simulated(self, x) -> np.ndarray:
        res = self.curves(x)
        out = np.full(len(self.order), np.nan)
        for k, idx in enumerate(self.order):
            c = res[idx]
            if isinstance(c, Exception):
                log.warning("FoV %s excluded: %s", idx, c)
                continue
            out[k] = metric_value(c, self.config)
        return out

    def residuals(self, x) -> np.ndarray:
        return self.target_vec - self.simulated(x)


def residuals(pv: PerturbationVector, problem: ProxyProblem) -> np.ndarray:
    """f = target - simulated at the perturbation ``pv`` (free parameters)."""
    return problem.residuals(pv.free_normalized())


def jacobian(fun: Callable[[np.ndarray], np.ndarray], x: np.ndarray, f0: np.ndarray,
             steps: np.ndarray) -> np.ndarray:
    """Forward differences, one column per parameter."""
    x = np.asarray(x, dtype=float)
    cols = []
    for j, h in enumerate(steps):
        xp = x.copy()
        xp[j] += h
        cols.append((fun(xp) - f0) / h)
    return np.column_stack(cols) if cols else np.zeros((len(f0), 0))


def lsq_step(A: np.ndarray, f: np.ndarray, eps) -> np.ndarray:
    """Solve (A^T A + diag(eps)) dP = -A^T f.

    Solved as the stacked least-squares problem [A; sqrt(diag eps)] dP = [-f; 0],
    which avoids squaring the condition number.
    """
    A = np.asarray(A, dtype=float)
    f = np.asarray(f, dtype=float)
    n = A.shape[1]
    eps = np.broadcast_to(np.asarray(eps, dtype=float), (n,))
    if np.any(eps < 0):
        raise ValueError("damping must be non-negative")
    M = np.vstack([A, np.diag(np.sqrt(eps))])
    rhs = np.concatenate([-f, np.zeros(n)])
    sol, _, rank, sv = np.linalg.lstsq(M, rhs, rcond=None)
    if rank < n:
        cond = sv[0] / sv[-1] if sv[-1] > 0 else math.inf
        raise SingularStepError(f"damped normal matrix is singular (condition {cond:.3g})")
    return sol


def predicted_decrease(A, f, step) -> float:
    lin = f + A @ step
    return float(f @ f - lin @ lin)


def column_agreement(a_old: np.ndarray, a_new: np.ndarray) -> np.ndarray:
    """Per-parameter nonlinearity: relative change of each Jacobian column
    across an accepted step (tangent at the start vs the trapezoid secant)."""
    mid = 0.5 * (a_old + a_new)
    num = np.linalg.norm(a_new - a_old, axis=0)
    den = np.linalg.norm(mid, axis=0)
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(den > 0, 0.5 * num / den, 0.0)


def adapt_damping(eps, ratio: float, config: OptimizerConfig, scale: float = 1.0,
                  nonlinearity: np.ndarray | None = None) -> tuple[np.ndarray, bool]:
    """Return ``(eps', accepted)``.

    A step is accepted when the actual merit decrease is within ``agreement``
    of the linear prediction. On acceptance each eps_j shrinks by ``decrease``
    unless its Jacobian column changed by more than ``agreement`` (then it
    grows by ``increase``); on rejection every eps_j grows by ``increase``.
    Values are clamped to ``eps_bounds * scale``.
    """
    eps = np.asarray(eps, dtype=float)
    accepted = bool(np.isfinite(ratio) and abs(ratio - 1.0) <= config.agreement)
    if accepted:
        if nonlinearity is None:
            new = eps / config.decrease
        else:
            new = np.where(nonlinearity <= config.agreement, eps / config.decrease,
                           eps * config.increase)
    else:
        new = eps * config.increase
    lo, hi = config.eps_bounds
    return np.clip(new, lo * scale, hi * scale), accepted


@dataclass
class IterationRecord:
    iteration: int
    merit: float            # damped merit f^T f + sum(eps dP^2)
    ftf: float
    grad_norm: float
    eps_min: float
    eps_max: float
    accepted: bool

    def row(self) -> dict:
        return {"iter": self.iteration, "merit": self.merit, "ftf": self.ftf,
                "grad_norm": self.grad_norm,
                "eps_summary": f"{self.eps_min:.3e}..{self.eps_max:.3e}",
                "accepted": int(self.accepted)}


@dataclass
class ProxyResult:
    system: LensSystem
    perturbation: PerturbationVector
    history: list[IterationRecord]
    residuals: np.ndarray
    converged: bool
    reason: str
    evaluations: int

    @property
    def ftf(self) -> float:
        r = self.residuals[np.isfinite(self.residuals)]
        return float(r @ r)

    @property
    def accepted_iterations(self) -> int:
        return sum(1 for h in self.history if h.accepted)

    def iterations_to_reach(self, ftf: float) -> float:
        """Iterations (accepted or not) until f^T f first fell to ``ftf``; inf if never."""
        for h in self.history:
            if h.accepted and h.ftf <= ftf:
                return h.iteration
        return math.inf


def _masked(f: np.ndarray, A: np.ndarray | None = None):
    ok = np.isfinite(f)
    if A is not None:
        ok &= np.all(np.isfinite(A), axis=1)
    return ok


def least_squares_fit(fun: Callable[[np.ndarray], np.ndarray], x0: np.ndarray, steps: np.ndarray,
                      config: OptimizerConfig, bounds: float | None = 1.0,
                      callback: Callable[[IterationRecord], None] | None = None):
    """Damped least squares on a residual function of normalized parameters.

    Returns ``(x, f, history, converged, reason)``.
    """
    x = np.asarray(x0, dtype=float).copy()
    f = fun(x)
    history: list[IterationRecord] = []
    n = x.size
    if n == 0:
        return x, f, history, True, "no free parameters"
    A = jacobian(fun, x, f, steps)
    ok = _masked(f, A)
    if not ok.any():
        raise RuntimeError("no valid residuals at the starting point")
    ftf = float(f[ok] @ f[ok])
    diag = np.sum(A[ok] ** 2, axis=0)
    scale = float(np.mean(diag)) if np.mean(diag) > 0 else 1.0
    eps = np.full(n, config.initial_damping * scale)
    history.append(IterationRecord(0, ftf, ftf, float(np.linalg.norm(A[ok].T @ f[ok])),
                                   eps.min(), eps.max(), True))
    if callback:
        callback(history[-1])
    reason, converged = "max iterations", False
    for it in range(1, config.max_iter + 1):
        ok = _masked(f, A)
        fo, Ao = f[ok], A[ok]
        if fo @ fo == 0.0 or not np.any(Ao):
            reason, converged = "zero residual or gradient", True
            break
        step = lsq_step(Ao, fo, eps)
        if bounds is not None:
            step = np.clip(x + step, -bounds, bounds) - x
        grad = float(np.linalg.norm(Ao.T @ fo + eps * step))
        pred = predicted_decrease(Ao, fo, step)
        if grad < config.grad_tol:
            reason, converged = "gradient tolerance", True
            break
        if pred <= config.ftol * max(fo @ fo, 1e-300):
            reason, converged = "negligible predicted decrease", True
            break
        x_new = x + step
        f_new = fun(x_new)
        both = ok & np.isfinite(f_new)
        ftf_old = float(f[both] @ f[both])
        ftf_new = float(f_new[both] @ f_new[both])
        actual = ftf_old - ftf_new
        if config.damping == "fixed":
            accepted = actual > 0
        else:
            ratio = actual / pred if pred > 0 else -math.inf
            eps_try, accepted = adapt_damping(eps, ratio, config, scale)
        merit = ftf_new + float(np.sum(eps * step ** 2))
        if accepted:
            A_new = jacobian(fun, x_new, f_new, steps)
            if config.damping == "dynamic":
                eps, _ = adapt_damping(eps, 1.0, config, scale,
                                       nonlinearity=column_agreement(A, A_new))
            x, f, A = x_new, f_new, A_new
        elif config.damping == "dynamic":
            eps = eps_try
        rec = IterationRecord(it, merit, ftf_new if accepted else ftf_old, grad,
                              eps.min(), eps.max(), accepted)
        history.append(rec)
        if callback:
            callback(rec)
        if not accepted and config.damping == "fixed":
            reason, converged = "stalled (fixed damping)", True
            break
        if not accepted and np.all(eps >= config.eps_bounds[1] * scale * (1 - 1e-12)):
            reason = "damping at upper bound"
            break
    return x, f, history, converged, reason


def construct_proxy(ideal: LensSystem, template: PerturbationVector, fovs: Sequence[FovSample],
                    targets: Mapping[FovIndex, float], sensor: SensorModel, sim: SimulationConfig,
                    config: OptimizerConfig = OptimizerConfig(),
                    callback: Callable[[IterationRecord], None] | None = None) -> ProxyResult:
    """Fit the free perturbations so simulated metrics match ``targets``.

    Starts from the template's current values. Returns the perturbed system,
    the fitted vector, the per-iteration trace and a stop reason; when the
    iteration limit is hit the best accepted point is returned.
    """
    problem = ProxyProblem(ideal, template, fovs, targets, sensor, sim, config)
    x0 = template.free_normalized()
    x, f, history, converged, reason = least_squares_fit(
        problem.residuals, x0, template.normalized_steps(), config, callback=callback)
    pv = template.with_free_normalized(x)
    if not converged:
        log.warning("proxy construction stopped: %s", reason)
    return ProxyResult(apply_perturbation(ideal, pv), pv, history, f, converged, reason,
                       problem.evaluations)


def sfr_mse(a: Mapping[FovIndex, SfrCurve], b: Mapping[FovIndex, SfrCurve]) -> float:
    """Mean squared SFR difference up to Nyquist, averaged over shared FoVs."""
    errs = []
    for idx, ca in a.items():
        cb = b.get(idx)
        if isinstance(ca, Exception) or cb is None or isinstance(cb, Exception):
            continue
        f = ca.frequencies
        errs.append(np.mean((ca.response - np.interp(f, cb.frequencies, cb.response)) ** 2))
    if not errs:
        raise ValueError("no common FoVs")
    return float(np.mean(errs))
