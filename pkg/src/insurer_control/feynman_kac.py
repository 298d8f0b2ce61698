"""Monte Carlo evaluators for a, b and phi.

Each estimator streams over path chunks and merges running moments, so
memory stays bounded by one chunk.  Time integrals use the trapezoid rule
on the Euler lattice.
"""

from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass

import numpy as np

from .model import ClaimModel, ModelSpec, UtilitySpec, psi, theta
from .pde import ValueSurface
from .sim import (
    P,
    P_HAT,
    Lookup,
    Measure,
    MeasureTag,
    PathBundle,
    PathConfig,
    RunningStats,
    girsanov_weight,
    iter_factor_chunks,
    sampling_units,
)


@dataclass
class McEstimate:
    quantity: str
    value: float
    std_error: float
    n_paths: int
    measure: str
    t: float = 0.0
    y: tuple = (0.0,)
    seed: int = 0
    wall_time: float = 0.0

    def __post_init__(self):
        if not math.isfinite(self.value):
            raise ValueError(f"{self.quantity}: non-finite estimate")
        if not self.std_error >= 0:
            raise ValueError(f"{self.quantity}: negative standard error")

    def record(self) -> dict:
        """JSON record; wall time is left out so reruns are byte-identical."""
        d = asdict(self)
        d.pop("wall_time")
        d["y"] = [float(v) for v in self.y]
        return d

    def within(self, oracle: float, n_se: float = 3.0, slack: float = 0.0) -> bool:
        return abs(self.value - oracle) <= n_se * self.std_error + slack


def _trapezoid(node_values: list[np.ndarray], dt: float) -> np.ndarray:
    v = np.stack(node_values, axis=1)
    return dt * (0.5 * v[:, 0] + v[:, 1:-1].sum(axis=1) + 0.5 * v[:, -1])


def _discount(model: ModelSpec, bundle: PathBundle) -> np.ndarray:
    r = [model.r(bundle.Y[:, k]) for k in range(bundle.steps + 1)]
    return np.exp(-_trapezoid(r, bundle.dt))


def estimate_a(model: ModelSpec, utility: UtilitySpec, t: float, y, cfg: PathConfig,
               weighted: bool = False) -> McEstimate:
    """``alpha / E_hat[exp(-int r)]`` with a delta-method standard error.

    ``weighted=True`` simulates under P and reweights to P_hat instead of
    simulating P_hat directly.
    """
    start = time.perf_counter()
    stats = RunningStats()
    measure = P if weighted else P_HAT
    for b in iter_factor_chunks(model, measure, t, y, utility.T, cfg):
        d = _discount(model, b)
        if weighted:
            d = d * np.exp(girsanov_weight(b, P_HAT, model))
        stats.add(sampling_units(d, b.antithetic))
    m = stats.mean
    return McEstimate("a", utility.alpha / m, utility.alpha * stats.se / m**2, cfg.n_paths,
                      "P" if weighted else Measure.P_HAT.value, float(t), tuple(np.atleast_1d(y)), cfg.seed,
                      time.perf_counter() - start)


def _pbar_functional(model, claims, utility, t, y, a_surface, cfg, integrand, name) -> McEstimate:
    start = time.perf_counter()
    if not isinstance(a_surface, ValueSurface) or a_surface.tag != "a":
        raise ValueError("an a-surface is required")
    tag = MeasureTag(Measure.P_BAR, a_surface)
    stats = RunningStats()
    for b in iter_factor_chunks(model, tag, t, y, utility.T, cfg):
        look = Lookup()
        nodes = []
        for k in range(b.steps + 1):
            yk = b.Y[:, k]
            tk = b.times[k]
            nodes.append(integrand(tk, yk, look.value(a_surface, tk, yk), look.grad_log(a_surface, tk, yk)))
        look.check()
        stats.add(sampling_units(_trapezoid(nodes, b.dt), b.antithetic))
    return McEstimate(name, stats.mean, stats.se, cfg.n_paths, Measure.P_BAR.value, float(t),
                      tuple(np.atleast_1d(y)), cfg.seed, time.perf_counter() - start)


def estimate_b(model: ModelSpec, claims: ClaimModel, utility: UtilitySpec, t: float, y,
               a_surface: ValueSurface, cfg: PathConfig) -> McEstimate:
    """``E_bar[int {1/2 |theta + sigma_f^* Da/a|^2 + c a - psi(a)} ds]``."""

    def f(tk, yk, a, dlog):
        v = theta(model, yk) + np.einsum("kim,ki->km", model.sigma_f(yk), dlog)
        return 0.5 * np.sum(v * v, axis=1) + utility.c * a - psi(claims, a)

    return _pbar_functional(model, claims, utility, t, y, a_surface, cfg, f, "b")


def estimate_phi(model: ModelSpec, claims: ClaimModel, utility: UtilitySpec, t: float, y,
                 a_surface: ValueSurface, cfg: PathConfig) -> McEstimate:
    """``E_bar[int {-(Da/a) . sigma_f theta - c a + r - |theta|^2/2 + psi(a)} ds]``."""

    def f(tk, yk, a, dlog):
        th = theta(model, yk)
        sf_th = np.einsum("kim,km->ki", model.sigma_f(yk), th)
        return (-np.sum(dlog * sf_th, axis=1) - utility.c * a + model.r(yk)
                - 0.5 * np.sum(th * th, axis=1) + psi(claims, a))

    return _pbar_functional(model, claims, utility, t, y, a_surface, cfg, f, "phi")
