"""Strategies, value functions, the explicit FBSDE tuple and the
simulation-based verification experiments."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from .feynman_kac import McEstimate
from .model import ClaimModel, ModelSpec, UtilitySpec, psi, solve_sigma_p_transpose, theta
from .pde import ValueSurface
from .sim import (
    LOG_OVERFLOW,
    P,
    Lookup,
    Measure,
    MeasureTag,
    PathBundle,
    PathConfig,
    RunningStats,
    coarsen,
    exponential_martingale,
    girsanov_weight,
    iter_factor_chunks,
    sampling_units,
    wealth_on_bundle,
)


def _rows(t, x, y, model: ModelSpec):
    y = np.atleast_2d(np.asarray(y, dtype=float))
    x = np.broadcast_to(np.asarray(x, dtype=float), (y.shape[0],))
    return x, y


def pi_hjb(t, x, y, a: ValueSurface, b: ValueSurface, model: ModelSpec) -> np.ndarray:
    """HJB-side optimal amounts, rows of shape (k, m)."""
    single = np.ndim(y) == 1 and np.ndim(x) == 0
    x, y = _rows(t, x, y, model)
    av = a(t, y)
    da = a.grad(t, y)
    db = b.grad(t, y)
    sf = model.sigma_f(y)
    sf_da = np.einsum("kim,ki->km", sf, da)
    sf_db = np.einsum("kim,ki->km", sf, db)
    rhs = sf_da * (-x + 1.0 / av)[:, None] + theta(model, y) - sf_db
    out = solve_sigma_p_transpose(model, y, rhs) / av[:, None]
    return out[0] if single else out


def pi_fbsde(t, x, y, eta: ValueSurface, phi: ValueSurface, model: ModelSpec, alpha: float) -> np.ndarray:
    """FBSDE-side optimal amounts."""
    single = np.ndim(y) == 1 and np.ndim(x) == 0
    x, y = _rows(t, x, y, model)
    w = alpha - eta(t, y)
    if np.any(w <= 0):
        raise ValueError("alpha - eta must be positive")
    sf = model.sigma_f(y)
    kern = eta.grad(t, y) * x[:, None] + phi.grad(t, y)
    rhs = theta(model, y) + np.einsum("kim,ki->km", sf, kern)
    out = solve_sigma_p_transpose(model, y, rhs) / w[:, None]
    return out[0] if single else out


def value_hjb(x, y, a: ValueSurface, b: ValueSurface) -> float:
    return float(-np.exp(-a(0.0, y) * x - b(0.0, y)))


def value_fbsde(x, y, eta: ValueSurface, phi: ValueSurface, alpha: float) -> float:
    w = alpha - eta(0.0, y)
    if w <= 0:
        raise ValueError("alpha - eta(0, y) <= 0 contradicts a > 0")
    return float(-alpha / w * np.exp(-w * x + phi(0.0, y)))


# ---------------------------------------------------------------------------
# strategy handles


@dataclass
class StrategyHandle:
    """Feedback map (t, x, y) -> pi.

    Kinds: ``hjb_optimal`` (surfaces a, b), ``fbsde_optimal`` (eta, phi),
    ``constant`` (pi0) and ``perturbed`` (base + eps * direction).
    Surface lookups along simulated paths are clamped to the grid and
    counted by ``lookup``.
    """

    kind: str
    model: ModelSpec
    surfaces: dict = field(default_factory=dict)
    alpha: float = 1.0
    pi0: np.ndarray | None = None
    base: "StrategyHandle | None" = None
    eps: float = 0.0
    direction: np.ndarray | None = None
    lookup: Lookup = field(default_factory=Lookup)
    name: str = ""

    def __post_init__(self):
        need = {"hjb_optimal": ("a", "b"), "fbsde_optimal": ("eta", "phi")}.get(self.kind, ())
        for k in need:
            if k not in self.surfaces:
                raise ValueError(f"{self.kind} strategy needs the {k} surface")
        if self.kind == "constant":
            self.pi0 = np.asarray(self.pi0, dtype=float).reshape(self.model.m)
        if self.kind == "perturbed":
            if self.base is None:
                raise ValueError("perturbed strategy needs a base")
            self.direction = np.asarray(self.direction, dtype=float).reshape(self.model.m)
        if self.kind not in ("hjb_optimal", "fbsde_optimal", "constant", "perturbed"):
            raise ValueError(f"unknown strategy kind {self.kind!r}")
        if not self.name:
            self.name = self.kind if self.kind != "perturbed" else f"{self.base.name}{self.eps:+g}e{int(np.argmax(np.abs(self.direction)))}"

    def _clamp(self, y):
        grid = next(iter(self.surfaces.values())).grid
        yc, hit = grid.clamp(y)
        self.lookup.clamped += int(np.count_nonzero(hit))
        self.lookup.lookups += y.shape[0]
        return yc

    def __call__(self, t, x, y) -> np.ndarray:
        y = np.atleast_2d(y)
        if self.kind == "constant":
            return np.broadcast_to(self.pi0, (y.shape[0], self.model.m)).copy()
        if self.kind == "perturbed":
            return self.base(t, x, y) + self.eps * self.direction
        yc = self._clamp(y)
        s = self.surfaces
        if self.kind == "hjb_optimal":
            return pi_hjb(t, x, yc, s["a"], s["b"], self.model)
        return pi_fbsde(t, x, yc, s["eta"], s["phi"], self.model, self.alpha)


def hjb_strategy(model, a, b) -> StrategyHandle:
    return StrategyHandle("hjb_optimal", model, {"a": a, "b": b})


def fbsde_strategy(model, eta, phi, alpha) -> StrategyHandle:
    return StrategyHandle("fbsde_optimal", model, {"eta": eta, "phi": phi}, alpha)


def perturbation_family(base: StrategyHandle, eps=(-0.5, -0.25, 0.25, 0.5)) -> list[StrategyHandle]:
    out = []
    for j in range(base.model.m):
        d = np.zeros(base.model.m)
        d[j] = 1.0
        for e in eps:
            out.append(StrategyHandle("perturbed", base.model, base=base, eps=float(e), direction=d))
    return out


# ---------------------------------------------------------------------------
# strategy evaluation


@dataclass
class Comparison:
    estimates: dict[str, McEstimate]
    diff_se: dict[str, float]  # SE of the paired difference against the reference


def evaluate_strategies(strategies: list[StrategyHandle], model: ModelSpec, claims: ClaimModel,
                        utility: UtilitySpec, cfg: PathConfig) -> Comparison:
    """E[U(X_T)] for several strategies on common random numbers.

    Utilities are accumulated as ``-exp(l - s)`` with ``s`` fixed from the
    first chunk, so large wealth excursions cannot overflow silently.
    """
    start = time.perf_counter()
    stats = {s.name: RunningStats() for s in strategies}
    diffs = {s.name: RunningStats() for s in strategies[1:]}
    shift = None
    for bundle in iter_factor_chunks(model, P, 0.0, utility.y0, utility.T, cfg, claims):
        units = {}
        for s in strategies:
            xt = wealth_on_bundle(model, claims, utility, s, bundle).X[:, -1]
            s.lookup.check()
            log_u = -utility.alpha * xt
            if shift is None:
                shift = float(np.max(log_u))
            if np.any(log_u - shift > LOG_OVERFLOW):
                raise OverflowError("utility overflow: wealth far below the first chunk's range")
            units[s.name] = sampling_units(-np.exp(log_u - shift), bundle.antithetic)
            stats[s.name].add(units[s.name])
        ref = strategies[0].name
        for s in strategies[1:]:
            diffs[s.name].add(units[s.name] - units[ref])
    scale = math.exp(shift)
    wall = time.perf_counter() - start
    est = {k: McEstimate(f"utility:{k}", v.mean * scale, v.se * scale, cfg.n_paths, "P", 0.0, utility.y0,
                         cfg.seed, wall) for k, v in stats.items()}
    return Comparison(est, {k: v.se * scale for k, v in diffs.items()})


def evaluate_strategy(strategy: StrategyHandle, model: ModelSpec, claims: ClaimModel, utility: UtilitySpec,
                      cfg: PathConfig) -> McEstimate:
    """Mean and SE of ``-exp(-alpha X_T)`` under ``strategy``."""
    return evaluate_strategies([strategy], model, claims, utility, cfg).estimates[strategy.name]


@dataclass
class DominanceRow:
    name: str
    estimate: float
    std_error: float
    combined_se: float
    paired_se: float
    ok: bool


def dominance_check(base: StrategyHandle, model, claims, utility, cfg, eps=(-0.5, -0.25, 0.25, 0.5)):
    """Perturbed strategies against ``base`` under common random numbers.

    A perturbation passes if its estimate is at most the base estimate plus
    three combined standard errors.
    """
    fam = perturbation_family(base, eps)
    comp = evaluate_strategies([base] + fam, model, claims, utility, cfg)
    e0 = comp.estimates[base.name]
    rows = []
    for s in fam:
        e = comp.estimates[s.name]
        comb = math.hypot(e.std_error, e0.std_error)
        rows.append(DominanceRow(s.name, e.value, e.std_error, comb, comp.diff_se[s.name],
                                 e.value <= e0.value + 3 * comb))
    return e0, rows


# ---------------------------------------------------------------------------
# admissibility


@dataclass
class AuditReport:
    martingale_mean: float
    martingale_se: float
    martingale_ok: bool
    tilted_l2_mean: float
    tilted_l2_se: float
    n_paths: int


def martingale_audit(strategy: StrategyHandle, model: ModelSpec, claims: ClaimModel, utility: UtilitySpec,
                     cfg: PathConfig, a: ValueSurface, b: ValueSurface) -> AuditReport:
    """E[eps_T(pi)] and the P_hat_N second moment of the strategy.

    The Brownian kernel is ``sigma_f^*(Da x + Db) + a sigma_p^* pi`` and the
    jump exponent is ``a``, evaluated along the strategy's own wealth path.
    The second diagnostic reweights P-paths to P_hat_N (tilt ``a``).
    """
    look = Lookup()
    eps_stats = RunningStats()
    l2_stats = RunningStats()
    tag = MeasureTag(Measure.P_HAT_N, a)

    def h_fn(t, x, y):
        yc = a.grid.clamp(y)[0]
        sf = model.sigma_f(yc)
        kern = a.grad(t, yc) * x[:, None] + b.grad(t, yc)
        pi = strategy(t, x, y)
        vol = np.einsum("kij,ki->kj", model.sigma_p(yc), pi)
        return np.einsum("kim,ki->km", sf, kern) + vol * a(t, yc)[:, None]

    for bundle in iter_factor_chunks(model, P, 0.0, utility.y0, utility.T, cfg, claims):
        wb = wealth_on_bundle(model, claims, utility, strategy, bundle)
        res = exponential_martingale(wb, h_fn, a, claims, look)
        eps_stats.add(sampling_units(res.values, wb.antithetic))
        sq = np.zeros(wb.n_paths)
        for k in range(wb.steps):
            pi = strategy(wb.times[k], wb.X[:, k], wb.Y[:, k])
            sq += np.sum(pi * pi, axis=1) * wb.dt
        w = np.exp(girsanov_weight(wb, tag, model, claims, look))
        l2_stats.add(sampling_units(w * sq, wb.antithetic))
    strategy.lookup.check()
    ok = abs(eps_stats.mean - 1.0) <= 3 * eps_stats.se
    return AuditReport(eps_stats.mean, eps_stats.se, ok, l2_stats.mean, l2_stats.se, cfg.n_paths)


# ---------------------------------------------------------------------------
# explicit FBSDE solution


@dataclass
class FbsdeTuple:
    """Explicit forward-backward solution evaluated along P-paths."""

    bundle: PathBundle
    X: np.ndarray  # formula wealth (p, steps + 1)
    p: np.ndarray  # p_tilde = eta X + phi
    q: np.ndarray  # q_tilde (p, steps + 1, m)
    eta: np.ndarray
    phi: np.ndarray
    theta: np.ndarray
    r: np.ndarray
    X_euler: np.ndarray | None = None

    def h(self, k: int, z) -> np.ndarray:
        """Jump kernel ``-eta(t_k, Y_k) z``."""
        return -self.eta[:, k] * z

    @property
    def x_gap(self) -> float:
        """Mean over paths of the largest |formula X - Euler X|."""
        if self.X_euler is None:
            return float("nan")
        return float(np.mean(np.max(np.abs(self.X - self.X_euler), axis=1)))


def build_fbsde_tuple(model: ModelSpec, claims: ClaimModel, utility: UtilitySpec, eta: ValueSurface,
                      phi: ValueSurface, bundle: PathBundle, euler: bool = True) -> FbsdeTuple:
    """Evaluate the explicit wealth formula, p_tilde, q_tilde and h along
    ``bundle``; optionally integrate the wealth by Euler under the FBSDE
    strategy for comparison.

    Integrals in the wealth formula are left-point (Ito) sums on the lattice.
    """
    if bundle.measure is not Measure.P:
        raise ValueError("FBSDE tuples are built on P-paths")
    alpha = utility.alpha
    look = Lookup()
    p, steps, dt = bundle.n_paths, bundle.steps, bundle.dt
    n_nodes = steps + 1
    m = model.m
    et = np.empty((p, n_nodes))
    ph = np.empty((p, n_nodes))
    deta = np.empty((p, n_nodes, model.n))
    dphi = np.empty((p, n_nodes, model.n))
    th = np.empty((p, n_nodes, m))
    rr = np.empty((p, n_nodes))
    sf_all = []
    for k in range(n_nodes):
        y = bundle.Y[:, k]
        t = bundle.times[k]
        et[:, k] = look.value(eta, t, y)
        ph[:, k] = look.value(phi, t, y)
        deta[:, k] = look.grad(eta, t, y)
        dphi[:, k] = look.grad(phi, t, y)
        th[:, k] = theta(model, y)
        rr[:, k] = model.r(y)
        sf_all.append(model.sigma_f(y))
    look.check()
    w = alpha - et
    if np.any(w <= 0):
        raise ValueError("alpha - eta must stay positive along paths")
    _, dj = bundle.step_jumps
    incr = (rr[:, :-1] * dt + np.sum(th[:, :-1] * bundle.dW, axis=2) + 0.5 * np.sum(th[:, :-1] ** 2, axis=2) * dt
            - w[:, :-1] * dj + psi(claims, w[:, :-1]) * dt)
    acc = np.concatenate([np.zeros((p, 1)), np.cumsum(incr, axis=1)], axis=1)
    x0 = utility.x0
    X = (w[:, :1] * x0 + ph - ph[:, :1] + acc) / w
    ptil = et * X + ph
    sf = np.stack(sf_all, axis=1)
    q = (alpha / w)[..., None] * (np.einsum("pkim,pki->pkm", sf, deta) * X[..., None]
                                  + np.einsum("pkim,pki->pkm", sf, dphi) + et[..., None] * th / alpha)
    bound = alpha * math.exp(model.r_bar * utility.T)
    if np.any(np.abs(et) > bound * (1 + 1e-9)):
        raise ValueError("jump kernel exceeds its linear-growth bound")
    tup = FbsdeTuple(bundle, X, ptil, q, et, ph, th, rr)
    if euler:
        strat = fbsde_strategy(model, eta, phi, alpha)
        tup.X_euler = wealth_on_bundle(model, claims, utility, strat, bundle).X
        strat.lookup.check()
    return tup


@dataclass
class ResidualStats:
    rms: float
    max_abs: float
    terminal_mean_abs: float  # mean |p_T| of the BSDE integrated forward from p_0
    terminal_se: float


def step_residuals(tup: FbsdeTuple, model: ModelSpec, claims: ClaimModel, utility: UtilitySpec) -> np.ndarray:
    """Per-step defect of the backward equation along the tuple, (p, steps).

    ``dp - [alpha c + r(alpha X - 1) + |theta|^2/2 + theta.q] dt
    + psi(alpha - eta) dt - q.dW - sum h(z)`` with coefficients frozen at
    the left end of the step.
    """
    b = tup.bundle
    alpha = utility.alpha
    _, dj = b.step_jumps
    k = slice(0, b.steps)
    X, th, q, r, et = tup.X[:, k], tup.theta[:, k], tup.q[:, k], tup.r[:, k], tup.eta[:, k]
    drift = alpha * utility.c + r * (alpha * X - 1) + 0.5 * np.sum(th**2, axis=2) + np.sum(th * q, axis=2)
    return (np.diff(tup.p, axis=1) - drift * b.dt + psi(claims, alpha - et) * b.dt
            - np.sum(q * b.dW, axis=2) + et * dj)


def bsde_residual(tup: FbsdeTuple, model: ModelSpec, claims: ClaimModel, utility: UtilitySpec) -> ResidualStats:
    """RMS and max of the step residuals, plus the terminal value of the
    backward equation integrated forward from ``p_0`` (should be 0)."""
    res = step_residuals(tup, model, claims, utility)
    term = np.abs(tup.p[:, -1] - res.sum(axis=1))
    st = RunningStats().add(sampling_units(term, tup.bundle.antithetic))
    return ResidualStats(float(np.sqrt(np.mean(res**2))), float(np.max(np.abs(res))), st.mean, st.se)


@dataclass
class RefinementLevel:
    steps: int
    rms_residual: float
    terminal_mean_abs: float
    x_gap: float


def refinement_study(model: ModelSpec, claims: ClaimModel, utility: UtilitySpec, surfaces_for, cfg: PathConfig,
                     levels: int = 3) -> list[RefinementLevel]:
    """Residual diagnostics on nested lattices.

    The finest bundle (``cfg.dt``) is simulated once; coarser ones add its
    Brownian increments pairwise and keep the same claims.
    ``surfaces_for(level)`` returns (eta, phi) for a level, the coarsest
    being level 0, so the PDE grid can be refined jointly.
    """
    sq = [0.0] * levels
    cnt = [0] * levels
    term = [RunningStats() for _ in range(levels)]
    gap = [RunningStats() for _ in range(levels)]
    surfs = [surfaces_for(i) for i in range(levels)]
    steps = [0] * levels
    for fine in iter_factor_chunks(model, P, 0.0, utility.y0, utility.T, cfg, claims):
        b = fine
        for lvl in range(levels - 1, -1, -1):
            if lvl < levels - 1:
                b = coarsen(b, model)
            eta, phi = surfs[lvl]
            tup = build_fbsde_tuple(model, claims, utility, eta, phi, b)
            res = step_residuals(tup, model, claims, utility)
            steps[lvl] = b.steps
            sq[lvl] += float(np.sum(res**2))
            cnt[lvl] += res.size
            term[lvl].add(np.abs(tup.p[:, -1] - res.sum(axis=1)))
            gap[lvl].add(np.max(np.abs(tup.X - tup.X_euler), axis=1))
    return [RefinementLevel(steps[i], math.sqrt(sq[i] / cnt[i]), term[i].mean, gap[i].mean)
            for i in range(levels)]
