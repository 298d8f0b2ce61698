"""Market, claim and utility inputs.

Coefficients are drawn from a closed catalog of parametric families
(:class:`Constant`, :class:`TanhAffine`, :class:`OUDrift`).  Every family is
globally Lipschitz with bounded derivatives, and carries its analytic
Jacobian.  All coefficient callables are vectorized: they accept ``y`` of
shape ``(n,)`` or ``(k, n)`` and return ``(*shape)`` or ``(k, *shape)``.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Union

import numpy as np
from numpy.typing import NDArray

Array = NDArray[np.float64]

#: theta() refuses sigma_p(y) whose 2-norm condition number exceeds this.
COND_LIMIT = 1e12


class SingularMatrixError(ValueError):
    """sigma_p(y) is numerically singular."""


class MomentDomainError(ValueError):
    """An exponential moment of the claim law is infinite."""


def _batch(y) -> tuple[Array, bool]:
    y = np.asarray(y, dtype=float)
    if y.ndim == 1:
        return y[None, :], True
    return y, False


# ---------------------------------------------------------------------------
# coefficient catalog


@dataclass(frozen=True)
class Constant:
    """``f(y) = value`` for every ``y``."""

    value: Array

    def __post_init__(self):
        object.__setattr__(self, "value", np.asarray(self.value, dtype=float))

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def __call__(self, y) -> Array:
        yb, single = _batch(y)
        out = np.broadcast_to(self.value, (yb.shape[0],) + self.value.shape).copy()
        return out[0] if single else out

    def jacobian(self, y) -> Array:
        yb, single = _batch(y)
        out = np.zeros((yb.shape[0],) + self.value.shape + (yb.shape[1],))
        return out[0] if single else out

    def is_constant(self) -> bool:
        return True


@dataclass(frozen=True)
class TanhAffine:
    """``f(y) = base + scale * tanh(weight . y + shift)``.

    ``base`` and ``scale`` share the output shape; ``weight`` has length n.
    """

    base: Array
    scale: Array
    weight: Array
    shift: float = 0.0

    def __post_init__(self):
        base = np.asarray(self.base, dtype=float)
        scale = np.broadcast_to(np.asarray(self.scale, dtype=float), base.shape).copy()
        object.__setattr__(self, "base", base)
        object.__setattr__(self, "scale", scale)
        object.__setattr__(self, "weight", np.atleast_1d(np.asarray(self.weight, dtype=float)))
        object.__setattr__(self, "shift", float(self.shift))

    @property
    def shape(self) -> tuple[int, ...]:
        return self.base.shape

    def _z(self, yb: Array) -> Array:
        return np.tanh(yb @ self.weight + self.shift)

    def __call__(self, y) -> Array:
        yb, single = _batch(y)
        z = self._z(yb).reshape((-1,) + (1,) * self.base.ndim)
        out = self.base + self.scale * z
        return out[0] if single else out

    def jacobian(self, y) -> Array:
        yb, single = _batch(y)
        z = self._z(yb)
        dz = (1.0 - z**2)[:, None] * self.weight[None, :]  # (k, n)
        nd = self.base.ndim
        out = self.scale[None, ..., None] * dz.reshape((dz.shape[0],) + (1,) * nd + (dz.shape[1],))
        return out[0] if single else out

    def is_constant(self) -> bool:
        return not np.any(self.scale) or not np.any(self.weight)


@dataclass(frozen=True)
class OUDrift:
    """Mean-reverting drift ``g(y) = kappa (mean - y)``."""

    kappa: Array
    mean: Array

    def __post_init__(self):
        mean = np.atleast_1d(np.asarray(self.mean, dtype=float))
        kappa = np.asarray(self.kappa, dtype=float)
        if kappa.ndim == 0:
            kappa = kappa * np.eye(mean.size)
        object.__setattr__(self, "kappa", kappa)
        object.__setattr__(self, "mean", mean)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.mean.shape

    def __call__(self, y) -> Array:
        yb, single = _batch(y)
        out = (self.mean[None, :] - yb) @ self.kappa.T
        return out[0] if single else out

    def jacobian(self, y) -> Array:
        yb, single = _batch(y)
        out = np.broadcast_to(-self.kappa, (yb.shape[0],) + self.kappa.shape).copy()
        return out[0] if single else out

    def is_constant(self) -> bool:
        return not np.any(self.kappa)


Coefficient = Union[Constant, TanhAffine, OUDrift]


# ---------------------------------------------------------------------------
# claim-size laws


@dataclass(frozen=True)
class Exponential:
    beta: float

    def __post_init__(self):
        if not self.beta > 0:
            raise ValueError("Exponential claims need beta > 0")

    @property
    def u_max(self) -> float:
        return float(self.beta)

    @property
    def mean(self) -> float:
        return 1.0 / self.beta

    def mgf_minus_one(self, u: Array) -> Array:
        return u / (self.beta - u)

    def sample(self, rng: np.random.Generator, size) -> Array:
        return rng.exponential(1.0 / self.beta, size)

    def sample_tilted(self, rng: np.random.Generator, u: Array) -> Array:
        # e^{uz} beta e^{-beta z} normalizes to Exp(beta - u)
        return rng.exponential(1.0, np.shape(u)) / (self.beta - np.asarray(u))

    def second_moment(self) -> float:
        return 2.0 / self.beta**2

    def describe(self) -> str:
        return f"exponential beta={self.beta!r}"


@dataclass(frozen=True)
class Deterministic:
    z0: float

    def __post_init__(self):
        if self.z0 < 0:
            raise ValueError("claim sizes must be non-negative")

    u_max = math.inf

    @property
    def mean(self) -> float:
        return float(self.z0)

    def mgf_minus_one(self, u: Array) -> Array:
        return np.expm1(np.asarray(u) * self.z0)

    def sample(self, rng: np.random.Generator, size) -> Array:
        return np.full(size, float(self.z0))

    def sample_tilted(self, rng: np.random.Generator, u: Array) -> Array:
        return np.full(np.shape(u), float(self.z0))

    def second_moment(self) -> float:
        return float(self.z0) ** 2

    def describe(self) -> str:
        return f"deterministic z0={self.z0!r}"


@dataclass(frozen=True)
class FiniteDiscrete:
    sizes: tuple[float, ...]
    probs: tuple[float, ...]

    def __post_init__(self):
        sizes = tuple(float(s) for s in self.sizes)
        probs = tuple(float(p) for p in self.probs)
        if len(sizes) != len(probs) or not sizes:
            raise ValueError("sizes and probs must be non-empty and of equal length")
        if min(sizes) < 0 or min(probs) < 0 or abs(sum(probs) - 1.0) > 1e-12:
            raise ValueError("need non-negative sizes and probabilities summing to one")
        object.__setattr__(self, "sizes", sizes)
        object.__setattr__(self, "probs", probs)

    u_max = math.inf

    @property
    def mean(self) -> float:
        return float(np.dot(self.sizes, self.probs))

    def mgf_minus_one(self, u: Array) -> Array:
        u = np.asarray(u, dtype=float)
        z = np.asarray(self.sizes)
        p = np.asarray(self.probs)
        return np.tensordot(np.expm1(u[..., None] * z), p, axes=([-1], [0]))

    def sample(self, rng: np.random.Generator, size) -> Array:
        return rng.choice(np.asarray(self.sizes), size=size, p=np.asarray(self.probs))

    def sample_tilted(self, rng: np.random.Generator, u: Array) -> Array:
        u = np.atleast_1d(np.asarray(u, dtype=float))
        z = np.asarray(self.sizes)
        w = np.asarray(self.probs) * np.exp(u[:, None] * z)
        cdf = np.cumsum(w, axis=1)
        cdf /= cdf[:, -1:]
        idx = (rng.random(u.shape[0])[:, None] > cdf).sum(axis=1)
        return z[np.minimum(idx, z.size - 1)]

    def second_moment(self) -> float:
        return float(np.dot(np.square(self.sizes), self.probs))

    def describe(self) -> str:
        s = ",".join(repr(v) for v in self.sizes)
        p = ",".join(repr(v) for v in self.probs)
        return f"discrete sizes={s} probs={p}"


@dataclass(frozen=True)
class Pareto:
    """Heavy-tailed law; no exponential moments.  Only useful to exercise
    the validator."""

    shape: float
    scale: float

    u_max = 0.0

    @property
    def mean(self) -> float:
        if self.shape <= 1:
            return math.inf
        return self.shape * self.scale / (self.shape - 1)

    def mgf_minus_one(self, u: Array) -> Array:
        u = np.asarray(u, dtype=float)
        if np.any(u > 0):
            raise MomentDomainError("Pareto claims have no positive exponential moment")
        raise NotImplementedError("Pareto mgf is only needed at u <= 0, which is never used")

    def sample(self, rng: np.random.Generator, size) -> Array:
        return self.scale * (1.0 + rng.pareto(self.shape, size))

    def sample_tilted(self, rng, u):
        raise MomentDomainError("cannot tilt a heavy-tailed claim law")

    def second_moment(self) -> float:
        if self.shape <= 2:
            return math.inf
        return self.shape * self.scale**2 / (self.shape - 2)

    def describe(self) -> str:
        return f"pareto shape={self.shape!r} scale={self.scale!r}"


ClaimDist = Union[Exponential, Deterministic, FiniteDiscrete, Pareto]


# ---------------------------------------------------------------------------
# model objects


@dataclass(frozen=True)
class ModelSpec:
    """Coefficient set of the factor-driven market.

    Shapes: ``r`` scalar, ``mu`` (m,), ``sigma_p`` (m, m), ``g`` (n,),
    ``sigma_f`` (n, m).  ``eig_bounds`` optionally declares the ellipticity
    constants ``(mu1, mu2)``; when absent the validator reports the
    empirical extremes.
    """

    n: int
    m: int
    r: Coefficient
    mu: Coefficient
    sigma_p: Coefficient
    g: Coefficient
    sigma_f: Coefficient
    r_bar: float
    eig_bounds: tuple[float, float] | None = None

    def __post_init__(self):
        if self.n < 1 or self.m < 1:
            raise ValueError("dimensions must be positive")
        expected = {
            "r": (),
            "mu": (self.m,),
            "sigma_p": (self.m, self.m),
            "g": (self.n,),
            "sigma_f": (self.n, self.m),
        }
        for name, shape in expected.items():
            got = getattr(self, name).shape
            if tuple(got) != shape:
                raise ValueError(f"{name} has shape {got}, expected {shape}")
        for name in ("r", "mu", "sigma_p", "sigma_f"):
            coef = getattr(self, name)
            if isinstance(coef, TanhAffine) and coef.weight.size != self.n:
                raise ValueError(f"{name}: tanh weight must have length n={self.n}")
        if self.r_bar < 0:
            raise ValueError("r_bar must be non-negative")

    def is_y_independent(self) -> bool:
        """True when r, mu and sigma_p do not vary with the factor."""
        return all(getattr(self, k).is_constant() for k in ("r", "mu", "sigma_p", "sigma_f"))


@dataclass(frozen=True)
class ClaimModel:
    lam: float
    dist: ClaimDist

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("claim intensity must be non-negative")

    @property
    def u_max(self) -> float:
        return float(self.dist.u_max)


@dataclass(frozen=True)
class UtilitySpec:
    alpha: float
    T: float
    c: float
    x0: float = 0.0
    y0: tuple[float, ...] = (0.0,)

    def __post_init__(self):
        if not (self.alpha > 0 and self.T > 0 and self.c > 0):
            raise ValueError("need alpha > 0, T > 0 and c > 0")
        object.__setattr__(self, "y0", tuple(float(v) for v in np.atleast_1d(self.y0)))

    def utility(self, x):
        return -np.exp(-self.alpha * np.asarray(x))


# ---------------------------------------------------------------------------
# scalar machinery


def theta(model: ModelSpec, y) -> Array:
    """Market price of risk ``sigma_p(y)^{-1} (mu(y) - r(y) 1)``.

    Vectorized over ``y``.  Raises :class:`SingularMatrixError` when
    sigma_p(y) is too ill-conditioned to solve against.
    """
    yb, single = _batch(y)
    excess = model.mu(yb) - model.r(yb)[:, None]
    sp = model.sigma_p(yb)
    if model.m == 1:
        s = sp[:, 0, 0]
        if np.any(~(np.abs(s) > 0)) or np.any(~np.isfinite(s)):
            raise SingularMatrixError("sigma_p(y) vanishes")
        out = excess / s[:, None]
    else:
        cond = np.linalg.cond(sp)
        if np.any(~(cond <= COND_LIMIT)):
            raise SingularMatrixError(f"sigma_p(y) condition number {np.max(cond):.3g} exceeds {COND_LIMIT:g}")
        out = np.linalg.solve(sp, excess[..., None])[..., 0]
    return out[0] if single else out


def psi(claims: ClaimModel, u):
    """Jump compensator ``lambda * int (e^{u z} - 1) nu(dz)``.

    Raises :class:`MomentDomainError` if any ``u >= u_max``.
    """
    u_arr = np.asarray(u, dtype=float)
    if np.any(u_arr >= claims.u_max):
        raise MomentDomainError(
            f"exponential moment infinite: u={np.max(u_arr):.6g} >= u_max={claims.u_max:.6g}"
        )
    if claims.lam == 0:
        out = np.zeros_like(u_arr)
    else:
        out = claims.lam * claims.dist.mgf_minus_one(u_arr)
    return float(out) if np.ndim(out) == 0 else out


def solve_sigma_p_transpose(model: ModelSpec, y: Array, rhs: Array) -> Array:
    """Solve ``sigma_p(y)^* x = rhs`` row-wise, for ``y`` (k, n), rhs (k, m)."""
    sp = model.sigma_p(y)
    if model.m == 1:
        return rhs / sp[:, 0, :]
    cond = np.linalg.cond(sp)
    if np.any(~(cond <= COND_LIMIT)):
        raise SingularMatrixError("sigma_p(y) is singular")
    return np.linalg.solve(np.swapaxes(sp, -1, -2), rhs[..., None])[..., 0]


# ---------------------------------------------------------------------------
# validation


@dataclass
class ValidationReport:
    """Outcome of probing (A1)-(A7) on a lattice of factor values."""

    flags: dict[str, bool]
    evidence: dict[str, float | int | str]
    lattice: list[list[float]] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(self.flags.values())

    @property
    def failed(self) -> list[str]:
        return [k for k, v in self.flags.items() if not v]

    def to_json(self) -> dict:
        out: dict[str, object] = {}
        for k, v in self.flags.items():
            out[f"{k}_pass"] = bool(v)
        for k, v in self.evidence.items():
            out[k] = v
        out["failed"] = ",".join(self.failed)
        out["all_pass"] = self.passed
        return out


def default_half_widths(model: ModelSpec, utility: UtilitySpec, k: float = 5.0) -> Array:
    """Per-axis half width ``k * ||sigma_f(y0)|| * sqrt(T)`` of the PDE domain."""
    sf = model.sigma_f(np.asarray(utility.y0))
    width = k * np.linalg.norm(sf, 2) * math.sqrt(utility.T)
    if width <= 0:
        width = k * math.sqrt(utility.T)
    return np.full(model.n, width)


def probe_lattice(model: ModelSpec, utility: UtilitySpec, points: int = 41, k: float = 5.0,
                  bounds=None) -> Array:
    """Deterministic tensor lattice of factor values over the PDE domain."""
    y0 = np.asarray(utility.y0)
    if bounds is None:
        hw = default_half_widths(model, utility, k)
        bounds = [(y0[i] - hw[i], y0[i] + hw[i]) for i in range(model.n)]
    axes = [np.linspace(lo, hi, points) for lo, hi in bounds]
    return np.array(list(itertools.product(*axes)), dtype=float)


def _finite(x: float) -> float | str:
    return float(x) if math.isfinite(x) else repr(float(x))


def validate(model: ModelSpec, claims: ClaimModel, utility: UtilitySpec, points: int = 41,
             k: float = 5.0, bounds=None) -> ValidationReport:
    """Probe every assumption; failures are reported, never raised."""
    ys = probe_lattice(model, utility, points, k, bounds)
    flags: dict[str, bool] = {}
    ev: dict[str, float | int | str] = {"lattice_points": int(ys.shape[0]), "points_per_axis": points}

    # A1: guaranteed by the catalog; record derivative magnitudes as evidence.
    dmax = 0.0
    for name in ("r", "mu", "sigma_p", "g", "sigma_f"):
        coef = getattr(model, name)
        ok = isinstance(coef, (Constant, TanhAffine, OUDrift))
        flags["A1"] = flags.get("A1", True) and ok
        jac = coef.jacobian(ys)
        dmax = max(dmax, float(np.max(np.abs(jac))) if jac.size else 0.0)
    ev["A1_max_abs_derivative"] = dmax

    sp = model.sigma_p(ys)
    sv = np.linalg.svd(sp, compute_uv=False)
    smin = float(np.min(sv))
    cond = float(np.max(sv[:, 0] / np.where(sv[:, -1] > 0, sv[:, -1], np.nan))) if smin > 0 else math.inf
    if not math.isfinite(cond):
        cond = math.inf
    flags["A2"] = smin > 0 and cond <= COND_LIMIT
    ev["A2_min_singular_value"] = smin
    ev["A2_max_condition"] = _finite(cond)

    sf = model.sigma_f(ys)
    eig_p = np.linalg.eigvalsh(sp @ np.swapaxes(sp, -1, -2))
    eig_f = np.linalg.eigvalsh(sf @ np.swapaxes(sf, -1, -2))
    lo = float(min(eig_p.min(), eig_f.min()))
    hi = float(max(eig_p.max(), eig_f.max()))
    if model.eig_bounds is not None:
        mu1, mu2 = model.eig_bounds
        flags["A3"] = mu1 > 0 and lo >= mu1 and hi <= mu2
        ev["A3_declared_mu1"], ev["A3_declared_mu2"] = float(mu1), float(mu2)
    else:
        flags["A3"] = lo > 0
    ev["A3_min_eigenvalue"] = lo
    ev["A3_max_eigenvalue"] = hi

    rv = model.r(ys)
    flags["A4"] = bool(np.all(rv >= 0) and np.all(rv <= model.r_bar))
    ev["A4_min_r"] = float(rv.min())
    ev["A4_max_r"] = float(rv.max())
    ev["r_bar"] = float(model.r_bar)

    flags["A5"] = utility.alpha > 0
    ev["alpha"] = float(utility.alpha)

    u6 = utility.alpha * math.exp(model.r_bar * utility.T)
    u7 = utility.alpha * math.exp(2 * model.r_bar * utility.T)
    mean_ok = math.isfinite(claims.dist.mean)
    flags["A6"] = mean_ok and u6 < claims.u_max
    flags["A7"] = mean_ok and u7 < claims.u_max
    ev["claim_mean"] = _finite(claims.dist.mean)
    ev["u_max"] = _finite(claims.u_max)
    ev["A6_exponent"] = u6
    ev["A7_exponent"] = u7
    ev["A6_margin"] = _finite(claims.u_max - u6)
    ev["A7_margin"] = _finite(claims.u_max - u7)
    return ValidationReport(flags=flags, evidence=ev, lattice=ys.tolist())


# ---------------------------------------------------------------------------
# reference models


def constant_model(r0: float = 0.02, mu0: float = 0.08, sigma0: float = 0.2,
                   sigma_f: float = 0.3, kappa: float = 1.0) -> ModelSpec:
    """One asset, one factor; r, mu and sigma_p do not depend on the factor."""
    return ModelSpec(
        n=1, m=1,
        r=Constant(r0), mu=Constant([mu0]), sigma_p=Constant([[sigma0]]),
        g=OUDrift(kappa, [0.0]), sigma_f=Constant([[sigma_f]]),
        r_bar=r0,
    )


def tanh_model() -> ModelSpec:
    """OU factor with tanh-saturated rate and drift."""
    return ModelSpec(
        n=1, m=1,
        r=TanhAffine(0.015, 0.015, [1.0]),
        mu=TanhAffine([0.05], [0.02], [1.0]),
        sigma_p=Constant([[0.2]]),
        g=OUDrift(1.0, [0.0]),
        sigma_f=Constant([[0.3]]),
        r_bar=0.03,
    )


def reference_claims(beta: float = 10.0, lam: float = 1.0) -> ClaimModel:
    return ClaimModel(lam, Exponential(beta))


def reference_utility() -> UtilitySpec:
    return UtilitySpec(alpha=1.0, T=1.0, c=1.5, x0=0.0, y0=(0.0,))
