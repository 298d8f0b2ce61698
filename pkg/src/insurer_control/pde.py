"""Backward parabolic solvers for the surfaces a_hat, a, b, eta and phi.

Every equation is linear once written in the right unknown:

    u_t + 1/2 tr(A D^2 u) + drift . Du - potential * u + source = 0,
    u(T, .) = terminal,

with ``A = sigma_f sigma_f^*``.  Space is discretized with central
differences (upwinded per node and axis when the cell Peclet number
exceeds 2); the truncated boundary uses zero second derivative, i.e. linear
extrapolation, which turns the first derivative into a one-sided
difference.  Time stepping is a theta-scheme (fully implicit by default)
written in increment form, so that constant data is preserved bit-for-bit
when the operator annihilates constants.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from .model import (
    Array,
    ClaimModel,
    ModelSpec,
    MomentDomainError,
    UtilitySpec,
    default_half_widths,
    psi,
    theta,
)

TAGS = ("a_hat", "a", "b", "eta_tilde", "eta", "phi", "other")


class DomainError(ValueError):
    """Evaluation point outside the solved grid."""


class SolverError(RuntimeError):
    """Linear solve failed or produced non-finite values."""


@dataclass(frozen=True)
class GridSpec:
    """Tensor grid over the truncated factor domain plus a uniform time lattice."""

    bounds: tuple[tuple[float, float], ...]
    n_y: int = 201
    n_t: int = 200
    T: float = 1.0

    def __post_init__(self):
        bounds = tuple((float(lo), float(hi)) for lo, hi in self.bounds)
        object.__setattr__(self, "bounds", bounds)
        if not 1 <= len(bounds) <= 2:
            raise ValueError("finite differences are limited to n <= 2 factors")
        if self.n_y < 3 or self.n_y % 2 == 0:
            raise ValueError("n_y must be odd and at least 3")
        if self.n_t < 1:
            raise ValueError("n_t must be positive")
        for lo, hi in bounds:
            if not (math.isfinite(lo) and math.isfinite(hi) and lo < hi):
                raise ValueError(f"bad axis bounds ({lo}, {hi})")
        if not self.T > 0:
            raise ValueError("T must be positive")

    @classmethod
    def default(cls, model: ModelSpec, utility: UtilitySpec, k: float = 5.0, n_y: int = 201,
                n_t: int = 200) -> "GridSpec":
        y0 = np.asarray(utility.y0, dtype=float)
        if y0.size != model.n:
            raise ValueError("y0 dimension does not match the model")
        hw = default_half_widths(model, utility, k)
        return cls(tuple((y0[i] - hw[i], y0[i] + hw[i]) for i in range(model.n)), n_y, n_t, utility.T)

    @property
    def n(self) -> int:
        return len(self.bounds)

    @property
    def shape(self) -> tuple[int, ...]:
        return (self.n_y,) * self.n

    @property
    def size(self) -> int:
        return self.n_y**self.n

    @property
    def h(self) -> Array:
        return np.array([(hi - lo) / (self.n_y - 1) for lo, hi in self.bounds])

    @property
    def dt(self) -> float:
        return self.T / self.n_t

    @property
    def axes(self) -> list[Array]:
        return [np.linspace(lo, hi, self.n_y) for lo, hi in self.bounds]

    @property
    def times(self) -> Array:
        return np.linspace(0.0, self.T, self.n_t + 1)

    def nodes(self) -> Array:
        """All nodes, shape (size, n), C order (last axis fastest)."""
        mesh = np.meshgrid(*self.axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=1)

    def refined(self) -> "GridSpec":
        """Halve both h and dt."""
        return GridSpec(self.bounds, 2 * (self.n_y - 1) + 1, 2 * self.n_t, self.T)

    def doubled(self) -> "GridSpec":
        """Double the domain around its center, keeping h and dt."""
        b = tuple((lo - (hi - lo) / 2, hi + (hi - lo) / 2) for lo, hi in self.bounds)
        return GridSpec(b, 2 * (self.n_y - 1) + 1, self.n_t, self.T)

    def with_time_steps(self, n_t: int) -> "GridSpec":
        return GridSpec(self.bounds, self.n_y, n_t, self.T)

    def interior_mask(self, margin: float = 0.2) -> Array:
        """Nodes whose distance to every boundary is at least ``margin`` times
        the axis length."""
        masks = []
        for (lo, hi), ax in zip(self.bounds, self.axes):
            d = margin * (hi - lo)
            masks.append((ax >= lo + d - 1e-12) & (ax <= hi - d + 1e-12))
        mesh = np.meshgrid(*masks, indexing="ij")
        out = np.ones(self.shape, dtype=bool)
        for m in mesh:
            out &= m
        return out

    def contains(self, y: Array, tol: float = 1e-12) -> Array:
        y = np.atleast_2d(y)
        ok = np.ones(y.shape[0], dtype=bool)
        for i, (lo, hi) in enumerate(self.bounds):
            span = tol * (hi - lo)
            ok &= (y[:, i] >= lo - span) & (y[:, i] <= hi + span)
        return ok

    def clamp(self, y: Array) -> tuple[Array, Array]:
        """Project points onto the grid box; returns (clamped, was_clamped)."""
        lo = np.array([b[0] for b in self.bounds])
        hi = np.array([b[1] for b in self.bounds])
        yc = np.clip(y, lo, hi)
        return yc, np.any(yc != y, axis=-1)


def _locate(x: Array, lo: float, h: float, count: int) -> tuple[Array, Array]:
    s = (x - lo) / h
    i0 = np.clip(np.floor(s).astype(np.int64), 0, count - 2)
    return i0, s - i0


@dataclass(frozen=True, eq=False)
class ValueSurface:
    """Scalar function of (t, y) sampled on a :class:`GridSpec`.

    ``values`` has shape ``(n_t + 1, *grid.shape)``; the first index is the
    time step (time ``k * dt``).
    """

    values: Array
    grid: GridSpec
    tag: str = "other"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=float)
        if vals.shape != (self.grid.n_t + 1,) + self.grid.shape:
            raise ValueError(f"values shape {vals.shape} does not match grid")
        if self.tag not in TAGS:
            raise ValueError(f"unknown surface tag {self.tag!r}")
        if not np.all(np.isfinite(vals)):
            raise SolverError(f"surface {self.tag} has non-finite values")
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)

    @cached_property
    def node_gradient(self) -> Array:
        """Spatial gradient at every node, shape ``(n_t+1, *shape, n)``.
        Central in the interior, one-sided on the boundary."""
        return node_gradient(self.values, self.grid)

    @cached_property
    def log_gradient(self) -> Array:
        """``D log u`` at every node (requires u > 0)."""
        if np.any(self.values <= 0):
            raise ValueError(f"log-gradient of non-positive surface {self.tag}")
        return node_gradient(np.log(self.values), self.grid)

    def _weights(self, t, y: Array):
        g = self.grid
        y = np.atleast_2d(np.asarray(y, dtype=float))
        k = y.shape[0]
        t = np.broadcast_to(np.asarray(t, dtype=float), (k,))
        if np.any(t < -1e-12) or np.any(t > g.T * (1 + 1e-12)):
            raise DomainError("time outside [0, T]")
        if not np.all(g.contains(y)):
            raise DomainError("factor value outside the solved grid")
        it, ft = _locate(np.clip(t, 0.0, g.T), 0.0, g.dt, g.n_t + 1)
        ax_idx = []
        for i, (lo, _) in enumerate(g.bounds):
            ax_idx.append(_locate(y[:, i], lo, g.h[i], g.n_y))
        return it, ft, ax_idx

    def _interp_array(self, arr: Array, t, y) -> Array:
        # nested lerps v0 + f (v1 - v0): constant data is reproduced exactly
        it, ft, ax_idx = self._weights(t, y)
        n = self.grid.n
        fracs = [ft] + [f for _, f in ax_idx]
        starts = [it] + [i0 for i0, _ in ax_idx]
        vals = {}
        for corner in range(2 ** (n + 1)):
            idx = tuple(s + ((corner >> j) & 1) for j, s in enumerate(starts))
            vals[corner] = arr[idx]
        extra = arr.ndim - 1 - n
        for j in range(n + 1):
            f = fracs[j].reshape((-1,) + (1,) * extra)
            step = 1 << j
            vals = {c: vals[c] + f * (vals[c | step] - vals[c]) for c in vals if not c & step}
        return np.asarray(vals[0], dtype=float)

    def __call__(self, t, y) -> Array:
        """Multilinear interpolation in (t, y); y of shape (k, n) or (n,)."""
        single = np.ndim(y) == 1
        out = self._interp_array(self.values, t, y)
        return out[0] if single else out

    def grad(self, t, y) -> Array:
        single = np.ndim(y) == 1
        out = self._interp_array(self.node_gradient, t, y)
        return out[0] if single else out

    def grad_log(self, t, y) -> Array:
        single = np.ndim(y) == 1
        out = self._interp_array(self.log_gradient, t, y)
        return out[0] if single else out

    def at_node(self, step: int, y) -> float:
        """Value at time step ``step`` and the node nearest to ``y``."""
        idx = tuple(int(round((float(v) - lo) / h)) for v, (lo, _), h in zip(np.atleast_1d(y), self.grid.bounds, self.grid.h))
        return float(self.values[(step,) + idx])

    def to_csv(self, path) -> None:
        """Write ``t,y1[,y2],value`` rows, row-major by time step."""
        g = self.grid
        nodes = g.nodes()
        header = ["t"] + [f"y{i + 1}" for i in range(g.n)] + ["value"]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            for k, t in enumerate(g.times):
                flat = self.values[k].ravel()
                for j in range(nodes.shape[0]):
                    w.writerow([f"{t:.17g}"] + [f"{v:.17g}" for v in nodes[j]] + [f"{flat[j]:.17g}"])


def gradient(surface: ValueSurface, t, y) -> Array:
    """Spatial gradient of ``surface`` at (t, y), interpolated from node values."""
    return surface.grad(t, y)


def read_surface_csv(path, grid: GridSpec, tag: str = "other") -> ValueSurface:
    data = np.loadtxt(path, delimiter=",", skiprows=1)
    vals = data[:, -1].reshape((grid.n_t + 1,) + grid.shape)
    return ValueSurface(vals, grid, tag)


def node_gradient(values: Array, grid: GridSpec) -> Array:
    n = grid.n
    grads = np.gradient(values, *grid.h, axis=tuple(range(1, n + 1)), edge_order=1)
    if n == 1:
        grads = [grads]
    return np.stack(grads, axis=-1)


# ---------------------------------------------------------------------------
# operator assembly


@dataclass
class _Operator:
    """Off-diagonal stencil in difference form plus a potential.

    ``(L u)_i = sum_j w_ij (u_j - u_i) - potential_i u_i``.
    """

    rows: Array
    cols: Array
    w: Array
    potential: Array
    size: int
    upwind_nodes: int = 0

    def apply(self, u: Array) -> Array:
        diff = self.w * (u[self.cols] - u[self.rows])
        return np.bincount(self.rows, weights=diff, minlength=self.size) - self.potential * u

    def system(self, coef: float) -> sp.csc_matrix:
        """Sparse ``I - coef * L``."""
        rowsum = np.bincount(self.rows, weights=self.w, minlength=self.size)
        diag = 1.0 + coef * (rowsum + self.potential)
        m = sp.coo_matrix(
            (np.concatenate([diag, -coef * self.w]),
             (np.concatenate([np.arange(self.size), self.rows]),
              np.concatenate([np.arange(self.size), self.cols]))),
            shape=(self.size, self.size),
        )
        return m.tocsc()


def _assemble(grid: GridSpec, diff: Array, drift: Array, potential: Array) -> _Operator:
    """Build the stencil for ``1/2 tr(diff D^2) + drift . D - potential``.

    diff (N, n, n), drift (N, n), potential (N,), nodes in C order.
    """
    n, N, ny = grid.n, grid.size, grid.n_y
    h = grid.h
    idx = np.unravel_index(np.arange(N), grid.shape)
    strides = [ny ** (n - 1 - i) for i in range(n)]
    rows, cols, ws = [], [], []
    upwind = 0

    def add(mask, offset, weight):
        sel = np.nonzero(mask)[0]
        if sel.size:
            rows.append(sel)
            cols.append(sel + offset)
            ws.append(np.broadcast_to(weight, mask.shape)[sel])

    for i in range(n):
        a = diff[:, i, i]
        b = drift[:, i]
        hi_ = h[i]
        s = strides[i]
        lo_b = idx[i] == 0
        hi_b = idx[i] == ny - 1
        inner = ~(lo_b | hi_b)
        with np.errstate(divide="ignore", invalid="ignore"):
            pe = np.where(a > 0, np.abs(b) * hi_ / (0.5 * a), np.where(b == 0, 0.0, np.inf))
        central = pe <= 2.0
        upwind += int(np.count_nonzero(inner & ~central))
        dcoef = 0.5 * a / hi_**2
        w_minus = np.where(central, dcoef - b / (2 * hi_), dcoef + np.maximum(-b, 0.0) / hi_)
        w_plus = np.where(central, dcoef + b / (2 * hi_), dcoef + np.maximum(b, 0.0) / hi_)
        add(inner, -s, w_minus)
        add(inner, s, w_plus)
        # zero second derivative on the boundary: one-sided first derivative
        add(lo_b, s, b / hi_)
        add(hi_b, -s, -b / hi_)

    if n == 2:
        a01 = diff[:, 0, 1]
        both = (idx[0] > 0) & (idx[0] < ny - 1) & (idx[1] > 0) & (idx[1] < ny - 1) & (a01 != 0)
        c = a01 / (4 * h[0] * h[1])
        s0, s1 = strides
        add(both, s0 + s1, c)
        add(both, -s0 - s1, c)
        add(both, s0 - s1, -c)
        add(both, -s0 + s1, -c)

    if rows:
        r = np.concatenate(rows)
        cidx = np.concatenate(cols)
        w = np.concatenate(ws)
    else:
        r = cidx = np.zeros(0, dtype=np.int64)
        w = np.zeros(0)
    keep = w != 0
    return _Operator(r[keep], cidx[keep], w[keep], np.asarray(potential, dtype=float), N, upwind)


def _march(grid: GridSpec, terminal: Array, operator_at, source_at, scheme: float = 1.0,
           time_independent: bool = False) -> Array:
    """Backward theta-scheme in increment form.

    ``operator_at(k)`` and ``source_at(k)`` give the operator and source at
    time step k (flattened node vectors).  Returns (n_t+1, N).
    """
    if not 0.5 <= scheme <= 1.0:
        raise ValueError("theta-scheme weight must lie in [0.5, 1]")
    N, nt, dt = grid.size, grid.n_t, grid.dt
    out = np.empty((nt + 1, N))
    out[nt] = terminal
    lu = None
    op_next = operator_at(nt)
    f_next = source_at(nt)
    for k in range(nt - 1, -1, -1):
        op_k = op_next if time_independent else operator_at(k)
        f_k = source_at(k)
        u1 = out[k + 1]
        if time_independent:
            rhs = op_k.apply(u1) + scheme * f_k + (1 - scheme) * f_next
        else:
            rhs = scheme * op_k.apply(u1) + (1 - scheme) * op_next.apply(u1) + scheme * f_k + (1 - scheme) * f_next
        rhs *= dt
        if lu is None or not time_independent:
            try:
                lu = splu(op_k.system(scheme * dt))
            except RuntimeError as exc:  # singular factor
                raise SolverError(f"linear system singular at step {k}: {exc}") from exc
        delta = lu.solve(rhs) if np.any(rhs) else np.zeros(N)
        out[k] = u1 + delta
        if not np.all(np.isfinite(out[k])):
            raise SolverError(f"non-finite values at time step {k}")
        op_next, f_next = op_k, f_k
    return out


# ---------------------------------------------------------------------------
# node-wise coefficients


@dataclass
class _NodeCoefficients:
    nodes: Array
    diff: Array  # sigma_f sigma_f^*
    sigma_f: Array
    theta: Array
    g: Array
    r: Array

    @classmethod
    def build(cls, model: ModelSpec, grid: GridSpec) -> "_NodeCoefficients":
        if grid.n != model.n:
            raise ValueError("grid dimension does not match model")
        y = grid.nodes()
        sf = model.sigma_f(y)
        return cls(y, sf @ np.swapaxes(sf, -1, -2), sf, theta(model, y), model.g(y), model.r(y))

    @property
    def risk_neutral_drift(self) -> Array:
        """``g - sigma_f theta``."""
        return self.g - np.einsum("kij,kj->ki", self.sigma_f, self.theta)


def _check_grid(model: ModelSpec, grid: GridSpec):
    if model.n > 2:
        raise ValueError("finite differences support n <= 2; use the Monte Carlo evaluators")
    if grid.n != model.n:
        raise ValueError("grid dimension does not match model")


def solve_a_hat(model: ModelSpec, utility: UtilitySpec, grid: GridSpec, scheme: float = 1.0) -> ValueSurface:
    """Solve the linear equation for ``a_hat = 1/a`` (terminal ``1/alpha``)."""
    _check_grid(model, grid)
    co = _NodeCoefficients.build(model, grid)
    op = _assemble(grid, co.diff, co.risk_neutral_drift, co.r)
    zero = np.zeros(grid.size)
    vals = _march(grid, np.full(grid.size, 1.0 / utility.alpha), lambda k: op, lambda k: zero,
                  scheme, time_independent=True)
    return ValueSurface(vals.reshape((grid.n_t + 1,) + grid.shape), grid, "a_hat",
                        {"upwind_nodes": op.upwind_nodes, "scheme": scheme})


def a_from_a_hat(surface: ValueSurface, alpha: float | None = None) -> ValueSurface:
    """Pointwise reciprocal; the terminal slice is set to alpha exactly."""
    if surface.tag != "a_hat":
        raise ValueError("expected an a_hat surface")
    vals = surface.values
    if np.any(vals <= 0):
        raise SolverError("a_hat crossed zero; a = 1/a_hat undefined")
    if alpha is None:
        alpha = 1.0 / vals[-1].flat[0]
    a = 1.0 / vals
    a[-1] = alpha
    return ValueSurface(a, surface.grid, "a", dict(surface.meta))


def _require_same_grid(s: ValueSurface, grid: GridSpec):
    if s.grid != grid:
        raise ValueError(f"surface {s.tag} was solved on a different grid")


def _check_moment(claims: ClaimModel, u: Array, what: str):
    if np.any(u >= claims.u_max):
        raise MomentDomainError(
            f"{what} reaches {np.max(u):.6g} >= u_max={claims.u_max:.6g}: exponential moment breached"
        )


def solve_b(model: ModelSpec, claims: ClaimModel, utility: UtilitySpec, a: ValueSurface, grid: GridSpec,
            scheme: float = 1.0) -> ValueSurface:
    """Solve the linear equation for b given the a-surface.

    Drift ``g - sigma_f theta - A D(log a)``, source
    ``1/2 |theta + sigma_f^* D(log a)|^2 + c a - psi(a)``, terminal 0.
    """
    _check_grid(model, grid)
    if a.tag != "a":
        raise ValueError("solve_b needs the a surface")
    _require_same_grid(a, grid)
    _check_moment(claims, a.values, "a(t, y)")
    co = _NodeCoefficients.build(model, grid)
    N = grid.size
    a_flat = a.values.reshape(grid.n_t + 1, N)
    dlog = a.log_gradient.reshape(grid.n_t + 1, N, grid.n)
    base = co.risk_neutral_drift
    psi_a = psi(claims, a_flat)

    def op_at(k):
        drift = base - np.einsum("kij,kj->ki", co.diff, dlog[k])
        return _assemble(grid, co.diff, drift, np.zeros(N))

    def src_at(k):
        v = co.theta + np.einsum("kji,kj->ki", co.sigma_f, dlog[k])
        return 0.5 * np.sum(v**2, axis=1) + utility.c * a_flat[k] - psi_a[k]

    vals = _march(grid, np.zeros(N), op_at, src_at, scheme)
    return ValueSurface(vals.reshape((grid.n_t + 1,) + grid.shape), grid, "b", {"scheme": scheme})


def solve_eta_tilde(model: ModelSpec, utility: UtilitySpec, grid: GridSpec, scheme: float = 1.0) -> ValueSurface:
    """Linear equation for ``1/(alpha - eta)``, assembled on its own."""
    _check_grid(model, grid)
    y = grid.nodes()
    sf = model.sigma_f(y)
    th = theta(model, y)
    diff = np.einsum("kim,kjm->kij", sf, sf)
    drift = model.g(y) - np.einsum("kim,km->ki", sf, th)
    op = _assemble(grid, diff, drift, model.r(y))
    zero = np.zeros(grid.size)
    vals = _march(grid, np.full(grid.size, 1.0 / utility.alpha), lambda k: op, lambda k: zero,
                  scheme, time_independent=True)
    return ValueSurface(vals.reshape((grid.n_t + 1,) + grid.shape), grid, "eta_tilde", {"scheme": scheme})


def solve_eta(model: ModelSpec, utility: UtilitySpec, grid: GridSpec, scheme: float = 1.0) -> ValueSurface:
    """eta = alpha - 1/eta_tilde, with eta(T, .) = 0 exactly."""
    et = solve_eta_tilde(model, utility, grid, scheme)
    if np.any(et.values <= 0):
        raise SolverError("eta_tilde crossed zero")
    eta = utility.alpha - 1.0 / et.values
    eta[-1] = 0.0
    return ValueSurface(eta, grid, "eta", {"scheme": scheme})


def solve_phi(model: ModelSpec, claims: ClaimModel, utility: UtilitySpec, eta: ValueSurface, grid: GridSpec,
              scheme: float = 1.0) -> ValueSurface:
    """Linear equation for phi given eta.

    Drift ``g - sigma_f theta + A D(eta)/(alpha - eta)``, source
    ``D(eta) . sigma_f theta / (alpha - eta) - |theta|^2/2 + r - c (alpha - eta)
    + psi(alpha - eta)``, terminal 0.
    """
    _check_grid(model, grid)
    if eta.tag != "eta":
        raise ValueError("solve_phi needs the eta surface")
    _require_same_grid(eta, grid)
    alpha = utility.alpha
    N = grid.size
    eta_flat = eta.values.reshape(grid.n_t + 1, N)
    omega = alpha - eta_flat
    if np.any(omega <= 0):
        raise SolverError("alpha - eta must stay positive")
    _check_moment(claims, omega, "alpha - eta(t, y)")
    deta = eta.node_gradient.reshape(grid.n_t + 1, N, grid.n)
    y = grid.nodes()
    sf = model.sigma_f(y)
    th = theta(model, y)
    r = model.r(y)
    diff = np.einsum("kim,kjm->kij", sf, sf)
    sf_th = np.einsum("kim,km->ki", sf, th)
    base = model.g(y) - sf_th
    th2 = np.sum(th**2, axis=1)
    psi_w = psi(claims, omega)

    def op_at(k):
        drift = base + np.einsum("kij,kj->ki", diff, deta[k]) / omega[k][:, None]
        return _assemble(grid, diff, drift, np.zeros(N))

    def src_at(k):
        return (np.sum(deta[k] * sf_th, axis=1) / omega[k] - 0.5 * th2 + r
                - utility.c * omega[k] + psi_w[k])

    vals = _march(grid, np.zeros(N), op_at, src_at, scheme)
    return ValueSurface(vals.reshape((grid.n_t + 1,) + grid.shape), grid, "phi", {"scheme": scheme})


# ---------------------------------------------------------------------------
# diagnostics


def semilinear_residual_a(model: ModelSpec, a: ValueSurface, margin: float = 0.2) -> float:
    """Max interior residual of the nonlinear a-equation, evaluated on the
    solved surface with backward time differences."""
    grid = a.grid
    co = _NodeCoefficients.build(model, grid)
    N = grid.size
    vals = a.values.reshape(grid.n_t + 1, N)
    mask = grid.interior_mask(margin).ravel()
    # exclude nodes adjacent to the boundary where the stencil is one-sided
    op0 = _assemble(grid, co.diff, co.risk_neutral_drift, np.zeros(N))
    worst = 0.0
    grad = a.node_gradient.reshape(grid.n_t + 1, N, grid.n)
    for k in range(grid.n_t):
        at = (vals[k + 1] - vals[k]) / grid.dt
        lin = op0.apply(vals[k])
        quad = np.einsum("ki,kij,kj->k", grad[k], co.diff, grad[k]) / vals[k]
        res = at + lin - quad + co.r * vals[k]
        worst = max(worst, float(np.max(np.abs(res[mask]))))
    return worst


def empirical_gradient_constant(a: ValueSurface, margin: float = 0.0) -> float:
    """Smallest C with |Da|/a <= C (1 + |y|) over the (interior) nodes."""
    grid = a.grid
    y = grid.nodes()
    mask = grid.interior_mask(margin).ravel() if margin > 0 else np.ones(grid.size, bool)
    g = a.log_gradient.reshape(grid.n_t + 1, grid.size, grid.n)
    ratio = np.linalg.norm(g, axis=-1) / (1.0 + np.linalg.norm(y, axis=1))[None, :]
    return float(np.max(ratio[:, mask]))


def embed_in(coarse: GridSpec, fine: GridSpec) -> tuple[slice, ...]:
    """Index slices of ``fine`` that coincide with the nodes of ``coarse``
    (same spacing required)."""
    if not np.allclose(coarse.h, fine.h):
        raise ValueError("grids must share their spacing")
    sl = []
    for (lo_c, _), (lo_f, _), h in zip(coarse.bounds, fine.bounds, fine.h):
        off = int(round((lo_c - lo_f) / h))
        sl.append(slice(off, off + coarse.n_y))
    return tuple(sl)
