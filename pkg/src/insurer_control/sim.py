"""Path simulation: factor, claims, wealth, densities.

Random streams.  For chunk ``c`` of a run with seed ``s`` the diffusion
stream is ``SeedSequence(s, spawn_key=(c, 0))`` and the jump stream is
``SeedSequence(s, spawn_key=(c, 1))``.  Chunks partition the path index, so
the same seed and chunk size always give the same paths regardless of how
they are consumed.

Antithetic pairs are interleaved: path ``2i+1`` uses the negated Brownian
increments of path ``2i`` and the same claim stream.
"""

from __future__ import annotations

import csv
import enum
import math
import struct
from dataclasses import dataclass, replace
from functools import cached_property
from typing import Callable, Iterator, Sequence

import numpy as np

from .model import Array, ClaimModel, ModelSpec, MomentDomainError, UtilitySpec, psi, theta
from .pde import DomainError, ValueSurface

CLAMP_BUDGET = 0.01
LOG_OVERFLOW = 700.0
MAGIC = b"ICPB1"


class Measure(str, enum.Enum):
    P = "P"
    P_HAT = "P_hat"
    P_BAR = "P_bar"
    P_HAT_N = "P_hat_N"


@dataclass(frozen=True)
class MeasureTag:
    """Measure plus the surface it depends on.

    ``surface`` is the a-surface: P_bar uses ``D log a`` in its drift and
    P_hat_N tilts the claims by ``a``.  A float gives a constant tilt.
    """

    kind: Measure
    surface: ValueSurface | float | None = None

    def __post_init__(self):
        object.__setattr__(self, "kind", Measure(self.kind))
        if self.kind is Measure.P_BAR and not isinstance(self.surface, ValueSurface):
            raise ValueError("P_bar needs the a-surface")
        if self.kind is Measure.P_HAT_N and self.surface is None:
            raise ValueError("P_hat_N needs a jump tilt (a-surface or constant)")


P = MeasureTag(Measure.P)
P_HAT = MeasureTag(Measure.P_HAT)


@dataclass(frozen=True)
class PathConfig:
    n_paths: int
    dt: float | None = None
    seed: int = 0
    antithetic: bool = True
    chunk_size: int = 10_000

    def __post_init__(self):
        if self.n_paths < 1:
            raise ValueError("n_paths must be positive")
        if self.antithetic and (self.n_paths % 2 or self.chunk_size % 2):
            raise ValueError("antithetic sampling needs an even number of paths and chunk size")
        if self.dt is not None and not self.dt > 0:
            raise ValueError("dt must be positive")
        if not 0 <= int(self.seed) < 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")

    def steps(self, horizon: float) -> int:
        dt = horizon / 500 if self.dt is None else self.dt
        k = int(round(horizon / dt))
        if k < 1 or abs(k * dt - horizon) > 1e-9 * max(horizon, 1.0):
            raise ValueError(f"dt={dt} does not divide the horizon {horizon}")
        return k

    def chunks(self) -> list[tuple[int, int, int]]:
        """(chunk index, first path, path count)."""
        out, start, c = [], 0, 0
        while start < self.n_paths:
            k = min(self.chunk_size, self.n_paths - start)
            out.append((c, start, k))
            start += k
            c += 1
        return out


def substreams(seed: int, chunk: int) -> tuple[np.random.Generator, np.random.Generator]:
    """Diffusion and jump generators for one chunk."""
    ss_w = np.random.SeedSequence(int(seed), spawn_key=(chunk, 0))
    ss_j = np.random.SeedSequence(int(seed), spawn_key=(chunk, 1))
    return np.random.default_rng(ss_w), np.random.default_rng(ss_j)


# ---------------------------------------------------------------------------
# bundles


@dataclass(eq=False)
class PathBundle:
    """Simulated trajectories on a uniform lattice.

    Jumps are stored compressed: path ``i`` owns
    ``jump_times[jump_ptr[i]:jump_ptr[i+1]]``.
    """

    times: Array
    dW: Array  # (p, steps, m)
    Y: Array  # (p, steps + 1, n)
    jump_ptr: Array
    jump_times: Array
    jump_sizes: Array
    measure: Measure = Measure.P
    log_weight: Array | None = None
    X: Array | None = None
    antithetic: bool = True
    clamped: int = 0
    lookups: int = 0

    def __post_init__(self):
        if self.log_weight is None:
            self.log_weight = np.zeros(self.n_paths)
        if not np.all(np.isfinite(self.Y)):
            raise DomainError("factor path blew up (non-finite values)")

    @property
    def n_paths(self) -> int:
        return self.Y.shape[0]

    @property
    def steps(self) -> int:
        return self.times.size - 1

    @property
    def dt(self) -> float:
        return float(self.times[1] - self.times[0])

    @property
    def jump_counts(self) -> Array:
        return np.diff(self.jump_ptr).astype(np.int64)

    @cached_property
    def jump_path(self) -> Array:
        return np.repeat(np.arange(self.n_paths), self.jump_counts)

    @cached_property
    def jump_step(self) -> Array:
        """Lattice step k with jump time in (t_k, t_{k+1}]."""
        k = np.searchsorted(self.times, self.jump_times, side="left") - 1
        return np.clip(k, 0, self.steps - 1)

    @cached_property
    def step_jumps(self) -> tuple[Array, Array]:
        """Per-step jump counts and summed sizes, each (p, steps)."""
        flat = self.jump_path * self.steps + self.jump_step
        size = self.n_paths * self.steps
        dn = np.bincount(flat, minlength=size).reshape(self.n_paths, self.steps)
        dj = np.bincount(flat, weights=self.jump_sizes, minlength=size).reshape(self.n_paths, self.steps)
        return dn, dj

    def clamp_fraction(self) -> float:
        return self.clamped / self.lookups if self.lookups else 0.0

    # -- I/O ---------------------------------------------------------------

    def to_csv(self, path) -> None:
        n, m = self.Y.shape[2], self.dW.shape[2]
        dn, dj = self.step_jumps
        header = (["path", "step", "t"] + [f"y{i + 1}" for i in range(n)] + [f"dw{i + 1}" for i in range(m)]
                  + ["n_jumps", "jump_sum"] + (["x"] if self.X is not None else []) + ["log_weight"])
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            for p in range(self.n_paths):
                for k in range(self.steps + 1):
                    last = k == self.steps
                    row = [p, k, f"{self.times[k]:.17g}"]
                    row += [f"{v:.17g}" for v in self.Y[p, k]]
                    row += [""] * m if last else [f"{v:.17g}" for v in self.dW[p, k]]
                    row += ["", ""] if last else [int(dn[p, k]), f"{dj[p, k]:.17g}"]
                    if self.X is not None:
                        row.append(f"{self.X[p, k]:.17g}")
                    row.append(f"{self.log_weight[p]:.17g}")
                    w.writerow(row)

    def to_binary(self, path) -> None:
        """Layout: ``ICPB1``, then little-endian uint64 header
        (n_paths, steps, n, m, n_jumps, has_x, measure index, antithetic),
        then float64 arrays: times, dW, Y, jump_ptr, jump_times,
        jump_sizes, log_weight and X when present."""
        codes = list(Measure)
        hdr = struct.pack("<8Q", self.n_paths, self.steps, self.Y.shape[2], self.dW.shape[2],
                          self.jump_times.size, int(self.X is not None), codes.index(self.measure),
                          int(self.antithetic))
        arrays = [self.times, self.dW, self.Y, self.jump_ptr, self.jump_times, self.jump_sizes, self.log_weight]
        if self.X is not None:
            arrays.append(self.X)
        with open(path, "wb") as fh:
            fh.write(MAGIC)
            fh.write(hdr)
            for a in arrays:
                fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())

    @classmethod
    def from_binary(cls, path) -> "PathBundle":
        with open(path, "rb") as fh:
            raw = fh.read()
        if raw[:5] != MAGIC:
            raise ValueError("not a path bundle dump")
        p, s, n, m, nj, has_x, mcode, anti = struct.unpack_from("<8Q", raw, 5)
        off = 5 + 64

        def take(count, shape):
            nonlocal off
            a = np.frombuffer(raw, dtype="<f8", count=count, offset=off).reshape(shape).astype(float)
            off += 8 * count
            return a

        times = take(s + 1, (s + 1,))
        dW = take(p * s * m, (p, s, m))
        Y = take(p * (s + 1) * n, (p, s + 1, n))
        ptr = take(p + 1, (p + 1,)).astype(np.int64)
        jt = take(nj, (nj,))
        js = take(nj, (nj,))
        lw = take(p, (p,))
        X = take(p * (s + 1), (p, s + 1)) if has_x else None
        return cls(times, dW, Y, ptr, jt, js, list(Measure)[mcode], lw, X, bool(anti))


def concatenate(bundles: Sequence[PathBundle]) -> PathBundle:
    """Join chunk bundles in path order."""
    b0 = bundles[0]
    offs = np.cumsum([0] + [b.jump_times.size for b in bundles])
    ptr = np.concatenate([b.jump_ptr[:-1] + o for b, o in zip(bundles, offs)] + [[offs[-1]]])
    X = None if b0.X is None else np.concatenate([b.X for b in bundles])
    return PathBundle(
        b0.times, np.concatenate([b.dW for b in bundles]), np.concatenate([b.Y for b in bundles]),
        ptr, np.concatenate([b.jump_times for b in bundles]), np.concatenate([b.jump_sizes for b in bundles]),
        b0.measure, np.concatenate([b.log_weight for b in bundles]), X, b0.antithetic,
        sum(b.clamped for b in bundles), sum(b.lookups for b in bundles),
    )


# ---------------------------------------------------------------------------
# surface lookups with clamping


class Lookup:
    """Evaluates surfaces along paths, projecting off-grid points onto the
    grid box and counting how often that happens."""

    def __init__(self, budget: float = CLAMP_BUDGET):
        self.budget = budget
        self.clamped = 0
        self.lookups = 0

    def _prep(self, surface: ValueSurface, y: Array) -> Array:
        yc, hit = surface.grid.clamp(y)
        self.clamped += int(np.count_nonzero(hit))
        self.lookups += y.shape[0]
        return yc

    def value(self, surface, t, y):
        return surface(t, self._prep(surface, y))

    def grad(self, surface, t, y):
        return surface.grad(t, self._prep(surface, y))

    def grad_log(self, surface, t, y):
        return surface.grad_log(t, self._prep(surface, y))

    def check(self):
        if self.lookups and self.clamped > self.budget * self.lookups:
            raise DomainError(
                f"PDE domain too small: {self.clamped} of {self.lookups} surface lookups "
                f"({100 * self.clamped / self.lookups:.2f}%) fell outside the grid; clamp budget is "
                f"{100 * self.budget:.0f}%. Widen the grid (larger k)."
            )


def drift_change(model: ModelSpec, measure: MeasureTag, t, y: Array, lookup: Lookup) -> Array:
    """H such that the measure's Brownian motion is ``W + int H ds``."""
    if measure.kind is Measure.P:
        return np.zeros((y.shape[0], model.m))
    th = theta(model, y)
    if measure.kind is Measure.P_BAR:
        dlog = lookup.grad_log(measure.surface, t, y)
        th = th + np.einsum("kim,ki->km", model.sigma_f(y), dlog)
    return th


def _tilt_values(measure: MeasureTag, t, y, lookup: Lookup) -> Array:
    if isinstance(measure.surface, ValueSurface):
        return lookup.value(measure.surface, t, y)
    return np.full(y.shape[0], float(measure.surface))


def _tilt_sup(measure: MeasureTag) -> float:
    if isinstance(measure.surface, ValueSurface):
        return float(np.max(measure.surface.values))
    return float(measure.surface)


# ---------------------------------------------------------------------------
# claims


def simulate_claims(claims: ClaimModel, t0: float, T: float, n: int, rng: np.random.Generator,
                    rate: float | None = None) -> tuple[Array, Array, Array]:
    """Compound Poisson jumps on (t0, T] via exponential interarrivals.

    Returns ``(ptr, times, sizes)`` in compressed per-path form.  ``rate``
    overrides the intensity (used for thinning); sizes are then left to
    the caller and returned as NaN.
    """
    lam = claims.lam if rate is None else rate
    horizon = T - t0
    if lam == 0 or n == 0:
        return np.zeros(n + 1, dtype=np.int64), np.zeros(0), np.zeros(0)
    mean = lam * horizon
    width = max(4, int(math.ceil(mean + 6.0 * math.sqrt(mean) + 4)))
    gaps = rng.exponential(1.0 / lam, (n, width))
    arr = np.cumsum(gaps, axis=1)
    while np.any(arr[:, -1] <= horizon):
        more = rng.exponential(1.0 / lam, (n, width))
        arr = np.concatenate([arr, arr[:, -1:] + np.cumsum(more, axis=1)], axis=1)
    keep = arr <= horizon
    counts = keep.sum(axis=1)
    times = t0 + arr[keep]
    ptr = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)
    if rate is None:
        sizes = claims.dist.sample(rng, times.size).astype(float)
    else:
        sizes = np.full(times.size, np.nan)
    return ptr, times, sizes


def _duplicate_pairs(ptr, times, sizes):
    """Give paths 2i and 2i+1 the same jumps (input indexed by pair)."""
    counts = np.diff(ptr)
    rep = np.repeat(counts, 2)
    starts = np.repeat(ptr[:-1], 2)
    new_ptr = np.concatenate([[0], np.cumsum(rep)]).astype(np.int64)
    idx = np.repeat(starts - new_ptr[:-1], rep) + np.arange(new_ptr[-1])
    return new_ptr, times[idx], sizes[idx]


# ---------------------------------------------------------------------------
# factor


def _euler_factor(model: ModelSpec, measure: MeasureTag, times: Array, y0: Array, dW: Array,
                  lookup: Lookup) -> Array:
    p, steps, _ = dW.shape
    dt = times[1] - times[0]
    Y = np.empty((p, steps + 1, model.n))
    Y[:, 0] = y0
    const_sf = model.sigma_f.is_constant()
    const_drift = model.g.is_constant() and (measure.kind is Measure.P or model.is_y_independent())
    sf0 = model.sigma_f(Y[:1, 0])[0] if const_sf else None
    drift0 = None
    for k in range(steps):
        y = Y[:, k]
        sf = np.broadcast_to(sf0, (p,) + sf0.shape) if const_sf else model.sigma_f(y)
        if measure.kind is Measure.P_BAR or not const_drift or drift0 is None:
            h = drift_change(model, measure, times[k], y, lookup)
            drift = model.g(y) - np.einsum("kim,km->ki", sf, h)
            if const_drift:
                drift0 = drift
        else:
            drift = drift0
        Y[:, k + 1] = y + drift * dt + np.einsum("kim,km->ki", sf, dW[:, k])
    return Y


def _brownian(rng: np.random.Generator, p: int, steps: int, m: int, dt: float, antithetic: bool) -> Array:
    if antithetic:
        half = rng.standard_normal((p // 2, steps, m)) * math.sqrt(dt)
        dW = np.empty((p, steps, m))
        dW[0::2] = half
        dW[1::2] = -half
        return dW
    return rng.standard_normal((p, steps, m)) * math.sqrt(dt)


def _bundle_chunk(model: ModelSpec, measure: MeasureTag, t0: float, y0, T: float, cfg: PathConfig,
                  chunk: int, count: int, claims: ClaimModel | None) -> PathBundle:
    steps = cfg.steps(T - t0)
    times = np.linspace(t0, T, steps + 1)
    dt = (T - t0) / steps
    y0 = np.asarray(y0, dtype=float).reshape(model.n)
    rng_w, rng_j = substreams(cfg.seed, chunk)
    dW = _brownian(rng_w, count, steps, model.m, dt, cfg.antithetic)
    lookup = Lookup()
    Y = _euler_factor(model, measure, times, y0, dW, lookup)
    ptr = np.zeros(count + 1, dtype=np.int64)
    jt = js = np.zeros(0)
    if claims is not None and claims.lam > 0:
        n_streams = count // 2 if cfg.antithetic else count
        if measure.kind is Measure.P_HAT_N:
            ptr, jt, js = _tilted_claims(claims, measure, times, Y, rng_j, n_streams, cfg.antithetic, lookup)
        else:
            ptr, jt, js = simulate_claims(claims, t0, T, n_streams, rng_j)
            if cfg.antithetic:
                ptr, jt, js = _duplicate_pairs(ptr, jt, js)
    lookup.check()
    return PathBundle(times, dW, Y, ptr, jt, js, measure.kind, None, None, cfg.antithetic,
                      lookup.clamped, lookup.lookups)


def _tilted_claims(claims, measure, times, Y, rng, n_streams, antithetic, lookup):
    """Jumps under P_hat_N by thinning: intensity ``lambda * M(u_k)`` with the
    tilt ``u_k`` frozen at the left end of the Euler step, sizes drawn from
    the exponentially tilted law."""
    u_sup = _tilt_sup(measure)
    if u_sup >= claims.u_max:
        raise MomentDomainError("jump tilt reaches u_max")
    lam_sup = claims.lam * (1.0 + claims.dist.mgf_minus_one(np.asarray(u_sup)))
    t0, T = times[0], times[-1]
    ptr, jt, _ = simulate_claims(claims, t0, T, n_streams, rng, rate=float(lam_sup))
    unif = rng.random(jt.size)
    if antithetic:
        ptr, jt, unif = _duplicate_pairs(ptr, jt, unif)
    owner = np.repeat(np.arange(Y.shape[0]), np.diff(ptr))
    step = np.clip(np.searchsorted(times, jt, side="left") - 1, 0, times.size - 2)
    u = np.empty(jt.size)
    for k in np.unique(step):
        sel = step == k
        u[sel] = _tilt_values(measure, times[k], Y[owner[sel], k], lookup)
    if np.any(u >= claims.u_max):
        raise MomentDomainError("jump tilt reaches u_max")
    accept = unif * lam_sup <= claims.lam * (1.0 + claims.dist.mgf_minus_one(u))
    sizes = np.empty(int(accept.sum()))
    if sizes.size:
        sizes = claims.dist.sample_tilted(rng, u[accept]).astype(float)
    counts = np.bincount(owner[accept], minlength=Y.shape[0])
    new_ptr = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)
    return new_ptr, jt[accept], sizes


def iter_factor_chunks(model: ModelSpec, measure: MeasureTag, t0: float, y0, T: float, cfg: PathConfig,
                       claims: ClaimModel | None = None) -> Iterator[PathBundle]:
    for chunk, _, count in cfg.chunks():
        yield _bundle_chunk(model, measure, t0, y0, T, cfg, chunk, count, claims)


def simulate_factor(model: ModelSpec, measure: MeasureTag, t0: float, y0, T: float, cfg: PathConfig,
                    claims: ClaimModel | None = None) -> PathBundle:
    """Euler paths of the factor under ``measure`` (plus claims if given).

    Drift: g under P; g - sigma_f theta under P_hat and P_hat_N;
    g - sigma_f theta - sigma_f sigma_f^* D log a under P_bar.
    """
    return concatenate(list(iter_factor_chunks(model, measure, t0, y0, T, cfg, claims)))


def refactor(model: ModelSpec, bundle: PathBundle, measure: MeasureTag | None = None) -> PathBundle:
    """Recompute Y from the bundle's own increments (e.g. after coarsening)."""
    measure = measure or MeasureTag(bundle.measure)
    lookup = Lookup()
    Y = _euler_factor(model, measure, bundle.times, bundle.Y[:, 0], bundle.dW, lookup)
    lookup.check()
    return replace(bundle, Y=Y, X=None, clamped=lookup.clamped, lookups=lookup.lookups)


def coarsen(bundle: PathBundle, model: ModelSpec | None = None) -> PathBundle:
    """Merge pairs of steps: increments add, jumps are kept as they are.

    The factor path is subsampled unless ``model`` is given, in which case
    it is re-run by Euler on the coarse lattice.
    """
    if bundle.steps % 2:
        raise ValueError("need an even number of steps to coarsen")
    dW = bundle.dW[:, 0::2] + bundle.dW[:, 1::2]
    out = PathBundle(bundle.times[0::2].copy(), dW, bundle.Y[:, 0::2].copy(), bundle.jump_ptr,
                     bundle.jump_times, bundle.jump_sizes, bundle.measure, bundle.log_weight.copy(), None,
                     bundle.antithetic)
    return refactor(model, out) if model is not None else out


# ---------------------------------------------------------------------------
# wealth

Strategy = Callable[[float, Array, Array], Array]


def wealth_on_bundle(model: ModelSpec, claims: ClaimModel, utility: UtilitySpec, strategy: Strategy,
                     bundle: PathBundle, x0: float | None = None) -> PathBundle:
    """Euler wealth along an existing factor bundle (common random numbers).

    Claims inside a step are subtracted in that step; their exact times are
    kept in the bundle.
    """
    x0 = utility.x0 if x0 is None else x0
    p, steps = bundle.n_paths, bundle.steps
    dt = bundle.dt
    _, dj = bundle.step_jumps
    X = np.empty((p, steps + 1))
    X[:, 0] = x0
    for k in range(steps):
        y = bundle.Y[:, k]
        x = X[:, k]
        pi = strategy(bundle.times[k], x, y)
        r = model.r(y)
        excess = model.mu(y) - r[:, None]
        vol = np.einsum("kij,ki->kj", model.sigma_p(y), pi)  # sigma_p^* pi
        X[:, k + 1] = (x + (utility.c + np.sum(pi * excess, axis=1) + r * x) * dt
                       + np.sum(vol * bundle.dW[:, k], axis=1) - dj[:, k])
    return replace(bundle, X=X)


def simulate_wealth(model: ModelSpec, claims: ClaimModel, utility: UtilitySpec, strategy: Strategy,
                    cfg: PathConfig) -> PathBundle:
    """Factor plus claims under P, then Euler wealth under ``strategy``."""
    parts = []
    for b in iter_factor_chunks(model, P, 0.0, utility.y0, utility.T, cfg, claims):
        parts.append(wealth_on_bundle(model, claims, utility, strategy, b))
    return concatenate(parts)


# ---------------------------------------------------------------------------
# densities and statistics


@dataclass
class RunningStats:
    """Streaming mean/variance with the pairwise (Chan) merge."""

    count: int = 0
    mean: float = 0.0
    m2: float = 0.0

    def add(self, values: Array) -> "RunningStats":
        v = np.asarray(values, dtype=float).ravel()
        if v.size == 0:
            return self
        if np.all(v == v[0]):
            other = RunningStats(v.size, float(v[0]), 0.0)
        else:
            mu = float(v.mean())
            other = RunningStats(v.size, mu, float(np.sum((v - mu) ** 2)))
        return self.merge(other)

    def merge(self, other: "RunningStats") -> "RunningStats":
        n = self.count + other.count
        if n == 0:
            return self
        if self.count == 0:
            self.count, self.mean, self.m2 = other.count, other.mean, other.m2
            return self
        d = other.mean - self.mean
        self.mean += d * other.count / n
        self.m2 += other.m2 + d * d * self.count * other.count / n
        self.count = n
        return self

    @property
    def var(self) -> float:
        return self.m2 / (self.count - 1) if self.count > 1 else 0.0

    @property
    def se(self) -> float:
        return math.sqrt(self.var / self.count) if self.count > 1 else 0.0


def sampling_units(values: Array, antithetic: bool) -> Array:
    """Independent sample units: pair averages under antithetic sampling."""
    v = np.asarray(values, dtype=float)
    if antithetic:
        return 0.5 * (v[0::2] + v[1::2])
    return v


def _h_along(h_fn, bundle: PathBundle, k: int) -> Array:
    x = None if bundle.X is None else bundle.X[:, k]
    return h_fn(bundle.times[k], x, bundle.Y[:, k])


def log_exponential_martingale(bundle: PathBundle, h_fn, a_fn, claims: ClaimModel) -> Array:
    """Per-path ``log eps_T``.

    ``h_fn(t, x, y)`` gives the Brownian kernel, ``a_fn(t, y)`` the jump
    exponent, both frozen at the left end of each Euler step; the jump
    compensator uses ``psi``.  Either may be None (meaning zero).
    """
    if bundle.measure is not Measure.P:
        raise ValueError("exponential martingales are evaluated on P-paths")
    p, steps, dt = bundle.n_paths, bundle.steps, bundle.dt
    out = np.zeros(p)
    _, dj = bundle.step_jumps
    for k in range(steps):
        if h_fn is not None:
            h = _h_along(h_fn, bundle, k)
            out -= np.sum(h * bundle.dW[:, k], axis=1) + 0.5 * dt * np.sum(h * h, axis=1)
        if a_fn is not None:
            a = a_fn(bundle.times[k], bundle.Y[:, k])
            out += a * dj[:, k] - psi(claims, a) * dt
    if np.any(out > LOG_OVERFLOW):
        raise OverflowError(f"log exponential martingale {np.max(out):.1f} exceeds {LOG_OVERFLOW}")
    return out


@dataclass
class MartingaleResult:
    values: Array
    mean: float
    std_error: float


def exponential_martingale(bundle: PathBundle, h_fn, a_surface, claims: ClaimModel,
                           lookup: Lookup | None = None) -> MartingaleResult:
    """Pathwise ``eps_T`` with mean and standard error."""
    lookup = lookup or Lookup()
    if isinstance(a_surface, ValueSurface):
        a_fn = lambda t, y: lookup.value(a_surface, t, y)  # noqa: E731
    elif a_surface is None:
        a_fn = None
    else:
        a_fn = lambda t, y: np.full(y.shape[0], float(a_surface))  # noqa: E731
    vals = np.exp(log_exponential_martingale(bundle, h_fn, a_fn, claims))
    lookup.check()
    units = sampling_units(vals, bundle.antithetic)
    st = RunningStats().add(units)
    return MartingaleResult(vals, st.mean, st.se)


def girsanov_weight(bundle: PathBundle, target: MeasureTag, model: ModelSpec,
                    claims: ClaimModel | None = None, lookup: Lookup | None = None) -> Array:
    """Log density of ``target`` with respect to P along P-paths."""
    if target.kind is Measure.P:
        raise ValueError("target measure must differ from P")
    lookup = lookup or Lookup()

    def h_fn(t, x, y):
        return drift_change(model, target, t, y, lookup)

    a_fn = None
    if target.kind is Measure.P_HAT_N:
        if claims is None:
            raise ValueError("P_hat_N weights need the claim model")
        a_fn = lambda t, y: _tilt_values(target, t, y, lookup)  # noqa: E731
    out = log_exponential_martingale(bundle, h_fn, a_fn, claims)
    lookup.check()
    return out
