"""Plain-text experiment configuration.

Format::

    insurer-control-config v1
    # comment
    model.r = const 0.02
    model.mu = tanh base=0.05 scale=0.02 weight=1
    model.sigma_p = const 0.2
    model.g = ou kappa=1 mean=0
    model.sigma_f = const 0.3
    claims.dist = exponential beta=10

Matrices are written row by row: entries separated by ``,`` and rows by
``;`` (``const 0.2,0;0,0.3``).  Every key has a default; the defaults
describe the constant-coefficient reference model.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .model import (
    ClaimModel,
    Constant,
    Deterministic,
    Exponential,
    FiniteDiscrete,
    ModelSpec,
    OUDrift,
    Pareto,
    TanhAffine,
    UtilitySpec,
)

HEADER = "insurer-control-config v1"
EXPERIMENTS = ("validate", "solve", "estimate", "identities", "verify", "fbsde", "full")

DEFAULTS: dict[str, str] = {
    "experiment": "full",
    "output": "out",
    "seed": "20240601",
    "model.r": "const 0.02",
    "model.mu": "const 0.08",
    "model.sigma_p": "const 0.2",
    "model.g": "ou kappa=1 mean=0",
    "model.sigma_f": "const 0.3",
    "model.r_bar": "0.02",
    "model.eig_bounds": "none",
    "claims.lambda": "1",
    "claims.dist": "exponential beta=10",
    "utility.alpha": "1",
    "utility.T": "1",
    "utility.c": "1.5",
    "utility.x0": "0",
    "utility.y0": "0",
    "grid.k": "5",
    "grid.n_y": "201",
    "grid.n_t": "200",
    "grid.scheme": "1",
    "paths.n": "100000",
    "paths.dt": "0.002",
    "paths.antithetic": "true",
    "paths.chunk": "10000",
}


class ConfigError(ValueError):
    """Malformed or inconsistent configuration (exit status 2)."""


def _numbers(text: str, key: str) -> np.ndarray:
    try:
        rows = [[float(v) for v in row.split(",")] for row in text.strip().split(";")]
    except ValueError:
        raise ConfigError(f"{key}: cannot parse numbers from {text!r}") from None
    if len({len(r) for r in rows}) != 1:
        raise ConfigError(f"{key}: ragged matrix {text!r}")
    arr = np.array(rows)
    if ";" not in text:
        arr = arr[0]
        if arr.size == 1 and "," not in text:
            arr = arr[0]
    return np.asarray(arr, dtype=float)


def _fit(arr: np.ndarray, shape: tuple[int, ...], key: str) -> np.ndarray:
    if arr.shape == shape:
        return arr
    if arr.size == int(np.prod(shape, dtype=int)):
        return arr.reshape(shape)
    raise ConfigError(f"{key}: expected shape {shape}, got {arr.shape}")


def _kwargs(parts: list[str], key: str, allowed: set[str], required: set[str]) -> dict[str, str]:
    out = {}
    for p in parts:
        if "=" not in p:
            raise ConfigError(f"{key}: expected name=value, got {p!r}")
        k, v = p.split("=", 1)
        if k not in allowed:
            raise ConfigError(f"{key}: unknown parameter {k!r}")
        out[k] = v
    missing = required - out.keys()
    if missing:
        raise ConfigError(f"{key}: missing {', '.join(sorted(missing))}")
    return out


def parse_coefficient(text: str, shape: tuple[int, ...], n: int, key: str):
    parts = text.split()
    if not parts:
        raise ConfigError(f"{key}: empty coefficient")
    family, rest = parts[0], parts[1:]
    if family == "const":
        if len(rest) != 1:
            raise ConfigError(f"{key}: const takes one matrix literal (no spaces)")
        return Constant(_fit(_numbers(rest[0], key), shape, key))
    if family == "tanh":
        kw = _kwargs(rest, key, {"base", "scale", "weight", "shift"}, {"base", "scale", "weight"})
        base = _fit(_numbers(kw["base"], key), shape, key)
        scale = _fit(np.broadcast_to(_numbers(kw["scale"], key), shape).copy(), shape, key)
        weight = _fit(np.atleast_1d(_numbers(kw["weight"], key)), (n,), key)
        return TanhAffine(base, scale, weight, float(kw.get("shift", 0.0)))
    if family == "ou":
        if shape != (n,):
            raise ConfigError(f"{key}: the ou family is only a factor drift")
        kw = _kwargs(rest, key, {"kappa", "mean"}, {"kappa"})
        kappa = _numbers(kw["kappa"], key)
        if kappa.ndim:
            kappa = _fit(kappa, (n, n), key)
        mean = _fit(np.atleast_1d(_numbers(kw.get("mean", "0"), key)) * np.ones(n), (n,), key)
        return OUDrift(kappa, mean)
    raise ConfigError(f"{key}: unknown family {family!r} (const, tanh, ou)")


def parse_claim_law(text: str, key: str = "claims.dist"):
    parts = text.split()
    if not parts:
        raise ConfigError(f"{key}: empty claim law")
    fam, rest = parts[0], parts[1:]
    try:
        if fam == "exponential":
            return Exponential(float(_kwargs(rest, key, {"beta"}, {"beta"})["beta"]))
        if fam == "deterministic":
            return Deterministic(float(_kwargs(rest, key, {"z0"}, {"z0"})["z0"]))
        if fam == "discrete":
            kw = _kwargs(rest, key, {"sizes", "probs"}, {"sizes", "probs"})
            return FiniteDiscrete(tuple(np.atleast_1d(_numbers(kw["sizes"], key))),
                                  tuple(np.atleast_1d(_numbers(kw["probs"], key))))
        if fam == "pareto":
            kw = _kwargs(rest, key, {"shape", "scale"}, {"shape", "scale"})
            return Pareto(float(kw["shape"]), float(kw["scale"]))
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(f"{key}: {exc}") from None
    raise ConfigError(f"{key}: unknown claim law {fam!r} (exponential, deterministic, discrete, pareto)")


def _float(values, key):
    try:
        return float(values[key])
    except ValueError:
        raise ConfigError(f"{key}: not a number: {values[key]!r}") from None


def _int(values, key, lo=1):
    try:
        v = int(values[key])
    except ValueError:
        raise ConfigError(f"{key}: not an integer: {values[key]!r}") from None
    if v < lo:
        raise ConfigError(f"{key}: must be at least {lo}")
    return v


def _bool(values, key):
    v = values[key].lower()
    if v in ("true", "yes", "on", "1"):
        return True
    if v in ("false", "no", "off", "0"):
        return False
    raise ConfigError(f"{key}: not a boolean: {values[key]!r}")


@dataclass
class ExperimentConfig:
    values: dict[str, str]
    model: ModelSpec
    claims: ClaimModel
    utility: UtilitySpec
    k: float
    n_y: int
    n_t: int
    scheme: float
    n_paths: int
    dt: float
    antithetic: bool
    chunk: int

    @property
    def experiment(self) -> str:
        return self.values["experiment"]

    @property
    def seed(self) -> int:
        return int(self.values["seed"])

    @property
    def output(self) -> str:
        return self.values["output"]

    def resolved_text(self) -> str:
        """The configuration with defaults applied, in canonical key order."""
        lines = [HEADER] + [f"{k} = {self.values[k]}" for k in DEFAULTS]
        return "\n".join(lines) + "\n"

    def override(self, **kv) -> "ExperimentConfig":
        vals = dict(self.values)
        for k, v in kv.items():
            if v is not None:
                vals[k] = str(v)
        return build(vals)


def parse_text(text: str) -> dict[str, str]:
    lines = [ln.split("#", 1)[0].strip() for ln in text.splitlines()]
    lines = [ln for ln in lines if ln]
    if not lines:
        raise ConfigError(f"schema error: empty configuration (first line must be {HEADER!r})")
    if lines[0] != HEADER:
        raise ConfigError(f"schema error: first line must be {HEADER!r}, got {lines[0]!r}")
    values: dict[str, str] = {}
    for ln in lines[1:]:
        if "=" not in ln:
            raise ConfigError(f"schema error: expected 'key = value', got {ln!r}")
        k, v = (s.strip() for s in ln.split("=", 1))
        if k not in DEFAULTS:
            raise ConfigError(f"schema error: unknown key {k!r}")
        if k in values:
            raise ConfigError(f"schema error: duplicate key {k!r}")
        values[k] = v
    return values


def build(given: dict[str, str]) -> ExperimentConfig:
    v = {**DEFAULTS, **given}
    if v["experiment"] not in EXPERIMENTS:
        raise ConfigError(f"experiment: must be one of {', '.join(EXPERIMENTS)}")
    try:
        y0 = tuple(float(s) for s in v["utility.y0"].split(","))
    except ValueError:
        raise ConfigError("utility.y0: expected comma-separated numbers") from None
    n = len(y0)
    sp = _numbers(v["model.sigma_p"].split()[-1], "model.sigma_p") if v["model.sigma_p"].startswith("const") else None
    m = int(np.atleast_2d(sp).shape[0]) if sp is not None else _guess_m(v)
    eig = None
    if v["model.eig_bounds"].lower() != "none":
        e = np.atleast_1d(_numbers(v["model.eig_bounds"], "model.eig_bounds"))
        if e.size != 2:
            raise ConfigError("model.eig_bounds: expected two numbers or 'none'")
        eig = (float(e[0]), float(e[1]))
    try:
        model = ModelSpec(
            n=n, m=m,
            r=parse_coefficient(v["model.r"], (), n, "model.r"),
            mu=parse_coefficient(v["model.mu"], (m,), n, "model.mu"),
            sigma_p=parse_coefficient(v["model.sigma_p"], (m, m), n, "model.sigma_p"),
            g=parse_coefficient(v["model.g"], (n,), n, "model.g"),
            sigma_f=parse_coefficient(v["model.sigma_f"], (n, m), n, "model.sigma_f"),
            r_bar=_float(v, "model.r_bar"),
            eig_bounds=eig,
        )
        claims = ClaimModel(_float(v, "claims.lambda"), parse_claim_law(v["claims.dist"]))
        utility = UtilitySpec(_float(v, "utility.alpha"), _float(v, "utility.T"), _float(v, "utility.c"),
                              _float(v, "utility.x0"), y0)
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    seed = _int(v, "seed", lo=0)
    if seed >= 2**64:
        raise ConfigError("seed: must fit in 64 bits")
    n_y = _int(v, "grid.n_y", lo=3)
    if n_y % 2 == 0:
        raise ConfigError("grid.n_y: must be odd")
    scheme = _float(v, "grid.scheme")
    if not 0.5 <= scheme <= 1.0:
        raise ConfigError("grid.scheme: theta weight must lie in [0.5, 1]")
    n_paths = _int(v, "paths.n")
    anti = _bool(v, "paths.antithetic")
    chunk = _int(v, "paths.chunk")
    if anti and (n_paths % 2 or chunk % 2):
        raise ConfigError("paths.n and paths.chunk must be even with antithetic sampling")
    dt = _float(v, "paths.dt")
    steps = round(utility.T / dt) if dt > 0 else 0
    if steps < 1 or abs(steps * dt - utility.T) > 1e-9 * utility.T:
        raise ConfigError("paths.dt must divide utility.T")
    return ExperimentConfig(v, model, claims, utility, _float(v, "grid.k"), n_y, _int(v, "grid.n_t"), scheme,
                            n_paths, dt, anti, chunk)


def _guess_m(v: dict[str, str]) -> int:
    parts = v["model.mu"].split()
    for p in parts[1:]:
        if p.startswith("base="):
            return int(np.atleast_1d(_numbers(p[5:], "model.mu")).size)
    if parts and parts[0] == "const" and len(parts) == 2:
        return int(np.atleast_1d(_numbers(parts[1], "model.mu")).size)
    return 1


def load(path) -> ExperimentConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from None
    return build(parse_text(text))
