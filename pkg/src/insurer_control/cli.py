"""Command-line runner.

Exit status: 0 when every check passes, 1 when a check or assumption
fails, 2 on configuration errors.
"""

from __future__ import annotations

import argparse
import datetime as _dt
import json
import sys
import time
from pathlib import Path

from . import config as cfgmod
from . import experiments as ex
from .model import MomentDomainError, SingularMatrixError
from .pde import DomainError, SolverError

EXIT_OK, EXIT_FAIL, EXIT_CONFIG = 0, 1, 2


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="insurer-control", description=__doc__.splitlines()[0])
    p.add_argument("experiment", choices=cfgmod.EXPERIMENTS, help="pipeline to run")
    p.add_argument("--config", type=Path, help="key=value configuration file (defaults if omitted)")
    p.add_argument("--seed", type=int, help="override the configured seed")
    p.add_argument("--paths", type=int, help="override the number of Monte Carlo paths")
    p.add_argument("--out", type=Path, help="output directory")
    return p


def _load(args) -> cfgmod.ExperimentConfig:
    if args.config is not None:
        cfg = cfgmod.load(args.config)
    else:
        cfg = cfgmod.build({})
    return cfg.override(**{"experiment": args.experiment, "seed": args.seed, "paths.n": args.paths,
                           "output": None if args.out is None else str(args.out)})


def _summary(name: str, checks: list[ex.Check]) -> str:
    lines = [f"experiment: {name}"]
    for c in checks:
        flag = "PASS" if c.passed else "FAIL"
        oracle = "" if c.oracle is None else f" oracle={c.oracle:.10g}"
        se = f" se={c.std_error:.3g}" if c.std_error else ""
        note = f"  [{c.note}]" if c.note else ""
        lines.append(f"{flag}  {c.name}: estimate={c.estimate:.10g}{se}{oracle}{note}")
    failed = [c.name for c in checks if not c.passed]
    lines.append("all checks passed" if not failed else f"failed: {', '.join(failed)}")
    return "\n".join(lines) + "\n"


def run(cfg: cfgmod.ExperimentConfig) -> tuple[int, list[ex.Check]]:
    out = Path(cfg.output)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.resolved.txt").write_text(cfg.resolved_text())
    ctx = ex.Context(cfg, out)
    stamps = [f"start {_dt.datetime.now().isoformat(timespec='seconds')}"]
    checks = ex.run_validate(ctx)
    if cfg.experiment != "validate" and not all(c.passed for c in checks):
        for c in checks:
            if not c.passed:
                c.note = f"{c.note}; pipeline not run"
    else:
        for stage in ex.PIPELINES[cfg.experiment]:
            if cfg.experiment == "validate":
                break
            t0 = time.perf_counter()
            try:
                checks.extend(stage(ctx))
            except (MomentDomainError, DomainError, SolverError, SingularMatrixError, OverflowError) as exc:
                checks.append(ex.Check(f"{stage.__name__}_error", float("nan"), 0.0, None, False, str(exc)))
            stamps.append(f"{stage.__name__} {time.perf_counter() - t0:.2f}s")
    stamps.extend(ctx.log)
    stamps.append(f"end {_dt.datetime.now().isoformat(timespec='seconds')}")
    ok = all(c.passed for c in checks)
    report = {"experiment": cfg.experiment, "seed": cfg.seed, "n_paths": cfg.n_paths,
              "checks": [c.record() for c in checks], "all_pass": ok}
    (out / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    text = _summary(cfg.experiment, checks)
    (out / "summary.txt").write_text(text)
    (out / "run.log").write_text("\n".join(stamps) + "\n")
    sys.stdout.write(text)
    return (EXIT_OK if ok else EXIT_FAIL), checks


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = _load(args)
    except cfgmod.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    code, checks = run(cfg)
    for c in checks:
        if not c.passed:
            print(f"check failed: {c.name}" + (f" ({c.note})" if c.note else ""), file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
