"""Command-line entry point.

    gridcascade run   --case C --scenario S [--model ac|dc] [--out DIR] ...
    gridcascade sweep --case C --scenario S --probabilities 0,0.002,0.65 ...

Failures print one line ``error[CODE]: text`` on stderr and exit nonzero.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

from .cascade import run_cascade
from .dccascade import run_dc_cascade
from .io import summary_lines, write_events, write_summary, write_sweep, write_timeseries
from .netmodel import CaseFormatError, Network, load_case, validate
from .scenario import Scenario, ScenarioFormatError, hidden_set, load_scenario, run_ensemble, sweep_hf

EXIT_ARGS = 2
EXIT_IO = 3
EXIT_INPUT = 4


class CliError(Exception):
    def __init__(self, code: str, message: str, status: int):
        self.code = code
        self.status = status
        super().__init__(message)


@dataclass(frozen=True)
class RunConfig:
    case: Path
    scenario: Path
    out: Path
    model: str = "ac"
    seed: int | None = None
    runs: int | None = None
    hf_probability: float | None = None
    dt: float | None = None
    figures: bool = False


def _resolve(path: str, kind: str) -> Path:
    """A path as given, else a file of that name shipped with the package."""
    p = Path(path)
    if p.is_file():
        return p
    data = resources.files("gridcascade") / "data"
    for sub in ("", "scenarios"):
        cand = data / sub / path if sub else data / path
        if cand.is_file():
            return Path(str(cand))
    raise CliError("E_NOFILE", f"{kind} file not found: {path}", EXIT_IO)


def _load(cfg: RunConfig) -> tuple[Network, Scenario]:
    try:
        net = load_case(cfg.case)
        validate(net)
    except CaseFormatError as exc:
        raise CliError("E_CASE", f"{cfg.case}: {exc}", EXIT_INPUT) from None
    except ValueError as exc:
        raise CliError("E_CASE", f"{cfg.case}: {exc}", EXIT_INPUT) from None
    except OSError as exc:
        raise CliError("E_IO", str(exc), EXIT_IO) from None
    try:
        sc = load_scenario(cfg.scenario)
        sc = sc.with_overrides(base_seed=cfg.seed, runs=cfg.runs,
                               hf_probability=cfg.hf_probability, dt=cfg.dt)
    except ScenarioFormatError as exc:
        raise CliError("E_SCENARIO", f"{cfg.scenario}: {exc}", EXIT_INPUT) from None
    except ValueError as exc:
        raise CliError("E_SCENARIO", f"{cfg.scenario}: {exc}", EXIT_INPUT) from None
    except OSError as exc:
        raise CliError("E_IO", str(exc), EXIT_IO) from None
    missing = sorted(b for b in sc.target_set if b not in net.bus_position)
    if missing:
        raise CliError("E_SCENARIO", f"{cfg.scenario}: targets not in case: {missing}", EXIT_INPUT)
    return net, sc


def _outdir(path: Path) -> Path:
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise CliError("E_IO", f"cannot create output directory {path}: {exc}", EXIT_IO) from None
    return path


def _header(cfg: RunConfig, sc: Scenario) -> dict:
    return {"model": cfg.model, "case": cfg.case.name, "scenario": sc.name,
            "attack_type": sc.attack_type.value,
            "targets": ",".join(str(b) for b in sorted(sc.target_set)) or "-"}


def cmd_run(cfg: RunConfig) -> int:
    net, sc = _load(cfg)
    out = _outdir(cfg.out)
    tag = cfg.model
    if cfg.model == "dc":
        res = run_dc_cascade(net, sc.target_set)
        write_events(res.events, out / f"events_{tag}.jsonl", tag)
        write_summary(summary_lines(_header(cfg, sc), result=res), out / f"summary_{tag}.txt")
        return 0

    if sc.runs == 1:
        res = run_cascade(net, sc, hidden_set(net, sc, sc.base_seed))
        write_events(res.events, out / f"events_{tag}.jsonl", tag)
        write_timeseries(res, out / f"timeseries_{tag}.csv")
        header = _header(cfg, sc) | {"seed": sc.base_seed, "hf_probability": repr(sc.hf_probability)}
        write_summary(summary_lines(header, result=res), out / f"summary_{tag}.txt")
        if cfg.figures:
            from .report import plot_timeseries

            plot_timeseries(res, out / f"timeseries_{tag}.png", title=sc.name)
        return 0

    ens = run_ensemble(net, sc, keep_results=True)
    for k, res in enumerate(ens.results):
        write_events(res.events, out / f"events_{tag}_run{k:03d}.jsonl", tag)
        write_timeseries(res, out / f"timeseries_{tag}_run{k:03d}.csv")
        if cfg.figures:
            from .report import plot_timeseries

            plot_timeseries(res, out / f"timeseries_{tag}_run{k:03d}.png", title=f"{sc.name} run {k}")
    write_summary(summary_lines(_header(cfg, sc), ensemble=ens), out / f"summary_{tag}.txt")
    return 0


def parse_probabilities(text: str) -> list[float]:
    items = [s.strip() for s in text.split(",") if s.strip()]
    if not items:
        raise CliError("E_ARGS", "empty probability list", EXIT_ARGS)
    try:
        ps = [float(s) for s in items]
    except ValueError:
        raise CliError("E_ARGS", f"bad probability list {text!r}", EXIT_ARGS) from None
    bad = [p for p in ps if not 0.0 <= p <= 1.0]
    if bad:
        raise CliError("E_ARGS", f"probabilities outside [0, 1]: {bad}", EXIT_ARGS)
    return sorted(ps)


def cmd_sweep(cfg: RunConfig, probabilities: list[float]) -> int:
    if not probabilities:
        raise CliError("E_ARGS", "empty probability list", EXIT_ARGS)
    if cfg.model != "ac":
        raise CliError("E_ARGS", "sweep needs the ac model (the dc model has no relays)", EXIT_ARGS)
    net, sc = _load(cfg)
    out = _outdir(cfg.out)
    curve = sweep_hf(net, sc, probabilities)
    write_sweep(curve, out / "sweep.csv")
    if cfg.figures:
        from .report import plot_sweep

        plot_sweep(curve, out / "sweep.png", title=sc.name)
    return 0


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError("E_ARGS", message, EXIT_ARGS)


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="gridcascade",
                 description="Cascading-failure simulation under physical attack.")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--case", required=True, help="case file (or name of a bundled case)")
        p.add_argument("--scenario", required=True, help="scenario file (or bundled name)")
        p.add_argument("--model", choices=("ac", "dc"), default="ac")
        p.add_argument("--out", default="out", help="output directory")
        p.add_argument("--seed", type=int, help="override base_seed")
        p.add_argument("--runs", type=int, help="override the number of runs")
        p.add_argument("--hf-prob", type=float, dest="hf_prob", help="override hf_probability")
        p.add_argument("--dt", type=float, help="override the time step (s)")
        p.add_argument("--figures", action="store_true", help="also render PNG figures")

    common(sub.add_parser("run", help="run one scenario or ensemble"))
    sw = sub.add_parser("sweep", help="mean outages against hidden-failure probability")
    common(sw)
    sw.add_argument("--probabilities", required=True, help="comma-separated list, e.g. 0,0.002,0.65")
    return ap


def main(argv: list[str] | None = None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
        cfg = RunConfig(case=_resolve(args.case, "case"), scenario=_resolve(args.scenario, "scenario"),
                        out=Path(args.out), model=args.model, seed=args.seed, runs=args.runs,
                        hf_probability=args.hf_prob, dt=args.dt, figures=args.figures)
        if args.command == "run":
            return cmd_run(cfg)
        return cmd_sweep(cfg, parse_probabilities(args.probabilities))
    except CliError as exc:
        print(f"error[{exc.code}]: {exc}", file=sys.stderr)
        return exc.status
    except OSError as exc:
        print(f"error[E_IO]: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
