"""Result writers: summary text, JSON-lines event logs, CSV time series and sweeps."""

from __future__ import annotations

import csv
import json
from pathlib import Path
from typing import Sequence

from .cascade import CascadeResult, TripEvent
from .dccascade import DcCascadeResult
from .scenario import EnsembleSummary


def _num(x: float) -> str:
    return repr(float(x))


def write_events(events: Sequence[TripEvent], path: Path, model: str) -> None:
    with open(path, "w") as fh:
        for e in events:
            rec = e.to_record()
            rec["model"] = model
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def write_timeseries(result: CascadeResult, path: Path) -> None:
    s = result.series
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "load_mw", "gen_mw"] + [f"delta_deg_g{g}" for g in s.gen_ids]
                   + [f"vm_b{b}" for b in s.bus_ids])
        for k, t in enumerate(s.t):
            w.writerow([_num(t), _num(s.load_mw[k]), _num(s.gen_mw[k])]
                       + [_num(x) for x in s.delta_deg[k]] + [_num(x) for x in s.vm[k]])


def summary_lines(header: dict, result: CascadeResult | DcCascadeResult | None = None,
                  ensemble: EnsembleSummary | None = None) -> list[str]:
    lines = [f"{k}: {v}" for k, v in header.items()]
    if ensemble is not None:
        lines += [f"runs: {len(ensemble.runs)}",
                  f"hf_probability: {ensemble.probability!r}",
                  f"mean_delta_n: {ensemble.mean_delta_n!r}",
                  f"min_delta_n: {ensemble.min_delta_n}",
                  f"max_delta_n: {ensemble.max_delta_n}",
                  f"collapse_fraction: {ensemble.collapse_fraction!r}"]
        for k, ((dn, c), seed) in enumerate(zip(ensemble.runs, ensemble.seeds)):
            lines.append(f"run {k}: seed={seed} delta_n={dn} c={c}")
    elif result is not None:
        lines += [f"delta_n: {result.delta_n}", f"c: {result.c}",
                  f"collapse_fraction: {float(result.c)!r}", f"n0: {result.n0}",
                  f"events: {len(result.events)}"]
        if isinstance(result, DcCascadeResult):
            lines.append(f"rounds: {len(result.rounds)}")
        else:
            lines.append(f"t_stop: {result.t_stop:.6f}")
    return lines


def write_summary(lines: Sequence[str], path: Path) -> None:
    path.write_text("\n".join(lines) + "\n")


def write_sweep(curve: Sequence[EnsembleSummary], path: Path) -> None:
    rows = sorted(curve, key=lambda s: s.probability)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["p", "mean_delta_n", "min_delta_n", "max_delta_n", "collapse_fraction", "runs"])
        for s in rows:
            w.writerow([_num(s.probability), _num(s.mean_delta_n), s.min_delta_n, s.max_delta_n,
                        _num(s.collapse_fraction), len(s.runs)])
