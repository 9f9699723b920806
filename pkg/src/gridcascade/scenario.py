"""Attack scenarios, hidden-failure ensembles and probability sweeps."""

from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Sequence

from .cascade import CascadeResult, run_cascade
from .netmodel import Network
from .protection import RelayKind, build_relays, sample_hidden_failures

THREADS_ENV = "GRIDCASCADE_THREADS"


class AttackType(str, Enum):
    TYPE1_REGIONAL = "type1_regional"
    TYPE2_TARGETED = "type2_targeted"
    NONE = "none"


class ScenarioFormatError(ValueError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


@dataclass(frozen=True)
class Scenario:
    name: str
    target_set: frozenset[int]
    attack_type: AttackType = AttackType.TYPE2_TARGETED
    t_f: float = 1.0
    t_end: float = 30.0
    dt: float = 0.01
    hf_probability: float = 0.0
    runs: int = 1
    base_seed: int = 0
    hf_kinds: tuple[str, ...] | None = None  # restrict hidden failures to these relay kinds

    def __post_init__(self):
        object.__setattr__(self, "target_set", frozenset(int(b) for b in self.target_set))
        object.__setattr__(self, "attack_type", AttackType(self.attack_type))
        if self.hf_kinds is not None:
            object.__setattr__(self, "hf_kinds", tuple(RelayKind(k).value for k in self.hf_kinds))
        self.validate()

    def validate(self) -> None:
        if self.attack_type is AttackType.NONE:
            if self.target_set:
                raise ValueError("attack_type none takes no targets")
        elif not self.target_set:
            raise ValueError(f"{self.attack_type.value} scenario needs a nonempty target set")
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if not 0 <= self.t_f < self.t_end:
            raise ValueError("need 0 <= t_f < t_end")
        if not 0.0 <= self.hf_probability <= 1.0:
            raise ValueError("hf_probability must be in [0, 1]")
        if self.runs < 1:
            raise ValueError("runs must be >= 1")

    def with_overrides(self, **kw) -> "Scenario":
        return replace(self, **{k: v for k, v in kw.items() if v is not None})


_INT_FIELDS = {"runs", "base_seed"}
_FLOAT_FIELDS = {"t_f", "t_end", "dt", "hf_probability"}
_LIST_FIELDS = {"targets", "hf_kinds"}
_KNOWN = {"name", "attack_type"} | _INT_FIELDS | _FLOAT_FIELDS | _LIST_FIELDS


def _split_list(text: str) -> list[str]:
    return [tok for tok in text.replace(",", " ").split() if tok]


def parse_scenario(text: str, default_name: str = "scenario") -> Scenario:
    """Parse ``key = value`` lines; ``#`` starts a comment.

    Example::

        name = s1
        attack_type = type2_targeted
        targets = 16, 21
        hf_probability = 0.002
        runs = 20
    """
    values: dict = {}
    lines: dict[str, int] = {}
    for no, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ScenarioFormatError(f"expected 'key = value', got {line!r}", no)
        key, val = (s.strip() for s in line.split("=", 1))
        if key not in _KNOWN:
            raise ScenarioFormatError(f"unknown key {key!r}", no)
        if key in lines:
            raise ScenarioFormatError(f"duplicate key {key!r}", no)
        lines[key] = no
        try:
            if key in _INT_FIELDS:
                values[key] = int(val)
            elif key in _FLOAT_FIELDS:
                values[key] = float(val)
            elif key == "targets":
                values["target_set"] = frozenset(int(t) for t in _split_list(val))
            elif key == "hf_kinds":
                values[key] = tuple(RelayKind(k).value for k in _split_list(val))
            elif key == "attack_type":
                values[key] = AttackType(val)
            else:
                values[key] = val
        except ValueError as exc:
            raise ScenarioFormatError(f"bad value for {key}: {exc}", no) from None
    values.setdefault("name", default_name)
    values.setdefault("target_set", frozenset())
    if "attack_type" not in values and not values["target_set"]:
        values["attack_type"] = AttackType.NONE
    try:
        return Scenario(**values)
    except ValueError as exc:
        raise ScenarioFormatError(str(exc), None) from None


def load_scenario(path: str | Path) -> Scenario:
    path = Path(path)
    return parse_scenario(path.read_text(), default_name=path.stem)


def format_scenario(sc: Scenario) -> str:
    out = [f"name = {sc.name}", f"attack_type = {sc.attack_type.value}",
           "targets = " + ", ".join(str(b) for b in sorted(sc.target_set)),
           f"t_f = {sc.t_f!r}", f"t_end = {sc.t_end!r}", f"dt = {sc.dt!r}",
           f"hf_probability = {sc.hf_probability!r}", f"runs = {sc.runs}",
           f"base_seed = {sc.base_seed}"]
    if sc.hf_kinds is not None:
        out.append("hf_kinds = " + ", ".join(sc.hf_kinds))
    return "\n".join(out) + "\n"


# -- ensembles ---------------------------------------------------------------


@dataclass(frozen=True)
class EnsembleSummary:
    probability: float
    runs: tuple[tuple[int, int], ...]  # (delta_n, c) per run, in run order
    seeds: tuple[int, ...]
    results: tuple[CascadeResult, ...] = field(default=(), repr=False, compare=False)

    @property
    def delta_n(self) -> list[int]:
        return [d for d, _ in self.runs]

    @property
    def mean_delta_n(self) -> float:
        return sum(self.delta_n) / len(self.runs)

    @property
    def min_delta_n(self) -> int:
        return min(self.delta_n)

    @property
    def max_delta_n(self) -> int:
        return max(self.delta_n)

    @property
    def collapse_fraction(self) -> float:
        return sum(c for _, c in self.runs) / len(self.runs)

    def row(self) -> dict:
        return {"p": self.probability, "mean_delta_n": self.mean_delta_n,
                "min_delta_n": self.min_delta_n, "max_delta_n": self.max_delta_n,
                "collapse_fraction": self.collapse_fraction}


def hidden_set(net: Network, scenario: Scenario, seed: int) -> frozenset[int]:
    return sample_hidden_failures(build_relays(net), scenario.hf_probability, seed,
                                  kinds=scenario.hf_kinds)


def _one_run(args) -> CascadeResult:
    net, scenario, seed, record = args
    return run_cascade(net, scenario, hidden_set(net, scenario, seed), record=record)


def _workers(workers: int | None) -> int:
    if workers is None:
        try:
            workers = int(os.environ.get(THREADS_ENV, "1"))
        except ValueError:
            workers = 1
    return max(1, workers)


def run_ensemble(net: Network, scenario: Scenario, *, workers: int | None = None,
                 keep_results: bool = False) -> EnsembleSummary:
    """``scenario.runs`` cascades; run k samples its hidden failures with seed base_seed + k."""
    seeds = [scenario.base_seed + k for k in range(scenario.runs)]
    jobs = [(net, scenario, s, keep_results) for s in seeds]
    n = min(_workers(workers), len(jobs))
    if n > 1:
        with ProcessPoolExecutor(max_workers=n) as pool:
            results = list(pool.map(_one_run, jobs))
    else:
        results = [_one_run(j) for j in jobs]
    return EnsembleSummary(probability=scenario.hf_probability,
                           runs=tuple((r.delta_n, r.c) for r in results), seeds=tuple(seeds),
                           results=tuple(results) if keep_results else ())


def sweep_hf(net: Network, scenario: Scenario, probabilities: Sequence[float], *,
             workers: int | None = None, keep_results: bool = False) -> list[EnsembleSummary]:
    """One ensemble per probability, rows in the order given."""
    if not probabilities:
        raise ValueError("need at least one probability")
    out = []
    for p in probabilities:
        sc = replace(scenario, hf_probability=float(p))
        out.append(run_ensemble(net, sc, workers=workers, keep_results=keep_results))
    return out
