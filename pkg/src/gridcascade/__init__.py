"""Cascading-failure simulation of power grids under physical attack.

The AC pipeline couples Newton-Raphson power flow, classical-machine
transient dynamics and a protection-relay model with hidden failures; a DC
angle-threshold cascade serves as the steady-state baseline.
"""

from .cascade import CascadeResult, TripEvent, detect_collapse, run_cascade
from .dccascade import DcCascadeResult, run_dc_cascade
from .netmodel import Network, load_case, validate
from .scenario import EnsembleSummary, Scenario, load_scenario, run_ensemble, sweep_hf

__all__ = [
    "CascadeResult", "DcCascadeResult", "EnsembleSummary", "Network", "Scenario", "TripEvent",
    "detect_collapse", "load_case", "load_scenario", "run_cascade", "run_dc_cascade",
    "run_ensemble", "sweep_hf", "validate",
]
