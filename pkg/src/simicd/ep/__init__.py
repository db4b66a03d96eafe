"""Monodomain tissue model: geometry, membrane kinetics, solver, induction."""
from .checkpoint import Checkpoint, config_hash
from .grid import TissueGrid, add_elliptical_scar, block_mask, sheet
from .ionic import IonicParams, init_limit_cycle, integrate_cell, ionic_step
from .reentry import InductionError, InductionProtocol, induce_reentry
from .solver import PeriodicStimulus, Simulator, StabilityError, Stimulus, StimulusSchedule, TissueState
from .tuning import ConductionError, measure_cv, tune_conductivity

__all__ = [
    "Checkpoint", "config_hash", "TissueGrid", "add_elliptical_scar", "block_mask", "sheet",
    "IonicParams", "init_limit_cycle", "integrate_cell", "ionic_step",
    "InductionError", "InductionProtocol", "induce_reentry",
    "PeriodicStimulus", "Simulator", "StabilityError", "Stimulus", "StimulusSchedule", "TissueState",
    "ConductionError", "measure_cv", "tune_conductivity",
]
