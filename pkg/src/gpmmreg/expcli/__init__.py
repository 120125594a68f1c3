"""Experiment harness and command-line frontend."""
from .experiments import (EnergyReport, EnergyRow, GridSearchResult, GridSearchSpec, energy_by_category,
                          export_eigenfunctions, grid_search)
from .synth import KINDS, facelike, icosphere, make_synthetic, plane, slit_plane

__all__ = [
    "EnergyReport",
    "EnergyRow",
    "GridSearchResult",
    "GridSearchSpec",
    "KINDS",
    "energy_by_category",
    "export_eigenfunctions",
    "facelike",
    "grid_search",
    "icosphere",
    "make_synthetic",
    "plane",
    "slit_plane",
]
