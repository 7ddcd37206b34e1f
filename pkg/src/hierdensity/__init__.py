"""Density estimation with hierarchical tensor networks fitted from sketched moments."""

from .errors import CapacityError, ConfigError, HierDensityError, ShapeError, SVDConvergenceError
from .estimator import CoreSolveReport, RankSchedule, fit, regauge, solve_core
from .models import IsingSpec, dense_density, energy, sample_exact, sample_gibbs
from .network import (HierarchicalTensorNetwork, evaluate, inner, load, materialize, norm,
                      normalize, relative_error, save, total_mass)
from .sketch import (MomentSet, SampleSet, SketchBasis, SketchConfig, build_bases,
                     build_cluster_basis, estimate_moments, merge_moments, moments_from_density)
from .tree import ROOT, DimensionTree, NodeId

__version__ = "0.1.0"

__all__ = [
    "CapacityError", "ConfigError", "HierDensityError", "ShapeError", "SVDConvergenceError",
    "CoreSolveReport", "RankSchedule", "fit", "regauge", "solve_core",
    "IsingSpec", "dense_density", "energy", "sample_exact", "sample_gibbs",
    "HierarchicalTensorNetwork", "evaluate", "inner", "load", "materialize", "norm",
    "normalize", "relative_error", "save", "total_mass",
    "MomentSet", "SampleSet", "SketchBasis", "SketchConfig", "build_bases",
    "build_cluster_basis", "estimate_moments", "merge_moments", "moments_from_density",
    "ROOT", "DimensionTree", "NodeId",
]
