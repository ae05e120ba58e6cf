"""Local Gaussian-process emulation with pruned greedy sub-design search."""

from .features import FeatureMap, LshIndex, ResidualProjector, nystrom_build
from .kernel import KernelSpec, correlation, mahalanobis_distance, profile_inverse
from .localgp import Dataset, EigenParams, LocalState
from .search import SearchConfig, SearchContext, SearchReport, run_search
from .spatial import KDTree

__all__ = [
    "Dataset", "EigenParams", "FeatureMap", "KDTree", "KernelSpec", "LocalState", "LshIndex",
    "ResidualProjector", "SearchConfig", "SearchContext", "SearchReport", "correlation",
    "mahalanobis_distance", "nystrom_build", "profile_inverse", "run_search",
]

__version__ = "0.1.0"
