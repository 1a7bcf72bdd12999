"""Differentiable network topology search with feasibility-constrained decoding.

Modules: ``space`` (search space and feasibility), ``relax`` (continuous
relaxation), ``arch_loss`` (architecture losses), ``decode`` (shortest-path
discretization), ``tensor`` (reverse-mode autodiff), ``supernet``, ``task``
(synthetic segmentation data), ``engine`` (bi-level search) and ``cli``.
"""

__version__ = "0.1.0"

from .decode import ArchitectureTopology, decode, shortest_path_decode
from .engine import SearchConfig, SearchResult, retrain, run_search
from .relax import ArchParams, relax_all
from .space import SearchSpace, SpaceConfig

__all__ = [
    "ArchParams",
    "ArchitectureTopology",
    "SearchConfig",
    "SearchResult",
    "SearchSpace",
    "SpaceConfig",
    "decode",
    "relax_all",
    "retrain",
    "run_search",
    "shortest_path_decode",
]
