"""Packet-pair dispersion through slotted queues: analytic laws, simulation, estimation."""

__version__ = "0.1.0"

from .errors import (ConfigError, DisperseError, DivergenceError, KernelDomainError,  # noqa: E402
                     StabilityError, TruncationError, UsageError)
from .prob import ArrivalModel, Limits, Pmf, SeparationDist, stationary_dist  # noqa: E402
from .kernel import output_dist, output_dist_equal_priority, op_count  # noqa: E402
from .network import Topology, propagate_path, propagate_tree, light_load_kernel  # noqa: E402
from .simulator import SimConfig, Segment, simulate, empirical_dist  # noqa: E402
from .estimation import grid_search, track, kl_distance, euclidean_distance  # noqa: E402

__all__ = [
    "ArrivalModel", "ConfigError", "DisperseError", "DivergenceError", "KernelDomainError",
    "Limits", "Pmf", "Segment", "SeparationDist", "SimConfig", "StabilityError", "Topology",
    "TruncationError", "UsageError", "empirical_dist", "euclidean_distance", "grid_search",
    "kl_distance", "light_load_kernel", "op_count", "output_dist", "output_dist_equal_priority",
    "propagate_path", "propagate_tree", "simulate", "stationary_dist", "track",
]
