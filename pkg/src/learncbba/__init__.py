"""Auction-consensus multi-robot task allocation with learned bidding policies."""

from .consensus import RunConfig, RunResult, run_allocation
from .world import WorldInstance, generate_dataset, generate_world

__version__ = "0.1.0"

__all__ = [
    "RunConfig",
    "RunResult",
    "WorldInstance",
    "generate_dataset",
    "generate_world",
    "run_allocation",
]
