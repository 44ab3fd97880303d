"""Per-agent partial observation: one feature row per task."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..consensus import NONE, AgentState
from ..world import WorldInstance, all_insertions, removal_savings

FEATURE_SPEC: tuple[str, ...] = (
    "dist_to_agent",
    "insertion_cost",
    "winning_bid",
    "won_by_self",
    "unassigned",
    "task_x",
    "task_y",
    "bundle_fill",
)
N_FEATURES = len(FEATURE_SPEC)


@dataclass(frozen=True)
class Observation:
    features: np.ndarray  # (N_t, F)
    feature_spec: tuple[str, ...] = FEATURE_SPEC


def marginal_costs(state: AgentState, world: WorldInstance) -> np.ndarray:
    """Route-length change per task relative to the agent's current path.

    Tasks off the path get their cheapest insertion increase; tasks on the
    path get the length their removal would save.
    """
    start = world.agents[state.agent_id]
    _, deltas = all_insertions(start, state.path, world)
    if state.path:
        deltas[state.path] = removal_savings(start, state.path, world)
    return deltas


def build_observation(state: AgentState, world: WorldInstance) -> Observation:
    """Features from the agent's own (y, z, b, p), its position and the task set.

    Nothing about other agents' bundles or paths enters, only what the agent
    itself believes through its winning-bid and winner vectors.
    """
    diag = world.diagonal
    start = world.agents[state.agent_id]
    feats = np.empty((world.n_tasks, N_FEATURES))
    feats[:, 0] = np.sqrt(((world.tasks - start) ** 2).sum(-1)) / diag
    feats[:, 1] = np.minimum(marginal_costs(state, world) / diag, 1.0)
    feats[:, 2] = np.clip(state.winning_bids, 0.0, 1.0)
    feats[:, 3] = state.winners == state.agent_id
    feats[:, 4] = state.winners == NONE
    feats[:, 5:7] = world.tasks / world.workspace_side
    feats[:, 7] = len(state.bundle) / world.capacity
    return Observation(feats)
