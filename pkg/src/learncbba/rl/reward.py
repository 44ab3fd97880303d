"""Per-round team reward and the centralized critic's global input."""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from ..consensus import NONE, Snapshot
from ..oracle import OptimalAssignment
from ..world import WorldInstance


class DegenerateWorldError(ValueError):
    """Optimal distance is zero, so distance changes cannot be normalised."""


@dataclass(frozen=True)
class RewardWeights:
    w_D: float = 0.5
    w_C: float = 0.2
    w_A: float = 0.3

    def __post_init__(self) -> None:
        if min(self.w_D, self.w_C, self.w_A) < 0:
            raise ValueError("reward weights must be nonnegative")


class Reward(NamedTuple):
    total: float
    distance: float
    coverage: float
    agreement: float


@dataclass(frozen=True)
class TeamStatus:
    """Scalars the reward is built from, measured on one snapshot."""

    distance: float
    covered: int
    agreed: int

    @classmethod
    def of(cls, snap: Snapshot, world: WorldInstance, oracle: OptimalAssignment) -> "TeamStatus":
        owners = snap.owners(world.n_tasks)
        target = oracle.owners(world.n_tasks)
        agreed = int(np.sum((owners == target) & (owners != NONE)))
        return cls(snap.team_distance(world), snap.covered(), agreed)


def _clip(x: float) -> float:
    return float(min(1.0, max(-1.0, x)))


def compute_reward(
    prev: Snapshot | TeamStatus,
    curr: Snapshot | TeamStatus,
    oracle: OptimalAssignment,
    weights: RewardWeights,
    world: WorldInstance,
) -> Reward:
    """Weighted sum of distance, coverage and agreement improvements.

    Each part is a change between consecutive rounds: distance is normalised
    by the optimal team distance and clipped to [-1, 1]; coverage and
    agreement with the optimal owner are task counts divided by ``N_t``.
    """
    if isinstance(prev, Snapshot):
        prev = TeamStatus.of(prev, world, oracle)
    if isinstance(curr, Snapshot):
        curr = TeamStatus.of(curr, world, oracle)
    d_star = oracle.total_distance
    if d_star <= 0.0:
        if prev.distance > 0.0 or curr.distance > 0.0:
            raise DegenerateWorldError(f"world {world.id}: optimal distance is zero")
        r_d = 0.0
    else:
        r_d = _clip((prev.distance - curr.distance) / d_star)
    n = world.n_tasks
    r_c = (curr.covered - prev.covered) / n
    r_a = (curr.agreed - prev.agreed) / n
    total = weights.w_D * r_d + weights.w_C * r_c + weights.w_A * r_a
    return Reward(total, r_d, r_c, r_a)


def terminal_bonus(final_distance: float, classic_distance: float, d_star: float) -> float:
    """Clipped improvement over the classic bidder's final team distance."""
    if d_star <= 0.0:
        return 0.0
    return _clip((classic_distance - final_distance) / d_star)


# -- centralized critic input ----------------------------------------------------


@dataclass(frozen=True)
class CriticLayout:
    max_agents: int = 8
    max_tasks: int = 32

    @property
    def dim(self) -> int:
        a, t = self.max_agents, self.max_tasks
        return 3 * a + 3 * t + 2 * a * t + len(SCALARS)


SCALARS = ("coverage", "agreement", "distance_ratio", "agent_fill", "task_fill", "round")


def build_critic_input(
    world: WorldInstance,
    snap: Snapshot,
    oracle: OptimalAssignment,
    layout: CriticLayout = CriticLayout(),
    round_fraction: float = 0.0,
) -> np.ndarray:
    """Fixed-length global state vector, zero-padded to the layout maxima.

    Layout: agent xy, agent mask, task xy, task mask, y table, z table, then
    the scalars named in ``SCALARS``.
    """
    n_a, n_t = world.n_agents, world.n_tasks
    A, T = layout.max_agents, layout.max_tasks
    if n_a > A or n_t > T:
        raise ValueError(f"world {world.id} ({n_a} agents, {n_t} tasks) exceeds critic layout ({A}, {T})")
    side = world.workspace_side
    agents = np.zeros((A, 2))
    agents[:n_a] = world.agents / side
    a_mask = np.zeros(A)
    a_mask[:n_a] = 1.0
    tasks = np.zeros((T, 2))
    tasks[:n_t] = world.tasks / side
    t_mask = np.zeros(T)
    t_mask[:n_t] = 1.0
    y = np.zeros((A, T))
    y[:n_a, :n_t] = np.clip(snap.winning_bids, 0.0, 1.0)
    z = np.zeros((A, T))
    z[:n_a, :n_t] = (snap.winners + 1) / A

    status = TeamStatus.of(snap, world, oracle)
    d_star = oracle.total_distance
    ratio = min(status.distance / d_star, 5.0) if d_star > 0 else 0.0
    scalars = np.array(
        [status.covered / n_t, status.agreed / n_t, ratio, n_a / A, n_t / T, round_fraction]
    )
    return np.concatenate(
        [agents.ravel(), a_mask, tasks.ravel(), t_mask, y.ravel(), z.ravel(), scalars]
    )


def critic_scalar(vector: np.ndarray, name: str) -> float:
    return float(vector[-len(SCALARS) + SCALARS.index(name)])


def team_statuses(
    snapshots: Sequence[Snapshot], world: WorldInstance, oracle: OptimalAssignment
) -> list[TeamStatus]:
    return [TeamStatus.of(s, world, oracle) for s in snapshots]
