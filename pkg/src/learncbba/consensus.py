"""Two-phase auction-consensus protocol.

Each round every agent first grows its bundle greedily from the bids of a
pluggable bidder (``build_bundle``), then all agents exchange their winning
bid and winner vectors and resolve conflicts with the CBBA update / reset /
leave table (``resolve_conflicts``).  ``run_allocation`` iterates rounds until
the team state stops changing or the iteration limit is hit.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Protocol, Sequence

import numpy as np

from .world import WorldInstance, insertion_costs, path_length, route_points

NONE = -1


class InvariantError(AssertionError):
    """An agent state violates the protocol invariants."""


class Bidder(Protocol):
    name: str

    def reset(self, world: WorldInstance) -> None: ...

    def bid(self, state: "AgentState", world: WorldInstance, iteration: int) -> np.ndarray: ...


@dataclass
class AgentState:
    agent_id: int
    winning_bids: np.ndarray
    winners: np.ndarray
    bundle: list[int] = field(default_factory=list)
    path: list[int] = field(default_factory=list)
    timestamps: np.ndarray | None = None

    @classmethod
    def fresh(cls, agent_id: int, world: WorldInstance) -> "AgentState":
        return cls(
            agent_id=agent_id,
            winning_bids=np.zeros(world.n_tasks),
            winners=np.full(world.n_tasks, NONE, dtype=np.int64),
            bundle=[],
            path=[],
            timestamps=np.zeros(world.n_agents),
        )

    def copy(self) -> "AgentState":
        return AgentState(
            agent_id=self.agent_id,
            winning_bids=self.winning_bids.copy(),
            winners=self.winners.copy(),
            bundle=list(self.bundle),
            path=list(self.path),
            timestamps=self.timestamps.copy(),
        )

    def key(self) -> tuple:
        """Hashable view of (y, z, b, p) used for change detection."""
        return (
            self.winning_bids.tobytes(),
            self.winners.tobytes(),
            tuple(self.bundle),
            tuple(self.path),
        )


@dataclass(frozen=True)
class Message:
    sender: int
    winning_bids: np.ndarray
    winners: np.ndarray
    timestamps: np.ndarray

    @classmethod
    def from_state(cls, state: AgentState, time: float) -> "Message":
        stamps = state.timestamps.copy()
        stamps[state.agent_id] = time
        return cls(state.agent_id, state.winning_bids.copy(), state.winners.copy(), stamps)


@dataclass
class RunConfig:
    max_iterations: int = 50
    topology: Sequence[Sequence[int]] | None = None
    convergence_window: int = 1
    record_snapshots: bool = True

    def __post_init__(self) -> None:
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if self.convergence_window < 1:
            raise ValueError("convergence_window must be >= 1")

    def neighbors(self, n_agents: int) -> list[list[int]]:
        if self.topology is None:
            return [[k for k in range(n_agents) if k != i] for i in range(n_agents)]
        if len(self.topology) != n_agents:
            raise ValueError(f"topology lists {len(self.topology)} agents, world has {n_agents}")
        return [sorted(int(k) for k in nbrs if k != i) for i, nbrs in enumerate(self.topology)]


@dataclass(frozen=True)
class Snapshot:
    """Team state after one round (index 0 is the initial, empty state)."""

    winning_bids: np.ndarray  # (N_u, N_t)
    winners: np.ndarray  # (N_u, N_t)
    bundles: tuple[tuple[int, ...], ...]
    paths: tuple[tuple[int, ...], ...]

    @classmethod
    def of(cls, states: Sequence[AgentState]) -> "Snapshot":
        return cls(
            winning_bids=np.stack([s.winning_bids for s in states]),
            winners=np.stack([s.winners for s in states]),
            bundles=tuple(tuple(s.bundle) for s in states),
            paths=tuple(tuple(s.path) for s in states),
        )

    def owners(self, n_tasks: int) -> np.ndarray:
        """Per-task owner by bundle membership; NONE if unheld or contested."""
        owner = np.full(n_tasks, NONE, dtype=np.int64)
        count = np.zeros(n_tasks, dtype=np.int64)
        for i, bundle in enumerate(self.bundles):
            for j in bundle:
                owner[j] = i
                count[j] += 1
        owner[count != 1] = NONE
        return owner

    def covered(self) -> int:
        return len({j for b in self.bundles for j in b})

    def team_distance(self, world: WorldInstance) -> float:
        return sum(path_length(world.agents[i], p, world) for i, p in enumerate(self.paths))


@dataclass
class RunResult:
    world_id: str
    bidder: str
    paths: list[tuple[int, ...]]
    bundles: list[tuple[int, ...]]
    iterations: int
    timed_out: bool
    rounds_executed: int
    final_states: list[AgentState]
    snapshots: list[Snapshot]

    def team_distance(self, world: WorldInstance) -> float:
        return sum(path_length(world.agents[i], p, world) for i, p in enumerate(self.paths))

    def uncovered(self, n_tasks: int) -> int:
        return n_tasks - len({j for b in self.bundles for j in b})

    def conflict_free(self) -> bool:
        held = [j for b in self.bundles for j in b]
        return len(held) == len(set(held))

    def agreement(self) -> bool:
        first = self.final_states[0]
        return all(
            np.array_equal(s.winners, first.winners)
            and np.array_equal(s.winning_bids, first.winning_bids)
            for s in self.final_states[1:]
        )

    def to_record(self, world: WorldInstance) -> dict:
        return {
            "world_id": self.world_id,
            "bidder": self.bidder,
            "paths": [list(p) for p in self.paths],
            "iterations": self.iterations,
            "timed_out": self.timed_out,
            "total_distance": self.team_distance(world),
        }


# -- phase 1: bundle construction -----------------------------------------


def mask_bundle_bids(bids: np.ndarray, bundle: Sequence[int]) -> np.ndarray:
    """Copy of ``bids`` with every bundle task forced to ``-inf``."""
    out = np.array(bids, dtype=np.float64, copy=True)
    if len(bundle):
        out[list(bundle)] = -np.inf
    return out


def build_bundle(
    state: AgentState, world: WorldInstance, bidder: Bidder, iteration: int
) -> AgentState:
    """Greedy learned bundle construction for one agent.

    Bids are computed once from the entry state; tasks whose bid beats the
    agent's current winning-bid belief are then taken in decreasing bid order
    and spliced into the path at the cheapest slot until the bundle is full or
    no candidate is left.
    """
    new = state.copy()
    bids = np.asarray(bidder.bid(new, world, iteration), dtype=np.float64)
    if bids.shape != (world.n_tasks,):
        raise ValueError(f"bidder returned shape {bids.shape}, expected ({world.n_tasks},)")
    bids = np.where(np.isfinite(bids), bids, -np.inf)
    masked = mask_bundle_bids(bids, new.bundle)
    candidate = masked > new.winning_bids

    i = new.agent_id
    start = world.agents[i]
    while len(new.bundle) < world.capacity:
        if not candidate.any():
            break
        j = int(np.argmax(np.where(candidate, masked, -np.inf)))
        costs = insertion_costs(route_points(start, new.path, world), world.tasks[j : j + 1])[0]
        slot = int(np.argmin(costs))
        new.bundle.append(j)
        new.path.insert(slot, j)
        new.winning_bids[j] = bids[j]
        new.winners[j] = i
        candidate[j] = False
    return new


# -- phase 2: conflict resolution -------------------------------------------


def release_from(state: AgentState, bundle_index: int) -> AgentState:
    """Drop the bundle task at ``bundle_index`` and every task added after it.

    Dropped tasks the agent still believes it owns are cleared to
    (bid 0, winner NONE); tasks already reassigned elsewhere keep that belief.
    """
    if not 0 <= bundle_index < len(state.bundle):
        raise ValueError(f"bundle index {bundle_index} outside [0, {len(state.bundle)})")
    new = state.copy()
    dropped = new.bundle[bundle_index:]
    new.bundle = new.bundle[:bundle_index]
    gone = set(dropped)
    new.path = [j for j in new.path if j not in gone]
    for j in dropped:
        if new.winners[j] == new.agent_id:
            new.winners[j] = NONE
            new.winning_bids[j] = 0.0
    return new


def _outbids(y_a, z_a, y_b, z_b):
    # equal bids go to the lower agent index
    return (y_a > y_b) | ((y_a == y_b) & (z_a < z_b))


def decision_table(
    receiver_id: int,
    sender_id: int,
    y_i: np.ndarray,
    z_i: np.ndarray,
    s_i: np.ndarray,
    y_k: np.ndarray,
    z_k: np.ndarray,
    s_k: np.ndarray,
) -> tuple[np.ndarray, np.ndarray]:
    """Per-task (update, reset) masks of the CBBA receive rules; rest is leave.

    ``i`` is the receiver, ``k`` the sender, ``m``/``n`` any third agents.
    """
    i, k = receiver_id, sender_id
    zk_idx = np.where(z_k >= 0, z_k, 0)
    zi_idx = np.where(z_i >= 0, z_i, 0)
    # sender has fresher information about the agent it/the receiver names
    fresh_zk = s_k[zk_idx] > s_i[zk_idx]
    stale_zk = s_i[zk_idx] > s_k[zk_idx]
    fresh_zi = s_k[zi_idx] > s_i[zi_idx]
    fresh_k_about_zk_vs_k = s_k[zk_idx] > s_i[k]
    better = _outbids(y_k, z_k, y_i, z_i)

    k_says_k = z_k == k
    k_says_i = z_k == i
    k_says_none = z_k == NONE
    k_says_m = ~(k_says_k | k_says_i | k_says_none)
    i_says_i = z_i == i
    i_says_k = z_i == k
    i_says_none = z_i == NONE
    i_says_m = ~(i_says_i | i_says_k | i_says_none)
    same_third = k_says_m & i_says_m & (z_k == z_i)
    diff_third = k_says_m & i_says_m & (z_k != z_i)

    update = (
        (k_says_k & i_says_i & better)
        | (k_says_k & i_says_k)
        | (k_says_k & i_says_m & (fresh_zi | better))
        | (k_says_k & i_says_none)
        | (k_says_m & i_says_i & fresh_zk & better)
        | (k_says_m & i_says_k & fresh_k_about_zk_vs_k)
        | (same_third & fresh_zk)
        | (diff_third & fresh_zk & fresh_zi)
        | (diff_third & fresh_zk & better)
        | (k_says_m & i_says_none & fresh_zk)
        | (k_says_none & i_says_k)
        | (k_says_none & i_says_m & fresh_zi)
    )
    reset = (
        (k_says_i & i_says_k)
        | (k_says_i & i_says_m & fresh_zi)
        | (k_says_m & i_says_k & ~fresh_k_about_zk_vs_k)
        | (diff_third & fresh_zi & stale_zk)
    ) & ~update
    return update, reset


LEAVE, UPDATE, RESET = 0, 1, 2


def decide(i: int, k: int, y_i: float, z_i: int, s_i, y_k: float, z_k: int, s_k) -> int:
    """Scalar form of :func:`decision_table` for a single task."""
    better = y_k > y_i or (y_k == y_i and z_k < z_i)
    if z_k == k:
        if z_i == i:
            return UPDATE if better else LEAVE
        if z_i == k or z_i == NONE:
            return UPDATE
        return UPDATE if (s_k[z_i] > s_i[z_i] or better) else LEAVE
    if z_k == i:
        if z_i == k:
            return RESET
        if z_i != i and z_i != NONE and s_k[z_i] > s_i[z_i]:
            return RESET
        return LEAVE
    if z_k == NONE:
        if z_i == k:
            return UPDATE
        if z_i != i and z_i != NONE and s_k[z_i] > s_i[z_i]:
            return UPDATE
        return LEAVE
    m = z_k
    fresh_m = s_k[m] > s_i[m]
    if z_i == i:
        return UPDATE if (fresh_m and better) else LEAVE
    if z_i == k:
        return UPDATE if s_k[m] > s_i[k] else RESET
    if z_i == NONE or z_i == m:
        return UPDATE if fresh_m else LEAVE
    n = z_i
    fresh_n = s_k[n] > s_i[n]
    if fresh_m and (fresh_n or better):
        return UPDATE
    if fresh_n and s_i[m] > s_k[m]:
        return RESET
    return LEAVE


_SCALAR_LIMIT = 12


def resolve_conflicts(receiver: AgentState, msg: Message) -> AgentState:
    """Apply one incoming message to the receiver's beliefs.

    If the receiver loses any task of its own bundle, the bundle is released
    from the earliest lost position onwards.
    """
    new = receiver.copy()
    if msg.winners.shape != new.winners.shape or msg.timestamps.shape != new.timestamps.shape:
        raise ValueError("message dimensions do not match the receiver state")
    # identical (z, y) entries come out unchanged under every rule
    differ = np.flatnonzero((msg.winners != new.winners) | (msg.winning_bids != new.winning_bids))
    if 0 < len(differ) <= _SCALAR_LIMIT:
        i, k = new.agent_id, msg.sender
        y_i, z_i, s_i = new.winning_bids, new.winners, new.timestamps
        y_k, z_k, s_k = msg.winning_bids, msg.winners, msg.timestamps
        for j in differ.tolist():
            action = decide(i, k, y_i[j], int(z_i[j]), s_i, y_k[j], int(z_k[j]), s_k)
            if action == UPDATE:
                y_i[j] = y_k[j]
                z_i[j] = z_k[j]
            elif action == RESET:
                y_i[j] = 0.0
                z_i[j] = NONE
    elif len(differ):
        update, reset = decision_table(
            new.agent_id,
            msg.sender,
            new.winning_bids[differ],
            new.winners[differ],
            new.timestamps,
            msg.winning_bids[differ],
            msg.winners[differ],
            msg.timestamps,
        )
        up, rs = differ[update], differ[reset]
        new.winning_bids[up] = msg.winning_bids[up]
        new.winners[up] = msg.winners[up]
        new.winning_bids[rs] = 0.0
        new.winners[rs] = NONE

    stamps = np.maximum(new.timestamps, msg.timestamps)
    stamps[msg.sender] = msg.timestamps[msg.sender]
    stamps[new.agent_id] = new.timestamps[new.agent_id]
    new.timestamps = stamps

    for idx, j in enumerate(new.bundle):
        if new.winners[j] != new.agent_id:
            return release_from(new, idx)
    return new


# -- validation ---------------------------------------------------------------


def check_state(state: AgentState, world: WorldInstance) -> None:
    """Raise ``InvariantError`` if the state breaks any protocol invariant."""
    y, z = state.winning_bids, state.winners
    n = world.n_tasks
    if y.shape != (n,) or z.shape != (n,) or state.timestamps.shape != (world.n_agents,):
        raise InvariantError("state dimensions do not match the world")
    if np.any(y < 0) or not np.all(np.isfinite(y)):
        raise InvariantError("winning bids must be finite and nonnegative")
    if np.any((y > 0) != (z != NONE)):
        raise InvariantError("positive bid iff a winner is recorded")
    if np.any((z < NONE) | (z >= world.n_agents)):
        raise InvariantError("winner index out of range")
    if len(state.bundle) > world.capacity:
        raise InvariantError("bundle exceeds capacity")
    if len(set(state.bundle)) != len(state.bundle):
        raise InvariantError("bundle repeats a task")
    if sorted(state.bundle) != sorted(state.path) or len(state.path) != len(set(state.path)):
        raise InvariantError("bundle and path hold different tasks")
    if any(z[j] != state.agent_id for j in state.bundle):
        raise InvariantError("bundle task not credited to its holder")


# -- full run -----------------------------------------------------------------


def run_allocation(world: WorldInstance, bidder: Bidder, config: RunConfig | None = None) -> RunResult:
    """Run synchronous auction-consensus rounds until stable or out of rounds.

    A round is: every agent builds its bundle (in index order), all agents
    snapshot a message, then each receiver applies its neighbours' messages in
    index order.  The run has converged once ``convergence_window`` consecutive
    rounds leave every agent's (y, z, b, p) unchanged and all agents agree on
    (y, z).  ``iterations`` counts rounds up to the last one that changed
    anything.
    """
    config = config or RunConfig()
    n = world.n_agents
    neighbors = config.neighbors(n)
    bidder.reset(world)
    states = [AgentState.fresh(i, world) for i in range(n)]
    snapshots = [Snapshot.of(states)] if config.record_snapshots else []

    last_change = 0
    stable = 0
    converged = False
    t = 0
    while t < config.max_iterations:
        t += 1
        before = [s.key() for s in states]
        states = [build_bundle(s, world, bidder, t) for s in states]
        messages = [Message.from_state(s, float(t)) for s in states]
        for i in range(n):
            st = states[i]
            for k in neighbors[i]:
                st = resolve_conflicts(st, messages[k])
            st.timestamps[i] = float(t)
            states[i] = st
        if config.record_snapshots:
            snapshots.append(Snapshot.of(states))

        if [s.key() for s in states] == before:
            stable += 1
        else:
            stable = 0
            last_change = t
        if stable >= config.convergence_window and _agree(states):
            converged = True
            break

    return RunResult(
        world_id=world.id,
        bidder=getattr(bidder, "name", type(bidder).__name__),
        paths=[tuple(s.path) for s in states],
        bundles=[tuple(s.bundle) for s in states],
        iterations=max(last_change, 1) if converged else config.max_iterations,
        timed_out=not converged,
        rounds_executed=t,
        final_states=states,
        snapshots=snapshots,
    )


def _agree(states: Sequence[AgentState]) -> bool:
    first = states[0]
    return all(
        np.array_equal(s.winners, first.winners) and np.array_equal(s.winning_bids, first.winning_bids)
        for s in states[1:]
    )
