"""Problem instances and route geometry.

A world is a square workspace holding ``N_u`` agents and ``N_t`` tasks.  Routes
are open paths: an agent starts at its own position, visits its tasks in
order and does not return.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np

Point2 = tuple[float, float]
Path = Sequence[int]
CapacityRule = Callable[[int, int], int]


class CapacityError(ValueError):
    """Raised when inserting into a path that already holds ``capacity`` tasks."""


def unconstrained(n_agents: int, n_tasks: int) -> int:
    return n_tasks


def fixed_capacity(limit: int) -> CapacityRule:
    def rule(n_agents: int, n_tasks: int) -> int:
        return limit

    return rule


@dataclass(frozen=True, eq=False)
class WorldInstance:
    id: str
    workspace_side: float
    agents: np.ndarray
    tasks: np.ndarray
    capacity: int
    _dist: np.ndarray = field(init=False, repr=False)

    def __post_init__(self) -> None:
        agents = np.array(self.agents, dtype=np.float64).reshape(-1, 2)
        tasks = np.array(self.tasks, dtype=np.float64).reshape(-1, 2)
        side = float(self.workspace_side)
        if not side > 0 or not math.isfinite(side):
            raise ValueError(f"workspace_side must be positive, got {self.workspace_side!r}")
        if len(agents) < 1 or len(tasks) < 1:
            raise ValueError("a world needs at least one agent and one task")
        if int(self.capacity) != self.capacity or self.capacity < 1:
            raise ValueError(f"capacity must be a positive integer, got {self.capacity!r}")
        for name, pts in (("agent", agents), ("task", tasks)):
            if not np.all(np.isfinite(pts)):
                raise ValueError(f"non-finite {name} coordinate")
            if pts.min() < 0.0 or pts.max() > side:
                raise ValueError(f"{name} coordinate outside [0, {side}]^2")
        agents.flags.writeable = False
        tasks.flags.writeable = False
        object.__setattr__(self, "agents", agents)
        object.__setattr__(self, "tasks", tasks)
        object.__setattr__(self, "workspace_side", side)
        object.__setattr__(self, "capacity", int(self.capacity))
        # task-to-task distances, reused by every route computation
        diff = tasks[:, None, :] - tasks[None, :, :]
        dist = np.sqrt((diff**2).sum(-1))
        dist.flags.writeable = False
        object.__setattr__(self, "_dist", dist)

    @property
    def n_agents(self) -> int:
        return len(self.agents)

    @property
    def n_tasks(self) -> int:
        return len(self.tasks)

    @property
    def diagonal(self) -> float:
        return self.workspace_side * math.sqrt(2.0)

    @property
    def coverable(self) -> bool:
        return self.n_agents * self.capacity >= self.n_tasks

    @property
    def task_distances(self) -> np.ndarray:
        return self._dist

    def agent_task_distances(self) -> np.ndarray:
        diff = self.agents[:, None, :] - self.tasks[None, :, :]
        return np.sqrt((diff**2).sum(-1))

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "workspace_side": self.workspace_side,
            "capacity": self.capacity,
            "agents": self.agents.tolist(),
            "tasks": self.tasks.tolist(),
        }

    @classmethod
    def from_dict(cls, record: dict) -> "WorldInstance":
        expected = {"id", "workspace_side", "capacity", "agents", "tasks"}
        missing = expected - record.keys()
        if missing:
            raise ValueError(f"world record missing fields: {sorted(missing)}")
        unknown = record.keys() - expected
        if unknown:
            raise ValueError(f"world record has unknown fields: {sorted(unknown)}")
        for key in ("agents", "tasks"):
            pts = record[key]
            if not isinstance(pts, list) or any(
                not isinstance(p, (list, tuple)) or len(p) != 2 for p in pts
            ):
                raise ValueError(f"{key} must be a list of [x, y] pairs")
        if isinstance(record["capacity"], bool) or not isinstance(record["capacity"], int):
            raise ValueError("capacity must be an integer")
        return cls(
            id=str(record["id"]),
            workspace_side=record["workspace_side"],
            agents=np.asarray(record["agents"], dtype=np.float64),
            tasks=np.asarray(record["tasks"], dtype=np.float64),
            capacity=record["capacity"],
        )

    def same_as(self, other: "WorldInstance") -> bool:
        return (
            self.id == other.id
            and self.workspace_side == other.workspace_side
            and self.capacity == other.capacity
            and np.array_equal(self.agents, other.agents)
            and np.array_equal(self.tasks, other.tasks)
        )


def _check_range(name: str, rng: tuple) -> None:
    lo, hi = rng
    if lo > hi:
        raise ValueError(f"empty {name} range [{lo}, {hi}]")


def generate_world(
    seed: int,
    n_agents: int,
    task_count_range: tuple[int, int] = (10, 20),
    side_range: tuple[float, float] = (25.0, 55.0),
    capacity_rule: CapacityRule | int | None = None,
    *,
    ordinal: int = 0,
    stream: int = 0,
    tag: str = "w",
) -> WorldInstance:
    """Sample a random world.

    The task count and workspace side are drawn uniformly from their ranges,
    then every agent and task position uniformly on the square.  ``stream``
    separates seed namespaces (training vs. validation presets) so identical
    seeds never collide across datasets.

    The generated instance is always coverable: a capacity rule that would
    leave tasks unservable is raised to ``ceil(N_t / N_u)``.
    """
    if n_agents < 1:
        raise ValueError("n_agents must be >= 1")
    _check_range("task count", task_count_range)
    _check_range("side", side_range)
    if task_count_range[0] < 1:
        raise ValueError("task count range must start at >= 1")
    if side_range[0] <= 0:
        raise ValueError("side range must be positive")

    rng = np.random.default_rng([stream, seed, ordinal])
    n_tasks = int(rng.integers(task_count_range[0], task_count_range[1] + 1))
    lo, hi = side_range
    side = float(lo) if lo == hi else float(rng.uniform(lo, hi))
    agents = rng.uniform(0.0, side, size=(n_agents, 2))
    tasks = rng.uniform(0.0, side, size=(n_tasks, 2))

    if capacity_rule is None:
        capacity_rule = unconstrained
    elif isinstance(capacity_rule, int):
        capacity_rule = fixed_capacity(capacity_rule)
    capacity = max(int(capacity_rule(n_agents, n_tasks)), math.ceil(n_tasks / n_agents))

    return WorldInstance(
        id=f"{tag}-{seed}-{ordinal}",
        workspace_side=side,
        agents=agents,
        tasks=tasks,
        capacity=capacity,
    )


def generate_dataset(
    seed: int,
    count: int,
    n_agents: int,
    task_count_range: tuple[int, int] = (10, 20),
    side_range: tuple[float, float] = (25.0, 55.0),
    capacity_rule: CapacityRule | int | None = None,
    *,
    stream: int = 0,
    tag: str = "w",
) -> list[WorldInstance]:
    return [
        generate_world(
            seed,
            n_agents,
            task_count_range,
            side_range,
            capacity_rule,
            ordinal=k,
            stream=stream,
            tag=tag,
        )
        for k in range(count)
    ]


# -- route geometry ---------------------------------------------------------


def _check_path(path: Path, world: WorldInstance) -> list[int]:
    out = [int(j) for j in path]
    if any(j < 0 or j >= world.n_tasks for j in out):
        raise ValueError(f"path {out} has a task index outside [0, {world.n_tasks})")
    if len(set(out)) != len(out):
        raise ValueError(f"path {out} repeats a task")
    return out


def route_points(agent_pos: Point2 | np.ndarray, path: Path, world: WorldInstance) -> np.ndarray:
    start = np.asarray(agent_pos, dtype=np.float64).reshape(1, 2)
    if len(path) == 0:
        return start
    return np.vstack([start, world.tasks[list(path)]])


def path_length(agent_pos: Point2 | np.ndarray, path: Path, world: WorldInstance) -> float:
    """Length of the open route ``agent -> path[0] -> ... -> path[-1]``."""
    path = _check_path(path, world)
    if not path:
        return 0.0
    pts = route_points(agent_pos, path, world)
    return float(np.sqrt((np.diff(pts, axis=0) ** 2).sum(-1)).sum())


def insertion_costs(route: np.ndarray, candidates: np.ndarray) -> np.ndarray:
    """Length increase for inserting each candidate at each slot of a route.

    ``route`` holds the route vertices starting with the agent, shape (k+1, 2).
    Returns shape (n_candidates, k+1); column ``n`` is insertion before the
    ``n``-th task, and the last column appends at the end.
    """
    d = np.sqrt(((candidates[:, None, :] - route[None, :, :]) ** 2).sum(-1))
    if len(route) == 1:
        return d
    legs = np.sqrt((np.diff(route, axis=0) ** 2).sum(-1))
    inner = d[:, :-1] + d[:, 1:] - legs[None, :]
    return np.concatenate([inner, d[:, -1:]], axis=1)


def cheapest_insertion(
    agent_pos: Point2 | np.ndarray, path: Path, task: int, world: WorldInstance
) -> tuple[int, float]:
    """Best slot to insert ``task`` into ``path`` and the resulting length increase.

    Ties go to the smallest slot.
    """
    path = _check_path(path, world)
    if not 0 <= task < world.n_tasks:
        raise ValueError(f"task {task} outside [0, {world.n_tasks})")
    if task in path:
        raise ValueError(f"task {task} already in path")
    if len(path) >= world.capacity:
        raise CapacityError(f"path already holds capacity={world.capacity} tasks")
    costs = insertion_costs(route_points(agent_pos, path, world), world.tasks[task : task + 1])[0]
    slot = int(np.argmin(costs))
    # rounding can produce -1e-16 on collinear inserts
    return slot, max(float(costs[slot]), 0.0)


def all_insertions(
    agent_pos: Point2 | np.ndarray, path: Path, world: WorldInstance
) -> tuple[np.ndarray, np.ndarray]:
    """Cheapest slot and length increase for every task at once.

    Entries for tasks already on the path are meaningless; callers mask them.
    """
    costs = insertion_costs(route_points(agent_pos, path, world), world.tasks)
    slots = np.argmin(costs, axis=1)
    deltas = np.maximum(costs[np.arange(len(costs)), slots], 0.0)
    return slots, deltas


def removal_savings(agent_pos: Point2 | np.ndarray, path: Path, world: WorldInstance) -> np.ndarray:
    """Length saved by dropping each path task; aligned with ``path``."""
    if len(path) == 0:
        return np.zeros(0)
    pts = route_points(agent_pos, path, world)
    legs = np.sqrt((np.diff(pts, axis=0) ** 2).sum(-1))
    out = legs.copy()
    out[:-1] += legs[1:]
    if len(path) > 1:
        skip = np.sqrt(((pts[2:] - pts[:-2]) ** 2).sum(-1))
        out[:-1] -= skip
    return np.maximum(out, 0.0)


# -- JSONL datasets ---------------------------------------------------------


def write_worlds(path, worlds: Iterable[WorldInstance]) -> None:
    from .io import atomic_write_text

    text = "".join(json.dumps(w.to_dict()) + "\n" for w in worlds)
    atomic_write_text(path, text)


def iter_worlds(path) -> Iterator[WorldInstance]:
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                yield WorldInstance.from_dict(json.loads(line))
            except (ValueError, TypeError) as exc:
                raise ValueError(f"{path}:{lineno}: invalid world record: {exc}") from exc


def read_worlds(path) -> list[WorldInstance]:
    return list(iter_worlds(path))
