"""Min-sum reference solutions for a world.

Every agent drives an open route from its own position; the objective is the
sum of route lengths, each route holding at most ``capacity`` tasks and every
task appearing in exactly one route.

* :func:`solve_exact` - arc-based MILP (HiGHS) with lazily added subtour
  cuts; a native depth-first branch-and-bound, pruned with spanning-tree and
  assignment bounds, is available as a solver-free alternative.
* :func:`brute_force` - exhaustive enumeration, used as an independent check.
* :func:`best_known` - multi-start insertion plus local search for worlds too
  large to solve exactly.
"""

from __future__ import annotations

import itertools
import json
import math
import time
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from .io import atomic_write_text, iter_jsonl
from .world import WorldInstance, path_length

TOL = 1e-9
BRUTE_FORCE_LIMIT = 8


@dataclass(frozen=True)
class OptimalAssignment:
    routes: tuple[tuple[int, ...], ...]
    total_distance: float
    proof_of_optimality: bool
    method: str = ""

    def owners(self, n_tasks: int) -> np.ndarray:
        owner = np.full(n_tasks, -1, dtype=np.int64)
        for i, route in enumerate(self.routes):
            owner[list(route)] = i
        return owner

    def to_record(self, world_id: str) -> dict:
        return {
            "world_id": world_id,
            "routes": [list(r) for r in self.routes],
            "distance": self.total_distance,
            "exact": self.proof_of_optimality,
            "method": self.method,
        }

    @classmethod
    def from_record(cls, record: dict) -> "OptimalAssignment":
        return cls(
            routes=tuple(tuple(int(j) for j in r) for r in record["routes"]),
            total_distance=float(record["distance"]),
            proof_of_optimality=bool(record["exact"]),
            method=record.get("method", ""),
        )


@dataclass(frozen=True)
class SolverBudget:
    max_nodes: int = 5_000_000
    time_limit: float = 600.0
    exact_threshold: int = 100
    restarts: int = 8
    seed: int = 0

    def __post_init__(self) -> None:
        if self.max_nodes < 1 or self.time_limit <= 0 or self.exact_threshold < 0 or self.restarts < 1:
            raise ValueError("solver budget limits must be positive")


def check_assignment(world: WorldInstance, routes: Sequence[Sequence[int]]) -> None:
    if len(routes) != world.n_agents:
        raise ValueError(f"{len(routes)} routes for {world.n_agents} agents")
    seen = [j for r in routes for j in r]
    if sorted(seen) != list(range(world.n_tasks)):
        raise ValueError("routes must cover every task exactly once")
    if any(len(r) > world.capacity for r in routes):
        raise ValueError("route exceeds capacity")


def total_distance(world: WorldInstance, routes: Sequence[Sequence[int]]) -> float:
    return sum(path_length(world.agents[i], r, world) for i, r in enumerate(routes))


def _assignment(world, routes, proof, method) -> OptimalAssignment:
    routes = tuple(tuple(int(j) for j in r) for r in routes)
    check_assignment(world, routes)
    return OptimalAssignment(routes, total_distance(world, routes), proof, method)


def _node_matrix(world: WorldInstance) -> np.ndarray:
    """Distances over nodes: agents first (0..N_u-1), then tasks."""
    pts = np.vstack([world.agents, world.tasks])
    return np.sqrt(((pts[:, None, :] - pts[None, :, :]) ** 2).sum(-1))


def _better(cost, routes, best_cost, best_routes) -> bool:
    if cost < best_cost - TOL:
        return True
    return abs(cost - best_cost) <= TOL and (best_routes is None or routes < best_routes)


# -- exhaustive enumeration -------------------------------------------------------


def brute_force(world: WorldInstance) -> OptimalAssignment:
    """Try every task-to-agent labelling and every order within each route."""
    n, m = world.n_tasks, world.n_agents
    if n > BRUTE_FORCE_LIMIT:
        raise ValueError(f"brute force refuses N_t={n} > {BRUTE_FORCE_LIMIT}")
    D = _node_matrix(world)

    # best ordering of every subset for every agent, by trying all permutations
    best_order: dict[tuple[int, tuple[int, ...]], tuple[float, tuple[int, ...]]] = {}
    for a in range(m):
        for size in range(n + 1):
            if size > world.capacity:
                break
            for subset in itertools.combinations(range(n), size):
                top = (math.inf, ())
                for perm in itertools.permutations(subset):
                    cost, prev = 0.0, a
                    for j in perm:
                        cost += D[prev, m + j]
                        prev = m + j
                    if cost < top[0] - TOL or (abs(cost - top[0]) <= TOL and perm < top[1]):
                        top = (cost, perm)
                best_order[a, subset] = top

    best_cost, best_routes = math.inf, None
    for labels in itertools.product(range(m), repeat=n):
        members = [[] for _ in range(m)]
        for j, a in enumerate(labels):
            members[a].append(j)
        if any(len(g) > world.capacity for g in members):
            continue
        cost = 0.0
        routes = []
        for a in range(m):
            c, order = best_order[a, tuple(members[a])]
            cost += c
            routes.append(order)
        routes = tuple(routes)
        if _better(cost, routes, best_cost, best_routes):
            best_cost, best_routes = cost, routes
    return _assignment(world, best_routes, True, "brute_force")


# -- bounds -----------------------------------------------------------------------


def mst_bound(D: np.ndarray, tails: Sequence[int], remaining: Sequence[int]) -> float:
    """Spanning-tree bound on routing ``remaining`` from the open ``tails``.

    Contracting every tail into one root turns any completion (a set of paths
    hanging off the tails) into a spanning tree of root + remaining tasks, so
    the minimum spanning tree weight never exceeds the completion cost.
    """
    if len(remaining) == 0:
        return 0.0
    rem = np.asarray(remaining)
    key = D[np.asarray(tails)][:, rem].min(0)
    sub = D[np.ix_(rem, rem)]
    in_tree = np.zeros(len(rem), dtype=bool)
    total = 0.0
    for _ in range(len(rem)):
        cand = np.where(in_tree, np.inf, key)
        v = int(np.argmin(cand))
        total += cand[v]
        in_tree[v] = True
        key = np.minimum(key, sub[v])
    return float(total)


def assignment_bound(D: np.ndarray, tails: Sequence[int], remaining: Sequence[int]) -> float:
    """Bound from giving every remaining task its own distinct predecessor."""
    if len(remaining) == 0:
        return 0.0
    rem = np.asarray(remaining)
    preds = np.concatenate([np.asarray(tails), rem])
    cost = D[np.ix_(rem, preds)].copy()
    k = len(tails)
    cost[np.arange(len(rem)), k + np.arange(len(rem))] = 1e18
    r, c = linear_sum_assignment(cost)
    return float(cost[r, c].sum())


def completion_bound(D, tails, remaining) -> float:
    return max(mst_bound(D, tails, remaining), assignment_bound(D, tails, remaining))


# -- branch and bound -----------------------------------------------------------------


class _Search:
    def __init__(self, world: WorldInstance, budget: SolverBudget, incumbent: OptimalAssignment | None):
        self.m = world.n_agents
        self.n = world.n_tasks
        self.cap = world.capacity
        self.D = _node_matrix(world)
        self.budget = budget
        self.nodes = 0
        self.deadline = time.monotonic() + budget.time_limit
        self.exhausted = False
        if incumbent is not None:
            self.best_cost = incumbent.total_distance
            self.best_routes = incumbent.routes
        else:
            self.best_cost, self.best_routes = math.inf, None

    def run(self) -> None:
        remaining = list(range(self.m, self.m + self.n))
        self._expand(0, 0, [], [], remaining, 0.0)

    def _expand(self, agent, cur, route, done, remaining, cost) -> None:
        self.nodes += 1
        if self.nodes > self.budget.max_nodes or (
            self.nodes % 1024 == 0 and time.monotonic() > self.deadline
        ):
            self.exhausted = True
        if self.exhausted:
            return
        if not remaining:
            routes = tuple(done) + (tuple(j - self.m for j in route),) + ((),) * (self.m - agent - 1)
            if _better(cost, routes, self.best_cost, self.best_routes):
                self.best_cost, self.best_routes = cost, routes
            return

        children = []
        later = list(range(agent + 1, self.m))
        if len(route) < self.cap:
            tails = [None] + later
            for idx, j in enumerate(remaining):
                step = cost + self.D[cur, j]
                if step > self.best_cost + TOL:
                    continue
                rest = remaining[:idx] + remaining[idx + 1 :]
                tails[0] = j
                lb = step + completion_bound(self.D, tails, rest)
                if lb <= self.best_cost + TOL:
                    children.append((lb, 0, j, rest))
        if later and (self.m - agent - 1) * self.cap >= len(remaining):
            lb = cost + completion_bound(self.D, later, remaining)
            if lb <= self.best_cost + TOL:
                children.append((lb, 1, -1, remaining))
        children.sort(key=lambda c: (c[0], c[1], c[2]))
        for lb, close, j, rest in children:
            if lb > self.best_cost + TOL:
                break
            if close:
                self._expand(agent + 1, agent + 1, [], done + [tuple(t - self.m for t in route)], rest, cost)
            else:
                self._expand(agent, j, route + [j], done, rest, cost + self.D[cur, j])


def root_bound(world: WorldInstance) -> float:
    D = _node_matrix(world)
    return completion_bound(D, list(range(world.n_agents)), list(range(world.n_agents, world.n_agents + world.n_tasks)))


def branch_and_bound(world: WorldInstance, budget: SolverBudget | None = None) -> OptimalAssignment:
    """Native depth-first search seeded with the :func:`best_known` incumbent.

    Exact but slow beyond ~14 tasks; kept as a solver-free second route.
    """
    budget = budget or SolverBudget()
    search = _Search(world, budget, best_known(world, budget))
    search.run()
    proof = not search.exhausted
    return _assignment(world, search.best_routes, proof, "branch_and_bound")


# -- MILP with lazy subtour elimination --------------------------------------------------


def _milp_routes(world: WorldInstance, D: np.ndarray, x: np.ndarray, arcs: np.ndarray):
    """Follow successor arcs from every agent; also return leftover task cycles."""
    m, n = world.n_agents, world.n_tasks
    succ = {int(u): int(v) for u, v in arcs[x > 0.5]}
    routes, reached = [], set()
    for a in range(m):
        route, u = [], a
        while u in succ and len(route) <= n:
            u = succ[u]
            route.append(u - m)
            reached.add(u)
        routes.append(route)
    cycles, seen = [], set(reached)
    for start in range(m, m + n):
        if start in seen:
            continue
        cyc, u = [], start
        while u not in cyc:
            cyc.append(u)
            u = succ[u]
        seen.update(cyc)
        cycles.append(cyc)
    return routes, cycles


def milp_solve(world: WorldInstance, budget: SolverBudget | None = None):
    """Arc formulation solved by HiGHS, adding subtour cuts until none remain.

    Returns (routes, proved) or ``None`` when the solver gives up.
    """
    from scipy.optimize import Bounds, LinearConstraint, milp
    from scipy.sparse import coo_matrix

    budget = budget or SolverBudget()
    m, n, cap = world.n_agents, world.n_tasks, world.capacity
    D = _node_matrix(world)
    u_idx, v_idx = np.meshgrid(np.arange(m + n), np.arange(m, m + n), indexing="ij")
    keep = u_idx != v_idx
    arcs = np.stack([u_idx[keep], v_idx[keep]], axis=1)
    n_arcs = len(arcs)
    cost = D[arcs[:, 0], arcs[:, 1]]
    e = np.arange(n_arcs)

    # rows 0..n-1: in-degree of every task == 1; rows n..: out-degree of every node <= 1
    deg = coo_matrix(
        (np.ones(2 * n_arcs), (np.concatenate([arcs[:, 1] - m, n + arcs[:, 0]]), np.concatenate([e, e]))),
        shape=(n + m + n, n_arcs),
    )
    n_vars = n_arcs
    integrality = np.ones(n_arcs)
    lower, upper = np.zeros(n_arcs), np.ones(n_arcs)
    if cap < n:
        # route positions u_j in [1, cap]: u_j - u_k + cap * x_jk <= cap - 1 on task-task arcs
        n_vars = n_arcs + n
        integrality = np.concatenate([integrality, np.zeros(n)])
        lower = np.concatenate([lower, np.ones(n)])
        upper = np.concatenate([upper, np.full(n, float(cap))])
        tt = np.flatnonzero(arcs[:, 0] >= m)
        r = np.arange(len(tt))
        mtz = coo_matrix(
            (
                np.concatenate([np.full(len(tt), float(cap)), np.ones(len(tt)), -np.ones(len(tt))]),
                (np.concatenate([r, r, r]), np.concatenate([tt, n_arcs + arcs[tt, 0] - m, n_arcs + arcs[tt, 1] - m])),
            ),
            shape=(len(tt), n_vars),
        )
    deg = coo_matrix((deg.data, (deg.row, deg.col)), shape=(deg.shape[0], n_vars))
    constraints = [
        LinearConstraint(deg.tocsr(), np.r_[np.ones(n), np.zeros(m + n)], np.r_[np.ones(n), np.ones(m + n)])
    ]
    if cap < n:
        constraints.append(LinearConstraint(mtz.tocsr(), -np.inf, cap - 1.0))
    c = np.concatenate([cost, np.zeros(n_vars - n_arcs)])

    deadline = time.monotonic() + budget.time_limit
    while True:
        remaining = deadline - time.monotonic()
        if remaining <= 0:
            return None
        res = milp(
            c,
            constraints=constraints,
            integrality=integrality,
            bounds=Bounds(lower, upper),
            options={"time_limit": remaining, "mip_rel_gap": 0.0, "node_limit": budget.max_nodes},
        )
        if res.x is None:
            return None
        routes, cycles = _milp_routes(world, D, res.x[:n_arcs], arcs)
        if not cycles:
            return routes, res.status == 0
        for cyc in cycles:
            inside = np.isin(arcs[:, 0], cyc) & np.isin(arcs[:, 1], cyc)
            row = np.zeros(n_vars)
            row[:n_arcs][inside] = 1.0
            constraints.append(LinearConstraint(row[None, :], -np.inf, len(cyc) - 1.0))


def solve_exact(world: WorldInstance, budget: SolverBudget | None = None, method: str = "milp") -> OptimalAssignment:
    """Optimal min-sum routes.

    ``method="milp"`` (default) solves an arc formulation with HiGHS, adding
    subtour cuts lazily; ``method="native"`` runs :func:`branch_and_bound`.
    If the budget runs out the best feasible routes are returned with
    ``proof_of_optimality=False``.
    """
    budget = budget or SolverBudget()
    if method == "native":
        return branch_and_bound(world, budget)
    if method != "milp":
        raise ValueError(f"unknown exact method {method!r}")
    out = milp_solve(world, budget)
    if out is None:
        fallback = best_known(world, budget)
        return OptimalAssignment(fallback.routes, fallback.total_distance, False, "milp_timeout")
    routes, proved = out
    return _assignment(world, routes, proved, "milp")


# -- heuristic upper bound ------------------------------------------------------------


def _route_cost(D: np.ndarray, agent: int, route: Sequence[int], m: int) -> float:
    cost, prev = 0.0, agent
    for j in route:
        cost += D[prev, m + j]
        prev = m + j
    return cost


class _LocalSearch:
    """Relocate, swap, 2-opt and tail-exchange moves over open routes."""

    def __init__(self, world: WorldInstance, D: np.ndarray):
        self.world = world
        self.D = D
        self.m = world.n_agents
        self.cap = world.capacity

    def cost(self, a: int, route: Sequence[int]) -> float:
        return _route_cost(self.D, a, route, self.m)

    def construct(self, order: Sequence[int]) -> list[list[int]]:
        """Cheapest insertion of tasks in ``order`` over all agents and slots."""
        routes: list[list[int]] = [[] for _ in range(self.m)]
        for j in order:
            best = (math.inf, -1, -1)
            for a, r in enumerate(routes):
                if len(r) >= self.cap:
                    continue
                delta, slot = self._best_slot(a, r, j)
                if delta < best[0] - TOL:
                    best = (delta, a, slot)
            routes[best[1]].insert(best[2], j)
        return routes

    def construct_global(self) -> list[list[int]]:
        """Repeatedly insert the globally cheapest (task, agent, slot)."""
        routes: list[list[int]] = [[] for _ in range(self.m)]
        left = set(range(self.world.n_tasks))
        while left:
            best = (math.inf, -1, -1, -1)
            for j in sorted(left):
                for a, r in enumerate(routes):
                    if len(r) >= self.cap:
                        continue
                    delta, slot = self._best_slot(a, r, j)
                    if delta < best[0] - TOL:
                        best = (delta, j, a, slot)
            _, j, a, slot = best
            routes[a].insert(slot, j)
            left.remove(j)
        return routes

    def _best_slot(self, a: int, r: Sequence[int], j: int) -> tuple[float, int]:
        D, m = self.D, self.m
        nodes = [a] + [m + t for t in r]
        q = m + j
        best, slot = D[nodes[-1], q], len(r)
        for s in range(len(r)):
            d = D[nodes[s], q] + D[q, nodes[s + 1]] - D[nodes[s], nodes[s + 1]]
            if d < best - TOL:
                best, slot = d, s
        return best, slot

    def improve(self, routes: list[list[int]]) -> list[list[int]]:
        improved = True
        while improved:
            improved = False
            for move in (self._two_opt, self._relocate, self._swap, self._tail_exchange):
                if move(routes):
                    improved = True
        return routes

    def _two_opt(self, routes) -> bool:
        D, m = self.D, self.m
        changed = False
        for a, r in enumerate(routes):
            again = True
            while again and len(r) >= 2:
                again = False
                nodes = [a] + [m + t for t in r]
                k = len(nodes)
                for i in range(1, k - 1):
                    for e in range(i + 1, k):
                        # reverse nodes[i..e]
                        before = D[nodes[i - 1], nodes[i]] + (D[nodes[e], nodes[e + 1]] if e + 1 < k else 0.0)
                        after = D[nodes[i - 1], nodes[e]] + (D[nodes[i], nodes[e + 1]] if e + 1 < k else 0.0)
                        if after < before - 1e-10:
                            r[i - 1 : e] = r[i - 1 : e][::-1]
                            again = changed = True
                            break
                    if again:
                        break
        return changed

    def _relocate(self, routes) -> bool:
        changed = False
        for a in range(self.m):
            pos = 0
            while pos < len(routes[a]):
                j = routes[a][pos]
                base = self.cost(a, routes[a])
                without = routes[a][:pos] + routes[a][pos + 1 :]
                saving = base - self.cost(a, without)
                best = (saving - 1e-10, -1, -1)
                for b, r in enumerate(routes):
                    rb = without if b == a else r
                    if b != a and len(rb) >= self.cap:
                        continue
                    delta, slot = self._best_slot(b, rb, j)
                    if delta < best[0]:
                        best = (delta, b, slot)
                if best[1] >= 0:
                    routes[a] = without
                    routes[best[1]].insert(best[2], j)
                    changed = True
                    if best[1] != a:
                        continue
                pos += 1
        return changed

    def _swap(self, routes) -> bool:
        changed = False
        m = self.m
        for a in range(m):
            for b in range(a + 1, m):
                ra, rb = routes[a], routes[b]
                if not ra or not rb:
                    continue
                base = self.cost(a, ra) + self.cost(b, rb)
                done = False
                for x in range(len(ra)):
                    for y in range(len(rb)):
                        na = ra[:x] + [rb[y]] + ra[x + 1 :]
                        nb = rb[:y] + [ra[x]] + rb[y + 1 :]
                        if self.cost(a, na) + self.cost(b, nb) < base - 1e-10:
                            routes[a], routes[b] = na, nb
                            changed = done = True
                            break
                    if done:
                        break
        return changed

    def _tail_exchange(self, routes) -> bool:
        changed = False
        m, cap = self.m, self.cap
        for a in range(m):
            for b in range(a + 1, m):
                ra, rb = routes[a], routes[b]
                base = self.cost(a, ra) + self.cost(b, rb)
                done = False
                for x in range(len(ra) + 1):
                    for y in range(len(rb) + 1):
                        na = ra[:x] + rb[y:]
                        nb = rb[:y] + ra[x:]
                        if len(na) > cap or len(nb) > cap:
                            continue
                        if self.cost(a, na) + self.cost(b, nb) < base - 1e-10:
                            routes[a], routes[b] = na, nb
                            changed = done = True
                            break
                    if done:
                        break
        return changed


def best_known(world: WorldInstance, budget: SolverBudget | None = None) -> OptimalAssignment:
    """Best of several insertion starts, each polished by local search.

    The first start inserts globally cheapest first; the rest use random task
    orders drawn from ``budget.seed``.  Never proves optimality.
    """
    budget = budget or SolverBudget()
    D = _node_matrix(world)
    ls = _LocalSearch(world, D)
    rng = np.random.default_rng([budget.seed, 7])
    best_cost, best_routes = math.inf, None
    for start in range(budget.restarts):
        if start == 0:
            routes = ls.construct_global()
        else:
            routes = ls.construct(rng.permutation(world.n_tasks).tolist())
        routes = ls.improve(routes)
        key = tuple(tuple(r) for r in routes)
        cost = sum(ls.cost(a, r) for a, r in enumerate(routes))
        if _better(cost, key, best_cost, best_routes):
            best_cost, best_routes = cost, key
    return _assignment(world, best_routes, False, "best_known")


def solve(world: WorldInstance, budget: SolverBudget | None = None) -> OptimalAssignment:
    """Exact when the world is small enough for ``budget.exact_threshold``, else best-known."""
    budget = budget or SolverBudget()
    if world.n_tasks <= budget.exact_threshold:
        return solve_exact(world, budget)
    return best_known(world, budget)


# -- cache ------------------------------------------------------------------------------


class OracleCache:
    """World id -> reference solution, persisted as JSONL."""

    def __init__(self, entries: dict[str, OptimalAssignment] | None = None):
        self.entries: dict[str, OptimalAssignment] = dict(entries or {})

    def __contains__(self, world_id: str) -> bool:
        return world_id in self.entries

    def __getitem__(self, world_id: str) -> OptimalAssignment:
        return self.entries[world_id]

    def __len__(self) -> int:
        return len(self.entries)

    def get(self, world_id: str) -> OptimalAssignment | None:
        return self.entries.get(world_id)

    def put(self, world_id: str, solution: OptimalAssignment) -> None:
        self.entries[world_id] = solution

    @classmethod
    def load(cls, path) -> "OracleCache":
        return cls({r["world_id"]: OptimalAssignment.from_record(r) for r in iter_jsonl(path)})

    def save(self, path, order: Iterable[str] | None = None) -> None:
        ids = list(order) if order is not None else sorted(self.entries)
        text = "".join(json.dumps(self.entries[i].to_record(i), sort_keys=True) + "\n" for i in ids if i in self.entries)
        atomic_write_text(path, text)

    def solve_missing(self, worlds: Sequence[WorldInstance], budget: SolverBudget, jobs: int = 1) -> int:
        """Solve every world not yet cached; returns how many were solved."""
        todo = [w for w in worlds if w.id not in self.entries]
        for w, sol in zip(todo, map_jobs(solve, [(w, budget) for w in todo], jobs)):
            self.entries[w.id] = sol
        return len(todo)


def map_jobs(fn, arg_tuples: list[tuple], jobs: int = 1) -> list:
    """Ordered map, optionally over a process pool."""
    if jobs <= 1 or len(arg_tuples) <= 1:
        return [fn(*a) for a in arg_tuples]
    from multiprocessing import get_context

    with get_context("spawn").Pool(jobs) as pool:
        return pool.starmap(fn, arg_tuples, chunksize=1)
