"""Validation datasets, percent-optimality records and their summaries."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .bidding.checkpoint import load_policy
from .bidding.policy import ClassicBidder, PolicyParameters, make_bidder
from .consensus import RunConfig, run_allocation
from .io import atomic_write_text
from .oracle import OracleCache, SolverBudget, map_jobs
from .world import WorldInstance, generate_dataset

ETA_TOL = 1e-9

TRAINING_PRESET = {"n_agents": 5, "task_count_range": (10, 20), "count": 1000, "stream": 1, "tag": "train"}
VALIDATION_SIZES = {"val5": 5, "val10": 10, "val15": 15, "val20": 20}
SIDE_RANGE = (25.0, 55.0)

CSV_FIELDS = (
    "world_id",
    "bidder",
    "n_agents",
    "n_tasks",
    "d_star",
    "d_hat",
    "eta",
    "iterations",
    "timed_out",
    "oracle_exact",
    "uncovered",
)


def percent_optimality(d_star: float, d_hat: float) -> float:
    """``100 * d_star / d_hat``; both distances must be positive."""
    if not (d_star > 0.0 and d_hat > 0.0):
        raise ValueError(f"percent optimality needs positive distances, got d_star={d_star}, d_hat={d_hat}")
    return 100.0 * d_star / d_hat


# -- datasets -------------------------------------------------------------------------


def preset_dataset(name: str, seed: int = 0, count: int | None = None) -> list[WorldInstance]:
    if name == "training":
        p = TRAINING_PRESET
        return generate_dataset(
            seed, count or p["count"], p["n_agents"], p["task_count_range"], SIDE_RANGE, stream=p["stream"], tag=p["tag"]
        )
    if name not in VALIDATION_SIZES:
        raise ValueError(f"unknown preset {name!r}; expected training or one of {sorted(VALIDATION_SIZES)}")
    n = VALIDATION_SIZES[name]
    return generate_dataset(seed, count or 1000, n, (2 * n, 4 * n), SIDE_RANGE, stream=100 + n, tag=name)


def make_validation_sets(seed: int = 0, count: int = 1000) -> dict[str, list[WorldInstance]]:
    """The four held-out sets, one per swarm size, with 2 to 4 tasks per agent."""
    return {name: preset_dataset(name, seed, count) for name in VALIDATION_SIZES}


# -- records ----------------------------------------------------------------------------


@dataclass(frozen=True)
class EvalRecord:
    world_id: str
    bidder: str
    n_agents: int
    n_tasks: int
    d_star: float
    d_hat: float
    eta: float | None
    iterations: int
    timed_out: bool
    oracle_exact: bool
    uncovered: int = 0

    @property
    def counted(self) -> bool:
        """Whether the record enters the η aggregates."""
        return not self.timed_out and self.eta is not None

    def to_row(self) -> dict:
        row = asdict(self)
        row["eta"] = "" if self.eta is None else repr(self.eta)
        row["d_star"] = repr(self.d_star)
        row["d_hat"] = repr(self.d_hat)
        row["timed_out"] = int(self.timed_out)
        row["oracle_exact"] = int(self.oracle_exact)
        return row

    @classmethod
    def from_row(cls, row: dict) -> "EvalRecord":
        return cls(
            world_id=row["world_id"],
            bidder=row["bidder"],
            n_agents=int(row["n_agents"]),
            n_tasks=int(row["n_tasks"]),
            d_star=float(row["d_star"]),
            d_hat=float(row["d_hat"]),
            eta=float(row["eta"]) if row["eta"] != "" else None,
            iterations=int(row["iterations"]),
            timed_out=bool(int(row["timed_out"])),
            oracle_exact=bool(int(row["oracle_exact"])),
            uncovered=int(row.get("uncovered") or 0),
        )


def make_record(world: WorldInstance, bidder: str, result, oracle) -> EvalRecord:
    d_hat = result.team_distance(world)
    uncovered = result.uncovered(world.n_tasks)
    eta = None
    # η only describes complete assignments; partial ones would score above 100%
    if uncovered == 0 and d_hat > 0.0 and oracle.total_distance > 0.0:
        eta = percent_optimality(oracle.total_distance, d_hat)
    elif uncovered == 0 and d_hat == 0.0 and oracle.total_distance == 0.0:
        eta = 100.0
    return EvalRecord(
        world_id=world.id,
        bidder=bidder,
        n_agents=world.n_agents,
        n_tasks=world.n_tasks,
        d_star=oracle.total_distance,
        d_hat=d_hat,
        eta=eta,
        iterations=result.iterations,
        timed_out=result.timed_out,
        oracle_exact=oracle.proof_of_optimality,
        uncovered=uncovered,
    )


def load_bidders(specs: Sequence[str | tuple | PolicyParameters]) -> list[tuple[str, object]]:
    """Resolve bidder specs to ``(name, bidder)`` pairs before any run starts.

    A spec is ``"classic"``, a checkpoint path, a ``(name, path)`` pair, a
    ``(name, bidder)`` pair, or an in-memory policy.  Corrupt checkpoints
    fail here.
    """
    out = []
    for spec in specs:
        if isinstance(spec, PolicyParameters):
            out.append((spec.arch, make_bidder(spec)))
        elif spec == "classic":
            out.append(("classic", ClassicBidder()))
        elif isinstance(spec, tuple) and hasattr(spec[1], "bid"):
            out.append(spec)
        else:
            name, path = spec if isinstance(spec, tuple) else (None, spec)
            policy = load_policy(path)
            name = name or policy.arch
            out.append((name, make_bidder(policy, name)))
    names = [n for n, _ in out]
    if len(set(names)) != len(names):
        raise ValueError(f"bidder names must be unique, got {names}")
    return out


def _eval_one(world: WorldInstance, name: str, bidder, config: RunConfig, oracle) -> EvalRecord:
    result = run_allocation(world, bidder, config)
    return make_record(world, name, result, oracle)


def run_validation(
    dataset: Sequence[WorldInstance],
    bidders: Sequence,
    config: RunConfig | None = None,
    oracle_budget: SolverBudget | None = None,
    oracle_cache: OracleCache | None = None,
    record_cache: dict[tuple[str, str], EvalRecord] | None = None,
    jobs: int = 1,
) -> list[EvalRecord]:
    """Deterministic run of every bidder on every world, scored against the oracle.

    Records come back ordered by world, then bidder.  Entries already in
    ``record_cache`` (keyed by ``(world_id, bidder)``) are reused.
    """
    config = config or RunConfig()
    config = RunConfig(
        max_iterations=config.max_iterations,
        topology=config.topology,
        convergence_window=config.convergence_window,
        record_snapshots=False,
    )
    resolved = load_bidders(bidders)
    cache = oracle_cache if oracle_cache is not None else OracleCache()
    cache.solve_missing(dataset, oracle_budget or SolverBudget(), jobs)
    record_cache = record_cache if record_cache is not None else {}
    todo = [
        (w, name, bidder, config, cache[w.id])
        for w in dataset
        for name, bidder in resolved
        if (w.id, name) not in record_cache
    ]
    for rec in map_jobs(_eval_one, todo, jobs):
        record_cache[(rec.world_id, rec.bidder)] = rec
    return [record_cache[(w.id, name)] for w in dataset for name, _ in resolved]


# -- aggregation --------------------------------------------------------------------------


@dataclass(frozen=True)
class GroupStats:
    bidder: str
    n_agents: int
    count: int
    eta_count: int
    timeouts: int
    incomplete: int  # converged without covering every task
    median_eta: float | None
    q1_eta: float | None
    q3_eta: float | None
    min_eta: float | None
    max_eta: float | None
    mean_eta: float | None
    p95_iterations: float
    max_iterations: int
    exact_oracle: str  # "exact", "best_known" or "mixed"


@dataclass
class SummaryStats:
    groups: dict[tuple[str, int], GroupStats] = field(default_factory=dict)

    def __getitem__(self, key: tuple[str, int]) -> GroupStats:
        return self.groups[key]

    def to_dict(self) -> dict:
        return {f"{b}/{n}": asdict(g) for (b, n), g in sorted(self.groups.items())}


def _quantiles(values: np.ndarray) -> tuple[float, float, float]:
    q1, med, q3 = np.percentile(values, [25, 50, 75])
    return float(q1), float(med), float(q3)


def summarize(records: Sequence[EvalRecord]) -> SummaryStats:
    """Per (bidder, swarm size) η order statistics over non-timeout records."""
    if not records:
        raise ValueError("summarize needs at least one record")
    grouped: dict[tuple[str, int], list[EvalRecord]] = {}
    for r in records:
        grouped.setdefault((r.bidder, r.n_agents), []).append(r)
    stats = SummaryStats()
    for key in sorted(grouped):
        recs = grouped[key]
        etas = np.array([r.eta for r in recs if r.counted], dtype=np.float64)
        iters = np.array([r.iterations for r in recs], dtype=np.float64)
        exact = {r.oracle_exact for r in recs}
        label = "mixed" if len(exact) > 1 else ("exact" if exact == {True} else "best_known")
        if len(etas):
            q1, med, q3 = _quantiles(etas)
            eta_stats = dict(
                median_eta=med, q1_eta=q1, q3_eta=q3, min_eta=float(etas.min()), max_eta=float(etas.max()),
                mean_eta=float(etas.mean()),
            )
        else:
            eta_stats = dict(median_eta=None, q1_eta=None, q3_eta=None, min_eta=None, max_eta=None, mean_eta=None)
        stats.groups[key] = GroupStats(
            bidder=key[0],
            n_agents=key[1],
            count=len(recs),
            eta_count=len(etas),
            timeouts=sum(r.timed_out for r in recs),
            incomplete=sum(not r.timed_out and r.eta is None for r in recs),
            p95_iterations=float(np.percentile(iters, 95)),
            max_iterations=int(iters.max()),
            exact_oracle=label,
            **eta_stats,
        )
    return stats


def box_plot_data(records: Sequence[EvalRecord]) -> dict:
    """Whisker data (1.5 IQR rule) for η and iterations per (bidder, swarm size)."""
    out = {}
    stats = summarize(records) if records else SummaryStats()
    for (bidder, n), g in stats.groups.items():
        recs = [r for r in records if r.bidder == bidder and r.n_agents == n]
        entry = {"bidder": bidder, "n_agents": n, "count": g.count, "timeouts": g.timeouts, "oracle": g.exact_oracle}
        for metric, values in (
            ("eta", [r.eta for r in recs if r.counted]),
            ("iterations", [r.iterations for r in recs]),
        ):
            v = np.array(values, dtype=np.float64)
            if not len(v):
                entry[metric] = None
                continue
            q1, med, q3 = _quantiles(v)
            lo, hi = q1 - 1.5 * (q3 - q1), q3 + 1.5 * (q3 - q1)
            inside = v[(v >= lo) & (v <= hi)]
            entry[metric] = {
                "min": float(inside.min()),
                "q1": q1,
                "median": med,
                "q3": q3,
                "max": float(inside.max()),
                "outliers": sorted(float(x) for x in v[(v < lo) | (v > hi)]),
            }
        out[f"{bidder}/{n}"] = entry
    return out


# -- files ----------------------------------------------------------------------------------


def records_to_csv(records: Iterable[EvalRecord]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=CSV_FIELDS, lineterminator="\n")
    writer.writeheader()
    for r in records:
        writer.writerow(r.to_row())
    return buf.getvalue()


def write_records(path, records: Iterable[EvalRecord]) -> None:
    atomic_write_text(path, records_to_csv(records))


def read_records(path) -> list[EvalRecord]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = set(CSV_FIELDS[:10]) - set(reader.fieldnames or ())
        if missing:
            raise ValueError(f"{path}: missing columns {sorted(missing)}")
        return [EvalRecord.from_row(row) for row in reader]


def _json_default(x):
    if isinstance(x, float) and not math.isfinite(x):
        return None
    raise TypeError(f"cannot serialise {type(x)}")


def export_report(stats: SummaryStats, records: Sequence[EvalRecord], out_dir) -> dict[str, Path]:
    """Write ``records.csv``, ``summary.json`` and ``boxplot.json`` into ``out_dir``."""
    out_dir = Path(out_dir)
    paths = {
        "records": out_dir / "records.csv",
        "summary": out_dir / "summary.json",
        "boxplot": out_dir / "boxplot.json",
    }
    write_records(paths["records"], records)
    atomic_write_text(paths["summary"], json.dumps(stats.to_dict(), indent=2, sort_keys=True, default=_json_default) + "\n")
    atomic_write_text(
        paths["boxplot"], json.dumps(box_plot_data(records), indent=2, sort_keys=True, default=_json_default) + "\n"
    )
    return paths
