"""``learncbba`` command line: gen, oracle, solve, train, eval, report."""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path
from typing import Sequence

from .bidding.checkpoint import CheckpointError, load_policy
from .bidding.policy import ARCHITECTURES, ClassicBidder, make_bidder
from .consensus import RunConfig, run_allocation
from .eval import (
    VALIDATION_SIZES,
    export_report,
    preset_dataset,
    read_records,
    run_validation,
    summarize,
    write_records,
)
from .io import write_jsonl
from .oracle import OracleCache, SolverBudget
from .rl.ppo import PPOConfig
from .rl.reward import RewardWeights
from .rl.train import Trainer, TrainConfig
from .world import generate_dataset, read_worlds, write_worlds

log = logging.getLogger("learncbba")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2
PRESETS = ("training", *VALIDATION_SIZES)
CONFIG_SECTIONS = {
    "run": RunConfig,
    "budget": SolverBudget,
    "ppo": PPOConfig,
    "weights": RewardWeights,
    "train": TrainConfig,
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _int_range(text: str) -> tuple[int, int]:
    lo, sep, hi = text.partition("..")
    try:
        a, b = (int(lo), int(hi)) if sep else (int(lo), int(lo))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a..b, got {text!r}") from None
    if a < 1 or a > b:
        raise argparse.ArgumentTypeError(f"invalid range {text!r}")
    return a, b


def _float_range(text: str) -> tuple[float, float]:
    lo, sep, hi = text.partition("..")
    try:
        a, b = (float(lo), float(hi)) if sep else (float(lo), float(lo))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a..b, got {text!r}") from None
    if a <= 0 or a > b:
        raise argparse.ArgumentTypeError(f"invalid range {text!r}")
    return a, b


# -- config -----------------------------------------------------------------------


def load_config(path: str | None) -> dict[str, dict]:
    if path is None:
        return {}
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise UsageError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise UsageError("config must be a JSON object")
    unknown = set(data) - set(CONFIG_SECTIONS)
    if unknown:
        raise UsageError(f"unknown config sections {sorted(unknown)}; expected {sorted(CONFIG_SECTIONS)}")
    for section, values in data.items():
        allowed = {f.name for f in dataclasses.fields(CONFIG_SECTIONS[section])} - {"ppo", "weights", "topology"}
        bad = set(values) - allowed
        if bad:
            raise UsageError(f"unknown keys in [{section}]: {sorted(bad)}")
    return data


def _build(section: str, config: dict, **flags):
    """Defaults < config file < command-line flags (``None`` flags are unset)."""
    values = dict(config.get(section, {}))
    values.update({k: v for k, v in flags.items() if v is not None})
    try:
        return CONFIG_SECTIONS[section](**values)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"[{section}] {exc}") from exc


# -- inputs -----------------------------------------------------------------------------


def _worlds(args):
    if args.worlds and args.preset:
        raise UsageError("give either --worlds or --preset, not both")
    if args.preset:
        return preset_dataset(args.preset, args.seed, getattr(args, "count", None))
    if not args.worlds:
        raise UsageError("an input dataset is required (--worlds or --preset)")
    path = Path(args.worlds)
    if not path.is_file():
        raise UsageError(f"dataset {path} does not exist")
    return read_worlds(path)


def _bidder_specs(values: Sequence[str], checkpoint: str | None):
    """``classic``, ``nam``/``lstm`` (with --checkpoint), or ``name=path``."""
    specs = []
    for v in values:
        name, sep, path = v.partition("=")
        if sep:
            specs.append((name, path))
        elif v == "classic":
            specs.append("classic")
        elif v in ARCHITECTURES:
            if not checkpoint:
                raise UsageError(f"bidder {v!r} needs --checkpoint")
            specs.append((v, checkpoint))
        else:
            raise UsageError(f"unknown bidder {v!r}; valid bidders: {', '.join(ARCHITECTURES)} or name=checkpoint")
    return specs


# -- subcommands ---------------------------------------------------------------------------


def cmd_gen(args, config) -> int:
    if args.preset:
        if args.agents or args.tasks:
            raise UsageError("--preset cannot be combined with --agents/--tasks")
        worlds = preset_dataset(args.preset, args.seed, args.count)
    else:
        if not args.agents:
            raise UsageError("gen needs --preset or --agents")
        tasks = args.tasks or (2 * args.agents, 4 * args.agents)
        worlds = generate_dataset(args.seed, args.count or 1000, args.agents, tasks, args.sides, stream=args.stream, tag=args.tag)
    write_worlds(args.out, worlds)
    log.info("wrote %d worlds to %s", len(worlds), args.out)
    return EXIT_OK


def cmd_oracle(args, config) -> int:
    worlds = _worlds(args)
    budget = _build("budget", config, seed=args.seed if args.seed_set else None)
    out = Path(args.out)
    cache = OracleCache.load(out) if out.exists() else OracleCache()
    hits = sum(w.id in cache for w in worlds)
    solved = cache.solve_missing(worlds, budget, args.jobs)
    order = [w.id for w in worlds] + sorted(set(cache.entries) - {w.id for w in worlds})
    cache.save(out, order)
    inexact = sum(not cache[w.id].proof_of_optimality for w in worlds)
    print(f"cache hits {hits}, solved {solved}, not proven optimal {inexact}")
    return EXIT_OK


def cmd_solve(args, config) -> int:
    specs = _bidder_specs(args.bidder or ["classic"], args.checkpoint)
    if len(specs) != 1:
        raise UsageError("solve takes exactly one --bidder")
    spec = specs[0]
    if spec == "classic":
        name, bidder = "classic", ClassicBidder()
    else:
        name, path = spec
        bidder = make_bidder(load_policy(path), name)
    worlds = _worlds(args)
    run = _build("run", config, max_iterations=args.max_iterations, record_snapshots=False)
    records = [run_allocation(w, bidder, run).to_record(w) for w in worlds]
    write_jsonl(args.out, records)
    return EXIT_OK


def _oracle_cache(path: str | None, worlds, budget, jobs) -> OracleCache:
    cache = OracleCache.load(path) if path and Path(path).exists() else OracleCache()
    if cache.solve_missing(worlds, budget, jobs) and path:
        cache.save(path, [w.id for w in worlds] + sorted(set(cache.entries) - {w.id for w in worlds}))
    return cache


def cmd_train(args, config) -> int:
    worlds = _worlds(args)
    ppo = _build("ppo", config)
    weights = _build("weights", config)
    tcfg = dict(config.get("train", {}))
    init = load_policy(args.checkpoint) if args.checkpoint else None
    if args.arch:
        tcfg["arch"] = args.arch
    if init is not None:
        if tcfg.setdefault("arch", init.arch) != init.arch:
            raise UsageError(f"--arch {tcfg['arch']} does not match the {init.arch} checkpoint")
    if args.epochs is not None:
        tcfg["epochs"] = args.epochs
    try:
        train_config = TrainConfig(ppo=ppo, weights=weights, **tcfg)
    except TypeError as exc:
        raise UsageError(f"[train] {exc}") from exc
    if train_config.arch not in ("nam", "lstm"):
        raise UsageError(f"--arch must be nam or lstm, got {train_config.arch!r}")
    if args.resume and not (Path(args.out) / "state.json").is_file():
        raise UsageError(f"--resume needs a previous run in {args.out}")
    cache = _oracle_cache(args.oracle, worlds, _build("budget", config), args.jobs)
    trainer = Trainer(worlds, cache, train_config, args.seed, args.out, init)
    if args.resume:
        trainer.resume()
    trainer.run()
    if trainer.curve:
        last = trainer.curve[-1]
        print(f"epoch {last['epoch']}: probe eta {last['mean_probe_eta']:.2f}, probe timeouts {last['probe_timeouts']}")
    return EXIT_OK


def cmd_eval(args, config) -> int:
    specs = _bidder_specs(args.bidder or ["classic"], args.checkpoint)
    worlds = _worlds(args)
    run = _build("run", config, max_iterations=args.max_iterations)
    budget = _build("budget", config)
    cache = OracleCache.load(args.oracle) if args.oracle and Path(args.oracle).exists() else OracleCache()
    records = run_validation(worlds, specs, run, budget, cache, jobs=args.jobs)
    if args.oracle:
        cache.save(args.oracle, [w.id for w in worlds] + sorted(set(cache.entries) - {w.id for w in worlds}))
    write_records(args.out, records)
    for g in summarize(records).groups.values():
        med = "n/a" if g.median_eta is None else f"{g.median_eta:.2f}"
        print(
            f"{g.bidder} n_agents={g.n_agents}: median eta {med} over {g.eta_count}, "
            f"timeouts {g.timeouts}, p95 iterations {g.p95_iterations:g}, oracle {g.exact_oracle}"
        )
    return EXIT_OK


def cmd_report(args, config) -> int:
    records = []
    for path in args.records:
        if not Path(path).is_file():
            raise UsageError(f"records file {path} does not exist")
        records.extend(read_records(path))
    if not records:
        raise UsageError("no records to report")
    paths = export_report(summarize(records), records, args.out)
    print("\n".join(str(p) for p in paths.values()))
    return EXIT_OK


DIRECTORY_OUTPUTS = {"train", "report"}


def _check_out(command: str, out: str) -> None:
    path = Path(out)
    if command in DIRECTORY_OUTPUTS and path.is_file():
        raise UsageError(f"--out {out} must be a directory, found a file")
    if command not in DIRECTORY_OUTPUTS and path.is_dir():
        raise UsageError(f"--out {out} must be a file path, found a directory")


COMMANDS = {
    "gen": cmd_gen,
    "oracle": cmd_oracle,
    "solve": cmd_solve,
    "train": cmd_train,
    "eval": cmd_eval,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="master seed (default 0)")
    common.add_argument("--jobs", type=int, default=1, help="worker processes for oracle/eval")
    common.add_argument("--config", help="JSON file with run/budget/ppo/weights/train sections")
    common.add_argument("--out", required=True, help="output file or directory")
    common.add_argument("-v", "--verbose", action="store_true")

    data = _Parser(add_help=False)
    data.add_argument("--worlds", help="input dataset (JSONL)")
    data.add_argument("--preset", choices=PRESETS)
    data.add_argument("--count", type=int, help="number of preset worlds (default 1000)")

    bid = _Parser(add_help=False)
    bid.add_argument("--bidder", action="append", help="classic, nam, lstm or name=checkpoint; repeatable for eval")
    bid.add_argument("--checkpoint", help="policy checkpoint for nam/lstm bidders")
    bid.add_argument("--max-iterations", type=int, default=None)

    parser = _Parser(prog="learncbba", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen", parents=[common], help="generate a world dataset")
    g.add_argument("--preset", choices=PRESETS)
    g.add_argument("--agents", type=int)
    g.add_argument("--tasks", type=_int_range, help="task count range a..b (default 2N..4N)")
    g.add_argument("--sides", type=_float_range, default=(25.0, 55.0), help="workspace side range a..b")
    g.add_argument("--count", type=int)
    g.add_argument("--stream", type=int, default=0, help="seed namespace for custom datasets")
    g.add_argument("--tag", default="w", help="world id prefix for custom datasets")

    sub.add_parser("oracle", parents=[common, data], help="solve reference assignments into a cache")
    sub.add_parser("solve", parents=[common, data, bid], help="run the auction on every world")

    t = sub.add_parser("train", parents=[common, data], help="PPO training of a learned bidder")
    t.add_argument("--arch", choices=("nam", "lstm"))
    t.add_argument("--epochs", type=int)
    t.add_argument("--oracle", help="oracle cache file (created or extended as needed)")
    t.add_argument("--checkpoint", help="initial actor parameters")
    t.add_argument("--resume", action="store_true", help="continue from the state saved in --out")

    e = sub.add_parser("eval", parents=[common, data, bid], help="score bidders against the oracle")
    e.add_argument("--oracle", help="oracle cache file (created or extended as needed)")

    r = sub.add_parser("report", parents=[common], help="summaries and box-plot data from record CSVs")
    r.add_argument("records", nargs="+", help="record CSV files written by eval")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(
            level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s"
        )
        args.seed_set = args.seed is not None
        if args.seed is None:
            args.seed = 0
        if args.jobs < 1:
            raise UsageError("--jobs must be >= 1")
        config = load_config(args.config)
        _check_out(args.command, args.out)
        return COMMANDS[args.command](args, config)
    except UsageError as exc:
        print(f"learncbba: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (CheckpointError, OSError, ValueError, KeyError, RuntimeError) as exc:
        print(f"learncbba: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
