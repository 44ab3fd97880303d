"""Epoch loop: sample worlds, collect rollouts, update, score the probe set."""

from __future__ import annotations

import csv
import io
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from ..bidding.checkpoint import quantize, save_policy
from ..bidding.policy import NeuralBidder, PolicyParameters, init_policy
from ..consensus import RunConfig, run_allocation
from ..eval import make_record
from ..io import atomic_write_bytes, atomic_write_text
from ..world import WorldInstance
from .imitation import demonstrations, imitate_classic
from .ppo import (
    Adam,
    Critic,
    PPOConfig,
    collect_rollouts,
    init_critic,
    make_optimizer,
    ppo_update,
    save_critic,
)
from .reward import RewardWeights

log = logging.getLogger(__name__)

CURVE_FIELDS = (
    "epoch",
    "mean_probe_eta",
    "probe_timeouts",
    "mean_reward",
    "train_timeouts",
    "policy_loss",
    "value_loss",
    "entropy",
    "clip_fraction",
    "mean_ratio",
    "approx_kl",
)

# named sub-streams of the training seed
INIT_STREAM, SAMPLE_STREAM, EXPLORE_STREAM, SHUFFLE_STREAM, IMITATION_STREAM = 10, 11, 12, 13, 14


@dataclass
class TrainConfig:
    arch: str = "lstm"
    epochs: int = 100
    probe_size: int = 50
    checkpoint_every: int = 10
    hidden: int | None = None
    imitation_epochs: int = 0
    imitation_worlds: int = 200
    imitation_lr: float = 1e-3
    log_std: float | None = None  # overrides the actor's initial exploration log-std
    ppo: PPOConfig = field(default_factory=PPOConfig)
    weights: RewardWeights = field(default_factory=RewardWeights)

    def to_dict(self) -> dict:
        return asdict(self)


def split_probe(dataset: Sequence[WorldInstance], probe_size: int) -> tuple[list, list]:
    """The last ``probe_size`` worlds are held out for probe scoring."""
    if probe_size < 0 or probe_size >= len(dataset):
        raise ValueError(f"probe size {probe_size} must be in [0, {len(dataset)})")
    cut = len(dataset) - probe_size
    return list(dataset[:cut]), list(dataset[cut:])


def probe_eta(policy: PolicyParameters, probe: Sequence[WorldInstance], oracle_cache, max_iterations: int = 50):
    """Mean η of the deterministic policy over converged probe runs, and the timeout count."""
    etas, timeouts = [], 0
    cfg = RunConfig(max_iterations=max_iterations, record_snapshots=False)
    for w in probe:
        result = run_allocation(w, NeuralBidder(policy), cfg)
        rec = make_record(w, policy.arch, result, oracle_cache[w.id])
        if rec.counted:
            etas.append(rec.eta)
        else:
            timeouts += 1
    return (float(np.mean(etas)) if etas else 0.0), timeouts


def curve_to_csv(rows: Sequence[dict]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=CURVE_FIELDS, lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})
    return buf.getvalue()


def read_curve(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        return [
            {k: (int(v) if k in ("epoch", "probe_timeouts", "train_timeouts") else float(v)) for k, v in row.items()}
            for row in csv.DictReader(fh)
        ]


def _rng_state(rng: np.random.Generator) -> dict:
    return rng.bit_generator.state


def _restore_rng(state: dict) -> np.random.Generator:
    rng = np.random.default_rng()
    rng.bit_generator.state = state
    return rng


class Trainer:
    """Holds every piece of mutable training state so runs can stop and resume.

    ``out_dir`` (optional) receives ``actor_last``/``actor_best``/``critic``
    checkpoints, ``curve.csv`` and the resume bundle ``state.npz`` +
    ``state.json``.
    """

    def __init__(
        self,
        dataset: Sequence[WorldInstance],
        oracle_cache,
        config: TrainConfig,
        seed: int = 0,
        out_dir=None,
        initial_policy: PolicyParameters | None = None,
    ):
        self.config = config
        self.seed = seed
        self.oracle_cache = oracle_cache
        self.train_worlds, self.probe = split_probe(dataset, config.probe_size)
        missing = [w.id for w in dataset if oracle_cache.get(w.id) is None]
        if missing:
            raise KeyError(f"oracle cache lacks {len(missing)} dataset worlds, e.g. {missing[0]}")
        self.out_dir = Path(out_dir) if out_dir is not None else None
        init_rng = np.random.default_rng([seed, INIT_STREAM])
        self.actor = initial_policy.copy() if initial_policy is not None else init_policy(config.arch, init_rng, hidden=config.hidden)
        if self.actor.arch == "classic":
            raise ValueError("the classic bidder has nothing to train")
        quantize(self.actor.params)
        self.imitation_loss: list[float] = []
        if config.imitation_epochs > 0 and initial_policy is None:
            demos = demonstrations(self.train_worlds[: config.imitation_worlds], config.ppo.max_iterations)
            self.actor, self.imitation_loss = imitate_classic(
                self.actor,
                demos,
                config.imitation_epochs,
                np.random.default_rng([seed, IMITATION_STREAM]),
                lr=config.imitation_lr,
            )
            log.info("imitation warm start: loss %.5f -> %.5f", self.imitation_loss[0], self.imitation_loss[-1])
        if config.log_std is not None:
            self.actor.params["policy.log_std"][...] = config.log_std
            quantize(self.actor.params)
        self.critic = init_critic(init_rng, config.ppo.layout)
        quantize(self.critic.params)
        self.actor_opt = make_optimizer(config.ppo.optimizer, config.ppo.learning_rate)
        self.critic_opt = make_optimizer(config.ppo.optimizer, config.ppo.critic_learning_rate)
        self.sample_rng = np.random.default_rng([seed, SAMPLE_STREAM])
        self.explore_rng = np.random.default_rng([seed, EXPLORE_STREAM])
        self.shuffle_rng = np.random.default_rng([seed, SHUFFLE_STREAM])
        self.epoch = 0
        self.curve: list[dict] = []
        self.best_score = -np.inf
        self.best = self.actor.copy()
        self.baselines: dict[str, float] = {}

    # -- persistence -------------------------------------------------------------

    def _files(self) -> dict[str, Path]:
        d = self.out_dir
        return {
            "actor_last": d / "actor_last.json",
            "actor_best": d / "actor_best.json",
            "critic": d / "critic.json",
            "curve": d / "curve.csv",
            "state_arrays": d / "state.npz",
            "state": d / "state.json",
        }

    def save(self) -> None:
        if self.out_dir is None:
            return
        f = self._files()
        save_policy(f["actor_last"], self.actor)
        save_policy(f["actor_best"], self.best)
        save_critic(f["critic"], self.critic)
        atomic_write_text(f["curve"], curve_to_csv(self.curve))
        arrays = {}
        for prefix, opt in (("actor_opt", self.actor_opt), ("critic_opt", self.critic_opt)):
            if isinstance(opt, Adam):
                arrays.update(opt.state(prefix))
        arrays.update({f"actor/{k}": v for k, v in self.actor.params.items()})
        arrays.update({f"best/{k}": v for k, v in self.best.params.items()})
        arrays.update({f"critic/{k}": v for k, v in self.critic.params.items()})
        buf = io.BytesIO()
        np.savez(buf, **arrays)
        atomic_write_bytes(f["state_arrays"], buf.getvalue())
        state = {
            "epoch": self.epoch,
            "seed": self.seed,
            "arch": self.actor.arch,
            "hyper": self.actor.hyper,
            "best_score": self.best_score if np.isfinite(self.best_score) else None,
            "curve": self.curve,
            "baselines": self.baselines,
            "rng": {
                "sample": _rng_state(self.sample_rng),
                "explore": _rng_state(self.explore_rng),
                "shuffle": _rng_state(self.shuffle_rng),
            },
        }
        atomic_write_text(f["state"], json.dumps(state, sort_keys=True) + "\n")

    def resume(self, directory=None) -> None:
        """Restore the state saved by :meth:`save` (default: ``out_dir``)."""
        d = Path(directory) if directory is not None else self.out_dir
        state = json.loads((d / "state.json").read_text(encoding="utf-8"))
        if state["seed"] != self.seed or state["arch"] != self.actor.arch:
            raise ValueError(
                f"resume state is for arch={state['arch']} seed={state['seed']}, "
                f"not arch={self.actor.arch} seed={self.seed}"
            )
        with np.load(d / "state.npz") as data:
            arrays = {k: data[k] for k in data.files}
        def section(prefix):
            return {k[len(prefix) + 1 :]: v.copy() for k, v in arrays.items() if k.startswith(prefix + "/")}
        self.actor = PolicyParameters(self.actor.arch, section("actor"), state["hyper"], self.actor.feature_spec)
        self.best = PolicyParameters(self.actor.arch, section("best"), state["hyper"], self.actor.feature_spec)
        self.critic = Critic(section("critic"), self.critic.layout)
        for prefix, opt in (("actor_opt", self.actor_opt), ("critic_opt", self.critic_opt)):
            if isinstance(opt, Adam):
                opt.load({k: v for k, v in arrays.items() if k.startswith(prefix + "/")}, prefix)
        self.epoch = state["epoch"]
        self.curve = state["curve"]
        self.best_score = state["best_score"] if state["best_score"] is not None else -np.inf
        self.baselines = state["baselines"]
        self.sample_rng = _restore_rng(state["rng"]["sample"])
        self.explore_rng = _restore_rng(state["rng"]["explore"])
        self.shuffle_rng = _restore_rng(state["rng"]["shuffle"])

    # -- loop ------------------------------------------------------------------------

    def step(self) -> dict:
        cfg = self.config.ppo
        n = min(cfg.worlds_per_epoch, len(self.train_worlds))
        idx = np.sort(self.sample_rng.choice(len(self.train_worlds), size=n, replace=False))
        worlds = [self.train_worlds[i] for i in idx]
        t0 = time.perf_counter()
        batch = collect_rollouts(
            worlds, self.actor, self.critic, cfg, self.config.weights, self.oracle_cache, self.explore_rng, self.baselines
        )
        t1 = time.perf_counter()
        self.actor, self.critic, diag = ppo_update(
            self.actor, self.critic, batch, cfg, self.actor_opt, self.critic_opt, self.shuffle_rng
        )
        t2 = time.perf_counter()
        self.epoch += 1
        eta, probe_to = probe_eta(self.actor, self.probe, self.oracle_cache, cfg.max_iterations) if self.probe else (0.0, 0)
        row = {
            "epoch": self.epoch,
            "mean_probe_eta": eta,
            "probe_timeouts": probe_to,
            "mean_reward": float(np.mean([e.rewards.sum() for e in batch.episodes])),
            "train_timeouts": sum(e.timed_out for e in batch.episodes),
            "policy_loss": diag["policy_loss"],
            "value_loss": diag["value_loss"],
            "entropy": diag["entropy"],
            "clip_fraction": diag["clip_fraction"],
            "mean_ratio": diag["ratio"],
            "approx_kl": diag["approx_kl"],
        }
        self.curve.append(row)
        # timeouts score zero so a policy cannot win the probe by stalling
        score = eta * (1.0 - probe_to / len(self.probe)) if self.probe else -float(self.epoch)
        if score > self.best_score:
            self.best_score = score
            self.best = self.actor.copy()
        log.info(
            "epoch %d probe_eta %.2f probe_timeouts %d reward %.3f clip %.3f (rollout %.1fs, update %.1fs)",
            self.epoch, eta, probe_to, row["mean_reward"], row["clip_fraction"], t1 - t0, t2 - t1,
        )
        return row

    def run(self, epochs: int | None = None) -> tuple[PolicyParameters, list[dict]]:
        """Train until ``epochs`` total epochs (default: the configured count)."""
        target = self.config.epochs if epochs is None else epochs
        while self.epoch < target:
            self.step()
            if self.out_dir is not None and (
                self.epoch % self.config.checkpoint_every == 0 or self.epoch == target
            ):
                self.save()
        if self.out_dir is not None and self.epoch == 0:
            self.save()
        return self.actor, list(self.curve)


def train(
    dataset: Sequence[WorldInstance],
    arch: str,
    config: TrainConfig | None = None,
    weights: RewardWeights | None = None,
    seed: int = 0,
    oracle_cache=None,
    out_dir=None,
    resume: bool = False,
    initial_policy: PolicyParameters | None = None,
) -> tuple[PolicyParameters, list[dict]]:
    """Train an actor of architecture ``arch``; returns the final actor and its curve."""
    config = config or TrainConfig()
    config.arch = arch
    if weights is not None:
        config.weights = weights
    trainer = Trainer(dataset, oracle_cache, config, seed, out_dir, initial_policy)
    if resume:
        trainer.resume()
    return trainer.run()
