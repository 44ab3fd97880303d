"""Warm start: regress a neural bidder onto classic bids before PPO.

Observation sequences come from classic-bidder runs, so the targets are the
bids the classic scorer would place in exactly the states it visits.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from ..bidding import networks as nn
from ..bidding.checkpoint import quantize
from ..bidding.observation import build_observation
from ..bidding.policy import PolicyParameters, classic_bid
from ..consensus import RunConfig, run_allocation
from ..world import WorldInstance
from .ppo import Adam


class _RecordingClassic:
    name = "classic"

    def __init__(self):
        self.rows: list[tuple[np.ndarray, np.ndarray]] = []

    def reset(self, world):
        self.rows = []

    def bid(self, state, world, iteration):
        bids = classic_bid(state, world)
        self.rows.append((build_observation(state, world).features, bids))
        return bids


@dataclass
class Demonstration:
    features: np.ndarray  # (T, N_u, N_t, F)
    targets: np.ndarray  # (T, N_u, N_t)


def demonstrations(worlds: Sequence[WorldInstance], max_iterations: int = 50) -> list[Demonstration]:
    out = []
    for w in worlds:
        rec = _RecordingClassic()
        res = run_allocation(w, rec, RunConfig(max_iterations=max_iterations, record_snapshots=False))
        T, N, M = res.rounds_executed, w.n_agents, w.n_tasks
        feats = np.stack([f for f, _ in rec.rows]).reshape(T, N, M, -1)
        targets = np.stack([b for _, b in rec.rows]).reshape(T, N, M)
        out.append(Demonstration(feats, targets))
    return out


def _loss_and_grads(policy: PolicyParameters, demo: Demonstration, scale: float):
    T, N, M, F = demo.features.shape
    if policy.arch == "nam":
        logits, cache = nn.nam_logits(policy.params, demo.features.reshape(-1, F), cache=True)
        logits = logits.reshape(T, N, M)
    else:
        logits, cache = nn.lstm_sequence(policy.params, demo.features.reshape(T, N * M, F))
        logits = logits.reshape(T, N, M)
    err = nn.softplus(logits) - demo.targets
    dlogits = 2.0 * err * nn.sigmoid(logits) * scale
    if policy.arch == "nam":
        grads = nn.nam_logits_backward(policy.params, cache, dlogits.reshape(-1))
    else:
        grads = nn.lstm_sequence_backward(policy.params, cache, dlogits.reshape(T, N * M))
    return float((err**2).sum()) * scale, grads


def imitate_classic(
    policy: PolicyParameters,
    demos: Sequence[Demonstration],
    epochs: int,
    rng: np.random.Generator,
    lr: float = 1e-3,
    batch_size: int = 8,
) -> tuple[PolicyParameters, list[float]]:
    """Minimise the squared error between mean bids and classic bids.

    Returns the fitted copy of ``policy`` and the mean loss of each epoch.
    The exploration log-std is left untouched.
    """
    policy = policy.copy()
    opt = Adam(lr)
    history = []
    for _ in range(epochs):
        order = rng.permutation(len(demos))
        total, count = 0.0, 0
        for start in range(0, len(order), batch_size):
            chunk = [demos[i] for i in order[start : start + batch_size]]
            n = sum(d.targets.size for d in chunk)
            grads = {k: np.zeros_like(v) for k, v in policy.params.items() if k != "policy.log_std"}
            for d in chunk:
                loss, g = _loss_and_grads(policy, d, 1.0 / n)
                total += loss * n
                for k, v in g.items():
                    grads[k] += v
            count += n
            opt.step(policy.params, grads)
            quantize(policy.params)
        history.append(total / max(count, 1))
    return policy, history
