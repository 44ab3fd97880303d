"""Rollout collection and clipped PPO updates for the bidding policy.

Rollouts run the full auction-consensus protocol with a stochastic bidder.
Each consensus round yields one transition per agent; the team reward of
the round is shared by every agent and the centralized critic values the
global state the round started from.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterator, Mapping, Sequence

import numpy as np

from ..bidding import networks as nn
from ..bidding.checkpoint import load_arrays, quantize, save_arrays
from ..bidding.policy import LOG_2PI, ClassicBidder, NeuralBidder, PolicyParameters
from ..consensus import RunConfig, run_allocation
from ..oracle import OptimalAssignment
from ..world import WorldInstance
from .reward import (
    CriticLayout,
    RewardWeights,
    build_critic_input,
    compute_reward,
    team_statuses,
    terminal_bonus,
)

ENTROPY_CONST = 0.5 * (LOG_2PI + 1.0)


class PPOUpdateError(RuntimeError):
    """A loss or gradient went non-finite; parameters were left untouched."""


@dataclass
class PPOConfig:
    clip: float = 0.2
    gamma: float = 0.99
    lam: float = 0.95
    learning_rate: float = 3e-4
    critic_learning_rate: float = 1e-3
    epochs_per_batch: int = 4
    minibatch_size: int = 8
    entropy_coef: float = 0.01
    value_coef: float = 0.5
    worlds_per_epoch: int = 32
    max_grad_norm: float = 0.5
    optimizer: str = "adam"
    terminal_bonus: bool = True
    timeout_penalty: float = 1.0
    bootstrap_timeouts: bool = False
    max_iterations: int = 50
    max_agents: int = 8
    max_tasks: int = 32
    quantize: bool = True

    def __post_init__(self) -> None:
        # clip == inf disables clipping
        if not (0.0 < self.clip < 1.0 or self.clip == math.inf):
            raise ValueError("clip must lie in (0, 1)")
        if not 0.0 <= self.timeout_penalty <= 1.0:
            raise ValueError("timeout_penalty must lie in [0, 1]")
        if not (0.0 < self.gamma <= 1.0 and 0.0 < self.lam <= 1.0):
            raise ValueError("gamma and lambda must lie in (0, 1]")
        if self.epochs_per_batch < 1 or self.minibatch_size < 1 or self.worlds_per_epoch < 1:
            raise ValueError("epoch, minibatch and batch sizes must be positive")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")

    @property
    def layout(self) -> CriticLayout:
        return CriticLayout(self.max_agents, self.max_tasks)


# -- critic -----------------------------------------------------------------------


@dataclass
class Critic:
    params: dict[str, np.ndarray]
    layout: CriticLayout = CriticLayout()

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return nn.mlp_forward(self.params, np.atleast_2d(x), prefix="critic")

    def copy(self) -> "Critic":
        return Critic({k: v.copy() for k, v in self.params.items()}, self.layout)


def init_critic(rng: np.random.Generator | int, layout: CriticLayout = CriticLayout(), hidden=(128, 64)) -> Critic:
    if isinstance(rng, (int, np.integer)):
        rng = np.random.default_rng(rng)
    params = nn.init_mlp(rng, [layout.dim, *hidden, 1], prefix="critic")
    return Critic(params, layout)


def save_critic(path, critic: Critic) -> None:
    header = {"arch": "critic", "layout": [critic.layout.max_agents, critic.layout.max_tasks]}
    save_arrays(path, header, critic.params)


def load_critic(path) -> Critic:
    header, arrays = load_arrays(path)
    return Critic(arrays, CriticLayout(*header["layout"]))


# -- optimisers ---------------------------------------------------------------------


class Adam:
    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, np.ndarray], grads: Mapping[str, np.ndarray]) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for k, g in grads.items():
            m = self.m.setdefault(k, np.zeros_like(g))
            v = self.v.setdefault(k, np.zeros_like(g))
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            params[k] -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state(self, prefix: str) -> dict[str, np.ndarray]:
        out = {f"{prefix}/t": np.array([self.t], dtype=np.float64)}
        out.update({f"{prefix}/m/{k}": v for k, v in self.m.items()})
        out.update({f"{prefix}/v/{k}": v for k, v in self.v.items()})
        return out

    def load(self, arrays: Mapping[str, np.ndarray], prefix: str) -> None:
        self.t = int(arrays[f"{prefix}/t"][0])
        self.m = {k[len(prefix) + 3 :]: v.copy() for k, v in arrays.items() if k.startswith(f"{prefix}/m/")}
        self.v = {k[len(prefix) + 3 :]: v.copy() for k, v in arrays.items() if k.startswith(f"{prefix}/v/")}


class SGD:
    def __init__(self, lr: float):
        self.lr = lr

    def step(self, params: dict[str, np.ndarray], grads: Mapping[str, np.ndarray]) -> None:
        for k, g in grads.items():
            params[k] -= self.lr * g


def make_optimizer(kind: str, lr: float):
    return Adam(lr) if kind == "adam" else SGD(lr)


# -- rollouts -------------------------------------------------------------------------


@dataclass
class Transition:
    agent: int
    iteration: int
    observation: np.ndarray
    action: np.ndarray
    log_prob: float
    reward: float
    value: float
    done: bool


@dataclass
class Episode:
    """One world's rollout; arrays are indexed by consensus round ``t``."""

    world: WorldInstance
    features: np.ndarray  # (T, N_u, N_t, F)
    actions: np.ndarray  # (T, N_u, N_t)
    log_probs: np.ndarray  # (T, N_u)
    rewards: np.ndarray  # (T,)
    components: np.ndarray  # (T, 4): distance, coverage, agreement, terminal term
    critic_inputs: np.ndarray  # (T, dim), state each round started from
    values: np.ndarray  # (T,)
    bootstrap: float
    timed_out: bool
    final_distance: float
    advantages: np.ndarray = field(default=None)
    returns: np.ndarray = field(default=None)
    norm_advantages: np.ndarray = field(default=None)

    @property
    def length(self) -> int:
        return len(self.rewards)

    @property
    def n_agents(self) -> int:
        return self.features.shape[1]

    def transitions(self) -> Iterator[Transition]:
        T = self.length
        for t in range(T):
            for a in range(self.n_agents):
                yield Transition(
                    agent=a,
                    iteration=t + 1,
                    observation=self.features[t, a],
                    action=self.actions[t, a],
                    log_prob=float(self.log_probs[t, a]),
                    reward=float(self.rewards[t]),
                    value=float(self.values[t]),
                    done=t == T - 1,
                )


@dataclass
class Batch:
    episodes: list[Episode]

    def __len__(self) -> int:
        return sum(e.length * e.n_agents for e in self.episodes)

    def transitions(self) -> Iterator[Transition]:
        for e in self.episodes:
            yield from e.transitions()

    def advantage_vector(self) -> np.ndarray:
        """Normalised advantages, one entry per (episode, round, agent)."""
        if not self.episodes:
            return np.zeros(0)
        return np.concatenate([np.repeat(e.norm_advantages, e.n_agents) for e in self.episodes])


def compute_gae(
    rewards: np.ndarray, values: np.ndarray, bootstrap: float, gamma: float, lam: float
) -> tuple[np.ndarray, np.ndarray]:
    """Generalised advantage estimates and value targets for one stream."""
    T = len(rewards)
    adv = np.zeros(T)
    running = 0.0
    for t in range(T - 1, -1, -1):
        next_value = values[t + 1] if t + 1 < T else bootstrap
        delta = rewards[t] + gamma * next_value - values[t]
        running = delta + gamma * lam * running
        adv[t] = running
    return adv, adv + values


def classic_distance(world: WorldInstance, max_iterations: int = 50) -> float:
    res = run_allocation(world, ClassicBidder(), RunConfig(max_iterations=max_iterations, record_snapshots=False))
    return res.team_distance(world)


def rollout_episode(
    world: WorldInstance,
    policy: PolicyParameters,
    critic: Critic,
    config: PPOConfig,
    weights: RewardWeights,
    oracle: OptimalAssignment,
    rng: np.random.Generator,
    baseline_distance: float | None = None,
) -> Episode:
    bidder = NeuralBidder(policy, stochastic=True, rng=rng, record=True)
    result = run_allocation(world, bidder, RunConfig(max_iterations=config.max_iterations))
    T, N_u, N_t = result.rounds_executed, world.n_agents, world.n_tasks
    steps = bidder.steps
    if len(steps) != T * N_u:
        raise RuntimeError(f"expected {T * N_u} bidder calls, recorded {len(steps)}")
    F = steps[0].features.shape[1]
    features = np.stack([s.features for s in steps]).reshape(T, N_u, N_t, F)
    actions = np.stack([s.action for s in steps]).reshape(T, N_u, N_t)
    log_probs = np.array([s.log_prob for s in steps]).reshape(T, N_u)

    snaps = result.snapshots
    statuses = team_statuses(snaps, world, oracle)
    components = np.zeros((T, 4))
    for t in range(T):
        r = compute_reward(statuses[t], statuses[t + 1], oracle, weights, world)
        components[t, :3] = r.distance, r.coverage, r.agreement
    if config.terminal_bonus and not result.timed_out:
        if baseline_distance is None:
            baseline_distance = classic_distance(world, config.max_iterations)
        components[-1, 3] = terminal_bonus(statuses[-1].distance, baseline_distance, oracle.total_distance)
    elif result.timed_out:
        # without this, stalling would dodge a negative comparison with the classic run
        components[-1, 3] = -config.timeout_penalty
    w = np.array([weights.w_D, weights.w_C, weights.w_A, weights.w_D])
    rewards = components @ w

    layout = config.layout
    crit_in = np.stack(
        [build_critic_input(world, snaps[t], oracle, layout, t / config.max_iterations) for t in range(T + 1)]
    )
    all_values = critic(crit_in)
    bootstrap = float(all_values[T]) if (result.timed_out and config.bootstrap_timeouts) else 0.0
    ep = Episode(
        world=world,
        features=features,
        actions=actions,
        log_probs=log_probs,
        rewards=rewards,
        components=components,
        critic_inputs=crit_in[:T],
        values=all_values[:T],
        bootstrap=bootstrap,
        timed_out=result.timed_out,
        final_distance=statuses[-1].distance,
    )
    ep.advantages, ep.returns = compute_gae(rewards, ep.values, bootstrap, config.gamma, config.lam)
    return ep


def normalize_advantages(episodes: Sequence[Episode]) -> None:
    """Zero-mean, unit-std advantages over every per-agent transition."""
    if not episodes:
        return
    flat = np.concatenate([np.repeat(e.advantages, e.n_agents) for e in episodes])
    mean = flat.mean()
    std = flat.std()
    for e in episodes:
        e.norm_advantages = (e.advantages - mean) / (std + 1e-8) if std > 0 else e.advantages - mean


def collect_rollouts(
    worlds: Sequence[WorldInstance],
    policy: PolicyParameters,
    critic: Critic,
    config: PPOConfig,
    weights: RewardWeights,
    oracle_cache,
    rng: np.random.Generator,
    baselines: dict[str, float] | None = None,
) -> Batch:
    """Run the stochastic policy on every world and assemble a training batch."""
    episodes = []
    for w in worlds:
        oracle = oracle_cache.get(w.id) if hasattr(oracle_cache, "get") else None
        if oracle is None:
            raise KeyError(f"no oracle solution cached for world {w.id}")
        base = None
        if config.terminal_bonus:
            if baselines is None:
                baselines = {}
            if w.id not in baselines:
                baselines[w.id] = classic_distance(w, config.max_iterations)
            base = baselines[w.id]
        episodes.append(rollout_episode(w, policy, critic, config, weights, oracle, rng, base))
    normalize_advantages(episodes)
    return Batch(episodes)


# -- losses and gradients ------------------------------------------------------------------


def clipped_surrogate(ratio: np.ndarray, adv: np.ndarray, clip: float) -> np.ndarray:
    """Per-transition PPO objective ``min(r A, clip(r, 1-eps, 1+eps) A)``."""
    return np.minimum(ratio * adv, np.clip(ratio, 1.0 - clip, 1.0 + clip) * adv)


def _actor_logits(policy: PolicyParameters, features: np.ndarray):
    T, N, M, F = features.shape
    if policy.arch == "nam":
        logits, cache = nn.nam_logits(policy.params, features.reshape(-1, F), cache=True)
    else:
        logits, cache = nn.lstm_sequence(policy.params, features.reshape(T, N * M, F))
    return logits.reshape(T, N, M), cache


def _actor_backward(policy: PolicyParameters, cache, dlogits: np.ndarray) -> dict[str, np.ndarray]:
    T, N, M = dlogits.shape
    if policy.arch == "nam":
        return nn.nam_logits_backward(policy.params, cache, dlogits.reshape(-1))
    return nn.lstm_sequence_backward(policy.params, cache, dlogits.reshape(T, N * M))


def episode_log_probs(policy: PolicyParameters, ep: Episode):
    """Log-probabilities of the recorded actions under ``policy``; (T, N_u)."""
    logits, cache = _actor_logits(policy, ep.features)
    mean = nn.softplus(logits)
    log_std = policy.log_std
    var = math.exp(2.0 * log_std)
    diff = ep.actions - mean
    M = ep.actions.shape[-1]
    logp = -0.5 * (diff**2).sum(-1) / var - M * (log_std + 0.5 * LOG_2PI)
    return logp, (logits, cache, diff, var)


def log_prob_gradients(policy: PolicyParameters, ep: Episode, weights: np.ndarray) -> dict[str, np.ndarray]:
    """Gradient of ``sum(weights * logp)`` over the episode, weights shaped (T, N_u)."""
    _, (logits, cache, diff, var) = episode_log_probs(policy, ep)
    M = ep.actions.shape[-1]
    dlogits = weights[:, :, None] * diff / var * nn.sigmoid(logits)
    grads = _actor_backward(policy, cache, dlogits)
    grads["policy.log_std"] = np.array([np.sum(weights * ((diff**2).sum(-1) / var - M))])
    return grads


def _zero_like(params):
    return {k: np.zeros_like(v) for k, v in params.items()}


def _accumulate(total, part):
    for k, v in part.items():
        total[k] += v


def _clip_norm(grads, max_norm: float) -> float:
    norm = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if math.isfinite(max_norm) and norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for g in grads.values():
            g *= scale
    return norm


def minibatch_losses(
    actor: PolicyParameters, critic: Critic, episodes: Sequence[Episode], config: PPOConfig
) -> tuple[dict, dict[str, np.ndarray], dict[str, np.ndarray]]:
    """Losses, actor gradients and critic gradients for a set of episodes."""
    n_total = sum(e.length * e.n_agents for e in episodes)
    n_states = sum(e.length for e in episodes)
    g_actor = _zero_like(actor.params)
    g_critic = _zero_like(critic.params)
    log_std = actor.log_std
    stats = {"policy_loss": 0.0, "value_loss": 0.0, "clip_fraction": 0.0, "ratio": 0.0, "approx_kl": 0.0}
    eps = config.clip
    for ep in episodes:
        logp, (logits, cache, diff, var) = episode_log_probs(actor, ep)
        log_ratio = logp - ep.log_probs
        ratio = np.exp(np.minimum(log_ratio, 50.0))
        adv = np.broadcast_to(ep.norm_advantages[:, None], ratio.shape)
        surrogate = clipped_surrogate(ratio, adv, eps)
        inside = (ratio >= 1.0 - eps) & (ratio <= 1.0 + eps)
        passes = inside | (ratio * adv < np.clip(ratio, 1.0 - eps, 1.0 + eps) * adv)
        dlogp = np.where(passes, -adv * ratio, 0.0) / n_total
        M = ep.actions.shape[-1]
        dlogits = dlogp[:, :, None] * diff / var * nn.sigmoid(logits)
        _accumulate(g_actor, _actor_backward(actor, cache, dlogits))
        g_actor["policy.log_std"] += np.sum(dlogp * ((diff**2).sum(-1) / var - M))
        stats["policy_loss"] -= float(surrogate.sum()) / n_total
        stats["clip_fraction"] += float((~inside).sum()) / n_total
        stats["ratio"] += float(ratio.sum()) / n_total
        stats["approx_kl"] += float(((ratio - 1.0) - log_ratio).sum()) / n_total

        values, acts = nn.mlp_forward(critic.params, ep.critic_inputs, prefix="critic", cache=True)
        err = values - ep.returns
        stats["value_loss"] += float((err**2).sum()) / n_states
        _accumulate(g_critic, nn.mlp_backward(critic.params, acts, 2.0 * config.value_coef * err / n_states, prefix="critic"))

    # per-bid Gaussian entropy; only the log-std carries a gradient
    entropy = ENTROPY_CONST + log_std
    stats["entropy"] = entropy
    g_actor["policy.log_std"] -= config.entropy_coef
    stats["loss"] = stats["policy_loss"] + config.value_coef * stats["value_loss"] - config.entropy_coef * entropy
    return stats, g_actor, g_critic


def ppo_update(
    actor: PolicyParameters,
    critic: Critic,
    batch: Batch,
    config: PPOConfig,
    actor_opt=None,
    critic_opt=None,
    rng: np.random.Generator | None = None,
) -> tuple[PolicyParameters, Critic, dict]:
    """Several epochs of minibatch PPO on a fixed batch.

    Returns updated copies of actor and critic and per-epoch diagnostics.
    Raises :class:`PPOUpdateError` (inputs untouched) on a non-finite loss.
    """
    if not batch.episodes:
        raise ValueError("ppo_update needs a nonempty batch")
    actor = actor.copy()
    critic = critic.copy()
    actor_opt = actor_opt or make_optimizer(config.optimizer, config.learning_rate)
    critic_opt = critic_opt or make_optimizer(config.optimizer, config.critic_learning_rate)
    rng = rng or np.random.default_rng(0)
    episodes = batch.episodes
    epochs = []
    for _ in range(config.epochs_per_batch):
        order = rng.permutation(len(episodes))
        totals: dict[str, float] = {}
        n_mb = 0
        for start in range(0, len(order), config.minibatch_size):
            chunk = [episodes[i] for i in order[start : start + config.minibatch_size]]
            stats, g_actor, g_critic = minibatch_losses(actor, critic, chunk, config)
            finite = math.isfinite(stats["loss"]) and all(
                np.all(np.isfinite(g)) for g in (*g_actor.values(), *g_critic.values())
            )
            if not finite:
                raise PPOUpdateError(f"non-finite loss or gradient (loss={stats['loss']})")
            stats["actor_grad_norm"] = _clip_norm(g_actor, config.max_grad_norm)
            stats["critic_grad_norm"] = _clip_norm(g_critic, config.max_grad_norm)
            actor_opt.step(actor.params, g_actor)
            critic_opt.step(critic.params, g_critic)
            if config.quantize:
                quantize(actor.params)
                quantize(critic.params)
            for k, v in stats.items():
                totals[k] = totals.get(k, 0.0) + v
            n_mb += 1
        epochs.append({k: v / n_mb for k, v in totals.items()})
    diagnostics = dict(epochs[-1])
    diagnostics["epochs"] = epochs
    return actor, critic, diagnostics
