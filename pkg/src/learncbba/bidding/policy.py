"""Bidding policies: the classical scorer and the NAM / LSTM neural bidders."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ..consensus import AgentState
from ..world import WorldInstance
from . import networks as nn
from .observation import FEATURE_SPEC, N_FEATURES, Observation, build_observation, marginal_costs

ARCHITECTURES = ("classic", "nam", "lstm")
LOG_2PI = math.log(2.0 * math.pi)


@dataclass
class PolicyParameters:
    arch: str
    params: dict[str, np.ndarray] = field(default_factory=dict)
    hyper: dict = field(default_factory=dict)
    feature_spec: tuple[str, ...] = FEATURE_SPEC

    def __post_init__(self) -> None:
        if self.arch not in ARCHITECTURES:
            raise ValueError(f"unknown architecture {self.arch!r}; expected one of {ARCHITECTURES}")
        self.feature_spec = tuple(self.feature_spec)
        check_shapes(self)

    @property
    def n_features(self) -> int:
        return len(self.feature_spec)

    @property
    def log_std(self) -> float:
        return float(self.params["policy.log_std"][0])

    def copy(self) -> "PolicyParameters":
        return PolicyParameters(
            self.arch,
            {k: v.copy() for k, v in self.params.items()},
            dict(self.hyper),
            self.feature_spec,
        )


def expected_shapes(arch: str, hyper: dict, n_features: int) -> dict[str, tuple[int, ...]]:
    if arch == "classic":
        return {}
    if arch == "nam":
        h = hyper["hidden"]
        shapes = {
            "nam.w1": (n_features, h),
            "nam.b1": (n_features, h),
            "nam.w2": (n_features, h, h),
            "nam.b2": (n_features, h),
            "nam.w3": (n_features, h),
            "nam.b3": (n_features,),
        }
    else:
        h, m = hyper["hidden"], hyper["head"]
        shapes = {
            "lstm.wx": (n_features, 4 * h),
            "lstm.wh": (h, 4 * h),
            "lstm.b": (4 * h,),
            "head.w1": (h, m),
            "head.b1": (m,),
            "head.w2": (m,),
            "head.b2": (1,),
        }
    shapes["policy.log_std"] = (1,)
    return shapes


def check_shapes(policy: PolicyParameters) -> None:
    want = expected_shapes(policy.arch, policy.hyper, policy.n_features)
    have = {k: tuple(v.shape) for k, v in policy.params.items()}
    if want != have:
        raise ValueError(f"{policy.arch} parameters do not match the architecture: {have} vs {want}")


def init_policy(
    arch: str,
    rng: np.random.Generator | int = 0,
    *,
    hidden: int | None = None,
    head: int = 32,
    log_std: float = math.log(0.05),
) -> PolicyParameters:
    if isinstance(rng, (int, np.integer)):
        rng = np.random.default_rng(rng)
    if arch == "classic":
        return PolicyParameters("classic")
    if arch == "nam":
        hyper = {"hidden": hidden or 16}
        params = nn.init_nam(rng, N_FEATURES, hyper["hidden"])
    elif arch == "lstm":
        hyper = {"hidden": hidden or 64, "head": head}
        params = nn.init_lstm(rng, N_FEATURES, hyper["hidden"], head)
    else:
        raise ValueError(f"unknown architecture {arch!r}")
    params["policy.log_std"] = np.array([log_std])
    return PolicyParameters(arch, params, hyper)


@dataclass
class RecurrentContext:
    hidden: np.ndarray
    cell: np.ndarray

    @classmethod
    def zeros(cls, n_tasks: int, hidden: int) -> "RecurrentContext":
        return cls(np.zeros((n_tasks, hidden)), np.zeros((n_tasks, hidden)))


def _features(policy: PolicyParameters, obs: Observation | np.ndarray) -> np.ndarray:
    x = obs.features if isinstance(obs, Observation) else np.asarray(obs, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != policy.n_features:
        raise ValueError(f"observation shape {x.shape} does not fit {policy.n_features} features")
    return x


def nam_forward(policy: PolicyParameters, obs: Observation | np.ndarray) -> np.ndarray:
    """Bids ``softplus(sum_k g_k(x_jk))`` for every task row."""
    if policy.arch != "nam":
        raise ValueError(f"nam_forward needs a nam policy, got {policy.arch}")
    return nn.softplus(nn.nam_logits(policy.params, _features(policy, obs)))


def lstm_forward(
    policy: PolicyParameters, obs: Observation | np.ndarray, ctx: RecurrentContext
) -> tuple[np.ndarray, RecurrentContext]:
    if policy.arch != "lstm":
        raise ValueError(f"lstm_forward needs an lstm policy, got {policy.arch}")
    x = _features(policy, obs)
    H = policy.hyper["hidden"]
    if ctx.hidden.shape != (len(x), H) or ctx.cell.shape != (len(x), H):
        raise ValueError(f"context shape {ctx.hidden.shape} does not match ({len(x)}, {H})")
    h, c, _ = nn.lstm_cell(policy.params, x, ctx.hidden, ctx.cell)
    logits, _ = nn.lstm_head(policy.params, h)
    return nn.softplus(logits), RecurrentContext(h, c)


def classic_bid(state: AgentState, world: WorldInstance) -> np.ndarray:
    """``exp(-dD / diag)`` with dD the cheapest-insertion cost into the current path.

    Bids are capped at the lowest bid already in the bundle so that a growing
    bundle never produces a stronger bid than the tasks it already holds.
    """
    bids = np.exp(-marginal_costs(state, world) / world.diagonal)
    if state.bundle:
        bids = np.minimum(bids, state.winning_bids[state.bundle].min())
    return bids


def gaussian_log_prob(action: np.ndarray, mean: np.ndarray, log_std: float) -> float:
    z = (action - mean) / math.exp(log_std)
    return float(-0.5 * (z @ z) - action.size * (log_std + 0.5 * LOG_2PI))


def policy_bid(
    policy: PolicyParameters,
    state: AgentState,
    world: WorldInstance,
    ctx: RecurrentContext | None = None,
    stochastic: bool = False,
    rng: np.random.Generator | None = None,
) -> tuple[np.ndarray, float | None, RecurrentContext | None]:
    """Bid vector for one agent.

    Deterministic mode returns the mean bid and no log-probability.  The
    stochastic mode, used only while collecting training rollouts, draws each
    bid from a Gaussian around the mean with the policy's global log-std.
    """
    if policy.arch == "classic":
        return classic_bid(state, world), None, ctx
    obs = build_observation(state, world)
    if policy.arch == "nam":
        mean = nam_forward(policy, obs)
    else:
        if ctx is None:
            ctx = RecurrentContext.zeros(world.n_tasks, policy.hyper["hidden"])
        mean, ctx = lstm_forward(policy, obs, ctx)
    if not stochastic:
        return mean, None, ctx
    if rng is None:
        raise ValueError("stochastic bidding needs an rng")
    log_std = policy.log_std
    action = mean + math.exp(log_std) * rng.standard_normal(mean.shape)
    action = np.nan_to_num(action, nan=0.0, posinf=1e6, neginf=-1e6)
    return action, gaussian_log_prob(action, mean, log_std), ctx


# -- bidder objects plugged into the protocol ---------------------------------


class ClassicBidder:
    name = "classic"

    def reset(self, world: WorldInstance) -> None:
        pass

    def bid(self, state: AgentState, world: WorldInstance, iteration: int) -> np.ndarray:
        return classic_bid(state, world)


@dataclass
class Step:
    agent: int
    iteration: int
    features: np.ndarray
    action: np.ndarray
    log_prob: float


class NeuralBidder:
    """Wraps a neural policy; keeps one recurrent context per agent per world.

    With ``stochastic=True`` every call samples exploratory bids and, when
    ``record`` is set, appends a :class:`Step` for the trainer.
    """

    def __init__(
        self,
        policy: PolicyParameters,
        *,
        name: str | None = None,
        stochastic: bool = False,
        rng: np.random.Generator | None = None,
        record: bool = False,
    ) -> None:
        if policy.arch == "classic":
            raise ValueError("use ClassicBidder for the classic policy")
        self.policy = policy
        self.name = name or policy.arch
        self.stochastic = stochastic
        self.rng = rng
        self.record = record
        self.steps: list[Step] = []
        self._ctx: dict[int, RecurrentContext] = {}

    def reset(self, world: WorldInstance) -> None:
        self._ctx = {}
        self.steps = []

    def bid(self, state: AgentState, world: WorldInstance, iteration: int) -> np.ndarray:
        ctx = self._ctx.get(state.agent_id)
        if self.record:
            obs = build_observation(state, world)
        bids, logp, ctx = policy_bid(self.policy, state, world, ctx, self.stochastic, self.rng)
        if ctx is not None:
            self._ctx[state.agent_id] = ctx
        if self.record:
            self.steps.append(Step(state.agent_id, iteration, obs.features, bids, logp))
        return bids


def make_bidder(policy: PolicyParameters, name: str | None = None):
    if policy.arch == "classic":
        return ClassicBidder()
    return NeuralBidder(policy, name=name)
