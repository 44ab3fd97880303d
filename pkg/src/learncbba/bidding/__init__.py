from .checkpoint import load_policy, save_policy
from .observation import FEATURE_SPEC, N_FEATURES, Observation, build_observation
from .policy import (
    ARCHITECTURES,
    ClassicBidder,
    NeuralBidder,
    PolicyParameters,
    RecurrentContext,
    classic_bid,
    init_policy,
    lstm_forward,
    make_bidder,
    nam_forward,
    policy_bid,
)

__all__ = [
    "ARCHITECTURES",
    "FEATURE_SPEC",
    "N_FEATURES",
    "ClassicBidder",
    "NeuralBidder",
    "Observation",
    "PolicyParameters",
    "RecurrentContext",
    "build_observation",
    "classic_bid",
    "init_policy",
    "load_policy",
    "lstm_forward",
    "make_bidder",
    "nam_forward",
    "policy_bid",
    "save_policy",
]
