from .ppo import (
    Batch,
    Critic,
    Episode,
    PPOConfig,
    PPOUpdateError,
    Transition,
    collect_rollouts,
    compute_gae,
    init_critic,
    ppo_update,
)
from .reward import (
    CriticLayout,
    DegenerateWorldError,
    Reward,
    RewardWeights,
    build_critic_input,
    compute_reward,
)

__all__ = [
    "Batch",
    "Critic",
    "CriticLayout",
    "DegenerateWorldError",
    "Episode",
    "PPOConfig",
    "PPOUpdateError",
    "Reward",
    "RewardWeights",
    "Transition",
    "build_critic_input",
    "collect_rollouts",
    "compute_gae",
    "compute_reward",
    "init_critic",
    "ppo_update",
]
