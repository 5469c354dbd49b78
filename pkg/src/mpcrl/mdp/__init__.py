from .core import (
    Environment,
    PerformanceEstimate,
    PolicyInterface,
    RolloutError,
    Trajectory,
    Transition,
    discounted_return,
    episode_streams,
    estimate_performance,
    ordered_map,
    reward_to_go,
    rewards_to_go,
    rollout,
)
from .dp import (
    DiscreteMDP,
    bellman_optimality,
    bellman_residual,
    enumerate_optimal_policy,
    finite_horizon_value,
    greedy_from_q,
    load_mdp,
    policy_actions,
    policy_evaluation,
    policy_value_direct,
    save_mdp,
    value_iteration,
)
from .envs import (
    ConstrainedIntegratorEnv,
    LinearGaussianEnv,
    PendulumEnv,
    TabularEnv,
    chainworld,
    chainworld_mdp,
    ENV_IDS,
    make_env,
)
