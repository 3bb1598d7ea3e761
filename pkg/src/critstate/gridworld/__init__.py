from .data import (
    CRITICAL_KINDS,
    actionable_distance,
    GenerationConfig,
    Trace,
    annotate_critical,
    event_windows,
    generate_dataset,
    optimal_length,
    replay_states,
    rollout,
    run_policy,
)
from .env import (
    Action,
    ContractViolation,
    EnvConfig,
    EventKind,
    GenerationError,
    GridState,
    observe,
    reset,
    step,
)
from .planner import PlanningError, cost_to_go, plan_optimal
from .policies import (
    CommittedOptimalPolicy,
    DecoyPolicy,
    ExploratoryPolicy,
    OptimalPolicy,
    RandomPolicy,
    exploratory_action,
    policy_b_action,
)
