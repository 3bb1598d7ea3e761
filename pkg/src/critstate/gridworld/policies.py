"""Scripted behaviour policies.

A policy is any callable ``policy(state, rng) -> Action``. Policies that keep
per-episode memory expose ``reset()``, which ``rollout`` calls at episode start.
"""
from __future__ import annotations

import numpy as np

from .env import N_ACTIONS, Action, GridState
from .planner import action_costs, choose_action, navigate, plan_optimal, value_maps


def exploratory_action(s: GridState, epsilon: float, rng: np.random.Generator) -> Action:
    """Uniform random action with probability ``epsilon``, otherwise the optimal one."""
    if not 0.0 <= epsilon <= 1.0:
        raise ValueError("epsilon must be in [0, 1]")
    if rng.random() < epsilon:
        return Action(int(rng.integers(N_ACTIONS)))
    return plan_optimal(s)


def decoy_target(s: GridState) -> tuple[int, int]:
    """Cell three moves inside the decoy room, straight in from its door."""
    if s.layout.decoy_room is None:
        raise ValueError("this layout has no spare room to use as a decoy")
    room = s.layout.rooms[s.layout.decoy_room]
    dx, dy = room.door
    step = -1 if room.side == 0 else 1
    depth = min(3, room.x1 - room.x0 + 1)
    return dx + step * depth, dy


def policy_b_action(s: GridState, rng: np.random.Generator, decoy_done: bool) -> Action:
    """Optimal until the key is picked up, then a detour into the decoy room."""
    if s.carrying is None or decoy_done:
        return plan_optimal(s)
    return navigate(s, decoy_target(s))


class OptimalPolicy:
    """Shortest-plan policy; ``tie_seed`` selects among equally short actions."""

    policy_id = 0

    def __init__(self, tie_seed: int | None = None, policy_id: int = 0):
        self.tie_seed = tie_seed
        self.policy_id = policy_id

    def __call__(self, s: GridState, rng) -> Action:
        return plan_optimal(s, self.tie_seed)

    def __repr__(self):
        return f"OptimalPolicy(tie_seed={self.tie_seed})"


class ExploratoryPolicy:
    def __init__(self, epsilon: float, policy_id: int = 0):
        if not 0.0 <= epsilon <= 1.0:
            raise ValueError("epsilon must be in [0, 1]")
        self.epsilon = epsilon
        self.policy_id = policy_id

    def __call__(self, s: GridState, rng) -> Action:
        return exploratory_action(s, self.epsilon, rng)

    def __repr__(self):
        return f"ExploratoryPolicy(epsilon={self.epsilon})"


class DecoyPolicy:
    """Policy-B: after picking up the key it wanders into a decoy room first."""

    def __init__(self, policy_id: int = 1):
        self.policy_id = policy_id
        self.decoy_done = False

    def reset(self):
        self.decoy_done = False

    def __call__(self, s: GridState, rng) -> Action:
        if s.carrying is not None and not self.decoy_done and s.agent_pos == decoy_target(s):
            self.decoy_done = True
        return policy_b_action(s, rng, self.decoy_done)

    def __repr__(self):
        return "DecoyPolicy()"


class RandomPolicy:
    def __init__(self, policy_id: int = 0):
        self.policy_id = policy_id

    def __call__(self, s: GridState, rng) -> Action:
        return Action(int(rng.integers(N_ACTIONS)))


class CommittedOptimalPolicy:
    """Optimal executor that commits to a sub-goal once its interaction is issued.

    Progress is tracked by the actions it *sends* (pickup at the key, toggle at
    the locked door) instead of being re-read from the state, as open-loop
    scripted controllers do. Unperturbed it acts exactly like the optimal
    policy. A perturbed interaction is never retried, so the episode fails,
    while perturbed movement is recovered by re-planning.
    """

    def __init__(self, tie_seed: int | None = None, policy_id: int = 0):
        self.tie_seed = tie_seed
        self.policy_id = policy_id
        self.stage = 0

    def reset(self):
        self.stage = 0

    def __call__(self, s: GridState, rng) -> Action:
        costs = action_costs(s, value_maps(s), stage=self.stage)
        if not np.isfinite(min(costs.values())):
            return Action.turn_left
        a = choose_action(costs, self.tie_seed, s)
        if self.stage == 0 and a == Action.pickup:
            self.stage = 1
        elif self.stage == 1 and a == Action.toggle and s.front_pos() == s.layout.locked_door:
            self.stage = 2
        return a

    def __repr__(self):
        return f"CommittedOptimalPolicy(tie_seed={self.tie_seed})"
