"""Rollouts, ground-truth critical-state annotation and dataset generation.

Frame convention: an episode with ``n`` actions records ``n + 1`` frames
(the reset observation plus one per action, terminal frame included).
``rewards[t]`` is the reward of the action taken at frame ``t`` and the last
entry is 0. An event is stamped with the index of the first frame showing its
effect, so the frame facing the key sits at ``t - 1`` for a pickup at ``t``.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from ..core import CONTINUOUS, DISCRETE, Dataset, Episode, compute_return
from .env import Action, EnvConfig, EventKind, GenerationError, GridState, observe, reset, step
from .planner import PlanningError, cost_to_go
from .policies import DecoyPolicy, ExploratoryPolicy, OptimalPolicy

CRITICAL_KINDS = (EventKind.pickup_key.value, EventKind.open_door_with_key.value, EventKind.open_locked_door.value)

Policy = Callable[[GridState, np.random.Generator], Action]


@dataclass
class Trace:
    frames: list
    actions: list
    rewards: list
    events: list
    states: list
    success: bool

    @property
    def n_actions(self) -> int:
        return len(self.actions)


def policy_rng(seed: int, stream: int = 0) -> np.random.Generator:
    return np.random.default_rng([int(seed) % 2**63, stream])


def run_policy(
    policy: Policy,
    cfg: EnvConfig,
    seed: int,
    rng: np.random.Generator | None = None,
    override: Callable[[int, Action], Action] | None = None,
    keep_states: bool = False,
    horizon: int | None = None,
) -> Trace:
    """Roll ``policy`` out from ``reset(cfg, seed)``.

    ``override(t, action)`` may replace the action chosen at step ``t``;
    ``horizon`` stops the episode early (counted as a failure).
    """
    if rng is None:
        rng = policy_rng(seed)
    if hasattr(policy, "reset"):
        policy.reset()
    s = reset(cfg, seed)
    frames = [observe(s)]
    actions, rewards, events, states = [], [], [], [s] if keep_states else []
    success = False
    limit = cfg.max_steps if horizon is None else min(horizon, cfg.max_steps)
    t = 0
    while not s.done and t < limit:
        a = Action(policy(s, rng))
        if override is not None:
            a = Action(override(t, a))
        s, r, done, ev = step(s, a)
        actions.append(int(a))
        rewards.append(r)
        frames.append(observe(s))
        if keep_states:
            states.append(s)
        if ev is not None:
            events.append((t + 1, ev.value))
            if ev == EventKind.reach_goal:
                success = True
        t += 1
    rewards.append(0.0)
    return Trace(frames, actions, rewards, events, states, success)


def trace_to_episode(tr: Trace, seed: int, gamma: float, policy_id: int, label_kind: str = DISCRETE) -> Episode:
    rewards = np.asarray(tr.rewards, dtype=np.float64)
    if label_kind == DISCRETE:
        label: int | float = int(tr.success)
    else:
        label = compute_return(rewards, gamma)
    return Episode(
        frames=np.stack(tr.frames),
        rewards=rewards,
        return_label=label,
        policy_id=policy_id,
        events=tuple(tr.events),
        gamma=gamma,
        seed=seed,
        actions=np.array(tr.actions + [-1], dtype=np.int8),
    )


def rollout(
    policy: Policy,
    cfg: EnvConfig,
    seed: int,
    gamma: float = 0.99,
    label_kind: str = DISCRETE,
    policy_id: int | None = None,
    horizon: int | None = None,
) -> Episode:
    if policy_id is None:
        policy_id = getattr(policy, "policy_id", 0)
    tr = run_policy(policy, cfg, seed, horizon=horizon)
    return trace_to_episode(tr, seed, gamma, policy_id, label_kind)


def annotate_critical(e: Episode, window: int = 1) -> np.ndarray:
    """Binary ground truth: ``[t_e - window, t_e]`` around every critical event."""
    if window < 0:
        raise ValueError("window must be >= 0")
    out = np.zeros(e.T, dtype=np.int64)
    for t, kind in e.events:
        if kind in CRITICAL_KINDS:
            out[max(0, t - window) : t + 1] = 1
    return out


def event_windows(e: Episode, kind: str, window: int = 1) -> np.ndarray:
    """Boolean steps in ``[t_e - window, t_e]`` for events of one kind."""
    out = np.zeros(e.T, dtype=bool)
    for t, k in e.events:
        if k == kind:
            out[max(0, t - window) : t + 1] = True
    return out


@dataclass(frozen=True)
class GenerationConfig:
    """How a dataset is sampled.

    ``success_fail`` (Grid World-S): successes mix optimal and exploratory
    rollouts; failures are exploratory rollouts cut at a random horizon that
    did not reach the goal. ``policies`` (Grid World-M): one class per
    behaviour policy (0 = optimal, 1 = decoy detour).
    """

    mode: str = "success_fail"
    n_success: int = 1200
    n_fail: int = 1200
    optimal_fraction: float = 0.5
    success_epsilon: float = 0.2
    fail_epsilon: float = 0.5
    fail_horizon: tuple[int, int] = (12, 40)
    policy_counts: tuple[int, ...] = (1200, 1195)
    label_kind: str = DISCRETE
    gamma: float = 0.99
    seed: int = 0
    max_seed_tries: int = 20

    def __post_init__(self):
        object.__setattr__(self, "fail_horizon", tuple(self.fail_horizon))
        object.__setattr__(self, "policy_counts", tuple(self.policy_counts))
        if self.mode not in ("success_fail", "policies"):
            raise ValueError(f"unknown generation mode {self.mode!r}")
        if self.mode == "success_fail" and (self.n_success < 1 or self.n_fail < 1):
            raise ValueError("counts must be >= 1")
        if self.mode == "policies" and (len(self.policy_counts) < 2 or min(self.policy_counts) < 1):
            raise ValueError("need at least two policies with count >= 1")
        if not 0.0 <= self.optimal_fraction <= 1.0:
            raise ValueError("optimal_fraction must be in [0, 1]")
        lo, hi = self.fail_horizon
        if not 1 <= lo <= hi:
            raise ValueError("fail_horizon must satisfy 1 <= lo <= hi")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["fail_horizon"] = list(self.fail_horizon)
        d["policy_counts"] = list(self.policy_counts)
        return d


def _seed_stream(base: int, stream: int):
    rng = np.random.default_rng([int(base), stream])
    while True:
        yield int(rng.integers(2**63))


def _collect(n: int, seeds, make: Callable[[int], Episode | None], max_tries: int) -> list[Episode]:
    out = []
    tries = 0
    for seed in seeds:
        if len(out) == n:
            break
        tries += 1
        if tries > n * max_tries:
            raise GenerationError(f"only {len(out)}/{n} episodes after {tries - 1} seeds")
        try:
            ep = make(seed)
        except (GenerationError, PlanningError):
            continue
        if ep is not None:
            out.append(ep)
    if len(out) < n:
        raise GenerationError(f"seed list exhausted with {len(out)}/{n} episodes")
    return out


def generate_dataset(cfg: EnvConfig, gen: GenerationConfig, seeds: Sequence[int] | None = None) -> Dataset:
    """Sample a dataset deterministically from ``gen.seed`` (or an explicit seed list)."""
    label_kind = gen.label_kind
    manifest = {
        "env_config": cfg.to_dict(),
        "env_config_hash": cfg.digest(),
        "generation": gen.to_dict(),
        "generator_seed": gen.seed,
    }

    def seeds_for(stream):
        if seeds is not None:
            # explicit seeds are shared round-robin across streams
            return iter(list(seeds)[stream::4])
        return _seed_stream(gen.seed, stream)

    episodes: list[Episode] = []
    if gen.mode == "success_fail":
        n_opt = int(round(gen.n_success * gen.optimal_fraction))
        n_exp = gen.n_success - n_opt
        expl = ExploratoryPolicy(gen.success_epsilon)
        fail_pol = ExploratoryPolicy(gen.fail_epsilon)

        def make_opt(seed):
            return rollout(OptimalPolicy(), cfg, seed, gen.gamma, label_kind, policy_id=0)

        def make_expl(seed):
            ep = rollout(expl, cfg, seed, gen.gamma, label_kind, policy_id=1)
            return ep if _succeeded(ep) else None

        def make_fail(seed):
            lo, hi = gen.fail_horizon
            h = int(policy_rng(seed, 7).integers(lo, hi + 1))
            ep = rollout(fail_pol, cfg, seed, gen.gamma, label_kind, policy_id=1, horizon=h)
            return None if _succeeded(ep) else ep

        episodes += _collect(n_opt, seeds_for(0), make_opt, gen.max_seed_tries)
        episodes += _collect(n_exp, seeds_for(1), make_expl, gen.max_seed_tries)
        episodes += _collect(gen.n_fail, seeds_for(2), make_fail, gen.max_seed_tries)
    else:
        makers = [OptimalPolicy, DecoyPolicy]
        for pid, count in enumerate(gen.policy_counts):
            factory = makers[pid % len(makers)]

            def make(seed, pid=pid, factory=factory):
                ep = rollout(factory(policy_id=pid), cfg, seed, gen.gamma, label_kind, policy_id=pid)
                if not _succeeded(ep):
                    return None
                return ep if label_kind == CONTINUOUS else _relabel(ep, pid)

            episodes += _collect(count, seeds_for(pid), make, gen.max_seed_tries)
    return Dataset(tuple(episodes), label_kind, None, manifest)


def _succeeded(ep: Episode) -> bool:
    return any(k == EventKind.reach_goal.value for _, k in ep.events)


def _relabel(ep: Episode, label: int) -> Episode:
    from dataclasses import replace

    return replace(ep, return_label=int(label))


def optimal_length(cfg: EnvConfig, seed: int) -> int:
    return int(cost_to_go(reset(cfg, seed)))


def replay_states(e: Episode, cfg: EnvConfig) -> list[GridState]:
    """Environment states behind each frame, rebuilt from the recorded actions."""
    if e.actions is None:
        raise ValueError("episode has no recorded actions to replay")
    s = reset(cfg, e.seed)
    states = [s]
    for a in e.actions[: e.n_valid - 1]:
        if a < 0:
            break
        s, *_ = step(s, int(a))
        states.append(s)
    if len(states) != e.n_valid:
        raise ValueError(f"replay produced {len(states)} states for {e.n_valid} frames")
    return states


def actionable_distance(s: GridState) -> int:
    """Shortest walking distance from the agent to a cell next to a door, key or ball."""
    from collections import deque

    from .env import BALL, DOOR, EMPTY, KEY, OPEN

    H, W = s.kind.shape
    walkable = (s.kind == EMPTY) | ((s.kind == DOOR) & (s.door == OPEN))
    targets = (s.kind == DOOR) | (s.kind == KEY) | (s.kind == BALL)
    near = np.zeros_like(walkable)
    near[1:] |= targets[:-1]
    near[:-1] |= targets[1:]
    near[:, 1:] |= targets[:, :-1]
    near[:, :-1] |= targets[:, 1:]
    near &= walkable
    x, y = s.agent_pos
    dist = {(x, y): 0}
    queue = deque([(x, y)])
    while queue:
        cx, cy = queue.popleft()
        if near[cy, cx]:
            return dist[(cx, cy)]
        for dx, dy in ((1, 0), (-1, 0), (0, 1), (0, -1)):
            nx, ny = cx + dx, cy + dy
            if 0 <= nx < W and 0 <= ny < H and walkable[ny, nx] and (nx, ny) not in dist:
                dist[(nx, ny)] = dist[(cx, cy)] + 1
                queue.append((nx, ny))
    return 10**6
