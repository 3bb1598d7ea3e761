"""Downstream uses of a trained detector.

* Action attacks: perturb the policy's action at the detector's top-k steps of
  a replayed episode and measure the drop in success rate.
* Policy comparison: retarget the predictor to tell two policies apart so the
  detector points at the states where their behaviour differs.
* Adaptive-lookahead DQN: multi-step targets whose horizon ends at the most
  critical upcoming state.
"""
from __future__ import annotations

import logging
import math
import warnings
from collections import deque
from dataclasses import asdict, dataclass, field, replace

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .core import DISCRETE, Dataset, concat_datasets
from .evaluation import NORMAL_DISTANCE, detect, top_k_steps
from .gridworld import (
    Action,
    CommittedOptimalPolicy,
    EnvConfig,
    ExploratoryPolicy,
    EventKind,
    actionable_distance,
    observe,
    replay_states,
    reset,
    run_policy,
    step,
)
from .gridworld.data import policy_rng, trace_to_episode
from .gridworld.env import N_ACTIONS
from .models import SequenceNet
from .training import LossWeights, TrainConfig, train

log = logging.getLogger(__name__)

CRITICAL = "critical"
RANDOM = "random"


# --- attacks ------------------------------------------------------------------------


@dataclass(frozen=True)
class AttackOutcome:
    success: bool
    ret: float
    n_steps: int


def perturb_action(a: int, rng: np.random.Generator) -> Action:
    """Uniform over the actions other than ``a``."""
    other = int(rng.integers(N_ACTIONS - 1))
    return Action(other if other < int(a) else other + 1)


def _outcome(tr) -> AttackOutcome:
    return AttackOutcome(bool(tr.success), float(sum(tr.rewards)), tr.n_actions)


def clean_rollout(policy, cfg: EnvConfig, seed: int):
    """Pass 1: the unperturbed trace of ``policy`` from ``reset(cfg, seed)``."""
    return run_policy(policy, cfg, seed, rng=policy_rng(seed))


def attack_episode(policy, cfg: EnvConfig, seed: int, attack_steps, rng: np.random.Generator) -> AttackOutcome:
    """Pass 2: replay the same seed, perturbing the action at each step in ``attack_steps``."""
    steps = {int(t) for t in attack_steps}

    def override(t, a):
        return perturb_action(a, rng) if t in steps else a

    tr = run_policy(policy, cfg, seed, rng=policy_rng(seed), override=override if steps else None)
    return _outcome(tr)


@dataclass
class AttackReport:
    n_episodes: int
    success_rate_clean: float
    success_rate_attacked: float
    drop: float
    drop_std: float
    k: int
    mode: str
    policy: str
    per_seed: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)


def _attack_rng(seed: int, episode: int, mode: str) -> np.random.Generator:
    return np.random.default_rng([int(seed), int(episode), 0 if mode == CRITICAL else 1])


def choose_attack_steps(mask, n_actions: int, k: int, mode: str, rng: np.random.Generator) -> list[int]:
    """Step indices to perturb; the terminal frame has no action and is never chosen."""
    if k <= 0 or n_actions == 0:
        return []
    if k > n_actions:
        warnings.warn(f"k={k} exceeds the episode's {n_actions} actions; clipped", stacklevel=2)
        k = n_actions
    if mode == CRITICAL:
        return top_k_steps(np.asarray(mask)[:n_actions], k)
    if mode == RANDOM:
        return sorted(int(i) for i in rng.choice(n_actions, size=k, replace=False))
    raise ValueError(f"unknown attack mode {mode!r}")


def attack_eval(
    D: SequenceNet | None,
    policy,
    cfg: EnvConfig,
    episode_seeds,
    k: int = 3,
    mode: str = CRITICAL,
    rng_seeds=(0, 1, 2),
    policy_tag: str = "",
) -> AttackReport:
    """Clean vs attacked success rate of ``policy`` over ``episode_seeds``.

    Critical mode ranks each pass-1 episode with ``D``; random mode draws k
    step indices uniformly. The drop is averaged over ``rng_seeds``.
    """
    if mode == CRITICAL and D is None:
        raise ValueError("critical mode needs a detector")
    # D may also be any callable mapping a Dataset to per-episode masks
    episode_seeds = [int(s) for s in episode_seeds]
    traces = [clean_rollout(policy, cfg, s) for s in episode_seeds]
    clean = np.array([tr.success for tr in traces], dtype=float)
    masks = None
    if mode == CRITICAL:
        eps = tuple(trace_to_episode(tr, s, 1.0, 0) for tr, s in zip(traces, episode_seeds))
        data = Dataset(eps)
        masks = detect(D, data) if isinstance(D, nn.Module) else D(data)
    per_seed = []
    for r in rng_seeds:
        wins = []
        for i, (tr, s) in enumerate(zip(traces, episode_seeds)):
            rng = _attack_rng(r, i, mode)
            steps = choose_attack_steps(None if masks is None else masks[i], tr.n_actions, k, mode, rng)
            wins.append(attack_episode(policy, cfg, s, steps, rng).success)
        attacked = 100.0 * float(np.mean(wins))
        per_seed.append({"rng_seed": int(r), "success_rate_attacked": attacked, "drop": 100.0 * clean.mean() - attacked})
    drops = [p["drop"] for p in per_seed]
    return AttackReport(
        n_episodes=len(episode_seeds),
        success_rate_clean=100.0 * float(clean.mean()),
        success_rate_attacked=float(np.mean([p["success_rate_attacked"] for p in per_seed])),
        drop=float(np.mean(drops)),
        drop_std=float(np.std(drops)),
        k=int(k),
        mode=mode,
        policy=policy_tag or repr(policy),
        per_seed=per_seed,
    )


def attack_policy(tie_seed: int | None = None) -> CommittedOptimalPolicy:
    return CommittedOptimalPolicy(tie_seed=tie_seed)


# --- policy comparison --------------------------------------------------------------


def policy_labelled(dataset_a: Dataset, dataset_b: Dataset, swap: bool = False) -> Dataset:
    """Concatenate two datasets with labels 0/1 (1/0 when ``swap``) by origin."""
    if not len(dataset_a) or not len(dataset_b):
        raise ValueError("both policies need at least one episode")
    if dataset_a.frame_shape != dataset_b.frame_shape:
        raise ValueError("datasets disagree on frame shape")
    la, lb = (1, 0) if swap else (0, 1)
    a = Dataset(tuple(replace(e, return_label=la) for e in dataset_a.episodes), DISCRETE)
    b = Dataset(tuple(replace(e, return_label=lb) for e in dataset_b.episodes), DISCRETE)
    manifest = {k: v for k, v in dataset_a.manifest.items() if k != "counts"}
    manifest["labels"] = "policy"
    return concat_datasets([a, b], **manifest)


def train_policy_classifier(dataset_a: Dataset, dataset_b: Dataset, spec, cfg: TrainConfig, w=LossWeights(), **kw):
    """Run the usual training pipeline with policy identity as the label."""
    data = policy_labelled(dataset_a, dataset_b)
    return train(data, replace(spec, head="classifier", n_classes=2), replace(cfg, label_kind=DISCRETE), w, **kw)


def region_confidence(masks, dataset: Dataset, cfg: EnvConfig) -> dict:
    """Mean confidence (x100) in decoy-room states and in corridor normal states."""
    decoy, corridor = [], []
    for e, m in zip(dataset.episodes, masks):
        states = replay_states(e, cfg)
        for t, s in enumerate(states[: len(m)]):
            lay = s.layout
            if lay.decoy_room is not None and lay.rooms[lay.decoy_room].contains(s.agent_pos):
                decoy.append(100.0 * m[t])
            elif lay.in_corridor(s.agent_pos) and actionable_distance(s) > NORMAL_DISTANCE:
                corridor.append(100.0 * m[t])
    return {
        "decoy_mean": float(np.mean(decoy)) if decoy else None,
        "corridor_normal_mean": float(np.mean(corridor)) if corridor else None,
        "n_decoy": len(decoy),
        "n_corridor": len(corridor),
    }


# --- adaptive lookahead DQN ---------------------------------------------------------

ADAPTIVE = "adaptive"
FIXED = "fixed"
RANDOM_N = "random"


def adaptive_lookahead(window, n_max: int = 5) -> int:
    """1-based offset of the most confident upcoming step; ties pick the nearest, empty gives 1."""
    w = np.asarray(window, dtype=np.float64)[:n_max]
    if w.size == 0:
        return 1
    return int(np.argmax(w)) + 1


def n_step_target(rewards, gamma: float, n: int, bootstrap: float, terminal: bool) -> float:
    """Sum of the first n discounted rewards plus gamma^n * bootstrap.

    ``rewards`` holds the rewards from step j to the end of the episode; if the
    episode ends within n steps the horizon is cut there and, when ``terminal``,
    no bootstrap is added.
    """
    n_eff = min(int(n), len(rewards))
    total = 0.0
    for i in range(n_eff):
        total += gamma**i * float(rewards[i])
    if n_eff == len(rewards) and terminal:
        return total
    return total + gamma**n_eff * float(bootstrap)


def n_step_targets(rewards: torch.Tensor, n: torch.Tensor, remaining: torch.Tensor, next_value: torch.Tensor,
                   terminal: torch.Tensor, gamma: float) -> torch.Tensor:
    """Batched multi-step targets.

    rewards: [B, n_max] rewards from step j on (zero past the episode end);
    n: requested horizons; remaining: steps left in the episode from j;
    next_value: max_a Q_target at step j + min(n, remaining);
    terminal: whether the episode end is a true terminal.
    """
    n_eff = torch.minimum(n, remaining)
    offsets = torch.arange(rewards.shape[1], device=rewards.device)
    keep = offsets[None, :] < n_eff[:, None]
    disc = gamma ** offsets.to(rewards.dtype)
    ret = (rewards * disc[None, :] * keep).sum(1)
    cut = (n_eff == remaining) & terminal
    boot = torch.where(cut, torch.zeros_like(next_value), gamma ** n_eff.to(rewards.dtype) * next_value)
    return ret + boot


@dataclass(frozen=True)
class DqnConfig:
    n_max: int = 5
    gamma: float = 0.99
    replay_capacity: int = 20000
    batch_size: int = 32
    target_sync: int = 500
    eps_start: float = 1.0
    eps_end: float = 0.05
    eps_decay_steps: int = 15000
    total_steps: int = 40000
    learning_starts: int = 1000
    train_every: int = 1
    learning_rate: float = 5e-4
    lookahead: str = FIXED  # fixed | random | adaptive
    fixed_n: int = 5
    layout_seeds: tuple = (0, 1, 2, 3)
    eval_episodes: int = 40
    eval_epsilon: float = 0.05  # a fully greedy policy can loop forever in a cell
    demo_episodes: int = 200  # expert-with-noise episodes preloaded into replay
    demo_epsilon: float = 0.5

    def __post_init__(self):
        object.__setattr__(self, "layout_seeds", tuple(int(s) for s in self.layout_seeds))
        if self.lookahead not in (FIXED, RANDOM_N, ADAPTIVE):
            raise ValueError(f"unknown lookahead mode {self.lookahead!r}")
        if not 1 <= self.fixed_n <= self.n_max:
            raise ValueError("fixed_n must be in [1, n_max]")
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError("gamma must be in [0, 1]")
        if self.batch_size < 1 or self.total_steps < 0 or self.target_sync < 1:
            raise ValueError("batch_size and target_sync must be >= 1, total_steps >= 0")
        if not self.layout_seeds:
            raise ValueError("need at least one layout seed")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["layout_seeds"] = list(self.layout_seeds)
        return d


def dqn_env_config() -> EnvConfig:
    """Two rooms and a corridor: small enough for a desk-scale DQN."""
    return EnvConfig(grid_size=13, n_room_rows=1, max_steps=60)


class QNet(nn.Module):
    """Small conv encoder and a plain linear head over the egocentric view."""

    def __init__(self, in_channels: int = 3, n_actions: int = N_ACTIONS, width: int = 32):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv2d(in_channels, width, 3, padding=1),
            nn.ReLU(),
            nn.Conv2d(width, width, 3, stride=2, padding=1),
            nn.ReLU(),
            nn.Flatten(),
            nn.Linear(width * 16, 128),
            nn.ReLU(),
        )
        self.head = nn.Linear(128, n_actions)

    def forward(self, obs):  # [B, H, W, C] in [0, 1]
        return self.head(self.body(obs.permute(0, 3, 1, 2)))


@dataclass
class _StoredEpisode:
    obs: np.ndarray  # [T+1, H, W, C] uint8
    actions: np.ndarray  # [T]
    rewards: np.ndarray  # [T]
    terminal: bool
    confidences: np.ndarray | None  # [T+1]


class EpisodeReplay:
    """Whole-episode replay buffer, evicting the oldest episodes beyond capacity."""

    def __init__(self, capacity: int):
        self.capacity = capacity
        self.episodes: deque = deque()
        self.size = 0

    def add(self, ep: _StoredEpisode) -> None:
        if len(ep.actions) == 0:
            return
        self.episodes.append(ep)
        self.size += len(ep.actions)
        while self.size > self.capacity and len(self.episodes) > 1:
            self.size -= len(self.episodes.popleft().actions)

    def sample(self, batch_size: int, rng: np.random.Generator) -> list[tuple[_StoredEpisode, int]]:
        lengths = np.array([len(e.actions) for e in self.episodes], dtype=np.float64)
        idx = rng.choice(len(lengths), size=batch_size, p=lengths / lengths.sum())
        return [(self.episodes[i], int(rng.integers(len(self.episodes[i].actions)))) for i in idx]


def _episode_confidences(D: SequenceNet, obs: np.ndarray) -> np.ndarray:
    frames = torch.as_tensor(obs, dtype=D.spec.torch_dtype)[None] / 255.0
    D.eval()
    with torch.no_grad():
        return D(frames).double().numpy()[0]


def choose_lookahead(ep: _StoredEpisode, j: int, cfg: DqnConfig, rng: np.random.Generator) -> int:
    remaining = len(ep.actions) - j
    if cfg.lookahead == FIXED:
        n = cfg.fixed_n
    elif cfg.lookahead == RANDOM_N:
        n = int(rng.integers(1, cfg.n_max + 1))
    else:
        window = ep.confidences[j + 1 : j + 1 + min(cfg.n_max, remaining)]
        n = adaptive_lookahead(window, cfg.n_max)
    return max(1, min(n, cfg.n_max))


@dataclass
class DqnResult:
    q: QNet
    curve: list  # (env step, episode success, episode return)
    final_success_rate: float
    losses: list = field(default_factory=list)
    lookaheads: list = field(default_factory=list)


def _epsilon(cfg: DqnConfig, t: int) -> float:
    frac = min(1.0, t / max(1, cfg.eps_decay_steps))
    return cfg.eps_start + frac * (cfg.eps_end - cfg.eps_start)


def greedy_success(q: QNet, env_cfg: EnvConfig, seeds, epsilon: float = 0.0, rng=None) -> float:
    """Fraction of episodes (one per seed) in which the greedy Q-policy reaches the ball."""
    rng = rng or np.random.default_rng(0)
    wins = 0
    q.eval()
    for seed in seeds:
        s = reset(env_cfg, int(seed))
        while not s.done:
            if rng.random() < epsilon:
                a = int(rng.integers(N_ACTIONS))
            else:
                with torch.no_grad():
                    obs = torch.as_tensor(observe(s), dtype=torch.float32)[None] / 255.0
                    a = int(q(obs).argmax(1).item())
            s, r, done, ev = step(s, a)
            if ev == EventKind.reach_goal:
                wins += 1
    return wins / max(1, len(list(seeds)))


def demo_episodes(env_cfg: EnvConfig, cfg: DqnConfig, seed: int) -> list[_StoredEpisode]:
    out = []
    policy = ExploratoryPolicy(cfg.demo_epsilon)
    for i in range(cfg.demo_episodes):
        layout = cfg.layout_seeds[i % len(cfg.layout_seeds)]
        tr = run_policy(policy, env_cfg, layout, rng=np.random.default_rng([seed, 13, i]))
        out.append(_StoredEpisode(np.stack(tr.frames), np.array(tr.actions), np.array(tr.rewards[:-1]),
                                  tr.success, None))
    return out


def dqn_train(env_cfg: EnvConfig, D: SequenceNet | None, cfg: DqnConfig, seed: int = 0) -> DqnResult:
    """Multi-step DQN whose lookahead is fixed, random, or set by the detector."""
    if cfg.lookahead == ADAPTIVE and D is None:
        raise ValueError("adaptive lookahead needs a detector")
    torch.manual_seed(seed)
    rng = np.random.default_rng([seed, 11])
    q, q_target = QNet(), QNet()
    q_target.load_state_dict(q.state_dict())
    opt = torch.optim.Adam(q.parameters(), lr=cfg.learning_rate)
    replay = EpisodeReplay(cfg.replay_capacity)
    # random exploration almost never finishes the task, so replay starts with noisy expert play
    for ep in demo_episodes(env_cfg, cfg, seed):
        conf = _episode_confidences(D, ep.obs) if cfg.lookahead == ADAPTIVE else None
        replay.add(replace(ep, confidences=conf))
    curve, losses, lookaheads = [], [], []

    def new_episode():
        layout = cfg.layout_seeds[int(rng.integers(len(cfg.layout_seeds)))]
        s = reset(env_cfg, layout)
        return s, [observe(s)], [], []

    s, obs, acts, rews = new_episode()
    for t in range(cfg.total_steps):
        if rng.random() < _epsilon(cfg, t):
            a = int(rng.integers(N_ACTIONS))
        else:
            q.eval()
            with torch.no_grad():
                a = int(q(torch.as_tensor(obs[-1], dtype=torch.float32)[None] / 255.0).argmax(1).item())
        s, r, done, ev = step(s, a)
        obs.append(observe(s))
        acts.append(a)
        rews.append(r)
        if done:
            o = np.stack(obs)
            conf = _episode_confidences(D, o) if cfg.lookahead == ADAPTIVE else None
            # a timeout is not a true terminal, so its tail still bootstraps
            won = ev == EventKind.reach_goal
            replay.add(_StoredEpisode(o, np.array(acts), np.array(rews, dtype=np.float64), won, conf))
            curve.append((t + 1, bool(won), float(sum(rews))))
            s, obs, acts, rews = new_episode()
        if t >= cfg.learning_starts and replay.size >= cfg.batch_size and t % cfg.train_every == 0:
            losses.append(_learn(q, q_target, opt, replay, cfg, rng, lookaheads))
        if (t + 1) % cfg.target_sync == 0:
            q_target.load_state_dict(q.state_dict())
    final = greedy_success(q, env_cfg, cfg.layout_seeds * max(1, cfg.eval_episodes // len(cfg.layout_seeds)),
                           cfg.eval_epsilon, np.random.default_rng([seed, 12]))
    return DqnResult(q, curve, final, losses, lookaheads)


def _learn(q, q_target, opt, replay: EpisodeReplay, cfg: DqnConfig, rng, lookaheads) -> float:
    batch = replay.sample(cfg.batch_size, rng)
    B = len(batch)
    obs = np.empty((B,) + batch[0][0].obs.shape[1:], np.uint8)
    nxt = np.empty_like(obs)
    acts = np.empty(B, np.int64)
    rew = np.zeros((B, cfg.n_max))
    n = np.empty(B, np.int64)
    remaining = np.empty(B, np.int64)
    terminal = np.empty(B, bool)
    for i, (ep, j) in enumerate(batch):
        T = len(ep.actions)
        n[i] = choose_lookahead(ep, j, cfg, rng)
        remaining[i] = T - j
        seg = ep.rewards[j : j + cfg.n_max]
        rew[i, : len(seg)] = seg
        obs[i] = ep.obs[j]
        nxt[i] = ep.obs[j + min(n[i], T - j)]
        acts[i] = ep.actions[j]
        terminal[i] = ep.terminal
    lookaheads.extend(n.tolist())
    to_t = lambda x: torch.as_tensor(x, dtype=torch.float32) / 255.0
    with torch.no_grad():
        q_target.eval()
        next_value = q_target(to_t(nxt)).max(1).values
        target = n_step_targets(
            torch.as_tensor(rew, dtype=torch.float32), torch.as_tensor(n), torch.as_tensor(remaining),
            next_value, torch.as_tensor(terminal), cfg.gamma,
        )
    q.train()
    pred = q(to_t(obs)).gather(1, torch.as_tensor(acts)[:, None]).squeeze(1)
    loss = F.mse_loss(pred, target)
    opt.zero_grad()
    loss.backward()
    opt.step()
    return float(loss.item())


def median_final_success(results) -> float:
    return float(np.median([r.final_success_rate for r in results]))
