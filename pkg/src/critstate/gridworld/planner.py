"""Shortest-plan search for the key-corridor task.

Cost-to-go maps are computed by reverse Dijkstra over ``(x, y, heading)`` in
three layers: 0 = fetch the key, 1 = carry it to the locked door, 2 = walk to
the ball. Passing a closed (unlocked) door costs one extra ``toggle``. The
key room's door is opened on the way in, so the continuation after the pickup
is planned with that door open.
"""
from __future__ import annotations

import heapq
from collections import OrderedDict

import numpy as np

from .env import (
    BALL,
    CLOSED,
    DIR_VEC,
    DOOR,
    EMPTY,
    KEY,
    LOCKED,
    OPEN,
    Action,
    GridState,
)

INF = float("inf")

# preference when several actions are equally short
_TIE_ORDER = (Action.forward, Action.pickup, Action.toggle, Action.turn_left, Action.turn_right)


class PlanningError(RuntimeError):
    pass


def stage_of(s: GridState) -> int:
    lx, ly = s.layout.locked_door
    if s.door[ly, lx] != LOCKED:
        return 2
    return 1 if s.carrying is not None else 0


def _enter_cost(s: GridState, stage: int) -> np.ndarray:
    """Cost of stepping onto each cell in a given layer (inf = impassable)."""
    kind, door = s.kind, s.door
    cost = np.full(kind.shape, INF)
    cost[kind == EMPTY] = 1.0
    cost[(kind == DOOR) & (door == OPEN)] = 1.0
    cost[(kind == DOOR) & (door == CLOSED)] = 2.0
    if stage >= 1:
        kx, ky = s.layout.key_pos
        if kind[ky, kx] == KEY:
            cost[ky, kx] = 1.0
    if stage == 2:
        lx, ly = s.layout.locked_door
        if door[ly, lx] == LOCKED:
            cost[ly, lx] = 1.0
    return cost


def _dijkstra(enter: np.ndarray, init: np.ndarray) -> np.ndarray:
    """Reverse Dijkstra: ``init[y, x, d]`` holds terminal costs, returns cost-to-go."""
    H, W = enter.shape
    dist = init.copy()
    heap = [(float(dist[y, x, d]), x, y, d) for y, x, d in zip(*np.nonzero(np.isfinite(init)))]
    heapq.heapify(heap)
    standable = np.isfinite(enter)
    while heap:
        c, x, y, d = heapq.heappop(heap)
        if c > dist[y, x, d]:
            continue
        # turn_left from heading d+1 and turn_right from heading d-1 arrive here
        for pd in ((d + 1) % 4, (d - 1) % 4):
            if c + 1 < dist[y, x, pd]:
                dist[y, x, pd] = c + 1
                heapq.heappush(heap, (c + 1, x, y, pd))
        # forward from the cell behind
        dx, dy = DIR_VEC[d]
        px, py = x - dx, y - dy
        if 0 <= px < W and 0 <= py < H and standable[py, px]:
            nc = c + enter[y, x]
            if nc < dist[py, px, d]:
                dist[py, px, d] = nc
                heapq.heappush(heap, (nc, px, py, d))
    return dist


def _facing_init(shape, target, cost_fn) -> np.ndarray:
    """Terminal costs for every (cell, heading) that faces ``target``."""
    H, W = shape
    init = np.full((H, W, 4), INF)
    tx, ty = target
    for d, (dx, dy) in enumerate(DIR_VEC):
        x, y = tx - dx, ty - dy
        if 0 <= x < W and 0 <= y < H:
            init[y, x, d] = cost_fn(x, y, d)
    return init


_CACHE: "OrderedDict[bytes, tuple[np.ndarray, ...]]" = OrderedDict()
_CACHE_SIZE = 512


def value_maps(s: GridState) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Cost-to-go for layers 0, 1, 2 as ``[H, W, 4]`` arrays."""
    lay = s.layout
    key = b"|".join(
        [
            s.kind.tobytes(),
            s.door.tobytes(),
            np.array([*lay.key_pos, *lay.ball_pos, *lay.locked_door, *s.kind.shape], np.int64).tobytes(),
        ]
    )
    hit = _CACHE.get(key)
    if hit is not None:
        _CACHE.move_to_end(key)
        return hit
    shape = s.kind.shape
    e2 = _enter_cost(s, 2)
    v2 = _dijkstra(e2, _facing_init(shape, lay.ball_pos, lambda x, y, d: 1.0))
    e1 = _enter_cost(s, 1)
    v1 = _dijkstra(e1, _facing_init(shape, lay.locked_door, lambda x, y, d: 1.0 + v2[y, x, d]))
    e0 = _enter_cost(s, 0)
    kx, ky = lay.key_pos
    if s.kind[ky, kx] == KEY:
        kdx, kdy = lay.rooms[lay.key_room].door
        if s.door[kdy, kdx] == CLOSED:
            e1 = e1.copy()
            e1[kdy, kdx] = 1.0
            v1_exit = _dijkstra(e1, _facing_init(shape, lay.locked_door, lambda x, y, d: 1.0 + v2[y, x, d]))
        else:
            v1_exit = v1
        v0 = _dijkstra(e0, _facing_init(shape, lay.key_pos, lambda x, y, d: 1.0 + v1_exit[y, x, d]))
    else:
        v0 = np.full(shape + (4,), INF)
    out = (v0, v1, v2)
    for v in out:
        v.setflags(write=False)
    _CACHE[key] = out
    if len(_CACHE) > _CACHE_SIZE:
        _CACHE.popitem(last=False)
    return out


def cost_to_go(s: GridState) -> float:
    """Length of the shortest action sequence that reaches the ball."""
    maps = value_maps(s)
    x, y = s.agent_pos
    stage = stage_of(s)
    cost = float(maps[stage][y, x, s.agent_dir])
    lay = s.layout
    kdx, kdy = lay.rooms[lay.key_room].door
    if stage == 0 and s.door[kdy, kdx] == CLOSED and lay.room_of(s.agent_pos) == lay.key_room:
        # shut in with the key: the exit toggle is still ahead (a constant
        # offset over the room, so action choice is unaffected)
        cost += 1.0
    return cost


def solvable(s: GridState) -> bool:
    return np.isfinite(cost_to_go(s))


def action_costs(s: GridState, maps=None, stage: int | None = None) -> dict[Action, float]:
    """Cost-to-go after taking each action first (inf where useless)."""
    if maps is None:
        maps = value_maps(s)
    if stage is None:
        stage = stage_of(s)
    v = maps[stage]
    x, y = s.agent_pos
    d = s.agent_dir
    costs = {a: INF for a in Action}
    costs[Action.turn_left] = 1 + v[y, x, (d - 1) % 4]
    costs[Action.turn_right] = 1 + v[y, x, (d + 1) % 4]
    fx, fy = s.front_pos()
    fkind, fcolor, fdoor = s.cell((fx, fy))
    if fkind == EMPTY or (fkind == DOOR and fdoor == OPEN):
        costs[Action.forward] = 1 + v[fy, fx, d]
    elif fkind == DOOR and fdoor == CLOSED:
        costs[Action.toggle] = 2 + v[fy, fx, d]
    if stage == 0 and fkind == KEY and (fx, fy) == s.layout.key_pos:
        costs[Action.pickup] = 1 + maps[1][y, x, d]
    if stage == 1 and fkind == DOOR and fdoor == LOCKED and (fx, fy) == s.layout.locked_door:
        costs[Action.toggle] = 1 + maps[2][y, x, d]
    if stage == 2 and fkind == BALL:
        costs[Action.forward] = 1.0
    return costs


def choose_action(costs: dict, tie_seed: int | None, s: GridState) -> Action:
    best = min(costs.values())
    if not np.isfinite(best):
        raise PlanningError(f"no plan from agent position {s.agent_pos} heading {s.agent_dir}")
    tied = [a for a in _TIE_ORDER if costs[a] == best]
    if tie_seed is None or len(tied) == 1:
        return tied[0]
    # stateless, replay-safe tie break keyed on the situation
    h = np.random.default_rng([tie_seed, *s.agent_pos, s.agent_dir, stage_of(s), s.seed % 2**32])
    return tied[int(h.integers(len(tied)))]


def plan_optimal(s: GridState, tie_seed: int | None = None) -> Action:
    """Next action on a shortest plan: key -> pickup -> locked door -> toggle -> ball."""
    return choose_action(action_costs(s), tie_seed, s)


def navigate_costs(s: GridState, target: tuple[int, int]) -> dict[Action, float]:
    """Action costs for walking onto ``target`` (any heading), key considered picked up."""
    H, W = s.kind.shape
    enter = _enter_cost(s, 1)
    tx, ty = target
    init = np.full((H, W, 4), INF)
    init[ty, tx, :] = 0.0
    v = _dijkstra(enter, init)
    x, y = s.agent_pos
    d = s.agent_dir
    costs = {a: INF for a in Action}
    costs[Action.turn_left] = 1 + v[y, x, (d - 1) % 4]
    costs[Action.turn_right] = 1 + v[y, x, (d + 1) % 4]
    fx, fy = s.front_pos()
    fkind, _, fdoor = s.cell((fx, fy))
    if fkind == EMPTY or (fkind == DOOR and fdoor == OPEN):
        costs[Action.forward] = 1 + v[fy, fx, d]
    elif fkind == DOOR and fdoor == CLOSED:
        costs[Action.toggle] = 2 + v[fy, fx, d]
    return costs


def navigate(s: GridState, target: tuple[int, int]) -> Action:
    return choose_action(navigate_costs(s, target), None, s)
