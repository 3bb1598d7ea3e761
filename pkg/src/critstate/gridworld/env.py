"""Deterministic key-corridor gridworld.

Layout: a vertical corridor flanked by ``n_room_rows`` rooms on each side.
Every side room has one closed door onto the corridor. One room is locked
(yellow door) and holds the goal ball; the matching key lies in a room on the
opposite side. Semantics follow MiniGrid: walls and closed doors block
movement, ``toggle`` opens/closes a facing door (locked doors need the key),
``pickup`` takes a facing key.
"""
from __future__ import annotations

import enum
import hashlib
import json
from dataclasses import asdict, dataclass, field, replace

import numpy as np


class Action(enum.IntEnum):
    turn_left = 0
    turn_right = 1
    forward = 2
    pickup = 3
    toggle = 4


N_ACTIONS = len(Action)


class EventKind(str, enum.Enum):
    pickup_key = "pickup_key"
    open_door_without_key = "open_door_without_key"
    open_door_with_key = "open_door_with_key"
    open_locked_door = "open_locked_door"
    try_locked_door_without_key = "try_locked_door_without_key"
    reach_goal = "reach_goal"


class Heading(enum.IntEnum):
    E = 0
    S = 1
    W = 2
    N = 3


# (dx, dy) with y growing downwards
DIR_VEC = ((1, 0), (0, 1), (-1, 0), (0, -1))

# cell kinds
UNSEEN, EMPTY, WALL, DOOR, KEY, BALL = range(6)
# colours
NO_COLOR, RED, GREEN, BLUE, PURPLE, YELLOW, GREY = range(7)
COLOR_NAMES = ("none", "red", "green", "blue", "purple", "yellow", "grey")
# door states
NOT_DOOR, OPEN, CLOSED, LOCKED = range(4)

# fixed integer scaling of the three observation channels into 0..255
KIND_SCALE = 50
COLOR_SCALE = 40
STATE_SCALE = 80


class GenerationError(RuntimeError):
    pass


class ContractViolation(RuntimeError):
    pass


@dataclass(frozen=True)
class EnvConfig:
    grid_size: int = 13
    n_room_rows: int = 3
    n_room_cols: int = 2
    view_size: int = 7
    max_steps: int = 120
    door_colors: tuple[str, ...] = ("red", "green", "blue", "purple", "grey")
    locked_room_index: int | None = None
    decoy_room_index: int | None = None
    max_retries: int = 20

    def __post_init__(self):
        object.__setattr__(self, "door_colors", tuple(self.door_colors))
        if self.view_size % 2 != 1 or self.view_size < 3:
            raise ValueError("view_size must be odd and >= 3")
        if self.n_room_cols != 2:
            raise ValueError("only two room columns (one per corridor side) are supported")
        if (self.grid_size - 1) % 3 != 0 or self.room_size < 4:
            raise ValueError("grid_size must be 3*r + 1 with room size r >= 4")
        if self.n_room_rows < 1:
            raise ValueError("need at least one room row")
        if self.max_steps < 1:
            raise ValueError("max_steps must be >= 1")
        if not self.door_colors or any(c not in COLOR_NAMES[1:] or c == "yellow" for c in self.door_colors):
            raise ValueError("door_colors must be non-yellow colour names")
        n_rooms = 2 * self.n_room_rows
        for idx in (self.locked_room_index, self.decoy_room_index):
            if idx is not None and not 0 <= idx < n_rooms:
                raise ValueError(f"room index {idx} outside [0, {n_rooms})")

    @property
    def room_size(self) -> int:
        return (self.grid_size - 1) // 3

    @property
    def width(self) -> int:
        return self.grid_size

    @property
    def height(self) -> int:
        return self.n_room_rows * self.room_size + 1

    def to_dict(self) -> dict:
        d = asdict(self)
        d["door_colors"] = list(self.door_colors)
        return d

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass(frozen=True)
class Room:
    index: int
    side: int  # 0 = left of the corridor, 1 = right
    row: int
    x0: int
    y0: int
    x1: int
    y1: int  # inclusive interior bounds
    door: tuple[int, int]

    def contains(self, pos) -> bool:
        x, y = pos
        return self.x0 <= x <= self.x1 and self.y0 <= y <= self.y1

    def cells(self):
        return [(x, y) for y in range(self.y0, self.y1 + 1) for x in range(self.x0, self.x1 + 1)]


@dataclass(frozen=True)
class Layout:
    rooms: tuple[Room, ...]
    corridor: tuple[int, int, int, int]  # x0, y0, x1, y1 inclusive
    locked_room: int
    key_room: int
    decoy_room: int | None
    ball_pos: tuple[int, int]
    key_pos: tuple[int, int]

    @property
    def locked_door(self) -> tuple[int, int]:
        return self.rooms[self.locked_room].door

    def in_corridor(self, pos) -> bool:
        x0, y0, x1, y1 = self.corridor
        return x0 <= pos[0] <= x1 and y0 <= pos[1] <= y1

    def room_of(self, pos) -> int | None:
        for r in self.rooms:
            if r.contains(pos):
                return r.index
        return None

    def corridor_cells(self):
        x0, y0, x1, y1 = self.corridor
        return [(x, y) for y in range(y0, y1 + 1) for x in range(x0, x1 + 1)]


@dataclass(frozen=True, eq=False)
class GridState:
    kind: np.ndarray  # [H, W]
    color: np.ndarray
    door: np.ndarray
    agent_pos: tuple[int, int]
    agent_dir: int
    carrying: int | None
    step_count: int
    done: bool
    cfg: EnvConfig
    layout: Layout
    seed: int = 0

    def __eq__(self, other):
        if not isinstance(other, GridState):
            return NotImplemented
        return (
            np.array_equal(self.kind, other.kind)
            and np.array_equal(self.color, other.color)
            and np.array_equal(self.door, other.door)
            and self.agent_pos == other.agent_pos
            and self.agent_dir == other.agent_dir
            and self.carrying == other.carrying
            and self.step_count == other.step_count
            and self.done == other.done
            and self.cfg == other.cfg
            and self.layout == other.layout
        )

    __hash__ = None

    def front_pos(self) -> tuple[int, int]:
        dx, dy = DIR_VEC[self.agent_dir]
        return self.agent_pos[0] + dx, self.agent_pos[1] + dy

    def cell(self, pos) -> tuple[int, int, int]:
        x, y = pos
        if not (0 <= x < self.kind.shape[1] and 0 <= y < self.kind.shape[0]):
            return WALL, NO_COLOR, NOT_DOOR
        return int(self.kind[y, x]), int(self.color[y, x]), int(self.door[y, x])

    def key(self) -> bytes:
        """Hashable summary of the mutable part of the state."""
        head = np.array(
            [*self.agent_pos, self.agent_dir, -1 if self.carrying is None else self.carrying, self.step_count, self.done],
            dtype=np.int64,
        )
        return head.tobytes() + self.kind.tobytes() + self.door.tobytes()


def _ro(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


def _build(cfg: EnvConfig, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray, np.ndarray, Layout]:
    r = cfg.room_size
    W, H = cfg.width, cfg.height
    kind = np.full((H, W), EMPTY, dtype=np.uint8)
    color = np.zeros((H, W), dtype=np.uint8)
    door = np.zeros((H, W), dtype=np.uint8)
    kind[0, :] = kind[-1, :] = WALL
    kind[:, 0] = kind[:, -1] = WALL
    kind[:, r] = kind[:, 2 * r] = WALL
    for row in range(1, cfg.n_room_rows):
        y = row * r
        kind[y, 1:r] = WALL
        kind[y, 2 * r + 1 : W - 1] = WALL
    # corridor interior stays open between room rows

    palette = [COLOR_NAMES.index(c) for c in cfg.door_colors]
    rooms = []
    for side in (0, 1):
        for row in range(cfg.n_room_rows):
            x0 = 1 if side == 0 else 2 * r + 1
            x1 = x0 + r - 2
            y0 = row * r + 1
            y1 = y0 + r - 2
            dy = int(rng.integers(y0, y1 + 1))
            dx = r if side == 0 else 2 * r
            kind[dy, dx] = DOOR
            door[dy, dx] = CLOSED
            color[dy, dx] = palette[int(rng.integers(len(palette)))]
            rooms.append(Room(side * cfg.n_room_rows + row, side, row, x0, y0, x1, y1, (dx, dy)))

    n_rooms = len(rooms)
    locked = cfg.locked_room_index
    if locked is None:
        locked = int(rng.integers(n_rooms))
    lock_side = rooms[locked].side
    key_choices = [rm.index for rm in rooms if rm.side != lock_side]
    key_room = key_choices[int(rng.integers(len(key_choices)))]
    ldx, ldy = rooms[locked].door
    door[ldy, ldx] = LOCKED
    color[ldy, ldx] = YELLOW

    decoy = cfg.decoy_room_index
    if decoy is None or decoy in (locked, key_room):
        # first room on the locked side that is not the locked room, else any spare room
        spare = [rm.index for rm in rooms if rm.index not in (locked, key_room)]
        same_side = [i for i in spare if rooms[i].side == lock_side]
        decoy = (same_side or spare or [None])[0]

    def interior_choice(room: Room, avoid: set) -> tuple[int, int]:
        cells = [c for c in room.cells() if c not in avoid]
        return cells[int(rng.integers(len(cells)))]

    def entry_cell(room: Room) -> tuple[int, int]:
        dx, dy = room.door
        return (dx - 1, dy) if room.side == 0 else (dx + 1, dy)

    ball = interior_choice(rooms[locked], set())
    key_pos = interior_choice(rooms[key_room], {entry_cell(rooms[key_room])})
    kind[ball[1], ball[0]] = BALL
    color[ball[1], ball[0]] = PURPLE
    kind[key_pos[1], key_pos[0]] = KEY
    color[key_pos[1], key_pos[0]] = YELLOW

    layout = Layout(
        rooms=tuple(rooms),
        corridor=(r + 1, 1, 2 * r - 1, H - 2),
        locked_room=locked,
        key_room=key_room,
        decoy_room=decoy,
        ball_pos=ball,
        key_pos=key_pos,
    )
    return kind, color, door, layout


def reset(cfg: EnvConfig, seed: int) -> GridState:
    """Generate the layout and the agent start for ``(cfg, seed)``."""
    from .planner import solvable

    rng = np.random.default_rng(seed)
    for _ in range(cfg.max_retries):
        kind, color, door, layout = _build(cfg, rng)
        cells = layout.corridor_cells()
        pos = cells[int(rng.integers(len(cells)))]
        heading = int(rng.integers(4))
        state = GridState(
            _ro(kind), _ro(color), _ro(door), pos, heading, None, 0, False, cfg, layout, int(seed)
        )
        if solvable(state):
            return state
    raise GenerationError(f"no solvable layout after {cfg.max_retries} attempts (seed={seed})")


def step(s: GridState, a) -> tuple[GridState, float, bool, EventKind | None]:
    """Apply one action. Returns ``(next_state, reward, done, event)``."""
    if s.done:
        raise ContractViolation("step() called on a terminal state")
    a = Action(a)
    pos, heading, carrying = s.agent_pos, s.agent_dir, s.carrying
    kind, color, door = s.kind, s.color, s.door
    reward, event, goal = 0.0, None, False
    fx, fy = s.front_pos()
    fkind, fcolor, fdoor = s.cell((fx, fy))

    if a == Action.turn_left:
        heading = (heading - 1) % 4
    elif a == Action.turn_right:
        heading = (heading + 1) % 4
    elif a == Action.forward:
        if fkind == EMPTY or (fkind == DOOR and fdoor == OPEN):
            pos = (fx, fy)
        elif fkind == BALL:
            goal, reward, event = True, 1.0, EventKind.reach_goal
    elif a == Action.pickup:
        if fkind == KEY and carrying is None:
            carrying = fcolor
            kind = kind.copy()
            color = color.copy()
            kind[fy, fx] = EMPTY
            color[fy, fx] = NO_COLOR
            event = EventKind.pickup_key
    elif a == Action.toggle and fkind == DOOR:
        door = door.copy()
        if fdoor == LOCKED:
            if carrying is not None and carrying == fcolor:
                door[fy, fx] = OPEN
                event = EventKind.open_locked_door
            else:
                event = EventKind.try_locked_door_without_key
        elif fdoor == CLOSED:
            door[fy, fx] = OPEN
            event = EventKind.open_door_with_key if carrying is not None else EventKind.open_door_without_key
        elif fdoor == OPEN:
            door[fy, fx] = CLOSED

    for arr in (kind, color, door):
        if arr.flags.writeable:
            arr.setflags(write=False)
    steps = s.step_count + 1
    done = goal or steps >= s.cfg.max_steps
    nxt = replace(
        s, kind=kind, color=color, door=door, agent_pos=pos, agent_dir=heading,
        carrying=carrying, step_count=steps, done=done,
    )
    return nxt, reward, done, event


def _visibility(view_kind: np.ndarray, view_door: np.ndarray) -> np.ndarray:
    """Which view cells the agent can see; walls and closed doors block sight.

    View coordinates: row 0 is farthest ahead, the agent sits at the bottom centre.
    """
    V = view_kind.shape[0]
    seen = np.zeros((V, V), dtype=bool)
    seen[V - 1, V // 2] = True

    def opaque(r, c):
        k = view_kind[r, c]
        return k == WALL or (k == DOOR and view_door[r, c] != OPEN)

    for r in range(V - 1, -1, -1):
        for c in range(0, V - 1):
            if not seen[r, c] or opaque(r, c):
                continue
            seen[r, c + 1] = True
            if r > 0:
                seen[r - 1, c + 1] = True
                seen[r - 1, c] = True
        for c in range(V - 1, 0, -1):
            if not seen[r, c] or opaque(r, c):
                continue
            seen[r, c - 1] = True
            if r > 0:
                seen[r - 1, c - 1] = True
                seen[r - 1, c] = True
    return seen


def observe(s: GridState) -> np.ndarray:
    """Egocentric ``[V, V, 3]`` uint8 view; unseen cells are all-zero.

    A carried key is drawn in the agent's own cell (bottom centre).
    """
    V = s.cfg.view_size
    fx, fy = DIR_VEC[s.agent_dir]
    rx, ry = DIR_VEC[(s.agent_dir + 1) % 4]
    ax, ay = s.agent_pos
    vk = np.zeros((V, V), dtype=np.uint8)
    vc = np.zeros((V, V), dtype=np.uint8)
    vd = np.zeros((V, V), dtype=np.uint8)
    H, W = s.kind.shape
    for r in range(V):
        ahead = V - 1 - r
        for c in range(V):
            lateral = c - V // 2
            x = ax + ahead * fx + lateral * rx
            y = ay + ahead * fy + lateral * ry
            if 0 <= x < W and 0 <= y < H:
                vk[r, c], vc[r, c], vd[r, c] = s.kind[y, x], s.color[y, x], s.door[y, x]
            else:
                vk[r, c] = WALL
    seen = _visibility(vk, vd)
    if s.carrying is not None:
        # MiniGrid draws the carried object in the agent's own cell
        vk[V - 1, V // 2], vc[V - 1, V // 2], vd[V - 1, V // 2] = KEY, s.carrying, 0
    obs = np.stack(
        [vk * KIND_SCALE, vc * COLOR_SCALE, vd * STATE_SCALE], axis=-1
    ).astype(np.uint8)
    obs[~seen] = 0
    return obs
