"""Desk-scale environments and scripted dataset generators.

PointMazeEnv is a continuous point mass with double-integrator dynamics in
an ASCII-defined grid maze, sparse reward at the goal cell.  Offline data
comes from noisy waypoint-following controllers that travel between random
cells, so individual episodes rarely solve the evaluation task but their
segments compose into a goal-reaching path.

All environment state is kept in float32 so that recorded episodes replay
bit-exactly from file.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np

STATE_DTYPE = np.float32


@dataclass
class EnvSpec:
    name: str
    dim_s: int
    dim_a: int
    action_low: np.ndarray
    action_high: np.ndarray
    max_steps: int
    reward_kind: str   # "sparse-goal" or "dense"

    def __post_init__(self):
        self.action_low = np.asarray(self.action_low, dtype=np.float64)
        self.action_high = np.asarray(self.action_high, dtype=np.float64)
        if self.dim_s < 1 or self.dim_a < 1:
            raise ValueError(f"dims must be >= 1, got dim_s={self.dim_s} dim_a={self.dim_a}")
        if self.action_low.shape != (self.dim_a,) or self.action_high.shape != (self.dim_a,):
            raise ValueError("action bounds must have shape (dim_a,)")
        if not (np.all(np.isfinite(self.action_low)) and np.all(np.isfinite(self.action_high))):
            raise ValueError("action bounds must be finite")
        if np.any(self.action_low >= self.action_high):
            raise ValueError("action_low must be < action_high per dimension")
        if self.max_steps < 1:
            raise ValueError(f"max_steps must be >= 1, got {self.max_steps}")

    def to_dict(self):
        return {
            "name": self.name, "dim_s": self.dim_s, "dim_a": self.dim_a,
            "action_low": self.action_low.tolist(),
            "action_high": self.action_high.tolist(),
            "max_steps": self.max_steps, "reward_kind": self.reward_kind,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            name=d["name"], dim_s=d["dim_s"], dim_a=d["dim_a"],
            action_low=np.asarray(d["action_low"]),
            action_high=np.asarray(d["action_high"]),
            max_steps=d["max_steps"], reward_kind=d["reward_kind"],
        )


@dataclass
class Episode:
    """One recorded rollout.  `final_state` is the state after the last action."""

    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    terminals: np.ndarray
    final_state: np.ndarray
    seed: int
    script: str = ""

    def __post_init__(self):
        n = len(self.states)
        if not (len(self.actions) == len(self.rewards) == len(self.terminals) == n):
            raise ValueError(
                "episode arrays must have equal length, got "
                f"states={n} actions={len(self.actions)} "
                f"rewards={len(self.rewards)} terminals={len(self.terminals)}"
            )
        if n == 0:
            raise ValueError("episode must contain at least one step")

    def __len__(self):
        return len(self.states)


# Maze layout characters: '#' wall, '.' free, 'S' eval start, 'G' goal.
MEDIUM_MAZE = """\
##########
#S...#...#
#.##.#.#.#
#.#..#.#.#
#.#.##.#.#
#.#....#.#
#.####.#.#
#......#G#
##########
"""

CHAIN_LENGTH = 10.0


def parse_layout(text):
    """ASCII grid -> (walls bool array, start cell, goal cell); cells are (row, col)."""
    rows = [line for line in text.splitlines() if line.strip()]
    width = len(rows[0])
    if any(len(r) != width for r in rows):
        raise ValueError("maze layout rows must have equal width")
    walls = np.zeros((len(rows), width), dtype=bool)
    start = goal = None
    for i, row in enumerate(rows):
        for j, ch in enumerate(row):
            if ch == "#":
                walls[i, j] = True
            elif ch == "S":
                start = (i, j)
            elif ch == "G":
                goal = (i, j)
            elif ch != ".":
                raise ValueError(f"unknown maze character {ch!r} at row {i} col {j}")
    if start is None or goal is None:
        raise ValueError("maze layout needs exactly one 'S' and one 'G'")
    return walls, start, goal


class PointMazeEnv:
    """Point mass in a grid maze; position (x, y) with cell (row=int(y), col=int(x)).

    Dynamics per step: v <- damping * v + dt * a, clipped to speed_max per
    axis, then axis-by-axis position update with wall clamping (velocity
    zeroed on the blocked axis).  Reward 1 and done on entering the goal
    cell, else 0; episode also ends at the step limit.
    """

    DT = 0.25
    DAMPING = 0.8
    SPEED_MAX = 1.2
    WALL_MARGIN = 1e-3

    def __init__(self, layout=MEDIUM_MAZE, max_steps=300, name="pointmaze-medium"):
        self.layout = layout
        self.walls, self.start_cell, self.goal_cell = parse_layout(layout)
        self.spec = EnvSpec(
            name=name, dim_s=4, dim_a=2,
            action_low=np.array([-1.0, -1.0]), action_high=np.array([1.0, 1.0]),
            max_steps=max_steps, reward_kind="sparse-goal",
        )
        self.clamp_warnings = 0
        self._pos = None
        self._vel = None
        self._t = 0
        self._done = True

    def free_cells(self):
        cells = np.argwhere(~self.walls)
        return [tuple(c) for c in cells]

    def cell_of(self, pos):
        return (int(np.floor(pos[1])), int(np.floor(pos[0])))

    def cell_center(self, cell):
        return np.array([cell[1] + 0.5, cell[0] + 0.5], dtype=np.float64)

    def reset(self, start_cell=None, jitter_rng=None):
        cell = self.start_cell if start_cell is None else tuple(start_cell)
        if self.walls[cell]:
            raise ValueError(f"cannot start inside a wall cell {cell}")
        pos = self.cell_center(cell)
        if jitter_rng is not None:
            pos = pos + jitter_rng.uniform(-0.3, 0.3, size=2)
        self._pos = pos.astype(STATE_DTYPE)
        self._vel = np.zeros(2, dtype=STATE_DTYPE)
        self._t = 0
        self._done = False
        return self.state()

    def reset_to(self, state):
        """Restore an exact recorded state; used for replay verification."""
        state = np.asarray(state, dtype=STATE_DTYPE)
        if state.shape != (4,):
            raise ValueError(f"maze state must have shape (4,), got {state.shape}")
        self._pos = state[:2].copy()
        self._vel = state[2:].copy()
        self._t = 0
        self._done = False
        return self.state()

    def state(self):
        return np.concatenate([self._pos, self._vel]).astype(STATE_DTYPE)

    def _blocked(self, x, y):
        row, col = int(np.floor(y)), int(np.floor(x))
        if row < 0 or row >= self.walls.shape[0] or col < 0 or col >= self.walls.shape[1]:
            return True
        return bool(self.walls[row, col])

    def step(self, action):
        if self._done:
            raise RuntimeError("step called on a finished episode; reset first")
        action = np.asarray(action, dtype=np.float64)
        if np.any(action < self.spec.action_low) or np.any(action > self.spec.action_high):
            self.clamp_warnings += 1
            action = np.clip(action, self.spec.action_low, self.spec.action_high)

        vel = self.DAMPING * self._vel.astype(np.float64) + self.DT * action
        vel = np.clip(vel, -self.SPEED_MAX, self.SPEED_MAX)
        pos = self._pos.astype(np.float64).copy()

        # Axis-by-axis move so a diagonal step cannot tunnel through a corner.
        nx = pos[0] + self.DT * vel[0]
        if self._blocked(nx, pos[1]):
            face = np.floor(pos[0]) + (1.0 - self.WALL_MARGIN) if vel[0] > 0 else np.floor(pos[0]) + self.WALL_MARGIN
            nx = face
            vel[0] = 0.0
        pos[0] = nx
        ny = pos[1] + self.DT * vel[1]
        if self._blocked(pos[0], ny):
            face = np.floor(pos[1]) + (1.0 - self.WALL_MARGIN) if vel[1] > 0 else np.floor(pos[1]) + self.WALL_MARGIN
            ny = face
            vel[1] = 0.0
        pos[1] = ny

        self._pos = pos.astype(STATE_DTYPE)
        self._vel = vel.astype(STATE_DTYPE)
        self._t += 1

        at_goal = self.cell_of(self._pos) == self.goal_cell
        reward = STATE_DTYPE(1.0 if at_goal else 0.0)
        self._done = at_goal or self._t >= self.spec.max_steps
        return self.state(), float(reward), self._done

    def shortest_cell_path(self, start, target):
        """BFS over free cells, 4-connected; returns [start, ..., target]."""
        if self.walls[start] or self.walls[target]:
            raise ValueError("path endpoints must be free cells")
        prev = {start: None}
        queue = deque([start])
        while queue:
            cell = queue.popleft()
            if cell == target:
                path = []
                while cell is not None:
                    path.append(cell)
                    cell = prev[cell]
                return path[::-1]
            r, c = cell
            for nb in ((r - 1, c), (r + 1, c), (r, c - 1), (r, c + 1)):
                if (0 <= nb[0] < self.walls.shape[0] and 0 <= nb[1] < self.walls.shape[1]
                        and not self.walls[nb] and nb not in prev):
                    prev[nb] = cell
                    queue.append(nb)
        raise ValueError(f"no path between {start} and {target}")


class ChainEnv:
    """Dense-reward 1-D double integrator on [0, L]; fast smoke-test target.

    Reward each step is the decrease in distance to the goal at x = L;
    reaching within 0.5 of the goal ends the episode with a +1 bonus.
    """

    DT = 0.2
    DAMPING = 0.8

    def __init__(self, length=CHAIN_LENGTH, max_steps=80, name="chain"):
        self.length = float(length)
        self.spec = EnvSpec(
            name=name, dim_s=2, dim_a=1,
            action_low=np.array([-1.0]), action_high=np.array([1.0]),
            max_steps=max_steps, reward_kind="dense",
        )
        self.clamp_warnings = 0
        self._x = None
        self._v = None
        self._t = 0
        self._done = True

    def reset(self, start=0.0, jitter_rng=None):
        x = float(start)
        if jitter_rng is not None:
            x += float(jitter_rng.uniform(0.0, 0.5))
        self._x = STATE_DTYPE(np.clip(x, 0.0, self.length))
        self._v = STATE_DTYPE(0.0)
        self._t = 0
        self._done = False
        return self.state()

    def reset_to(self, state):
        state = np.asarray(state, dtype=STATE_DTYPE)
        if state.shape != (2,):
            raise ValueError(f"chain state must have shape (2,), got {state.shape}")
        self._x = STATE_DTYPE(state[0])
        self._v = STATE_DTYPE(state[1])
        self._t = 0
        self._done = False
        return self.state()

    def state(self):
        return np.array([self._x, self._v], dtype=STATE_DTYPE)

    def step(self, action):
        if self._done:
            raise RuntimeError("step called on a finished episode; reset first")
        a = float(np.asarray(action, dtype=np.float64).reshape(-1)[0])
        if a < -1.0 or a > 1.0:
            self.clamp_warnings += 1
            a = float(np.clip(a, -1.0, 1.0))
        x0 = float(self._x)
        v = self.DAMPING * float(self._v) + self.DT * a
        x = float(np.clip(x0 + self.DT * v, 0.0, self.length))
        if x in (0.0, self.length):
            v = 0.0
        self._x = STATE_DTYPE(x)
        self._v = STATE_DTYPE(v)
        self._t += 1
        dist0 = abs(self.length - x0)
        dist1 = abs(self.length - float(self._x))
        reached = dist1 < 0.5
        reward = STATE_DTYPE((dist0 - dist1) + (1.0 if reached else 0.0))
        self._done = reached or self._t >= self.spec.max_steps
        return self.state(), float(reward), self._done


@dataclass
class Script:
    """Noisy waypoint trip between random cells drawn from two regions.

    Regions: "any", "left", "right", "top", "bottom" halves of the grid.
    """

    name: str
    start_region: str = "any"
    target_region: str = "any"
    noise_std: float = 0.3
    max_len: int = 120


STITCH_SCRIPTS = (
    Script("trip-lr", start_region="left", target_region="right"),
    Script("trip-rl", start_region="right", target_region="left"),
    Script("trip-tb", start_region="top", target_region="bottom"),
    Script("trip-bt", start_region="bottom", target_region="top"),
)


def _region_cells(env, region):
    cells = env.free_cells()
    rows, cols = env.walls.shape
    if region == "any":
        keep = cells
    elif region == "left":
        keep = [c for c in cells if c[1] < cols / 2]
    elif region == "right":
        keep = [c for c in cells if c[1] >= cols / 2]
    elif region == "top":
        keep = [c for c in cells if c[0] < rows / 2]
    elif region == "bottom":
        keep = [c for c in cells if c[0] >= rows / 2]
    else:
        raise ValueError(f"unknown region {region!r}")
    if not keep:
        raise ValueError(f"region {region!r} contains no free cells in this maze")
    return keep


class WaypointController:
    """PD control toward successive cell centers along a BFS path."""

    KP = 2.0
    KD = 1.6
    REACH = 0.3

    def __init__(self, env, path, noise_std=0.0, rng=None):
        self.env = env
        self.waypoints = [env.cell_center(c) for c in path]
        self.idx = 0
        self.noise_std = noise_std
        self.rng = rng

    def done(self, state):
        return self.idx >= len(self.waypoints)

    def act(self, state):
        pos, vel = state[:2].astype(np.float64), state[2:].astype(np.float64)
        while (self.idx < len(self.waypoints)
               and np.linalg.norm(self.waypoints[self.idx] - pos) < self.REACH):
            self.idx += 1
        target = self.waypoints[min(self.idx, len(self.waypoints) - 1)]
        a = self.KP * (target - pos) - self.KD * vel
        if self.noise_std > 0.0 and self.rng is not None:
            a = a + self.rng.normal(0.0, self.noise_std, size=2)
        return np.clip(a, -1.0, 1.0).astype(STATE_DTYPE)


def rollout_script(env, script, rng, seed):
    """One noisy point-to-point trip; episode ends at trip end, goal, or limit."""
    starts = _region_cells(env, script.start_region)
    targets = _region_cells(env, script.target_region)
    start = starts[rng.integers(len(starts))]
    target = targets[rng.integers(len(targets))]
    path = env.shortest_cell_path(start, target)
    controller = WaypointController(env, path, noise_std=script.noise_std, rng=rng)

    states, actions, rewards, terminals = [], [], [], []
    s = env.reset(start_cell=start, jitter_rng=rng)
    for _ in range(min(script.max_len, env.spec.max_steps)):
        a = controller.act(s)
        states.append(s)
        actions.append(a)
        s, r, done = env.step(a)
        rewards.append(STATE_DTYPE(r))
        terminals.append(done and env.cell_of(s) == env.goal_cell)
        if done or controller.done(s):
            break
    return Episode(
        states=np.asarray(states, dtype=STATE_DTYPE),
        actions=np.asarray(actions, dtype=STATE_DTYPE),
        rewards=np.asarray(rewards, dtype=STATE_DTYPE),
        terminals=np.asarray(terminals, dtype=bool),
        final_state=np.asarray(s, dtype=STATE_DTYPE),
        seed=seed, script=script.name,
    )


def rollout_chain_script(env, rng, seed, script_name="push"):
    """Noisy forward push on the chain; overshoots and stalls give coverage."""
    states, actions, rewards, terminals = [], [], [], []
    s = env.reset(start=0.0, jitter_rng=rng)
    gain = rng.uniform(0.4, 1.0)
    for _ in range(env.spec.max_steps):
        a = np.clip(gain + rng.normal(0.0, 0.3), -1.0, 1.0).astype(STATE_DTYPE).reshape(1)
        states.append(s)
        actions.append(a)
        s, r, done = env.step(a)
        rewards.append(STATE_DTYPE(r))
        terminals.append(done and abs(env.length - s[0]) < 0.5)
        if done:
            break
    return Episode(
        states=np.asarray(states, dtype=STATE_DTYPE),
        actions=np.asarray(actions, dtype=STATE_DTYPE),
        rewards=np.asarray(rewards, dtype=STATE_DTYPE),
        terminals=np.asarray(terminals, dtype=bool),
        final_state=np.asarray(s, dtype=STATE_DTYPE),
        seed=seed, script=script_name,
    )


def generate_dataset(env, scripts, num_episodes, seed):
    """Scripted offline dataset; deterministic given (env layout, scripts, seed)."""
    if isinstance(env, PointMazeEnv):
        if len({s.name for s in scripts}) < 2:
            raise ValueError("stitching datasets need at least 2 distinct scripts")
        for s in scripts:
            _region_cells(env, s.start_region)
            _region_cells(env, s.target_region)
    episodes = []
    for i in range(num_episodes):
        ep_seed = seed + i
        rng = np.random.default_rng(ep_seed)
        if isinstance(env, PointMazeEnv):
            script = scripts[i % len(scripts)]
            episodes.append(rollout_script(env, script, rng, ep_seed))
        elif isinstance(env, ChainEnv):
            episodes.append(rollout_chain_script(env, rng, ep_seed))
        else:
            raise ValueError(f"no script support for env {type(env).__name__}")
    return episodes


def replay_episode(env, episode):
    """Re-run recorded actions from the recorded first state; returns rewards."""
    env.reset_to(episode.states[0])
    rewards = []
    for a in episode.actions:
        _, r, done = env.step(a)
        rewards.append(STATE_DTYPE(r))
        if done:
            break
    return np.asarray(rewards, dtype=STATE_DTYPE)


def solved_episode(env):
    """Zero-noise scripted run from the eval start to the goal; pins feasibility."""
    path = env.shortest_cell_path(env.start_cell, env.goal_cell)
    controller = WaypointController(env, path, noise_std=0.0)
    s = env.reset()
    states, actions = [s], []
    done = False
    for _ in range(env.spec.max_steps):
        a = controller.act(s)
        actions.append(a)
        s, r, done = env.step(a)
        states.append(s)
        if done:
            break
    return np.asarray(states), np.asarray(actions), done and env.cell_of(s) == env.goal_cell


def make_env(name):
    if name == "pointmaze-medium":
        return PointMazeEnv()
    if name == "chain":
        return ChainEnv()
    raise ValueError(f"unknown env {name!r}")
