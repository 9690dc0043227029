"""ObjectNav / MultiON episodes on grid houses.

Action space: MoveAhead, RotateLeft, RotateRight, LookUp, LookDown and a
terminal action (End for ObjectNav, Found for MultiON). Rotations and
camera pitch move on a 30 degree lattice; MoveAhead advances one 0.25 m
cell along the heading.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .house import (CATEGORIES, CATEGORY_INDEX, CELL, HIGH_BAND_Y, House,
                    line_of_sight, shortest_path_length)

MOVE_AHEAD = 0
ROTATE_LEFT = 1
ROTATE_RIGHT = 2
LOOK_UP = 3
LOOK_DOWN = 4
TERMINATE = 5  # End (ObjectNav) or Found (MultiON)

ACTION_NAMES_OBJECTNAV = ["MoveAhead", "RotateLeft", "RotateRight",
                          "LookUp", "LookDown", "End"]
ACTION_NAMES_MULTION = ["MoveAhead", "RotateLeft", "RotateRight",
                        "LookUp", "LookDown", "Found"]
NUM_ACTIONS = 6

SEES_DISTANCE = 2.5
SUCCESS_DISTANCE = 1.0
HALF_FOV_DEG = 45.0
STEP_PENALTY = -0.01
FOUND_REWARD = 10.0

EGO_WINDOW = 7  # odd; agent sits at the base row of the center column
OBS_CHANNELS = 1 + len(CATEGORIES)

PITCH_MIN, PITCH_MAX = -30, 60


class EpisodeDoneError(RuntimeError):
    """Raised when stepping an episode whose ``done`` flag is set."""


class UnsatisfiableTaskError(RuntimeError):
    pass


@dataclass(frozen=True)
class AgentPose:
    x: float
    z: float
    heading: int  # degrees, multiples of 30
    pitch: int = 0  # degrees in {-30, 0, 30, 60}

    @property
    def cell(self) -> tuple[int, int]:
        return (int(self.z / CELL), int(self.x / CELL))

    def forward(self) -> tuple[float, float]:
        h = math.radians(self.heading)
        return (math.sin(h), math.cos(h))

    def right(self) -> tuple[float, float]:
        fx, fz = self.forward()
        return (fz, -fx)


@dataclass(frozen=True)
class TaskSpec:
    kind: str  # "ObjectNav" | "MultiON"
    targets: tuple[str, ...]
    max_steps: int

    def __post_init__(self):
        if self.kind not in ("ObjectNav", "MultiON"):
            raise ValueError(f"unknown task kind {self.kind!r}")
        if not 1 <= len(self.targets) <= 3:
            raise ValueError("targets must have length 1..3")
        for t in self.targets:
            if t not in CATEGORY_INDEX:
                raise ValueError(f"unknown target category {t!r}")


@dataclass
class Observation:
    ego_grid: np.ndarray  # (EGO_WINDOW, EGO_WINDOW, OBS_CHANNELS)
    goal_id: int


@dataclass
class EnvState:
    house: House
    agent: AgentPose
    task: TaskSpec
    step_count: int = 0
    found_so_far: int = 0
    done: bool = False
    success: bool = False
    false_end: bool = False
    timeout: bool = False
    path_length: float = 0.0
    best_dist: float = math.inf
    found_outcomes: list = field(default_factory=list)

    @property
    def current_target(self) -> str:
        idx = min(self.found_so_far, len(self.task.targets) - 1)
        return self.task.targets[idx]


def agent_frame_offset(pose: AgentPose,
                       position: tuple[float, float, float]) -> tuple[float, float, float]:
    """(forward, up, lateral) meters of a world position in the agent frame."""
    dx = position[0] - pose.x
    dz = position[2] - pose.z
    fx, fz = pose.forward()
    rx, rz = pose.right()
    return (dx * fx + dz * fz, position[1], dx * rx + dz * rz)


def _wrap_deg(a: float) -> float:
    return (a + 180.0) % 360.0 - 180.0


def object_visible(house: House, pose: AgentPose, obj) -> bool:
    dx = obj.position[0] - pose.x
    dz = obj.position[2] - pose.z
    dist = math.hypot(dx, dz)
    if dist > SEES_DISTANCE:
        return False
    if dist > 1e-9:
        bearing = math.degrees(math.atan2(dx, dz))
        if abs(_wrap_deg(bearing - pose.heading)) > HALF_FOV_DEG:
            return False
    if abs(pose.pitch) == 60 and obj.position[1] >= HIGH_BAND_Y:
        return False
    return line_of_sight(house, pose.cell, obj.cell)


def visible_objects(state: EnvState) -> set[int]:
    """Ids of objects within 2.5 m, inside the FOV, with clear line of sight."""
    return {o.id for o in state.house.objects
            if object_visible(state.house, state.agent, o)}


def _observe(state: EnvState) -> Observation:
    pose = state.agent
    house = state.house
    half = EGO_WINDOW // 2
    grid = np.zeros((EGO_WINDOW, EGO_WINDOW, OBS_CHANNELS), dtype=np.float64)
    fx, fz = pose.forward()
    rx, rz = pose.right()
    agent_cell = pose.cell
    for f in range(EGO_WINDOW):
        for l in range(-half, half + 1):
            wx = pose.x + f * CELL * fx + l * CELL * rx
            wz = pose.z + f * CELL * fz + l * CELL * rz
            dist = CELL * math.hypot(f, l)
            if dist > SEES_DISTANCE:
                continue
            if f > 0 or l != 0:
                bearing = math.degrees(math.atan2(wx - pose.x, wz - pose.z))
                if abs(_wrap_deg(bearing - pose.heading)) > HALF_FOV_DEG + 1e-9:
                    continue
            r, c = int(wz / CELL), int(wx / CELL)
            col = l + half
            if not (0 <= r < house.rows and 0 <= c < house.cols):
                grid[f, col, 0] = 1.0
                continue
            if not line_of_sight(house, agent_cell, (r, c)):
                continue
            if house.occupancy[r, c]:
                grid[f, col, 0] = 1.0
    for o in house.objects:
        if not object_visible(house, pose, o):
            continue
        fw, _, lat = agent_frame_offset(pose, o.position)
        f = int(round(fw / CELL))
        l = int(round(lat / CELL))
        if 0 <= f < EGO_WINDOW and -half <= l <= half:
            grid[f, l + half, 1 + CATEGORY_INDEX[o.category]] = 1.0
    return Observation(ego_grid=grid,
                       goal_id=CATEGORY_INDEX[state.current_target])


def _target_distance(state: EnvState) -> float:
    return shortest_path_length(state.house, (state.agent.x, state.agent.z),
                                state.current_target)


def reset(house: House, task: TaskSpec, seed: int) -> tuple[EnvState, Observation]:
    """Place the agent uniformly on a reachable free cell."""
    for target in task.targets:
        if not np.isfinite(house.distance_field(target)[house.reachable()]).any():
            raise UnsatisfiableTaskError(
                f"no reachable {target!r} instance in house seed={house.seed}")
    rng = np.random.Generator(np.random.PCG64(seed))
    cells = np.argwhere(house.reachable())
    r, c = cells[int(rng.integers(len(cells)))]
    heading = int(rng.integers(12)) * 30
    pose = AgentPose(x=(c + 0.5) * CELL, z=(r + 0.5) * CELL,
                     heading=heading, pitch=0)
    state = EnvState(house=house, agent=pose, task=task)
    state.best_dist = _target_distance(state)
    return state, _observe(state)


def success_check(state: EnvState, target: str | None = None) -> bool:
    """Terminal criteria: a target instance within 1 m and currently visible."""
    target = target or state.current_target
    vis = visible_objects(state)
    for o in state.house.objects_of_category(target):
        dist = math.hypot(o.position[0] - state.agent.x,
                          o.position[2] - state.agent.z)
        if dist <= SUCCESS_DISTANCE and o.id in vis:
            return True
    return False


def step(state: EnvState, action: int) -> tuple[EnvState, Observation, float, bool, dict]:
    if state.done:
        raise EpisodeDoneError("step() called on a finished episode")
    if not 0 <= action < NUM_ACTIONS:
        raise ValueError(f"invalid action {action}")

    pose = state.agent
    info: dict = {"collision": False, "event": None}
    success_event = False

    if action == MOVE_AHEAD:
        fx, fz = pose.forward()
        nx = pose.x + CELL * fx
        nz = pose.z + CELL * fz
        # floor, not int(): negative coordinates must map off-grid
        r, c = math.floor(nz / CELL), math.floor(nx / CELL)
        if (0 <= r < state.house.rows and 0 <= c < state.house.cols
                and not state.house.occupancy[r, c]):
            # Snap to the cell center so the pose stays on the lattice.
            pose = replace(pose, x=(c + 0.5) * CELL, z=(r + 0.5) * CELL)
            state.path_length += CELL
        else:
            info["collision"] = True
    elif action == ROTATE_LEFT:
        pose = replace(pose, heading=(pose.heading - 30) % 360)
    elif action == ROTATE_RIGHT:
        pose = replace(pose, heading=(pose.heading + 30) % 360)
    elif action == LOOK_UP:
        pose = replace(pose, pitch=max(PITCH_MIN, pose.pitch - 30))
    elif action == LOOK_DOWN:
        pose = replace(pose, pitch=min(PITCH_MAX, pose.pitch + 30))

    state.agent = pose
    state.step_count += 1

    if action == TERMINATE:
        ok = success_check(state)
        if state.task.kind == "ObjectNav":
            state.done = True
            state.success = ok
            state.false_end = not ok
            success_event = ok
            info["event"] = "end"
        else:  # MultiON Found
            state.found_outcomes.append(ok)
            info["event"] = "found"
            if ok:
                success_event = True
                state.found_so_far += 1
                if state.found_so_far == len(state.task.targets):
                    state.done = True
                    state.success = True
                else:
                    # Next target provisioned; progress tracking restarts.
                    state.best_dist = _target_distance(state)
            else:
                state.done = True
                state.success = False
                state.false_end = True

    reward = STEP_PENALTY
    if not state.done or state.success:
        d = _target_distance(state)
        if success_event and state.done:
            d = min(d, state.best_dist)
        # The distance field is 4-connected but diagonal headings can cross
        # cell corners into regions it marks unreachable, so d (or the
        # running best) may be infinite; shaping only pays off finite
        # progress.
        if math.isfinite(d) and math.isfinite(state.best_dist):
            reward += max(0.0, state.best_dist - d)
        state.best_dist = min(state.best_dist, d)
    if success_event:
        reward += FOUND_REWARD

    if not state.done and state.step_count >= state.task.max_steps:
        state.done = True
        state.timeout = True

    return state, _observe(state), reward, state.done, info
