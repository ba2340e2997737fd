"""Noisy differential-drive motion, collision revert, ray sensing, dead reckoning."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .. import _kernels
from ..embedding import NONE_ACTION, Observation, wrap_angle
from ..errors import ConfigurationError
from .floorplan import Floorplan, spawn_cells

GO_FORWARD, TURN_LEFT, TURN_RIGHT = 0, 1, 2
ACTION_NAMES = ("go_forward", "turn_left", "turn_right")


@dataclass
class DynamicsConfig:
    wheel_radius: float = 0.065
    axle_width: float = 0.375
    wheel_noise_std: float = 0.5      # rad/s on each wheel
    step_size: float = 0.25
    turn_angle: float = math.pi / 4
    duration: float = 1.0             # seconds of wheel command per action
    substeps: int = 10
    depth_noise_std: float = 0.05
    depth_range: float = 5.0
    num_rays: int = 30
    fov: float = math.pi / 2

    def validate(self) -> None:
        positive = ("wheel_radius", "axle_width", "step_size", "turn_angle", "duration",
                    "depth_range", "fov")
        for name in positive:
            if getattr(self, name) <= 0:
                raise ConfigurationError(f"dynamics.{name} must be positive")
        if self.wheel_noise_std < 0 or self.depth_noise_std < 0:
            raise ConfigurationError("noise standard deviations must be nonnegative")
        if self.substeps < 1 or self.num_rays < 1:
            raise ConfigurationError("substeps and num_rays must be at least 1")

    def nominal_wheel_speeds(self, action: int) -> tuple[float, float]:
        """(left, right) wheel speeds in rad/s that realise the action at zero noise."""
        r, half = self.wheel_radius, self.axle_width / 2
        if action == GO_FORWARD:
            w = self.step_size / self.duration / r
            return w, w
        turn = self.turn_angle / self.duration * half / r
        return (-turn, turn) if action == TURN_LEFT else (turn, -turn)


@dataclass(frozen=True)
class AgentState:
    x: float
    y: float
    theta: float
    collisions: int = 0
    step: int = 0

    @property
    def pose(self) -> np.ndarray:
        return np.array([self.x, self.y, self.theta])


def _body_velocity(action: int, dyn: DynamicsConfig, noise_l: float, noise_r: float):
    # nominal body velocity plus wheel noise pushed through the drive kinematics
    r, L = dyn.wheel_radius, dyn.axle_width
    v = 0.0
    w = 0.0
    if action == GO_FORWARD:
        v = dyn.step_size / dyn.duration
    elif action == TURN_LEFT:
        w = dyn.turn_angle / dyn.duration
    else:
        w = -dyn.turn_angle / dyn.duration
    return v + r * (noise_l + noise_r) / 2.0, w + r * (noise_r - noise_l) / L


def _advance(x, y, th, v, w, t):
    """Exact constant-(v, w) arc from (x, y, th) after time t."""
    if abs(w) < 1e-12:
        return x + v * t * math.cos(th), y + v * t * math.sin(th), th
    th2 = th + w * t
    return (x + v / w * (math.sin(th2) - math.sin(th)),
            y - v / w * (math.cos(th2) - math.cos(th)), th2)


def _wrap(a: float) -> float:
    return float(wrap_angle(a))


def step(s: AgentState, action: int, plan: Floorplan, dyn: DynamicsConfig,
         rng: np.random.Generator) -> tuple[AgentState, bool]:
    """Execute one discrete action; a collision reverts the whole action."""
    noise = rng.normal(0.0, dyn.wheel_noise_std, size=2)
    v, w = _body_velocity(action, dyn, float(noise[0]), float(noise[1]))
    grid = plan.grid
    cell = plan.cell_size
    px, py = s.x, s.y
    collided = False
    for k in range(1, dyn.substeps + 1):
        if k == dyn.substeps:
            nx, ny, nth = _advance(s.x, s.y, s.theta, v, w, dyn.duration)
        else:
            nx, ny, nth = _advance(s.x, s.y, s.theta, v, w, dyn.duration * k / dyn.substeps)
        if _kernels.segment_blocked(grid, px, py, nx, ny, cell):
            collided = True
            break
        px, py = nx, ny
    if collided:
        return replace(s, collisions=s.collisions + 1, step=s.step + 1), True
    return AgentState(nx, ny, _wrap(nth), s.collisions, s.step + 1), False


def dead_reckon(pose, action: int, dyn: DynamicsConfig) -> np.ndarray:
    """Compose the noiseless nominal motion of ``action`` onto ``pose``."""
    v, w = _body_velocity(action, dyn, 0.0, 0.0)
    x, y, th = _advance(float(pose[0]), float(pose[1]), float(pose[2]), v, w, dyn.duration)
    return np.array([x, y, _wrap(th)])


def ray_angles(theta: float, dyn: DynamicsConfig) -> np.ndarray:
    """Ray ``num_rays // 2`` points straight ahead; rays are ``fov / num_rays`` apart."""
    i = np.arange(dyn.num_rays)
    return theta + (i - dyn.num_rays // 2) * (dyn.fov / dyn.num_rays)


def render_observation(s: AgentState, plan: Floorplan, dyn: DynamicsConfig, prev_action: int,
                       rng: np.random.Generator, pose=None, num_channels: int = 8) -> Observation:
    """Cast rays from the true pose; ``pose`` overrides the reported pose."""
    dist, label = _kernels.raycast(plan.grid, float(s.x), float(s.y),
                                   ray_angles(s.theta, dyn), plan.cell_size, dyn.depth_range)
    noise = rng.normal(0.0, dyn.depth_noise_std, size=dyn.num_rays)
    valid = (label > 0) & (dist <= dyn.depth_range)
    depth = np.where(valid, np.clip(dist + noise, 0.0, dyn.depth_range), 0.0)
    labels = np.where(valid, label, 0).astype(np.int64)
    reported = s.pose if pose is None else np.asarray(pose, dtype=np.float64)
    return Observation(depth=depth, valid=valid.astype(np.int8), labels=labels,
                       pose=reported, prev_action=int(prev_action), t=int(s.step),
                       num_channels=num_channels)


class NavEnv:
    """One rollout's world: true state, optional dead-reckoned pose, sensing.

    All randomness (spawn, wheel noise, depth noise) comes from ``rng``.
    """

    def __init__(self, plan: Floorplan, dyn: DynamicsConfig, rng: np.random.Generator,
                 pose_source: str = "true"):
        dyn.validate()
        if pose_source not in ("true", "dead_reckoning"):
            raise ConfigurationError("pose_source must be 'true' or 'dead_reckoning'")
        self.plan = plan
        self.dyn = dyn
        self.rng = rng
        self.pose_source = pose_source
        self.state: AgentState | None = None
        self.estimate: np.ndarray | None = None
        self.prev_action = NONE_ACTION

    def reset(self, start: AgentState | None = None) -> Observation:
        if start is None:
            cells = spawn_cells(self.plan)
            i, j = cells[int(self.rng.integers(len(cells)))]
            c = self.plan.cell_size
            theta = float(self.rng.uniform(-math.pi, math.pi))
            start = AgentState(float((i + 0.5) * c), float((j + 0.5) * c), theta)
        self.state = start
        self.estimate = start.pose.copy()
        self.prev_action = NONE_ACTION
        return self.observe()

    def reported_pose(self) -> np.ndarray:
        return self.state.pose if self.pose_source == "true" else self.estimate.copy()

    def observe(self) -> Observation:
        return render_observation(self.state, self.plan, self.dyn, self.prev_action, self.rng,
                                  pose=self.reported_pose())

    def step(self, action: int) -> tuple[Observation, bool]:
        self.state, collided = step(self.state, action, self.plan, self.dyn, self.rng)
        if not collided:
            self.estimate = dead_reckon(self.estimate, action, self.dyn)
        self.prev_action = int(action)
        return self.observe(), collided
