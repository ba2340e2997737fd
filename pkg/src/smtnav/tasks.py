"""Rewards, termination and episode metrics for roaming, coverage and search."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .embedding import Observation
from .env.dynamics import GO_FORWARD, AgentState
from .errors import ConfigurationError

TASKS = ("roaming", "coverage", "search")


@dataclass
class TaskConfig:
    kind: str = "coverage"
    horizon: int = 500
    cell_size: float = 0.5
    forward_reward: float = 1.0
    coverage_reward: float = 5.0
    search_reward: float = 100.0
    search_coverage_weight: float = 0.2
    collision_reward: float = -1.0
    max_collisions: int = 50
    detect_fraction: float = 0.04
    detect_depth: float = 2.0
    step_size: float = 0.25

    def validate(self) -> None:
        if self.kind not in TASKS:
            raise ConfigurationError(f"task kind must be one of {TASKS}, got {self.kind!r}")
        if self.horizon < 1 or self.cell_size <= 0:
            raise ConfigurationError("horizon and cell_size must be positive")


@dataclass(frozen=True)
class TaskState:
    kind: str
    visited: frozenset
    found: frozenset = frozenset()
    cumulative: float = 0.0
    breakdown: dict = field(default_factory=lambda: {
        "forward": 0.0, "coverage": 0.0, "search": 0.0, "collision": 0.0})


def coverage_cell(x: float, y: float, cell: float) -> tuple[int, int]:
    return int(math.floor(x / cell)), int(math.floor(y / cell))


def initial_state(cfg: TaskConfig, start: AgentState) -> TaskState:
    """The spawn cell counts as already visited (entering it earns nothing)."""
    return TaskState(cfg.kind, frozenset([coverage_cell(start.x, start.y, cfg.cell_size)]))


def detected_classes(o: Observation, cfg: TaskConfig) -> set[int]:
    """Target classes covering more than ``detect_fraction`` of rays within range."""
    near = (o.valid > 0) & (o.depth < cfg.detect_depth) & (o.labels >= 2)
    if not near.any():
        return set()
    counts = np.bincount(o.labels[near], minlength=o.num_channels)
    need = cfg.detect_fraction * o.num_rays
    return {int(lab) - 1 for lab in np.nonzero(counts > need)[0] if lab >= 2}


def reward(prev: TaskState, s: AgentState, action: int, collided: bool, o: Observation,
           cfg: TaskConfig) -> tuple[float, TaskState]:
    """Reward for the transition that produced state ``s`` and observation ``o``."""
    parts = dict(prev.breakdown)
    visited, found = prev.visited, prev.found
    r_forward = r_cov = r_search = r_col = 0.0
    if collided:
        r_col = cfg.collision_reward
    cell = coverage_cell(s.x, s.y, cfg.cell_size)
    entered = cell not in visited
    if entered:
        visited = visited | {cell}
    if cfg.kind == "roaming":
        if action == GO_FORWARD and not collided:
            r_forward = cfg.forward_reward
    elif cfg.kind == "coverage":
        if entered:
            r_cov = cfg.coverage_reward
    else:
        if entered:
            r_cov = cfg.search_coverage_weight * cfg.coverage_reward
        new = detected_classes(o, cfg) - found
        if new:
            found = found | new
            r_search = cfg.search_reward * len(new)
    total = r_forward + r_cov + r_search + r_col
    parts["forward"] += r_forward
    parts["coverage"] += r_cov
    parts["search"] += r_search
    parts["collision"] += r_col
    return total, replace(prev, visited=visited, found=found,
                          cumulative=prev.cumulative + total, breakdown=parts)


def terminated(ts: TaskState, s: AgentState, step: int, horizon: int,
               max_collisions: int = 50) -> bool:
    """Horizon reached or strictly more than ``max_collisions`` collisions."""
    return step >= horizon or s.collisions > max_collisions


def metrics(trace, cfg: TaskConfig) -> dict:
    """Task metrics recomputed from a trace's actions, pose track and observations."""
    actions = np.asarray(trace.actions, dtype=np.int64)
    collided = np.asarray(trace.collided, dtype=bool)
    n = len(actions)
    clean_fwd = int(np.sum((actions == GO_FORWARD) & ~collided)) if n else 0
    poses = np.asarray(trace.true_poses)
    cells = set()
    new_cells = 0
    if len(poses):
        cells.add(coverage_cell(poses[0][0], poses[0][1], cfg.cell_size))
        for p in poses[1:n + 1]:
            c = coverage_cell(p[0], p[1], cfg.cell_size)
            if c not in cells:
                cells.add(c)
                new_cells += 1
    found: set[int] = set()
    curve = []
    for o in trace.observations[1:n + 1]:
        found |= detected_classes(o, cfg)
        curve.append(len(found))
    present = list(getattr(trace, "plan_classes", []) or [])
    out = {
        "steps": n,
        "reward": float(np.sum(trace.rewards)) if n else 0.0,
        "distance": cfg.step_size * clean_fwd,
        "clean_forwards": clean_fwd,
        "collisions": int(collided.sum()),
        "covered_cells": new_cells,
        "found_classes": len(found),
        "classes_present": len(present),
        "ratio": (len(found) / len(present)) if present else 0.0,
        "found_curve": curve,
    }
    return out


def closed_form_reward(m: dict, cfg: TaskConfig) -> float:
    """Cumulative reward implied by the metric counts (the accounting identity)."""
    col = cfg.collision_reward * m["collisions"]
    if cfg.kind == "roaming":
        return cfg.forward_reward * m["clean_forwards"] + col
    if cfg.kind == "coverage":
        return cfg.coverage_reward * m["covered_cells"] + col
    return (cfg.search_reward * m["found_classes"]
            + cfg.search_coverage_weight * cfg.coverage_reward * m["covered_cells"] + col)
