"""Desk-scale partially observable navigation world."""

from .dynamics import (
    ACTION_NAMES,
    GO_FORWARD,
    TURN_LEFT,
    TURN_RIGHT,
    AgentState,
    DynamicsConfig,
    NavEnv,
    dead_reckon,
    ray_angles,
    render_observation,
    step,
)
from .floorplan import (
    Floorplan,
    FloorplanConfig,
    free_components,
    generate_floorplan,
    open_hall,
    spawn_cells,
    validate_floorplan,
)

__all__ = [
    "ACTION_NAMES", "GO_FORWARD", "TURN_LEFT", "TURN_RIGHT", "AgentState", "DynamicsConfig",
    "NavEnv", "dead_reckon", "ray_angles", "render_observation", "step", "Floorplan",
    "FloorplanConfig", "free_components", "generate_floorplan", "open_hall", "spawn_cells",
    "validate_floorplan",
]
