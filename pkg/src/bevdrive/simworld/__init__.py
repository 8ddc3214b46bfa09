"""Desk-scale driving simulator: maps, dynamics, rendering, observations."""
from .maps import GENERATOR_VERSION, Lane, MapSpec, generate_map
from .render import RenderContext, render_camera
from .world import (
    EPISODE_LEN,
    Action,
    ActorState,
    Congestion,
    DrivingWorld,
    Observation,
    RewardParams,
    SimParams,
    WorldState,
    assemble_features,
    ground_truth_bev_mask,
    motion_similarity,
    reward_fn,
)

__all__ = [
    "GENERATOR_VERSION", "Lane", "MapSpec", "generate_map",
    "RenderContext", "render_camera",
    "EPISODE_LEN", "Action", "ActorState", "Congestion", "DrivingWorld",
    "Observation", "RewardParams", "SimParams", "WorldState",
    "assemble_features", "ground_truth_bev_mask", "motion_similarity", "reward_fn",
]
