"""Feudal hierarchical reinforcement learning agent with hand-derived
gradients, flat recurrent baselines and toy memory environments."""

from .agent import AgentConfig, FeudalNet
from .baseline import BaselineConfig, BaselineNet
from .envs import ChainSpec, TMazeSpec, WaterMazeSpec, make_env, optimal_return
from .training import FeudalLearner, TrainConfig

__version__ = "0.1.0"

__all__ = [
    "AgentConfig", "FeudalNet", "BaselineConfig", "BaselineNet", "ChainSpec", "TMazeSpec",
    "WaterMazeSpec", "make_env", "optimal_return", "FeudalLearner", "TrainConfig",
]
