"""Training-free embodied question answering with model-driven camera exploration.

A vision-language model first picks question-relevant frames, then moves a
virtual camera through a point-cloud scene with discrete actions until it
can answer.
"""

from .agent import AgentSettings, EpisodeResult, LoopBudget, Termination, run_episode
from .config import Config
from .errors import ChainViewError, ConfigError
from .geometry import CameraPose, Intrinsics, Motion, MotionConfig, SwitchTo, apply_action
from .metrics import bleu4, cider, em_at_1, llm_match, rouge_l
from .renderer import Observation, RenderSettings, render_birds_eye, render_view
from .scene_io import Episode, ScenePointCloud, load_episode, load_point_cloud

__version__ = "0.1.0"

__all__ = [
    "AgentSettings", "CameraPose", "ChainViewError", "Config", "ConfigError", "Episode",
    "EpisodeResult", "Intrinsics", "LoopBudget", "Motion", "MotionConfig", "Observation",
    "RenderSettings", "ScenePointCloud", "SwitchTo", "Termination", "apply_action", "bleu4",
    "cider", "em_at_1", "llm_match", "load_episode", "load_point_cloud", "render_birds_eye",
    "render_view", "rouge_l", "run_episode",
]
