"""Synthetic scene-text clips with ground-truth geometry, lighting and blur."""

from .render import render_text_roi
from .scenario import GroundTruthBundle, ScenarioSpec, generate_clip

__all__ = ["GroundTruthBundle", "ScenarioSpec", "generate_clip", "render_text_roi"]
