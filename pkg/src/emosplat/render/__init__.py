from .projection import ProjectedGaussian, Projection, project, project_field, projection_backward
from .rasterizer import (
    GradientBuffer,
    RenderError,
    RenderOutput,
    backward,
    benchmark,
    render,
    render_normal_map,
)

__all__ = [
    "ProjectedGaussian",
    "Projection",
    "project",
    "project_field",
    "projection_backward",
    "GradientBuffer",
    "RenderError",
    "RenderOutput",
    "backward",
    "benchmark",
    "render",
    "render_normal_map",
]
