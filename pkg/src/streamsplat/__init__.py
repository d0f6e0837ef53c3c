"""Streaming Gaussian splatting with RGB and language features."""
from .core import CameraPose, GaussianPrimitive, GaussianScene, Intrinsics, InvalidArgumentError
from .render import RenderTarget, brute_force_render, rasterize, rasterize_backward

__version__ = "0.1.0"

__all__ = [
    "CameraPose", "GaussianPrimitive", "GaussianScene", "Intrinsics", "InvalidArgumentError",
    "RenderTarget", "brute_force_render", "rasterize", "rasterize_backward", "__version__",
]
