"""Text-conditioned 3D scene-layout generation with an equivariant graph diffusion model."""

__version__ = "0.1.0"
