"""Image quality transfer from ultra-low-field to high-field MRI with a conditional 3D diffusion model."""

__version__ = "0.1.0"
