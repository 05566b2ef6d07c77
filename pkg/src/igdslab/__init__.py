"""Information-guided diffusion sampling for dataset distillation, at desk scale."""

__version__ = "0.1.0"
