"""Late-constraint guided diffusion at desk scale: tapped denoiser, condition adapter, guided sampler."""

__version__ = "0.1.0"
