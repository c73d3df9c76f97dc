"""Desk-scale controllable image composition with latent diffusion."""
import torch as _torch

# float64 everywhere; bitwise-reproducible kernels.
_torch.set_default_dtype(_torch.float64)
_torch.use_deterministic_algorithms(True)

__version__ = "0.1.0"
