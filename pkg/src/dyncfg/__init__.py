"""Learned dynamic classifier-free guidance schedules for a toy masked-diffusion sampler."""

__version__ = "0.1.0"
