"""Adversarial examples sampled from guided diffusion models, at toy scale.

Modules: ``numerics`` (reverse-mode autodiff), ``diffusion`` (schedules and
samplers), ``models`` (MLP denoiser/classifier and checkpoints), ``training``,
``guidance`` (the adversarial sampling attack), ``data`` (ring mixture and
analytic oracles), ``evaluate``, ``verify`` and ``cli``.
"""

__version__ = "0.1.0"
