"""Diffusion time-step curriculum for score distillation, at desk scale.

A 2D density field (the student) is fitted to one reference projection and
guided at unseen view angles by small trained denoisers (the teachers).
"""

from .config import RunConfig, load_config, parse_config
from .diffusion import make_schedule
from .pipeline import RunRecord, distill, train_teachers

__all__ = ["RunConfig", "RunRecord", "distill", "load_config", "make_schedule", "parse_config", "train_teachers"]
__version__ = "0.1.0"
