"""Unpaired 8x super-resolution of clinical lung CT guided by micro CT."""

__version__ = "0.1.0"

from .errors import MMSRError  # noqa: E402,F401
from .losses import LossWeights, SSIMParams, mmsr_total  # noqa: E402,F401
