"""Intensity-to-latency encoding: brighter pixels spike earlier."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .neuron import T_MAX


@dataclass(frozen=True)
class EncoderConfig:
    t_min: float = 0.0
    t_max_input: float = 1.0
    intensity_max: float = 255.0

    def __post_init__(self):
        if not 0.0 <= self.t_min < self.t_max_input <= T_MAX:
            raise ValueError(
                f"need 0 <= t_min < t_max_input <= {T_MAX}, got {self.t_min}, {self.t_max_input}")
        if not self.intensity_max > 0:
            raise ValueError(f"intensity_max must be positive, got {self.intensity_max}")


def encode_image(pixels, config: EncoderConfig = EncoderConfig(), dtype=np.float32) -> np.ndarray:
    """Map intensities linearly onto ``[t_min, t_max_input]``, reversed.

    Works on any array shape; zero-intensity pixels still spike, at
    ``t_max_input``.
    """
    x = np.asarray(pixels, dtype=np.float64)
    if x.size and (x.min() < 0 or x.max() > config.intensity_max):
        raise ValueError(
            f"intensities must lie in [0, {config.intensity_max}], got [{x.min()}, {x.max()}]")
    span = config.t_max_input - config.t_min
    return (config.t_min + (1.0 - x / config.intensity_max) * span).astype(dtype)
