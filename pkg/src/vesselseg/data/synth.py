"""Synthetic angiogram generation: dark branching vessel trees on a bright
background, with optional linear illumination ramp and Gaussian noise.

Every sample is a pure function of its seed. With the ramp and noise disabled
the image is an exact two-level rendering of the mask.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import ConfigError

VESSEL_LEVEL = 0.25
BACKGROUND_LEVEL = 0.85
MIN_WIDTH = 0.9  # narrower branches than one pixel radius stop recursing
DEFAULT_SPACING_MM = 0.30


@dataclass
class SynthConfig:
    size: int = 64
    branch_depth: int = 3
    vessel_width_range: tuple[float, float] = (2.2, 3.6)
    noise_sigma: float = 0.04
    illumination_gradient: float = 0.15
    seed: int = 0

    def validate(self) -> None:
        if self.size < 8 or (self.size & (self.size - 1)) != 0:
            raise ConfigError(f"size must be a power of 2 >= 8, got {self.size}")
        lo, hi = self.vessel_width_range
        if not (0 < lo <= hi):
            raise ConfigError(f"invalid vessel_width_range {self.vessel_width_range}")
        if self.branch_depth < 0:
            raise ConfigError("branch_depth must be >= 0")
        if self.noise_sigma < 0 or self.illumination_gradient < 0:
            raise ConfigError("noise_sigma and illumination_gradient must be >= 0")


@dataclass
class Sample:
    image: np.ndarray             # H x W float32 in [0, 1]
    mask: np.ndarray              # H x W uint8 in {0, 1}
    spacing: tuple[float, float]  # (row_mm, col_mm)
    patient_id: str
    view_tag: str

    def copy(self) -> "Sample":
        return Sample(self.image.copy(), self.mask.copy(), self.spacing,
                      self.patient_id, self.view_tag)


def _stamp_segment(mask, yy, xx, rng, pos, angle, length, width) -> np.ndarray:
    """Walk a curved segment, stamping width-tapered disks; returns end point."""
    size = mask.shape[0]
    steps = max(int(length), 2)
    taper = np.linspace(width, 0.78 * width, steps)
    for step in range(steps):
        angle += rng.normal(0.0, 0.065)
        pos = pos + np.array([np.sin(angle), np.cos(angle)])
        r = taper[step] / 2.0
        mask |= (yy - pos[0]) ** 2 + (xx - pos[1]) ** 2 <= r * r
        if not (-width <= pos[0] <= size + width and -width <= pos[1] <= size + width):
            break
    return pos, angle, taper[-1]


def _grow(mask, yy, xx, rng, pos, angle, length, width, depth) -> None:
    pos, angle, end_width = _stamp_segment(mask, yy, xx, rng, pos, angle, length, width)
    if depth <= 0 or end_width < 2 * MIN_WIDTH:
        return
    for sign in (-1.0, 1.0):
        child_angle = angle + sign * rng.uniform(0.35, 0.8)
        child_len = length * rng.uniform(0.5, 0.7)
        child_width = end_width * rng.uniform(0.62, 0.8)
        _grow(mask, yy, xx, rng, pos, child_angle, child_len, child_width, depth - 1)


def generate(config: SynthConfig, patient_id: str = "p0000",
             view_tag: str = "LCA-LAO") -> Sample:
    """Render one vessel tree; fully determined by ``config.seed``."""
    config.validate()
    rng = np.random.default_rng(config.seed)
    size = config.size
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    mask = np.zeros((size, size), dtype=bool)

    width = rng.uniform(*config.vessel_width_range)
    start = np.array([0.0, rng.uniform(0.3, 0.7) * size])
    angle = np.pi / 2 + rng.uniform(-0.35, 0.35)  # mostly downward
    _grow(mask, yy, xx, rng, start, angle, 0.55 * size, width, config.branch_depth)

    image = np.where(mask, np.float32(VESSEL_LEVEL),
                     np.float32(BACKGROUND_LEVEL)).astype(np.float32)
    if config.illumination_gradient > 0:
        theta = rng.uniform(0.0, 2.0 * np.pi)
        ramp = config.illumination_gradient * (
            (np.cos(theta) * xx + np.sin(theta) * yy) / size - 0.5)
        image = (image + ramp).astype(np.float32)
    if config.noise_sigma > 0:
        image = image + rng.normal(0.0, config.noise_sigma,
                                   size=image.shape).astype(np.float32)
    image = np.clip(image, 0.0, 1.0).astype(np.float32)
    return Sample(image=image, mask=mask.astype(np.uint8),
                  spacing=(DEFAULT_SPACING_MM, DEFAULT_SPACING_MM),
                  patient_id=patient_id, view_tag=view_tag)
