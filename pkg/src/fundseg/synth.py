"""Deterministic fundus-like test images with exact ground truth.

A case is an elliptical disc on a dark background with a concentric, brighter
elliptical cup. The vertical CDR is known in closed form (cup vertical
semi-axis over disc vertical semi-axis), which makes every downstream
measurement checkable.
"""

from dataclasses import dataclass

import numpy as np

from . import contours as ct
from .errors import ConfigurationError, ContractError

_MASK64 = (1 << 64) - 1


def mix64(seed, index):
    """splitmix64 finalizer applied to seed + (index + 1) * golden-ratio increment."""
    z = (int(seed) + (int(index) + 1) * 0x9E3779B97F4A7C15) & _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


@dataclass(frozen=True)
class SynthSpec:
    size: int = 64
    disc_vertical_range: tuple = (13.0, 20.0)  # semi-axis, pixels
    disc_aspect_range: tuple = (0.85, 1.15)   # horizontal / vertical
    cdr_range: tuple = (0.2, 0.9)
    cup_aspect_jitter: tuple = (0.9, 1.05)     # cup aspect relative to disc aspect
    background: float = 0.15
    disc_level: float = 0.5
    cup_level: float = 0.85
    noise_sigma: float = 0.04
    center_jitter: float = 6.0
    n_vertices: int = 360

    def validate(self):
        lo, hi = self.cdr_range
        if not 0 <= lo <= hi:
            raise ConfigurationError(f"bad CDR range {self.cdr_range}")
        if hi * self.cup_aspect_jitter[1] >= 1.0 or hi >= 1.0:
            raise ConfigurationError(
                f"CDR range {self.cdr_range} with cup aspect jitter {self.cup_aspect_jitter} "
                f"cannot keep the cup strictly inside the disc")
        if not self.background < self.disc_level < self.cup_level:
            raise ConfigurationError("intensities must satisfy background < disc < cup")
        reach = self.disc_vertical_range[1] * max(1.0, self.disc_aspect_range[1]) + self.center_jitter
        if reach > self.size / 2 - 1:
            raise ConfigurationError(
                f"disc of reach {reach:.1f} px does not fit a {self.size}x{self.size} image")
        if self.noise_sigma < 0:
            raise ConfigurationError("noise sigma must be >= 0")


@dataclass
class SynthCase:
    case_id: str
    image: np.ndarray        # (H, W) float in [0, 1], quantized to 16-bit levels
    disc_contour: np.ndarray
    cup_contour: np.ndarray
    disc_mask: np.ndarray    # uint8 {0, 255}
    cup_mask: np.ndarray
    true_cdr: float
    label: int
    seed: int


def gen_case(spec=SynthSpec(), seed=0, case_id=None):
    spec.validate()
    rng = np.random.default_rng(seed)
    size = spec.size
    cx, cy = (size - 1) / 2 + rng.uniform(-spec.center_jitter, spec.center_jitter, size=2)
    b_disc = rng.uniform(*spec.disc_vertical_range)
    a_disc = b_disc * rng.uniform(*spec.disc_aspect_range)
    cdr = float(rng.uniform(*spec.cdr_range))
    b_cup = cdr * b_disc
    a_cup = cdr * a_disc * rng.uniform(*spec.cup_aspect_jitter)

    disc_c = ct.ellipse((cx, cy), a_disc, b_disc, spec.n_vertices)
    cup_c = ct.ellipse((cx, cy), a_cup, b_cup, spec.n_vertices)
    disc_m = ct.rasterize(disc_c, size, size)
    cup_m = ct.rasterize(cup_c, size, size)

    img = np.full((size, size), spec.background)
    img[disc_m > 0] = spec.disc_level
    img[cup_m > 0] = spec.cup_level
    if spec.noise_sigma > 0:
        img = img + rng.normal(0.0, spec.noise_sigma, size=img.shape)
    img = np.round(np.clip(img, 0.0, 1.0) * 65535) / 65535

    true_cdr = b_cup / b_disc
    return SynthCase(
        case_id=case_id if case_id is not None else f"case{seed:020d}",
        image=img, disc_contour=disc_c, cup_contour=cup_c,
        disc_mask=disc_m, cup_mask=cup_m,
        true_cdr=float(true_cdr), label=int(true_cdr >= 0.5), seed=int(seed),
    )


def gen_cohort(spec=SynthSpec(), n=200, seed=0):
    if n < 1:
        raise ContractError(f"cohort size must be >= 1, got {n}")
    return [gen_case(spec, mix64(seed, i), case_id=f"case{i:04d}") for i in range(n)]


def prevalence(cases):
    return sum(c.label for c in cases) / len(cases)


def perturb_expert(contour, seed, amplitude, smoothness=4, n_angles=360):
    """Perturb the radius about the centroid by a band-limited random function.

    delta(theta) is a sum of ``smoothness`` harmonics with random phases,
    rescaled so that max |delta| equals ``amplitude``. The result is a polar
    graph around the centroid and therefore star-shaped.
    """
    origin = ct.centroid(contour)
    polar = ct.to_polar(contour, origin, n_angles)
    r = polar.radii
    if amplitude < 0:
        raise ContractError(f"amplitude must be >= 0, got {amplitude}")
    if amplitude >= r.min():
        raise ContractError(f"amplitude {amplitude} must be below the inradius {r.min():.4g}")
    if amplitude == 0:
        return polar.points()
    if smoothness < 1:
        raise ContractError(f"smoothness must be >= 1, got {smoothness}")
    rng = np.random.default_rng(seed)
    th = polar.thetas
    h = np.arange(1, smoothness + 1)
    coeff = rng.uniform(0.0, 1.0, size=smoothness) / h
    phase = rng.uniform(0.0, 2 * np.pi, size=smoothness)
    delta = (coeff[:, None] * np.cos(h[:, None] * th[None, :] + phase[:, None])).sum(axis=0)
    delta *= amplitude / np.max(np.abs(delta))
    rr = r + delta
    return np.column_stack([origin[0] + rr * np.cos(th), origin[1] + rr * np.sin(th)])


def expert_annotations(contour, n_experts, seed, amplitude, smoothness=4):
    """Independent perturbed copies of ``contour``, one per simulated expert."""
    return [perturb_expert(contour, mix64(seed, k), amplitude, smoothness) for k in range(n_experts)]
