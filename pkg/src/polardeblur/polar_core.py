"""Linear polarization image formation and inversion.

Images are channel-last numpy arrays ``(H, W, C)`` in linear radiance.
The Stokes/DoLP/AoLP helpers are written against plain arithmetic so they
also accept torch tensors of any layout (used by the losses and the model).
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, DomainError

ANGLES_DEG = (0, 45, 90, 135)
ANGLE_KEYS = ("i000", "i045", "i090", "i135")
DEFAULT_EPS = 1e-6


def _is_torch(x):
    return type(x).__module__.startswith("torch")


@dataclass
class PolarizedImageSet:
    i000: np.ndarray
    i045: np.ndarray
    i090: np.ndarray
    i135: np.ndarray

    def __post_init__(self):
        shapes = {np.shape(a) for a in self.images()}
        if len(shapes) != 1:
            raise DimensionError(f"polarized images differ in shape: {sorted(shapes)}")

    def images(self):
        return (self.i000, self.i045, self.i090, self.i135)

    @property
    def shape(self):
        return np.shape(self.i000)

    def stack(self) -> np.ndarray:
        return np.stack(self.images(), axis=0)

    @classmethod
    def from_stack(cls, stack) -> "PolarizedImageSet":
        if len(stack) != 4:
            raise DimensionError(f"expected 4 polarized images, got {len(stack)}")
        return cls(*[np.asarray(s) for s in stack])

    def map(self, fn) -> "PolarizedImageSet":
        return PolarizedImageSet(*[fn(a) for a in self.images()])


@dataclass
class StokesMaps:
    s0: np.ndarray
    s1: np.ndarray
    s2: np.ndarray


@dataclass
class PolarizationState:
    dolp: np.ndarray
    aolp: np.ndarray


@dataclass
class PhysicalReport:
    identity_violation: float | None
    dolp_violation: float
    tol: float
    passed: bool

    def lines(self):
        out = []
        if self.identity_violation is not None:
            out.append(f"i000+i090 vs i045+i135: max violation {self.identity_violation:.3e}")
        out.append(f"sqrt(s1^2+s2^2) <= s0: max violation {self.dolp_violation:.3e}")
        out.append(f"tol {self.tol:.1e}: {'PASS' if self.passed else 'FAIL'}")
        return out


def malus_render(intensity, dolp, aolp, angle):
    """Intensity seen through a linear polarizer at ``angle`` radians."""
    intensity = np.asarray(intensity)
    dtype = np.result_type(intensity.dtype, np.float32)
    intensity = intensity.astype(dtype, copy=False)
    dolp = np.asarray(dolp, dtype=dtype)
    aolp = np.asarray(aolp, dtype=dtype)
    for name, m in (("dolp", dolp), ("aolp", aolp)):
        try:
            shape = np.broadcast_shapes(intensity.shape, m.shape)
        except ValueError:
            shape = None
        if shape != intensity.shape:
            raise DimensionError(f"{name} shape {m.shape} incompatible with intensity {intensity.shape}")
    if np.any(dolp < 0) or np.any(dolp > 1):
        raise DomainError("dolp must lie in [0, 1]")
    if np.any(intensity < 0) or not np.all(np.isfinite(intensity)):
        raise DomainError("intensity must be finite and non-negative")
    out = 0.5 * intensity * (1 - dolp * np.cos(2 * (angle - aolp)))
    # rounding can push 1 - p*cos slightly outside [0, 2]
    return np.clip(out, 0, intensity).astype(dtype, copy=False)


def render_polarized_set(intensity, dolp, aolp) -> PolarizedImageSet:
    return PolarizedImageSet(
        *[malus_render(intensity, dolp, aolp, math.radians(a)) for a in ANGLES_DEG]
    )


def stokes(i000, i045, i090, i135):
    """(s0, s1, s2) from the four polarized images; numpy or torch."""
    s0 = 0.5 * (i000 + i045 + i090 + i135)
    s1 = i090 - i000
    s2 = i135 - i045
    return s0, s1, s2


def stokes_from_set(pset: PolarizedImageSet) -> StokesMaps:
    return StokesMaps(*stokes(*pset.images()))


def unpolarized_from_set(pset: PolarizedImageSet):
    return stokes_from_set(pset).s0


def dolp(s0, s1, s2, eps=DEFAULT_EPS):
    if _is_torch(s0):
        import torch

        mag = torch.sqrt(s1 * s1 + s2 * s2)
        p = mag / torch.clamp(s0, min=eps)
        p = torch.where(s0 < eps, torch.zeros_like(p), p)
        return torch.clamp(p, 0.0, 1.0)
    s0, s1, s2 = (np.asarray(a) for a in (s0, s1, s2))
    mag = np.sqrt(s1 * s1 + s2 * s2)
    p = mag / np.maximum(s0, eps)
    p = np.where(s0 < eps, 0, p)
    return np.clip(p, 0, 1).astype(mag.dtype, copy=False)


def aolp(s0, s1, s2, eps=DEFAULT_EPS):
    """Half the two-argument arctangent, wrapped to [0, pi); dark pixels map to 0."""
    if _is_torch(s1):
        import torch

        theta = 0.5 * torch.atan2(s2, s1)
        theta = torch.remainder(theta, math.pi)
        theta = torch.where(theta >= math.pi, theta - math.pi, theta)
        dead = (s1 == 0) & (s2 == 0)
        if s0 is not None:
            dead = dead | (s0 < eps)
        return torch.where(dead, torch.zeros_like(theta), theta)
    s1, s2 = np.asarray(s1), np.asarray(s2)
    theta = np.mod(0.5 * np.arctan2(s2, s1), np.pi)
    # mod can return exactly pi for tiny negative inputs
    theta = np.where(theta >= np.pi, theta - np.pi, theta)
    dead = (s1 == 0) & (s2 == 0)
    if s0 is not None:
        dead |= np.asarray(s0) < eps
    return np.where(dead, 0, theta).astype(theta.dtype, copy=False)


def dolp_from_stokes(st: StokesMaps, eps=DEFAULT_EPS):
    return dolp(st.s0, st.s1, st.s2, eps)


def aolp_from_stokes(st: StokesMaps, eps=DEFAULT_EPS):
    return aolp(st.s0, st.s1, st.s2, eps)


def polarization_from_set(pset: PolarizedImageSet, eps=DEFAULT_EPS) -> PolarizationState:
    st = stokes_from_set(pset)
    return PolarizationState(dolp_from_stokes(st, eps), aolp_from_stokes(st, eps))


def circular_aolp_diff(a, b):
    """Absolute angular distance between two AoLP maps, modulo pi."""
    d = np.abs(np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)) % np.pi
    return np.minimum(d, np.pi - d)


def validate_physical(obj, tol=1e-6) -> PhysicalReport:
    """Check the complementary-pair identity and the DoLP <= 1 bound."""
    if isinstance(obj, PolarizedImageSet):
        a = [np.asarray(x, dtype=np.float64) for x in obj.images()]
        ident = float(np.max(np.abs(a[0] + a[2] - a[1] - a[3]), initial=0.0))
        s0, s1, s2 = stokes(*a)
    elif isinstance(obj, StokesMaps):
        ident = None
        s0, s1, s2 = (np.asarray(x, dtype=np.float64) for x in (obj.s0, obj.s1, obj.s2))
    else:
        raise TypeError(f"cannot validate {type(obj).__name__}")
    excess = np.sqrt(s1 * s1 + s2 * s2) - s0
    dviol = float(max(np.max(excess, initial=0.0), 0.0))
    passed = dviol <= tol and (ident is None or ident <= tol)
    return PhysicalReport(ident, dviol, tol, passed)
