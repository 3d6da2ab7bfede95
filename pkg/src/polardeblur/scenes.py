"""Procedural sharp polarized scenes.

Stand-in for photographed source scenes: smooth shaded background, sharp
edged shapes (some textured) and polarization fields whose region
boundaries follow the shapes, so S1/S2 carry edge structure.
"""
from __future__ import annotations

import math

import numpy as np
from scipy import ndimage

from .errors import DomainError

MIN_SIZE = 64


def _shape_mask(rng, xx, yy, h, w):
    kind = rng.integers(0, 3)
    cx, cy = rng.uniform(0.1, 0.9) * w, rng.uniform(0.1, 0.9) * h
    sx, sy = rng.uniform(0.08, 0.3) * w, rng.uniform(0.08, 0.3) * h
    if kind == 0:
        ang = rng.uniform(0, math.pi)
        c, s = math.cos(ang), math.sin(ang)
        u = (xx - cx) * c + (yy - cy) * s
        v = -(xx - cx) * s + (yy - cy) * c
        return (np.abs(u) <= sx) & (np.abs(v) <= sy)
    if kind == 1:
        return ((xx - cx) / sx) ** 2 + ((yy - cy) / sy) ** 2 <= 1.0
    # triangle via three half-planes
    angs = np.sort(rng.uniform(0, 2 * math.pi, 3))
    px = cx + sx * np.cos(angs)
    py = cy + sy * np.sin(angs)
    inside = np.ones_like(xx, dtype=bool)
    for i in range(3):
        x0, y0, x1, y1 = px[i], py[i], px[(i + 1) % 3], py[(i + 1) % 3]
        inside &= (x1 - x0) * (yy - y0) - (y1 - y0) * (xx - x0) >= 0
    return inside


def _texture(rng, xx, yy, h, w):
    kind = rng.integers(0, 3)
    if kind == 0:
        f = rng.uniform(4, 16) / max(h, w)
        ang = rng.uniform(0, math.pi)
        return 0.5 + 0.5 * np.sin(2 * math.pi * f * (xx * math.cos(ang) + yy * math.sin(ang)))
    if kind == 1:
        cell = rng.integers(4, 12)
        return (((xx // cell) + (yy // cell)) % 2).astype(np.float64)
    noise = ndimage.gaussian_filter(rng.standard_normal((h, w)), rng.uniform(1.0, 3.0))
    noise -= noise.min()
    return noise / max(noise.max(), 1e-12)


def generate_procedural_scene(rng_seed, height, width):
    """Return ``(intensity, dolp, aolp)``, each ``(H, W, 3)`` float32.

    Intensity lies in [0.02, 0.9]; DoLP in [0, 0.95] with the background
    reaching 0 and one shape forced above 0.85; AoLP is constant per region
    in [0, pi).
    """
    if height < MIN_SIZE or width < MIN_SIZE:
        raise DomainError(f"scene must be at least {MIN_SIZE}x{MIN_SIZE}")
    rng = np.random.default_rng(rng_seed)
    h, w = height, width
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)

    # background: oriented gradient plus a low-frequency ripple
    ang = rng.uniform(0, 2 * math.pi)
    ramp = xx * math.cos(ang) + yy * math.sin(ang)
    ramp = (ramp - ramp.min()) / max(np.ptp(ramp), 1e-12)
    base = rng.uniform(0.2, 0.6, 3)
    ripple = 0.05 * np.sin(2 * math.pi * (rng.uniform(0.5, 2) * xx / w + rng.uniform(0.5, 2) * yy / h))
    intensity = base * (0.6 + 0.4 * ramp)[..., None] + ripple[..., None]
    dolp = 0.08 * (1.0 - ramp)
    aolp = np.full((h, w), rng.uniform(0, math.pi))

    n_shapes = int(rng.integers(4, 9))
    for k in range(n_shapes):
        mask = _shape_mask(rng, xx, yy, h, w)
        color = rng.uniform(0.1, 0.9, 3)
        shade = np.ones((h, w))
        if rng.random() < 0.5:
            shade = 0.7 + 0.3 * _texture(rng, xx, yy, h, w)
        # the last shape is drawn on top and carries strong polarization
        p_level = rng.uniform(0.85, 0.95) if k == n_shapes - 1 else rng.uniform(0.1, 0.9)
        tilt = rng.uniform(-0.05, 0.05) * (xx / w - 0.5) + rng.uniform(-0.05, 0.05) * (yy / h - 0.5)
        intensity[mask] = (color * shade[..., None])[mask]
        dolp[mask] = np.clip(p_level + tilt, 0.0, 0.95)[mask]
        aolp[mask] = rng.uniform(0, math.pi)

    gains = np.concatenate([[1.0], rng.uniform(0.9, 1.0, 2)])
    rng.shuffle(gains)
    intensity = np.clip(intensity, 0.02, 0.9)
    dolp = np.clip(dolp[..., None] * gains, 0.0, 0.95)
    aolp = np.repeat(aolp[..., None], 3, axis=-1).astype(np.float32)
    # float32 rounding may land exactly on pi
    aolp = np.minimum(aolp, np.nextafter(np.float32(math.pi), np.float32(0)))
    return intensity.astype(np.float32), dolp.astype(np.float32), aolp
