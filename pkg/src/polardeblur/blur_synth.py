"""Camera-shake trajectories and spatially-variant blur synthesis.

A trajectory is a short sequence of camera poses ``(x, y, roll)``. Each pose
becomes a rigid in-plane homography about the principal point; the blurry
image is the mean of the sharp image warped by every pose (the latent
frames), so every pixel gets its own blur kernel once roll is non-zero.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import ndimage

from .errors import DomainError
from .polar_core import PolarizedImageSet, stokes

DEFAULT_LATENT_FRAMES = 17


@dataclass
class TrajectoryParams:
    # Chosen defaults; extents are in pixels at 256x256.
    max_extent: float = 12.0
    inertia: float = 0.7
    impulse_prob: float = 0.2
    jitter: float = 1.0
    roll_jitter: float = 0.004
    anisotropy: float | None = None
    initial_angle: float | None = None

    def validate(self):
        if not 0 <= self.impulse_prob <= 1:
            raise DomainError(f"impulse_prob must be in [0, 1], got {self.impulse_prob}")
        if not 0 <= self.inertia <= 1:
            raise DomainError(f"inertia must be in [0, 1], got {self.inertia}")
        for name in ("max_extent", "jitter", "roll_jitter"):
            if getattr(self, name) < 0:
                raise DomainError(f"{name} must be non-negative")
        if self.anisotropy is not None and not 0 <= self.anisotropy < 1:
            raise DomainError("anisotropy must be in [0, 1)")


@dataclass
class ShakeTrajectory:
    samples: np.ndarray  # (count, 3): x px, y px, roll rad
    params: TrajectoryParams
    anisotropy: float
    seed: int

    @property
    def count(self):
        return len(self.samples)

    @property
    def max_step(self):
        if self.count < 2:
            return 0.0
        return self.params.max_extent / (self.count - 1)


@dataclass
class NoiseModel:
    read_sigma: float = 0.01
    shot_gain: float = 0.02
    dofp_scale: float = 1.5

    def __post_init__(self):
        if min(self.read_sigma, self.shot_gain) < 0 or self.dofp_scale < 0:
            raise DomainError("noise parameters must be non-negative")


@dataclass
class Intrinsics:
    focal: float
    cx: float
    cy: float

    @classmethod
    def for_image(cls, height, width):
        return cls(float(max(height, width)), (width - 1) / 2.0, (height - 1) / 2.0)

    def validate(self):
        vals = (self.focal, self.cx, self.cy)
        if not all(math.isfinite(v) for v in vals) or self.focal <= 0:
            raise DomainError(f"degenerate intrinsics {self}")


@dataclass
class TransformSequence:
    """Per-latent-frame homographies mapping sharp-frame points to frame k.

    The reference (identity) frame is the trajectory centroid, which is
    the origin pose because trajectories are centroid-centred.
    """

    matrices: np.ndarray  # (K, 3, 3)
    intrinsics: Intrinsics
    reference_pose: tuple = field(default=(0.0, 0.0, 0.0))

    def __len__(self):
        return len(self.matrices)

    @classmethod
    def identity(cls, count, height, width):
        return cls(np.tile(np.eye(3), (count, 1, 1)), Intrinsics.for_image(height, width))

    def max_displacement(self, height, width) -> float:
        corners = np.array(
            [[0, 0, 1], [width - 1, 0, 1], [0, height - 1, 1], [width - 1, height - 1, 1]],
            dtype=np.float64,
        ).T
        worst = 0.0
        for m in self.matrices:
            moved = m @ corners
            moved = moved[:2] / moved[2]
            worst = max(worst, float(np.max(np.hypot(*(moved - corners[:2])))))
        return worst

    def border_margin(self, height, width) -> int:
        return int(math.ceil(self.max_displacement(height, width) - 1e-9)) + 1


def generate_trajectory(rng_seed, count=DEFAULT_LATENT_FRAMES, params=None) -> ShakeTrajectory:
    """Random shake path from a constant-speed velocity process.

    Each step perturbs the velocity with anisotropic Gaussian jitter damped
    by ``inertia`` and, with probability ``impulse_prob``, an abrupt
    near-reversal; speed is renormalised so the path length equals
    ``max_extent``. Roll follows a damped random walk. The result is
    centred on its centroid.
    """
    params = params or TrajectoryParams()
    params.validate()
    if count < 1:
        raise DomainError("trajectory needs at least one latent frame")
    rng = np.random.default_rng(rng_seed)
    aniso = rng.uniform(0.0, 0.8) if params.anisotropy is None else params.anisotropy
    aniso_dir = rng.uniform(0.0, math.pi)
    angle0 = rng.uniform(0.0, 2 * math.pi) if params.initial_angle is None else params.initial_angle
    step = params.max_extent / (count - 1) if count > 1 else 0.0

    u = np.array([math.cos(aniso_dir), math.sin(aniso_dir)])
    w = np.array([-u[1], u[0]])
    v = step * np.array([math.cos(angle0), math.sin(angle0)])
    omega = 0.0
    poses = np.zeros((count, 3))
    for t in range(1, count):
        poses[t, :2] = poses[t - 1, :2] + v
        poses[t, 2] = poses[t - 1, 2] + omega

        g = rng.standard_normal(3)
        dv = params.jitter * step * (g[0] * u + (1.0 - aniso) * g[1] * w)
        if rng.random() < params.impulse_prob:
            turn = math.pi + rng.uniform(-0.5, 0.5)
            c, s = math.cos(turn), math.sin(turn)
            v = np.array([c * v[0] - s * v[1], s * v[0] + c * v[1]])
        else:
            rng.uniform(-0.5, 0.5)  # keep the stream aligned across branches
        v = v + (1.0 - params.inertia) * dv
        norm = float(np.hypot(*v))
        if norm > 0:
            v = v * (step / norm)
        omega = params.inertia * omega + (1.0 - params.inertia) * params.roll_jitter * g[2]

    poses -= poses.mean(axis=0)
    return ShakeTrajectory(poses, params, float(aniso), int(rng_seed))


def pose_to_matrix(pose, intrinsics: Intrinsics) -> np.ndarray:
    x, y, roll = (float(v) for v in pose)
    c, s = math.cos(roll), math.sin(roll)
    cx, cy = intrinsics.cx, intrinsics.cy
    # rotate about the principal point, then translate
    return np.array(
        [
            [c, -s, cx - c * cx + s * cy + x],
            [s, c, cy - s * cx - c * cy + y],
            [0.0, 0.0, 1.0],
        ]
    )


def trajectory_to_transforms(traj, intrinsics: Intrinsics) -> TransformSequence:
    intrinsics.validate()
    samples = traj.samples if isinstance(traj, ShakeTrajectory) else np.asarray(traj, dtype=np.float64)
    mats = np.stack([pose_to_matrix(p, intrinsics) for p in np.atleast_2d(samples)])
    return TransformSequence(mats, intrinsics)


def _sample_coords(matrix, height, width):
    inv = np.linalg.inv(matrix)
    ys, xs = np.mgrid[0:height, 0:width].astype(np.float64)
    src = inv @ np.stack([xs.ravel(), ys.ravel(), np.ones(xs.size)])
    src = src[:2] / src[2]
    return np.stack([src[1].reshape(height, width), src[0].reshape(height, width)])


def _warp(img, coords):
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        return ndimage.map_coordinates(img, coords, order=1, mode="nearest")
    out = np.empty_like(img)
    for c in range(img.shape[-1]):
        out[..., c] = ndimage.map_coordinates(img[..., c], coords, order=1, mode="nearest")
    return out


def render_latent_frames(sharp, transforms: TransformSequence) -> np.ndarray:
    """Bilinear, edge-replicated warps of ``sharp`` (H, W[, C]) per transform."""
    sharp = np.asarray(sharp)
    h, w = sharp.shape[:2]
    frames = [_warp(sharp, _sample_coords(m, h, w)) for m in transforms.matrices]
    return np.stack(frames).astype(np.result_type(sharp.dtype, np.float32), copy=False)


def average_frames(stack) -> np.ndarray:
    stack = np.asarray(stack)
    if len(stack) == 0:
        raise DomainError("cannot average an empty frame stack")
    return stack.astype(np.float64).mean(axis=0).astype(stack.dtype, copy=False)


def blur_image(img, transforms: TransformSequence) -> np.ndarray:
    """Streaming equivalent of ``average_frames(render_latent_frames(...))``."""
    img = np.asarray(img)
    h, w = img.shape[:2]
    acc = np.zeros(img.shape, dtype=np.float64)
    for m in transforms.matrices:
        acc += _warp(img, _sample_coords(m, h, w))
    return (acc / len(transforms)).astype(np.result_type(img.dtype, np.float32), copy=False)


def add_sensor_noise(img, model: NoiseModel, rng_seed) -> np.ndarray:
    img = np.asarray(img)
    if np.any(img < 0):
        raise DomainError("noise model expects a non-negative image")
    if model.dofp_scale == 0 or (model.read_sigma == 0 and model.shot_gain == 0):
        return img.copy()
    rng = np.random.default_rng(rng_seed)
    g1 = rng.standard_normal(img.shape)
    g2 = rng.standard_normal(img.shape)
    x = img.astype(np.float64)
    noisy = x + model.dofp_scale * (model.shot_gain * np.sqrt(x) * g1 + model.read_sigma * g2)
    return np.maximum(noisy, 0).astype(img.dtype, copy=False)


def synthesize_blurry_scene(sharp_set: PolarizedImageSet, traj, noise: NoiseModel, rng_seed=0,
                            intrinsics: Intrinsics | None = None):
    """Blur the four polarized images and the unpolarized image with one shared
    transform sequence, then add independent noise to each of the five.

    Returns ``(blurry_set, blurry_unpolarized, meta)``.
    """
    h, w = sharp_set.shape[:2]
    intrinsics = intrinsics or Intrinsics.for_image(h, w)
    transforms = trajectory_to_transforms(traj, intrinsics)
    sharp_unpol = stokes(*sharp_set.images())[0]
    blurred = [blur_image(img, transforms) for img in (*sharp_set.images(), sharp_unpol)]
    child_seeds = np.random.SeedSequence(int(rng_seed)).generate_state(5)
    noisy = [add_sensor_noise(b, noise, int(s)) for b, s in zip(blurred, child_seeds)]
    meta = {
        "noise_seed": int(rng_seed),
        "noise": asdict(noise),
        "border_margin": transforms.border_margin(h, w),
        "max_displacement": transforms.max_displacement(h, w),
    }
    if isinstance(traj, ShakeTrajectory):
        meta.update(
            trajectory_seed=traj.seed,
            trajectory_params=asdict(traj.params),
            trajectory_anisotropy=traj.anisotropy,
            trajectory=traj.samples.tolist(),
        )
    return PolarizedImageSet(*noisy[:4]), noisy[4], meta


def psf_at_pixel(transforms: TransformSequence, x, y) -> dict:
    """Sparse kernel around (x, y): bilinear splats of the pixel's position under
    each transform, keyed by integer ``(dx, dy)`` offsets; weights sum to 1."""
    taps: dict[tuple[int, int], float] = {}
    weight = 1.0 / len(transforms)
    for m in transforms.matrices:
        px, py, pw = m @ np.array([x, y, 1.0])
        dx, dy = px / pw - x, py / pw - y
        # snap float noise so integer offsets give single taps
        dx, dy = round(dx, 9), round(dy, 9)
        x0, y0 = math.floor(dx), math.floor(dy)
        fx, fy = dx - x0, dy - y0
        for ox, oy, wgt in (
            (x0, y0, (1 - fx) * (1 - fy)),
            (x0 + 1, y0, fx * (1 - fy)),
            (x0, y0 + 1, (1 - fx) * fy),
            (x0 + 1, y0 + 1, fx * fy),
        ):
            if wgt > 0:
                taps[(ox, oy)] = taps.get((ox, oy), 0.0) + weight * wgt
    return dict(sorted(taps.items()))
