"""PSNR/SSIM on DoLP, AoLP and unpolarized intensity, plus colour-map views."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import correlate1d

from .polar_core import PolarizedImageSet, aolp, dolp, stokes

PSNR_CAP = 100.0
METRICS = ("psnr_p", "ssim_p", "psnr_theta", "ssim_theta", "psnr_I", "ssim_I")


def _crop(a, margin):
    a = np.asarray(a, dtype=np.float64)
    if margin <= 0:
        return a
    if 2 * margin >= min(a.shape[:2]):
        raise ValueError(f"border margin {margin} leaves no pixels in {a.shape[:2]}")
    return a[margin:-margin, margin:-margin]


def psnr(a, b, peak=1.0, margin=0):
    """Returns ``(dB, identical)``; identical inputs report ``PSNR_CAP``."""
    a, b = _crop(a, margin), _crop(b, margin)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0:
        return PSNR_CAP, True
    return min(10.0 * math.log10(peak * peak / mse), PSNR_CAP), False


def _gauss(sigma=1.5, radius=5):
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-(x * x) / (2 * sigma * sigma))
    return k / k.sum()


def _filter_valid(img, k):
    r = len(k) // 2
    out = correlate1d(correlate1d(img, k, axis=0), k, axis=1)
    return out[r:-r, r:-r]


def ssim(a, b, data_range=1.0, margin=0):
    """Gaussian-window (11x11, sigma 1.5) SSIM averaged over valid window
    positions and channels, with K1=0.01, K2=0.03."""
    a, b = _crop(a, margin), _crop(b, margin)
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    k = _gauss()
    c1, c2 = (0.01 * data_range) ** 2, (0.03 * data_range) ** 2
    vals = []
    for ch in range(a.shape[-1]):
        x, y = a[..., ch], b[..., ch]
        mx, my = _filter_valid(x, k), _filter_valid(y, k)
        vx = _filter_valid(x * x, k) - mx * mx
        vy = _filter_valid(y * y, k) - my * my
        cxy = _filter_valid(x * y, k) - mx * my
        s = ((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2))
        vals.append(s.mean())
    return float(np.mean(vals))


def _polarization(pset):
    imgs = pset.images() if isinstance(pset, PolarizedImageSet) else tuple(pset)
    s0, s1, s2 = stokes(*[np.asarray(i, dtype=np.float64) for i in imgs])
    return dolp(s0, s1, s2), aolp(s0, s1, s2), s0


def aolp_pair(theta_pred, theta_gt, circular=True):
    """AoLP maps normalized by pi; in circular mode the ground truth is moved
    by +-pi where that brings it closer, so differences are circular."""
    a, b = np.asarray(theta_pred, np.float64), np.asarray(theta_gt, np.float64)
    if circular:
        d = a - b
        b = np.where(d > np.pi / 2, b + np.pi, np.where(d < -np.pi / 2, b - np.pi, b))
    return a / np.pi, b / np.pi


def score_scene(pred_set, gt_set, margin=0, circular=True) -> dict:
    p_hat, t_hat, i_hat = _polarization(pred_set)
    p_gt, t_gt, i_gt = _polarization(gt_set)
    ta, tb = aolp_pair(t_hat, t_gt, circular)
    out = {}
    identical = {}
    for key, x, y in (("p", p_hat, p_gt), ("theta", ta, tb), ("I", i_hat, i_gt)):
        out[f"psnr_{key}"], identical[key] = psnr(x, y, margin=margin)
        out[f"ssim_{key}"] = ssim(x, y, margin=margin)
    out["identical"] = all(identical.values())
    return out


@dataclass
class EvalReport:
    per_scene: dict[str, dict]
    margin: int
    config: dict = field(default_factory=dict)

    @property
    def mean(self) -> dict:
        if not self.per_scene:
            return {m: float("nan") for m in METRICS}
        return {m: float(np.mean([s[m] for s in self.per_scene.values()])) for m in METRICS}

    def table(self) -> str:
        head = f"{'scene':<20}" + "".join(f"{m:>12}" for m in METRICS)
        rows = [head]
        for sid, s in self.per_scene.items():
            rows.append(f"{sid:<20}" + "".join(f"{s[m]:>12.4f}" for m in METRICS))
        rows.append(f"{'mean':<20}" + "".join(f"{v:>12.4f}" for v in self.mean.values()))
        return "\n".join(rows) + "\n"

    def to_kv(self) -> str:
        lines = [f"margin={self.margin}"]
        lines += [f"config.{k}={v}" for k, v in self.config.items()]
        for sid, s in self.per_scene.items():
            lines += [f"scene.{sid}.{m}={s[m]!r}" for m in METRICS]
            lines.append(f"scene.{sid}.identical={str(bool(s.get('identical', False))).lower()}")
        lines += [f"mean.{m}={v!r}" for m, v in self.mean.items()]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_kv(cls, text: str) -> "EvalReport":
        per_scene: dict[str, dict] = {}
        config, margin = {}, 0
        for line in text.splitlines():
            if not line.strip():
                continue
            key, _, value = line.partition("=")
            if key == "margin":
                margin = int(value)
            elif key.startswith("config."):
                config[key[len("config."):]] = value
            elif key.startswith("scene."):
                sid, metric = key[len("scene."):].rsplit(".", 1)
                entry = per_scene.setdefault(sid, {})
                entry[metric] = value == "true" if metric == "identical" else float(value)
        return cls(per_scene, margin, config)


def evaluate_sets(pairs, margin=0, circular=True, config=None) -> EvalReport:
    """``pairs`` iterates ``(scene_id, predicted_set, ground_truth_set)``."""
    per = {sid: score_scene(pred, gt, margin, circular) for sid, pred, gt in pairs}
    cfg = {"circular_aolp": str(circular).lower(), **(config or {})}
    return EvalReport(per, margin, cfg)


def evaluate_records(records, predict=None, circular=True, margin=None, config=None) -> EvalReport:
    """Score ``predict(record) -> PolarizedImageSet`` on each record; with
    ``predict=None`` the blurry inputs are scored (the no-op baseline)."""
    records = list(records)
    if margin is None:
        margin = max((r.border_margin for r in records), default=0)
    pairs = ((r.scene_id, predict(r) if predict else r.blurry_set, r.sharp_set) for r in records)
    return evaluate_sets(pairs, margin, circular, config)


def visualize_polarization(p, theta, p_cmap="viridis", theta_cmap="twilight"):
    """RGB uint8 colour maps of DoLP and AoLP after averaging colour channels.

    DoLP uses its natural [0, 1] range and AoLP is divided by pi, so the
    mapping is fixed rather than per-image.
    """
    from matplotlib import colormaps

    def to_rgb(x, cmap):
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 3:
            x = x.mean(axis=-1)
        rgba = colormaps[cmap](np.clip(x, 0.0, 1.0))
        return np.round(rgba[..., :3] * 255).astype(np.uint8)

    return to_rgb(p, p_cmap), to_rgb(np.asarray(theta, np.float64) / np.pi, theta_cmap)
