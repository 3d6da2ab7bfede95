"""Training objective: content loss, Stokes loss and their weighted total."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigError
from .polar_core import stokes

log = logging.getLogger(__name__)

_LAPLACE = torch.tensor([[0.0, 1.0, 0.0], [1.0, -4.0, 1.0], [0.0, 1.0, 0.0]])
VGG19_FILE = "vgg19-dcbb9e9d.pth"


@dataclass
class LossWeights:
    lambda1: float = 0.5
    lambda2: float = 1.0
    lambda3: float = 1.0
    content: tuple[float, ...] = (10.0, 100.0, 0.1, 10.0)  # l1, l2, perceptual, edge
    stokes: tuple[float, ...] = (20.0, 500.0, 500.0, 500.0)  # S0, S1, S2, S2/S1
    ratio_eps: float = 1e-4
    perceptual: str = "random"  # "random" or "vgg"

    def validate(self):
        vals = [self.lambda1, self.lambda2, self.lambda3, *self.content, *self.stokes, self.ratio_eps]
        if len(self.content) != 4 or len(self.stokes) != 4:
            raise ConfigError("content and stokes weights need four entries each")
        if min(vals) < 0:
            raise ConfigError("loss weights must be non-negative")
        if self.ratio_eps <= 0:
            raise ConfigError("ratio_eps must be > 0")
        if self.perceptual not in ("random", "vgg"):
            raise ConfigError(f"unknown perceptual extractor {self.perceptual!r}")


def edge_map(img: torch.Tensor) -> torch.Tensor:
    """Per-channel 4-neighbour Laplacian with replicate padding."""
    c = img.shape[1]
    k = _LAPLACE.to(img).expand(c, 1, 3, 3)
    return F.conv2d(F.pad(img, (1, 1, 1, 1), mode="replicate"), k, groups=c)


class RandomFeatures(nn.Module):
    """Fixed, seeded convolutional feature stack used when VGG weights are absent."""

    def __init__(self, in_channels=3, seed=1234):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(in_channels, 16, 3, padding=1), nn.ReLU(),
            nn.Conv2d(16, 16, 3, padding=1), nn.ReLU(),
            nn.AvgPool2d(2),
            nn.Conv2d(16, 32, 3, padding=1), nn.ReLU(),
            nn.AvgPool2d(2),
            nn.Conv2d(32, 32, 3, padding=1),
        )
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            for m in self.net:
                if isinstance(m, nn.Conv2d):
                    nn.init.xavier_uniform_(m.weight)
                    nn.init.zeros_(m.bias)
        self.requires_grad_(False)
        self.eval()

    def forward(self, x):
        return self.net(x)


class VGGFeatures(nn.Module):
    """VGG-19 up to conv3_3 with ImageNet input normalization."""

    def __init__(self, state_dict):
        super().__init__()
        from torchvision.models import vgg19

        vgg = vgg19()
        vgg.load_state_dict(state_dict)
        self.features = vgg.features[:15]
        self.register_buffer("mean", torch.tensor([0.485, 0.456, 0.406]).view(1, 3, 1, 1))
        self.register_buffer("std", torch.tensor([0.229, 0.224, 0.225]).view(1, 3, 1, 1))
        self.requires_grad_(False)
        self.eval()

    def forward(self, x):
        return self.features((x - self.mean) / self.std)


def make_extractor(kind="random", in_channels=3) -> nn.Module:
    """Perceptual feature extractor; "vgg" loads only locally cached weights."""
    if kind == "vgg":
        path = Path(torch.hub.get_dir()) / "checkpoints" / VGG19_FILE
        if path.is_file() and in_channels == 3:
            return VGGFeatures(torch.load(path, map_location="cpu"))
        log.warning("VGG-19 weights not found at %s; using the fixed random extractor", path)
    elif kind != "random":
        raise ValueError(f"unknown perceptual extractor {kind!r}")
    return RandomFeatures(in_channels)


def perceptual_distance(a, b, extractor: nn.Module) -> torch.Tensor:
    return torch.mean((extractor(a) - extractor(b)) ** 2)


def content_terms(pred, gt, weights: LossWeights, extractor):
    diff = pred - gt
    w1, w2, wp, we = weights.content
    terms = {
        "l1": w1 * diff.abs().mean(),
        "l2": w2 * (diff * diff).mean(),
        "perceptual": wp * perceptual_distance(pred, gt, extractor) if wp else diff.new_zeros(()),
        "edge": we * ((edge_map(pred) - edge_map(gt)) ** 2).mean(),
    }
    return terms


def content_loss(pred, gt, weights: LossWeights, extractor) -> torch.Tensor:
    return sum(content_terms(pred, gt, weights, extractor).values())


def stable_ratio(s2, s1, eps):
    """Smooth surrogate for S2/S1 that stays finite where S1 -> 0."""
    return s2 * s1 / (s1 * s1 + eps)


def stokes_loss(pred_set, gt_set, weights: LossWeights) -> torch.Tensor:
    """Weighted l2 on S0, S1, S2 and the stabilized S2/S1 of ``(N, 4, C, H, W)`` sets."""
    p0, p1, p2 = stokes(*pred_set.unbind(1))
    g0, g1, g2 = stokes(*gt_set.unbind(1))
    w0, w1, w2, wr = weights.stokes
    mse = lambda a, b: torch.mean((a - b) ** 2)  # noqa: E731
    eps = weights.ratio_eps
    return (w0 * mse(p0, g0) + w1 * mse(p1, g1) + w2 * mse(p2, g2)
            + wr * mse(stable_ratio(p2, p1, eps), stable_ratio(g2, g1, eps)))


def total_loss(guide, restored, gt_unpolarized, gt_set, weights: LossWeights, extractor,
               terms=("guide", "pol", "stokes")):
    """Weighted objective and its breakdown.

    ``terms`` selects which parts are active (the stage-wise training phases
    use subsets). Breakdown values are the weighted contributions.
    """
    zero = restored.new_zeros(()) if restored is not None else guide.new_zeros(())
    parts = {"Lc_guide": zero, "Lc_pol": zero, "Ls": zero}
    if "guide" in terms:
        parts["Lc_guide"] = weights.lambda1 * content_loss(guide, gt_unpolarized, weights, extractor)
    if "pol" in terms:
        # sum over the four angles of the per-angle mean == 4 * mean over all angles
        lc = content_loss(restored.flatten(0, 1), gt_set.flatten(0, 1), weights, extractor)
        parts["Lc_pol"] = weights.lambda2 * 4 * lc
    if "stokes" in terms:
        parts["Ls"] = weights.lambda3 * stokes_loss(restored, gt_set, weights)
    total = parts["Lc_guide"] + parts["Lc_pol"] + parts["Ls"]
    return total, parts
