from __future__ import annotations

import numpy as np
import torch

from .model import DeblurModel
from .polar_core import PolarizedImageSet


def set_to_tensor(pset: PolarizedImageSet, dtype=torch.float32) -> torch.Tensor:
    """(H, W, C) x 4 -> (4, C, H, W)."""
    return torch.from_numpy(np.ascontiguousarray(pset.stack().transpose(0, 3, 1, 2))).to(dtype)


def image_to_tensor(img, dtype=torch.float32) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(np.asarray(img).transpose(2, 0, 1))).to(dtype)


def tensor_to_set(t: torch.Tensor) -> PolarizedImageSet:
    arr = t.detach().cpu().numpy().transpose(0, 2, 3, 1)
    return PolarizedImageSet.from_stack(list(arr))


def tensor_to_image(t: torch.Tensor) -> np.ndarray:
    return t.detach().cpu().numpy().transpose(1, 2, 0)


@torch.no_grad()
def restore(model: DeblurModel, blurry: PolarizedImageSet):
    """Run both stages on one blurry set; returns ``(guide, restored_set)``."""
    model.eval()
    x = set_to_tensor(blurry)[None]
    guide, out = model(x)
    return tensor_to_image(guide[0]), tensor_to_set(out[0])
