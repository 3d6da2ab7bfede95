"""Two-stage polarized deblurring network.

Stage 1 estimates the sharp unpolarized image from the blurry one, with the
blurry S1/S2 maps injected through Stokes-guided skip connections. Stage 2
restores the four polarized images, transferring context from the stage-1
estimate at every encoder scale and (with grouping on) processing the
complementary pairs (0, 90) and (45, 135) with one shared network.

Tensors are ``(N, C, H, W)``; polarized sets are ``(N, 4, C, H, W)`` in the
order 0, 45, 90, 135 degrees.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigError, DimensionError
from .polar_core import stokes


@dataclass
class ModelConfig:
    in_channels: int = 3
    base_channels: int = 32
    num_scales: int = 2
    blocks_per_stage: int = 2
    head_layers: int = 2
    dense_layers: int = 3
    dense_growth: int = 0  # 0 -> base_channels // 2
    bottleneck_reduction: int = 4
    se_reduction: int = 8
    use_stokes_prior: bool = True
    use_sgsc: bool = True
    use_mcte: bool = True
    use_pg: bool = True
    use_stage1_guidance: bool = True
    output_init: str = "xavier"  # or "zero": start as the identity restorer
    seed: int = 0

    def validate(self):
        if self.num_scales != 2:
            raise ConfigError("only two scales are supported")
        for name in ("in_channels", "base_channels", "blocks_per_stage", "head_layers", "dense_layers",
                     "bottleneck_reduction", "se_reduction"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.dense_growth < 0:
            raise ConfigError("dense_growth must be >= 0")
        if self.output_init not in ("xavier", "zero"):
            raise ConfigError(f"output_init must be 'xavier' or 'zero', got {self.output_init!r}")

    @property
    def growth(self):
        return self.dense_growth or max(self.base_channels // 2, 1)


DESK_CONFIG = ModelConfig(base_channels=16, blocks_per_stage=1)
# Full-scale widths: 3,175,925 parameters, within 2% of the 3.14 M target.
FULL_CONFIG = ModelConfig()

ABLATIONS = {
    "full": {},
    "wo_guide": {"use_stage1_guidance": False},
    "wo_stokes": {"use_stokes_prior": False},
    "wo_sgsc": {"use_sgsc": False},
    "wo_mcte": {"use_mcte": False},
    "wo_pg": {"use_pg": False},
}


def ablation_config(name, base: ModelConfig = DESK_CONFIG) -> ModelConfig:
    return replace(base, **ABLATIONS[name])


# --- building blocks -------------------------------------------------------

def conv_block(cin, cout, k=3, stride=1):
    return nn.Sequential(
        nn.Conv2d(cin, cout, k, stride=stride, padding=k // 2),
        nn.InstanceNorm2d(cout, affine=True),
        nn.ReLU(inplace=True),
    )


def head(cin, cout, layers):
    return nn.Sequential(conv_block(cin, cout), *[conv_block(cout, cout) for _ in range(layers - 1)])


class ResBlock(nn.Module):
    def __init__(self, ch):
        super().__init__()
        self.body = nn.Sequential(conv_block(ch, ch), conv_block(ch, ch))

    def forward(self, x):
        return x + self.body(x)


class BottleneckBlock(nn.Module):
    def __init__(self, ch, reduction):
        super().__init__()
        mid = max(ch // reduction, 1)
        self.body = nn.Sequential(conv_block(ch, mid, 1), conv_block(mid, mid, 3), conv_block(mid, ch, 1))

    def forward(self, x):
        return x + self.body(x)


class SqueezeExcite(nn.Module):
    # operates on 1x1 pooled features, so no normalization here
    def __init__(self, ch, reduction):
        super().__init__()
        mid = max(ch // reduction, 1)
        self.fc = nn.Sequential(
            nn.AdaptiveAvgPool2d(1),
            nn.Conv2d(ch, mid, 1),
            nn.ReLU(inplace=True),
            nn.Conv2d(mid, ch, 1),
            nn.Sigmoid(),
        )

    def forward(self, x):
        return x * self.fc(x)


class DenseBlock(nn.Module):
    def __init__(self, ch, growth, layers):
        super().__init__()
        self.layers = nn.ModuleList(conv_block(ch + i * growth, growth) for i in range(layers))
        self.transition = conv_block(ch + layers * growth, ch, 1)

    def forward(self, x):
        feats = [x]
        for layer in self.layers:
            feats.append(layer(torch.cat(feats, 1)))
        return self.transition(torch.cat(feats, 1))


class StokesGuidedSkip(nn.Module):
    """Skip connection fusing backbone features with Stokes features."""

    def __init__(self, ch, stokes_ch, cfg: ModelConfig):
        super().__init__()
        self.fuse = conv_block(ch + stokes_ch, ch, 1)
        self.filter = BottleneckBlock(ch, cfg.bottleneck_reduction)
        self.se = SqueezeExcite(ch, cfg.se_reduction)

    def forward(self, skip, stokes_feat):
        return self.se(self.filter(self.fuse(torch.cat([skip, stokes_feat], 1))))


class Up(nn.Module):
    def __init__(self, cin, cout):
        super().__init__()
        self.conv = conv_block(cin, cout)

    def forward(self, x, size):
        return self.conv(F.interpolate(x, size=size, mode="bilinear", align_corners=False))


class Decoder(nn.Module):
    """2-up half of the encoder-decoder backbone; emits a residual."""

    def __init__(self, c, out_ch, blocks):
        super().__init__()
        self.up2 = Up(4 * c, 2 * c)
        self.merge1 = conv_block(4 * c, 2 * c)
        self.refine1 = ResBlock(2 * c)
        self.up1 = Up(2 * c, c)
        self.merge0 = conv_block(2 * c, c)
        self.refine0 = nn.Sequential(*[ResBlock(c) for _ in range(max(blocks - 1, 0))])
        self.out = nn.Conv2d(c, out_ch, 3, padding=1)

    def forward(self, bottom, skip1, skip0):
        x = self.refine1(self.merge1(torch.cat([self.up2(bottom, skip1.shape[-2:]), skip1], 1)))
        x = self.merge0(torch.cat([self.up1(x, skip0.shape[-2:]), skip0], 1))
        return self.out(self.refine0(x))


# --- stages ----------------------------------------------------------------

class UnpolarizedEstimator(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        c, n = cfg.base_channels, cfg.in_channels
        self.cfg = cfg
        self.hb = head(n, c, cfg.head_layers)
        if cfg.use_stokes_prior:
            self.h1 = head(n, c, cfg.head_layers)
            self.h2 = head(n, c, cfg.head_layers)
            self.fuse = nn.Sequential(conv_block(2 * c, c), DenseBlock(c, cfg.growth, cfg.dense_layers))
            if cfg.use_sgsc:
                self.d1_full = nn.Sequential(conv_block(c, c), ResBlock(c))
                self.d1_half = nn.Sequential(conv_block(c, 2 * c, stride=2), ResBlock(2 * c))
                self.c1 = StokesGuidedSkip(c, c, cfg)
                self.c2 = StokesGuidedSkip(2 * c, 2 * c, cfg)
            else:
                self.enc_in = conv_block(2 * c, c)
        self.down1 = nn.Sequential(conv_block(c, 2 * c, stride=2), ResBlock(2 * c))
        self.down2 = nn.Sequential(conv_block(2 * c, 4 * c, stride=2),
                                   *[ResBlock(4 * c) for _ in range(cfg.blocks_per_stage)])
        self.decoder = Decoder(c, n, cfg.blocks_per_stage)

    def forward(self, blurry, s1, s2):
        cfg = self.cfg
        e0 = self.hb(blurry)
        fused = None
        if cfg.use_stokes_prior:
            fused = self.fuse(torch.cat([self.h1(s1), self.h2(s2)], 1))
            if not cfg.use_sgsc:
                e0 = self.enc_in(torch.cat([e0, fused], 1))
        e1 = self.down1(e0)
        e2 = self.down2(e1)
        skip0, skip1 = e0, e1
        if cfg.use_stokes_prior and cfg.use_sgsc:
            f1 = self.d1_full(fused)
            f2 = self.d1_half(f1)
            skip0, skip1 = self.c1(e0, f1), self.c2(e1, f2)
        return blurry + self.decoder(e2, skip1, skip0)


class PolarizedReconstructor(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        c, n = cfg.base_channels, cfg.in_channels
        self.cfg = cfg
        self.group_ch = (2 if cfg.use_pg else 4) * n
        self.hp = head(self.group_ch, c, cfg.head_layers)
        self.hu = head(n, c, cfg.head_layers)
        self.t0 = conv_block(2 * c, c)
        self.r0 = ResBlock(c)
        self.down1 = conv_block(c, 2 * c, stride=2)
        self.down2 = conv_block(2 * c, 4 * c, stride=2)
        if cfg.use_mcte:
            self.d2_half = nn.Sequential(conv_block(c, 2 * c, stride=2), ResBlock(2 * c))
            self.d2_quarter = nn.Sequential(conv_block(2 * c, 4 * c, stride=2), ResBlock(4 * c))
            self.t1 = conv_block(4 * c, 2 * c)
            self.t2 = conv_block(8 * c, 4 * c)
        self.r1 = ResBlock(2 * c)
        self.r2 = nn.Sequential(*[ResBlock(4 * c) for _ in range(cfg.blocks_per_stage)])
        self.decoder = Decoder(c, self.group_ch, cfg.blocks_per_stage)

    def guidance_features(self, guide):
        g0 = self.hu(guide)
        if not self.cfg.use_mcte:
            return (g0,)
        g1 = self.d2_half(g0)
        return g0, g1, self.d2_quarter(g1)

    def reconstruct_group(self, group, gfeats):
        """Residual-restore one channel-stacked group ``(N, group_ch, H, W)``."""
        x0 = self.r0(self.t0(torch.cat([self.hp(group), gfeats[0]], 1)))
        x1 = self.down1(x0)
        if self.cfg.use_mcte:
            x1 = self.t1(torch.cat([x1, gfeats[1]], 1))
        x1 = self.r1(x1)
        x2 = self.down2(x1)
        if self.cfg.use_mcte:
            x2 = self.t2(torch.cat([x2, gfeats[2]], 1))
        x2 = self.r2(x2)
        return group + self.decoder(x2, x1, x0)

    def reconstruct_groups(self, groups, guide):
        gfeats = self.guidance_features(guide)
        return [self.reconstruct_group(g, gfeats) for g in groups]

    def forward(self, blurry_set, guide):
        n, _, c, h, w = blurry_set.shape
        if self.cfg.use_pg:
            g13 = blurry_set[:, [0, 2]].reshape(n, 2 * c, h, w)
            g24 = blurry_set[:, [1, 3]].reshape(n, 2 * c, h, w)
            o13, o24 = self.reconstruct_groups([g13, g24], guide)
            o13, o24 = o13.view(n, 2, c, h, w), o24.view(n, 2, c, h, w)
            return torch.stack([o13[:, 0], o24[:, 0], o13[:, 1], o24[:, 1]], 1)
        (out,) = self.reconstruct_groups([blurry_set.reshape(n, 4 * c, h, w)], guide)
        return out.view(n, 4, c, h, w)


class DeblurModel(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.stage1 = UnpolarizedEstimator(cfg) if cfg.use_stage1_guidance else None
        self.stage2 = PolarizedReconstructor(cfg)

    @property
    def has_stage1(self):
        return self.stage1 is not None

    def forward_stage1(self, blurry, s1, s2):
        _check_image(blurry, "blurry")
        if self.stage1 is None:
            return torch.zeros_like(blurry)
        if s1.shape != blurry.shape or s2.shape != blurry.shape:
            raise DimensionError("Stokes maps must match the blurry image shape")
        if not self.cfg.use_stokes_prior:
            return _padded(lambda b: self.stage1(b, None, None), blurry)
        return _padded(self.stage1, blurry, s1, s2)

    def forward_stage2(self, blurry_set, guide):
        if blurry_set.dim() != 5 or blurry_set.shape[1] != 4:
            raise DimensionError(f"expected (N, 4, C, H, W), got {tuple(blurry_set.shape)}")
        if guide.shape != blurry_set[:, 0].shape:
            raise DimensionError("guidance image must match the polarized images")
        n, _, c, h, w = blurry_set.shape
        flat = blurry_set.reshape(n, 4 * c, h, w)

        def run(x, g):
            return self.stage2(x.view(n, 4, c, *x.shape[-2:]), g).reshape(n, 4 * c, *x.shape[-2:])

        return _padded(run, flat, guide).view(n, 4, c, h, w)

    def forward(self, blurry_set):
        s0, s1, s2 = stokes(*blurry_set.unbind(1))
        guide = self.forward_stage1(s0, s1, s2)
        return guide, self.forward_stage2(blurry_set, guide)

    forward_full = forward

    def output_layers(self):
        layers = [self.stage2.decoder.out]
        if self.stage1 is not None:
            layers.insert(0, self.stage1.decoder.out)
        return layers

    @torch.no_grad()
    def zero_output_layers(self):
        for layer in self.output_layers():
            layer.weight.zero_()
            layer.bias.zero_()


def _check_image(x, name):
    if x.dim() != 4:
        raise DimensionError(f"{name} must be (N, C, H, W), got {tuple(x.shape)}")


def _padded(fn, x, *others):
    """Run ``fn`` on inputs replicate-padded to a multiple of 4, crop back."""
    h, w = x.shape[-2:]
    ph, pw = (-h) % 4, (-w) % 4
    if ph == 0 and pw == 0:
        return fn(x, *others)
    pad = (0, pw, 0, ph)
    out = fn(F.pad(x, pad, mode="replicate"), *[F.pad(o, pad, mode="replicate") for o in others])
    return out[..., :h, :w]


def init_xavier(model: nn.Module, seed: int):
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        for m in model.modules():
            if isinstance(m, nn.Conv2d):
                nn.init.xavier_uniform_(m.weight)
                nn.init.zeros_(m.bias)


def build_model(cfg: ModelConfig | None = None) -> DeblurModel:
    cfg = cfg or ModelConfig()
    # module constructors draw default inits; keep them off the global stream
    with torch.random.fork_rng(devices=[]):
        model = DeblurModel(cfg)
    init_xavier(model, cfg.seed)
    if cfg.output_init == "zero":
        model.zero_output_layers()
    return model


def parameter_count(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())
