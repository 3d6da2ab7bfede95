import struct

import pytest
import torch
from torch import nn

from polardeblur.checkpoint import MAGIC, load_checkpoint, model_from_checkpoint, save_checkpoint
from polardeblur.errors import CheckpointFormatError, ConfigError, DimensionError
from polardeblur.model import (
    ABLATIONS,
    DESK_CONFIG,
    FULL_CONFIG,
    ModelConfig,
    SqueezeExcite,
    ablation_config,
    build_model,
    parameter_count,
)
from polardeblur.polar_core import stokes

# Documented desk-scale parameter counts (base_channels=16, one block per stage).
# Frozen from the analytic oracle below; see README.
DESK_COUNTS = {
    "full": 641_519,
    "wo_guide": 405_894,
    "wo_stokes": 590_217,
    "wo_sgsc": 611_137,
    "wo_mcte": 433_007,
    "wo_pg": 643_253,
}


# --- analytic parameter-count oracle -----------------------------------------

def _conv(ci, co, k):
    return ci * co * k * k + co


def _cb(ci, co, k=3):
    return _conv(ci, co, k) + 2 * co  # conv + affine instance norm


def _head(ci, co, layers):
    return _cb(ci, co) + (layers - 1) * _cb(co, co)


def _res(ch):
    return 2 * _cb(ch, ch)


def _bottleneck(ch, r):
    mid = max(ch // r, 1)
    return _cb(ch, mid, 1) + _cb(mid, mid, 3) + _cb(mid, ch, 1)


def _se(ch, r):
    mid = max(ch // r, 1)
    return _conv(ch, mid, 1) + _conv(mid, ch, 1)


def _dense(ch, g, layers):
    return sum(_cb(ch + i * g, g) for i in range(layers)) + _cb(ch + layers * g, ch, 1)


def _decoder(c, out, blocks):
    return (_cb(4 * c, 2 * c) + _cb(4 * c, 2 * c) + _res(2 * c) + _cb(2 * c, c) + _cb(2 * c, c)
            + max(blocks - 1, 0) * _res(c) + _conv(c, out, 3))


def oracle_count(cfg: ModelConfig) -> int:
    c, n, b = cfg.base_channels, cfg.in_channels, cfg.blocks_per_stage
    total = 0
    if cfg.use_stage1_guidance:
        s1 = _head(n, c, cfg.head_layers)
        if cfg.use_stokes_prior:
            s1 += 2 * _head(n, c, cfg.head_layers) + _cb(2 * c, c) + _dense(c, cfg.growth, cfg.dense_layers)
            if cfg.use_sgsc:
                s1 += _cb(c, c) + _res(c) + _cb(c, 2 * c) + _res(2 * c)
                s1 += _cb(2 * c, c, 1) + _bottleneck(c, cfg.bottleneck_reduction) + _se(c, cfg.se_reduction)
                s1 += _cb(4 * c, 2 * c, 1) + _bottleneck(2 * c, cfg.bottleneck_reduction) + _se(2 * c, cfg.se_reduction)
            else:
                s1 += _cb(2 * c, c)
        s1 += _cb(c, 2 * c) + _res(2 * c) + _cb(2 * c, 4 * c) + b * _res(4 * c) + _decoder(c, n, b)
        total += s1
    gc = (2 if cfg.use_pg else 4) * n
    s2 = _head(gc, c, cfg.head_layers) + _head(n, c, cfg.head_layers) + _cb(2 * c, c) + _res(c)
    s2 += _cb(c, 2 * c) + _cb(2 * c, 4 * c) + _res(2 * c) + b * _res(4 * c)
    if cfg.use_mcte:
        s2 += _cb(c, 2 * c) + _res(2 * c) + _cb(2 * c, 4 * c) + _res(4 * c) + _cb(4 * c, 2 * c) + _cb(8 * c, 4 * c)
    s2 += _decoder(c, gc, b)
    return total + s2


def rand_set(n=1, h=16, w=16, seed=0, dtype=torch.float32):
    g = torch.Generator().manual_seed(seed)
    return torch.rand(n, 4, 3, h, w, generator=g, dtype=dtype)


class TestBuild:
    def test_same_seed_identical(self):
        a, b = build_model(DESK_CONFIG), build_model(DESK_CONFIG)
        for (ka, va), (kb, vb) in zip(a.state_dict().items(), b.state_dict().items()):
            assert ka == kb and torch.equal(va, vb)

    def test_seed_changes_params(self):
        a = build_model(DESK_CONFIG)
        b = build_model(ModelConfig(base_channels=16, blocks_per_stage=1, seed=1))
        assert not torch.equal(a.stage2.hp[0][0].weight, b.stage2.hp[0][0].weight)

    def test_global_rng_untouched(self):
        torch.manual_seed(123)
        expected = torch.rand(3)
        torch.manual_seed(123)
        build_model(DESK_CONFIG)
        assert torch.equal(torch.rand(3), expected)

    @pytest.mark.parametrize("name", list(ABLATIONS))
    def test_documented_counts(self, name):
        cfg = ablation_config(name)
        assert oracle_count(cfg) == DESK_COUNTS[name]
        assert parameter_count(build_model(cfg)) == DESK_COUNTS[name]

    def test_counts_distinct(self):
        assert len(set(DESK_COUNTS.values())) == len(DESK_COUNTS)

    def test_pg_difference(self):
        # non-PG path: 12-channel input head conv and 12-channel output conv
        c = 16
        assert DESK_COUNTS["wo_pg"] - DESK_COUNTS["full"] == (12 - 6) * c * 9 * 2 + (12 - 6)

    def test_full_scale_count(self):
        # target size is 3.14 M; widths are free choices so allow 2 %
        count = parameter_count(build_model(FULL_CONFIG))
        assert count == oracle_count(FULL_CONFIG)
        assert abs(count / 3.14e6 - 1) < 0.02
        assert parameter_count(build_model(DESK_CONFIG)) < count

    def test_invalid_config(self):
        with pytest.raises(ConfigError):
            build_model(ModelConfig(base_channels=0))
        with pytest.raises(ConfigError):
            build_model(ModelConfig(num_scales=3))

    def test_norm_relu_after_every_conv(self):
        model = build_model(DESK_CONFIG)
        outputs = {id(m) for m in model.output_layers()}
        se_convs = {id(m) for se in model.modules() if isinstance(se, SqueezeExcite)
                    for m in se.modules() if isinstance(m, nn.Conv2d)}
        checked = 0
        for seq in model.modules():
            if not isinstance(seq, nn.Sequential):
                continue
            mods = list(seq)
            for i, m in enumerate(mods):
                if isinstance(m, nn.Conv2d) and id(m) not in se_convs:
                    assert isinstance(mods[i + 1], nn.InstanceNorm2d) and mods[i + 1].affine
                    assert isinstance(mods[i + 2], nn.ReLU)
                    checked += 1
        all_convs = [m for m in model.modules() if isinstance(m, nn.Conv2d)]
        assert checked == len(all_convs) - len(outputs) - len(se_convs)

    def test_pg_single_copy(self):
        model = build_model(DESK_CONFIG)
        heads = [n for n, _ in model.stage2.named_children() if n == "hp"]
        assert heads == ["hp"]
        assert model.stage2.hp[0][0].in_channels == 6


class TestForward:
    def test_shapes(self):
        model = build_model(DESK_CONFIG)
        x = rand_set(2, 16, 20)
        guide, out = model(x)
        assert guide.shape == (2, 3, 16, 20) and out.shape == x.shape

    def test_odd_sizes(self):
        model = build_model(DESK_CONFIG)
        x = rand_set(1, 13, 10)
        guide, out = model.forward_full(x)
        assert guide.shape == (1, 3, 13, 10) and out.shape == x.shape

    def test_residual_identity(self):
        model = build_model(DESK_CONFIG)
        model.zero_output_layers()
        x = rand_set(1, 12, 12)
        with torch.no_grad():
            guide, out = model(x)
        assert torch.equal(out, x)
        assert torch.equal(guide, stokes(*x.unbind(1))[0])

    def test_stage1_identity(self):
        model = build_model(DESK_CONFIG)
        model.zero_output_layers()
        b = torch.rand(1, 3, 8, 8)
        assert torch.equal(model.forward_stage1(b, torch.rand_like(b), torch.rand_like(b)), b)

    def test_pg_swap_equivariance(self):
        torch.use_deterministic_algorithms(True)
        model = build_model(DESK_CONFIG).eval()
        x = rand_set(1, 12, 12)
        n, _, c, h, w = x.shape
        g13 = x[:, [0, 2]].reshape(n, 2 * c, h, w)
        g24 = x[:, [1, 3]].reshape(n, 2 * c, h, w)
        guide = torch.rand(1, 3, h, w)
        with torch.no_grad():
            a13, a24 = model.stage2.reconstruct_groups([g13, g24], guide)
            b24, b13 = model.stage2.reconstruct_groups([g24, g13], guide)
        assert torch.equal(a13, b13) and torch.equal(a24, b24)

    def test_deterministic(self):
        torch.use_deterministic_algorithms(True)
        model = build_model(DESK_CONFIG)
        x = rand_set(1, 12, 12)
        with torch.no_grad():
            a, b = model(x), model(x)
        assert torch.equal(a[1], b[1]) and torch.equal(a[0], b[0])

    def test_gradients_reach_every_parameter(self):
        model = build_model(DESK_CONFIG)
        _, out = model(rand_set(1, 16, 16))
        out.square().mean().backward()
        missing = [n for n, p in model.named_parameters() if p.grad is None or not torch.any(p.grad != 0)]
        assert missing == []

    def test_stokes_sensitivity(self):
        model = build_model(DESK_CONFIG)
        b = torch.rand(1, 3, 12, 12)
        s1 = torch.rand(1, 3, 12, 12, requires_grad=True)
        s2 = torch.rand(1, 3, 12, 12)
        out = model.forward_stage1(b, s1, s2)
        out.sum().backward()
        assert s1.grad.abs().sum() > 0
        with torch.no_grad():
            moved = model.forward_stage1(b, s1 + 0.05, s2)
        assert not torch.equal(moved, out.detach())

    def test_stokes_ignored_without_prior(self):
        model = build_model(ablation_config("wo_stokes"))
        b = torch.rand(1, 3, 8, 8)
        with torch.no_grad():
            a = model.forward_stage1(b, torch.rand_like(b), torch.rand_like(b))
            c = model.forward_stage1(b, torch.rand_like(b), torch.rand_like(b))
        assert torch.equal(a, c)

    def test_without_guidance(self):
        model = build_model(ablation_config("wo_guide"))
        guide, out = model(rand_set(1, 8, 8))
        assert torch.equal(guide, torch.zeros_like(guide)) and out.shape == (1, 4, 3, 8, 8)

    def test_dimension_errors(self):
        model = build_model(DESK_CONFIG)
        with pytest.raises(DimensionError):
            model.forward_stage2(torch.rand(1, 3, 3, 8, 8), torch.rand(1, 3, 8, 8))
        with pytest.raises(DimensionError):
            model.forward_stage2(rand_set(1, 8, 8), torch.rand(1, 3, 4, 8))
        with pytest.raises(DimensionError):
            model.forward_stage1(torch.rand(3, 8, 8), torch.rand(3, 8, 8), torch.rand(3, 8, 8))

    def test_directional_derivative(self):
        # float64 check of a scalar readout against central differences
        model = build_model(ModelConfig(base_channels=4, blocks_per_stage=1, head_layers=1, dense_layers=1)).double()
        x = rand_set(1, 8, 8, dtype=torch.float64)
        w = torch.rand(x.shape, dtype=torch.float64, generator=torch.Generator().manual_seed(1))
        params = list(model.parameters())
        dirs = [torch.randn(p.shape, dtype=torch.float64, generator=torch.Generator().manual_seed(i))
                for i, p in enumerate(params)]

        def readout():
            return (model(x)[1] * w).sum()

        readout().backward()
        analytic = sum((p.grad * d).sum() for p, d in zip(params, dirs)).item()
        # instance norm over 2x2 maps is strongly curved; a small step keeps
        # the central difference's truncation error well below tolerance
        h = 1e-7
        with torch.no_grad():
            for p, d in zip(params, dirs):
                p.add_(h * d)
            up = readout().item()
            for p, d in zip(params, dirs):
                p.sub_(2 * h * d)
            down = readout().item()
        numeric = (up - down) / (2 * h)
        assert abs(analytic - numeric) <= 1e-3 * max(abs(numeric), 1e-8)


class TestCheckpoint:
    def test_roundtrip(self, tmp_path):
        model = build_model(DESK_CONFIG)
        path = save_checkpoint(tmp_path / "m.ckpt", model, step=7, state={"phase": "B"})
        ck = load_checkpoint(path)
        assert ck.step == 7 and ck.state["phase"] == "B" and ck.config == DESK_CONFIG
        other = model_from_checkpoint(ck)
        for (k, v), (_, u) in zip(model.state_dict().items(), other.state_dict().items()):
            assert torch.equal(v, u), k

    def test_byte_identical(self, tmp_path):
        a = save_checkpoint(tmp_path / "a.ckpt", build_model(DESK_CONFIG))
        b = save_checkpoint(tmp_path / "b.ckpt", build_model(DESK_CONFIG))
        assert a.read_bytes() == b.read_bytes()
        assert a.read_bytes()[:8] == MAGIC

    def test_bad_magic(self, tmp_path):
        p = tmp_path / "x.ckpt"
        p.write_bytes(b"NOTACKPT" + b"\0" * 32)
        with pytest.raises(CheckpointFormatError, match="magic"):
            load_checkpoint(p)

    def test_truncated(self, tmp_path):
        p = save_checkpoint(tmp_path / "m.ckpt", build_model(DESK_CONFIG))
        p.write_bytes(p.read_bytes()[:-100])
        with pytest.raises(CheckpointFormatError):
            load_checkpoint(p)

    def test_wrong_version(self, tmp_path):
        p = save_checkpoint(tmp_path / "m.ckpt", build_model(DESK_CONFIG))
        raw = bytearray(p.read_bytes())
        raw[8:12] = struct.pack("<I", 99)
        p.write_bytes(bytes(raw))
        with pytest.raises(CheckpointFormatError, match="version"):
            load_checkpoint(p)

    def test_missing(self, tmp_path):
        with pytest.raises(CheckpointFormatError):
            load_checkpoint(tmp_path / "none.ckpt")
