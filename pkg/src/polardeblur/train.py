"""Stage-wise then end-to-end training.

Phase A fits the unpolarized estimator alone, phase B fits the polarized
reconstructor on detached stage-1 outputs, phase C finetunes everything
with the full objective at the lower learning rate.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from functools import lru_cache
from pathlib import Path

import numpy as np
import torch

from . import config as cfgmod
from .checkpoint import load_checkpoint, save_checkpoint
from .dataset import derive_seed, load_manifest, read_scene
from .errors import ConfigError, TrainingDiverged
from .inference import image_to_tensor, set_to_tensor
from .losses import LossWeights, make_extractor, total_loss
from .model import DESK_CONFIG, DeblurModel, ModelConfig
from .polar_core import stokes

log = logging.getLogger(__name__)

PHASES = ("A", "B", "C")
LOG_HEADER = "step,phase,total,Lc_guide,Lc_pol,Ls,lr"


@dataclass
class TrainConfig:
    stage1_epochs: int = 30
    stage2_epochs: int = 20
    finetune_epochs: int = 10
    lr_stagewise: float = 0.002
    lr_finetune: float = 0.001
    betas: tuple[float, ...] = (0.5, 0.999)
    batch_size: int = 4
    seed: int = 0
    checkpoint_every: int = 10
    deterministic: bool = True
    desk_scale: bool = True
    model: ModelConfig = field(default_factory=lambda: replace(DESK_CONFIG))
    loss: LossWeights = field(default_factory=LossWeights)

    def validate(self):
        if min(self.stage1_epochs, self.stage2_epochs, self.finetune_epochs) < 0:
            raise ConfigError("epochs must be >= 0")
        if self.lr_stagewise <= 0 or self.lr_finetune <= 0:
            raise ConfigError("learning rates must be > 0")
        if len(self.betas) != 2 or not all(0 <= b < 1 for b in self.betas):
            raise ConfigError("betas must be two values in [0, 1)")
        if self.batch_size < 1 or self.checkpoint_every < 0:
            raise ConfigError("batch_size must be >= 1 and checkpoint_every >= 0")
        self.model.validate()
        self.loss.validate()

    def epochs(self, phase):
        return {"A": self.stage1_epochs, "B": self.stage2_epochs, "C": self.finetune_epochs}[phase]


def full_train_config() -> TrainConfig:
    return TrainConfig(stage1_epochs=600, stage2_epochs=300, finetune_epochs=100,
                       desk_scale=False, model=ModelConfig())


def load_train_config(path=None, overrides: dict | None = None) -> TrainConfig:
    values = cfgmod.read_kv(path) if path else {}
    values.update(overrides or {})
    desk = values.get("desk_scale", "true").strip().lower() not in ("0", "false", "no", "off")
    base = TrainConfig() if desk else full_train_config()
    cfg = cfgmod.apply_overrides(base, values)
    cfg.validate()
    return cfg


class LazyRecords:
    """Sequence of scene records read on demand from a dataset split."""

    def __init__(self, root, split="train"):
        manifests = load_manifest(root)
        if split not in manifests:
            raise ConfigError(f"dataset {root} has no {split!r} split")
        self.paths = [Path(root) / p for p in manifests[split].paths]
        self._read = lru_cache(maxsize=64)(read_scene)

    def __len__(self):
        return len(self.paths)

    def __getitem__(self, i):
        return self._read(self.paths[i])


def _batch(records, idx, dtype):
    recs = [records[i] for i in idx]
    blurry = torch.stack([set_to_tensor(r.blurry_set, dtype) for r in recs])
    sharp = torch.stack([set_to_tensor(r.sharp_set, dtype) for r in recs])
    unpol = torch.stack([image_to_tensor(r.sharp_unpolarized, dtype) for r in recs])
    return blurry, sharp, unpol


def _phase_params(model: DeblurModel, phase):
    if phase == "A":
        return list(model.stage1.named_parameters(prefix="stage1"))
    if phase == "B":
        return list(model.stage2.named_parameters(prefix="stage2"))
    return list(model.named_parameters())


def _optim_tensors(opt, named, phase):
    out = {}
    for name, p in named:
        st = opt.state.get(p)
        if not st:
            continue
        for key in ("exp_avg", "exp_avg_sq"):
            out[f"optim.{phase}.{name}.{key}"] = st[key]
        out[f"optim.{phase}.{name}.step"] = torch.as_tensor(float(st["step"]), dtype=torch.float64)
    return out


def _restore_optim(opt, named, saved):
    for name, p in named:
        if f"{name}.exp_avg" not in saved:
            continue
        opt.state[p] = {
            "step": torch.tensor(float(saved[f"{name}.step"])),
            "exp_avg": saved[f"{name}.exp_avg"].to(p.dtype).clone(),
            "exp_avg_sq": saved[f"{name}.exp_avg_sq"].to(p.dtype).clone(),
        }


@dataclass
class TrainResult:
    checkpoint: Path
    history: list[dict]
    step: int


def train(model: DeblurModel, records, cfg: TrainConfig, out_dir, resume=None) -> TrainResult:
    """Run phases A, B, C; writes ``final.ckpt``, cadence checkpoints and ``train_log.txt``."""
    cfg.validate()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if cfg.deterministic:
        torch.use_deterministic_algorithms(True)
    dtype = next(model.parameters()).dtype
    extractor = make_extractor(cfg.loss.perceptual, model.cfg.in_channels).to(dtype)

    step, start_phase, start_epoch, saved_optim = 0, "A", 0, {}
    if resume is not None:
        ck = load_checkpoint(resume)
        model.load_state_dict(ck.model_state())
        step = ck.step
        start_phase = ck.state.get("phase", "A")
        start_epoch = int(ck.state.get("epoch", 0))
        saved_optim = ck.optimizer_tensors(start_phase)
        if ck.state.get("complete"):
            start_phase, start_epoch = "done", 0

    log_path = out_dir / "train_log.txt"
    if resume is not None and log_path.exists():
        # drop rows written after the checkpoint (an interrupted epoch)
        lines = log_path.read_text().splitlines()[1:]
        kept = [ln for ln in lines if int(ln.split(",", 1)[0]) <= step]
        cfgmod.write_text_atomic(log_path, "\n".join([LOG_HEADER, *kept]) + "\n")
    else:
        log_path.write_text(LOG_HEADER + "\n")
    history: list[dict] = []
    n = len(records)

    def checkpoint(name, phase, epoch, opt=None, named=(), complete=False):
        extra = _optim_tensors(opt, named, phase) if opt is not None else {}
        state = {"phase": phase, "epoch": epoch, "complete": complete, "train_config": cfgmod.flatten(cfg)}
        return save_checkpoint(out_dir / name, model, step, state, extra)

    order = {p: i for i, p in enumerate(PHASES)}
    for phase in PHASES:
        if start_phase == "done" or order[phase] < order.get(start_phase, 0):
            continue
        epochs = cfg.epochs(phase)
        if phase == "A" and not model.has_stage1:
            continue
        first_epoch = start_epoch if phase == start_phase else 0
        if epochs == 0 or first_epoch >= epochs or n == 0:
            continue

        named = _phase_params(model, phase)
        lr = cfg.lr_finetune if phase == "C" else cfg.lr_stagewise
        opt = torch.optim.Adam([p for _, p in named], lr=lr, betas=tuple(cfg.betas))
        if phase == start_phase and saved_optim:
            _restore_optim(opt, named, saved_optim)
        terms = {"A": ("guide",), "B": ("pol", "stokes"), "C": ("guide", "pol", "stokes")}[phase]
        if not model.has_stage1:
            terms = tuple(t for t in terms if t != "guide")
        model.requires_grad_(False)
        for _, p in named:
            p.requires_grad_(True)
        model.train()

        for epoch in range(first_epoch, epochs):
            perm = np.random.default_rng(derive_seed(cfg.seed, order[phase], epoch)).permutation(n)
            for b in range(0, n, cfg.batch_size):
                blurry, sharp, unpol = _batch(records, perm[b:b + cfg.batch_size], dtype)
                guide, restored = _forward(model, phase, blurry)
                loss, parts = total_loss(guide, restored, unpol, sharp, cfg.loss, extractor, terms)
                step += 1
                rec = {"step": step, "phase": phase, "total": float(loss.detach()),
                       **{k: float(v.detach()) for k, v in parts.items()}, "lr": lr}
                history.append(rec)
                with log_path.open("a") as fh:
                    fh.write("{step},{phase},{total:.8g},{Lc_guide:.8g},{Lc_pol:.8g},{Ls:.8g},{lr:g}\n".format(**rec))
                if not math.isfinite(rec["total"]):
                    path = checkpoint("diverged.ckpt", phase, epoch)
                    raise TrainingDiverged(f"non-finite loss at step {step} (phase {phase})", path)
                opt.zero_grad(set_to_none=True)
                loss.backward()
                opt.step()
            done = epoch + 1
            if cfg.checkpoint_every and done % cfg.checkpoint_every == 0 and done < epochs:
                checkpoint("last.ckpt", phase, done, opt, named)
        checkpoint(f"phase_{phase}.ckpt", phase, epochs, opt, named)
        log.info("phase %s done at step %d", phase, step)

    model.requires_grad_(True)
    model.eval()
    final = checkpoint("final.ckpt", "C", cfg.finetune_epochs, complete=True)
    return TrainResult(final, history, step)


def _forward(model: DeblurModel, phase, blurry):
    if phase == "A":
        s0, s1, s2 = stokes(*blurry.unbind(1))
        return model.forward_stage1(s0, s1, s2), None
    if phase == "B":
        with torch.no_grad():
            s0, s1, s2 = stokes(*blurry.unbind(1))
            guide = model.forward_stage1(s0, s1, s2)
        return guide, model.forward_stage2(blurry, guide.detach())
    return model(blurry)


def read_log(path) -> list[dict]:
    rows = []
    lines = Path(path).read_text().splitlines()
    keys = lines[0].split(",")
    for line in lines[1:]:
        vals = line.split(",")
        row = dict(zip(keys, vals))
        rows.append({k: (v if k == "phase" else (int(v) if k == "step" else float(v))) for k, v in row.items()})
    return rows


@torch.no_grad()
def full_objective(model: DeblurModel, records, loss_weights: LossWeights | None = None) -> float:
    """Mean of the complete three-term objective over ``records``, one record at a time."""
    w = loss_weights or LossWeights()
    dtype = next(model.parameters()).dtype
    extractor = make_extractor(w.perceptual, model.cfg.in_channels).to(dtype)
    model.eval()
    vals = []
    for i in range(len(records)):
        blurry, sharp, unpol = _batch(records, [i], dtype)
        guide, restored = model(blurry)
        vals.append(float(total_loss(guide, restored, unpol, sharp, w, extractor)[0]))
    return float(np.mean(vals)) if vals else float("nan")
