"""Self-describing checkpoint container.

Layout: 8-byte magic, little-endian u32 format version, u64 header length,
a UTF-8 JSON header (config echo, step counter, training state, tensor
index) and the raw little-endian tensor bytes in index order. The encoding
is deterministic, so equal models give byte-identical files.
"""
from __future__ import annotations

import json
import os
import struct
import tempfile
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .errors import CheckpointFormatError
from .model import DeblurModel, ModelConfig, build_model

MAGIC = b"PDBCKPT\x00"
VERSION = 1
_DTYPES = {torch.float32: "<f4", torch.float64: "<f8", torch.int64: "<i8"}


@dataclass
class Checkpoint:
    config: ModelConfig
    step: int
    tensors: dict[str, torch.Tensor]
    state: dict = field(default_factory=dict)

    def model_state(self):
        return {k[len("model."):]: v for k, v in self.tensors.items() if k.startswith("model.")}

    def optimizer_tensors(self, phase):
        prefix = f"optim.{phase}."
        return {k[len(prefix):]: v for k, v in self.tensors.items() if k.startswith(prefix)}


def save_checkpoint(path, model: DeblurModel, step=0, state=None, extra_tensors=None):
    tensors = {f"model.{k}": v for k, v in model.state_dict().items()}
    tensors.update(extra_tensors or {})
    index, blobs, offset = [], [], 0
    for name, t in tensors.items():
        t = t.detach().cpu().contiguous()
        if t.dtype not in _DTYPES:
            raise TypeError(f"unsupported tensor dtype {t.dtype} for {name}")
        raw = t.numpy().astype(_DTYPES[t.dtype], copy=False).tobytes()
        index.append({"name": name, "dtype": _DTYPES[t.dtype], "shape": list(t.shape),
                      "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps(
        {"config": asdict(model.cfg), "step": int(step), "state": state or {}, "tensors": index},
        sort_keys=True,
    ).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(MAGIC + struct.pack("<IQ", VERSION, len(header)) + header)
            for raw in blobs:
                fh.write(raw)
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.unlink(tmp)
    return path


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    if not path.is_file():
        raise CheckpointFormatError(f"checkpoint not found: {path}")
    data = path.read_bytes()
    if data[:8] != MAGIC:
        raise CheckpointFormatError(f"{path}: not a checkpoint (bad magic)")
    try:
        version, hlen = struct.unpack("<IQ", data[8:20])
        if version != VERSION:
            raise CheckpointFormatError(f"{path}: unsupported checkpoint version {version}")
        header = json.loads(data[20:20 + hlen])
        body = memoryview(data)[20 + hlen:]
        tensors = {}
        for entry in header["tensors"]:
            chunk = body[entry["offset"]:entry["offset"] + entry["nbytes"]]
            if len(chunk) != entry["nbytes"]:
                raise CheckpointFormatError(f"{path}: truncated tensor {entry['name']}")
            arr = np.frombuffer(chunk, dtype=np.dtype(entry["dtype"])).reshape(entry["shape"])
            tensors[entry["name"]] = torch.from_numpy(arr.copy())
        cfg = ModelConfig(**header["config"])
    except CheckpointFormatError:
        raise
    except (KeyError, TypeError, ValueError, struct.error) as exc:
        raise CheckpointFormatError(f"{path}: corrupt checkpoint ({exc})") from exc
    return Checkpoint(cfg, int(header["step"]), tensors, header.get("state", {}))


def model_from_checkpoint(ckpt: Checkpoint | str | Path) -> DeblurModel:
    if not isinstance(ckpt, Checkpoint):
        ckpt = load_checkpoint(ckpt)
    model = build_model(ckpt.config)
    try:
        model.load_state_dict(ckpt.model_state())
    except RuntimeError as exc:
        raise CheckpointFormatError(f"checkpoint does not match its config: {exc}") from exc
    return model
