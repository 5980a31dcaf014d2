"""Flat named-tensor checkpoint archive.

Layout (all integers little-endian)::

    magic      8 bytes  b"CFCKPT01"
    manifest   u64 byte length, then UTF-8 ``key=value`` lines
    count      u64 number of tensor records
    record     u32 name length, UTF-8 name,
               u32 dimension count, one u64 per dimension,
               row-major float32 data

The manifest holds every ModelConfig field plus ``phase`` and ``step``.
Optimizer state is stored as ordinary records named ``optim.<param>.<slot>``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from .config import ModelConfig, build, format_pairs, parse_pairs, split_pairs, validate

MAGIC = b"CFCKPT01"
OPTIM_PREFIX = "optim."


class CheckpointError(RuntimeError):
    pass


@dataclass
class Checkpoint:
    config: ModelConfig
    phase: str
    step: int
    tensors: dict[str, np.ndarray] = field(default_factory=dict)

    def model_state(self) -> dict[str, torch.Tensor]:
        return {k: torch.from_numpy(v.copy()) for k, v in self.tensors.items() if not k.startswith(OPTIM_PREFIX)}

    def optimizer_slots(self) -> dict[str, torch.Tensor]:
        return {k[len(OPTIM_PREFIX):]: torch.from_numpy(v.copy()) for k, v in self.tensors.items() if k.startswith(OPTIM_PREFIX)}


def write_archive(path: str | Path, manifest: str, tensors: dict[str, np.ndarray]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    body = manifest.encode("utf-8")
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(body)))
        fh.write(body)
        fh.write(struct.pack("<Q", len(tensors)))
        for name, array in tensors.items():
            raw = name.encode("utf-8")
            data = np.ascontiguousarray(array, dtype="<f4")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", data.ndim))
            fh.write(struct.pack(f"<{data.ndim}Q", *data.shape))
            fh.write(data.tobytes())
    tmp.replace(path)


def read_archive(path: str | Path) -> tuple[str, dict[str, np.ndarray]]:
    blob = Path(path).read_bytes()
    if blob[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    pos = 8

    def take(fmt: str):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(blob):
            raise CheckpointError(f"{path}: truncated")
        values = struct.unpack_from(fmt, blob, pos)
        pos += size
        return values

    (mlen,) = take("<Q")
    manifest = blob[pos:pos + mlen].decode("utf-8")
    pos += mlen
    (count,) = take("<Q")
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = take("<I")
        name = blob[pos:pos + nlen].decode("utf-8")
        pos += nlen
        (ndim,) = take("<I")
        shape = take(f"<{ndim}Q") if ndim else ()
        numel = int(np.prod(shape)) if ndim else 1
        end = pos + 4 * numel
        if end > len(blob):
            raise CheckpointError(f"{path}: truncated tensor {name!r}")
        tensors[name] = np.frombuffer(blob, dtype="<f4", count=numel, offset=pos).reshape(shape)
        pos = end
    return manifest, tensors


def save_checkpoint(
    path: str | Path,
    model: torch.nn.Module,
    config: ModelConfig,
    phase: str,
    step: int,
    optimizer: Optional[torch.optim.Optimizer] = None,
) -> None:
    tensors = {name: t.detach().cpu().float().numpy() for name, t in model.state_dict().items()}
    if optimizer is not None:
        names = {id(p): name for name, p in model.named_parameters()}
        for p, state in optimizer.state.items():
            for slot, value in state.items():
                if torch.is_tensor(value):
                    tensors[f"{OPTIM_PREFIX}{names[id(p)]}.{slot}"] = value.detach().cpu().float().numpy()
    manifest = format_pairs(config) + f"phase={phase}\nstep={step}\n"
    write_archive(path, manifest, tensors)


def load_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    manifest, tensors = read_archive(path)
    pairs = parse_pairs(manifest)
    phase = pairs.pop("phase", "pretrain_no_cache")
    step = int(pairs.pop("step", "0"))
    (model_pairs,) = split_pairs(pairs, ModelConfig)
    return Checkpoint(validate(build(ModelConfig, model_pairs)), phase, step, tensors)


def restore_optimizer(optimizer: torch.optim.Optimizer, model: torch.nn.Module, slots: dict[str, torch.Tensor]) -> None:
    by_name = dict(model.named_parameters())
    for key, value in slots.items():
        pname, slot = key.rsplit(".", 1)
        param = by_name[pname]
        state = optimizer.state[param]
        state[slot] = value.to(param.dtype) if slot != "step" else value.float()
