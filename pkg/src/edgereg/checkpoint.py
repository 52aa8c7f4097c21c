"""ERCK checkpoint container.

Layout (little-endian)::

    b"ERCK" | u32 version | u32 manifest_len | manifest (UTF-8 "key = value" lines)
    per tensor: u16 name_len | name | u8 rank | u32 dims[rank] | f32 payload | u32 crc32(payload)

Every ``state_dict`` entry is stored (buffers included, integer buffers as
f32), so a save -> load -> save cycle reproduces the file byte for byte.
"""
from __future__ import annotations

import hashlib
import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .errors import CheckpointError, TruncationError
from .nonrigid_net import NonRigidModelConfig, NonRigidRegNet
from .rigid_net import RigidModelConfig, RigidRegNet

MAGIC = b"ERCK"
VERSION = 1
_KINDS = {
    "rigid": (RigidRegNet, RigidModelConfig),
    "nonrigid": (NonRigidRegNet, NonRigidModelConfig),
}


def config_hash(config: dict) -> str:
    canon = json.dumps(config, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()[:16]


@dataclass
class Checkpoint:
    manifest: dict[str, str]
    tensors: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def kind(self) -> str:
        return self.manifest["kind"]

    @property
    def config(self) -> dict:
        return json.loads(self.manifest["config"])

    def build_model(self, expected_kind: str | None = None) -> nn.Module:
        kind = self.kind
        if expected_kind is not None and kind != expected_kind:
            raise CheckpointError(f"checkpoint holds a {kind!r} model, expected {expected_kind!r}")
        if kind not in _KINDS:
            raise CheckpointError(f"unknown model kind {kind!r}")
        if config_hash(self.config) != self.manifest.get("config_hash"):
            raise CheckpointError("config hash does not match the stored config")
        cls, cfg_cls = _KINDS[kind]
        model = cls(cfg_cls(**self.config))
        state = model.state_dict()
        if set(state) != set(self.tensors):
            missing = sorted(set(state) - set(self.tensors))
            extra = sorted(set(self.tensors) - set(state))
            raise CheckpointError(f"tensor set mismatch (missing {missing[:3]}, unexpected {extra[:3]})")
        for name, ref in state.items():
            arr = self.tensors[name]
            if tuple(arr.shape) != tuple(ref.shape):
                raise CheckpointError(f"tensor {name!r}: shape {arr.shape} != model {tuple(ref.shape)}")
            state[name] = torch.from_numpy(arr.copy()).to(ref.dtype)
        model.load_state_dict(state)
        model.checkpoint_meta = {
            k: v for k, v in self.manifest.items() if k not in ("kind", "variant", "config", "config_hash")
        }
        model.eval()
        return model


def _manifest_for(model: nn.Module, extra: dict | None) -> dict[str, str]:
    cfg = model.cfg.as_dict()
    meta = {"epoch": "0", "optimizer": "none", "learning_rate": "0", "metrics": "{}"}
    meta.update({k: str(v) for k, v in getattr(model, "checkpoint_meta", {}).items()})
    if extra:
        meta.update({k: (json.dumps(v, sort_keys=True) if isinstance(v, dict) else str(v))
                     for k, v in extra.items()})
    return {
        "kind": model.kind,
        "variant": str(model.cfg.variant),
        "config": json.dumps(cfg, sort_keys=True),
        "config_hash": config_hash(cfg),
        **meta,
    }


def encode(ckpt: Checkpoint) -> bytes:
    lines = []
    for k, v in ckpt.manifest.items():
        if "\n" in k + v or " = " in k:
            raise CheckpointError(f"manifest entry {k!r} cannot be encoded")
        lines.append(f"{k} = {v}")
    manifest = ("\n".join(lines) + "\n").encode("utf-8")
    out = [MAGIC, struct.pack("<II", VERSION, len(manifest)), manifest]
    for name, arr in ckpt.tensors.items():
        nb = name.encode("utf-8")
        payload = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        out.append(struct.pack("<H", len(nb)) + nb)
        out.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(payload)
        out.append(struct.pack("<I", zlib.crc32(payload)))
    return b"".join(out)


def decode(blob: bytes, source: str = "<bytes>") -> Checkpoint:
    if len(blob) < 12 or blob[:4] != MAGIC:
        raise CheckpointError(f"{source}: not an ERCK checkpoint (bad magic)")
    version, mlen = struct.unpack_from("<II", blob, 4)
    if version != VERSION:
        raise CheckpointError(f"{source}: unsupported checkpoint version {version}")
    pos = 12
    if pos + mlen > len(blob):
        raise TruncationError(f"{source}: manifest truncated")
    try:
        text = blob[pos:pos + mlen].decode("utf-8")
    except UnicodeDecodeError as exc:
        raise CheckpointError(f"{source}: manifest is not UTF-8") from exc
    manifest = {}
    for line in text.splitlines():
        if not line.strip():
            continue
        key, sep, value = line.partition(" = ")
        if not sep:
            raise CheckpointError(f"{source}: malformed manifest line {line!r}")
        manifest[key] = value
    for req in ("kind", "config", "config_hash"):
        if req not in manifest:
            raise CheckpointError(f"{source}: manifest lacks {req!r}")
    pos += mlen

    tensors = {}
    while pos < len(blob):
        name = f"#{len(tensors)}"
        try:
            (nlen,) = struct.unpack_from("<H", blob, pos)
            name = blob[pos + 2:pos + 2 + nlen].decode("utf-8", errors="replace")
            if pos + 2 + nlen > len(blob):
                raise struct.error
            pos += 2 + nlen
            (rank,) = struct.unpack_from("<B", blob, pos)
            dims = struct.unpack_from(f"<{rank}I", blob, pos + 1)
            pos += 1 + 4 * rank
        except struct.error as exc:
            raise TruncationError(f"{source}: record header of tensor {name!r} truncated") from exc
        nbytes = 4 * int(np.prod(dims, dtype=np.int64))
        if pos + nbytes + 4 > len(blob):
            raise TruncationError(f"{source}: payload of tensor {name!r} truncated")
        payload = blob[pos:pos + nbytes]
        (crc,) = struct.unpack_from("<I", blob, pos + nbytes)
        if zlib.crc32(payload) != crc:
            raise CheckpointError(f"{source}: checksum mismatch in tensor {name!r}")
        tensors[name] = np.frombuffer(payload, dtype="<f4").reshape(dims).copy()
        pos += nbytes + 4
    return Checkpoint(manifest, tensors)


def to_checkpoint(model: nn.Module, extra: dict | None = None) -> Checkpoint:
    tensors = {
        name: t.detach().cpu().to(torch.float32).numpy() for name, t in model.state_dict().items()
    }
    return Checkpoint(_manifest_for(model, extra), tensors)


def save_checkpoint(model: nn.Module, path, extra: dict | None = None) -> Path:
    """Write ``model`` (plus manifest entries from ``model.checkpoint_meta`` and ``extra``)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(encode(to_checkpoint(model, extra)))
    tmp.replace(path)
    return path


def read_checkpoint(path) -> Checkpoint:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"{path}: no such checkpoint")
    return decode(path.read_bytes(), str(path))


def load_checkpoint(path, expected_kind: str | None = None) -> nn.Module:
    """Rebuild the model stored at ``path`` (in eval mode)."""
    return read_checkpoint(path).build_model(expected_kind)
