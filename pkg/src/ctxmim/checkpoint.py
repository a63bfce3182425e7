"""Binary checkpoint format.

Layout::

    b"CTXMIMCK"                      8-byte magic
    uint32 little-endian             length L of the JSON header
    L bytes UTF-8 JSON               manifest (see CheckpointManifest)
    blob                             concatenated little-endian float64 arrays

Tensor offsets are relative to the start of the blob, contiguous and in
directory order. The manifest carries the blob size and its SHA-256, so a
truncated or edited file is rejected on load.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .backbone import DTYPE, Backbone
from .config import BackboneConfig, RunConfig
from .errors import CorruptCheckpointError
from .trainer import AdamState

__all__ = ["FORMAT_VERSION", "TensorEntry", "CheckpointManifest", "save_checkpoint",
           "load_checkpoint"]

MAGIC = b"CTXMIMCK"
FORMAT_VERSION = 1
_ELEMENT = "<f8"


@dataclass
class TensorEntry:
    name: str
    shape: list[int]
    dtype: str
    offset: int
    nbytes: int


@dataclass
class CheckpointManifest:
    format_version: int
    config: dict
    opt_step: int
    tensors: list[TensorEntry] = field(default_factory=list)
    blob_size: int = 0
    sha256: str = ""

    def to_json(self) -> bytes:
        return json.dumps(asdict(self), sort_keys=True).encode("utf-8")


def _collect(params: Backbone, opt_state: AdamState):
    arrays = []
    for name, p in params.named_parameters():
        arrays.append((f"params/{name}", p))
    for name, _ in params.named_parameters():
        arrays.append((f"opt/m/{name}", opt_state.m[name]))
    for name, _ in params.named_parameters():
        arrays.append((f"opt/v/{name}", opt_state.v[name]))
    return arrays


def save_checkpoint(params: Backbone, opt_state: AdamState | None, configs: RunConfig | dict | None,
                    path: str | Path) -> CheckpointManifest:
    """Write parameters, optimizer moments and the config snapshot to ``path``."""
    if opt_state is None:
        opt_state = AdamState.zeros_like({n: p.detach() for n, p in params.named_parameters()})
    if isinstance(configs, RunConfig):
        cfg = configs.to_dict()
    else:
        cfg = dict(configs or {})
    cfg["backbone"] = json.loads(json.dumps(asdict(params.config)))

    entries, chunks, offset = [], [], 0
    for name, t in _collect(params, opt_state):
        data = np.ascontiguousarray(t.detach().cpu().numpy(), dtype=_ELEMENT).tobytes()
        entries.append(TensorEntry(name, list(t.shape), _ELEMENT, offset, len(data)))
        chunks.append(data)
        offset += len(data)
    blob = b"".join(chunks)
    manifest = CheckpointManifest(FORMAT_VERSION, cfg, int(opt_state.step), entries,
                                  len(blob), hashlib.sha256(blob).hexdigest())
    header = manifest.to_json()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        fh.write(blob)
    return manifest


def read_manifest(path: str | Path) -> tuple[CheckpointManifest, bytes]:
    raw = Path(path).read_bytes()
    if len(raw) < len(MAGIC) + 4 or raw[:len(MAGIC)] != MAGIC:
        raise CorruptCheckpointError(f"{path}: not a ctxmim checkpoint")
    (hlen,) = struct.unpack_from("<I", raw, len(MAGIC))
    start = len(MAGIC) + 4
    try:
        header = json.loads(raw[start:start + hlen].decode("utf-8"))
        tensors = [TensorEntry(**e) for e in header.pop("tensors")]
        manifest = CheckpointManifest(tensors=tensors, **header)
    except (ValueError, TypeError, KeyError) as exc:
        raise CorruptCheckpointError(f"{path}: unreadable header ({exc})") from None
    if manifest.format_version != FORMAT_VERSION:
        raise CorruptCheckpointError(
            f"{path}: format version {manifest.format_version}, expected {FORMAT_VERSION}")
    blob = raw[start + hlen:]
    if len(blob) != manifest.blob_size:
        raise CorruptCheckpointError(
            f"{path}: data blob has {len(blob)} bytes, manifest says {manifest.blob_size}")
    if hashlib.sha256(blob).hexdigest() != manifest.sha256:
        raise CorruptCheckpointError(f"{path}: checksum mismatch")
    expected = 0
    for e in manifest.tensors:
        if e.offset != expected or e.dtype != _ELEMENT or e.nbytes != 8 * int(np.prod(e.shape)):
            raise CorruptCheckpointError(f"{path}: bad directory entry for {e.name}")
        expected += e.nbytes
    if expected != manifest.blob_size:
        raise CorruptCheckpointError(f"{path}: directory does not cover the data blob")
    return manifest, blob


def load_checkpoint(path: str | Path) -> tuple[Backbone, AdamState, RunConfig]:
    """Inverse of :func:`save_checkpoint`; every array is restored bit for bit."""
    manifest, blob = read_manifest(path)
    arrays = {}
    for e in manifest.tensors:
        arr = np.frombuffer(blob, dtype=_ELEMENT, count=e.nbytes // 8, offset=e.offset)
        arrays[e.name] = torch.from_numpy(arr.reshape(e.shape).astype(np.float64))
    try:
        run_cfg = RunConfig.from_dict(manifest.config)
        model = Backbone(BackboneConfig(**manifest.config["backbone"]))
    except (ValueError, TypeError, KeyError) as exc:
        raise CorruptCheckpointError(f"{path}: invalid config snapshot ({exc})") from None
    names = [n for n, _ in model.named_parameters()]
    expected = {f"params/{n}" for n in names} | {f"opt/m/{n}" for n in names} \
        | {f"opt/v/{n}" for n in names}
    if set(arrays) != expected or len(arrays) != len(manifest.tensors):
        raise CorruptCheckpointError(f"{path}: tensor set does not match the model")
    with torch.no_grad():
        for name, p in model.named_parameters():
            src = arrays[f"params/{name}"]
            if src.shape != p.shape:
                raise CorruptCheckpointError(f"{path}: shape mismatch for {name}")
            p.copy_(src.to(DTYPE))
    opt_state = AdamState(manifest.opt_step,
                          {n: arrays[f"opt/m/{n}"] for n in names},
                          {n: arrays[f"opt/v/{n}"] for n in names})
    return model, opt_state, run_cfg
