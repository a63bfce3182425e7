import json
import struct

import pytest
import torch

from conftest import TINY, randomize_params
from ctxmim.backbone import init_params
from ctxmim.checkpoint import FORMAT_VERSION, MAGIC, load_checkpoint, save_checkpoint
from ctxmim.config import BackboneConfig, DatasetConfig, RunConfig, SynthConfig, TrainConfig
from ctxmim.errors import CorruptCheckpointError
from ctxmim.trainer import AdamState


@pytest.fixture
def saved(tmp_path):
    cfg = BackboneConfig(**TINY)
    model = randomize_params(init_params(cfg, 0), 1)
    gen = torch.Generator().manual_seed(2)
    named = {n: p.detach() for n, p in model.named_parameters()}
    state = AdamState(17, {n: torch.randn(p.shape, generator=gen, dtype=torch.float64)
                           for n, p in named.items()},
                      {n: torch.rand(p.shape, generator=gen, dtype=torch.float64)
                       for n, p in named.items()})
    synth = SynthConfig(image_size=(8, 8), channels=1, count_range=(1, 2), size_range=(2, 3))
    run = RunConfig(backbone=cfg, train=TrainConfig(epochs=3, seed=9),
                    dataset=DatasetConfig(count=10, synth=synth))
    path = tmp_path / "model.ckpt"
    manifest = save_checkpoint(model, state, run, path)
    return model, state, run, path, manifest


def test_roundtrip_bitwise(saved):
    model, state, run, path, _ = saved
    loaded, loaded_state, loaded_run = load_checkpoint(path)
    for (na, a), (nb, b) in zip(model.named_parameters(), loaded.named_parameters()):
        assert na == nb and torch.equal(a, b)
    for n in state.m:
        assert torch.equal(state.m[n], loaded_state.m[n])
        assert torch.equal(state.v[n], loaded_state.v[n])
    assert loaded_state.step == 17
    assert loaded_run == run


def test_manifest_complete(saved):
    model, _, _, _, manifest = saved
    entries = {e.name: e for e in manifest.tensors}
    for name, p in model.named_parameters():
        for prefix in ("params/", "opt/m/", "opt/v/"):
            assert entries[prefix + name].shape == list(p.shape)
    assert len(entries) == len(manifest.tensors) == 3 * len(list(model.parameters()))
    offsets = [e.offset for e in manifest.tensors]
    assert offsets == sorted(offsets) and offsets[0] == 0
    for a, b in zip(manifest.tensors, manifest.tensors[1:]):
        assert a.offset + a.nbytes == b.offset
    assert all(e.dtype == "<f8" for e in manifest.tensors)
    assert manifest.format_version == FORMAT_VERSION


def test_blob_is_little_endian_float64(saved):
    model, _, _, path, manifest = saved
    raw = path.read_bytes()
    (hlen,) = struct.unpack_from("<I", raw, len(MAGIC))
    blob = raw[len(MAGIC) + 4 + hlen:]
    first = manifest.tensors[0]
    value = struct.unpack_from("<d", blob, first.offset)[0]
    assert value == dict(model.named_parameters())[first.name[len("params/"):]].reshape(-1)[0]


def test_truncated(saved):
    path = saved[3]
    path.write_bytes(path.read_bytes()[:-1])
    with pytest.raises(CorruptCheckpointError):
        load_checkpoint(path)


def test_flipped_byte(saved):
    path = saved[3]
    raw = bytearray(path.read_bytes())
    raw[-5] ^= 0xFF
    path.write_bytes(bytes(raw))
    with pytest.raises(CorruptCheckpointError, match="checksum"):
        load_checkpoint(path)


def test_version_mismatch(saved):
    path = saved[3]
    raw = path.read_bytes()
    (hlen,) = struct.unpack_from("<I", raw, len(MAGIC))
    start = len(MAGIC) + 4
    header = json.loads(raw[start:start + hlen])
    header["format_version"] = FORMAT_VERSION + 1
    new_header = json.dumps(header).encode()
    path.write_bytes(MAGIC + struct.pack("<I", len(new_header)) + new_header
                     + raw[start + hlen:])
    with pytest.raises(CorruptCheckpointError, match="version"):
        load_checkpoint(path)


def test_not_a_checkpoint(tmp_path):
    p = tmp_path / "x.ckpt"
    p.write_bytes(b"hello world, definitely not a checkpoint")
    with pytest.raises(CorruptCheckpointError):
        load_checkpoint(p)
    p.write_bytes(b"")
    with pytest.raises(CorruptCheckpointError):
        load_checkpoint(p)


def test_default_opt_state(tmp_path):
    model = init_params(BackboneConfig(**TINY), 0)
    path = tmp_path / "init.ckpt"
    save_checkpoint(model, None, None, path)
    loaded, state, run = load_checkpoint(path)
    assert state.step == 0 and all(torch.count_nonzero(m) == 0 for m in state.m.values())
    assert run.backbone == model.config


def test_save_is_deterministic(saved, tmp_path):
    model, state, run, path, _ = saved
    other = tmp_path / "again.ckpt"
    save_checkpoint(model, state, run, other)
    assert other.read_bytes() == path.read_bytes()
