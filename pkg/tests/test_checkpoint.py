import os
import struct

import numpy as np
import pytest
import torch

from partseg.backbone import ToyBackbone
from partseg.checkpoint import MAGIC, load_embeddings, read_checkpoint, save_embeddings
from partseg.errors import CheckpointError, CompatibilityError


@pytest.fixture
def emb(toy):
    e = toy.encode_prompt("part part part", 3, ["background", "a", "b"])
    return e.with_embeddings(e.embeddings + torch.randn(e.embeddings.shape, generator=torch.Generator().manual_seed(0)))


def test_roundtrip_bit_exact(tmp_path, emb, toy):
    path = str(tmp_path / "e.ckpt")
    save_embeddings(emb, path, config={"lr": 0.1}, descriptor=toy.descriptor)
    back = load_embeddings(path, toy)
    assert torch.equal(back.embeddings, emb.embeddings)
    assert back.class_names == ["background", "a", "b"] and back.num_classes == 3
    assert back.prompt_text == "part part part"
    assert back.backbone_digest == toy.descriptor.digest


def test_header_fields(tmp_path, emb, toy):
    path = str(tmp_path / "e.ckpt")
    save_embeddings(emb, path, config={"lr": 0.1}, descriptor=toy.descriptor)
    header, arr = read_checkpoint(path)
    assert header["version"] == 1 and header["dim"] == 32 and header["token_capacity"] == 77
    assert header["config"] == {"lr": 0.1} and len(header["config_hash"]) == 64
    assert header["backbone"]["name"] == "toy"
    assert arr.dtype == np.dtype("<f4") and arr.shape == (77, 32)


def test_layout_is_little_endian_float32(tmp_path, emb):
    path = str(tmp_path / "e.ckpt")
    save_embeddings(emb, path)
    raw = open(path, "rb").read()
    assert raw.startswith(MAGIC)
    (n,) = struct.unpack("<Q", raw[len(MAGIC):len(MAGIC) + 8])
    blob = raw[len(MAGIC) + 8 + n:]
    assert len(blob) == 77 * 32 * 4
    assert struct.unpack("<f", blob[:4])[0] == float(emb.embeddings[0, 0])


def test_identical_saves_identical_bytes(tmp_path, emb):
    a, b = str(tmp_path / "a"), str(tmp_path / "b")
    save_embeddings(emb, a, config={"x": 1})
    save_embeddings(emb, b, config={"x": 1})
    assert open(a, "rb").read() == open(b, "rb").read()


@pytest.mark.parametrize("keep", [5, len(MAGIC) + 4, len(MAGIC) + 20, -1, -100])
def test_truncated(tmp_path, emb, keep):
    path = str(tmp_path / "e.ckpt")
    save_embeddings(emb, path)
    raw = open(path, "rb").read()
    with open(path, "wb") as f:
        f.write(raw[:keep])
    with pytest.raises(CheckpointError):
        load_embeddings(path)


def test_corrupted_blob(tmp_path, emb):
    path = str(tmp_path / "e.ckpt")
    save_embeddings(emb, path)
    raw = bytearray(open(path, "rb").read())
    raw[-3] ^= 0xFF
    open(path, "wb").write(bytes(raw))
    with pytest.raises(CheckpointError):
        load_embeddings(path)


def test_not_a_checkpoint(tmp_path):
    path = str(tmp_path / "x")
    open(path, "wb").write(b"hello")
    with pytest.raises(CheckpointError):
        read_checkpoint(path)


def test_other_backbone_rejected(tmp_path, emb):
    path = str(tmp_path / "e.ckpt")
    save_embeddings(emb, path)
    with pytest.raises(CompatibilityError) as err:
        load_embeddings(path, ToyBackbone(seed=1))
    assert err.value.exit_code == 4


def test_creates_parent_dirs(tmp_path, emb):
    path = str(tmp_path / "deep" / "er" / "e.ckpt")
    save_embeddings(emb, path)
    assert os.path.exists(path)
