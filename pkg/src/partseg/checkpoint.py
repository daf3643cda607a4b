"""Embedding checkpoints: a magic line, a length-prefixed JSON header, then a float32 blob.

Layout::

    b"PARTSEG-EMB\n"
    uint64 little-endian   header length in bytes
    header                 UTF-8 JSON (sorted keys)
    blob                   (tokens, dim) little-endian float32, row-major
"""
import hashlib
import json
import os
import struct

import numpy as np
import torch

from .backbone.base import PromptEmbeddings
from .errors import CheckpointError, CompatibilityError

MAGIC = b"PARTSEG-EMB\n"
VERSION = 1


def config_hash(config):
    if config is None:
        return None
    return hashlib.sha256(json.dumps(config, sort_keys=True).encode()).hexdigest()


def save_embeddings(emb, path, config=None, descriptor=None):
    arr = emb.embeddings.detach().cpu().numpy().astype("<f4")
    blob = np.ascontiguousarray(arr).tobytes()
    header = {
        "version": VERSION,
        "num_classes": emb.num_classes,
        "class_names": list(emb.class_names),
        "token_capacity": int(arr.shape[0]),
        "dim": int(arr.shape[1]),
        "prompt_text": emb.prompt_text,
        "backbone_digest": emb.backbone_digest,
        "backbone": descriptor.to_dict() if descriptor is not None else None,
        "config": config,
        "config_hash": config_hash(config),
        "blob_sha256": hashlib.sha256(blob).hexdigest(),
    }
    head = json.dumps(header, sort_keys=True).encode()
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "wb") as f:
        f.write(MAGIC + struct.pack("<Q", len(head)) + head + blob)
    return header


def read_checkpoint(path):
    """Parse a checkpoint into (header dict, float32 array); any damage raises CheckpointError."""
    with open(path, "rb") as f:
        raw = f.read()
    if not raw.startswith(MAGIC):
        raise CheckpointError(f"{path}: not an embedding checkpoint")
    pos = len(MAGIC)
    if len(raw) < pos + 8:
        raise CheckpointError(f"{path}: truncated header")
    (n,) = struct.unpack("<Q", raw[pos:pos + 8])
    pos += 8
    if len(raw) < pos + n:
        raise CheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(raw[pos:pos + n].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path}: unreadable header ({e})") from None
    if header.get("version") != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {header.get('version')}")
    blob = raw[pos + n:]
    shape = (header["token_capacity"], header["dim"])
    if len(blob) != 4 * shape[0] * shape[1]:
        raise CheckpointError(f"{path}: expected {4 * shape[0] * shape[1]} blob bytes, found {len(blob)}")
    if hashlib.sha256(blob).hexdigest() != header["blob_sha256"]:
        raise CheckpointError(f"{path}: blob checksum mismatch")
    return header, np.frombuffer(blob, dtype="<f4").reshape(shape).copy()


def load_embeddings(path, backbone=None):
    """Load embeddings; with ``backbone`` also check they were produced for it."""
    header, arr = read_checkpoint(path)
    if backbone is not None:
        d = backbone.descriptor
        if header["backbone_digest"] is not None and header["backbone_digest"] != d.digest:
            name = (header.get("backbone") or {}).get("name", "another backbone")
            raise CompatibilityError(f"{path} was produced for {name}, not this {d.name} backbone")
        if header["token_capacity"] != d.token_capacity:
            raise CompatibilityError(
                f"{path} holds {header['token_capacity']} tokens, {d.name} takes {d.token_capacity}")
    emb = torch.from_numpy(arr)
    if backbone is not None:
        emb = emb.to(backbone.dtype)
    return PromptEmbeddings(emb, header["num_classes"], header["class_names"], header["prompt_text"],
                            header["backbone_digest"])
