"""Versioned binary checkpoints: named parameter tensors, optimizer state,
RNG state, and the config hash they were trained under.

Serialization is canonical (sorted names, fixed-width little-endian
headers), so save -> load -> save reproduces identical bytes.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

from .ioutil import atomic_write_bytes

_MAGIC = b"ASTFCKPT"
_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    iteration: int
    config_hash: str
    gen_state: dict
    disc_state: dict
    opt_g_state: dict
    opt_d_state: dict
    rng_state: dict


def _pack_map(out: bytearray, tensors: dict) -> None:
    out += struct.pack("<I", len(tensors))
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype="<f8")
        enc = name.encode("utf-8")
        out += struct.pack("<H", len(enc)) + enc
        out += struct.pack("<B", arr.ndim)
        for dim in arr.shape:
            out += struct.pack("<I", dim)
        out += arr.tobytes()


def _unpack_map(blob: bytes, off: int):
    (count,) = struct.unpack_from("<I", blob, off)
    off += 4
    tensors = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", blob, off)
        off += 2
        name = blob[off : off + nlen].decode("utf-8")
        off += nlen
        (ndim,) = struct.unpack_from("<B", blob, off)
        off += 1
        shape = []
        for _ in range(ndim):
            (dim,) = struct.unpack_from("<I", blob, off)
            shape.append(dim)
            off += 4
        n = int(np.prod(shape)) if shape else 1
        tensors[name] = np.frombuffer(blob, dtype="<f8", count=n, offset=off).reshape(shape).copy()
        off += n * 8
    return tensors, off


def _pack_opt(out: bytearray, state: dict) -> None:
    out += struct.pack("<Q", state["t"])
    _pack_map(out, state["m"])
    _pack_map(out, state["v"])


def _unpack_opt(blob: bytes, off: int):
    (t,) = struct.unpack_from("<Q", blob, off)
    off += 8
    m, off = _unpack_map(blob, off)
    v, off = _unpack_map(blob, off)
    return {"t": int(t), "m": m, "v": v}, off


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    out = bytearray()
    out += _MAGIC
    out += struct.pack("<IQ", _VERSION, ckpt.iteration)
    for text in (ckpt.config_hash, json.dumps(ckpt.rng_state, sort_keys=True)):
        enc = text.encode("utf-8")
        out += struct.pack("<I", len(enc)) + enc
    _pack_map(out, ckpt.gen_state)
    _pack_map(out, ckpt.disc_state)
    _pack_opt(out, ckpt.opt_g_state)
    _pack_opt(out, ckpt.opt_d_state)
    atomic_write_bytes(path, bytes(out))


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:8] != _MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    version, iteration = struct.unpack_from("<IQ", blob, 8)
    if version != _VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    off = 8 + 12
    texts = []
    for _ in range(2):
        (ln,) = struct.unpack_from("<I", blob, off)
        off += 4
        texts.append(blob[off : off + ln].decode("utf-8"))
        off += ln
    gen_state, off = _unpack_map(blob, off)
    disc_state, off = _unpack_map(blob, off)
    opt_g, off = _unpack_opt(blob, off)
    opt_d, off = _unpack_opt(blob, off)
    return Checkpoint(
        iteration=int(iteration),
        config_hash=texts[0],
        gen_state=gen_state,
        disc_state=disc_state,
        opt_g_state=opt_g,
        opt_d_state=opt_d,
        rng_state=json.loads(texts[1]),
    )
