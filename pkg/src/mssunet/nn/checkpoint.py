"""Single-file network checkpoints.

Layout: 8-byte magic, uint32 format version, uint32 header length, a UTF-8
JSON header, then one little-endian float32 block per tensor in header order.
"""
from __future__ import annotations

import json
import struct
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .unet import UNet, UNetConfig

MAGIC = b"MSSUNET\x00"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(net: UNet, path, meta: dict | None = None) -> Path:
    names = sorted(net.params)
    tensors, offset = [], 0
    for name in names:
        arr = net.params[name]
        nbytes = 4 * arr.size
        tensors.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": nbytes})
        offset += nbytes
    header = {"version": VERSION, "net": asdict(net.cfg), "tensors": tensors, "meta": meta or {}}
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(blob)))
        fh.write(blob)
        for name in names:
            fh.write(np.ascontiguousarray(net.params[name], dtype="<f4").tobytes())
    return path


def read_header(path) -> tuple[dict, int]:
    with open(path, "rb") as fh:
        magic = fh.read(len(MAGIC))
        if magic != MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
        raw = fh.read(8)
        if len(raw) != 8:
            raise CheckpointError(f"{path}: truncated header")
        version, n = struct.unpack("<II", raw)
        if version != VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
        try:
            header = json.loads(fh.read(n).decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise CheckpointError(f"{path}: corrupt header: {exc}") from None
    return header, len(MAGIC) + 8 + n


def load_checkpoint(path) -> tuple[UNet, dict]:
    """Return the network and the ``meta`` dict stored with it."""
    header, start = read_header(path)
    try:
        cfg = UNetConfig(**_tuples(header["net"]))
    except (TypeError, ValueError, KeyError) as exc:
        raise CheckpointError(f"{path}: bad network config: {exc}") from None
    data = Path(path).read_bytes()[start:]
    params = {}
    for t in header["tensors"]:
        lo, hi = t["offset"], t["offset"] + t["nbytes"]
        if hi > len(data):
            raise CheckpointError(f"{path}: tensor {t['name']} runs past end of file")
        arr = np.frombuffer(data[lo:hi], dtype="<f4").reshape(t["shape"])
        params[t["name"]] = arr.astype(cfg.dtype)
    try:
        return UNet(cfg, params), header.get("meta", {})
    except ValueError as exc:
        raise CheckpointError(f"{path}: {exc}") from None


def _tuples(d: dict) -> dict:
    return {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
