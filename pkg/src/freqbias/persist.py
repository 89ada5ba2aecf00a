"""Single-file checkpoints: fixed prefix, JSON header, little-endian tensor payload.

Layout::

    magic (8) | version u32 | header length u64 | sha256 (32) | header JSON | payload

The digest covers every byte except itself, so any single-byte change is caught.
"""
from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import ChecksumError, ConfigError, FormatError, IoError, VersionError
from .model import Model, ModelConfig

MAGIC = b"FQBCKPT\x00"
VERSION = 1
_PREFIX = struct.Struct("<8sIQ32s")


def _digest(prefix_wo_hash: bytes, header: bytes, payload: bytes) -> bytes:
    h = hashlib.sha256()
    for part in (prefix_wo_hash, header, payload):
        h.update(part)
    return h.digest()


def _le(arr: np.ndarray) -> np.ndarray:
    dt = np.dtype(arr.dtype).newbyteorder("<")
    return np.ascontiguousarray(arr, dtype=dt)


def atomic_write(path, data: bytes) -> None:
    path = Path(path)
    try:
        fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
        try:
            with os.fdopen(fd, "wb") as fh:
                fh.write(data)
                fh.flush()
                os.fsync(fh.fileno())
            os.replace(tmp, path)
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def encode(model: Model, meta: Optional[dict] = None, optimizer_state: Optional[dict] = None) -> bytes:
    entries = []
    blobs = []
    offset = 0
    groups = [("param", {k: t.data for k, t in model.params.items()}),
              ("buffer", model.buffers),
              ("optimizer", optimizer_state or {})]
    for kind, tensors in groups:
        for name, arr in tensors.items():
            a = _le(np.asarray(arr))
            raw = a.tobytes()
            entries.append({"name": name, "kind": kind, "dtype": a.dtype.str, "shape": list(a.shape),
                            "offset": offset, "nbytes": len(raw)})
            blobs.append(raw)
            offset += len(raw)
    header = {
        "config": model.config.to_dict(),
        "seed": model.seed,
        "beta": model.beta,
        "meta": dict(meta or {}),
        "tensors": entries,
    }
    hbytes = json.dumps(header, sort_keys=True).encode()
    payload = b"".join(blobs)
    head = struct.pack("<8sIQ", MAGIC, VERSION, len(hbytes))
    return head + _digest(head, hbytes, payload) + hbytes + payload


def save(model: Model, meta: Optional[dict], path, optimizer_state: Optional[dict] = None) -> None:
    """Write a checkpoint atomically (temp file in the same directory, then rename)."""
    atomic_write(path, encode(model, meta, optimizer_state))


def decode(raw: bytes) -> tuple[dict, dict]:
    """Validate a checkpoint and return (header, {(kind, name): array})."""
    if len(raw) < _PREFIX.size:
        raise FormatError("file is shorter than the checkpoint prefix")
    magic, version, hlen, digest = _PREFIX.unpack_from(raw)
    if magic != MAGIC:
        raise FormatError("not a checkpoint (bad magic)")
    if version != VERSION:
        raise VersionError(f"unsupported checkpoint version {version} (this build reads {VERSION})")
    start = _PREFIX.size
    if start + hlen > len(raw):
        raise ChecksumError("header length points past the end of the file")
    hbytes = raw[start:start + hlen]
    payload = raw[start + hlen:]
    if _digest(raw[:start - 32], hbytes, payload) != digest:
        raise ChecksumError("checkpoint checksum mismatch")
    try:
        header = json.loads(hbytes)
    except ValueError as exc:
        raise FormatError(f"unreadable header: {exc}") from exc
    tensors = {}
    for e in header["tensors"]:
        end = e["offset"] + e["nbytes"]
        if end > len(payload):
            raise FormatError(f"tensor {e['name']} runs past the payload")
        arr = np.frombuffer(payload[e["offset"]:end], dtype=np.dtype(e["dtype"])).reshape(e["shape"])
        tensors[(e["kind"], e["name"])] = arr.astype(arr.dtype.newbyteorder("="))
    return header, tensors


def _read(path) -> bytes:
    try:
        return Path(path).read_bytes()
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc


def _restore(model: Model, header: dict, tensors: dict) -> None:
    for name, t in model.params.items():
        arr = tensors.get(("param", name))
        if arr is None or arr.shape != t.data.shape:
            raise FormatError(f"checkpoint lacks a matching tensor for parameter {name}")
        t.data = arr.astype(t.data.dtype, copy=True)
        t.grad = None
    for name, buf in model.buffers.items():
        arr = tensors.get(("buffer", name))
        if arr is None or arr.shape != buf.shape:
            raise FormatError(f"checkpoint lacks a matching buffer {name}")
        buf[...] = arr
    model.set_beta(header["beta"])
    model.eval()


def load(path, expected_config: Optional[ModelConfig] = None) -> tuple[Model, dict]:
    """Rebuild the model (eval mode, cutoff restored); returns (model, meta).

    ``meta`` carries the saved metadata plus ``beta``, ``seed`` and any
    optimizer state under ``optimizer``.
    """
    header, tensors = decode(_read(path))
    cfg = ModelConfig.from_dict(header["config"])
    if expected_config is not None and expected_config.to_dict() != cfg.to_dict():
        raise ConfigError("checkpoint config does not match the expected model config")
    model = Model(cfg, header["seed"])
    _restore(model, header, tensors)
    meta = dict(header["meta"])
    meta["beta"] = header["beta"]
    meta["seed"] = header["seed"]
    meta["optimizer"] = {n: a for (k, n), a in tensors.items() if k == "optimizer"}
    return model, meta


def load_into(model: Model, path) -> dict:
    """Load weights into an existing model; refuses if the configs differ."""
    header, tensors = decode(_read(path))
    if header["config"] != model.config.to_dict():
        raise ConfigError("checkpoint config does not match this model's config")
    _restore(model, header, tensors)
    return dict(header["meta"])


def save_report(obj, path) -> None:
    d = obj.to_dict() if hasattr(obj, "to_dict") else obj
    atomic_write(path, (json.dumps(d, indent=2, sort_keys=True) + "\n").encode())
