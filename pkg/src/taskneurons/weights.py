"""Weight file container.

Layout (all integers little-endian)::

    offset 0   8 bytes   magic  b"TNWEIGHT"
    offset 8   uint32    format version (currently 1)
    offset 12  uint64    header length H in bytes
    offset 20  H bytes   UTF-8 JSON header
    offset 20+H          payload: tensors concatenated, row-major, little-endian

The header is a JSON object with keys ``config`` (ModelConfig fields),
``tensors`` (list of ``{name, shape, dtype, offset, nbytes}`` with offsets
relative to the payload start, in model state_dict order), ``payload_sha256``
and ``meta`` (free-form, e.g. the tokenizer vocabulary). The model hash is
sha256 over the canonical config JSON followed by the payload bytes, so it
identifies weights + architecture and ignores ``meta``.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np
import torch

from .engine import ModelConfig, Transformer
from .errors import IntegrityError, MissingArtifact

MAGIC = b"TNWEIGHT"
FORMAT_VERSION = 1


def _canonical(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()


def _payload(model: Transformer) -> tuple[list[dict], bytes]:
    entries, chunks, offset = [], [], 0
    for name, t in model.state_dict().items():
        arr = t.detach().cpu().numpy()
        arr = np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<"))
        raw = arr.tobytes(order="C")
        entries.append({"name": name, "shape": list(arr.shape), "dtype": arr.dtype.str,
                        "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    return entries, b"".join(chunks)


def model_hash(model: Transformer) -> str:
    _, payload = _payload(model)
    return hashlib.sha256(_canonical(model.cfg.to_dict()) + payload).hexdigest()


def save_weights(model: Transformer, path: str | Path, meta: dict | None = None) -> str:
    """Write ``model`` to ``path`` and return its model hash."""
    entries, payload = _payload(model)
    header = {
        "config": model.cfg.to_dict(),
        "tensors": entries,
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
        "meta": meta or {},
    }
    hb = _canonical(header)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", FORMAT_VERSION, len(hb)))
        fh.write(hb)
        fh.write(payload)
    return hashlib.sha256(_canonical(header["config"]) + payload).hexdigest()


def read_header(path: str | Path) -> tuple[dict, bytes]:
    path = Path(path)
    if not path.exists():
        raise MissingArtifact(f"weight file {path} not found")
    raw = path.read_bytes()
    if raw[:8] != MAGIC:
        raise IntegrityError(f"{path} is not a weight file")
    version, hlen = struct.unpack("<IQ", raw[8:20])
    if version != FORMAT_VERSION:
        raise IntegrityError(f"unsupported weight format version {version}")
    header = json.loads(raw[20 : 20 + hlen])
    payload = raw[20 + hlen :]
    if hashlib.sha256(payload).hexdigest() != header["payload_sha256"]:
        raise IntegrityError(f"{path}: payload hash mismatch")
    return header, payload


def load_weights(path: str | Path) -> tuple[Transformer, dict]:
    """Load a model; returns ``(model, header)``. ``header['model_hash']`` is filled in."""
    header, payload = read_header(path)
    cfg = ModelConfig.from_dict(header["config"])
    model = Transformer(cfg)
    state = {}
    for e in header["tensors"]:
        buf = payload[e["offset"] : e["offset"] + e["nbytes"]]
        arr = np.frombuffer(buf, dtype=np.dtype(e["dtype"])).reshape(e["shape"])
        state[e["name"]] = torch.from_numpy(arr.astype(arr.dtype.newbyteorder("=")))
    model.load_state_dict(state)
    model.eval()
    header["model_hash"] = hashlib.sha256(_canonical(header["config"]) + payload).hexdigest()
    return model, header


def file_model_hash(path: str | Path) -> str:
    header, payload = read_header(path)
    return hashlib.sha256(_canonical(header["config"]) + payload).hexdigest()
