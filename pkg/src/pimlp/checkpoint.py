"""Checkpoint file format.

Layout (little-endian)::

    b"WFCK" | u16 version=1 | u32 header_len | header (UTF-8 JSON) | f32 tensor payloads

The header carries the hyperconfig, optimizer config, RNG algorithm id, init
scheme, training provenance and a tensor directory of ``{name, shape, offset}``
entries. ``offset`` counts bytes from the start of the payload section.
Optimizer moments are stored as tensors named ``adam.m.<param>`` / ``adam.v.<param>``.
"""
import hashlib
import json
import struct
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .data import HyperConfig
from .errors import FormatError
from .model import INIT_SCHEME, ModelParams
from .numerics import RNG_ALGORITHM
from .train import OptimizerState

MAGIC = b"WFCK"
VERSION = 1
_PREFIX = struct.Struct("<4sHI")


@dataclass
class Checkpoint:
    cfg: HyperConfig
    params: ModelParams
    state: Optional[OptimizerState] = None
    provenance: dict = field(default_factory=dict)

    @property
    def history(self):
        return self.provenance.get("history", [])


def history_digest(history):
    losses = np.asarray([h["loss"] for h in history], dtype="<f8")
    return hashlib.sha256(losses.tobytes()).hexdigest()


def save_checkpoint(ckpt, path):
    tensors = [(k, v) for k, v in ckpt.params.tensors().items()]
    optimizer = None
    if ckpt.state is not None:
        optimizer = ckpt.state.config()
        tensors += [(f"adam.m.{k}", v) for k, v in ckpt.state.m.items()]
        tensors += [(f"adam.v.{k}", v) for k, v in ckpt.state.v.items()]
    directory = []
    offset = 0
    blobs = []
    for name, arr in tensors:
        blob = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        directory.append({"name": name, "shape": list(arr.shape), "offset": offset})
        blobs.append(blob)
        offset += len(blob)
    provenance = dict(ckpt.provenance)
    if "history" in provenance:
        provenance["loss_history_digest"] = history_digest(provenance["history"])
    header = {
        "format_version": VERSION,
        "hyperconfig": ckpt.cfg.to_dict(),
        "optimizer": optimizer,
        "rng_algorithm": RNG_ALGORITHM,
        "init_scheme": INIT_SCHEME,
        "dtype": "f32",
        "provenance": provenance,
        "tensors": directory,
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_PREFIX.pack(MAGIC, VERSION, len(hbytes)))
        fh.write(hbytes)
        for blob in blobs:
            fh.write(blob)


def read_checkpoint_header(raw):
    if len(raw) < 4 or raw[:4] != MAGIC:
        raise FormatError(f"bad magic {raw[:4]!r}, expected {MAGIC!r}", offset=0)
    if len(raw) < _PREFIX.size:
        raise FormatError("truncated prefix", offset=len(raw))
    _, version, hlen = _PREFIX.unpack_from(raw)
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", offset=4)
    end = _PREFIX.size + hlen
    if end > len(raw):
        raise FormatError(f"header length {hlen} runs past end of file ({len(raw)} bytes)", offset=6)
    try:
        header = json.loads(raw[_PREFIX.size:end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"header is not valid UTF-8 JSON: {exc}", offset=_PREFIX.size) from None
    if not isinstance(header, dict) or "tensors" not in header or "hyperconfig" not in header:
        raise FormatError("header lacks tensor directory or hyperconfig", offset=_PREFIX.size)
    return header, end


def load_checkpoint(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    header, base = read_checkpoint_header(raw)
    arrays = {}
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        start = base + int(entry["offset"])
        nbytes = 4 * int(np.prod(shape, dtype=np.int64))
        if start + nbytes > len(raw):
            raise FormatError(f"tensor {entry['name']!r} truncated", offset=len(raw))
        arrays[entry["name"]] = np.frombuffer(raw, dtype="<f4", count=nbytes // 4, offset=start).reshape(shape).astype(np.float32)
    params = ModelParams(**{k: v for k, v in arrays.items() if not k.startswith("adam.")})
    state = None
    opt = header.get("optimizer")
    if opt is not None:
        m = {k[len("adam.m."):]: v for k, v in arrays.items() if k.startswith("adam.m.")}
        v = {k[len("adam.v."):]: a for k, a in arrays.items() if k.startswith("adam.v.")}
        state = OptimizerState(m, v, int(opt["t"]), float(opt["beta1"]), float(opt["beta2"]), float(opt["eps"]))
    return Checkpoint(HyperConfig.from_dict(header["hyperconfig"]), params, state, header.get("provenance", {}))
