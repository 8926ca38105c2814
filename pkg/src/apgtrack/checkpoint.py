"""Versioned binary checkpoints: magic, JSON header, row-major float64 payload.

The header describes the layer table and which optional arrays follow; all
numbers live in the payload so a load/save round trip is bit exact.
"""
from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from apgtrack import nn
from apgtrack.dynamics.perturbed import ResidualModel
from apgtrack.policy import PolicyParameters

MAGIC = b"APGCKPT\0"
VERSION = 1
KINDS = ("policy", "residual")


class CheckpointError(ValueError):
    pass


class UnsupportedVersionError(CheckpointError):
    pass


class SystemMismatchError(CheckpointError):
    pass


def config_hash(text: str) -> str:
    return hashlib.sha256(text.encode()).hexdigest()[:16]


def _arrays(obj) -> tuple[dict, list[np.ndarray]]:
    layers = [{"name": l.name, "activation": l.activation, "kernel": l.kernel,
               "weight": list(np.shape(l.weight)), "bias": list(np.shape(l.bias))}
              for l in obj.layers]
    arrays = list(obj.arrays())
    extras = []
    if isinstance(obj, PolicyParameters):
        for name in ("action_low", "action_high", "norm_mean", "norm_std"):
            a = getattr(obj, name)
            if a is not None:
                extras.append({"name": name, "shape": list(np.shape(a))})
                arrays.append(a)
    return {"layers": layers, "extras": extras}, arrays


def dumps(obj, config_text: str = "", meta: dict | None = None) -> bytes:
    if isinstance(obj, PolicyParameters):
        kind = "policy"
    elif isinstance(obj, ResidualModel):
        kind = "residual"
    else:
        raise CheckpointError(f"cannot checkpoint {type(obj).__name__}")
    layout, arrays = _arrays(obj)
    header = {"kind": kind, "system": obj.system, "config_hash": config_hash(config_text),
              "meta": meta or {}, **layout}
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    payload = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for a in arrays)
    return MAGIC + struct.pack("<II", VERSION, len(head)) + head + payload


def save(path, obj, config_text: str = "", meta: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(dumps(obj, config_text, meta))
    return path


def read_header(blob: bytes) -> tuple[dict, int]:
    if blob[:len(MAGIC)] != MAGIC:
        raise CheckpointError("not a checkpoint file")
    version, n = struct.unpack_from("<II", blob, len(MAGIC))
    if version != VERSION:
        raise UnsupportedVersionError(f"checkpoint version {version} is not supported (expected {VERSION})")
    start = len(MAGIC) + 8
    return json.loads(blob[start:start + n]), start + n


def loads(blob: bytes, kind: str | None = None, system: str | None = None):
    header, pos = read_header(blob)
    if kind is not None and header["kind"] != kind:
        raise CheckpointError(f"expected a {kind} checkpoint, found {header['kind']}")
    if system is not None and header["system"] != system:
        raise SystemMismatchError(f"checkpoint is for {header['system']}, not {system}")
    payload = np.frombuffer(blob, dtype="<f8", offset=pos)

    def take(shape):
        nonlocal payload
        n = int(np.prod(shape)) if shape else 1
        if payload.size < n:
            raise CheckpointError("truncated checkpoint payload")
        out, payload = payload[:n].reshape(shape).astype(np.float64), payload[n:]
        return out

    layers = [nn.Layer(l["name"], take(l["weight"]), take(l["bias"]), l["activation"], l["kernel"])
              for l in header["layers"]]
    extras = {e["name"]: take(e["shape"]) for e in header["extras"]}
    if payload.size:
        raise CheckpointError("trailing bytes in checkpoint payload")
    if header["kind"] == "residual":
        return ResidualModel(layers=layers, system=header["system"])
    params = PolicyParameters(layers=layers, system=header["system"],
                              action_low=extras["action_low"], action_high=extras["action_high"],
                              norm_mean=extras.get("norm_mean"), norm_std=extras.get("norm_std"))
    params.check_architecture()
    return params


def load(path, kind: str | None = None, system: str | None = None):
    return loads(Path(path).read_bytes(), kind, system)


def describe(path) -> dict:
    blob = Path(path).read_bytes()
    header, _ = read_header(blob)
    obj = loads(blob)
    return {"kind": header["kind"], "system": header["system"], "version": VERSION,
            "config_hash": header["config_hash"], "n_params": obj.n_params,
            "layers": [f"{l['name']}:{l['weight']}" for l in header["layers"]],
            "meta": header["meta"]}
