"""Binary model checkpoints with integrity and provenance checks.

Layout: an 8-byte magic, a little-endian u32 header length, a JSON
header, then every parameter as raw little-endian float64 in header
order. The header records the model kind and spec string, the encoding
tables (so generation needs no manifest), the manifest hash the model
was trained against, each parameter's name/shape/offset, and a sha256
of the payload. Loading verifies magic, header completeness, and the
payload digest, then rebuilds the model and copies values in, so a
save/load round trip is bit-exact.
"""
from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .coupled import CoupledModel, format_coupled_spec, parse_coupled_spec
from .encode import DurationVocab, PitchRange, Resolution
from .models import HomophonicModel, format_model_spec, parse_model_spec

MAGIC = b"PWCKPT01"


class CheckpointCorrupt(Exception):
    """The file is not a valid checkpoint or fails its integrity check."""


class ManifestMismatch(Exception):
    """Checkpoint was trained against a different corpus manifest."""

    def __init__(self, expected: str, actual: str):
        super().__init__(f"checkpoint manifest hash {expected[:12]}… does not "
                         f"match supplied manifest {actual[:12]}…")
        self.expected = expected
        self.actual = actual


def _model_kind(model) -> str:
    return "coupled" if isinstance(model, CoupledModel) else "homophonic"


def _spec_string(model) -> str:
    if isinstance(model, CoupledModel):
        return format_coupled_spec(model.spec)
    return format_model_spec(model.spec)


def save_checkpoint(path, model, manifest_hash: str,
                    extra: dict | None = None) -> None:
    names = sorted(model.params)
    blocks = []
    table = []
    offset = 0
    for name in names:
        arr = np.ascontiguousarray(model.params[name].value, dtype="<f8")
        blocks.append(arr.tobytes())
        table.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.nbytes
    payload = b"".join(blocks)
    header = {
        "kind": _model_kind(model),
        "spec": _spec_string(model),
        "manifest_hash": manifest_hash,
        "vocab": model.vocab.to_json(),
        "pitch_range": model.pitch_range.to_json(),
        "resolution": model.resolution.to_json(),
        "max_parts": getattr(model, "max_parts", 1),
        "params": table,
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
    }
    if extra:
        header["extra"] = extra
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(head)))
        fh.write(head)
        fh.write(payload)


def load_checkpoint(path) -> tuple[object, dict]:
    """Rebuild the saved model. Returns (model, header)."""
    data = Path(path).read_bytes()
    if len(data) < len(MAGIC) + 4 or data[:len(MAGIC)] != MAGIC:
        raise CheckpointCorrupt(f"{path}: bad magic")
    (head_len,) = struct.unpack_from("<I", data, len(MAGIC))
    head_start = len(MAGIC) + 4
    if len(data) < head_start + head_len:
        raise CheckpointCorrupt(f"{path}: truncated header")
    try:
        header = json.loads(data[head_start:head_start + head_len])
    except json.JSONDecodeError as exc:
        raise CheckpointCorrupt(f"{path}: unreadable header: {exc}") from exc
    payload = data[head_start + head_len:]
    digest = hashlib.sha256(payload).hexdigest()
    if digest != header.get("payload_sha256"):
        raise CheckpointCorrupt(f"{path}: payload digest mismatch")

    vocab = DurationVocab.from_json(header["vocab"])
    pitch_range = PitchRange.from_json(header["pitch_range"])
    resolution = Resolution.from_json(header["resolution"])
    if header["kind"] == "coupled":
        model = CoupledModel(parse_coupled_spec(header["spec"]), vocab,
                             pitch_range, resolution,
                             max_parts=header.get("max_parts", 6))
    elif header["kind"] == "homophonic":
        model = HomophonicModel(parse_model_spec(header["spec"]), vocab,
                                pitch_range, resolution)
    else:
        raise CheckpointCorrupt(f"{path}: unknown model kind {header['kind']!r}")

    for entry in header["params"]:
        name, shape, offset = entry["name"], tuple(entry["shape"]), entry["offset"]
        if name not in model.params:
            raise CheckpointCorrupt(f"{path}: unexpected parameter {name!r}")
        size = int(np.prod(shape, dtype=int)) * 8
        if offset + size > len(payload):
            raise CheckpointCorrupt(f"{path}: truncated payload at {name!r}")
        arr = np.frombuffer(payload, dtype="<f8", count=size // 8,
                            offset=offset).reshape(shape)
        if model.params[name].value.shape != arr.shape:
            raise CheckpointCorrupt(
                f"{path}: {name!r} has shape {arr.shape}, model expects "
                f"{model.params[name].value.shape}")
        model.params[name].value = arr.astype(np.float64).copy()
    return model, header


def check_manifest(header: dict, manifest_hash: str) -> None:
    if header.get("manifest_hash") != manifest_hash:
        raise ManifestMismatch(header.get("manifest_hash", ""), manifest_hash)
