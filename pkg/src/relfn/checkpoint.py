"""Checkpoint container.

Layout::

    u64 little-endian   manifest length in bytes
    manifest            UTF-8 JSON: format_version, config, parameters[{name, shape}]
    payload             float32 little-endian, parameters concatenated in manifest order
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np
import torch

from relfn.gcn import ModelConfig, SceneGraphModel

FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def checkpoint_bytes(model: SceneGraphModel, extra: dict | None = None) -> bytes:
    records, chunks = [], []
    for name, prm in model.state_dict().items():
        arr = prm.detach().cpu().numpy().astype("<f4", copy=False)
        records.append({"name": name, "shape": list(arr.shape)})
        chunks.append(np.ascontiguousarray(arr).tobytes())
    manifest = {
        "format_version": FORMAT_VERSION,
        "config": model.config.to_dict(),
        "parameters": records,
    }
    if extra:
        manifest["extra"] = extra
    head = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return struct.pack("<Q", len(head)) + head + b"".join(chunks)


def save_checkpoint(model: SceneGraphModel, path: str | Path, extra: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(checkpoint_bytes(model, extra))
    return path


def read_manifest(blob: bytes) -> tuple[dict, int]:
    if len(blob) < 8:
        raise CheckpointError("truncated checkpoint")
    (n,) = struct.unpack("<Q", blob[:8])
    try:
        manifest = json.loads(blob[8:8 + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"bad manifest: {exc}") from None
    if manifest.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"unsupported format_version {manifest.get('format_version')!r}")
    return manifest, 8 + n


def load_checkpoint(path: str | Path, dtype: torch.dtype = torch.float32) -> tuple[SceneGraphModel, dict]:
    """Rebuild the model stored at ``path``; returns ``(model, manifest)``."""
    blob = Path(path).read_bytes()
    manifest, offset = read_manifest(blob)
    model = SceneGraphModel(ModelConfig.from_dict(manifest["config"]))
    state = {}
    for rec in manifest["parameters"]:
        count = int(np.prod(rec["shape"], dtype=np.int64))
        end = offset + 4 * count
        if end > len(blob):
            raise CheckpointError(f"payload truncated at {rec['name']}")
        arr = np.frombuffer(blob, dtype="<f4", count=count, offset=offset).reshape(rec["shape"])
        state[rec["name"]] = torch.from_numpy(arr.copy())
        offset = end
    if offset != len(blob):
        raise CheckpointError("trailing bytes after payload")
    try:
        model.load_state_dict(state)
    except RuntimeError as exc:
        raise CheckpointError(str(exc)) from None
    return model.to(dtype), manifest


def model_digest(model: SceneGraphModel) -> str:
    """SHA-256 over the serialized parameters; used to verify models stay frozen."""
    h = hashlib.sha256()
    for name, prm in model.state_dict().items():
        h.update(name.encode())
        h.update(prm.detach().cpu().numpy().tobytes())
    return h.hexdigest()
