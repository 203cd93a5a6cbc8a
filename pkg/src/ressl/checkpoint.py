"""Checkpoint archives: a zip holding ``metadata.json`` plus named blobs.

Blobs: ``student.pt``, ``teacher.pt``, ``optimizer.pt`` and ``rng.pt`` are
torch-serialized state dicts; ``queue.bin`` holds the queue rows as
row-major little-endian float32 (cursor and fill level live in the metadata).
"""

from __future__ import annotations

import io
import json
import os
import zipfile
from pathlib import Path

import numpy as np
import torch

from .exceptions import IngestError

FORMAT_VERSION = 1


def _torch_bytes(obj) -> bytes:
    buf = io.BytesIO()
    torch.save(obj, buf)
    return buf.getvalue()


def save_checkpoint(path, *, metadata: dict, student: dict, teacher: dict, optimizer: dict | None = None,
                    queue: dict | None = None, rng: dict | None = None) -> Path:
    """Write atomically (temp file + rename) so an interrupted save never clobbers the last good one."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    meta = dict(metadata, format_version=FORMAT_VERSION)
    if queue is not None:
        buf = queue["buffer"].detach().cpu().to(torch.float32).numpy()
        meta["queue"] = {"capacity": int(buf.shape[0]), "dim": int(buf.shape[1]),
                         "cursor": int(queue["cursor"]), "filled": int(queue["filled"])}
    tmp = path.with_suffix(path.suffix + ".tmp")
    with zipfile.ZipFile(tmp, "w", compression=zipfile.ZIP_STORED) as zf:
        zf.writestr("metadata.json", json.dumps(meta, indent=2, sort_keys=True, default=str))
        zf.writestr("student.pt", _torch_bytes(student))
        zf.writestr("teacher.pt", _torch_bytes(teacher))
        if optimizer is not None:
            zf.writestr("optimizer.pt", _torch_bytes(optimizer))
        if rng is not None:
            zf.writestr("rng.pt", _torch_bytes(rng))
        if queue is not None:
            zf.writestr("queue.bin", np.ascontiguousarray(buf, dtype="<f4").tobytes())
    os.replace(tmp, path)
    return path


class Checkpoint:
    """Lazy reader over a checkpoint archive."""

    def __init__(self, path):
        self.path = Path(path)
        if not self.path.exists():
            raise IngestError("checkpoint not found", self.path)
        try:
            with zipfile.ZipFile(self.path) as zf:
                self.metadata = json.loads(zf.read("metadata.json"))
                self._names = set(zf.namelist())
        except (zipfile.BadZipFile, KeyError, json.JSONDecodeError) as exc:
            raise IngestError(f"unreadable checkpoint ({exc})", self.path) from exc

    def _blob(self, name: str):
        if name not in self._names:
            return None
        with zipfile.ZipFile(self.path) as zf:
            return torch.load(io.BytesIO(zf.read(name)), map_location="cpu", weights_only=False)

    def student(self) -> dict:
        return self._blob("student.pt")

    def teacher(self) -> dict:
        return self._blob("teacher.pt")

    def optimizer(self) -> dict | None:
        return self._blob("optimizer.pt")

    def rng(self) -> dict | None:
        return self._blob("rng.pt")

    def queue(self) -> dict | None:
        info = self.metadata.get("queue")
        if info is None:
            return None
        with zipfile.ZipFile(self.path) as zf:
            raw = zf.read("queue.bin")
        rows = np.frombuffer(raw, dtype="<f4").reshape(info["capacity"], info["dim"])
        return {"buffer": torch.from_numpy(rows.copy()), "cursor": info["cursor"], "filled": info["filled"]}
