"""Content-addressed artifact cache.

Keys are SHA-256 digests over a canonical JSON document holding the stage
name, the upstream artifact hashes, the stage config hash, the run mode and
the seed. Artifacts live at ``root/<stage>/<key>`` and are written through a
temporary file plus rename, so concurrent writers never expose partial data.
"""

from __future__ import annotations

import base64
import dataclasses
import hashlib
import json
import os
import tempfile
import threading
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Mapping

import numpy as np

from .dataset import EegTrial, StimulusImage, pack_eeg
from .pixmap import decode_ppm, encode_ppm

STAGES = ("decode", "reason", "t2i", "to3d", "render", "evaluate")


class CacheError(ValueError):
    pass


def sha256_hex(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def _plain(obj: Any) -> Any:
    if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        return {f.name: _plain(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, Mapping):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, Path):
        return str(obj)
    return obj


def canonical_json(obj: Any) -> bytes:
    """Sorted-key, whitespace-free UTF-8 JSON; NaN and infinities are rejected."""
    return json.dumps(_plain(obj), sort_keys=True, separators=(",", ":"), ensure_ascii=False,
                      allow_nan=False).encode("utf-8")


def config_hash(config: Any) -> str:
    return sha256_hex(canonical_json(config))


def cache_key(stage: str, input_hashes: Mapping[str, str], config_hash: str, *, mode: str, seed: int) -> str:
    """256-bit hex digest identifying one stage invocation."""
    if not stage:
        raise CacheError("stage name is required")
    if not config_hash:
        raise CacheError("config hash is required")
    for name, h in input_hashes.items():
        if not isinstance(h, str) or not h:
            raise CacheError(f"input hash {name!r} is missing")
    doc = {"stage": stage, "inputs": dict(input_hashes), "config": config_hash, "mode": mode, "seed": int(seed)}
    return sha256_hex(canonical_json(doc))


@dataclass(frozen=True)
class StageRecord:
    stage: str
    input_hash: str
    config_hash: str
    artifact_path: str
    provider_id: str
    timestamp: float
    status: str


class StageCache:
    """Filesystem cache with hit/miss counters and a record per memoized call; thread-safe."""

    def __init__(self, root: str | os.PathLike):
        self.root = Path(root)
        self._lock = threading.Lock()
        self.hits = 0
        self.misses = 0
        self.records: list[StageRecord] = []

    def path(self, stage: str, key: str) -> Path:
        return self.root / stage / key

    def get(self, stage: str, key: str) -> bytes | None:
        p = self.path(stage, key)
        try:
            data = p.read_bytes()
        except FileNotFoundError:
            with self._lock:
                self.misses += 1
            return None
        with self._lock:
            self.hits += 1
        return data

    def put(self, stage: str, key: str, data: bytes) -> Path:
        p = self.path(stage, key)
        p.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=p.parent, prefix=".tmp-")
        try:
            with os.fdopen(fd, "wb") as fh:
                fh.write(data)
            os.replace(tmp, p)
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise
        return p

    def memo(self, stage: str, key: str, compute: Callable[[], bytes], *, input_hash: str = "",
             config_hash: str = "", provider_id: str = "") -> bytes:
        data = self.get(stage, key)
        status = "hit"
        if data is None:
            data = compute()
            self.put(stage, key, data)
            status = "miss"
        record = StageRecord(stage, input_hash, config_hash, str(self.path(stage, key)), provider_id, time.time(),
                             status)
        with self._lock:
            self.records.append(record)
        return data


# -- artifact codecs -----------------------------------------------------------

def pack_image(image: StimulusImage) -> bytes:
    doc = {
        "image_id": image.image_id,
        "class_label": image.class_label,
        "provenance": image.provenance,
        "ppm": base64.b64encode(encode_ppm(image.pixels)).decode("ascii"),
    }
    return canonical_json(doc)


def unpack_image(data: bytes) -> StimulusImage:
    doc = json.loads(data)
    return StimulusImage(doc["image_id"], doc["class_label"], decode_ppm(base64.b64decode(doc["ppm"])),
                         doc.get("provenance"))


def image_digest(image: StimulusImage) -> str:
    """Hash of pixel content only; ids and provenance do not participate."""
    return sha256_hex(encode_ppm(image.pixels))


def trial_digest(trial: EegTrial) -> str:
    return sha256_hex(pack_eeg(trial.data))
