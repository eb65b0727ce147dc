"""On-disk formats for query logs, traces and simulator labels.

A query log is a directory holding ``manifest.json`` (dims, dtype "u8",
count, timestamps) plus one little-endian raw u8 tensor file per query,
row-major (H, W, C), named ``q%06d.u8``. A trace directory uses the same
layout plus ``trace.json`` with the member indices into the originating log
and the adversarial example's index. Simulated logs add ``labels.json``.

All writes go through a temp file + rename so partially written artifacts
are never observed.
"""

from __future__ import annotations

import json
import os
import tempfile
from pathlib import Path

import numpy as np

from .errors import InvalidInputError
from .extraction import QueryLog, Trace
from .signal import Image

MANIFEST = "manifest.json"
TRACE_META = "trace.json"
LABELS = "labels.json"


def atomic_write_bytes(path: Path, payload: bytes):
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_json(path: Path, obj):
    atomic_write_bytes(Path(path), json.dumps(obj, indent=1).encode("utf-8"))


def _query_file(directory: Path, index: int) -> Path:
    return directory / f"q{index:06d}.u8"


def save_query_log(log: QueryLog, directory) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    if not log.images:
        raise InvalidInputError("refusing to store an empty query log")
    dims = log.images[0].dims
    for i, img in enumerate(log.images):
        atomic_write_bytes(_query_file(directory, i), img.to_u8().tobytes())
    atomic_write_json(directory / MANIFEST, {
        "dims": list(dims),
        "dtype": "u8",
        "count": len(log),
        "timestamps": list(log.timestamps),
    })
    return directory


def load_query_log(directory) -> QueryLog:
    directory = Path(directory)
    manifest_path = directory / MANIFEST
    if not manifest_path.exists():
        raise InvalidInputError(f"{directory} has no {MANIFEST}")
    with open(manifest_path, encoding="utf-8") as fh:
        manifest = json.load(fh)
    if manifest.get("dtype") != "u8":
        raise InvalidInputError(f"unsupported dtype {manifest.get('dtype')!r}")
    dims = tuple(manifest["dims"])
    images = []
    for i in range(manifest["count"]):
        raw = np.fromfile(_query_file(directory, i), dtype=np.uint8)
        if raw.size != int(np.prod(dims)):
            raise InvalidInputError(f"query {i} has {raw.size} bytes, expected {np.prod(dims)}")
        images.append(Image.from_u8(raw.reshape(dims)))
    return QueryLog(timestamps=list(manifest["timestamps"]), images=images)


def load_image(path, dims) -> Image:
    raw = np.fromfile(path, dtype=np.uint8)
    if raw.size != int(np.prod(dims)):
        raise InvalidInputError(f"{path} has {raw.size} bytes, expected {np.prod(dims)}")
    return Image.from_u8(raw.reshape(tuple(dims)))


def save_image(image: Image, path):
    atomic_write_bytes(Path(path), image.to_u8().tobytes())


def save_trace(trace: Trace, directory) -> Path:
    directory = Path(directory)
    log = QueryLog(timestamps=list(range(len(trace))), images=list(trace.queries))
    save_query_log(log, directory)
    atomic_write_json(directory / TRACE_META, {
        "members": list(trace.source_indices or []),
        "adv_index": trace.adv_index,
    })
    return directory


def load_trace(directory) -> Trace:
    directory = Path(directory)
    log = load_query_log(directory)
    meta_path = directory / TRACE_META
    members = None
    adv_index = len(log) - 1
    if meta_path.exists():
        with open(meta_path, encoding="utf-8") as fh:
            meta = json.load(fh)
        members = list(meta.get("members", [])) or None
        adv_index = int(meta.get("adv_index", adv_index))
    return Trace(queries=list(log.images), adv_index=adv_index, source_indices=members)


def save_labels(directory, payload: dict):
    atomic_write_json(Path(directory) / LABELS, payload)


def load_labels(directory) -> dict | None:
    path = Path(directory) / LABELS
    if not path.exists():
        return None
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)
