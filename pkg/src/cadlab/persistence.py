"""File formats: binary checkpoints, mask and attribution-map JSON, reports.

Checkpoint layout::

    b"CADCKPT1" | u32 little-endian header length | UTF-8 JSON header | payload

The payload is every parameter array as little-endian float64, in manifest
order. The header records the architecture, the noise schedule, the manifest
(name and shape per array) and the sha256 of the payload.
"""
from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from . import __version__
from .attribution import AttributionMap
from .autodiff import ComponentId, ParameterStore
from .diffusion import Architecture, DenoiserModel, build_schedule
from .editing import AblationMask, MaskEntry
from .errors import BadMagicError, CheckpointError, ConfigError, HashMismatchError, TruncatedPayloadError

MAGIC = b"CADCKPT1"
FORMAT_VERSION = 1


def _plain(obj):
    """Recursively convert numpy scalars/arrays and tuples into JSON-ready values."""
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    return obj


def dumps(obj) -> str:
    return json.dumps(_plain(obj), sort_keys=True, indent=2, ensure_ascii=False, allow_nan=False) + "\n"


def write_json(obj, path) -> None:
    Path(path).write_text(dumps(obj), encoding="utf-8")


def read_json(path):
    return json.loads(Path(path).read_text(encoding="utf-8"))


def write_csv(path, header, rows, comment: str | None = None) -> None:
    """Comma-separated with a mandatory header; floats written with ``repr``."""
    lines = []
    if comment:
        lines.extend(f"# {line}" for line in comment.splitlines())
    lines.append(",".join(header))
    for row in rows:
        lines.append(",".join(repr(float(v)) if isinstance(v, (float, np.floating)) else str(v) for v in row))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


# -- checkpoints -------------------------------------------------------------


def _payload(params: ParameterStore) -> bytes:
    return b"".join(np.ascontiguousarray(v, dtype="<f8").tobytes() for v in params.values())


def checkpoint_bytes(model: DenoiserModel) -> bytes:
    payload = _payload(model.params)
    arch = model.arch
    header = {
        "version": FORMAT_VERSION,
        "tool_version": __version__,
        "arch": {"hidden": arch.hidden, "emb": arch.emb, "n_concepts": arch.n_concepts, "T": arch.T},
        "schedule": model.schedule.to_dict() if model.schedule is not None else None,
        "manifest": [{"name": f"{layer}.{kind}", "shape": list(np.shape(v))} for (layer, kind), v in model.params.items()],
        "sha256": hashlib.sha256(payload).hexdigest(),
    }
    raw = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return MAGIC + struct.pack("<I", len(raw)) + raw + payload


def save_checkpoint(model: DenoiserModel, path) -> None:
    Path(path).write_bytes(checkpoint_bytes(model))


def parse_checkpoint(blob: bytes) -> DenoiserModel:
    if blob[: len(MAGIC)] != MAGIC:
        raise BadMagicError("not a checkpoint file (bad magic)")
    pos = len(MAGIC)
    if len(blob) < pos + 4:
        raise TruncatedPayloadError("checkpoint ends inside the header length")
    (n,) = struct.unpack("<I", blob[pos : pos + 4])
    pos += 4
    if len(blob) < pos + n:
        raise TruncatedPayloadError("checkpoint ends inside the header")
    try:
        header = json.loads(blob[pos : pos + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"unreadable checkpoint header: {exc}") from exc
    if header.get("version") != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {header.get('version')}")
    payload = blob[pos + n :]
    sizes = [int(np.prod(m["shape"])) for m in header["manifest"]]
    expected = 8 * sum(sizes)
    if len(payload) < expected:
        raise TruncatedPayloadError(f"payload has {len(payload)} bytes, manifest needs {expected}")
    if len(payload) > expected:
        raise CheckpointError(f"payload has {len(payload) - expected} trailing bytes")
    if hashlib.sha256(payload).hexdigest() != header["sha256"]:
        raise HashMismatchError("payload hash does not match the header")
    arrays = {}
    offset = 0
    for entry, size in zip(header["manifest"], sizes):
        layer, kind = entry["name"].rsplit(".", 1)
        flat = np.frombuffer(payload, dtype="<f8", count=size, offset=offset).astype(np.float64)
        arrays[(layer, kind)] = flat.reshape(entry["shape"])
        offset += 8 * size
    arch = Architecture(**header["arch"])
    if list(arrays) != list(arch.shapes()):
        raise CheckpointError("manifest does not match the architecture")
    sched = header["schedule"]
    schedule = build_schedule(sched["T"], sched["beta_min"], sched["beta_max"]) if sched else None
    return DenoiserModel(arch, ParameterStore(arrays), schedule)


def load_checkpoint(path) -> DenoiserModel:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    return parse_checkpoint(blob)


# -- masks and maps ----------------------------------------------------------


def mask_to_dict(mask: AblationMask) -> dict:
    return {
        "version": FORMAT_VERSION,
        "tool_version": __version__,
        "fingerprint": mask.fingerprint,
        "objective": mask.objective,
        "entries": [[e.cid.layer, e.cid.kind, e.cid.row, e.cid.col, e.mode, e.factor] for e in mask.entries],
    }


def mask_from_dict(d: dict) -> AblationMask:
    try:
        entries = [MaskEntry(ComponentId(layer, kind, int(r), int(c)), mode, float(f))
                   for layer, kind, r, c, mode, f in d["entries"]]
        return AblationMask(entries, d["fingerprint"], d.get("objective"))
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"malformed mask file: {exc}") from exc


def save_mask(mask: AblationMask, path) -> None:
    write_json(mask_to_dict(mask), path)


def load_mask(path) -> AblationMask:
    return mask_from_dict(read_json(path))


def map_to_dict(amap: AttributionMap) -> dict:
    return {
        "version": FORMAT_VERSION,
        "tool_version": __version__,
        "fingerprint": amap.fingerprint,
        "objective": amap.objective,
        "mc": amap.mc,
        "value": amap.value,
        "scope": [{"name": f"{layer}.{kind}", "shape": list(amap.shapes[(layer, kind)])} for layer, kind in amap.scope_keys],
        "scores": amap.scores,
    }


def map_from_dict(d: dict) -> AttributionMap:
    keys = tuple(tuple(s["name"].rsplit(".", 1)) for s in d["scope"])
    shapes = {k: tuple(s["shape"]) for k, s in zip(keys, d["scope"])}
    scores = np.asarray(d["scores"], dtype=np.float64)
    if scores.size != sum(int(np.prod(s)) for s in shapes.values()):
        raise ConfigError("attribution map size does not match its scope")
    return AttributionMap(scores, keys, shapes, d["objective"], d["mc"], d["fingerprint"], d["value"])


def save_map(amap: AttributionMap, path) -> None:
    write_json(map_to_dict(amap), path)


def load_map(path) -> AttributionMap:
    return map_from_dict(read_json(path))
