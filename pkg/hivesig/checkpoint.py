"""
HSM1 model checkpoints.

Layout (all little-endian):

    b"HSM1" | u32 version | u64 header_len | header (UTF-8 JSON)
    | tensor payloads | u32 CRC32 of everything before it

The header holds the network spec, a tensor table (name, group, dtype, shape,
offset, nbytes, quantization params) and free-form metadata. Payload offsets
are relative to the first payload byte.
"""

import json
import logging
import struct
import zlib
from pathlib import Path
from typing import Any, Dict, List, Tuple

import numpy as np
from pydantic import ValidationError

from .errors import ChecksumMismatch, IoFailure, VersionMismatch
from .network import Model, NetworkSpec
from .quantization import QuantParams

logger = logging.getLogger(__name__)

MAGIC = b"HSM1"
VERSION = 1
_PREFIX = struct.Struct("<4sIQ")
_CRC = struct.Struct("<I")

GROUPS = ("param", "running", "quantized")


def _to_json(obj: Any) -> Any:
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, Path):
        return str(obj)
    raise TypeError(f"cannot serialize {type(obj).__name__} in checkpoint metadata")


def _entries(model: Model) -> List[Tuple[str, str, np.ndarray, Any]]:
    rows = []
    for name in sorted(model.params):
        rows.append(("param", name, model.params[name], None))
    for name in sorted(model.running):
        rows.append(("running", name, model.running[name], None))
    for name in sorted(model.quantized):
        q, qp = model.quantized[name]
        rows.append(("quantized", name, q, qp.to_dict()))
    return rows


def encode_model(model: Model) -> bytes:
    """Serialize a model to HSM1 bytes (deterministic for equal models)."""
    table, chunks, offset = [], [], 0
    for group, name, array, quant in _entries(model):
        le = np.ascontiguousarray(array, dtype=array.dtype.newbyteorder("<"))
        raw = le.tobytes()
        table.append(
            {
                "name": name,
                "group": group,
                "dtype": le.dtype.str,
                "shape": list(array.shape),
                "offset": offset,
                "nbytes": len(raw),
                "quant": quant,
            }
        )
        chunks.append(raw)
        offset += len(raw)

    header = {
        "spec": model.spec.model_dump(mode="json"),
        "tensors": table,
        "meta": model.meta,
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":"), default=_to_json).encode("utf-8")
    body = _PREFIX.pack(MAGIC, VERSION, len(header_bytes)) + header_bytes + b"".join(chunks)
    return body + _CRC.pack(zlib.crc32(body) & 0xFFFFFFFF)


def decode_model(blob: bytes, source: str = "<bytes>") -> Model:
    """Parse HSM1 bytes.

    Raises:
        VersionMismatch: Wrong magic or unsupported version.
        ChecksumMismatch: CRC32 trailer disagrees with the content.
        IoFailure: Structurally broken file.
    """
    if blob[:4] != MAGIC:
        raise VersionMismatch(f"{source}: not an HSM1 checkpoint")
    if len(blob) < _PREFIX.size + _CRC.size:
        raise IoFailure(f"{source}: truncated checkpoint")
    _, version, header_len = _PREFIX.unpack_from(blob, 0)
    if version != VERSION:
        raise VersionMismatch(f"{source}: checkpoint version {version}, expected {VERSION}")

    body, (stored_crc,) = blob[: -_CRC.size], _CRC.unpack(blob[-_CRC.size:])
    if zlib.crc32(body) & 0xFFFFFFFF != stored_crc:
        raise ChecksumMismatch(f"{source}: CRC32 mismatch")

    start = _PREFIX.size
    try:
        header = json.loads(body[start:start + header_len].decode("utf-8"))
        spec = NetworkSpec.model_validate(header["spec"])
        table = header["tensors"]
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, ValidationError) as exc:
        raise IoFailure(f"{source}: unreadable checkpoint header: {exc}") from exc

    payload = body[start + header_len:]
    groups: Dict[str, Dict[str, Any]] = {g: {} for g in GROUPS}
    for entry in table:
        end = entry["offset"] + entry["nbytes"]
        if end > len(payload) or entry["group"] not in groups:
            raise IoFailure(f"{source}: tensor {entry.get('name')} lies outside the payload")
        array = np.frombuffer(payload[entry["offset"]:end], dtype=np.dtype(entry["dtype"]))
        array = array.reshape(entry["shape"]).astype(array.dtype.newbyteorder("="))
        if entry["group"] == "quantized":
            groups["quantized"][entry["name"]] = (array, QuantParams.from_dict(entry["quant"]))
        else:
            groups[entry["group"]][entry["name"]] = array

    return Model(spec, groups["param"], groups["running"], groups["quantized"], header.get("meta") or {})


def save_model(model: Model, path: Path) -> None:
    path = Path(path)
    blob = encode_model(model)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(blob)
    except OSError as exc:
        raise IoFailure(f"cannot write checkpoint {path}: {exc}") from exc
    logger.debug("Saved %s (%d bytes)", path, len(blob))


def load_model(path: Path) -> Model:
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise IoFailure(f"cannot read checkpoint {path}: {exc}") from exc
    return decode_model(blob, str(path))
