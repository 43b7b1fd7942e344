"""Binary container used for datasets and model checkpoints.

Layout: 8-byte magic ``CCLDATA1``, a little-endian u32 byte length, a UTF-8
JSON header, then the raw array payloads back to back. The header carries
at least ``version``, ``dtype``, and ``arrays`` — a list of
``{name, shape, offset}`` with offsets measured in bytes from the start of
the payload region. Callers supply the remaining header fields (n/d/C for
datasets; kind/layer_dims/C/step for checkpoints).

The header's ``dtype`` field names the payload element type for data
arrays; the integer label arrays and the split tags have fixed types
keyed by name (see ``_NAME_DTYPES``). All payloads are little-endian,
row-major.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import FormatError

MAGIC = b"CCLDATA1"
VERSION = 1

# dtype tags -> numpy little-endian types
_DTYPES = {"f32": "<f4", "f64": "<f8", "i32": "<i4", "u8": "|u1"}

# arrays whose element type is fixed by convention regardless of the
# header-level dtype (which describes the real-valued payload)
_NAME_DTYPES = {"clean_labels": "i32", "noisy_labels": "i32", "split": "u8"}


def _tag_for(name: str, default_tag: str) -> str:
    return _NAME_DTYPES.get(name, default_tag)


def write_container(path, header_extra: dict, arrays: list[tuple[str, np.ndarray]]) -> None:
    """Write named arrays as (name, array) pairs; header_extra must include
    a 'dtype' tag for the real-valued arrays."""
    default_tag = header_extra["dtype"]
    entries = []
    payload = bytearray()
    for name, arr in arrays:
        tag = _tag_for(name, default_tag)
        data = np.ascontiguousarray(arr, dtype=_DTYPES[tag])
        entries.append({"name": name, "shape": list(arr.shape), "offset": len(payload)})
        payload.extend(data.tobytes())
    header = {"version": VERSION, **header_extra, "arrays": entries}
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(bytes(payload))


def read_container(path) -> tuple[dict, dict[str, np.ndarray]]:
    """Read a container; returns (header, {name: array}).

    Raises FormatError on bad magic, unknown version, malformed header, or
    a payload whose size disagrees with the header.
    """
    raw = Path(path).read_bytes()
    if len(raw) < len(MAGIC) + 4:
        raise FormatError("file too short for container header")
    if raw[:len(MAGIC)] != MAGIC:
        raise FormatError("bad magic; not a container file")
    (hlen,) = struct.unpack_from("<I", raw, len(MAGIC))
    hstart = len(MAGIC) + 4
    if hstart + hlen > len(raw):
        raise FormatError("header length exceeds file size")
    try:
        header = json.loads(raw[hstart:hstart + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"malformed header: {exc}") from exc
    if header.get("version") != VERSION:
        raise FormatError(f"unknown container version {header.get('version')!r}")
    if not isinstance(header.get("arrays"), list):
        raise FormatError("header missing arrays list")
    if header.get("dtype") not in _DTYPES:
        raise FormatError(f"unknown dtype tag {header.get('dtype')!r}")

    payload = raw[hstart + hlen:]
    arrays: dict[str, np.ndarray] = {}
    payload_end = 0
    for entry in header["arrays"]:
        try:
            name, shape, offset = entry["name"], entry["shape"], entry["offset"]
        except (KeyError, TypeError) as exc:
            raise FormatError(f"malformed array entry: {entry!r}") from exc
        dt = np.dtype(_DTYPES[_tag_for(name, header["dtype"])])
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        nbytes = count * dt.itemsize
        if offset < 0 or offset + nbytes > len(payload):
            raise FormatError(
                f"array {name!r} extends past payload end "
                f"({offset}+{nbytes} > {len(payload)})")
        arrays[name] = np.frombuffer(
            payload, dtype=dt, count=count, offset=offset).reshape(shape).copy()
        payload_end = max(payload_end, offset + nbytes)
    if payload_end != len(payload):
        raise FormatError(
            f"payload size {len(payload)} disagrees with header ({payload_end})")
    return header, arrays
