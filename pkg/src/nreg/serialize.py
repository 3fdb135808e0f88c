"""Versioned binary container for parameter matrices.

Layout: magic bytes ``NREG1``, then one record per array until EOF.  Each
record is

    u32 name length | name utf-8 | u32 rank | u32 per dim | float32 LE values

All integers little-endian.  Payloads are always float32; float64 arrays
are narrowed on save (the training default is float32, which round-trips
bit-exactly).

A model file is the same container whose first record is named
``__meta__`` and carries a JSON document (config and vocabularies) encoded
one byte per float value.
"""

import json
import struct

import numpy as np

from .errors import ContractError

MAGIC = b"NREG1"
META_RECORD = "__meta__"


def _write_record(fh, name, values):
    encoded = name.encode("utf-8")
    arr = np.ascontiguousarray(values, dtype="<f4")
    fh.write(struct.pack("<I", len(encoded)))
    fh.write(encoded)
    fh.write(struct.pack("<I", arr.ndim))
    fh.write(struct.pack("<%dI" % arr.ndim, *arr.shape))
    fh.write(arr.tobytes())


def _read_exact(fh, n):
    data = fh.read(n)
    if len(data) != n:
        raise ContractError("truncated parameter container")
    return data


def _read_record(fh):
    head = fh.read(4)
    if not head:
        return None
    if len(head) != 4:
        raise ContractError("truncated parameter container")
    (name_len,) = struct.unpack("<I", head)
    name = _read_exact(fh, name_len).decode("utf-8")
    (rank,) = struct.unpack("<I", _read_exact(fh, 4))
    dims = struct.unpack("<%dI" % rank, _read_exact(fh, 4 * rank)) if rank else ()
    count = int(np.prod(dims)) if dims else 1
    payload = _read_exact(fh, 4 * count)
    values = np.frombuffer(payload, dtype="<f4").reshape(dims).copy()
    return name, values


def save_params(path, params):
    """Write named arrays (or Tensors) to ``path`` in container format."""
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        for name, value in params.items():
            if name == META_RECORD:
                raise ContractError("parameter name %r is reserved" % META_RECORD)
            values = getattr(value, "values", value)
            _write_record(fh, name, values)


def load_params(path):
    """Read a container back into an ordered name -> float32 array dict."""
    meta, params = _load(path)
    if meta is not None:
        raise ContractError("file carries a model header; use load_model_file")
    return params


def save_model_file(path, meta, params):
    """Container plus a leading ``__meta__`` record holding JSON metadata."""
    blob = json.dumps(meta, ensure_ascii=False, sort_keys=True).encode("utf-8")
    byte_values = np.frombuffer(blob, dtype=np.uint8).astype("<f4")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        _write_record(fh, META_RECORD, byte_values)
        for name, value in params.items():
            values = getattr(value, "values", value)
            _write_record(fh, name, values)


def load_model_file(path):
    meta, params = _load(path)
    if meta is None:
        raise ContractError("file has no model header record")
    return meta, params


def _load(path):
    params = {}
    meta = None
    with open(path, "rb") as fh:
        if fh.read(len(MAGIC)) != MAGIC:
            raise ContractError("bad magic bytes; not a parameter container")
        first = True
        while True:
            record = _read_record(fh)
            if record is None:
                break
            name, values = record
            if first and name == META_RECORD:
                blob = values.astype(np.uint8).tobytes()
                meta = json.loads(blob.decode("utf-8"))
            else:
                params[name] = values
            first = False
    return meta, params
