"""Binary model container.

Layout (all integers little-endian)::

    8 bytes   magic  b"ARTUNET\\0"
    uint16    format version (currently 1)
    uint32    length of the UTF-8 JSON config block, then the block
    uint32    number of arrays
    per array:
        uint16  name length, then the UTF-8 name
        uint64  payload length, then an NPY v1.0 payload
"""

import io
import json
import struct

import numpy as np

from artifact.errors import ArtifactIOError, FormatError
from artifact.neural.unet import UNetConfig, UNetModel

MAGIC = b"ARTUNET\0"
VERSION = 1


def model_to_bytes(model):
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<H", VERSION))
    cfg = json.dumps(model.config.to_dict(), sort_keys=True).encode()
    buf.write(struct.pack("<I", len(cfg)))
    buf.write(cfg)
    buf.write(struct.pack("<I", len(model.params)))
    for name, arr in model.params.items():
        raw = name.encode()
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        payload = io.BytesIO()
        np.lib.format.write_array(payload, np.ascontiguousarray(arr), version=(1, 0),
                                  allow_pickle=False)
        data = payload.getvalue()
        buf.write(struct.pack("<Q", len(data)))
        buf.write(data)
    return buf.getvalue()


def model_from_bytes(data):
    view = io.BytesIO(data)

    def take(n):
        chunk = view.read(n)
        if len(chunk) != n:
            raise FormatError("model file is truncated")
        return chunk

    if take(len(MAGIC)) != MAGIC:
        raise FormatError("not a model file (bad magic)")
    (version,) = struct.unpack("<H", take(2))
    if version != VERSION:
        raise FormatError(f"unsupported model format version {version}")
    (n,) = struct.unpack("<I", take(4))
    config = UNetConfig(**json.loads(take(n)))
    (count,) = struct.unpack("<I", take(4))
    params = {}
    for _ in range(count):
        (n,) = struct.unpack("<H", take(2))
        name = take(n).decode()
        (n,) = struct.unpack("<Q", take(8))
        params[name] = np.lib.format.read_array(io.BytesIO(take(n)), allow_pickle=False)
    return UNetModel(config, params)


def save_model(model, path):
    try:
        with open(path, "wb") as fh:
            fh.write(model_to_bytes(model))
    except OSError as exc:
        raise ArtifactIOError(f"cannot write model {path}: {exc}") from exc


def load_model(path):
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except OSError as exc:
        raise ArtifactIOError(f"cannot read model {path}: {exc}") from exc
    return model_from_bytes(data)
