"""NKFW weight files.

Layout (little-endian)::

    b"NKFW" | u32 version (=1) | u32 record count
    per record:
        u16 name length | name (UTF-8) | u8 ndim | u32 dims[ndim]
        float32 pairs (real, imag), row-major

Real tensors (PReLU slopes) are stored with zero imaginary parts. Each file
``w.nkfw`` has a text manifest ``w.nkfw.manifest`` with one
``name shape sha256`` line per record and a final ``file sha256`` line.
"""

import hashlib
import struct

import numpy as np

from .errors import ConfigError
from .nkf import ModelWeights, NkfConfig, param_shapes

MAGIC = b"NKFW"
VERSION = 1


def _record_payload(arr):
    arr = np.asarray(arr)
    inter = np.empty(arr.shape + (2,), dtype="<f4")
    inter[..., 0] = arr.real
    inter[..., 1] = arr.imag if np.iscomplexobj(arr) else 0.0
    return inter.tobytes(order="C")


def encode(weights):
    parts = [MAGIC, struct.pack("<II", VERSION, len(weights))]
    for name in sorted(weights):
        arr = weights[name]
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(_record_payload(arr))
    return b"".join(parts)


def decode(data):
    """Parse NKFW bytes into ``{name: complex64 ndarray}``."""
    try:
        return _decode(data)
    except (struct.error, ValueError, UnicodeDecodeError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"truncated or corrupt NKFW data: {exc}") from exc


def _decode(data):
    if data[:4] != MAGIC:
        raise ConfigError("not an NKFW file (bad magic)")
    version, count = struct.unpack_from("<II", data, 4)
    if version != VERSION:
        raise ConfigError(f"unsupported NKFW version {version}")
    pos = 12
    out = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", data, pos)
        pos += 2
        name = data[pos:pos + nlen].decode("utf-8")
        pos += nlen
        (ndim,) = struct.unpack_from("<B", data, pos)
        pos += 1
        dims = struct.unpack_from(f"<{ndim}I", data, pos)
        pos += 4 * ndim
        size = int(np.prod(dims, dtype=np.int64)) if ndim else 1
        flat = np.frombuffer(data, dtype="<f4", count=2 * size, offset=pos)
        pos += 8 * size
        out[name] = (flat[0::2] + 1j * flat[1::2]).astype(np.complex64).reshape(dims)
    if pos != len(data):
        raise ConfigError(f"trailing {len(data) - pos} bytes in NKFW file")
    return out


def manifest_lines(weights, blob):
    lines = []
    for name in sorted(weights):
        arr = weights[name]
        shape = "x".join(str(d) for d in arr.shape)
        digest = hashlib.sha256(_record_payload(arr)).hexdigest()
        lines.append(f"{name} {shape} {digest}")
    lines.append(f"file {hashlib.sha256(blob).hexdigest()}")
    return lines


def save_weights(path, weights):
    blob = encode(weights)
    with open(path, "wb") as f:
        f.write(blob)
    with open(f"{path}.manifest", "w") as f:
        f.write("\n".join(manifest_lines(weights, blob)) + "\n")


def verify_manifest(path):
    """True when the file's and every record's checksum match the manifest."""
    with open(path, "rb") as f:
        blob = f.read()
    with open(f"{path}.manifest") as f:
        expected = [line.strip() for line in f if line.strip()]
    tensors = decode(blob)
    return manifest_lines(tensors, blob) == expected


def load_weights(path, config=None):
    """Load an NKFW file as :class:`ModelWeights` in double precision.

    The tap count is inferred from the output layer when ``config`` is None.
    """
    with open(path, "rb") as f:
        tensors = decode(f.read())
    if config is None:
        if "fc3.W" not in tensors:
            raise ConfigError(f"{path}: missing fc3.W, cannot infer taps")
        config = NkfConfig(taps=tensors["fc3.W"].shape[0])
    shapes = param_shapes(config)
    cast = {}
    for name, arr in tensors.items():
        cplx = shapes.get(name, (None, True))[1]
        cast[name] = arr.astype(np.complex128) if cplx else arr.real.astype(np.float64)
    return ModelWeights(config, cast)
