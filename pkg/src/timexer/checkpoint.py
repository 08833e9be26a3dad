"""Single-file binary container for named arrays.

Layout::

    TXER1\\n
    config <nbytes>\\n
    <nbytes of key=value text>
    arrays <count>\\n
    <name> <dtype> <d1,d2,...>\\n      (one line per array, canonical order)
    data\\n
    <little-endian buffers, concatenated in manifest order>

Model checkpoints store float32 (``f4``); arrays that are float64 are stored
as ``f8`` so a save/load round trip is always bit-exact. The same container
holds exported attention tensors.
"""

import io

import numpy as np

from .errors import DataError
from .model import TimeXerConfig, param_shapes, parse_key_values

MAGIC = b"TXER1\n"
_DTYPES = {"f4": np.dtype("<f4"), "f8": np.dtype("<f8")}


def write_arrays(path, arrays, header):
    """Write ``arrays`` (name -> ndarray, in order) with a key-value ``header`` dict."""
    text = "".join(f"{k}={v}\n" for k, v in header.items()).encode("utf-8")
    out = io.BytesIO()
    out.write(MAGIC)
    out.write(f"config {len(text)}\n".encode())
    out.write(text)
    out.write(f"arrays {len(arrays)}\n".encode())
    bufs = []
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        code = "f4" if arr.dtype == np.float32 else "f8"
        if " " in name or "\n" in name:
            raise ValueError(f"array name {name!r} may not contain whitespace")
        shape = ",".join(str(s) for s in arr.shape)
        out.write(f"{name} {code} {shape}\n".encode())
        bufs.append(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())
    out.write(b"data\n")
    for buf in bufs:
        out.write(buf)
    with open(path, "wb") as fh:
        fh.write(out.getvalue())


def read_arrays(path):
    """Inverse of :func:`write_arrays`; returns ``(arrays, header)``."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if not blob.startswith(MAGIC):
        raise DataError(f"{path}: not a TXER1 file")
    stream = io.BytesIO(blob[len(MAGIC):])

    def line():
        return stream.readline().decode("utf-8").rstrip("\n")

    tag, size = line().split(" ")
    if tag != "config":
        raise DataError(f"{path}: malformed header")
    header = parse_key_values(stream.read(int(size)).decode("utf-8"))
    tag, count = line().split(" ")
    if tag != "arrays":
        raise DataError(f"{path}: malformed manifest")
    manifest = []
    for _ in range(int(count)):
        name, code, shape = line().split(" ")
        dims = tuple(int(s) for s in shape.split(",")) if shape else ()
        manifest.append((name, _DTYPES[code], dims))
    if line() != "data":
        raise DataError(f"{path}: missing data section")
    arrays = {}
    for name, dtype, dims in manifest:
        nbytes = dtype.itemsize * int(np.prod(dims))
        raw = stream.read(nbytes)
        if len(raw) != nbytes:
            raise DataError(f"{path}: truncated buffer for {name}")
        arrays[name] = np.frombuffer(raw, dtype=dtype).reshape(dims).astype(dtype.newbyteorder("="))
    return arrays, header


def save_checkpoint(path, params, config):
    """Save parameters in canonical order with the config as the header."""
    order = [name for name, _ in param_shapes(config)]
    missing = set(order) - set(params)
    if missing:
        raise DataError(f"parameters missing from checkpoint: {sorted(missing)}")
    write_arrays(path, {name: params[name] for name in order}, config.to_dict())


def load_checkpoint(path):
    """Returns ``(params, config)``."""
    arrays, header = read_arrays(path)
    config = TimeXerConfig.from_dict(header)
    expected = param_shapes(config)
    if [n for n, _ in expected] != list(arrays):
        raise DataError(f"{path}: parameter manifest does not match its config")
    for name, shape in expected:
        if arrays[name].shape != tuple(shape):
            raise DataError(f"{path}: {name} has shape {arrays[name].shape}, expected {shape}")
    return arrays, config
