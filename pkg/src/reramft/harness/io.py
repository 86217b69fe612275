"""Model container and dataset readers.

RFSM container layout (all integers little-endian)::

    offset 0   4 bytes   magic b"RFSM"
    offset 4   u32       format version (1)
    offset 8   u32       JSON header length H
    offset 12  H bytes   UTF-8 JSON header
    offset 12+H          tensor blobs, concatenated in header order

Weights and biases are binary32 (``<f4``); prune masks are ``u8``. Each
header tensor entry carries its layer index, role, dtype, shape and byte
offset relative to the start of the blob section.
"""

from __future__ import annotations

import gzip
import json
import os
import struct
from pathlib import Path

import numpy as np

from ..nn import Dataset, Layer, Model

MAGIC = b"RFSM"
VERSION = 1
_DTYPES = {"f32": np.dtype("<f4"), "u8": np.dtype("u1")}


class FormatError(ValueError):
    def __init__(self, message, offset=None):
        where = f" (byte offset {offset})" if offset is not None else ""
        super().__init__(message + where)
        self.offset = offset


def _model_header(model, provenance=None):
    layers, tensors, offset = [], [], 0
    for i, layer in enumerate(model.layers):
        layers.append({"kind": layer.kind, "hyperparams": layer.hyperparams})
        for role, arr, dt in (("weights", layer.weights, "f32"), ("bias", layer.bias, "f32"),
                              ("mask", layer.mask, "u8")):
            if arr is None:
                continue
            nbytes = arr.size * _DTYPES[dt].itemsize
            tensors.append({"layer": i, "role": role, "dtype": dt, "shape": list(arr.shape),
                            "offset": offset, "nbytes": nbytes})
            offset += nbytes
    return {
        "format": "RFSM",
        "version": VERSION,
        "name": model.name,
        "input_shape": list(model.input_shape),
        "num_classes": model.num_classes,
        "layers": layers,
        "tensors": tensors,
        **({"provenance": provenance} if provenance is not None else {}),
    }


def model_to_bytes(model, provenance=None):
    header = _model_header(model, provenance)
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [MAGIC, struct.pack("<II", VERSION, len(hbytes)), hbytes]
    for t in header["tensors"]:
        layer = model.layers[t["layer"]]
        arr = getattr(layer, t["role"])
        parts.append(np.ascontiguousarray(arr, dtype=_DTYPES[t["dtype"]]).tobytes())
    return b"".join(parts)


def save_model(model, path, provenance=None):
    """Write ``model`` atomically; ``provenance`` is stored in the JSON header."""
    data = model_to_bytes(model, provenance)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


def model_from_bytes(buf):
    if len(buf) < 12:
        raise FormatError("file too short for RFSM preamble", len(buf))
    if buf[:4] != MAGIC:
        raise FormatError(f"bad magic {buf[:4]!r}, expected {MAGIC!r}", 0)
    version, hlen = struct.unpack_from("<II", buf, 4)
    if version != VERSION:
        raise FormatError(f"unsupported RFSM version {version}", 4)
    if 12 + hlen > len(buf):
        raise FormatError(f"header length {hlen} runs past end of file ({len(buf)} bytes)", 8)
    try:
        header = json.loads(buf[12:12 + hlen].decode("utf-8"))
        layers_meta = header["layers"]
        tensors = header["tensors"]
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError) as exc:
        raise FormatError(f"malformed JSON header: {exc}", 12) from None
    base = 12 + hlen
    arrays = {}
    end = base
    for t in tensors:
        try:
            dt = _DTYPES[t["dtype"]]
            shape = tuple(int(s) for s in t["shape"])
            start = base + int(t["offset"])
            nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
            layer_idx, role = int(t["layer"]), t["role"]
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"malformed tensor entry {t!r}: {exc}", 12) from None
        if nbytes != int(t.get("nbytes", nbytes)):
            raise FormatError(f"tensor {layer_idx}/{role}: nbytes disagrees with shape", 12)
        if start + nbytes > len(buf):
            raise FormatError(f"tensor {layer_idx}/{role} truncated: needs bytes up to {start + nbytes}, "
                              f"file has {len(buf)}", len(buf))
        arrays[(layer_idx, role)] = np.frombuffer(buf, dt, count=nbytes // dt.itemsize,
                                                  offset=start).reshape(shape)
        end = max(end, start + nbytes)
    if end != len(buf):
        raise FormatError(f"{len(buf) - end} trailing bytes after last tensor", end)
    layers = []
    for i, meta in enumerate(layers_meta):
        w = arrays.get((i, "weights"))
        b = arrays.get((i, "bias"))
        m = arrays.get((i, "mask"))
        try:
            layers.append(Layer(meta["kind"],
                                None if w is None else w.astype(np.float32),
                                None if b is None else b.astype(np.float32),
                                None if m is None else m.astype(np.uint8),
                                dict(meta.get("hyperparams", {}))))
        except (KeyError, ValueError) as exc:
            raise FormatError(f"layer {i}: {exc}", 12) from None
    return Model(layers, header.get("name", "model"), tuple(header["input_shape"]), header["num_classes"])


def load_model(path):
    return model_from_bytes(Path(path).read_bytes())


# --- IDX ---------------------------------------------------------------------

_IDX_TYPES = {0x08: ">u1", 0x09: ">i1", 0x0B: ">i2", 0x0C: ">i4", 0x0D: ">f4", 0x0E: ">f8"}


def _read_maybe_gzip(path):
    raw = Path(path).read_bytes()
    if raw[:2] == b"\x1f\x8b":
        return gzip.decompress(raw)
    return raw


def parse_idx(buf):
    """Decode an IDX buffer (big-endian header, e.g. MNIST) into an array."""
    if len(buf) < 4:
        raise FormatError("IDX file shorter than its magic number", len(buf))
    if buf[0] != 0 or buf[1] != 0:
        raise FormatError("IDX magic must start with two zero bytes", 0)
    code, ndim = buf[2], buf[3]
    if code not in _IDX_TYPES:
        raise FormatError(f"unknown IDX element type 0x{code:02x}", 2)
    if len(buf) < 4 + 4 * ndim:
        raise FormatError("IDX dimension table truncated", len(buf))
    dims = struct.unpack_from(">" + "I" * ndim, buf, 4)
    dt = np.dtype(_IDX_TYPES[code])
    start = 4 + 4 * ndim
    need = int(np.prod(dims, dtype=np.int64)) * dt.itemsize
    if len(buf) - start < need:
        raise FormatError(f"IDX payload truncated: expected {need} bytes, found {len(buf) - start}", len(buf))
    if len(buf) - start > need:
        raise FormatError(f"{len(buf) - start - need} trailing bytes after IDX payload", start + need)
    return np.frombuffer(buf, dt, count=need // dt.itemsize, offset=start).reshape(dims)


def read_idx(path):
    return parse_idx(_read_maybe_gzip(path))


def idx_header(path):
    """``(magic, dims)`` of an IDX file without decoding the payload."""
    buf = _read_maybe_gzip(path)
    if len(buf) < 4:
        raise FormatError("IDX file shorter than its magic number", len(buf))
    magic = struct.unpack_from(">I", buf, 0)[0]
    ndim = buf[3]
    return magic, struct.unpack_from(">" + "I" * ndim, buf, 4)


_MNIST_FILES = {"train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
                "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte")}


def _find(directory, stem):
    for name in (stem, stem + ".gz", stem.replace("-idx", ".idx")):
        p = Path(directory) / name
        if p.exists():
            return p
    raise FileNotFoundError(f"no {stem}[.gz] in {directory}")


def load_mnist(directory, split="test"):
    """MNIST split as a :class:`Dataset` with pixels scaled to [0, 1]."""
    if split not in _MNIST_FILES:
        raise ValueError(f"unknown MNIST split {split!r}")
    img_stem, lab_stem = _MNIST_FILES[split]
    img_path, lab_path = _find(directory, img_stem), _find(directory, lab_stem)
    magic, _ = idx_header(img_path)
    if magic != 0x00000803:
        raise FormatError(f"{img_path}: expected image magic 0x00000803, got 0x{magic:08x}", 0)
    images = read_idx(img_path)
    labels = read_idx(lab_path)
    if len(images) != len(labels):
        raise FormatError(f"{len(images)} images but {len(labels)} labels")
    return Dataset((images.astype(np.float32) / 255.0), labels.astype(np.int64))


def load_cifar10_batch(path):
    """One CIFAR-10 binary batch: 1 label byte then 3072 pixel bytes per record."""
    buf = _read_maybe_gzip(path)
    rec = 1 + 3 * 32 * 32
    if len(buf) % rec:
        raise FormatError(f"CIFAR-10 batch size {len(buf)} is not a multiple of {rec}",
                          len(buf) - len(buf) % rec)
    arr = np.frombuffer(buf, np.uint8).reshape(-1, rec)
    images = arr[:, 1:].reshape(-1, 3, 32, 32).astype(np.float32) / 255.0
    return Dataset(images, arr[:, 0].astype(np.int64))


def load_dataset(spec, split="test"):
    """Load ``mnist:<dir>``, ``cifar10:<batch file>`` or a bare MNIST directory."""
    kind, _, rest = str(spec).partition(":")
    if kind == "cifar10":
        return load_cifar10_batch(rest)
    if kind == "mnist":
        directory, _, sp = rest.partition(":")
        return load_mnist(directory, sp or split)
    return load_mnist(spec, split)
