"""Dense tensor helpers shared by every other module.

Tensors are plain row-major ``numpy.ndarray`` objects holding binary32
values. Matrix products accumulate in binary64 and round once on output.
"""

import numpy as np

DTYPE = np.float32


def as_tensor(x, dtype=DTYPE):
    """Return ``x`` as a C-contiguous float array, rejecting NaN/Inf."""
    arr = np.ascontiguousarray(x, dtype=dtype)
    if not np.all(np.isfinite(arr)):
        raise ValueError("tensor contains non-finite values")
    return arr


def matmul(a, b):
    """Matrix product ``a @ b`` with binary64 partial sums.

    Both operands must be 2-D with matching inner extents; the result is
    binary32. Inputs are not modified.
    """
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    out = np.asarray(a, dtype=np.float64) @ np.asarray(b, dtype=np.float64)
    return out.astype(DTYPE)


def _binary(fn):
    def op(a, b):
        a = np.asarray(a)
        b = np.asarray(b)
        if a.shape != b.shape:
            raise ValueError(f"elementwise shape mismatch: {a.shape} vs {b.shape}")
        return fn(a, b).astype(DTYPE)

    return op


_BINARY = {
    "add": _binary(np.add),
    "sub": _binary(np.subtract),
    "mul": _binary(np.multiply),
}

_UNARY = {
    "neg": lambda a: np.negative(a),
    "relu": lambda a: np.maximum(a, 0),
    "clamp01": lambda a: np.clip(a, 0, 1),
}


def elementwise(op, a, b=None, *, factor=None):
    """Apply a named elementwise operation.

    ``op`` is one of ``add``, ``sub``, ``mul`` (binary, same shapes),
    ``neg``, ``relu``, ``clamp01`` (unary) or ``scale`` (needs ``factor``).
    """
    if op in _BINARY:
        if b is None:
            raise ValueError(f"{op} needs two operands")
        return _BINARY[op](a, b)
    a = np.asarray(a)
    if op == "scale":
        if factor is None:
            raise ValueError("scale needs a factor")
        return (a * factor).astype(DTYPE)
    if op in _UNARY:
        return _UNARY[op](a).astype(DTYPE)
    raise ValueError(f"unknown elementwise op {op!r}")
