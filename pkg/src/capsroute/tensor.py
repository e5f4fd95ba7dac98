"""Dense tensor primitives and the flat binary tensor format.

Tensors are plain numpy arrays in row-major (C) order, float32 or float64.
The functions here are the small public op set the rest of the package is
built from; each one validates shapes and guarantees a finite result
(NaN/Inf raises instead of propagating).  Reshapes copy; there are no
views or strides in the public contract.
"""

import struct

import numpy as np

from .errors import NumericError, ShapeError

FLOAT_DTYPES = (np.float32, np.float64)


def as_tensor(data, dtype=np.float64) -> np.ndarray:
    """Coerce ``data`` to a contiguous float tensor of the given dtype."""
    if dtype not in FLOAT_DTYPES and np.dtype(dtype) not in [np.dtype(d) for d in FLOAT_DTYPES]:
        raise ShapeError(f"unsupported dtype {dtype!r}; use float32 or float64")
    arr = np.ascontiguousarray(data, dtype=dtype)
    return arr


def check_finite(x: np.ndarray, what: str = "tensor") -> np.ndarray:
    """Raise NumericError if ``x`` contains NaN or Inf."""
    if not np.all(np.isfinite(x)):
        raise NumericError(f"{what} contains non-finite values")
    return x


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product of a 2-D ``a`` [m,k] and 2-D ``b`` [k,n]."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dimensions disagree: {a.shape} vs {b.shape}")
    return check_finite(a @ b, "matmul result")


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    """Exponent-normalize along ``axis``; stabilized by max subtraction."""
    x = np.asarray(x)
    if x.ndim == 0 or axis >= x.ndim or axis < -x.ndim:
        raise ShapeError(f"softmax axis {axis} out of range for shape {x.shape}")
    shifted = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / np.sum(e, axis=axis, keepdims=True)
    return check_finite(out, "softmax result")


def reduce_sum(x: np.ndarray, axis: int) -> np.ndarray:
    """Sum along one axis."""
    x = np.asarray(x)
    if axis >= x.ndim or axis < -x.ndim:
        raise ShapeError(f"reduce_sum axis {axis} out of range for shape {x.shape}")
    return check_finite(np.sum(x, axis=axis), "reduce_sum result")


def add(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Elementwise sum of same-shape tensors."""
    a, b = np.asarray(a), np.asarray(b)
    if a.shape != b.shape:
        raise ShapeError(f"add shape mismatch: {a.shape} vs {b.shape}")
    return check_finite(a + b, "add result")


def mul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Elementwise product of same-shape tensors."""
    a, b = np.asarray(a), np.asarray(b)
    if a.shape != b.shape:
        raise ShapeError(f"mul shape mismatch: {a.shape} vs {b.shape}")
    return check_finite(a * b, "mul result")


def relu(x: np.ndarray) -> np.ndarray:
    """Elementwise max(x, 0)."""
    return check_finite(np.maximum(np.asarray(x), 0), "relu result")


def transpose(x: np.ndarray, axes=None) -> np.ndarray:
    """Permute axes (reversed by default).  Returns a fresh copy."""
    return np.ascontiguousarray(np.transpose(np.asarray(x), axes))


# ---------------------------------------------------------------------------
# Flat binary tensor format
#
# magic "CAPT" | u8 scalar width (4|8) | u8 rank | rank x little-endian u32
# extents | raw little-endian scalars.
# ---------------------------------------------------------------------------

_MAGIC = b"CAPT"
_ARCHIVE_MAGIC = b"CAPD"


def tensor_to_bytes(x: np.ndarray) -> bytes:
    x = np.ascontiguousarray(x)
    if x.dtype == np.float32:
        width = 4
    elif x.dtype == np.float64:
        width = 8
    else:
        raise ShapeError(f"serialization supports float32/float64, got {x.dtype}")
    if x.ndim == 0 or x.ndim > 255:
        raise ShapeError(f"serializable rank must be 1..255, got {x.ndim}")
    header = _MAGIC + struct.pack("<BB", width, x.ndim)
    header += struct.pack(f"<{x.ndim}I", *x.shape)
    return header + x.astype(f"<f{width}", copy=False).tobytes()


def tensor_from_bytes(raw: bytes) -> np.ndarray:
    if len(raw) < 6 or raw[:4] != _MAGIC:
        raise ShapeError("bad tensor header (expected CAPT magic)")
    width, rank = struct.unpack("<BB", raw[4:6])
    if width not in (4, 8):
        raise ShapeError(f"bad scalar width {width}")
    offset = 6 + 4 * rank
    if len(raw) < offset:
        raise ShapeError("truncated tensor header")
    shape = struct.unpack(f"<{rank}I", raw[6:offset])
    if any(d < 1 for d in shape):
        raise ShapeError(f"invalid extents {shape}")
    count = int(np.prod(shape))
    payload = raw[offset:offset + count * width]
    if len(payload) != count * width:
        raise ShapeError("truncated tensor payload")
    arr = np.frombuffer(payload, dtype=f"<f{width}").reshape(shape)
    return arr.astype(np.float32 if width == 4 else np.float64)


def save_archive(path, tensors: dict) -> None:
    """Write named tensors: CAPD directory header, then CAPT blobs in order."""
    names = list(tensors.keys())
    blobs = [tensor_to_bytes(tensors[n]) for n in names]
    with open(path, "wb") as f:
        f.write(_ARCHIVE_MAGIC + struct.pack("<I", len(names)))
        for name, blob in zip(names, blobs):
            encoded = name.encode("utf-8")
            f.write(struct.pack("<H", len(encoded)) + encoded + struct.pack("<Q", len(blob)))
        for blob in blobs:
            f.write(blob)


def load_archive(path) -> dict:
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 8 or raw[:4] != _ARCHIVE_MAGIC:
        raise ShapeError("bad archive header (expected CAPD magic)")
    (count,) = struct.unpack("<I", raw[4:8])
    entries = []
    pos = 8
    for _ in range(count):
        if len(raw) < pos + 2:
            raise ShapeError("truncated archive directory")
        (name_len,) = struct.unpack("<H", raw[pos:pos + 2])
        pos += 2
        name = raw[pos:pos + name_len].decode("utf-8")
        pos += name_len
        (size,) = struct.unpack("<Q", raw[pos:pos + 8])
        pos += 8
        entries.append((name, size))
    out = {}
    for name, size in entries:
        blob = raw[pos:pos + size]
        if len(blob) != size:
            raise ShapeError(f"truncated archive payload for {name!r}")
        out[name] = tensor_from_bytes(blob)
        pos += size
    return out
