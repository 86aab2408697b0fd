"""Dense tensor primitives and the binary tensor container.

Tensors are plain :class:`numpy.ndarray` objects. The helpers here validate
shapes and finiteness at the boundary and provide the index maps shared by
the differentiable convolution and pooling primitives in :mod:`.autodiff`.
"""

from __future__ import annotations

import struct
from functools import lru_cache
from pathlib import Path
from typing import BinaryIO, Union

import numpy as np

DEFAULT_DTYPE = np.float64
PADDINGS = ("same", "valid", "full")

MAGIC = b"TNSR0001"
_DTYPE_TAGS = {np.dtype("<f4"): 0, np.dtype("<f8"): 1}
_TAG_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class NonFiniteError(ValueError):
    """Raised when a tensor contains NaN or infinite values."""


class TensorFormatError(ValueError):
    """Raised when a tensor container cannot be parsed."""


def as_tensor(data, dtype=None) -> np.ndarray:
    """Convert ``data`` to a finite floating point array."""
    arr = np.asarray(data, dtype=dtype or DEFAULT_DTYPE)
    if arr.dtype not in (np.float32, np.float64):
        raise TypeError(f"unsupported dtype {arr.dtype}")
    check_finite(arr)
    return arr


def check_finite(arr: np.ndarray, what: str = "tensor") -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        bad = int(np.size(arr) - np.count_nonzero(np.isfinite(arr)))
        raise NonFiniteError(f"{what} has {bad} non-finite element(s)")
    return arr


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply shapes {a.shape} and {b.shape}")
    return check_finite(a @ b, "matmul result")


def conv_padding(padding: str, kh: int, kw: int) -> tuple[int, int, int, int]:
    """Return (top, bottom, left, right) zero padding for a padding mode."""
    if padding == "same":
        top, left = (kh - 1) // 2, (kw - 1) // 2
        return top, kh - 1 - top, left, kw - 1 - left
    if padding == "valid":
        return 0, 0, 0, 0
    if padding == "full":
        return kh - 1, kh - 1, kw - 1, kw - 1
    raise ValueError(f"invalid padding {padding!r}; expected one of {PADDINGS}")


def conv_output_hw(h: int, w: int, kh: int, kw: int, padding: str) -> tuple[int, int]:
    pt, pb, pl, pr = conv_padding(padding, kh, kw)
    ho, wo = h + pt + pb - kh + 1, w + pl + pr - kw + 1
    if ho < 1 or wo < 1:
        raise ShapeError(
            f"kernel {kh}x{kw} larger than padded input {h + pt + pb}x{w + pl + pr}")
    return ho, wo


@lru_cache(maxsize=256)
def im2col_index(c: int, h: int, w: int, kh: int, kw: int, padding: str) -> np.ndarray:
    """Flat gather indices of shape (Ho*Wo, c*kh*kw) into a (c, h, w) volume.

    Positions falling in the zero padding are marked ``-1``.
    """
    pt, _, pl, _ = conv_padding(padding, kh, kw)
    ho, wo = conv_output_hw(h, w, kh, kw, padding)
    oi = np.arange(ho)[:, None, None, None, None]
    oj = np.arange(wo)[None, :, None, None, None]
    ch = np.arange(c)[None, None, :, None, None]
    ki = np.arange(kh)[None, None, None, :, None]
    kj = np.arange(kw)[None, None, None, None, :]
    row = oi + ki - pt
    col = oj + kj - pl
    inside = (row >= 0) & (row < h) & (col >= 0) & (col < w)
    flat = (ch * h + row) * w + col
    idx = np.where(inside, flat, -1)
    idx = np.broadcast_to(idx, (ho, wo, c, kh, kw)).reshape(ho * wo, c * kh * kw)
    idx.setflags(write=False)
    return idx


def conv2d(x: np.ndarray, kernels: np.ndarray, padding: str = "same",
           bias: np.ndarray | None = None) -> np.ndarray:
    """Stride-1 cross-correlation of a (C, H, W) or (N, C, H, W) input."""
    x = np.asarray(x)
    kernels = np.asarray(kernels)
    batched = x.ndim == 4
    if not batched:
        x = x[None]
    if x.ndim != 4 or kernels.ndim != 4:
        raise ShapeError(f"conv2d expects 3-d/4-d input and 4-d kernels, got {x.shape}, {kernels.shape}")
    n, c, h, w = x.shape
    o, kc, kh, kw = kernels.shape
    if kc != c:
        raise ShapeError(f"channel mismatch: input has {c}, kernels expect {kc}")
    ho, wo = conv_output_hw(h, w, kh, kw, padding)
    idx = im2col_index(c, h, w, kh, kw, padding)
    flat = np.concatenate([x.reshape(n, -1), np.zeros((n, 1), x.dtype)], axis=1)
    cols = flat[:, idx]  # (n, ho*wo, c*kh*kw)
    out = cols @ kernels.reshape(o, -1).T  # (n, ho*wo, o)
    out = out.transpose(0, 2, 1).reshape(n, o, ho, wo)
    if bias is not None:
        bias = np.asarray(bias)
        if bias.shape != (o,):
            raise ShapeError(f"bias shape {bias.shape} does not match {o} kernels")
        out = out + bias[None, :, None, None]
    check_finite(out, "conv2d result")
    return out if batched else out[0]


def pooled_hw(h: int, w: int, size: int) -> tuple[int, int]:
    if size < 1:
        raise ValueError(f"pool size must be >= 1, got {size}")
    return -(-h // size), -(-w // size)


@lru_cache(maxsize=256)
def pool_index(c: int, h: int, w: int, size: int) -> tuple[np.ndarray, np.ndarray]:
    """Map every input position to its pooling window.

    Returns ``(window, inv_count)`` where ``window`` has shape (c*h*w,) holding
    the flat output index and ``inv_count`` has the output shape, holding the
    reciprocal of the number of inputs in each (possibly ragged) window.
    """
    ph, pw = pooled_hw(h, w, size)
    ch = np.arange(c)[:, None, None]
    row = (np.arange(h) // size)[None, :, None]
    col = (np.arange(w) // size)[None, None, :]
    window = ((ch * ph + row) * pw + col).reshape(-1)
    counts = np.bincount(window, minlength=c * ph * pw).reshape(c, ph, pw)
    window.setflags(write=False)
    inv = 1.0 / counts
    inv.setflags(write=False)
    return window, inv


def mean_pool(x: np.ndarray, size: int) -> np.ndarray:
    """Non-overlapping ``size``x``size`` window means; ragged edges average what is present."""
    x = check_finite(np.asarray(x), "mean_pool input")
    if size < 1:
        raise ValueError(f"pool size must be >= 1, got {size}")
    if size == 1:
        return x
    batched = x.ndim == 4
    if not batched:
        x = x[None]
    n, c, h, w = x.shape
    window, inv = pool_index(c, h, w, size)
    m = inv.size
    offsets = (np.arange(n) * m)[:, None]
    sums = np.bincount((window[None, :] + offsets).ravel(), weights=x.reshape(n, -1).ravel(),
                       minlength=n * m)
    out = sums.reshape(n, *inv.shape).astype(x.dtype, copy=False) * inv
    return out if batched else out[0]


def upsample(x: np.ndarray, size: int, out_hw: tuple[int, int] | None = None) -> np.ndarray:
    """Replicate each pooled value over its window (crop to ``out_hw`` if given)."""
    x = np.asarray(x)
    up = np.repeat(np.repeat(x, size, axis=-2), size, axis=-1)
    if out_hw is not None:
        up = up[..., : out_hw[0], : out_hw[1]]
    return up


# -- binary container -------------------------------------------------------

PathLike = Union[str, Path]


def write_tensor(fh: BinaryIO, arr: np.ndarray) -> None:
    arr = np.asarray(arr)
    dt = arr.dtype.newbyteorder("<")
    if dt not in _DTYPE_TAGS:
        raise TypeError(f"cannot store dtype {arr.dtype}")
    fh.write(MAGIC)
    fh.write(struct.pack("<I", arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    fh.write(struct.pack("<B", _DTYPE_TAGS[dt]))
    fh.write(np.ascontiguousarray(arr, dtype=dt).tobytes(order="C"))


def _take(buf: bytes, offset: int, n: int, what: str) -> bytes:
    if offset + n > len(buf):
        raise TensorFormatError(
            f"truncated tensor container: need {n} byte(s) of {what} at byte offset {offset}, "
            f"only {len(buf) - offset} available")
    return buf[offset:offset + n]


def decode_tensor(buf: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    """Decode one tensor starting at ``offset``; returns the array and the end offset."""
    magic = _take(buf, offset, 8, "magic")
    if magic != MAGIC:
        raise TensorFormatError(f"bad magic {magic!r} at byte offset {offset}")
    offset += 8
    (rank,) = struct.unpack("<I", _take(buf, offset, 4, "rank"))
    offset += 4
    dims = struct.unpack(f"<{rank}I", _take(buf, offset, 4 * rank, "dims"))
    offset += 4 * rank
    (tag,) = struct.unpack("<B", _take(buf, offset, 1, "dtype tag"))
    if tag not in _TAG_DTYPES:
        raise TensorFormatError(f"unknown dtype tag {tag} at byte offset {offset}")
    offset += 1
    dtype = _TAG_DTYPES[tag]
    nbytes = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
    payload = _take(buf, offset, nbytes, "payload")
    arr = np.frombuffer(payload, dtype=dtype).reshape(dims).astype(dtype.newbyteorder("="))
    return arr, offset + nbytes


def save_tensor(path: PathLike, arr: np.ndarray) -> None:
    with open(path, "wb") as fh:
        write_tensor(fh, arr)


def load_tensor(path: PathLike) -> np.ndarray:
    buf = Path(path).read_bytes()
    arr, end = decode_tensor(buf)
    if end != len(buf):
        raise TensorFormatError(f"{len(buf) - end} trailing byte(s) after tensor at offset {end}")
    return arr


def load_tensors(path: PathLike) -> list[np.ndarray]:
    """Read a file holding one or more concatenated tensors."""
    buf = Path(path).read_bytes()
    out, offset = [], 0
    while offset < len(buf):
        arr, offset = decode_tensor(buf, offset)
        out.append(arr)
    return out
