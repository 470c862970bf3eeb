"""Tensor primitives and the on-disk tensor container.

Autograd is delegated to torch; this module pins the handful of operations
the rest of the package relies on (with the error contracts they need) and
owns the checkpoint container format.

Container layout (all integers little-endian)::

    magic      8 bytes   b"RFTENSR\\x00"
    version    u32       1
    count      u32       number of tensors
    manifest   count entries, in file order:
        name_len   u16
        name       name_len bytes, UTF-8
        dtype      u8      0=float64 1=float32 2=int64 3=int32 4=uint8 5=bool
        ndim       u8
        dims       ndim x u64
        offset     u64     byte offset of the data, relative to the data section
        nbytes     u64
    data       concatenated flat little-endian arrays, row-major, each
               starting on an 8-byte boundary
"""

from __future__ import annotations

import math
import struct
from collections.abc import Iterable, Mapping
from pathlib import Path

import numpy as np
import torch

MAGIC = b"RFTENSR\x00"
VERSION = 1

_DTYPE_TAGS: dict[torch.dtype, int] = {
    torch.float64: 0,
    torch.float32: 1,
    torch.int64: 2,
    torch.int32: 3,
    torch.uint8: 4,
    torch.bool: 5,
}
_TAG_NUMPY = {0: "<f8", 1: "<f4", 2: "<i8", 3: "<i4", 4: "u1", 5: "u1"}
_TAG_TORCH = {tag: dt for dt, tag in _DTYPE_TAGS.items()}

MAX_SEED = 2**64 - 1


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class NumericError(ArithmeticError):
    """Non-finite values where finite ones are required."""


class ContractError(ValueError):
    """A precondition of an operation was violated."""


class CheckpointError(IOError):
    """A tensor container could not be read."""


def check_seed(seed: int) -> int:
    if not isinstance(seed, (int, np.integer)) or not 0 <= int(seed) <= MAX_SEED:
        raise ContractError(f"seed must be an unsigned 64-bit integer, got {seed!r}")
    return int(seed)


def seeded_generator(seed: int) -> torch.Generator:
    """A CPU generator whose draws depend only on ``seed``."""
    g = torch.Generator()
    g.manual_seed(check_seed(seed))
    return g


def matmul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Matrix product with leading batch dims broadcast; fails loudly on mismatch."""
    if a.dim() < 2 or b.dim() < 2:
        raise DimensionError(f"matmul needs >=2-d operands, got {tuple(a.shape)} and {tuple(b.shape)}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"inner extents differ: {tuple(a.shape)} @ {tuple(b.shape)}")
    try:
        torch.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except RuntimeError as exc:
        raise DimensionError(f"batch dims do not broadcast: {tuple(a.shape)} @ {tuple(b.shape)}") from exc
    return a @ b


def softmax_rows(x: torch.Tensor, scale: float = 1.0) -> torch.Tensor:
    """Normalized ``exp((x - rowmax) / scale)`` over the last dimension.

    Entries equal to ``-inf`` are allowed (they act as masks) as long as every
    row keeps at least one finite entry; NaN and ``+inf`` are rejected.
    """
    if x.dim() < 1:
        raise DimensionError("softmax_rows needs at least one dimension")
    if not scale > 0:
        raise ContractError(f"scale must be positive, got {scale}")
    if torch.isnan(x).any() or torch.isposinf(x).any():
        raise NumericError("softmax_rows received NaN or +inf")
    row_max = x.amax(dim=-1, keepdim=True)
    if torch.isneginf(row_max).any():
        raise NumericError("softmax_rows received a fully masked row")
    e = torch.exp((x - row_max.detach()) / scale)
    return e / e.sum(dim=-1, keepdim=True)


def backward(loss: torch.Tensor) -> None:
    if loss.numel() != 1 or loss.dim() > 1:
        raise ContractError(f"backward needs a scalar loss, got shape {tuple(loss.shape)}")
    if not loss.requires_grad:
        raise ContractError("loss does not require grad")
    loss.reshape(()).backward()


def zero_grad(params: Iterable[torch.Tensor]) -> None:
    for p in params:
        p.grad = None


# ---------------------------------------------------------------- container


def _pad8(n: int) -> int:
    return (-n) % 8


def save_tensors(path: str | Path, tensors: Mapping[str, torch.Tensor | np.ndarray]) -> None:
    """Write named tensors to the container format described in the module docstring."""
    entries = []
    blobs = []
    offset = 0
    for name, value in tensors.items():
        t = torch.as_tensor(value).detach().cpu()
        if t.dtype not in _DTYPE_TAGS:
            raise ContractError(f"unsupported dtype {t.dtype} for {name!r}")
        tag = _DTYPE_TAGS[t.dtype]
        arr = t.contiguous().numpy()
        if t.dtype == torch.bool:
            arr = arr.astype(np.uint8)
        raw = np.ascontiguousarray(arr, dtype=_TAG_NUMPY[tag]).tobytes()
        entries.append((name.encode("utf-8"), tag, tuple(t.shape), offset, len(raw)))
        blobs.append(raw + b"\x00" * _pad8(len(raw)))
        offset += len(raw) + _pad8(len(raw))

    head = bytearray(MAGIC)
    head += struct.pack("<II", VERSION, len(entries))
    for name, tag, shape, off, nbytes in entries:
        if len(name) > 0xFFFF or len(shape) > 0xFF:
            raise ContractError("tensor name or rank too large for the container")
        head += struct.pack("<H", len(name)) + name
        head += struct.pack("<BB", tag, len(shape))
        head += struct.pack(f"<{len(shape)}Q", *shape)
        head += struct.pack("<QQ", off, nbytes)
    head += b"\x00" * _pad8(len(head))
    with open(path, "wb") as fh:
        fh.write(bytes(head))
        for blob in blobs:
            fh.write(blob)


def load_tensors(path: str | Path) -> dict[str, torch.Tensor]:
    """Read a container written by :func:`save_tensors`, preserving order."""
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read {path}: {exc}") from exc
    if buf[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a tensor container")
    version, count = struct.unpack_from("<II", buf, 8)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported container version {version}")
    pos = 16
    manifest = []
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<H", buf, pos)
            pos += 2
            name = buf[pos : pos + n].decode("utf-8")
            pos += n
            tag, ndim = struct.unpack_from("<BB", buf, pos)
            pos += 2
            shape = struct.unpack_from(f"<{ndim}Q", buf, pos)
            pos += 8 * ndim
            off, nbytes = struct.unpack_from("<QQ", buf, pos)
            pos += 16
            manifest.append((name, tag, shape, off, nbytes))
    except (struct.error, UnicodeDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt manifest") from exc
    data_start = pos + _pad8(pos)

    out: dict[str, torch.Tensor] = {}
    for name, tag, shape, off, nbytes in manifest:
        if tag not in _TAG_NUMPY:
            raise CheckpointError(f"{path}: tensor {name!r} has unknown dtype tag {tag}")
        start = data_start + off
        if start + nbytes > len(buf) or nbytes != math.prod(shape) * np.dtype(_TAG_NUMPY[tag]).itemsize:
            raise CheckpointError(f"{path}: tensor {name!r} is truncated or mis-sized")
        arr = np.frombuffer(buf, dtype=_TAG_NUMPY[tag], count=math.prod(shape), offset=start)
        t = torch.from_numpy(arr.astype(arr.dtype.newbyteorder("="), copy=True)).reshape(shape)
        out[name] = t.bool() if tag == 5 else t.to(_TAG_TORCH[tag])
    return out


class ScratchMeter:
    """Tracks the largest transient allocation (in scalar elements) reported to it."""

    def __init__(self) -> None:
        self.peak = 0
        self.current = 0

    def note(self, n_elements: int) -> None:
        self.current = int(n_elements)
        self.peak = max(self.peak, self.current)

    def reset(self) -> None:
        self.peak = 0
        self.current = 0
