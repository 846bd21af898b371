"""Space-filling-curve serialization of quantized point clouds.

Points are quantized onto a regular grid and each cell is mapped to a single
integer code along a space-filling curve.  Sorting by code yields a 1-D
ordering in which nearby points tend to stay nearby, which is what the
grouped-attention stages of the point backbone rely on.

Four curve kinds are supported: ``z`` (Morton order), ``hilbert``, and their
``-trans`` variants which swap the x and y grid indices before encoding.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

CURVE_KINDS = ("z", "z-trans", "hilbert", "hilbert-trans")

# 3 bits per level * 21 levels = 63 bits, the most that fits a u64 code.
MAX_BITS = 21


@dataclass(frozen=True)
class CurveCode:
    """A single cell's position along a space-filling curve."""

    code: int
    bits_per_axis: int
    kind: str


@dataclass
class GridSpec:
    """Quantization grid: ``index = floor((p - origin) / cell)`` per axis.

    Indices are clamped to ``[0, 2**bits_per_axis - 1]``, so the grid covers
    ``cell * 2**bits_per_axis`` meters per axis starting at ``origin``.
    """

    origin: np.ndarray = field(default_factory=lambda: np.zeros(3))
    cell: float = 0.1
    bits_per_axis: int = 11

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=np.float64).reshape(3)
        if not np.all(np.isfinite(self.origin)):
            raise ValueError("grid origin must be finite")
        if not self.cell > 0:
            raise ValueError(f"grid cell must be positive, got {self.cell}")
        if not 1 <= self.bits_per_axis <= MAX_BITS:
            raise ValueError(
                f"bits_per_axis must be in [1, {MAX_BITS}], got {self.bits_per_axis}"
            )


def _check_kind(kind: str) -> None:
    if kind not in CURVE_KINDS:
        raise ValueError(f"unknown curve kind {kind!r}, expected one of {CURVE_KINDS}")


def quantize(points: np.ndarray, grid: GridSpec) -> np.ndarray:
    """Map xyz coordinates to integer grid indices, clamped to the grid range."""
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ValueError(f"points must be (N, 3), got {pts.shape}")
    idx = np.floor((pts - grid.origin) / grid.cell).astype(np.int64)
    return np.clip(idx, 0, (1 << grid.bits_per_axis) - 1)


# ---------------------------------------------------------------------------
# Morton (z-order)
# ---------------------------------------------------------------------------

_U = np.uint64


def _spread_bits(v: np.ndarray) -> np.ndarray:
    # Insert two zero bits between the low 21 bits of each value.
    v = v.astype(np.uint64) & _U(0x1FFFFF)
    v = (v | (v << _U(32))) & _U(0x1F00000000FFFF)
    v = (v | (v << _U(16))) & _U(0x1F0000FF0000FF)
    v = (v | (v << _U(8))) & _U(0x100F00F00F00F00F)
    v = (v | (v << _U(4))) & _U(0x10C30C30C30C30C3)
    v = (v | (v << _U(2))) & _U(0x1249249249249249)
    return v


def _compact_bits(v: np.ndarray) -> np.ndarray:
    # Inverse of _spread_bits: keep every third bit.
    v = v.astype(np.uint64) & _U(0x1249249249249249)
    v = (v | (v >> _U(2))) & _U(0x10C30C30C30C30C3)
    v = (v | (v >> _U(4))) & _U(0x100F00F00F00F00F)
    v = (v | (v >> _U(8))) & _U(0x1F0000FF0000FF)
    v = (v | (v >> _U(16))) & _U(0x1F00000000FFFF)
    v = (v | (v >> _U(32))) & _U(0x1FFFFF)
    return v


def _morton_encode_array(ix, iy, iz) -> np.ndarray:
    """Interleave bits so bit i of x, y, z lands at code bits 3i, 3i+1, 3i+2."""
    return (
        _spread_bits(np.asarray(ix))
        | (_spread_bits(np.asarray(iy)) << _U(1))
        | (_spread_bits(np.asarray(iz)) << _U(2))
    )


def _morton_decode_array(codes: np.ndarray):
    codes = np.asarray(codes, dtype=np.uint64)
    return (
        _compact_bits(codes),
        _compact_bits(codes >> _U(1)),
        _compact_bits(codes >> _U(2)),
    )


# ---------------------------------------------------------------------------
# Hilbert
# ---------------------------------------------------------------------------
#
# The encoder first converts axis indices to the "transpose" form (one word
# per axis whose bit j contributes bit 3j+k of the final code) by undoing the
# per-level rotations/reflections, then Gray-codes the result.  The decoder
# runs the same two steps in reverse.  Everything is vectorized over points;
# the per-level loop runs at most MAX_BITS times.


def _hilbert_transpose_from_axes(ix, iy, iz, bits: int):
    X = [
        np.array(ix, dtype=np.uint64, copy=True),
        np.array(iy, dtype=np.uint64, copy=True),
        np.array(iz, dtype=np.uint64, copy=True),
    ]
    m = _U(1) << _U(bits - 1)
    q = m
    while q > 1:
        p = q - _U(1)
        for i in range(3):
            hit = (X[i] & q) != 0
            x0 = np.where(hit, X[0] ^ p, X[0])
            t = np.where(hit, _U(0), (x0 ^ X[i]) & p)
            X[0] = x0 ^ t
            if i > 0:
                X[i] = X[i] ^ t
        q >>= _U(1)
    X[1] ^= X[0]
    X[2] ^= X[1]
    t = np.zeros_like(X[0])
    q = m
    while q > 1:
        t = np.where((X[2] & q) != 0, t ^ (q - _U(1)), t)
        q >>= _U(1)
    return [x ^ t for x in X]


def _hilbert_axes_from_transpose(X, bits: int):
    X = [np.array(x, dtype=np.uint64, copy=True) for x in X]
    n = _U(1) << _U(bits)
    t = X[2] >> _U(1)
    X[2] ^= X[1]
    X[1] ^= X[0]
    X[0] ^= t
    q = _U(2)
    while q != n:
        p = q - _U(1)
        for i in (2, 1, 0):
            hit = (X[i] & q) != 0
            x0 = np.where(hit, X[0] ^ p, X[0])
            t = np.where(hit, _U(0), (x0 ^ X[i]) & p)
            X[0] = x0 ^ t
            if i > 0:
                X[i] = X[i] ^ t
        q <<= _U(1)
    return X


def _hilbert_encode_array(ix, iy, iz, bits: int) -> np.ndarray:
    X = _hilbert_transpose_from_axes(ix, iy, iz, bits)
    # X[0]'s bit j is the most significant bit of code triple j.
    return (_spread_bits(X[0]) << _U(2)) | (_spread_bits(X[1]) << _U(1)) | _spread_bits(X[2])


def _hilbert_decode_array(codes: np.ndarray, bits: int):
    codes = np.asarray(codes, dtype=np.uint64)
    X = [
        _compact_bits(codes >> _U(2)),
        _compact_bits(codes >> _U(1)),
        _compact_bits(codes),
    ]
    return _hilbert_axes_from_transpose(X, bits)


# ---------------------------------------------------------------------------
# Public encode/decode
# ---------------------------------------------------------------------------


def _check_indices(bits: int, *indices) -> None:
    if not 1 <= bits <= MAX_BITS:
        raise ValueError(f"bits_per_axis must be in [1, {MAX_BITS}], got {bits}")
    hi = 1 << bits
    for v in indices:
        v = np.asarray(v)
        if np.any(v < 0) or np.any(v >= hi):
            raise ValueError(f"grid index out of range [0, {hi}) for bits={bits}")


def morton_encode(ix: int, iy: int, iz: int, bits_per_axis: int = 11) -> CurveCode:
    """Encode one grid cell along the z-order curve."""
    _check_indices(bits_per_axis, ix, iy, iz)
    code = int(_morton_encode_array(np.uint64(ix), np.uint64(iy), np.uint64(iz)))
    return CurveCode(code, bits_per_axis, "z")


def morton_decode(code: CurveCode) -> tuple[int, int, int]:
    ix, iy, iz = _morton_decode_array(np.uint64(code.code))
    return int(ix), int(iy), int(iz)


def hilbert_encode(ix: int, iy: int, iz: int, bits_per_axis: int = 11) -> CurveCode:
    """Encode one grid cell along the 3-D Hilbert curve."""
    _check_indices(bits_per_axis, ix, iy, iz)
    code = int(
        _hilbert_encode_array(
            np.uint64(ix), np.uint64(iy), np.uint64(iz), bits_per_axis
        )
    )
    return CurveCode(code, bits_per_axis, "hilbert")


def hilbert_decode(code: CurveCode) -> tuple[int, int, int]:
    ix, iy, iz = _hilbert_decode_array(np.uint64(code.code), code.bits_per_axis)
    return int(ix), int(iy), int(iz)


def apply_trans(ix, iy, iz):
    """Swap the x and y grid indices (the "-trans" curve variants)."""
    return iy, ix, iz


def encode_cells(ix, iy, iz, kind: str, bits_per_axis: int = 11) -> np.ndarray:
    """Vectorized cell encoding for any curve kind; returns uint64 codes."""
    _check_kind(kind)
    _check_indices(bits_per_axis, ix, iy, iz)
    if kind.endswith("-trans"):
        ix, iy, iz = apply_trans(ix, iy, iz)
    if kind.startswith("z"):
        return _morton_encode_array(ix, iy, iz)
    return _hilbert_encode_array(ix, iy, iz, bits_per_axis)


def decode_cells(codes: np.ndarray, kind: str, bits_per_axis: int = 11):
    """Vectorized inverse of :func:`encode_cells`."""
    _check_kind(kind)
    if kind.startswith("z"):
        ix, iy, iz = _morton_decode_array(codes)
    else:
        ix, iy, iz = _hilbert_decode_array(codes, bits_per_axis)
    if kind.endswith("-trans"):
        ix, iy, iz = apply_trans(ix, iy, iz)
    return ix, iy, iz


def serialize_order(points: np.ndarray, grid: GridSpec, kind: str) -> np.ndarray:
    """Return the permutation that sorts points by curve code.

    Ties (points quantized to the same cell) keep their original relative
    order, so the permutation is deterministic.
    """
    idx = quantize(points, grid)
    codes = encode_cells(idx[:, 0], idx[:, 1], idx[:, 2], kind, grid.bits_per_axis)
    return np.argsort(codes, kind="stable")


def partition_groups(order: np.ndarray, group_size: int) -> list[np.ndarray]:
    """Split a serialization order into contiguous groups of ``group_size``.

    The final group may be smaller; a cloud smaller than ``group_size``
    yields a single group.
    """
    order = np.asarray(order)
    if order.ndim != 1 or order.size == 0:
        raise ValueError(f"order must be a non-empty 1-D array, got shape {order.shape}")
    if group_size < 1:
        raise ValueError(f"group_size must be >= 1, got {group_size}")
    return [order[i : i + group_size] for i in range(0, order.size, group_size)]
