from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from segfusion import curves


def naive_morton(ix: int, iy: int, iz: int, bits: int) -> int:
    """Oracle: interleave one bit at a time, x least significant per triple."""
    code = 0
    for i in range(bits):
        code |= ((ix >> i) & 1) << (3 * i)
        code |= ((iy >> i) & 1) << (3 * i + 1)
        code |= ((iz >> i) & 1) << (3 * i + 2)
    return code


def exhaustive_cells(bits: int):
    g = np.arange(1 << bits)
    ix, iy, iz = np.meshgrid(g, g, g, indexing="ij")
    return ix.ravel(), iy.ravel(), iz.ravel()


def test_morton_known_values():
    assert curves.morton_encode(0, 0, 0, 3).code == 0
    assert curves.morton_encode(1, 2, 3, 3).code == 53
    top = (1 << 4) - 1
    assert curves.morton_encode(top, top, top, 4).code == (1 << 12) - 1
    assert curves.morton_decode(curves.CurveCode(53, 3, "z")) == (1, 2, 3)
    assert curves.morton_decode(curves.CurveCode(0, 3, "z")) == (0, 0, 0)


def test_morton_matches_naive_oracle():
    rng = np.random.default_rng(7)
    for _ in range(200):
        bits = int(rng.integers(1, 22))
        v = rng.integers(0, 1 << bits, size=3)
        got = curves.morton_encode(int(v[0]), int(v[1]), int(v[2]), bits)
        assert got.code == naive_morton(int(v[0]), int(v[1]), int(v[2]), bits)


@pytest.mark.parametrize("bits", [3, 4])
@pytest.mark.parametrize("kind", curves.CURVE_KINDS)
def test_exhaustive_bijectivity(kind, bits):
    ix, iy, iz = exhaustive_cells(bits)
    codes = curves.encode_cells(ix, iy, iz, kind, bits)
    n_cells = 1 << (3 * bits)
    assert codes.dtype == np.uint64
    assert len(np.unique(codes)) == n_cells
    assert codes.min() == 0 and codes.max() == n_cells - 1
    jx, jy, jz = curves.decode_cells(codes, kind, bits)
    assert np.array_equal(jx, ix) and np.array_equal(jy, iy) and np.array_equal(jz, iz)


def test_hilbert_consecutive_codes_are_adjacent_cells():
    bits = 3
    codes = np.arange(1 << (3 * bits), dtype=np.uint64)
    ix, iy, iz = curves.decode_cells(codes, "hilbert", bits)
    steps = (
        np.abs(np.diff(ix.astype(np.int64)))
        + np.abs(np.diff(iy.astype(np.int64)))
        + np.abs(np.diff(iz.astype(np.int64)))
    )
    assert np.all(steps == 1)


def test_hilbert_curve_start():
    assert curves.hilbert_encode(0, 0, 0, 3).code == 0
    assert curves.hilbert_decode(curves.CurveCode(0, 3, "hilbert")) == (0, 0, 0)


def test_apply_trans():
    assert curves.apply_trans(1, 2, 3) == (2, 1, 3)
    assert curves.apply_trans(*curves.apply_trans(1, 2, 3)) == (1, 2, 3)
    a = curves.encode_cells(np.array([1]), np.array([2]), np.array([3]), "z-trans", 3)
    b = curves.encode_cells(np.array([2]), np.array([1]), np.array([3]), "z", 3)
    assert a[0] == b[0]
    h1 = curves.encode_cells(np.array([4]), np.array([7]), np.array([2]), "hilbert-trans", 4)
    h2 = curves.encode_cells(np.array([7]), np.array([4]), np.array([2]), "hilbert", 4)
    assert h1[0] == h2[0]


@settings(max_examples=50, deadline=None)
@given(
    bits=st.integers(min_value=1, max_value=21),
    seed=st.integers(min_value=0, max_value=2**31),
    kind=st.sampled_from(curves.CURVE_KINDS),
)
def test_roundtrip_random(bits, seed, kind):
    rng = np.random.default_rng(seed)
    ix, iy, iz = rng.integers(0, 1 << bits, size=(3, 32))
    codes = curves.encode_cells(ix, iy, iz, kind, bits)
    jx, jy, jz = curves.decode_cells(codes, kind, bits)
    assert np.array_equal(jx, ix) and np.array_equal(jy, iy) and np.array_equal(jz, iz)


def test_index_overflow_rejected():
    with pytest.raises(ValueError):
        curves.morton_encode(8, 0, 0, 3)
    with pytest.raises(ValueError):
        curves.hilbert_encode(0, -1, 0, 3)
    with pytest.raises(ValueError):
        curves.encode_cells(np.array([16]), np.array([0]), np.array([0]), "z", 4)


def test_quantize_clamps_to_grid():
    grid = curves.GridSpec(origin=np.array([-1.0, -1.0, -1.0]), cell=0.5, bits_per_axis=3)
    pts = np.array(
        [
            [-1.0, -1.0, -1.0],  # origin cell
            [-0.75, 0.0, 2.4],
            [100.0, -100.0, 0.0],  # clamps high x, low y
        ]
    )
    idx = curves.quantize(pts, grid)
    assert idx.tolist() == [[0, 0, 0], [0, 2, 6], [7, 0, 2]]


def test_serialize_order_matches_sort_oracle():
    rng = np.random.default_rng(11)
    pts = rng.uniform(-5, 5, size=(64, 3))
    grid = curves.GridSpec(origin=np.array([-5.0, -5.0, -5.0]), cell=0.4, bits_per_axis=5)
    for kind in curves.CURVE_KINDS:
        order = curves.serialize_order(pts, grid, kind)
        idx = curves.quantize(pts, grid)
        codes = curves.encode_cells(idx[:, 0], idx[:, 1], idx[:, 2], kind, 5)
        oracle = [i for _, i in sorted((int(c), i) for i, c in enumerate(codes))]
        assert order.tolist() == oracle
        assert np.array_equal(np.sort(order), np.arange(64))


def test_serialize_order_stability_and_single_point():
    grid = curves.GridSpec(origin=np.zeros(3), cell=1.0, bits_per_axis=4)
    assert curves.serialize_order(np.array([[3.3, 2.2, 1.1]]), grid, "z").tolist() == [0]
    # two points in one cell keep original relative order, regardless of position
    pts = np.array([[0.9, 0.9, 0.9], [0.1, 0.1, 0.1], [0.5, 0.5, 0.5]])
    order = curves.serialize_order(pts, grid, "hilbert")
    assert order.tolist() == [0, 1, 2]


def test_partition_groups():
    order = np.arange(10)
    groups = curves.partition_groups(order, 4)
    assert [len(g) for g in groups] == [4, 4, 2]
    assert np.array_equal(np.concatenate(groups), order)
    assert len(curves.partition_groups(np.arange(3), 8)) == 1
    with pytest.raises(ValueError):
        curves.partition_groups(np.array([]), 4)
    with pytest.raises(ValueError):
        curves.partition_groups(order, 0)
