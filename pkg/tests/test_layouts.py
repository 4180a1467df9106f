"""Memory-layout indexing tests: closed-form offsets, bijectivity, strides,
layout conversion and the binary dump format.

The closed-form offsets asserted in test_reference_offsets were computed by
hand from the layout definitions and are frozen here as literals.
"""
import numpy as np
import pytest

from lbhx.errors import ConfigurationError, ContractViolation
from lbhx.layouts import (Clustering, Family, FieldBuffer, Geometry,
                          LayoutDescriptor, StrideKind, cluster_elem_stride,
                          convert_layout, coords_of, dump_bytes,
                          family_from_name, index_cube, linear_index,
                          load_dump, neighbor_stride, read_dump, write_dump)

GEOM = Geometry(6, 8, halo=0)  # alloc_lx == lx when halo == 0
NQ = 5

ALL = [
    LayoutDescriptor(Family.AOS),
    LayoutDescriptor(Family.SOA),
    LayoutDescriptor(Family.CSOA, 2),
    LayoutDescriptor(Family.CSOA, 4),
    LayoutDescriptor(Family.CSOA, 2, Clustering.CONSECUTIVE),
    LayoutDescriptor(Family.CSOA, 4, Clustering.CONSECUTIVE),
    LayoutDescriptor(Family.CAOSOA, 2),
    LayoutDescriptor(Family.CAOSOA, 4),
    LayoutDescriptor(Family.CAOSOA, 2, Clustering.CONSECUTIVE),
    LayoutDescriptor(Family.CAOSOA, 4, Clustering.CONSECUTIVE),
]


def test_reference_offsets():
    # hand-computed offsets for p=2, x=3, y=5 on a 6x8 interior, Q=5
    p, x, y = 2, 3, 5
    ly, alx = 8, 6
    assert linear_index(LayoutDescriptor(Family.AOS), GEOM, NQ, p, x, y) \
        == (x * ly + y) * NQ + p                               # 147
    assert linear_index(LayoutDescriptor(Family.SOA), GEOM, NQ, p, x, y) \
        == p * alx * ly + x * ly + y                           # 125
    # CSoA VL=4 interleaved: LY/VL=2, k=y//2=2, iy=y%2=1
    assert linear_index(LayoutDescriptor(Family.CSOA, 4), GEOM, NQ, p, x, y) \
        == p * alx * ly + (x * 2 + 1) * 4 + 2                  # 126
    # CSoA VL=4 consecutive: k=y%4=1, iy=y//4=1
    assert linear_index(
        LayoutDescriptor(Family.CSOA, 4, Clustering.CONSECUTIVE),
        GEOM, NQ, p, x, y) == p * alx * ly + (x * 2 + 1) * 4 + 1
    # CAoSoA VL=4 interleaved
    assert linear_index(LayoutDescriptor(Family.CAOSOA, 4), GEOM, NQ, p, x, y) \
        == ((x * 2 + 1) * NQ + p) * 4 + 2                      # 150


@pytest.mark.parametrize("desc", ALL, ids=str)
def test_bijection_and_inverse(desc):
    total = NQ * GEOM.alloc_lx * GEOM.ly
    cube = index_cube(desc, GEOM, NQ)
    assert cube.shape == (NQ, GEOM.alloc_lx, GEOM.ly)
    assert np.array_equal(np.sort(cube.ravel()), np.arange(total))
    for offset in range(total):
        p, x, y = coords_of(desc, GEOM, NQ, offset)
        assert linear_index(desc, GEOM, NQ, p, x, y) == offset


def test_coords_of_range_check():
    with pytest.raises(ContractViolation):
        coords_of(LayoutDescriptor(Family.AOS), GEOM, NQ, NQ * 6 * 8)
    with pytest.raises(ContractViolation):
        coords_of(LayoutDescriptor(Family.AOS), GEOM, NQ, -1)


@pytest.mark.parametrize("desc", ALL, ids=str)
@pytest.mark.parametrize("dx,dy", [(1, 0), (0, 1), (-1, -1), (2, 3)])
def test_neighbor_stride_agrees_with_offsets(desc, dx, dy):
    stride = neighbor_stride(desc, GEOM, NQ, dx, dy)
    cube = index_cube(desc, GEOM, NQ)
    if stride.kind == StrideKind.UNIFORM:
        for p in range(NQ):
            for x in range(GEOM.alloc_lx):
                for y in range(GEOM.ly):
                    nx, ny = x + dx, y + dy
                    if not (0 <= nx < GEOM.alloc_lx and 0 <= ny < GEOM.ly):
                        continue
                    assert cube[p, nx, ny] - cube[p, x, y] == stride.value
    elif stride.kind == StrideKind.CLUSTER:
        # constant stride in cluster units while k is unchanged
        elem = cluster_elem_stride(desc, NQ)
        vl = desc.vl
        lyovl = GEOM.ly // vl
        for p in range(NQ):
            for x in range(GEOM.alloc_lx - abs(dx)):
                for y in range(GEOM.ly):
                    if desc.clustering == Clustering.INTERLEAVED:
                        k, iy = y // lyovl, y % lyovl
                        ny = y + dy
                        nk, niy = (ny // lyovl, ny % lyovl) \
                            if 0 <= ny < GEOM.ly else (None, None)
                    else:
                        k, iy = y % vl, y // vl
                        ny = y + dy
                        nk, niy = (ny % vl, ny // vl) \
                            if 0 <= ny < GEOM.ly else (None, None)
                    if nk != k or x + dx < 0 or x + dx >= GEOM.alloc_lx:
                        continue  # displacement leaves the k-partition
                    got = (cube[p, x + dx, ny] - cube[p, x, y])
                    assert got == stride.value * elem


def test_consecutive_y1_is_nonuniform():
    desc = LayoutDescriptor(Family.CSOA, 4, Clustering.CONSECUTIVE)
    assert neighbor_stride(desc, GEOM, NQ, 0, 1).kind == StrideKind.NONUNIFORM
    assert neighbor_stride(desc, GEOM, NQ, 0, 4).kind == StrideKind.CLUSTER


def test_descriptor_validation():
    with pytest.raises(ConfigurationError):
        LayoutDescriptor(Family.CSOA, 1)      # clustered needs VL >= 2
    with pytest.raises(ConfigurationError):
        LayoutDescriptor(Family.AOS, 4)       # AoS takes no VL
    with pytest.raises(ConfigurationError):
        FieldBuffer(LayoutDescriptor(Family.CSOA, 3), GEOM, NQ)  # 8 % 3 != 0
    assert family_from_name("caosoa") == Family.CAOSOA
    with pytest.raises(ConfigurationError):
        family_from_name("aosoa")


def test_canonical_roundtrip_with_halo():
    geom = Geometry(6, 8, halo=3)
    rng = np.random.default_rng(1)
    values = rng.random((NQ, 6, 8))
    for desc in ALL:
        buf = FieldBuffer(desc, geom, NQ)
        buf.set_canonical(values)
        assert np.array_equal(buf.canonical("prv"), values)
    with pytest.raises(ConfigurationError):
        buf.set_canonical(values[:, :4, :])


def test_copy_columns():
    geom = Geometry(6, 8, halo=3)
    buf = FieldBuffer(LayoutDescriptor(Family.CAOSOA, 4), geom, NQ)
    buf.prv[:] = np.arange(buf.size, dtype=np.float64)
    before = buf.cube().copy()
    src_cols = buf.prv[before[:, 4:6, :]].copy()
    buf.copy_columns(4, 9, 2)
    assert np.array_equal(buf.prv[before[:, 9:11, :]], src_cols)


@pytest.mark.parametrize("desc", ALL, ids=str)
def test_convert_layout_roundtrip(desc):
    geom = Geometry(4, 8, halo=2)
    rng = np.random.default_rng(2)
    src = FieldBuffer(LayoutDescriptor(Family.SOA), geom, NQ)
    src.prv[:] = rng.random(src.size)
    src.nxt[:] = rng.random(src.size)
    mid = convert_layout(src, desc)
    assert np.array_equal(mid.canonical("prv"), src.canonical("prv"))
    back = convert_layout(mid, src.desc)
    assert np.array_equal(back.prv, src.prv)
    assert np.array_equal(back.nxt, src.nxt)


def test_dump_format_and_roundtrip(tmp_path):
    geom = Geometry(5, 4, halo=3)
    rng = np.random.default_rng(3)
    values = rng.random((NQ, 5, 4))
    buf = FieldBuffer(LayoutDescriptor(Family.CSOA, 2), geom, NQ)
    buf.set_canonical(values)
    data = dump_bytes(buf)
    assert data[:4] == b"LBHX"
    assert len(data) == 32 + NQ * 5 * 4 * 8  # 32-byte header + f8 interior
    state, meta = load_dump(data)
    assert np.array_equal(state, values)
    assert meta["family"] == Family.CSOA and meta["vl"] == 2
    path = tmp_path / "s.lbhx"
    write_dump(path, buf)
    state2, meta2 = read_dump(path)
    assert np.array_equal(state2, values)
    assert meta2 == meta


def test_dump_is_layout_independent():
    geom = Geometry(5, 4, halo=3)
    rng = np.random.default_rng(4)
    values = rng.random((NQ, 5, 4))
    bodies = set()
    for desc in (LayoutDescriptor(Family.AOS), LayoutDescriptor(Family.CAOSOA, 4)):
        buf = FieldBuffer(desc, geom, NQ)
        buf.set_canonical(values)
        bodies.add(dump_bytes(buf)[32:])
    assert len(bodies) == 1  # same interior bytes whatever the layout


def test_load_dump_errors():
    with pytest.raises(ConfigurationError):
        load_dump(b"XXXX" + bytes(28))
    geom = Geometry(4, 4, halo=0)
    buf = FieldBuffer(LayoutDescriptor(Family.SOA), geom, NQ)
    data = dump_bytes(buf)
    with pytest.raises(ConfigurationError):
        load_dump(data[:-8])  # truncated body
