"""Memory layouts for population storage: AoS, SoA, CSoA and CAoSoA.

Each layout is a bijective map from (population p, column x, row y) to a
linear offset in a flat float64 arena of size alloc_LX * LY * Q.  Columns are
stored with whole-column X halos on both sides (alloc_LX = LX + 2H); the Y
direction has no stored halo and is handled by coordinate wrap or wall rules.

Clustered layouts split each Y-column into clusters of VL elements.  With the
default `interleaved` clustering y = k * LYOVL + iy; with `consecutive`
clustering y = iy * VL + k (k is the intra-cluster position).
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from enum import IntEnum
from functools import lru_cache

import numpy as np

from .errors import ConfigurationError, ContractViolation

MAGIC = b"LBHX"
DUMP_VERSION = 1


class Family(IntEnum):
    AOS = 0
    SOA = 1
    CSOA = 2
    CAOSOA = 3


class Clustering(IntEnum):
    INTERLEAVED = 0
    CONSECUTIVE = 1


CLUSTERED = (Family.CSOA, Family.CAOSOA)

_FAMILY_NAMES = {f.name.lower(): f for f in Family}
_CLUSTERING_NAMES = {c.name.lower(): c for c in Clustering}


def family_from_name(name: str) -> Family:
    try:
        return _FAMILY_NAMES[name.lower()]
    except KeyError:
        raise ConfigurationError(f"unknown layout family {name!r}") from None


def clustering_from_name(name: str) -> Clustering:
    try:
        return _CLUSTERING_NAMES[name.lower()]
    except KeyError:
        raise ConfigurationError(f"unknown clustering policy {name!r}") from None


@dataclass(frozen=True)
class LayoutDescriptor:
    family: Family
    vl: int = 1
    clustering: Clustering = Clustering.INTERLEAVED

    def __post_init__(self):
        if self.vl < 1:
            raise ConfigurationError("VL must be >= 1")
        if self.family in CLUSTERED and self.vl < 2:
            raise ConfigurationError(
                f"{self.family.name} requires VL >= 2 (VL=1 is AoS/SoA territory)"
            )
        if self.family not in CLUSTERED and self.vl != 1:
            raise ConfigurationError(f"{self.family.name} does not take a VL")

    @property
    def clustered(self) -> bool:
        return self.family in CLUSTERED


@dataclass(frozen=True)
class Geometry:
    """Interior size LX x LY plus X-halo width; no stored Y halo."""

    lx: int
    ly: int
    halo: int = 3

    def __post_init__(self):
        if self.lx <= 0 or self.ly <= 0:
            raise ConfigurationError("LX and LY must be positive")
        if self.halo < 0:
            raise ConfigurationError("halo width must be >= 0")

    @property
    def alloc_lx(self) -> int:
        return self.lx + 2 * self.halo

    def lyovl(self, vl: int) -> int:
        if self.ly % vl != 0:
            raise ConfigurationError(f"LY={self.ly} is not a multiple of VL={vl}")
        return self.ly // vl

    def check_vl(self, desc: LayoutDescriptor) -> None:
        if desc.clustered:
            self.lyovl(desc.vl)


def _split_y(desc: LayoutDescriptor, geom: Geometry, y):
    """Decompose row index y into (k, iy) per the clustering policy."""
    lyovl = geom.lyovl(desc.vl)
    if desc.clustering == Clustering.INTERLEAVED:
        return y // lyovl, y % lyovl
    return y % desc.vl, y // desc.vl


def linear_index(desc: LayoutDescriptor, geom: Geometry, nq: int, p, x, y):
    """Storage offset of population p at allocation column x, row y.

    Accepts scalars or broadcastable integer arrays.
    """
    ly = geom.ly
    alx = geom.alloc_lx
    if desc.family == Family.AOS:
        return (x * ly + y) * nq + p
    if desc.family == Family.SOA:
        return p * (alx * ly) + x * ly + y
    geom.check_vl(desc)
    lyovl = geom.lyovl(desc.vl)
    k, iy = _split_y(desc, geom, y)
    if desc.family == Family.CSOA:
        return p * (alx * ly) + (x * lyovl + iy) * desc.vl + k
    return ((x * lyovl + iy) * nq + p) * desc.vl + k


def coords_of(desc: LayoutDescriptor, geom: Geometry, nq: int, offset: int):
    """Inverse of linear_index."""
    ly, alx = geom.ly, geom.alloc_lx
    total = alx * ly * nq
    if not 0 <= offset < total:
        raise ContractViolation(f"offset {offset} outside [0, {total})")
    if desc.family == Family.AOS:
        site, p = divmod(offset, nq)
        x, y = divmod(site, ly)
        return p, x, y
    if desc.family == Family.SOA:
        p, site = divmod(offset, alx * ly)
        x, y = divmod(site, ly)
        return p, x, y
    lyovl = geom.lyovl(desc.vl)
    vl = desc.vl
    if desc.family == Family.CSOA:
        p, rest = divmod(offset, alx * ly)
        cluster, k = divmod(rest, vl)
        x, iy = divmod(cluster, lyovl)
    else:
        block, k = divmod(offset, vl)
        cluster, p = divmod(block, nq)
        x, iy = divmod(cluster, lyovl)
    if desc.clustering == Clustering.INTERLEAVED:
        y = k * lyovl + iy
    else:
        y = iy * vl + k
    return p, x, y


class StrideKind(IntEnum):
    UNIFORM = 0
    CLUSTER = 1
    NONUNIFORM = 2


@dataclass(frozen=True)
class Stride:
    kind: StrideKind
    value: int = 0

    @property
    def uniform(self) -> bool:
        return self.kind == StrideKind.UNIFORM


def neighbor_stride(desc: LayoutDescriptor, geom: Geometry, nq: int,
                    dx: int, dy: int) -> Stride:
    """Stride of the (dx, dy) site displacement in storage offsets.

    UNIFORM: offset(x+dx, y+dy) - offset(x, y) is the same for every site.
    CLUSTER: constant stride in cluster units with unchanged intra-cluster
    position k, valid only where the displaced partition index stays in
    range (the cluster interior).  NONUNIFORM otherwise.
    """
    if dx == 0 and dy == 0:
        return Stride(StrideKind.UNIFORM, 0)
    ly = geom.ly
    if desc.family == Family.AOS:
        return Stride(StrideKind.UNIFORM, (dx * ly + dy) * nq)
    if desc.family == Family.SOA:
        return Stride(StrideKind.UNIFORM, dx * ly + dy)
    lyovl = geom.lyovl(desc.vl)
    if desc.clustering == Clustering.INTERLEAVED:
        return Stride(StrideKind.CLUSTER, dx * lyovl + dy)
    if dy % desc.vl != 0:
        return Stride(StrideKind.NONUNIFORM)
    return Stride(StrideKind.CLUSTER, dx * lyovl + dy // desc.vl)


def cluster_elem_stride(desc: LayoutDescriptor, nq: int) -> int:
    """Flat elements per unit of cluster stride."""
    if desc.family == Family.CSOA:
        return desc.vl
    if desc.family == Family.CAOSOA:
        return desc.vl * nq
    raise ConfigurationError("cluster stride applies to clustered layouts only")


@lru_cache(maxsize=64)
def index_cube(desc: LayoutDescriptor, geom: Geometry, nq: int) -> np.ndarray:
    """Full offset table, shape (Q, alloc_LX, LY); cached per layout/geometry."""
    p = np.arange(nq).reshape(nq, 1, 1)
    x = np.arange(geom.alloc_lx).reshape(1, geom.alloc_lx, 1)
    y = np.arange(geom.ly).reshape(1, 1, geom.ly)
    cube = linear_index(desc, geom, nq, p, x, y).astype(np.int64)
    cube.setflags(write=False)
    return cube


class FieldBuffer:
    """Two flat float64 arenas (state `prv`, scratch `nxt`) plus layout info."""

    def __init__(self, desc: LayoutDescriptor, geom: Geometry, nq: int):
        geom.check_vl(desc)
        self.desc = desc
        self.geom = geom
        self.nq = nq
        size = geom.alloc_lx * geom.ly * nq
        self.prv = np.zeros(size, dtype=np.float64)
        self.nxt = np.zeros(size, dtype=np.float64)

    @property
    def size(self) -> int:
        return self.prv.size

    def arena(self, role: str) -> np.ndarray:
        if role == "prv":
            return self.prv
        if role == "nxt":
            return self.nxt
        raise ConfigurationError(f"unknown arena role {role!r}")

    def cube(self) -> np.ndarray:
        return index_cube(self.desc, self.geom, self.nq)

    def canonical(self, role: str = "prv") -> np.ndarray:
        """Interior values in canonical (p, x, y) order, shape (Q, LX, LY)."""
        h = self.geom.halo
        idx = self.cube()[:, h:h + self.geom.lx, :]
        return self.arena(role)[idx].copy()

    def set_canonical(self, values: np.ndarray, role: str = "prv") -> None:
        h = self.geom.halo
        expected = (self.nq, self.geom.lx, self.geom.ly)
        if values.shape != expected:
            raise ConfigurationError(f"expected canonical shape {expected}")
        idx = self.cube()[:, h:h + self.geom.lx, :]
        self.arena(role)[idx] = values

    def copy_columns(self, src_x0: int, dst_x0: int, width: int,
                     role: str = "prv", src: "FieldBuffer | None" = None) -> None:
        """Copy `width` whole columns (all p, y) from src_x0 to dst_x0.

        Source defaults to this buffer; pass another buffer with identical
        layout for cross-buffer copies.
        """
        src = src or self
        cube = self.cube()
        src_idx = cube[:, src_x0:src_x0 + width, :]
        dst_idx = cube[:, dst_x0:dst_x0 + width, :]
        self.arena(role)[dst_idx] = src.arena(role)[src_idx]


def convert_layout(src: FieldBuffer, dst_desc: LayoutDescriptor) -> FieldBuffer:
    """Re-store a field under another layout; values are copied bit-exactly."""
    dst = FieldBuffer(dst_desc, src.geom, src.nq)
    for role in ("prv", "nxt"):
        dst.arena(role)[dst.cube()] = src.arena(role)[src.cube()]
    return dst


def dump_bytes(buf: FieldBuffer, role: str = "prv") -> bytes:
    """Serialize the interior in the LBHX dump format (layout-independent order)."""
    g, d = buf.geom, buf.desc
    header = MAGIC + struct.pack(
        "<6I", DUMP_VERSION, g.lx, g.ly, buf.nq, int(d.family), d.vl
    ) + struct.pack("<I", int(d.clustering))
    body = buf.canonical(role).astype("<f8").tobytes()
    return header + body


def load_dump(data: bytes) -> tuple[np.ndarray, dict]:
    """Parse an LBHX dump; returns (canonical array (Q, LX, LY), metadata)."""
    if data[:4] != MAGIC:
        raise ConfigurationError("not an LBHX dump (bad magic)")
    version, lx, ly, nq, family, vl, clustering = struct.unpack_from("<7I", data, 4)
    if version != DUMP_VERSION:
        raise ConfigurationError(f"unsupported dump version {version}")
    count = nq * lx * ly
    if len(data) < 32 + count * 8:
        raise ConfigurationError("truncated LBHX dump")
    body = np.frombuffer(data, dtype="<f8", offset=32, count=count)
    meta = {
        "lx": lx, "ly": ly, "nq": nq,
        "family": Family(family), "vl": vl, "clustering": Clustering(clustering),
    }
    return body.reshape(nq, lx, ly).astype(np.float64), meta


def write_dump(path, buf: FieldBuffer, role: str = "prv") -> None:
    with open(path, "wb") as fh:
        fh.write(dump_bytes(buf, role))


def read_dump(path) -> tuple[np.ndarray, dict]:
    with open(path, "rb") as fh:
        return load_dump(fh.read())
