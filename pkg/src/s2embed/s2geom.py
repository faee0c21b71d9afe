"""Hierarchical cell indexing on the sphere.

Cells come from projecting a cube onto the unit sphere and recursively
quadrisecting each face. A cell is named by a 64-bit id: 3 face bits,
then 2 bits per level giving the Hilbert-curve child position, then a
single trailing 1 bit, zero-padded to 64 bits. This layout (and the
quadratic ST<->UV transform below) matches the widely used S2 library,
so tokens interoperate with datasets keyed by S2 cell tokens.

All functions are pure and operate on immutable values.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterator, NamedTuple

MAX_LEVEL = 30
NUM_FACES = 6
EARTH_RADIUS_KM = 6371.0088

_POS_BITS = 2 * MAX_LEVEL + 1
_MAX_SIZE = 1 << MAX_LEVEL
_LOOKUP_BITS = 4
_SWAP_MASK = 0x01
_INVERT_MASK = 0x02

# Hilbert sub-cell traversal order and orientation changes for each of the
# four canonical orientations.
_POS_TO_IJ = ((0, 1, 3, 2), (0, 2, 3, 1), (3, 2, 0, 1), (3, 1, 0, 2))
_POS_TO_ORIENTATION = (_SWAP_MASK, 0, 0, _INVERT_MASK | _SWAP_MASK)

_LOOKUP_POS = [0] * (1 << (2 * _LOOKUP_BITS + 2))
_LOOKUP_IJ = [0] * (1 << (2 * _LOOKUP_BITS + 2))


def _init_lookup_cell(level: int, i: int, j: int, orig_orientation: int,
                      pos: int, orientation: int) -> None:
    if level == _LOOKUP_BITS:
        ij = (i << _LOOKUP_BITS) + j
        _LOOKUP_POS[(ij << 2) + orig_orientation] = (pos << 2) + orientation
        _LOOKUP_IJ[(pos << 2) + orig_orientation] = (ij << 2) + orientation
        return
    level += 1
    i <<= 1
    j <<= 1
    pos <<= 2
    r = _POS_TO_IJ[orientation]
    for index in range(4):
        _init_lookup_cell(level, i + (r[index] >> 1), j + (r[index] & 1),
                          orig_orientation, pos + index,
                          orientation ^ _POS_TO_ORIENTATION[index])


for _orientation in range(4):
    _init_lookup_cell(0, 0, 0, _orientation, 0, _orientation)
del _orientation


def st_to_uv(s: float) -> float:
    """Quadratic transform from cell-space [0,1] to cube-face [-1,1]."""
    if s >= 0.5:
        return (1.0 / 3.0) * (4.0 * s * s - 1.0)
    return (1.0 / 3.0) * (1.0 - 4.0 * (1.0 - s) * (1.0 - s))


def uv_to_st(u: float) -> float:
    """Inverse of st_to_uv."""
    if u >= 0:
        return 0.5 * math.sqrt(1.0 + 3.0 * u)
    return 1.0 - 0.5 * math.sqrt(1.0 - 3.0 * u)


def face_uv_to_xyz(face: int, u: float, v: float) -> tuple[float, float, float]:
    """Unnormalized direction vector for (u, v) on the given cube face."""
    if face == 0:
        return (1.0, u, v)
    if face == 1:
        return (-u, 1.0, v)
    if face == 2:
        return (-u, -v, 1.0)
    if face == 3:
        return (-1.0, -v, -u)
    if face == 4:
        return (v, -1.0, -u)
    return (v, u, -1.0)


def xyz_to_face_uv(p: tuple[float, float, float]) -> tuple[int, float, float]:
    """Project a direction vector onto the cube face it points at."""
    x, y, z = p
    abs_xyz = (abs(x), abs(y), abs(z))
    if abs_xyz[0] > abs_xyz[1]:
        face = 0 if abs_xyz[0] > abs_xyz[2] else 2
    else:
        face = 1 if abs_xyz[1] > abs_xyz[2] else 2
    if p[face] < 0:
        face += 3
    if face == 0:
        return 0, y / x, z / x
    if face == 1:
        return 1, -x / y, z / y
    if face == 2:
        return 2, -x / z, -y / z
    if face == 3:
        return 3, z / x, y / x
    if face == 4:
        return 4, z / y, -x / y
    return 5, -y / z, -x / z


@dataclass(frozen=True)
class LatLng:
    """A point on the sphere in degrees.

    Latitude must lie in [-90, 90]. Longitude is normalized to
    [-180, 180); an input of exactly 180 maps to -180.
    """

    lat: float
    lng: float

    def __post_init__(self) -> None:
        if not (math.isfinite(self.lat) and math.isfinite(self.lng)):
            raise ValueError("latitude and longitude must be finite")
        if not -90.0 <= self.lat <= 90.0:
            raise ValueError(f"latitude {self.lat} outside [-90, 90]")
        lng = math.fmod(self.lng, 360.0)
        if lng >= 180.0:
            lng -= 360.0
        elif lng < -180.0:
            lng += 360.0
        object.__setattr__(self, "lng", lng)

    def to_point(self) -> tuple[float, float, float]:
        """Unit vector for this point."""
        phi = math.radians(self.lat)
        theta = math.radians(self.lng)
        cosphi = math.cos(phi)
        return (math.cos(theta) * cosphi, math.sin(theta) * cosphi, math.sin(phi))

    @classmethod
    def from_point(cls, p: tuple[float, float, float]) -> "LatLng":
        x, y, z = p
        lat = math.degrees(math.atan2(z, math.sqrt(x * x + y * y)))
        lng = math.degrees(math.atan2(y, x))
        return cls(lat, lng)


class GridPos(NamedTuple):
    """Row-major position of a child cell inside its parent's G x G grid."""

    row: int
    col: int


@dataclass(frozen=True)
class CellId:
    """A 64-bit hierarchical cell identifier.

    The constructor validates the id: the face bits must name one of the
    six faces and the lowest set bit must sit at an even position at or
    below the face-cell bit.
    """

    raw: int

    def __post_init__(self) -> None:
        raw = self.raw
        if not isinstance(raw, int) or raw <= 0 or raw >= (1 << 64):
            raise ValueError(f"invalid cell id {raw!r}")
        if (raw >> _POS_BITS) >= NUM_FACES:
            raise ValueError(f"cell id {raw:#x} has face > 5")
        if not ((raw & -raw) & 0x1555555555555555):
            raise ValueError(f"cell id {raw:#x} has a misplaced level bit")

    # -- basic accessors ---------------------------------------------------

    def face(self) -> int:
        return self.raw >> _POS_BITS

    def lsb(self) -> int:
        return self.raw & -self.raw

    def level(self) -> int:
        return MAX_LEVEL - ((self.raw & -self.raw).bit_length() - 1) // 2

    def is_leaf(self) -> bool:
        return bool(self.raw & 1)

    def is_face(self) -> bool:
        return (self.raw & ((1 << 60) - 1)) == 0

    @staticmethod
    def lsb_for_level(level: int) -> int:
        return 1 << (2 * (MAX_LEVEL - level))

    # -- construction ------------------------------------------------------

    @classmethod
    def from_face_ij(cls, face: int, i: int, j: int) -> "CellId":
        """Leaf cell at leaf-scale coordinates (i, j) on a face."""
        n = face << (_POS_BITS - 1)
        bits = face & _SWAP_MASK
        # Consume the 30 i/j bit pairs in 4-bit chunks through the Hilbert
        # lookup table; each chunk emits 8 position bits.
        mask = (1 << _LOOKUP_BITS) - 1
        for k in range(7, -1, -1):
            bits += ((i >> (k * _LOOKUP_BITS)) & mask) << (_LOOKUP_BITS + 2)
            bits += ((j >> (k * _LOOKUP_BITS)) & mask) << 2
            bits = _LOOKUP_POS[bits]
            n |= (bits >> 2) << (k * 2 * _LOOKUP_BITS)
            bits &= _SWAP_MASK | _INVERT_MASK
        return cls(n * 2 + 1)

    @classmethod
    def from_latlng(cls, point: LatLng, level: int = MAX_LEVEL) -> "CellId":
        """The level-`level` cell containing `point`."""
        if not isinstance(level, int) or not 0 <= level <= MAX_LEVEL:
            raise ValueError(f"level must be an integer in [0, {MAX_LEVEL}], got {level!r}")
        face, u, v = xyz_to_face_uv(point.to_point())
        i = _st_to_ij(uv_to_st(u))
        j = _st_to_ij(uv_to_st(v))
        cell = cls.from_face_ij(face, i, j)
        return cell.parent(level)

    @classmethod
    def from_token(cls, token: str) -> "CellId":
        """Decode a hex token produced by token()."""
        if not token or len(token) > 16 or not all(c in "0123456789abcdef" for c in token):
            raise ValueError(f"malformed cell token {token!r}")
        raw = int(token, 16) << 4 * (16 - len(token))
        return cls(raw)

    # -- hierarchy ---------------------------------------------------------

    def parent(self, level: int | None = None) -> "CellId":
        """Ancestor at `level` (immediate parent when omitted)."""
        if level is None:
            level = self.level() - 1
        if not 0 <= level <= self.level():
            raise ValueError(
                f"level {level} is not an ancestor level of a level-{self.level()} cell")
        new_lsb = self.lsb_for_level(level)
        return CellId((self.raw & -new_lsb) | new_lsb)

    def child(self, pos: int) -> "CellId":
        """Child at Hilbert position pos in [0, 3]."""
        if self.is_leaf():
            raise ValueError("leaf cells have no children")
        if not 0 <= pos <= 3:
            raise ValueError(f"child position {pos} outside [0, 3]")
        new_lsb = self.lsb() >> 2
        return CellId(self.raw + (2 * pos - 3) * new_lsb)

    def children(self) -> tuple["CellId", "CellId", "CellId", "CellId"]:
        return tuple(self.child(pos) for pos in range(4))

    def descendants(self, level: int) -> Iterator["CellId"]:
        """All descendants at `level`, in Hilbert curve order."""
        if level < self.level() or level > MAX_LEVEL:
            raise ValueError(
                f"level {level} is not a descendant level of a level-{self.level()} cell")
        new_lsb = self.lsb_for_level(level)
        raw = self.raw - self.lsb() + new_lsb
        end = self.raw + self.lsb() + new_lsb
        step = 2 * new_lsb
        while raw < end:
            yield CellId(raw)
            raw += step

    def contains(self, other: "CellId") -> bool:
        """True when `other` is this cell or one of its descendants."""
        lsb = self.lsb()
        return self.raw - lsb + 1 <= other.raw <= self.raw + lsb - 1

    # -- geometry ----------------------------------------------------------

    def to_face_ij(self) -> tuple[int, int, int, int]:
        """(face, i, j, orientation) with i, j at leaf scale."""
        face = self.face()
        bits = face & _SWAP_MASK
        i = 0
        j = 0
        for k in range(7, -1, -1):
            # The top chunk carries only the 2 ij-bit pairs left over after
            # seven 4-bit chunks.
            nbits = MAX_LEVEL - 7 * _LOOKUP_BITS if k == 7 else _LOOKUP_BITS
            bits += ((self.raw >> (k * 2 * _LOOKUP_BITS + 1))
                     & ((1 << (2 * nbits)) - 1)) << 2
            bits = _LOOKUP_IJ[bits]
            i += (bits >> (_LOOKUP_BITS + 2)) << (k * _LOOKUP_BITS)
            j += ((bits >> 2) & ((1 << _LOOKUP_BITS) - 1)) << (k * _LOOKUP_BITS)
            bits &= _SWAP_MASK | _INVERT_MASK
        if self.lsb() & 0x1111111111111110:
            bits ^= _SWAP_MASK
        return face, i, j, bits

    def ij_at_level(self) -> tuple[int, int, int]:
        """(face, i, j) scaled to this cell's own level."""
        face, i, j, _ = self.to_face_ij()
        shift = MAX_LEVEL - self.level()
        return face, i >> shift, j >> shift

    def _center_si_ti(self) -> tuple[int, int, int]:
        # Center coordinates on a doubled grid so every level is exact.
        face, i, j, _ = self.to_face_ij()
        if self.is_leaf():
            delta = 1
        elif (i ^ (self.raw >> 2)) & 1:
            delta = 2
        else:
            delta = 0
        return face, 2 * i + delta, 2 * j + delta

    def center(self) -> LatLng:
        """Center of the cell."""
        face, si, ti = self._center_si_ti()
        u = st_to_uv((0.5 / _MAX_SIZE) * si)
        v = st_to_uv((0.5 / _MAX_SIZE) * ti)
        return LatLng.from_point(face_uv_to_xyz(face, u, v))

    # -- tokens ------------------------------------------------------------

    def token(self) -> str:
        """Lowercase hex of the raw id with trailing zero nibbles stripped."""
        return format(self.raw, "016x").rstrip("0")

    def __repr__(self) -> str:
        return f"CellId({self.token()!r})"


def _st_to_ij(s: float) -> int:
    return max(0, min(_MAX_SIZE - 1, int(math.floor(_MAX_SIZE * s))))


# -- module-level operations ----------------------------------------------


def cell_from_latlng(point: LatLng, level: int) -> CellId:
    """The level-`level` cell containing `point`."""
    return CellId.from_latlng(point, level)


def level_of(cell: CellId) -> int:
    return cell.level()


def parent_at(cell: CellId, level: int) -> CellId:
    return cell.parent(level)


def children_of(cell: CellId) -> tuple[CellId, CellId, CellId, CellId]:
    return cell.children()


def cell_center(cell: CellId) -> LatLng:
    return cell.center()


def grid_position(child: CellId, parent: CellId) -> GridPos:
    """Position of `child` in the G x G grid of `parent`'s descendants.

    G = 2**(level(child) - level(parent)). Columns follow increasing i and
    rows follow decreasing j, so the cell with the largest j offset lands
    in row 0. The map over all descendants of one parent is a bijection
    onto the grid.
    """
    delta = child.level() - parent.level()
    if delta < 0 or not parent.contains(child):
        raise ValueError(
            f"cell {child.token()} is not a descendant of {parent.token()}")
    _, ci, cj = child.ij_at_level()
    _, pi, pj = parent.ij_at_level()
    grid = 1 << delta
    i_rel = ci - (pi << delta)
    j_rel = cj - (pj << delta)
    return GridPos(row=(grid - 1) - j_rel, col=i_rel)


def child_at_grid(parent: CellId, row: int, col: int, level: int) -> CellId:
    """Inverse of grid_position: the level-`level` descendant at (row, col)."""
    delta = level - parent.level()
    if delta < 0:
        raise ValueError(f"level {level} is above the parent's level")
    grid = 1 << delta
    if not (0 <= row < grid and 0 <= col < grid):
        raise ValueError(f"grid position ({row}, {col}) outside {grid}x{grid}")
    face, pi, pj = parent.ij_at_level()
    shift = MAX_LEVEL - level
    i = ((pi << delta) + col) << shift
    j = ((pj << delta) + ((grid - 1) - row)) << shift
    return CellId.from_face_ij(face, i, j).parent(level)


def cell_area_km2(cell: CellId) -> float:
    """Exact area of the cell on an Earth-radius sphere, in km^2."""
    face, i, j, _ = cell.to_face_ij()
    size = 1 << (MAX_LEVEL - cell.level())
    i0 = i & -size
    j0 = j & -size
    u0 = st_to_uv(i0 / _MAX_SIZE)
    u1 = st_to_uv((i0 + size) / _MAX_SIZE)
    v0 = st_to_uv(j0 / _MAX_SIZE)
    v1 = st_to_uv((j0 + size) / _MAX_SIZE)
    corners = [_normalize(face_uv_to_xyz(face, u, v))
               for u, v in ((u0, v0), (u1, v0), (u1, v1), (u0, v1))]
    a, b, c, d = corners
    steradians = _triangle_area(a, b, c) + _triangle_area(a, c, d)
    return steradians * EARTH_RADIUS_KM * EARTH_RADIUS_KM


def _normalize(p: tuple[float, float, float]) -> tuple[float, float, float]:
    n = math.sqrt(p[0] * p[0] + p[1] * p[1] + p[2] * p[2])
    return (p[0] / n, p[1] / n, p[2] / n)


def _triangle_area(a, b, c) -> float:
    # Spherical excess via the stable tangent formula.
    triple = (a[0] * (b[1] * c[2] - b[2] * c[1])
              + a[1] * (b[2] * c[0] - b[0] * c[2])
              + a[2] * (b[0] * c[1] - b[1] * c[0]))
    ab = a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
    bc = b[0] * c[0] + b[1] * c[1] + b[2] * c[2]
    ca = c[0] * a[0] + c[1] * a[1] + c[2] * a[2]
    return abs(2.0 * math.atan2(triple, 1.0 + ab + bc + ca))
