"""Cell-id arithmetic for the refinable cartesian grid.

Every cell is identified by a globally unique positive integer. Ids are laid
out level by level: refinement level 0 occupies ids 1..N0, level 1 the next
N1 = 8*N0 ids, and so on. Within a level, ids increase first in x, then in y,
then in z. Id 0 is reserved as the invalid value.

A cell of refinement level ``l`` spans ``2**(L - l)`` positions per dimension
of the finest index lattice ``[0, 2**L * n_i - 1]`` and is located at the
corner of its span closest to the origin. All arithmetic here is exact
integer arithmetic on immutable values; every function is safe for concurrent
use.
"""

from dataclasses import dataclass, field
from bisect import bisect_right

INVALID_CELL = 0

_U64_MAX = 2**64 - 1


class InvalidCellError(ValueError):
    """Raised for id 0, out-of-range ids, or misaligned/out-of-range indices."""


@dataclass(frozen=True)
class Topology:
    """Immutable grid shape: level-0 extent, maximum refinement level, periodicity.

    Construction fails if the total number of cell ids over all levels does
    not fit in an unsigned 64-bit integer.
    """

    nx: int
    ny: int
    nz: int
    max_level: int
    periodic: tuple[bool, bool, bool] = (False, False, False)

    # level_starts[l] is the first id of level l; the final entry is one past
    # the last valid id, so level_starts has max_level + 2 entries.
    level_starts: tuple[int, ...] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.nx < 1 or self.ny < 1 or self.nz < 1:
            raise ValueError(f"grid extent must be positive, got {(self.nx, self.ny, self.nz)}")
        if self.max_level < 0:
            raise ValueError(f"maximum refinement level must be >= 0, got {self.max_level}")
        n0 = self.nx * self.ny * self.nz
        starts = [1]
        for level in range(self.max_level + 1):
            starts.append(starts[-1] + n0 * 8**level)
        if starts[-1] - 1 > _U64_MAX:
            raise ValueError(
                f"total id count {starts[-1] - 1} exceeds the unsigned 64-bit range"
            )
        object.__setattr__(self, "level_starts", tuple(starts))
        object.__setattr__(self, "periodic", tuple(bool(p) for p in self.periodic))

    @property
    def max_id(self) -> int:
        return self.level_starts[-1] - 1

    def level_count(self, level: int) -> int:
        """Number of possible cells of one refinement level."""
        return self.nx * self.ny * self.nz * 8**level

    def extent(self, dim: int) -> int:
        """Size of the finest index lattice along dimension 0, 1 or 2."""
        return (self.nx, self.ny, self.nz)[dim] << self.max_level

    def extents(self) -> tuple[int, int, int]:
        return (self.nx << self.max_level, self.ny << self.max_level, self.nz << self.max_level)

    def level_dims(self, level: int) -> tuple[int, int, int]:
        """Lattice shape of one refinement level, in cells of that level."""
        return (self.nx << level, self.ny << level, self.nz << level)

    def cell_span(self, level: int) -> int:
        """Width of a level-``level`` cell in finest-lattice indices."""
        return 1 << (self.max_level - level)


def _check_id(topology: Topology, cell: int) -> None:
    if cell < 1 or cell > topology.max_id:
        raise InvalidCellError(f"cell id {cell} outside [1, {topology.max_id}]")


def level_start(topology: Topology, level: int) -> int:
    """First id of a refinement level."""
    if level < 0 or level > topology.max_level:
        raise ValueError(f"refinement level {level} outside [0, {topology.max_level}]")
    return topology.level_starts[level]


def level_of(topology: Topology, cell: int) -> int:
    """Refinement level of a cell id."""
    _check_id(topology, cell)
    return bisect_right(topology.level_starts, cell) - 1


def indices_of(topology: Topology, cell: int) -> tuple[int, int, int]:
    """Finest-lattice indices of the cell corner closest to the origin."""
    level = level_of(topology, cell)
    ordinal = cell - topology.level_starts[level]
    lx, ly, _ = topology.level_dims(level)
    shift = topology.max_level - level
    x = ordinal % lx
    rest = ordinal // lx
    y = rest % ly
    z = rest // ly
    return (x << shift, y << shift, z << shift)


def id_from(topology: Topology, level: int, indices: tuple[int, int, int]) -> int:
    """Inverse of :func:`indices_of` for a given refinement level."""
    if level < 0 or level > topology.max_level:
        raise ValueError(f"refinement level {level} outside [0, {topology.max_level}]")
    shift = topology.max_level - level
    span = 1 << shift
    lx, ly, lz = topology.level_dims(level)
    x, y, z = indices
    for value, dim_len, name in ((x, lx, "x"), (y, ly, "y"), (z, lz, "z")):
        if value % span:
            raise InvalidCellError(
                f"index {name}={value} not aligned to the level-{level} lattice (span {span})"
            )
        if value < 0 or (value >> shift) >= dim_len:
            raise InvalidCellError(f"index {name}={value} out of range at level {level}")
    ordinal = (x >> shift) + lx * ((y >> shift) + ly * (z >> shift))
    return topology.level_starts[level] + ordinal


def children_of(topology: Topology, cell: int) -> list[int]:
    """The 8 cells tiling this cell one level finer, ascending; empty at max level."""
    level = level_of(topology, cell)
    if level == topology.max_level:
        return []
    x, y, z = indices_of(topology, cell)
    half = topology.cell_span(level) >> 1
    return [
        id_from(topology, level + 1, (x + dx, y + dy, z + dz))
        for dz in (0, half)
        for dy in (0, half)
        for dx in (0, half)
    ]


def parent_of(topology: Topology, cell: int) -> int | None:
    """The one-level-coarser cell containing this cell, or None at level 0."""
    level = level_of(topology, cell)
    if level == 0:
        return None
    x, y, z = indices_of(topology, cell)
    span = topology.cell_span(level - 1)
    mask = ~(span - 1)
    return id_from(topology, level - 1, (x & mask, y & mask, z & mask))


def siblings_of(topology: Topology, cell: int) -> list[int]:
    """All children of the cell's parent (the cell included); the cell alone at level 0."""
    parent = parent_of(topology, cell)
    if parent is None:
        return [cell]
    return children_of(topology, parent)


def wrap_indices(
    topology: Topology, raw: tuple[int, int, int]
) -> tuple[int, int, int] | None:
    """Map possibly-out-of-range indices into the grid.

    Periodic dimensions wrap modulo the lattice extent; a non-periodic
    dimension out of range makes the whole position nonexistent (None).
    """
    out = []
    for dim in range(3):
        value = raw[dim]
        extent = topology.extent(dim)
        if topology.periodic[dim]:
            out.append(value % extent)
        elif 0 <= value < extent:
            out.append(value)
        else:
            return None
    return (out[0], out[1], out[2])
