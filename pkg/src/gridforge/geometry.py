"""Physical geometry of the grid.

Only the homogeneous cartesian geometry is provided: cells of equal
refinement level are identical in size and a level-(l+1) cell has half the
edge length of a level-l cell. The mapping from index space to physical
space is a separate, swappable layer so alternate geometries can be added
without touching id arithmetic.
"""

from dataclasses import dataclass

from .topology import Topology, indices_of, level_of


@dataclass(frozen=True)
class Geometry:
    """Origin of the grid and physical size of one level-0 cell per dimension."""

    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)
    level0_size: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        if any(s <= 0 for s in self.level0_size):
            raise ValueError(f"level-0 cell size must be positive, got {self.level0_size}")

    def index_unit(self, topology: Topology, dim: int) -> float:
        """Physical length of one finest-lattice index step."""
        return self.level0_size[dim] / (1 << topology.max_level)


def cell_size(topology: Topology, geometry: Geometry, cell: int) -> tuple[float, float, float]:
    """Physical edge lengths of a cell."""
    level = level_of(topology, cell)
    return tuple(s / (1 << level) for s in geometry.level0_size)


def cell_bounding_box(
    topology: Topology, geometry: Geometry, cell: int
) -> tuple[tuple[float, float, float], tuple[float, float, float]]:
    """Axis-aligned physical extent (min corner, max corner) of a cell.

    Children exactly tile their parent's box: corners are computed from
    integer lattice indices scaled by a constant unit per dimension.
    """
    level = level_of(topology, cell)
    idx = indices_of(topology, cell)
    span = topology.cell_span(level)
    lo = []
    hi = []
    for dim in range(3):
        unit = geometry.index_unit(topology, dim)
        lo.append(geometry.origin[dim] + idx[dim] * unit)
        hi.append(geometry.origin[dim] + (idx[dim] + span) * unit)
    return (lo[0], lo[1], lo[2]), (hi[0], hi[1], hi[2])


def cell_center(topology: Topology, geometry: Geometry, cell: int) -> tuple[float, float, float]:
    """Physical center of a cell; always strictly inside its bounding box."""
    level = level_of(topology, cell)
    idx = indices_of(topology, cell)
    span = topology.cell_span(level)
    out = []
    for dim in range(3):
        unit = geometry.index_unit(topology, dim)
        out.append(geometry.origin[dim] + (idx[dim] + span * 0.5) * unit)
    return (out[0], out[1], out[2])
