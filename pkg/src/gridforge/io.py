"""Grid dumps and VTK export.

The dump is a line-oriented text format:

    dccrg-dump 1 <nx> <ny> <nz> <max_level>
    <id> <level> <ix> <iy> <iz> <values...>

one line per existing cell, sorted by id, values in shortest round-trip
decimal. In multi-rank runs per-cell values are gathered to rank 0 with
point-to-point messages (bitwise, as 8-byte doubles), so the written bytes do
not depend on the rank count or partition.
"""

import struct

import numpy as np

from .geometry import cell_bounding_box
from .topology import indices_of, level_of
from .transport import gather_to_root

GATHER_DUMP_TAG = (4 << 24) | 1


def format_value(value: float) -> str:
    """Shortest decimal that round-trips through float()."""
    text = repr(float(value))
    return text[:-2] if text.endswith(".0") else text


def _gather_values(mesh, values_of, tag, width):
    """(ids, value rows) for every cell, on rank 0; None elsewhere.

    ``width`` is the fixed number of values per cell; gathering it by
    communication would add a collective to phases that must not have one.
    """
    local = mesh.local_cells().tolist()
    if local:
        table = np.array(
            [[float(c) for c in (cell, *values_of(cell))] for cell in local], dtype=np.float64
        )
        if table.shape[1] != width + 1:
            raise ValueError(f"values_of returned {table.shape[1] - 1} values, expected {width}")
    else:
        table = np.empty((0, width + 1), dtype=np.float64)
    blob = struct.pack("<q", len(local)) + table.tobytes()
    blocks = gather_to_root(mesh.comm, blob, tag)
    if blocks is None:
        return None
    ids = []
    values = []
    for block in blocks:
        (count,) = struct.unpack_from("<q", block, 0)
        table = np.frombuffer(block, dtype=np.float64, offset=8).reshape(count, width + 1)
        ids.append(table[:, 0].astype(np.int64))
        values.append(table[:, 1:])
    ids = np.concatenate(ids)
    values = np.concatenate(values)
    order = np.argsort(ids, kind="stable")
    return ids[order], values[order]


def dump_grid(mesh, path, values_of, width=1) -> bool:
    """Write the dump; returns True on the writing rank (0), False elsewhere.

    ``values_of(cell)`` gives the ``width`` payload values of one local cell.
    """
    gathered = _gather_values(mesh, values_of, GATHER_DUMP_TAG, width)
    if gathered is None:
        return False
    ids, values = gathered
    topo = mesh.topology
    lines = [f"dccrg-dump 1 {topo.nx} {topo.ny} {topo.nz} {topo.max_level}"]
    for cell, row in zip(ids.tolist(), values):
        level = level_of(topo, cell)
        ix, iy, iz = indices_of(topo, cell)
        parts = [str(cell), str(level), str(ix), str(iy), str(iz)]
        parts.extend(format_value(v) for v in row)
        lines.append(" ".join(parts))
    with open(path, "w") as handle:
        handle.write("\n".join(lines) + "\n")
    return True


def parse_dump(path):
    """Inverse of dump_grid: ((nx, ny, nz, max_level), [(id, level, indices, values)])."""
    with open(path) as handle:
        header = handle.readline().split()
        if header[:2] != ["dccrg-dump", "1"]:
            raise ValueError(f"not a dccrg-dump file: {path}")
        shape = tuple(int(v) for v in header[2:6])
        records = []
        for line in handle:
            fields = line.split()
            if not fields:
                continue
            records.append(
                (
                    int(fields[0]),
                    int(fields[1]),
                    (int(fields[2]), int(fields[3]), int(fields[4])),
                    tuple(float(v) for v in fields[5:]),
                )
            )
    return shape, records


# VTK hexahedron corner order: bottom quad counter-clockwise, then top.
_VTK_CORNERS = ((0, 0, 0), (1, 0, 0), (1, 1, 0), (0, 1, 0), (0, 0, 1), (1, 0, 1), (1, 1, 1), (0, 1, 1))


def export_vtk(mesh, path, values_of, width=1, value_name="value") -> bool:
    """Legacy ASCII VTK unstructured grid of hexahedra with cell data."""
    gathered = _gather_values(mesh, values_of, GATHER_DUMP_TAG, width)
    if gathered is None:
        return False
    ids, values = gathered
    topo = mesh.topology
    with open(path, "w") as out:
        out.write("# vtk DataFile Version 2.0\n")
        out.write("gridforge grid\n")
        out.write("ASCII\n")
        out.write("DATASET UNSTRUCTURED_GRID\n")
        n = len(ids)
        out.write(f"POINTS {8 * n} double\n")
        for cell in ids.tolist():
            lo, hi = cell_bounding_box(topo, mesh.geometry, cell)
            for cx, cy, cz in _VTK_CORNERS:
                out.write(
                    f"{lo[0] if cx == 0 else hi[0]} {lo[1] if cy == 0 else hi[1]} "
                    f"{lo[2] if cz == 0 else hi[2]}\n"
                )
        out.write(f"CELLS {n} {9 * n}\n")
        for k in range(n):
            base = 8 * k
            out.write("8 " + " ".join(str(base + j) for j in range(8)) + "\n")
        out.write(f"CELL_TYPES {n}\n")
        out.write("12\n" * n)
        out.write(f"CELL_DATA {n}\n")
        width = values.shape[1] if values.ndim == 2 else 0
        for column in range(width):
            name = value_name if width == 1 else f"{value_name}{column}"
            out.write(f"SCALARS {name} double\nLOOKUP_TABLE default\n")
            for v in values[:, column].tolist():
                out.write(f"{format_value(v)}\n")
        out.write("SCALARS level int\nLOOKUP_TABLE default\n")
        for cell in ids.tolist():
            out.write(f"{level_of(topo, cell)}\n")
        owners = mesh.owners_of_ids(ids)
        out.write("SCALARS owner int\nLOOKUP_TABLE default\n")
        for owner in owners.tolist():
            out.write(f"{owner}\n")
    return True
