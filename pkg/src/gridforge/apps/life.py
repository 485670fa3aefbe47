"""Distributed Conway's Game of Life on a w x h x 1 grid.

Each cell stores [alive, live_neighbor_count]; only the alive byte crosses
ranks. One step: refresh remote copies, count live neighbors over the cached
dependency arrows (non-periodic boundary neighbors simply do not exist), then
apply the B3/S23 rule. The result is identical for every rank count and
partition method.
"""

import numpy as np

from ..exchange import DataContract
from ..geometry import Geometry
from ..mesh import Mesh
from ..topology import Topology, id_from
from ..transport import gather_to_root

LIFE_TAG = 1
GATHER_BOARD_TAG = (4 << 24) | 2


class LifeContract(DataContract):
    def max_payload(self, tag):
        return 1

    def serialize(self, data, tag):
        return bytes([data[0]])

    def deserialize(self, data, tag, payload):
        data[0] = payload[0]
        return data


PATTERNS = ("blinker", "glider", "glider-blinker", "block")


def pattern_cells(name: str, width: int, height: int) -> set[tuple[int, int]]:
    """Live (x, y) seeds of a named pattern, placed deterministically."""
    cx, cy = width // 2, height // 2
    if name == "blinker":
        return {(cx, cy - 1), (cx, cy), (cx, cy + 1)}
    if name == "glider":
        return {(1, 3), (2, 3), (3, 3), (3, 2), (2, 1)}
    if name == "glider-blinker":
        glider = {(1, 3), (2, 3), (3, 3), (3, 2), (2, 1)}
        bx, by = width - 3, height - 2
        return glider | {(bx, by - 1), (bx, by), (bx, by + 1)}
    if name == "block":
        return {(cx, cy), (cx + 1, cy), (cx, cy + 1), (cx + 1, cy + 1)}
    raise ValueError(f"unknown pattern {name!r}; choose from {PATTERNS}")


def make_life_mesh(comm, width, height, partition="block", partition_seed=0, seeds=()):
    topo = Topology(width, height, 1, 0)
    mesh = Mesh(
        topo,
        Geometry(level0_size=(1.0, 1.0, 1.0)),
        neighborhood_size=1,
        comm=comm,
        partition_method=partition,
        partition_seed=partition_seed,
        data_factory=lambda: [0, 0],
        data_contract=LifeContract(),
    )
    for x, y in seeds:
        cell = id_from(topo, 0, (x, y, 0))
        if mesh.is_local(cell):
            mesh[cell][0] = 1
    return mesh


def life_step(mesh):
    mesh.update_remote_neighbor_data(LIFE_TAG)
    local = mesh.local_cells().tolist()
    for cell in local:
        count = 0
        for neighbor in mesh.neighbors_of(cell).tolist():
            count += mesh.data[neighbor][0]
        mesh.data[cell][1] = count
    for cell in local:
        data = mesh.data[cell]
        if data[0]:
            if data[1] < 2 or data[1] > 3:
                data[0] = 0
        elif data[1] == 3:
            data[0] = 1


def gather_board(mesh, width, height):
    """Full board as a (height, width) uint8 array on rank 0; None elsewhere."""
    local = mesh.local_cells()
    state = np.array(
        [[cell, mesh.data[cell][0]] for cell in local.tolist()], dtype=np.int64
    ).reshape(len(local), 2)
    blocks = gather_to_root(mesh.comm, state.tobytes(), GATHER_BOARD_TAG)
    if blocks is None:
        return None
    board = np.zeros((height, width), dtype=np.uint8)
    for block in blocks:
        table = np.frombuffer(block, dtype=np.int64).reshape(-1, 2)
        for cell, alive in table.tolist():
            x = (cell - 1) % width
            y = (cell - 1) // width
            board[y, x] = alive
    return board


def gol_run(comm, width, height, steps, partition="block", pattern="glider-blinker",
            partition_seed=0, print_stats=False):
    """Run the distributed game; returns the final board on rank 0."""
    if width < 1 or height < 1:
        raise ValueError(f"board must be at least 1x1, got {width}x{height}")
    seeds = pattern_cells(pattern, width, height)
    mesh = make_life_mesh(comm, width, height, partition, partition_seed, seeds)
    for step in range(steps):
        life_step(mesh)
        if print_stats:
            alive = sum(mesh.data[c][0] for c in mesh.local_cells().tolist())
            blocks = gather_to_root(mesh.comm, str(alive).encode(), GATHER_BOARD_TAG + 1)
            if blocks is not None:
                total = sum(int(b) for b in blocks)
                fc = mesh.local_cell_fraction()
                print(f"step={step + 1} cells={width * height} mass={total} fc={fc:g} dt=1")
    return gather_board(mesh, width, height)


def serial_reference(width, height, steps, pattern="glider-blinker"):
    """Plain-array Game of Life with dead boundary, as an independent oracle."""
    board = np.zeros((height, width), dtype=np.uint8)
    for x, y in pattern_cells(pattern, width, height):
        board[y, x] = 1
    for _ in range(steps):
        padded = np.zeros((height + 2, width + 2), dtype=np.int32)
        padded[1:-1, 1:-1] = board
        counts = sum(
            padded[1 + dy : height + 1 + dy, 1 + dx : width + 1 + dx]
            for dy in (-1, 0, 1)
            for dx in (-1, 0, 1)
            if (dx, dy) != (0, 0)
        )
        board = ((counts == 3) | ((board == 1) & (counts == 2))).astype(np.uint8)
    return board
