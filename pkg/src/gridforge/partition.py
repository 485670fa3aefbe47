"""Cell partitioning and load balancing.

Four methods are provided natively: BLOCK (contiguous id ranges), RANDOM
(seeded hash), RCB (recursive coordinate bisection of cell centers) and
HILBERT_SFC (contiguous chunks of the 3D Hilbert order); NONE keeps the
current ownership. Every method is a pure function of replicated metadata
plus explicit inputs, so all ranks compute the identical partition with zero
communication; only the cell-data migration itself talks over the wire.

Manual placement: ``pin`` assigns one cell to a fixed rank until ``unpin``;
pins override whatever the partitioner decides.
"""

import numpy as np

from . import kernels
from .hilbert import order_for_extent

METHODS = ("none", "random", "block", "rcb", "hilbert_sfc")

MIGRATE_BALANCE_TAG = (3 << 24) | 1
PIN_SYNC_TAG = (3 << 24) | 3


def _splitmix64(values: np.ndarray) -> np.ndarray:
    z = values + np.uint64(0x9E3779B97F4A7C15)
    z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


def _weights_array(ids, weights):
    if weights is None:
        return np.ones(len(ids), dtype=np.float64)
    w = np.asarray(weights, dtype=np.float64)
    if len(w) != len(ids):
        raise ValueError(f"{len(w)} weights for {len(ids)} cells")
    if (w <= 0).any():
        raise ValueError("cell weights must be positive")
    return w


def _chunk_by_weight(order: np.ndarray, weights: np.ndarray, size: int) -> np.ndarray:
    """Split an ordering into ``size`` contiguous chunks of near-equal weight;
    returns owners aligned with ``order``."""
    owners = np.zeros(len(order), dtype=np.int32)
    if len(order) == 0:
        return owners
    cum = np.cumsum(weights[order])
    total = cum[-1]
    cuts = total * (np.arange(1, size) / size)
    boundaries = np.searchsorted(cum, cuts, side="right")
    owners_sorted = np.zeros(len(order), dtype=np.int32)
    for rank, (lo, hi) in enumerate(zip(np.concatenate(([0], boundaries)), np.concatenate((boundaries, [len(order)])))):
        owners_sorted[lo:hi] = rank
    owners[order] = owners_sorted
    return owners


def _doubled_centers(topology, ids):
    """Index-space cell centers doubled to stay integral across levels."""
    starts = np.asarray(topology.level_starts, dtype=np.int64)
    levels, x, y, z = kernels.decode(
        np.asarray(ids, dtype=np.int64), topology.nx, topology.ny, topology.nz, topology.max_level, starts
    )
    span = np.int64(1) << (topology.max_level - levels)
    return np.stack((2 * x + span, 2 * y + span, 2 * z + span), axis=1)


def hilbert_rank_order(topology, ids) -> np.ndarray:
    """Total order of cells along the 3D Hilbert curve (ties by cell id).

    Keys are the Hilbert indices of the cells' index-space centers on a cube
    of side 2**q covering the largest lattice extent.
    """
    ids = np.asarray(ids, dtype=np.int64)
    starts = np.asarray(topology.level_starts, dtype=np.int64)
    levels, x, y, z = kernels.decode(ids, topology.nx, topology.ny, topology.nz, topology.max_level, starts)
    half = (np.int64(1) << (topology.max_level - levels)) >> 1
    order = order_for_extent(max(topology.extents()))
    keys = kernels.hilbert_keys(order, x + half, y + half, z + half)
    return np.lexsort((ids, keys))


def _rcb(centers, weights, ids, size) -> np.ndarray:
    owners = np.zeros(len(ids), dtype=np.int32)

    def split(subset: np.ndarray, rank_lo: int, rank_count: int):
        if rank_count == 1 or len(subset) == 0:
            owners[subset] = rank_lo
            return
        left_ranks = rank_count // 2
        sub_centers = centers[subset]
        spreads = sub_centers.max(axis=0) - sub_centers.min(axis=0) if len(subset) else np.zeros(3)
        axis = int(np.argmax(spreads))
        order = np.lexsort((ids[subset], sub_centers[:, axis]))
        ordered = subset[order]
        cum = np.cumsum(weights[ordered])
        total = cum[-1]
        cut = int(np.searchsorted(cum, total * left_ranks / rank_count, side="right"))
        split(ordered[:cut], rank_lo, left_ranks)
        split(ordered[cut:], rank_lo + left_ranks, rank_count - left_ranks)

    split(np.arange(len(ids)), 0, size)
    return owners


def compute_partition(method, topology, geometry, ids, weights, size, seed=0) -> np.ndarray:
    """Owner rank per cell (aligned with ``ids``), as a pure function.

    ``none`` maps everything to rank 0 here; balance_load special-cases it to
    keep current ownership.
    """
    method = method.lower()
    if method not in METHODS:
        raise ValueError(f"unknown partition method {method!r}; choose from {METHODS}")
    if size < 1:
        raise ValueError("rank count must be >= 1")
    ids = np.asarray(ids, dtype=np.int64)
    if method == "none" or size == 1:
        return np.zeros(len(ids), dtype=np.int32)
    w = _weights_array(ids, weights)
    if method == "block":
        return _chunk_by_weight(np.arange(len(ids)), w, size)
    if method == "random":
        mixed = _splitmix64(ids.astype(np.uint64) ^ np.uint64(seed & (2**64 - 1)))
        return (mixed % np.uint64(size)).astype(np.int32)
    if method == "hilbert_sfc":
        return _chunk_by_weight(hilbert_rank_order(topology, ids), w, size)
    return _rcb(_doubled_centers(topology, ids), w, ids, size)


def _sync_pins(mesh):
    """Replicate pending pin/unpin calls on every rank, in rank+call order."""
    import struct

    record = struct.Struct("<qqi")
    blob = b"".join(
        record.pack(1 if op == "pin" else 0, cell, rank) for op, cell, rank in mesh._pending_pins
    )
    blocks = mesh.comm.allgather(blob)
    for block in blocks:
        for off in range(0, len(block), record.size):
            op, cell, rank = record.unpack_from(block, off)
            if op:
                mesh._pins[cell] = rank
            else:
                mesh._pins.pop(cell, None)
    mesh._pending_pins.clear()
    for cell in list(mesh._pins):
        if not mesh.exists(cell):
            del mesh._pins[cell]


def balance_load(mesh, method, seed=0, weights=None) -> int:
    """Collective repartition + transparent cell-data migration.

    Every rank computes the identical new ownership from replicated metadata,
    moved cells' data travels point-to-point, and the replicated table plus
    arrow lists and transfer plans are rebuilt. Returns the number of moved
    cells.
    """
    comm = mesh.comm
    _sync_pins(mesh)
    if method.lower() == "none":
        new_owners = mesh.all_owners.copy()
    else:
        new_owners = compute_partition(
            method, mesh.topology, mesh.geometry, mesh.all_ids, weights, comm.size, seed
        )
    if mesh._pins:
        pin_ids = np.fromiter(mesh._pins.keys(), dtype=np.int64, count=len(mesh._pins))
        pin_ranks = np.fromiter(mesh._pins.values(), dtype=np.int32, count=len(mesh._pins))
        pos = np.searchsorted(mesh.all_ids, pin_ids)
        new_owners[pos] = pin_ranks

    moved = new_owners != mesh.all_owners
    moved_ids = mesh.all_ids[moved]
    moved_from = mesh.all_owners[moved]
    moved_to = new_owners[moved]

    me = comm.rank
    with_data = mesh.data_factory is not None
    receives = []
    if with_data:
        for cell, src, dst in zip(moved_ids.tolist(), moved_from.tolist(), moved_to.tolist()):
            if src == me:
                comm.post_send(int(dst), MIGRATE_BALANCE_TAG, mesh.data_contract.pack_cell(mesh.data[cell]))
            elif dst == me:
                receives.append((cell, comm.post_receive(int(src), MIGRATE_BALANCE_TAG, 1 << 31)))

    mesh._rebuild_structure(mesh.all_ids, new_owners.astype(np.int32))
    mesh._refresh_data_store()
    for cell, handle in receives:
        mesh.data[cell] = mesh.data_contract.unpack_cell(handle.wait())
    return int(moved.sum())
