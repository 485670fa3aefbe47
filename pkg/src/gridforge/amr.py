"""Adaptive mesh refinement engine.

Refine/unrefine requests are queued per rank; ``stop_refining`` is the
collective commit. Induced refinement keeps the 2:1 rule: whenever a cell is
about to be refined, every neighbor of a lower refinement level is refined
too, recursively, with the newly induced ids exchanged between ranks through
a variable-length allgather after each sweep and a reduction deciding whether
another sweep is needed. A set of cells can only gain one level per commit.

Unrefinement replaces a full sibling group by its parent and never cascades.
A group is dropped when a sibling is being refined, is itself refined, has a
smaller neighbor, or has a same-size neighbor about to be refined; for
neighborhood sizes >= 1 an additional scan over the would-be parent's (wider)
neighborhood drops groups whose parent would end up next to a cell more than
one level finer.
"""

import math
from dataclasses import dataclass

import numpy as np

from .topology import indices_of, level_of, wrap_indices

MIGRATE_UNREFINE_TAG = (3 << 24) | 2


class BalanceError(AssertionError):
    """A neighboring pair differs by more than one refinement level."""


# ------------------------------------------------------------------- requests


def request_refine(mesh, cell):
    if not mesh.is_local(cell):
        raise ValueError(f"cell {cell} is not local to rank {mesh.comm.rank}")
    if level_of(mesh.topology, cell) >= mesh.topology.max_level:
        raise ValueError(f"cell {cell} is already at the maximum refinement level")
    if cell in mesh._unrefine_requests:
        raise ValueError(f"cell {cell} already queued for unrefinement")
    mesh._refine_requests.add(cell)


def request_unrefine(mesh, cell):
    if not mesh.is_local(cell):
        raise ValueError(f"cell {cell} is not local to rank {mesh.comm.rank}")
    if level_of(mesh.topology, cell) == 0:
        raise ValueError(f"cell {cell} is at refinement level 0")
    if cell in mesh._refine_requests:
        raise ValueError(f"cell {cell} already queued for refinement")
    mesh._unrefine_requests.add(cell)


# ------------------------------------------------------------------ id blocks


def _pack_ids(ids) -> bytes:
    return np.asarray(sorted(ids), dtype=np.int64).tobytes()


def _unpack_blocks(blocks) -> np.ndarray:
    parts = [np.frombuffer(b, dtype=np.int64) for b in blocks if b]
    if not parts:
        return np.empty(0, dtype=np.int64)
    return np.unique(np.concatenate(parts))


# ------------------------------------------------------- induced refinement


def _levels_of_ids(mesh, ids):
    return np.searchsorted(mesh._starts, ids, side="right") - 1


def _sorted_member(values: np.ndarray, table: np.ndarray) -> np.ndarray:
    """Membership mask of values in a sorted id table."""
    if len(table) == 0 or len(values) == 0:
        return np.zeros(len(values), dtype=bool)
    pos = np.minimum(np.searchsorted(table, values), len(table) - 1)
    return table[pos] == values


def _induced_local(mesh, refine_set, added: np.ndarray) -> list[int]:
    """Local cells whose level is below a newly refining arrow-neighbor's."""
    if len(added) == 0 or len(mesh.local_ids) == 0:
        return []
    local_levels = _levels_of_ids(mesh, mesh.local_ids)
    out = set()
    for offsets, ids in ((mesh._of_offsets, mesh._of_ids), (mesh._to_offsets, mesh._to_ids)):
        if len(ids) == 0:
            continue
        hit = _sorted_member(ids, added)
        if not hit.any():
            continue
        hit_idx = np.nonzero(hit)[0]
        slots = np.searchsorted(offsets, hit_idx, side="right") - 1
        cond = _levels_of_ids(mesh, ids[hit_idx]) > local_levels[slots]
        out.update(mesh.local_ids[slots[cond]].tolist())
    return [c for c in out if c not in refine_set]


# ------------------------------------------------------- unrefine filtering


def _window_hits(mesh, lo, hi, cand_level):
    """Existing level-``cand_level`` cells intersecting a 3D index window,
    periodic-aware. lo/hi are per-dimension inclusive bounds."""
    topo = mesh.topology
    sel = mesh.all_levels == cand_level
    if not sel.any():
        return np.empty(0, dtype=np.int64)
    span = topo.cell_span(cand_level)
    cx, cy, cz = mesh.all_x[sel], mesh.all_y[sel], mesh.all_z[sel]
    mask = np.ones(len(cx), dtype=bool)
    for pos, dim in ((cx, 0), (cy, 1), (cz, 2)):
        extent = topo.extent(dim)
        width = hi[dim] - lo[dim] + 1
        if topo.periodic[dim]:
            if width >= extent:
                continue
            u = (pos - lo[dim]) % extent
            mask &= (u < width) | (u > extent - span)
        else:
            mask &= (pos + span - 1 >= lo[dim]) & (pos <= hi[dim])
    return mesh.all_ids[sel][mask]


def _parent_reach_violation(mesh, parent, refine_set) -> bool:
    """Would the restored parent sit within one neighborhood of a cell more
    than one level finer (counting cells about to be refined)? n >= 1 only."""
    topo = mesh.topology
    n = mesh.neighborhood_size
    p_level = level_of(mesh.topology, parent)
    p_span = topo.cell_span(p_level)
    px, py, pz = indices_of(topo, parent)
    for cand_level in range(p_level + 1, topo.max_level + 1):
        cand_span = topo.cell_span(cand_level)
        for radius in {n * p_span, n * cand_span}:
            lo = (px - radius, py - radius, pz - radius)
            hi = (px + p_span - 1 + radius, py + p_span - 1 + radius, pz + p_span - 1 + radius)
            hits = _window_hits(mesh, lo, hi, cand_level)
            if len(hits) == 0:
                continue
            if cand_level >= p_level + 2:
                return True
            # cand_level == p_level + 1: only cells about to gain a level count
            if _sorted_member(hits, refine_set).any():
                return True
    return False




def _segment_gather(offsets, slots):
    """Flattened CSR segments of the given slots: (row indices, entry indices)."""
    lengths = offsets[slots + 1] - offsets[slots]
    rows = np.repeat(np.arange(len(slots)), lengths)
    if len(rows) == 0:
        return rows, rows
    # consecutive entry indices within each selected segment
    first = np.repeat(offsets[slots], lengths)
    steps = np.arange(len(rows)) - np.repeat(np.cumsum(lengths) - lengths, lengths)
    return rows, first + steps


def _local_vetoes(mesh, candidates: np.ndarray, refine_arr) -> np.ndarray:
    """Candidate groups this rank must drop because a local sibling has a
    finer arrow-neighbor or a same-size one about to be refined."""
    if len(candidates) == 0:
        return candidates
    siblings = _children_table(mesh, candidates).reshape(-1)
    pos = np.minimum(np.searchsorted(mesh.local_ids, siblings), max(len(mesh.local_ids) - 1, 0))
    is_local = (
        (mesh.local_ids[pos] == siblings) if len(mesh.local_ids) else np.zeros(len(siblings), dtype=bool)
    )
    sib_veto = np.zeros(len(siblings), dtype=bool)
    local_rows = np.nonzero(is_local)[0]
    slots = pos[local_rows]
    sib_levels = _levels_of_ids(mesh, siblings[local_rows])
    for offsets, ids in ((mesh._of_offsets, mesh._of_ids), (mesh._to_offsets, mesh._to_ids)):
        if len(ids) == 0 or len(slots) == 0:
            continue
        rows, entries = _segment_gather(offsets, slots)
        targets = ids[entries]
        lev = _levels_of_ids(mesh, targets)
        bad = lev > sib_levels[rows]
        if len(refine_arr):
            bad |= (lev == sib_levels[rows]) & _sorted_member(targets, refine_arr)
        if bad.any():
            np.logical_or.at(sib_veto, local_rows[rows[bad]], True)
    return candidates[sib_veto.reshape(-1, 8).any(axis=1)]


# ------------------------------------------------------------------- commit


def default_prolong(parent_value):
    """Copy-down: every child starts from the parent's value."""
    import copy

    return [copy.deepcopy(parent_value) for _ in range(8)]


def default_restrict(child_values):
    """Average-up for numeric cell data (exactly conservative with the 1/8
    volume ratio)."""
    total = child_values[0]
    for value in child_values[1:]:
        total = total + value
    return total / 8


# child corner offsets in sibling order (x fastest, ids ascending)
_CHILD_DX = np.array([0, 1, 0, 1, 0, 1, 0, 1], dtype=np.int64)
_CHILD_DY = np.array([0, 0, 1, 1, 0, 0, 1, 1], dtype=np.int64)
_CHILD_DZ = np.array([0, 0, 0, 0, 1, 1, 1, 1], dtype=np.int64)


def _children_table(mesh, parents: np.ndarray) -> np.ndarray:
    """Parents-by-8 child id table from pure id arithmetic (the parents need
    not exist as cells)."""
    from . import kernels

    topo = mesh.topology
    levels, x, y, z = kernels.decode(parents, topo.nx, topo.ny, topo.nz, topo.max_level, mesh._starts)
    half = (np.int64(1) << (topo.max_level - levels)) >> 1
    hrep = np.repeat(half, 8)
    cx = np.repeat(x, 8) + np.tile(_CHILD_DX, len(parents)) * hrep
    cy = np.repeat(y, 8) + np.tile(_CHILD_DY, len(parents)) * hrep
    cz = np.repeat(z, 8) + np.tile(_CHILD_DZ, len(parents)) * hrep
    children = kernels.encode(
        np.repeat(levels + 1, 8), cx, cy, cz, topo.nx, topo.ny, topo.nz, topo.max_level, mesh._starts
    )
    return children.reshape(len(parents), 8)


def _parents_of(mesh, cells: np.ndarray) -> np.ndarray:
    """Unique parent ids of the given cells (which must be above level 0)."""
    from . import kernels

    topo = mesh.topology
    levels, x, y, z = kernels.decode(cells, topo.nx, topo.ny, topo.nz, topo.max_level, mesh._starts)
    shift = topo.max_level - levels + 1
    return np.unique(
        kernels.encode(
            levels - 1,
            (x >> shift) << shift,
            (y >> shift) << shift,
            (z >> shift) << shift,
            topo.nx,
            topo.ny,
            topo.nz,
            topo.max_level,
            mesh._starts,
        )
    )


def stop_refining(mesh):
    topo, comm = mesh.topology, mesh.comm
    refine_set: set[int] = set()
    new_local = list(mesh._refine_requests)
    while True:
        incoming = _unpack_blocks(comm.allgather(_pack_ids(new_local)))
        if refine_set:
            table = np.fromiter(refine_set, dtype=np.int64, count=len(refine_set))
            table.sort()
            fresh = incoming[~_sorted_member(incoming, table)]
        else:
            fresh = incoming
        refine_set.update(fresh.tolist())
        if comm.allreduce(len(fresh), "sum") == 0:
            break
        new_local = _induced_local(mesh, refine_set, fresh)

    refine_arr = np.fromiter(refine_set, dtype=np.int64, count=len(refine_set))
    refine_arr.sort()

    # unrefine candidates, normalized to sibling groups keyed by parent id
    if mesh._unrefine_requests:
        requested = np.fromiter(mesh._unrefine_requests, dtype=np.int64, count=len(mesh._unrefine_requests))
        local_parents = _parents_of(mesh, requested)
    else:
        local_parents = np.empty(0, dtype=np.int64)
    candidates = _unpack_blocks(comm.allgather(local_parents.tobytes()))
    vetoes = _local_vetoes(mesh, candidates, refine_arr)
    vetoed = _unpack_blocks(comm.allgather(vetoes.tobytes()))
    survivors = []
    survivor_groups = {}
    if len(candidates):
        ok = ~_sorted_member(candidates, vetoed)
        groups = _children_table(mesh, candidates)
        flat = groups.reshape(-1)
        ok &= _sorted_member(flat, mesh.all_ids).reshape(-1, 8).all(axis=1)
        ok &= ~_sorted_member(flat, refine_arr).reshape(-1, 8).any(axis=1)
        for row in np.nonzero(ok)[0].tolist():
            parent = int(candidates[row])
            if mesh.neighborhood_size >= 1 and _parent_reach_violation(mesh, parent, refine_arr):
                continue
            survivors.append(parent)
            survivor_groups[parent] = groups[row].tolist()

    empty = np.empty(0, dtype=np.int64)
    if not refine_set and not survivors:
        mesh._refine_requests.clear()
        mesh._unrefine_requests.clear()
        return empty, empty

    with_data = mesh.data_factory is not None
    prolong = mesh.prolong if mesh.prolong is not None else default_prolong
    restrict = mesh.restrict if mesh.restrict is not None else default_restrict
    me = comm.rank

    children = _children_table(mesh, refine_arr)
    refine_owners = mesh.all_owners[np.searchsorted(mesh.all_ids, refine_arr)]

    # stage data movements before touching the table
    prolong_jobs = []
    restrict_jobs = []
    if with_data:
        for row in np.nonzero(refine_owners == me)[0]:
            cell = int(refine_arr[row])
            prolong_jobs.append((children[row].tolist(), mesh.data[cell]))
    unref_children = []
    unref_owners = []
    if survivors:
        sib_flat = np.concatenate([np.asarray(survivor_groups[p], dtype=np.int64) for p in survivors])
        sib_owner_flat = mesh.all_owners[np.searchsorted(mesh.all_ids, sib_flat)]
    for row, parent in enumerate(survivors):
        group = survivor_groups[parent]
        owners = sib_owner_flat[8 * row : 8 * row + 8]
        receiver = int(owners[0])
        unref_children.extend(group)
        unref_owners.append(receiver)
        if not with_data or (owners == receiver).all() and receiver != me:
            continue
        if me == receiver:
            slots = []
            for sib, owner in zip(group, owners.tolist()):
                if owner == me:
                    slots.append(mesh.data[sib])
                else:
                    slots.append(comm.post_receive(owner, MIGRATE_UNREFINE_TAG, 1 << 31))
            restrict_jobs.append((parent, slots))
        else:
            for sib, owner in zip(group, owners.tolist()):
                if owner == me:
                    comm.post_send(receiver, MIGRATE_UNREFINE_TAG, mesh.data_contract.pack_cell(mesh.data[sib]))

    # identical structural update on every rank, from arrays
    removed = np.concatenate((refine_arr, np.asarray(unref_children, dtype=np.int64)))
    removed.sort()
    created_ids = np.concatenate((children.reshape(-1), np.asarray(survivors, dtype=np.int64)))
    created_owners = np.concatenate(
        (np.repeat(refine_owners, 8), np.asarray(unref_owners, dtype=np.int32))
    ).astype(np.int32)
    keep = ~_sorted_member(mesh.all_ids, removed)
    new_ids = np.concatenate((mesh.all_ids[keep], created_ids))
    new_owners = np.concatenate((mesh.all_owners[keep], created_owners))
    order = np.argsort(new_ids, kind="stable")
    mesh._rebuild_structure(new_ids[order], new_owners[order])
    mesh._refresh_data_store()

    for child_list, parent_value in prolong_jobs:
        values = prolong(parent_value)
        for child, value in zip(child_list, values):
            mesh.data[child] = value
    for parent, slots in restrict_jobs:
        values = [
            mesh.data_contract.unpack_cell(slot.wait()) if hasattr(slot, "wait") else slot
            for slot in slots
        ]
        mesh.data[parent] = restrict(values)

    mesh._refine_requests.clear()
    mesh._unrefine_requests.clear()
    created = np.sort(created_ids)
    return created, removed


# ------------------------------------------------------------ balance check


def check_balance(mesh, full=False):
    """Raise BalanceError if any neighboring pair violates the 2:1 rule."""
    for offsets, ids in ((mesh._of_offsets, mesh._of_ids), (mesh._to_offsets, mesh._to_ids)):
        if len(ids) == 0:
            continue
        target_lev = _levels_of_ids(mesh, ids)
        slots = np.searchsorted(offsets, np.arange(len(ids)), side="right") - 1
        own_lev = _levels_of_ids(mesh, mesh.local_ids)[slots]
        bad = np.abs(target_lev - own_lev) > 1
        if bad.any():
            k = int(np.nonzero(bad)[0][0])
            raise BalanceError(
                f"cells {int(mesh.local_ids[slots[k]])} and {int(ids[k])} differ by more than one level"
            )
    if not full:
        return True
    topo = mesh.topology
    n = mesh.neighborhood_size
    for cell in mesh.local_ids.tolist():
        level = level_of(topo, cell)
        span = topo.cell_span(level)
        x, y, z = indices_of(topo, cell)
        if n >= 1:
            for cand_level in range(topo.max_level + 1):
                if abs(cand_level - level) <= 1:
                    continue
                cand_span = topo.cell_span(cand_level)
                for radius in {n * span, n * cand_span}:
                    lo = (x - radius, y - radius, z - radius)
                    hi = (x + span - 1 + radius, y + span - 1 + radius, z + span - 1 + radius)
                    hits = _window_hits(mesh, lo, hi, cand_level)
                    if len(hits):
                        raise BalanceError(
                            f"cell {cell} (level {level}) has level-{cand_level} cell "
                            f"{int(hits[0])} within its neighborhood"
                        )
        else:
            for axis, step in ((a, s) for a in range(3) for s in (-1, 1)):
                base = [x, y, z]
                base[axis] += span if step > 0 else -1
                for da in range(0, span, 1):
                    for db in range(0, span, 1):
                        probe = list(base)
                        others = [d for d in range(3) if d != axis]
                        probe[others[0]] = base[others[0]] + da
                        probe[others[1]] = base[others[1]] + db
                        wrapped = wrap_indices(topo, (probe[0], probe[1], probe[2]))
                        if wrapped is None:
                            continue
                        found = mesh.find_smallest_existing(wrapped)
                        if found is not None and abs(level_of(topo, found) - level) > 1:
                            raise BalanceError(
                                f"cell {cell} (level {level}) touches cell {found} "
                                f"(level {level_of(topo, found)}) across a face"
                            )
    return True


# ------------------------------------------------- refinement index (alpha)


@dataclass(frozen=True)
class FaceState:
    """Conserved state on one side of a cell interface."""

    rho: float
    energy: float
    momentum: tuple[float, float, float] = (0.0, 0.0, 0.0)
    b1: tuple[float, float, float] = (0.0, 0.0, 0.0)
    velocity: tuple[float, float, float] = (0.0, 0.0, 0.0)


MU0 = 4.0e-7 * math.pi


def _norm2(a, b):
    return (a[0] - b[0]) ** 2 + (a[1] - b[1]) ** 2 + (a[2] - b[2]) ** 2


def compute_refinement_index(s1: FaceState, s2: FaceState, v_wave: float, mu0: float = MU0) -> float:
    """Refinement index of one cell interface.

    Largest of: relative density jump, relative total-energy jump, squared
    momentum jump over twice the smaller rho*U1 product, squared magnetic
    perturbation jump over twice mu0 times the smaller U1, relative magnetic
    perturbation magnitude jump, and squared velocity shear over the smaller
    v**2 plus (0.01 * v_wave)**2. Hats are minima over the two cells.
    """
    if v_wave < 0:
        raise ValueError("maximum interface wave velocity must be non-negative")
    rho_hat = min(s1.rho, s2.rho)
    u_hat = min(s1.energy, s2.energy)
    rho_u_hat = min(s1.rho * s1.energy, s2.rho * s2.energy)
    b_hat = min(
        math.sqrt(s1.b1[0] ** 2 + s1.b1[1] ** 2 + s1.b1[2] ** 2),
        math.sqrt(s2.b1[0] ** 2 + s2.b1[1] ** 2 + s2.b1[2] ** 2),
    )
    v_min = min(
        s1.velocity[0] ** 2 + s1.velocity[1] ** 2 + s1.velocity[2] ** 2,
        s2.velocity[0] ** 2 + s2.velocity[1] ** 2 + s2.velocity[2] ** 2,
    ) + (0.01 * v_wave) ** 2
    for name, value in (
        ("rho", rho_hat),
        ("U1", u_hat),
        ("rho*U1", rho_u_hat),
        ("|B1|", b_hat),
        ("v_min", v_min),
    ):
        if value <= 0:
            raise ValueError(f"degenerate state: hat denominator {name} = {value}")
    db2 = _norm2(s1.b1, s2.b1)
    return max(
        abs(s1.rho - s2.rho) / rho_hat,
        abs(s1.energy - s2.energy) / u_hat,
        _norm2(s1.momentum, s2.momentum) / (2.0 * rho_u_hat),
        db2 / (2.0 * mu0 * u_hat),
        math.sqrt(db2) / b_hat,
        _norm2(s1.velocity, s2.velocity) / v_min,
    )


def refine_threshold(level: int, max_level: int) -> float:
    return 0.02 * (level + 1) / max_level


def unrefine_threshold(level: int, max_level: int) -> float:
    return 0.02 * (level + 1) / max_level / 2.0


def adapt_by_index(mesh, alpha_by_cell) -> tuple[int, int]:
    """Queue refines/unrefines from per-cell refinement indices (max over the
    cell's faces), for local cells. Accepts a dict or an (ids, alphas) array
    pair. Returns (refine requests, unrefine requests) queued."""
    if isinstance(alpha_by_cell, dict):
        count = len(alpha_by_cell)
        ids = np.fromiter(alpha_by_cell.keys(), dtype=np.int64, count=count)
        alphas = np.fromiter(alpha_by_cell.values(), dtype=np.float64, count=count)
    else:
        ids, alphas = alpha_by_cell
        ids = np.asarray(ids, dtype=np.int64)
        alphas = np.asarray(alphas, dtype=np.float64)
    max_level = mesh.topology.max_level
    if max_level == 0 or len(ids) == 0:
        return 0, 0
    levels = _levels_of_ids(mesh, ids)
    threshold = 0.02 * (levels + 1) / max_level
    refine = (alphas > threshold) & (levels < max_level)
    unrefine = (alphas < threshold / 2.0) & (levels > 0) & ~refine
    mesh._refine_requests.update(ids[refine].tolist())
    mesh._unrefine_requests.update(ids[unrefine].tolist())
    return int(refine.sum()), int(unrefine.sum())
