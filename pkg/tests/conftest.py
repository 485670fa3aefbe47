"""Shared fixtures and brute-force oracles for the test suite.

The neighbor oracle is deliberately a different formulation from the library:
instead of enumerating candidate lattice positions, it tests every existing
cell's span (and each periodic wrap image of it) for intersection with the
query cell's expanded window, by closed-form interval arithmetic.
"""

import random

import numpy as np
import pytest

from gridforge import Mesh, Topology, id_from, indices_of, level_of, wrap_indices


class CellArrays:
    """Positions/spans of every existing cell, for the vectorized oracle."""

    def __init__(self, mesh):
        topo = mesh.topology
        self.topo = topo
        self.ids = mesh.all_ids.copy()
        self.levels = np.array([level_of(topo, c) for c in self.ids.tolist()], dtype=np.int64)
        pos = np.array([indices_of(topo, c) for c in self.ids.tolist()], dtype=np.int64).reshape(
            len(self.ids), 3
        )
        self.pos = pos
        self.span = np.int64(1) << (topo.max_level - self.levels)


def _image_counts(o_lo, o_span, lo, hi, extent, periodic):
    """Vectorized count of wrap images of [o_lo, o_lo+o_span-1] meeting [lo, hi]."""
    if not periodic:
        return ((o_lo + o_span - 1 >= lo) & (o_lo <= hi)).astype(np.int64)
    o_hi = o_lo + o_span - 1
    k_min = -((o_hi - lo) // extent)
    k_max = (hi - o_lo) // extent
    return np.maximum(0, k_max - k_min + 1)


def oracle_window_lists(mesh, arrays: CellArrays, cell: int):
    """(neighbors_of, neighbors_to) of one cell per the expanded-window rule,
    with one entry per wrap image; n >= 1 meshes only."""
    topo = mesh.topology
    n = mesh.neighborhood_size
    where = int(np.searchsorted(arrays.ids, cell))
    span = int(arrays.span[where])
    pos = arrays.pos[where]
    out = []
    for inverted in (False, True):
        radius = n * (arrays.span if inverted else span)
        counts = np.ones(len(arrays.ids), dtype=np.int64)
        for d in range(3):
            lo = pos[d] - radius
            hi = pos[d] + span - 1 + radius
            counts *= _image_counts(
                arrays.pos[:, d], arrays.span, lo, hi, topo.extent(d), topo.periodic[d]
            )
        counts[where] -= 1  # the identity image is the cell itself
        out.append(np.repeat(arrays.ids, counts).tolist())
    return out[0], out[1]


def oracle_face_forward(mesh, cell):
    """Directly coded n = 0 rule: equal face neighbor, else coarser, else all
    eight children of the refined equal-size neighbor."""
    topo = mesh.topology
    level = level_of(topo, cell)
    span = topo.cell_span(level)
    pos = indices_of(topo, cell)

    def cell_at(lvl, p):
        shift = topo.max_level - lvl
        aligned = tuple((c >> shift) << shift for c in p)
        cid = id_from(topo, lvl, aligned)
        return cid if cid in mesh.cell_table else None

    out = []
    for axis in range(3):
        for step in (-1, 1):
            raw = list(pos)
            raw[axis] += step * span
            target = wrap_indices(topo, (raw[0], raw[1], raw[2]))
            if target is None:
                continue
            hit = cell_at(level, target)
            if hit is not None:
                out.append(hit)
                continue
            if level >= 1:
                hit = cell_at(level - 1, target)
                if hit is not None:
                    out.append(hit)
                    continue
            if level < topo.max_level:
                half = span // 2
                for dz in (0, half):
                    for dy in (0, half):
                        for dx in (0, half):
                            hit = cell_at(level + 1, (target[0] + dx, target[1] + dy, target[2] + dz))
                            if hit is not None:
                                out.append(hit)
    out.sort()
    return out


def oracle_face_lists(mesh):
    """All cells' (of, to) lists for n = 0: forward rule plus its transpose."""
    of = {c: oracle_face_forward(mesh, c) for c in mesh.all_ids.tolist()}
    to = {c: [] for c in of}
    for source, targets in of.items():
        for target in targets:
            to[target].append(source)
    for lst in to.values():
        lst.sort()
    return of, to


def oracle_lists(mesh, cell, arrays=None, face_lists=None):
    """(neighbors_of, neighbors_to) of one cell under either rule."""
    if mesh.neighborhood_size == 0:
        of, to = face_lists if face_lists is not None else oracle_face_lists(mesh)
        return of[cell], to[cell]
    if arrays is None:
        arrays = CellArrays(mesh)
    return oracle_window_lists(mesh, arrays, cell)


def random_amr_mesh(seed, max_base=6, max_level=3, neigh_choices=(0, 1, 2, 3), commits=3, comm=None):
    """Seeded random mesh: random topology, then random refine/unrefine
    sequences committed through stop_refining."""
    rng = random.Random(seed)
    topo = Topology(
        rng.randint(1, max_base),
        rng.randint(1, max_base),
        rng.randint(1, max_base),
        rng.randint(0, max_level),
        periodic=tuple(rng.random() < 0.5 for _ in range(3)),
    )
    mesh = Mesh(topo, neighborhood_size=rng.choice(neigh_choices), comm=comm)
    for _ in range(commits):
        # draw from the replicated cell set so every rank count sees the same
        # request sequence; each rank queues only the cells it owns
        everyone = mesh.all_ids.tolist()
        for cell in rng.sample(everyone, min(len(everyone), rng.randint(1, 5))):
            level = level_of(topo, cell)
            refine = level < topo.max_level and (level == 0 or rng.random() < 0.7)
            if not mesh.is_local(cell):
                continue
            if refine and cell not in mesh._unrefine_requests:
                mesh.refine_completely(cell)
            elif not refine and level > 0 and cell not in mesh._refine_requests:
                mesh.unrefine(cell)
        mesh.stop_refining()
    return mesh


@pytest.fixture
def rng():
    return random.Random(20240817)
