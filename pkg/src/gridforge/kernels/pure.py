"""Vectorized numpy implementation of the hot kernels.

These functions operate on flat arrays describing the grid: ids, refinement
levels, finest-lattice positions, and per-level sorted ordinal tables of the
existing cells. The compiled extension (gridforge._core) implements the same
contract; cross-implementation equality is asserted in the test suite.

All position arithmetic is signed 64-bit, so meshable topologies must keep
their largest id below 2**63 (the mesh constructor enforces this).

Neighbor semantics (shared with the scalar reference in gridforge.mesh):

* ``n >= 1``: a cell of level l and span s depends on every existing cell of
  level l-1..l+1 whose span intersects the cell's span expanded by n*s per
  dimension. Candidates are enumerated as raw (unwrapped) aligned positions
  inside the window; periodic dimensions wrap each raw position, so a cell
  reachable through several wrap images appears once per image. Only the
  cell's own raw position is excluded.
* ``n == 0``: face neighbors. Per direction: the equal-size face neighbor if
  it exists, else the coarser face-adjacent cell, else all children of the
  refined equal-size neighbor.

The reverse lists ("who depends on me") use the same rules with the window
scaled by the candidate's own size.
"""

import numpy as np

# Cap on candidate-buffer entries per processing chunk (~64 MB of int64).
_CHUNK_ENTRIES = 8_000_000


def decode(ids, nx, ny, nz, max_level, level_starts):
    """Split ids into (level, x, y, z) with finest-lattice positions."""
    ids = np.asarray(ids, dtype=np.int64)
    starts = np.asarray(level_starts, dtype=np.int64)
    levels = (np.searchsorted(starts, ids, side="right") - 1).astype(np.int64)
    ordinal = ids - starts[levels]
    lx = nx << levels
    ly = ny << levels
    shift = max_level - levels
    x = (ordinal % lx) << shift
    rest = ordinal // lx
    y = (rest % ly) << shift
    z = (rest // ly) << shift
    return levels, x, y, z


def encode(levels, x, y, z, nx, ny, nz, max_level, level_starts):
    """Inverse of :func:`decode`; positions must be aligned to their level."""
    levels = np.asarray(levels, dtype=np.int64)
    starts = np.asarray(level_starts, dtype=np.int64)
    shift = max_level - levels
    lx = nx << levels
    ly = ny << levels
    ordinal = (x >> shift) + lx * ((y >> shift) + ly * (z >> shift))
    return starts[levels] + ordinal


def _probe(ordinals, candidates):
    """Existence mask of candidate ordinals in one level's sorted table."""
    if len(ordinals) == 0:
        return np.zeros(candidates.shape, dtype=bool)
    pos = np.searchsorted(ordinals, candidates)
    pos_clipped = np.minimum(pos, len(ordinals) - 1)
    return ordinals[pos_clipped] == candidates


class _GridInfo:
    def __init__(self, nx, ny, nz, max_level, periodic, level_starts, level_ordinals):
        self.dims0 = (nx, ny, nz)
        self.max_level = max_level
        self.periodic = periodic
        self.starts = np.asarray(level_starts, dtype=np.int64)
        self.ordinals = [np.asarray(o, dtype=np.int64) for o in level_ordinals]
        self.extents = tuple(d << max_level for d in self.dims0)
        # a fully populated level needs no existence probes
        full_count = nx * ny * nz
        self.full = [len(o) == full_count * 8**lev for lev, o in enumerate(self.ordinals)]

    def level_dims(self, level):
        return tuple(d << level for d in self.dims0)


def _wrap_positions(grid, dim, pos, valid):
    """Wrap or clip raw aligned positions; returns (wrapped, still_valid)."""
    extent = grid.extents[dim]
    if grid.periodic[dim]:
        return pos % extent, valid
    return pos, valid & (pos >= 0) & (pos < extent)


def _emit_level(grid, level, qidx, px, py, pz, valid, out_pairs):
    """Probe candidate positions at one level and append (query, id) pairs."""
    shift = grid.max_level - level
    lx, ly, _ = grid.level_dims(level)
    ordinal = (px >> shift) + lx * ((py >> shift) + ly * (pz >> shift))
    hit = valid if grid.full[level] else valid & _probe(grid.ordinals[level], ordinal)
    if not hit.any():
        return
    ids = grid.starts[level] + ordinal[hit]
    out_pairs.append((qidx[hit] if qidx.shape == hit.shape else np.broadcast_to(qidx, hit.shape)[hit], ids))


def _window_arrows(grid, neigh, qidx, qx, qy, qz, level, cand_level, inverted, out_pairs):
    """Candidates of one level for the expanded-window rule (n >= 1)."""
    span = 1 << (grid.max_level - level)
    cand_span = 1 << (grid.max_level - cand_level)
    radius = neigh * (cand_span if inverted else span)
    positions = []
    valids = []
    owns = []
    for dim, q in ((0, qx), (1, qy), (2, qz)):
        lo = q - radius
        hi = q + span - 1 + radius
        first = (lo // cand_span) * cand_span
        count = hi // cand_span - lo // cand_span + 1
        k = np.arange(int(count.max()), dtype=np.int64)
        pos = first[:, None] + k[None, :] * cand_span
        valid = k[None, :] < count[:, None]
        owns.append(pos == q[:, None])
        pos, valid = _wrap_positions(grid, dim, pos, valid)
        positions.append(pos)
        valids.append(valid)
    px = positions[0][:, :, None, None]
    py = positions[1][:, None, :, None]
    pz = positions[2][:, None, None, :]
    valid = valids[0][:, :, None, None] & valids[1][:, None, :, None] & valids[2][:, None, None, :]
    if cand_level == level:
        valid = valid & ~(owns[0][:, :, None, None] & owns[1][:, None, :, None] & owns[2][:, None, None, :])
    shape = valid.shape
    flat = (shape[0], shape[1] * shape[2] * shape[3])
    _emit_level(
        grid,
        cand_level,
        np.broadcast_to(qidx[:, None, None, None], shape).reshape(flat),
        np.broadcast_to(px, shape).reshape(flat),
        np.broadcast_to(py, shape).reshape(flat),
        np.broadcast_to(pz, shape).reshape(flat),
        valid.reshape(flat),
        out_pairs,
    )


_FACE_DIRS = tuple((axis, step) for axis in range(3) for step in (-1, 1))


def _face_forward(grid, qidx, qx, qy, qz, level, out_pairs):
    """n = 0 dependency arrows: equal face neighbor, else coarser, else children."""
    span = 1 << (grid.max_level - level)
    base = [qx, qy, qz]
    for axis, step in _FACE_DIRS:
        pos = [c.copy() for c in base]
        pos[axis] = pos[axis] + step * span
        valid = np.ones(len(qidx), dtype=bool)
        pos[axis], valid = _wrap_positions(grid, axis, pos[axis], valid)
        if not valid.any():
            continue
        # stage 1: equal level
        shift = grid.max_level - level
        lx, ly, _ = grid.level_dims(level)
        ordinal = (pos[0] >> shift) + lx * ((pos[1] >> shift) + ly * (pos[2] >> shift))
        hit_eq = valid & _probe(grid.ordinals[level], ordinal)
        if hit_eq.any():
            out_pairs.append((qidx[hit_eq], grid.starts[level] + ordinal[hit_eq]))
        remaining = valid & ~hit_eq
        # stage 2: coarser cell covering the face position
        if level >= 1 and remaining.any():
            cshift = shift + 1
            cmask = np.int64(-1) << cshift
            cpos = [p & cmask for p in pos]
            clx, cly, _ = grid.level_dims(level - 1)
            cord = (cpos[0] >> cshift) + clx * ((cpos[1] >> cshift) + cly * (cpos[2] >> cshift))
            hit_co = remaining & _probe(grid.ordinals[level - 1], cord)
            if hit_co.any():
                out_pairs.append((qidx[hit_co], grid.starts[level - 1] + cord[hit_co]))
            remaining = remaining & ~hit_co
        # stage 3: all children of the refined equal-size neighbor
        if level < grid.max_level and remaining.any():
            half = span >> 1
            ridx = qidx[remaining]
            rpos = [p[remaining] for p in pos]
            ok = np.ones(len(ridx), dtype=bool)
            for dz in (0, half):
                for dy in (0, half):
                    for dx in (0, half):
                        _emit_level(grid, level + 1, ridx, rpos[0] + dx, rpos[1] + dy, rpos[2] + dz, ok, out_pairs)


def _face_inverted(grid, qidx, qx, qy, qz, level, out_pairs):
    """n = 0 reverse arrows: cells whose face rule lands on the query cell."""
    span = 1 << (grid.max_level - level)
    base = [qx, qy, qz]
    # equal-size cells across each face (their stage 1 finds us)
    for axis, step in _FACE_DIRS:
        pos = [c.copy() for c in base]
        pos[axis] = pos[axis] + step * span
        valid = np.ones(len(qidx), dtype=bool)
        pos[axis], valid = _wrap_positions(grid, axis, pos[axis], valid)
        _emit_level(grid, level, qidx, pos[0], pos[1], pos[2], valid, out_pairs)
    # finer cells just outside each face (their stage 2 finds us)
    if level < grid.max_level and len(grid.ordinals[level + 1]):
        half = span >> 1
        others = {0: (1, 2), 1: (0, 2), 2: (0, 1)}
        for axis, step in _FACE_DIRS:
            plane = span if step > 0 else -half
            e0, e1 = others[axis]
            for da in (0, half):
                for db in (0, half):
                    pos = [c.copy() for c in base]
                    pos[axis] = pos[axis] + plane
                    pos[e0] = pos[e0] + da
                    pos[e1] = pos[e1] + db
                    valid = np.ones(len(qidx), dtype=bool)
                    pos[axis], valid = _wrap_positions(grid, axis, pos[axis], valid)
                    _emit_level(grid, level + 1, qidx, pos[0], pos[1], pos[2], valid, out_pairs)
    # coarser cells face-adjacent to our parent (their stage 3 lists all children)
    if level >= 1 and len(grid.ordinals[level - 1]):
        pspan = span << 1
        pmask = np.int64(-1) << (grid.max_level - level + 1)
        ppos = [c & pmask for c in base]
        for axis, step in _FACE_DIRS:
            pos = [p.copy() for p in ppos]
            pos[axis] = pos[axis] + step * pspan
            valid = np.ones(len(qidx), dtype=bool)
            pos[axis], valid = _wrap_positions(grid, axis, pos[axis], valid)
            _emit_level(grid, level - 1, qidx, pos[0], pos[1], pos[2], valid, out_pairs)


def _consolidate(pairs):
    """Merge one chunk's pair fragments into a single (qidx, id)-sorted fragment."""
    if not pairs:
        return None
    qidx = np.concatenate([p[0] for p in pairs])
    ids = np.concatenate([p[1] for p in pairs])
    order = np.lexsort((ids, qidx))
    return qidx[order], ids[order]


def _fragments_to_csr(fragments, n_query):
    fragments = [f for f in fragments if f is not None]
    if fragments:
        qidx = np.concatenate([f[0] for f in fragments])
        ids = np.concatenate([f[1] for f in fragments])
    else:
        qidx = np.empty(0, dtype=np.int64)
        ids = np.empty(0, dtype=np.int64)
    counts = np.bincount(qidx, minlength=n_query) if len(qidx) else np.zeros(n_query, dtype=np.int64)
    offsets = np.zeros(n_query + 1, dtype=np.int64)
    np.cumsum(counts, out=offsets[1:])
    return offsets, ids


def build_arrows(
    neigh_size,
    nx,
    ny,
    nz,
    max_level,
    periodic,
    level_starts,
    level_ordinals,
    qids,
    qlevels,
    qx,
    qy,
    qz,
):
    """CSR arrow lists for the query cells: (of_offsets, of_ids, to_offsets, to_ids).

    ``of`` lists the cells each query cell depends on, ``to`` the cells
    depending on it; both are sorted ascending per query cell and may repeat
    an id once per periodic wrap image. Query cells must be sorted by id.
    On a single-level grid both directions coincide and the returned arrays
    are shared.
    """
    grid = _GridInfo(nx, ny, nz, max_level, periodic, level_starts, level_ordinals)
    n_query = len(qids)
    qlevels = np.asarray(qlevels, dtype=np.int64)
    qx = np.asarray(qx, dtype=np.int64)
    qy = np.asarray(qy, dtype=np.int64)
    qz = np.asarray(qz, dtype=np.int64)
    symmetric = sum(1 for lev in range(max_level + 1) if len(grid.ordinals[lev])) == 1

    per_cell = max(1, (2 * neigh_size + 2) ** 3) if neigh_size else 48
    step = max(1, _CHUNK_ENTRIES // per_cell)
    of_fragments = []
    to_fragments = []
    all_idx = np.arange(n_query, dtype=np.int64)
    for start in range(0, n_query, step):
        piece = slice(start, min(start + step, n_query))
        of_pairs = []
        to_pairs = []
        for level in np.unique(qlevels[piece]):
            level = int(level)
            sel = qlevels[piece] == level
            cidx = all_idx[piece][sel]
            cx, cy, cz = qx[piece][sel], qy[piece][sel], qz[piece][sel]
            if neigh_size >= 1:
                for cand in (level - 1, level, level + 1):
                    if 0 <= cand <= max_level and len(grid.ordinals[cand]):
                        _window_arrows(grid, neigh_size, cidx, cx, cy, cz, level, cand, False, of_pairs)
                        if not symmetric:
                            _window_arrows(grid, neigh_size, cidx, cx, cy, cz, level, cand, True, to_pairs)
            else:
                _face_forward(grid, cidx, cx, cy, cz, level, of_pairs)
                if not symmetric:
                    _face_inverted(grid, cidx, cx, cy, cz, level, to_pairs)
        of_fragments.append(_consolidate(of_pairs))
        if not symmetric:
            to_fragments.append(_consolidate(to_pairs))

    of_offsets, of_ids = _fragments_to_csr(of_fragments, n_query)
    if symmetric:
        return of_offsets, of_ids, of_offsets, of_ids
    to_offsets, to_ids = _fragments_to_csr(to_fragments, n_query)
    return of_offsets, of_ids, to_offsets, to_ids


def hilbert_keys(order, x, y, z):
    from .. import hilbert

    return hilbert.hilbert_keys(order, x, y, z)
