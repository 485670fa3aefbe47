"""The distributed grid graph.

Every rank holds the full cell -> owner hash table (replicated metadata), so
any rank can answer existence, ownership and neighborhood questions locally.
Explicit arrow lists (dependency directions) are stored only for local cells,
as flat CSR arrays rebuilt from the hash table after every structural change.
Local copies of remote neighbors' data live in the same data store as local
cells, so solvers read both through one accessor; only the exchange machinery
writes the copies.

Two neighbor-search routes exist on purpose: a scalar reference that probes
the hash table directly (below) and the batched array kernels used for the
full rebuild (gridforge.kernels). Property tests hold them equal.
"""

import numpy as np

from . import amr as _amr
from . import exchange as _exchange
from . import kernels
from . import partition as _partition
from .geometry import Geometry
from .topology import (
    InvalidCellError,
    Topology,
    id_from,
    indices_of,
    level_of,
    wrap_indices,
)
from .transport import SerialComm

_MESHABLE_ID_LIMIT = 2**63


class UnknownCellError(KeyError):
    """The cell id does not exist in the grid (distinct from 'exists but remote')."""


class NotLocalError(ValueError):
    """The operation needs a cell owned by this rank."""


_FACE_DIRS = tuple((axis, step) for axis in range(3) for step in (-1, 1))


class Mesh:
    """One rank's view of the distributed refinable grid.

    Structural operations (stop_refining, balance_load) are collective: every
    rank must call them together. Between structural changes the mesh is safe
    for concurrent reads; mutation is single-writer.
    """

    def __init__(
        self,
        topology: Topology,
        geometry: Geometry | None = None,
        *,
        neighborhood_size: int = 1,
        comm=None,
        partition_method: str = "block",
        partition_seed: int = 0,
        data_factory=None,
        data_contract=None,
        prolong=None,
        restrict=None,
    ):
        if topology.max_id >= _MESHABLE_ID_LIMIT:
            raise ValueError(
                f"topology has {topology.max_id} ids; meshes need every id below 2**63"
            )
        if neighborhood_size < 0:
            raise ValueError("neighborhood size must be a non-negative integer")
        self.topology = topology
        self.geometry = geometry if geometry is not None else Geometry()
        self.neighborhood_size = int(neighborhood_size)
        self.comm = comm if comm is not None else SerialComm()
        self.data_factory = data_factory
        self.data_contract = data_contract
        self.prolong = prolong
        self.restrict = restrict

        self.data: dict[int, object] = {}
        self.structure_epoch = 0
        self.batching = "per-rank"
        self._table_cache: dict[int, int] | None = None

        self._pins: dict[int, int] = {}
        self._pending_pins: list[tuple] = []
        self._refine_requests: set[int] = set()
        self._unrefine_requests: set[int] = set()
        self._exchange_state = None
        self._plan = None

        self._starts = np.asarray(topology.level_starts, dtype=np.int64)
        level0 = topology.level_count(0)
        ids = np.arange(1, level0 + 1, dtype=np.int64)
        owners = _partition.compute_partition(
            partition_method, topology, self.geometry, ids, None, self.comm.size, partition_seed
        )
        self._rebuild_structure(ids, owners.astype(np.int32))
        self._refresh_data_store()

    # ------------------------------------------------------------------ basics

    @property
    def rank(self) -> int:
        return self.comm.rank

    @property
    def cell_table(self) -> dict[int, int]:
        """The replicated id -> owner hash table, materialized on demand from
        the sorted arrays and dropped on every structural change."""
        if self._table_cache is None:
            self._table_cache = dict(zip(self.all_ids.tolist(), self.all_owners.tolist()))
        return self._table_cache

    def _position_of(self, cell: int) -> int:
        pos = int(np.searchsorted(self.all_ids, cell))
        if pos >= len(self.all_ids) or self.all_ids[pos] != cell:
            raise UnknownCellError(f"cell {cell} does not exist")
        return pos

    def exists(self, cell: int) -> bool:
        pos = int(np.searchsorted(self.all_ids, cell))
        return pos < len(self.all_ids) and self.all_ids[pos] == cell

    def __contains__(self, cell: int) -> bool:
        return self.exists(cell)

    def owner_of(self, cell: int) -> int:
        return int(self.all_owners[self._position_of(cell)])

    def is_local(self, cell: int) -> bool:
        return self.owner_of(cell) == self.comm.rank

    def local_cells(self) -> np.ndarray:
        """Ids of the cells owned by this rank, ascending."""
        return self.local_ids

    def __getitem__(self, cell: int):
        """Data of a local cell or the local copy of a remote neighbor."""
        try:
            return self.data[cell]
        except KeyError:
            if not self.exists(cell):
                raise UnknownCellError(f"cell {cell} does not exist") from None
            raise KeyError(f"cell {cell} is remote and not a neighbor of any local cell") from None

    def __setitem__(self, cell: int, value):
        if not self.is_local(cell):
            raise NotLocalError(f"cell {cell} is owned by rank {self.owner_of(cell)}")
        self.data[cell] = value

    def level_of(self, cell: int) -> int:
        return int(self.all_levels[self._position_of(cell)])

    # --------------------------------------------------------------- searching

    def find_smallest_existing(self, indices: tuple[int, int, int]):
        """The finest existing cell covering the given lattice indices, or None."""
        topo = self.topology
        for dim in range(3):
            if not 0 <= indices[dim] < topo.extent(dim):
                raise InvalidCellError(f"indices {indices} out of range")
        for level in range(topo.max_level, -1, -1):
            span = topo.cell_span(level)
            mask = ~(span - 1)
            cell = id_from(topo, level, (indices[0] & mask, indices[1] & mask, indices[2] & mask))
            if cell in self.cell_table:
                return cell
        return None

    def _scalar_probe(self, cand_level: int, pos: tuple[int, int, int]) -> int | None:
        cell = id_from(self.topology, cand_level, pos)
        return cell if cell in self.cell_table else None

    def _scalar_positions(self, q: int, span: int, radius: int, cand_span: int, dim: int):
        """Raw aligned candidate positions of one dimension, with wrap images."""
        topo = self.topology
        lo = q - radius
        hi = q + span - 1 + radius
        first = (lo // cand_span) * cand_span
        out = []
        extent = topo.extent(dim)
        for raw in range(first, hi + 1, cand_span):
            if topo.periodic[dim]:
                out.append((raw % extent, raw == q))
            elif 0 <= raw < extent:
                out.append((raw, raw == q))
        return out

    def _scalar_window(self, cell: int, inverted: bool) -> list[int]:
        topo = self.topology
        n = self.neighborhood_size
        level = level_of(topo, cell)
        span = topo.cell_span(level)
        pos = indices_of(topo, cell)
        found = []
        for cand_level in (level - 1, level, level + 1):
            if not 0 <= cand_level <= topo.max_level:
                continue
            cand_span = topo.cell_span(cand_level)
            radius = n * (cand_span if inverted else span)
            per_dim = [
                self._scalar_positions(pos[d], span, radius, cand_span, d) for d in range(3)
            ]
            for px, own_x in per_dim[0]:
                for py, own_y in per_dim[1]:
                    for pz, own_z in per_dim[2]:
                        if cand_level == level and own_x and own_y and own_z:
                            continue
                        hit = self._scalar_probe(cand_level, (px, py, pz))
                        if hit is not None:
                            found.append(hit)
        found.sort()
        return found

    def _scalar_face(self, cell: int, inverted: bool) -> list[int]:
        topo = self.topology
        level = level_of(topo, cell)
        span = topo.cell_span(level)
        pos = indices_of(topo, cell)
        found = []

        def face_position(base, axis, offset):
            raw = list(base)
            raw[axis] += offset
            return wrap_indices(topo, (raw[0], raw[1], raw[2]))

        if not inverted:
            for axis, step in _FACE_DIRS:
                target = face_position(pos, axis, step * span)
                if target is None:
                    continue
                hit = self._scalar_probe(level, target)
                if hit is not None:
                    found.append(hit)
                    continue
                if level >= 1:
                    cspan = span << 1
                    cmask = ~(cspan - 1)
                    coarse = (target[0] & cmask, target[1] & cmask, target[2] & cmask)
                    hit = self._scalar_probe(level - 1, coarse)
                    if hit is not None:
                        found.append(hit)
                        continue
                if level < topo.max_level:
                    half = span >> 1
                    for dz in (0, half):
                        for dy in (0, half):
                            for dx in (0, half):
                                child = (target[0] + dx, target[1] + dy, target[2] + dz)
                                hit = self._scalar_probe(level + 1, child)
                                if hit is not None:
                                    found.append(hit)
        else:
            for axis, step in _FACE_DIRS:
                target = face_position(pos, axis, step * span)
                if target is not None:
                    hit = self._scalar_probe(level, target)
                    if hit is not None:
                        found.append(hit)
            if level < topo.max_level:
                half = span >> 1
                others = {0: (1, 2), 1: (0, 2), 2: (0, 1)}
                for axis, step in _FACE_DIRS:
                    plane = span if step > 0 else -half
                    e0, e1 = others[axis]
                    for da in (0, half):
                        for db in (0, half):
                            raw = list(pos)
                            raw[axis] += plane
                            raw[e0] += da
                            raw[e1] += db
                            target = wrap_indices(topo, (raw[0], raw[1], raw[2]))
                            if target is None:
                                continue
                            hit = self._scalar_probe(level + 1, target)
                            if hit is not None:
                                found.append(hit)
            if level >= 1:
                pspan = span << 1
                pmask = ~(pspan - 1)
                parent_pos = (pos[0] & pmask, pos[1] & pmask, pos[2] & pmask)
                for axis, step in _FACE_DIRS:
                    target = face_position(parent_pos, axis, step * pspan)
                    if target is None:
                        continue
                    hit = self._scalar_probe(level - 1, target)
                    if hit is not None:
                        found.append(hit)
        found.sort()
        return found

    def search_neighbors(self, cell: int) -> list[int]:
        """Fresh hash-table search for the cells this cell depends on.

        Scalar reference route; the cached lists from the batch rebuild must
        match it exactly, including one entry per periodic wrap image.
        """
        if cell not in self.cell_table:
            raise UnknownCellError(f"cell {cell} does not exist")
        if self.neighborhood_size == 0:
            return self._scalar_face(cell, inverted=False)
        return self._scalar_window(cell, inverted=False)

    def search_neighbors_to(self, cell: int) -> list[int]:
        """Fresh hash-table search for the cells depending on this cell."""
        if cell not in self.cell_table:
            raise UnknownCellError(f"cell {cell} does not exist")
        if self.neighborhood_size == 0:
            return self._scalar_face(cell, inverted=True)
        return self._scalar_window(cell, inverted=True)

    # ------------------------------------------------------------- arrow lists

    def _local_slot(self, cell: int) -> int:
        slot = int(np.searchsorted(self.local_ids, cell))
        if slot >= len(self.local_ids) or self.local_ids[slot] != cell:
            if cell not in self.cell_table:
                raise UnknownCellError(f"cell {cell} does not exist")
            raise NotLocalError(f"cell {cell} is owned by rank {self.owner_of(cell)}")
        return slot

    def neighbors_of(self, cell: int) -> np.ndarray:
        """Cached dependency arrows of a local cell (ascending ids)."""
        slot = self._local_slot(cell)
        return self._of_ids[self._of_offsets[slot] : self._of_offsets[slot + 1]]

    def neighbors_to(self, cell: int) -> np.ndarray:
        """Cached reverse arrows of a local cell (ascending ids)."""
        slot = self._local_slot(cell)
        return self._to_ids[self._to_offsets[slot] : self._to_offsets[slot + 1]]

    def owners_of_ids(self, ids: np.ndarray) -> np.ndarray:
        """Vectorized owner lookup through the replicated table arrays."""
        pos = np.searchsorted(self.all_ids, ids)
        return self.all_owners[pos]

    def classify_cells(self) -> tuple[np.ndarray, np.ndarray]:
        """(inner, outer) split of local cells: outer have a remote cell in
        either arrow direction."""
        me = self.comm.rank
        remote_mask = np.zeros(len(self.local_ids), dtype=bool)
        for offsets, ids in ((self._of_offsets, self._of_ids), (self._to_offsets, self._to_ids)):
            if len(ids) == 0 or len(offsets) < 2:
                continue
            alien = self.owners_of_ids(ids) != me
            starts = np.minimum(offsets[:-1], len(ids) - 1)
            seg = np.add.reduceat(alien, starts)
            seg[offsets[:-1] == offsets[1:]] = 0
            remote_mask |= seg > 0
        return self.local_ids[~remote_mask], self.local_ids[remote_mask]

    def remote_neighbors(self) -> np.ndarray:
        """Remote cells appearing in local arrow lists (the ghost set)."""
        return self.remote_neighbor_ids

    # ------------------------------------------------------------ structural

    def _rebuild_structure(self, ids, owners):
        """Install new sorted id/owner arrays and recompute every derived
        structure (positions, per-level tables, arrow lists, ghost set)."""
        topo = self.topology
        self._table_cache = None
        self.all_ids = ids
        self.all_owners = owners
        levels, x, y, z = kernels.decode(ids, topo.nx, topo.ny, topo.nz, topo.max_level, self._starts)
        self.all_levels = levels
        self.all_x, self.all_y, self.all_z = x, y, z
        bounds = np.searchsorted(ids, self._starts)
        self._level_ordinals = [
            ids[bounds[lev] : bounds[lev + 1]] - self._starts[lev]
            for lev in range(topo.max_level + 1)
        ]
        local = owners == self.comm.rank
        self.local_ids = ids[local]
        self.local_positions = np.nonzero(local)[0]
        qlev, qx, qy, qz = levels[local], x[local], y[local], z[local]
        self._of_offsets, self._of_ids, self._to_offsets, self._to_ids = kernels.build_arrows(
            self.neighborhood_size,
            topo.nx,
            topo.ny,
            topo.nz,
            topo.max_level,
            topo.periodic,
            self._starts,
            self._level_ordinals,
            self.local_ids,
            qlev,
            qx,
            qy,
            qz,
        )
        if self.comm.size == 1:
            self.remote_neighbor_ids = np.empty(0, dtype=np.int64)
        else:
            arrays = [self._of_ids]
            if self._to_ids is not self._of_ids:
                arrays.append(self._to_ids)
            aliens = [a[self.owners_of_ids(a) != self.comm.rank] for a in arrays if len(a)]
            self.remote_neighbor_ids = (
                np.unique(np.concatenate(aliens)) if aliens else np.empty(0, dtype=np.int64)
            )
        self.structure_epoch += 1
        self._plan = None

    def _refresh_data_store(self, moved_in=()):
        """Drop data of vanished/foreign cells, create defaults for new ones."""
        if self.data_factory is None:
            return
        keep = set(self.local_ids.tolist())
        keep.update(self.remote_neighbor_ids.tolist())
        for cell in list(self.data):
            if cell not in keep:
                del self.data[cell]
        for cell in keep:
            if cell not in self.data:
                self.data[cell] = self.data_factory()

    def _require_no_exchange(self):
        if self._exchange_state is not None:
            raise _exchange.ExchangeStateError(
                "structural change attempted while a remote-copy update is in flight"
            )

    # AMR entry points (engine in gridforge.amr)

    def refine_completely(self, cell: int):
        """Queue a local cell for replacement by its 8 children."""
        _amr.request_refine(self, cell)

    def unrefine(self, cell: int):
        """Queue a local cell's sibling group for replacement by their parent."""
        _amr.request_unrefine(self, cell)

    def stop_refining(self):
        """Collective: run induced refinement, commit changes, rebuild. Returns
        (created cells, removed cells), identical on every rank."""
        self._require_no_exchange()
        return _amr.stop_refining(self)

    def check_balance(self, full: bool = False):
        """Assert the 2:1 rule for every neighboring pair of local cells.

        With ``full`` the geometric scan probes all refinement levels, so it
        also catches cells a band-limited search could never see.
        """
        return _amr.check_balance(self, full=full)

    # partition entry points (engine in gridforge.partition)

    def pin(self, cell: int, target_rank: int):
        if not self.is_local(cell):
            raise NotLocalError(f"cell {cell} is owned by rank {self.owner_of(cell)}")
        if not 0 <= target_rank < self.comm.size:
            raise ValueError(f"rank {target_rank} outside [0, {self.comm.size})")
        self._pending_pins.append(("pin", cell, target_rank))

    def unpin(self, cell: int):
        if not self.is_local(cell):
            raise NotLocalError(f"cell {cell} is owned by rank {self.owner_of(cell)}")
        self._pending_pins.append(("unpin", cell, 0))

    def balance_load(self, method: str = "hilbert_sfc", seed: int = 0, weights=None):
        """Collective: repartition, migrate cell data, rebuild. Returns the
        number of cells that changed owner (identical on every rank)."""
        self._require_no_exchange()
        return _partition.balance_load(self, method, seed, weights)

    def local_cell_fraction(self) -> float:
        """max/min local-cell count over ranks, from replicated metadata;
        +inf when some rank owns nothing."""
        counts = np.bincount(self.all_owners, minlength=self.comm.size)
        low = int(counts.min())
        if low == 0:
            return float("inf")
        return int(counts.max()) / low

    # exchange entry points (engine in gridforge.exchange)

    def set_message_batching(self, mode: str):
        if mode not in ("per-rank", "per-cell"):
            raise ValueError(f"batching mode must be 'per-rank' or 'per-cell', got {mode!r}")
        if self._exchange_state is not None:
            raise _exchange.ExchangeStateError("cannot change batching during an update")
        self.batching = mode

    def transfer_plan(self):
        """The precomputed send/receive lists for the current structure."""
        if self._plan is None or self._plan.epoch != self.structure_epoch:
            self._plan = _exchange.build_transfer_plan(self)
        return self._plan

    def update_remote_neighbor_data(self, tag: int):
        """Collective synchronous ghost update for one transfer tag."""
        _exchange.update_synchronous(self, tag)

    def start_remote_neighbor_updates(self, tag: int):
        _exchange.start_updates(self, tag)

    def wait_remote_neighbor_update_receives(self):
        _exchange.wait_receives(self)

    def wait_remote_neighbor_update_sends(self):
        _exchange.wait_sends(self)

    def exchange_two_phase(self, count_tag: int, payload_tag: int, resize_hook):
        """Collective two-phase variable-size update (counts, then payloads)."""
        _exchange.two_phase_variable_exchange(self, count_tag, payload_tag, resize_hook)
