"""Conservative scalar advection with runtime mesh adaptation.

Donor-cell upwind fluxes over face neighbors (neighborhood size 0), uniform
velocity, periodic domain. The per-cell state is *mass*, so the two sides of
a face subtract and add the bitwise-identical flux and total mass is
conserved to rounding; prolongation and restriction are exact
powers-of-two splits/sums of mass.

Each step: optionally adapt (refinement index from the density jump across
faces, max over a cell's faces), optionally rebalance when the local cell
fraction crosses a threshold, take dt from one min-allreduce of local CFL
limits (the only collective of a steady-state step), and refresh ghost masses
with the split-phase update, overlapping the interior flux computation with
communication. Results are bitwise identical across rank counts and
partitions: every flux is evaluated from the same operands and accumulated in
the same per-cell order everywhere.

The working state lives in an array aligned with the local cell list; the
mesh's per-cell data store is synced at exchange and restructuring points,
which keeps the hot loop free of per-cell dictionary traffic.
"""

import math
import struct

import numpy as np

from .. import amr
from ..exchange import DataContract
from ..geometry import Geometry, cell_center
from ..io import dump_grid
from ..mesh import Mesh
from ..topology import Topology
from ..transport import gather_to_root

MASS_TAG = 2
GATHER_STATS_TAG = (4 << 24) | 3


class MassContract(DataContract):
    def max_payload(self, tag):
        return 8

    def serialize(self, data, tag):
        return struct.pack("<d", data)

    def deserialize(self, data, tag, payload):
        return struct.unpack("<d", payload)[0]

    def pack_cell(self, data):
        return struct.pack("<d", data)

    def unpack_cell(self, payload):
        return struct.unpack("<d", payload)[0]


def _prolong_mass(parent_mass):
    return [parent_mass / 8.0] * 8


def _restrict_mass(child_masses):
    total = child_masses[0]
    for m in child_masses[1:]:
        total = total + m
    return total


def default_density(x, y, z):
    """Smooth compact blob on the unit cube over a uniform background."""
    r = math.sqrt((x - 0.3) ** 2 + (y - 0.3) ** 2 + (z - 0.3) ** 2)
    if r >= 0.22:
        return 1.0
    return 1.0 + 3.0 * math.cos(math.pi * r / 0.44) ** 2


class FaceCache:
    """Flattened face list of the local cells for one structure epoch.

    Faces are oriented out of the local cell ``a``: sorted by (a slot, axis,
    side, neighbor id) so flux accumulation order never depends on the
    partition. Remote neighbors appear exactly like local ones; their mass
    comes from the ghost copies.
    """

    def __init__(self, mesh):
        self.epoch = mesh.structure_epoch
        topo = mesh.topology
        n_local = len(mesh.local_ids)
        counts = np.diff(mesh._of_offsets)
        a_slot = np.repeat(np.arange(n_local, dtype=np.int64), counts)
        b_id = mesh._of_ids
        # a wrapped grid this small can list one neighbor twice per direction
        may_alias = any(
            topo.periodic[d] and topo.extents()[d] <= 2 << topo.max_level for d in range(3)
        )
        if len(b_id) and may_alias:
            pairs = np.unique(np.stack((a_slot, b_id)), axis=1)
            a_slot, b_id = pairs[0], pairs[1]
        local_pos = mesh.local_positions
        a_pos_idx = local_pos[a_slot]
        b_pos_idx = np.searchsorted(mesh.all_ids, b_id)

        a_lev = mesh.all_levels[a_pos_idx]
        b_lev = mesh.all_levels[b_pos_idx]
        a_span = np.int64(1) << (topo.max_level - a_lev)
        b_span = np.int64(1) << (topo.max_level - b_lev)
        a_xyz = [mesh.all_x[a_pos_idx], mesh.all_y[a_pos_idx], mesh.all_z[a_pos_idx]]
        b_xyz = [mesh.all_x[b_pos_idx], mesh.all_y[b_pos_idx], mesh.all_z[b_pos_idx]]

        units = [mesh.geometry.index_unit(topo, d) for d in range(3)]
        extents = topo.extents()

        def circular_overlap(dim):
            lo_a, hi_a = a_xyz[dim], a_xyz[dim] + a_span - 1
            lo_b = b_xyz[dim]
            shifts = (-extents[dim], 0, extents[dim]) if topo.periodic[dim] and may_alias else (0,)
            best = None
            for shift in shifts:
                lo = np.maximum(lo_a, lo_b + shift)
                hi = np.minimum(hi_a, lo_b + shift + b_span - 1)
                cur = hi - lo + 1
                best = cur if best is None else np.maximum(best, cur)
            return np.maximum(best, 0)

        overlaps = [circular_overlap(d) for d in range(3)]
        parts = []
        if may_alias:
            # tiny wrapped grids: one pair can touch on both sides of an axis
            for axis in range(3):
                e0, e1 = ((1, 2), (0, 2), (0, 1))[axis]
                lateral = (overlaps[e0] > 0) & (overlaps[e1] > 0)
                area = (overlaps[e0] * units[e0]) * (overlaps[e1] * units[e1])
                for side in (-1, 1):
                    if side > 0:
                        gap = b_xyz[axis] - (a_xyz[axis] + a_span)
                    else:
                        gap = a_xyz[axis] - (b_xyz[axis] + b_span)
                    touching = gap == 0
                    if topo.periodic[axis]:
                        touching = touching | (gap % extents[axis] == 0)
                    mask = lateral & touching
                    if mask.any():
                        parts.append((a_slot[mask], b_id[mask], b_pos_idx[mask], axis, side, area[mask]))
            if parts:
                self.a_slot = np.concatenate([p[0] for p in parts])
                self.b_id = np.concatenate([p[1] for p in parts])
                b_pos_cat = np.concatenate([p[2] for p in parts])
                self.axis = np.concatenate([np.full(len(p[0]), p[3], dtype=np.int8) for p in parts])
                self.side = np.concatenate([np.full(len(p[0]), p[4], dtype=np.int8) for p in parts])
                self.area = np.concatenate([p[5] for p in parts])
                order = np.lexsort((self.b_id, self.side, self.axis, self.a_slot))
                for name in ("a_slot", "b_id", "area", "axis", "side"):
                    setattr(self, name, getattr(self, name)[order])
                b_pos_cat = b_pos_cat[order]
            else:
                self.a_slot = np.empty(0, dtype=np.int64)
                self.b_id = np.empty(0, dtype=np.int64)
                self.area = np.empty(0, dtype=np.float64)
                self.axis = np.empty(0, dtype=np.int8)
                self.side = np.empty(0, dtype=np.int8)
                b_pos_cat = np.empty(0, dtype=np.int64)
        else:
            # every adjacent pair touches on exactly one (axis, side): code the
            # contact in one pass and sort once by a composite key
            contact = np.full(len(a_slot), -1, dtype=np.int8)
            area_all = np.zeros(len(a_slot), dtype=np.float64)
            for axis in range(3):
                e0, e1 = ((1, 2), (0, 2), (0, 1))[axis]
                lateral = (overlaps[e0] > 0) & (overlaps[e1] > 0)
                area = (overlaps[e0] * units[e0]) * (overlaps[e1] * units[e1])
                for side in (-1, 1):
                    if side > 0:
                        gap = b_xyz[axis] - (a_xyz[axis] + a_span)
                    else:
                        gap = a_xyz[axis] - (b_xyz[axis] + b_span)
                    touching = gap == 0
                    if topo.periodic[axis]:
                        touching = touching | (gap == -extents[axis])
                    mask = lateral & touching
                    code = 2 * axis + (1 if side > 0 else 0)
                    contact[mask] = code
                    area_all[mask] = area[mask]
            valid = np.nonzero(contact >= 0)[0]
            codes = contact[valid].astype(np.int64)
            if len(valid) and n_local < (1 << 22) and int(topo.level_starts[-1]) < (1 << 38):
                key = (a_slot[valid] << 41) | (codes << 38) | b_id[valid]
                order = valid[np.argsort(key)]
            else:
                order = valid[np.lexsort((b_id[valid], codes, a_slot[valid]))]
            self.a_slot = a_slot[order]
            self.b_id = b_id[order]
            self.area = area_all[order]
            code_sorted = contact[order]
            self.axis = (code_sorted >> 1).astype(np.int8)
            self.side = ((code_sorted & 1) * 2 - 1).astype(np.int8)
            b_pos_cat = b_pos_idx[order]

        vol0 = float(np.prod(mesh.geometry.level0_size))
        vol_by_level = vol0 / 8.0 ** np.arange(topo.max_level + 1, dtype=np.float64)
        self.a_vol = vol_by_level[mesh.all_levels[local_pos[self.a_slot]]]
        self.b_vol = vol_by_level[mesh.all_levels[b_pos_cat]]
        self.local_volumes = vol_by_level[mesh.all_levels[local_pos]]
        b_owner = mesh.all_owners[b_pos_cat]
        self.b_is_local = b_owner == mesh.comm.rank
        if len(self.b_id):
            slot = np.searchsorted(mesh.local_ids, self.b_id)
            self.b_local_slot = np.where(self.b_is_local, np.minimum(slot, max(n_local - 1, 0)), 0)
        else:
            self.b_local_slot = np.empty(0, dtype=np.int64)
        # contiguous face segment per local cell, for ordered accumulation
        self.cell_offsets = np.searchsorted(self.a_slot, np.arange(n_local + 1, dtype=np.int64))


class AdvectionRun:
    def __init__(
        self,
        comm,
        base: int,
        levels: int,
        cfl: float = 0.4,
        velocity=(1.0, 0.5, 0.25),
        partition="hilbert_sfc",
        partition_seed: int = 0,
        rebalance_fc: float = 2.0,
        density=default_density,
        dt_override: float | None = None,
    ):
        if dt_override is None and not 0 < cfl < 1:
            raise ValueError(f"CFL must be in (0, 1), got {cfl}")
        self.cfl = cfl
        self.velocity = tuple(float(v) for v in velocity)
        self.rebalance_fc = rebalance_fc
        self.partition = partition
        self.partition_seed = partition_seed
        self.dt_override = dt_override
        topo = Topology(base, base, base, levels, periodic=(True, True, True))
        geom = Geometry(origin=(0.0, 0.0, 0.0), level0_size=(1.0 / base, 1.0 / base, 1.0 / base))
        self.mesh = Mesh(
            topo,
            geom,
            neighborhood_size=0,
            comm=comm,
            partition_method=partition,
            partition_seed=partition_seed,
            data_factory=float,
            data_contract=MassContract(),
            prolong=_prolong_mass,
            restrict=_restrict_mass,
        )
        self.density = density
        self._faces = None
        self._mass_version = 0
        self._ghost_sync = None
        mesh = self.mesh
        vol0 = float(np.prod(geom.level0_size))
        self.mass = np.empty(len(mesh.local_ids), dtype=np.float64)
        for slot, cell in enumerate(mesh.local_ids.tolist()):
            x, y, z = cell_center(topo, geom, cell)
            self.mass[slot] = density(x, y, z) * (vol0 / 8.0 ** mesh.level_of(cell))

    # ---------------------------------------------------------- state sync

    def _flush_mass(self, cells=None):
        """Write masses into the mesh data store (all local cells or a subset)."""
        mesh = self.mesh
        if cells is None:
            for cell, m in zip(mesh.local_ids.tolist(), self.mass.tolist()):
                mesh.data[cell] = m
        else:
            slots = np.searchsorted(mesh.local_ids, cells)
            for cell, slot in zip(np.asarray(cells).tolist(), slots.tolist()):
                mesh.data[cell] = self.mass[slot]

    def _load_mass(self):
        mesh = self.mesh
        self.mass = np.fromiter(
            (mesh.data[c] for c in mesh.local_ids.tolist()),
            dtype=np.float64,
            count=len(mesh.local_ids),
        )

    def faces(self) -> FaceCache:
        if self._faces is None or self._faces.epoch != self.mesh.structure_epoch:
            cache = FaceCache(self.mesh)
            un = np.empty(len(cache.a_slot), dtype=np.float64)
            for axis in range(3):
                un[cache.axis == axis] = self.velocity[axis]
            un *= cache.side
            cache.un = un
            self._faces = cache
        return self._faces

    # ------------------------------------------------------------- stepping

    def _dt_limit(self) -> float:
        mesh = self.mesh
        levels = np.unique(mesh.all_levels[mesh.local_positions])
        best = math.inf
        for level in levels.tolist():
            speed = 0.0
            for dim in range(3):
                dx = mesh.geometry.level0_size[dim] / (1 << level)
                speed += abs(self.velocity[dim]) / dx
            if speed > 0:
                best = min(best, self.cfl / speed)
        return best

    def _ghost_masses(self, face_mask):
        """Masses of the faces' remote cells, straight from the ghost copies."""
        mesh = self.mesh
        ids = self.faces().b_id[face_mask]
        return np.fromiter((mesh.data[c] for c in ids.tolist()), dtype=np.float64, count=len(ids))

    def step(self, adapt: bool = False) -> dict:
        mesh = self.mesh
        created = removed = moved = 0
        if adapt:
            created, removed = self._adapt()
        if self.rebalance_fc and mesh.comm.size > 1 and mesh.local_cell_fraction() >= self.rebalance_fc:
            self._flush_mass()
            moved = mesh.balance_load(self.partition, seed=self.partition_seed)
            self._load_mass()
            self._faces = None
        faces = self.faces()

        if self.dt_override is not None:
            dt = self.dt_override
        else:
            dt = mesh.comm.allreduce(self._dt_limit(), "min")
            if not math.isfinite(dt):
                dt = 1.0  # zero velocity: nothing moves, any step length works

        # ghosts fetched by this step's adaptation pass stay valid when the
        # structure and the masses have not changed since
        exchange = self._ghost_sync != (mesh.structure_epoch, self._mass_version)
        if exchange:
            plan = mesh.transfer_plan()
            for cells in plan.send.values():
                self._flush_mass(cells)
            mesh.start_remote_neighbor_updates(MASS_TAG)

        # interior fluxes overlap the communication
        rho_a = self.mass[faces.a_slot] / faces.a_vol
        un = faces.un
        flux = np.empty_like(un)
        inner = faces.b_is_local
        if inner.any():
            rho_b = self.mass[faces.b_local_slot[inner]] / faces.b_vol[inner]
            u = un[inner]
            flux[inner] = faces.area[inner] * dt * u * np.where(u > 0, rho_a[inner], rho_b)
        if exchange:
            mesh.wait_remote_neighbor_update_receives()
        outer = ~inner
        if outer.any():
            rho_b = self._ghost_masses(outer) / faces.b_vol[outer]
            u = un[outer]
            flux[outer] = faces.area[outer] * dt * u * np.where(u > 0, rho_a[outer], rho_b)
        if exchange:
            mesh.wait_remote_neighbor_update_sends()

        if len(flux):
            starts = np.minimum(faces.cell_offsets[:-1], len(flux) - 1)
            outflow = np.add.reduceat(flux, starts)
            outflow[faces.cell_offsets[:-1] == faces.cell_offsets[1:]] = 0.0
            self.mass = self.mass - outflow
        self._mass_version += 1

        return {
            "cells": len(mesh.all_ids),
            "created": created,
            "removed": removed,
            "moved": moved,
            "dt": dt,
            "fc": mesh.local_cell_fraction(),
        }

    def _adapt(self):
        mesh = self.mesh
        faces = self.faces()
        plan = mesh.transfer_plan()
        for cells in plan.send.values():
            self._flush_mass(cells)
        mesh.update_remote_neighbor_data(MASS_TAG)
        self._ghost_sync = (mesh.structure_epoch, self._mass_version)
        alpha = np.zeros(len(mesh.local_ids), dtype=np.float64)
        if len(faces.a_slot):
            rho_a = self.mass[faces.a_slot] / faces.a_vol
            rho_b = np.empty_like(rho_a)
            inner = faces.b_is_local
            rho_b[inner] = self.mass[faces.b_local_slot[inner]] / faces.b_vol[inner]
            outer = ~inner
            if outer.any():
                rho_b[outer] = self._ghost_masses(outer) / faces.b_vol[outer]
            alpha_face = np.abs(rho_a - rho_b) / np.minimum(rho_a, rho_b)
            starts = np.minimum(faces.cell_offsets[:-1], len(alpha_face) - 1)
            alpha = np.maximum.reduceat(alpha_face, starts)
            alpha[faces.cell_offsets[:-1] == faces.cell_offsets[1:]] = 0.0
        amr.adapt_by_index(mesh, (mesh.local_ids, alpha))
        self._flush_mass()
        created, removed = mesh.stop_refining()
        self._load_mass()
        self._faces = None
        return len(created), len(removed)

    # ------------------------------------------------------------ reporting

    def local_mass(self) -> float:
        return math.fsum(self.mass.tolist())

    def global_mass(self) -> float | None:
        """fsum of local masses folded in rank order; rank 0 only."""
        blocks = gather_to_root(
            self.mesh.comm, struct.pack("<d", self.local_mass()), GATHER_STATS_TAG
        )
        if blocks is None:
            return None
        return math.fsum(struct.unpack("<d", b)[0] for b in blocks)

    def dump(self, path) -> bool:
        self._flush_mass()
        volumes = dict(zip(self.mesh.local_ids.tolist(), self.faces().local_volumes.tolist()))
        return dump_grid(self.mesh, path, lambda cell: (self.mesh.data[cell] / volumes[cell],))

    def export_vtk(self, path) -> bool:
        from ..io import export_vtk

        self._flush_mass()
        volumes = dict(zip(self.mesh.local_ids.tolist(), self.faces().local_volumes.tolist()))
        return export_vtk(
            self.mesh,
            path,
            lambda cell: (self.mesh.data[cell] / volumes[cell],),
            value_name="density",
        )


def advect_run(
    comm,
    base=16,
    levels=2,
    cfl=0.4,
    steps=100,
    adapt_every=1,
    rebalance_fc=2.0,
    velocity=(1.0, 0.5, 0.25),
    partition="hilbert_sfc",
    partition_seed=0,
    dump_dir=None,
    dump_every=0,
    vtk_path=None,
    print_stats=True,
):
    """CLI driver; returns per-step stats lines (rank 0) and writes dumps."""
    run = AdvectionRun(
        comm,
        base,
        levels,
        cfl=cfl,
        velocity=velocity,
        partition=partition,
        partition_seed=partition_seed,
        rebalance_fc=rebalance_fc,
    )
    history = []
    for step in range(1, steps + 1):
        adapt = adapt_every > 0 and step % adapt_every == 0
        stats = run.step(adapt=adapt)
        mass = run.global_mass()
        if mass is not None:
            line = (
                f"step={step} cells={stats['cells']} mass={mass!r} "
                f"fc={stats['fc']:.6g} dt={stats['dt']!r}"
            )
            history.append(line)
            if print_stats:
                print(line, flush=True)
        if dump_dir is not None and dump_every and step % dump_every == 0:
            run.dump(f"{dump_dir}/advect-{step:06d}.dump")
    if vtk_path is not None:
        run.export_vtk(vtk_path)
    return history
