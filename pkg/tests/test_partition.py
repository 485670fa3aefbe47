import struct

import numpy as np
import pytest

from gridforge import (
    DataContract,
    Geometry,
    Mesh,
    Topology,
    compute_partition,
    hilbert_rank_order,
    run_ranks,
)
from gridforge.partition import _splitmix64

from conftest import random_amr_mesh


class ByteContract(DataContract):
    def max_payload(self, tag):
        return 64

    def serialize(self, data, tag):
        return data

    def deserialize(self, data, tag, payload):
        return payload

    def pack_cell(self, data):
        return data

    def unpack_cell(self, payload):
        return payload


class TestComputePartition:
    def test_block_even(self):
        topo = Topology(10, 10, 1, 0)
        owners = compute_partition("block", topo, Geometry(), np.arange(1, 101), None, 4)
        counts = np.bincount(owners, minlength=4)
        assert counts.tolist() == [25, 25, 25, 25]
        # contiguous id ranges
        assert (np.diff(owners) >= 0).all()

    def test_rcb_collinear_median(self):
        topo = Topology(4, 1, 1, 0)
        owners = compute_partition("rcb", topo, Geometry(), np.arange(1, 5), None, 2)
        assert owners.tolist() == [0, 0, 1, 1]

    def test_random_deterministic(self):
        topo = Topology(10, 10, 10, 0)
        ids = np.arange(1, 1001)
        a = compute_partition("random", topo, Geometry(), ids, None, 10, seed=77)
        b = compute_partition("random", topo, Geometry(), ids, None, 10, seed=77)
        assert np.array_equal(a, b)
        c = compute_partition("random", topo, Geometry(), ids, None, 10, seed=78)
        assert not np.array_equal(a, c)
        assert set(np.unique(a)) <= set(range(10))

    def test_totality(self):
        for method in ("block", "random", "rcb", "hilbert_sfc"):
            mesh = random_amr_mesh(5)
            owners = compute_partition(method, mesh.topology, mesh.geometry, mesh.all_ids, None, 5, seed=1)
            assert len(owners) == len(mesh.all_ids)
            assert ((owners >= 0) & (owners < 5)).all()

    def test_weights_respected(self):
        topo = Topology(4, 1, 1, 0)
        owners = compute_partition("block", topo, Geometry(), np.arange(1, 5), [3.0, 1.0, 1.0, 1.0], 2)
        assert owners.tolist() == [0, 1, 1, 1]

    def test_unknown_method(self):
        with pytest.raises(ValueError):
            compute_partition("graph", Topology(2, 2, 2, 0), Geometry(), np.arange(1, 9), None, 2)

    def test_splitmix_avalanche(self):
        vals = _splitmix64(np.arange(1, 10001, dtype=np.uint64))
        assert len(np.unique(vals)) == 10000
        assert len(np.unique(vals % np.uint64(7))) == 7


class TestHilbertOrder:
    def test_single_cell(self):
        topo = Topology(1, 1, 1, 0)
        order = hilbert_rank_order(topo, np.array([1]))
        assert order.tolist() == [0]

    def test_2cubed_visits_all_adjacent(self):
        topo = Topology(2, 2, 2, 0)
        ids = np.arange(1, 9)
        order = hilbert_rank_order(topo, ids)
        assert sorted(order.tolist()) == list(range(8))
        from gridforge import indices_of

        seq = [indices_of(topo, int(ids[k])) for k in order]
        for a, b in zip(seq, seq[1:]):
            assert sum(abs(a[i] - b[i]) for i in range(3)) == 1

    def test_4cubed_matches_direct_keys(self):
        from gridforge.hilbert import hilbert_key

        topo = Topology(4, 4, 4, 0)
        ids = np.arange(1, 65)
        order = hilbert_rank_order(topo, ids)
        from gridforge import indices_of

        keys = []
        for cell in ids.tolist():
            x, y, z = indices_of(topo, cell)
            keys.append(hilbert_key(2, x, y, z))
        assert order.tolist() == sorted(range(64), key=lambda k: (keys[k], ids[k]))

    def test_locality_beats_random(self):
        """Mean surface of Hilbert parts is below random parts' over 10 seeds."""
        topo = Topology(8, 8, 8, 0)
        ids = np.arange(1, 513)
        from gridforge import indices_of

        pos = np.array([indices_of(topo, c) for c in ids.tolist()])

        def surface(owners):
            cut = 0
            index = {tuple(p): o for p, o in zip(pos.tolist(), owners.tolist())}
            for (x, y, z), o in index.items():
                for d, step in ((0, 1), (1, 1), (2, 1)):
                    q = [x, y, z]
                    q[d] += step
                    other = index.get(tuple(q))
                    if other is not None and other != o:
                        cut += 1
            return cut

        hil = surface(compute_partition("hilbert_sfc", topo, Geometry(), ids, None, 4))
        randoms = [
            surface(compute_partition("random", topo, Geometry(), ids, None, 4, seed=s))
            for s in range(10)
        ]
        assert hil < np.mean(randoms)


class TestBalanceLoad:
    def test_none_moves_nothing(self):
        def program(comm):
            mesh = Mesh(Topology(4, 4, 1, 0), comm=comm, partition_method="block")
            return mesh.balance_load("none")

        assert run_ranks(2, program, timeout=60) == [0, 0]

    def test_single_rank_moves_nothing(self):
        mesh = Mesh(Topology(4, 4, 1, 0))
        assert mesh.balance_load("hilbert_sfc") == 0

    def test_block_from_skewed_equals_fresh(self):
        def program(comm):
            nbytes = 64
            mesh = Mesh(
                Topology(8, 1, 1, 0),
                comm=comm,
                partition_method="none",  # everything on rank 0
                data_factory=lambda: bytes(nbytes),
                data_contract=ByteContract(),
            )
            for cell in mesh.local_cells().tolist():
                mesh[cell] = struct.pack("<q", cell) * 8
            moved = mesh.balance_load("block")
            fresh = Mesh(Topology(8, 1, 1, 0), comm=comm, partition_method="block")
            same = mesh.cell_table == fresh.cell_table
            data_ok = all(
                mesh[c] == struct.pack("<q", c) * 8 for c in mesh.local_cells().tolist()
            )
            return moved, same, data_ok

        results = run_ranks(2, program, timeout=60)
        for moved, same, data_ok in results:
            assert moved == 4 and same and data_ok

    def test_migration_multiset_preserved(self):
        def program(comm):
            mesh = Mesh(
                Topology(4, 4, 1, 0),
                comm=comm,
                partition_method="block",
                data_factory=lambda: b"",
                data_contract=ByteContract(),
            )
            for cell in mesh.local_cells().tolist():
                mesh[cell] = struct.pack("<q", cell * 11)
            mesh.balance_load("random", seed=3)
            return {c: mesh[c] for c in mesh.local_cells().tolist()}

        results = run_ranks(3, program, timeout=60)
        merged = {}
        for part in results:
            merged.update(part)
        assert merged == {c: struct.pack("<q", c * 11) for c in range(1, 17)}

    def test_pins_override_partitioner(self):
        def program(comm):
            mesh = Mesh(Topology(8, 1, 1, 0), comm=comm, partition_method="block")
            if mesh.is_local(1):
                mesh.pin(1, comm.size - 1)
            mesh.balance_load("block")
            first = mesh.owner_of(1)
            mesh.balance_load("hilbert_sfc")
            second = mesh.owner_of(1)
            if mesh.is_local(1):
                mesh.unpin(1)
            mesh.balance_load("block")
            third = mesh.owner_of(1)
            return first, second, third

        results = run_ranks(2, program, timeout=60)
        assert results[0] == results[1]
        first, second, third = results[0]
        assert first == 1 and second == 1 and third == 0

    def test_local_cell_fraction(self):
        def program(comm):
            mesh = Mesh(Topology(9, 1, 1, 0), comm=comm, partition_method="block")
            fc1 = mesh.local_cell_fraction()
            if mesh.is_local(9):
                mesh.pin(9, 0)
            mesh.balance_load("none")
            return fc1, mesh.local_cell_fraction()

        results = run_ranks(3, program, timeout=60)
        for fc1, fc2 in results:
            assert fc1 == 1.0  # 3/3/3
            assert fc2 == 2.0  # 4/3/2 after pinning cell 9 to rank 0

    def test_fraction_formula(self):
        def program(comm):
            mesh = Mesh(Topology(9, 1, 1, 0), comm=comm, partition_method="block")
            return mesh.local_cell_fraction()

        # 9 cells, 2 ranks -> 5 and 4
        assert run_ranks(2, program, timeout=60) == [1.25, 1.25]

    def test_fraction_infinite_on_empty_rank(self):
        def program(comm):
            mesh = Mesh(Topology(2, 1, 1, 0), comm=comm, partition_method="none")
            return mesh.local_cell_fraction()

        assert run_ranks(2, program, timeout=60) == [float("inf")] * 2
