import pytest

from gridforge import Mesh, NotLocalError, Topology, UnknownCellError, level_of, run_ranks
from gridforge.mesh import _MESHABLE_ID_LIMIT

from conftest import CellArrays, oracle_face_lists, oracle_lists, random_amr_mesh


def fig2_asymmetric_mesh():
    """1x1x1, L=2: refine #1, then #3, so #2 (level 1) and #13 (level 2) coexist."""
    mesh = Mesh(Topology(1, 1, 1, 2), neighborhood_size=1)
    mesh.refine_completely(1)
    mesh.stop_refining()
    mesh.refine_completely(3)
    mesh.stop_refining()
    return mesh


class TestInitialize:
    def test_gol_grid(self):
        mesh = Mesh(Topology(10, 10, 1, 0), neighborhood_size=1)
        assert len(mesh.local_cells()) == 100

    @pytest.mark.parametrize("n,expected", [(1, 26), (2, 124)])
    def test_uniform_periodic_counts(self, n, expected):
        mesh = Mesh(Topology(4, 4, 4, 0, periodic=(True, True, True)), neighborhood_size=n)
        for cell in mesh.local_cells().tolist():
            assert len(mesh.neighbors_of(cell)) == expected
            assert len(mesh.neighbors_to(cell)) == expected

    def test_rejects_unmeshable_topology(self):
        topo = Topology(1, 1, 1, 21)
        assert topo.max_id >= _MESHABLE_ID_LIMIT
        with pytest.raises(ValueError):
            Mesh(topo)

    def test_rejects_negative_neighborhood(self):
        with pytest.raises(ValueError):
            Mesh(Topology(2, 2, 2, 0), neighborhood_size=-1)

    def test_block_partition_even_split(self):
        def program(comm):
            mesh = Mesh(Topology(10, 10, 1, 0), comm=comm, partition_method="block")
            return len(mesh.local_cells())

        assert run_ranks(4, program, timeout=60) == [25, 25, 25, 25]


class TestFindSmallest:
    def test_unrefined(self):
        mesh = Mesh(Topology(1, 1, 1, 2))
        assert mesh.find_smallest_existing((1, 2, 3)) == 1

    def test_fig3_cases(self):
        mesh = Mesh(Topology(2, 1, 1, 3), neighborhood_size=1)
        mesh.refine_completely(2)
        mesh.stop_refining()
        assert mesh.find_smallest_existing((8, 0, 0)) == 5
        mesh.refine_completely(5)
        mesh.stop_refining()
        assert mesh.find_smallest_existing((8, 0, 0)) == 23
        # refine #23 so #155 exists
        mesh.refine_completely(23)
        mesh.stop_refining()
        assert mesh.find_smallest_existing((8, 0, 0)) == 155

    def test_out_of_range(self):
        mesh = Mesh(Topology(2, 2, 2, 0))
        with pytest.raises(Exception):
            mesh.find_smallest_existing((99, 0, 0))


class TestArrowAsymmetry:
    def test_paper_case(self):
        mesh = fig2_asymmetric_mesh()
        assert 13 in mesh.neighbors_of(2).tolist()
        assert 2 not in mesh.neighbors_of(13).tolist()
        assert 2 in mesh.neighbors_to(13).tolist()

    def test_search_matches_cached(self):
        mesh = fig2_asymmetric_mesh()
        for cell in mesh.local_cells().tolist():
            assert mesh.search_neighbors(cell) == mesh.neighbors_of(cell).tolist()
            assert mesh.search_neighbors_to(cell) == mesh.neighbors_to(cell).tolist()

    def test_uniform_grid_symmetry(self):
        mesh = Mesh(Topology(3, 3, 3, 0, periodic=(True, True, True)), neighborhood_size=1)
        for cell in mesh.local_cells().tolist():
            assert mesh.neighbors_of(cell).tolist() == mesh.neighbors_to(cell).tolist()


class TestIsolatedCell:
    def test_whole_neighborhood_is_itself(self):
        mesh = Mesh(Topology(1, 1, 1, 0), neighborhood_size=1)
        assert mesh.neighbors_of(1).tolist() == []

    def test_periodic_self_arrows(self):
        # every wrap image of the cell itself counts as a neighbor slot
        mesh = Mesh(Topology(1, 1, 1, 0, periodic=(True, True, True)), neighborhood_size=1)
        assert mesh.neighbors_of(1).tolist() == [1] * 26


class TestOwnership:
    def test_serial_owner(self):
        mesh = Mesh(Topology(2, 2, 2, 0))
        assert mesh.owner_of(5) == 0
        assert mesh.is_local(5)

    def test_unknown_cell_distinct_error(self):
        mesh = Mesh(Topology(2, 2, 2, 0))
        with pytest.raises(UnknownCellError):
            mesh.owner_of(999)
        with pytest.raises(UnknownCellError):
            mesh.level_of(999)

    def test_remote_access_raises_not_local(self):
        def program(comm):
            mesh = Mesh(Topology(4, 1, 1, 0), comm=comm, partition_method="block", data_factory=float)
            remote = 1 if comm.rank == 1 else 3
            try:
                mesh[remote] = 1.0
            except NotLocalError:
                return "not-local"
            return "wrote"

        assert run_ranks(2, program, timeout=60) == ["not-local", "not-local"]

    def test_replication_consistency(self):
        def program(comm):
            mesh = random_amr_mesh(99, comm=comm)
            return sorted(mesh.cell_table.items())

        tables = run_ranks(3, program, timeout=120)
        assert tables[0] == tables[1] == tables[2]


class TestClassify:
    def test_serial_all_inner(self):
        mesh = Mesh(Topology(3, 3, 1, 0), neighborhood_size=1)
        inner, outer = mesh.classify_cells()
        assert len(inner) == 9 and len(outer) == 0

    def test_1d_block_two_ranks(self):
        def program(comm):
            mesh = Mesh(Topology(4, 1, 1, 0), comm=comm, partition_method="block", neighborhood_size=1)
            inner, outer = mesh.classify_cells()
            return inner.tolist(), outer.tolist()

        results = run_ranks(2, program, timeout=60)
        assert results[0] == ([1], [2])
        assert results[1] == ([4], [3])

    def test_shock_tube_outer_bound(self):
        def program(comm):
            mesh = Mesh(Topology(64, 1, 1, 0), comm=comm, partition_method="block", neighborhood_size=1)
            _inner, outer = mesh.classify_cells()
            return len(outer)

        assert all(n <= 2 for n in run_ranks(4, program, timeout=60))


class TestOracleEquivalence:
    @pytest.mark.parametrize("seed", range(25))
    def test_random_meshes_match_oracle(self, seed):
        mesh = random_amr_mesh(seed)
        arrays = CellArrays(mesh) if mesh.neighborhood_size else None
        face_lists = oracle_face_lists(mesh) if mesh.neighborhood_size == 0 else None
        for cell in mesh.local_cells().tolist():
            of, to = oracle_lists(mesh, cell, arrays, face_lists)
            assert mesh.neighbors_of(cell).tolist() == of, (seed, cell, "of")
            assert mesh.neighbors_to(cell).tolist() == to, (seed, cell, "to")
            assert mesh.search_neighbors(cell) == of, (seed, cell, "scalar of")
            assert mesh.search_neighbors_to(cell) == to, (seed, cell, "scalar to")

    @pytest.mark.parametrize("seed", range(8))
    def test_arrow_duality(self, seed):
        mesh = random_amr_mesh(seed, commits=2)
        of_all = {c: mesh.neighbors_of(c).tolist() for c in mesh.local_cells().tolist()}
        to_all = {c: mesh.neighbors_to(c).tolist() for c in mesh.local_cells().tolist()}
        for c, lst in of_all.items():
            for b in set(lst):
                assert to_all[b].count(c) == lst.count(b)
        for c, lst in to_all.items():
            for b in set(lst):
                assert of_all[b].count(c) == lst.count(b)


class TestDataAccess:
    def test_get_set_local(self):
        mesh = Mesh(Topology(2, 1, 1, 0), data_factory=float)
        mesh[1] = 4.5
        assert mesh[1] == 4.5
        assert mesh[2] == 0.0

    def test_unknown_cell(self):
        mesh = Mesh(Topology(2, 1, 1, 0), data_factory=float)
        with pytest.raises(UnknownCellError):
            mesh[77]
