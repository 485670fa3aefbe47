import math

import numpy as np
import pytest

from gridforge import (
    FaceState,
    Mesh,
    Topology,
    adapt_by_index,
    compute_refinement_index,
    level_of,
    refine_threshold,
    run_ranks,
    unrefine_threshold,
)
from gridforge.amr import MU0

from conftest import random_amr_mesh


class TestRequests:
    def test_refine_paper_example(self):
        mesh = Mesh(Topology(1, 1, 1, 2), neighborhood_size=1)
        mesh.refine_completely(1)
        created, removed = mesh.stop_refining()
        assert created.tolist() == [2, 3, 4, 5, 6, 7, 8, 9]
        assert removed.tolist() == [1]
        assert 1 not in mesh.cell_table
        assert all(c in mesh.cell_table for c in range(2, 10))

    def test_refine_at_max_level_rejected(self):
        mesh = Mesh(Topology(2, 2, 2, 0))
        with pytest.raises(ValueError):
            mesh.refine_completely(1)

    def test_unrefine_level0_rejected(self):
        mesh = Mesh(Topology(2, 2, 2, 1))
        with pytest.raises(ValueError):
            mesh.unrefine(1)

    def test_conflicting_requests_rejected(self):
        mesh = Mesh(Topology(1, 1, 1, 2), neighborhood_size=1)
        mesh.refine_completely(1)
        mesh.stop_refining()
        mesh.refine_completely(2)
        with pytest.raises(ValueError):
            mesh.unrefine(2)

    def test_nonlocal_request_rejected(self):
        def program(comm):
            mesh = Mesh(Topology(4, 1, 1, 1), comm=comm, partition_method="block")
            remote = 4 if comm.rank == 0 else 1
            try:
                mesh.refine_completely(remote)
            except ValueError:
                return "rejected"
            return "accepted"

        assert run_ranks(2, program, timeout=60) == ["rejected", "rejected"]


class TestCommit:
    def test_idempotent_empty_commit(self):
        mesh = Mesh(Topology(2, 2, 2, 1), neighborhood_size=1)
        table = dict(mesh.cell_table)
        created, removed = mesh.stop_refining()
        assert len(created) == 0 and len(removed) == 0
        assert mesh.cell_table == table

    def test_single_refine_no_induction(self):
        mesh = Mesh(Topology(8, 8, 8, 2), neighborhood_size=1)
        mesh.refine_completely(1)
        created, removed = mesh.stop_refining()
        assert len(created) == 8 and len(removed) == 1
        mesh.check_balance(full=True)

    def test_induced_refinement_two_step(self):
        # a level-2 cell next to level-0 cells forces its neighbors up
        mesh = Mesh(Topology(4, 1, 1, 3), neighborhood_size=1)
        mesh.refine_completely(1)
        mesh.stop_refining()
        child = mesh.find_smallest_existing((0, 0, 0))
        mesh.refine_completely(child)
        mesh.stop_refining()
        mesh.check_balance(full=True)
        grand = mesh.find_smallest_existing((0, 0, 0))
        assert level_of(mesh.topology, grand) == 2
        mesh.refine_completely(grand)
        created, _ = mesh.stop_refining()
        assert len(created) > 8  # induction happened
        mesh.check_balance(full=True)

    def test_unrefine_round_trip(self):
        mesh = Mesh(Topology(1, 1, 1, 2), neighborhood_size=1)
        mesh.refine_completely(1)
        mesh.stop_refining()
        mesh.unrefine(2)
        created, removed = mesh.stop_refining()
        assert created.tolist() == [1]
        assert removed.tolist() == [2, 3, 4, 5, 6, 7, 8, 9]

    def test_unrefine_blocked_by_smaller_neighbor(self):
        mesh = Mesh(Topology(1, 1, 1, 2), neighborhood_size=1)
        mesh.refine_completely(1)
        mesh.stop_refining()
        mesh.refine_completely(2)
        mesh.stop_refining()
        # sibling 3 has level-2 neighbors (children of 2): group cannot unrefine
        mesh.unrefine(3)
        created, removed = mesh.stop_refining()
        assert len(created) == 0 and len(removed) == 0

    def test_refine_wins_over_unrefine(self):
        mesh = Mesh(Topology(1, 1, 1, 2), neighborhood_size=1)
        mesh.refine_completely(1)
        mesh.stop_refining()
        mesh.unrefine(3)
        mesh.refine_completely(2)
        created, removed = mesh.stop_refining()
        assert removed.tolist() == [2]
        assert 3 in mesh.cell_table

    def test_determinism_across_rank_counts(self):
        def program_for(size):
            def program(comm):
                mesh = random_amr_mesh(4242, comm=comm, commits=4)
                return sorted(mesh.cell_table)

            return program

        serial = run_ranks(1, program_for(1), timeout=120)[0]
        for size in (2, 3):
            tables = run_ranks(size, program_for(size), timeout=120)
            assert all(t == serial for t in tables)


class TestBalance:
    @pytest.mark.parametrize("seed", range(12))
    def test_post_commit_balance(self, seed):
        mesh = random_amr_mesh(seed, commits=4)
        mesh.check_balance(full=True)

    @pytest.mark.parametrize("seed", [3, 7, 11, 19])
    def test_induced_minimality(self, seed):
        """Each induced cell is necessary: removing it breaks the 2:1 rule."""
        import random

        rng = random.Random(seed)
        topo = Topology(rng.randint(2, 4), rng.randint(2, 4), rng.randint(1, 4), 2)
        mesh = Mesh(topo, neighborhood_size=rng.choice((1, 2)))
        local = mesh.local_cells().tolist()
        requests = set(rng.sample(local, min(3, len(local))))
        for cell in requests:
            mesh.refine_completely(cell)
        created, removed = mesh.stop_refining()
        mesh.check_balance(full=True)
        committed = set(removed.tolist())
        induced = committed - requests
        for skipped in induced:
            trial = Mesh(topo, neighborhood_size=mesh.neighborhood_size)
            for cell in committed - {skipped}:
                trial.refine_completely(cell)
            # bypass induction: apply the raw set and verify it is unbalanced
            refine_arr = np.fromiter(sorted(committed - {skipped}), dtype=np.int64)
            from gridforge.amr import BalanceError, _children_table

            children = _children_table(trial, refine_arr)
            owners = trial.all_owners[np.searchsorted(trial.all_ids, refine_arr)]
            keep = ~np.isin(trial.all_ids, refine_arr)
            new_ids = np.concatenate((trial.all_ids[keep], children.reshape(-1)))
            new_owners = np.concatenate(
                (trial.all_owners[keep], np.repeat(owners, 8))
            ).astype(np.int32)
            order = np.argsort(new_ids)
            trial._rebuild_structure(new_ids[order], new_owners[order])
            with pytest.raises(BalanceError):
                trial.check_balance(full=True)


class TestDataMapping:
    @staticmethod
    def build(with_callbacks=False):
        import struct

        from gridforge import DataContract

        class FloatContract(DataContract):
            def max_payload(self, tag):
                return 8

            def serialize(self, data, tag):
                return struct.pack("<d", data)

            def deserialize(self, data, tag, payload):
                return struct.unpack("<d", payload)[0]

        mesh = Mesh(
            Topology(2, 2, 2, 2),
            neighborhood_size=1,
            data_factory=float,
            data_contract=FloatContract(),
        )
        return mesh

    def test_copy_down_average_up_conserves(self):
        mesh = self.build()
        values = {c: 1.0 + 0.125 * c for c in mesh.local_cells().tolist()}
        for cell, value in values.items():
            mesh[cell] = value

        def total(m):
            return math.fsum(m[c] / 8.0 ** level_of(m.topology, c) for c in m.local_cells().tolist())

        before = total(mesh)
        mesh.refine_completely(1)
        mesh.stop_refining()
        assert total(mesh) == before  # copy-down is exact on dyadic volumes
        child = mesh.find_smallest_existing((0, 0, 0))
        mesh.unrefine(child)
        mesh.stop_refining()
        assert total(mesh) == before  # average-up of equal-volume children
        assert 1 in mesh.cell_table

    def test_custom_callbacks(self):
        mesh = Mesh(
            Topology(1, 1, 1, 1),
            neighborhood_size=1,
            data_factory=float,
            prolong=lambda m: [m / 8.0] * 8,
            restrict=lambda ms: sum(ms),
        )
        mesh[1] = 16.0
        mesh.refine_completely(1)
        mesh.stop_refining()
        assert all(mesh[c] == 2.0 for c in mesh.local_cells().tolist())
        mesh.unrefine(2)
        mesh.stop_refining()
        assert mesh[1] == 16.0


class TestRefinementIndex:
    def test_identical_states_zero(self):
        s = FaceState(rho=1.0, energy=2.0, momentum=(0.1, 0.2, 0.3), b1=(1e-9, 0, 0), velocity=(1, 2, 3))
        assert compute_refinement_index(s, s, v_wave=10.0) == 0.0

    def test_density_term(self):
        s1 = FaceState(rho=1.0, energy=5.0, b1=(1e-9, 0, 0), velocity=(1, 0, 0))
        s2 = FaceState(rho=2.0, energy=5.0, b1=(1e-9, 0, 0), velocity=(1, 0, 0))
        assert compute_refinement_index(s1, s2, v_wave=1.0) == pytest.approx(1.0)

    def test_hand_evaluated_all_terms(self):
        s1 = FaceState(rho=1.0, energy=2.0, momentum=(1.0, 0.0, 0.0), b1=(2e-3, 0.0, 0.0), velocity=(1.0, 0.0, 0.0))
        s2 = FaceState(rho=2.0, energy=3.0, momentum=(0.0, 1.0, 0.0), b1=(0.0, 1e-3, 0.0), velocity=(0.5, 0.5, 0.0))
        v_wave = 2.0
        expected = max(
            abs(1.0 - 2.0) / 1.0,
            abs(2.0 - 3.0) / 2.0,
            (1.0 + 1.0) / (2.0 * min(1.0 * 2.0, 2.0 * 3.0)),
            (4e-6 + 1e-6) / (2.0 * MU0 * 2.0),
            math.sqrt(5e-6) / 1e-3,
            (0.25 + 0.25) / (min(1.0, 0.5) + (0.01 * 2.0) ** 2),
        )
        assert compute_refinement_index(s1, s2, v_wave) == pytest.approx(expected, rel=1e-15)

    def test_degenerate_state_rejected(self):
        good = FaceState(rho=1.0, energy=1.0, b1=(1e-9, 0, 0), velocity=(1, 0, 0))
        bad_rho = FaceState(rho=0.0, energy=1.0, b1=(1e-9, 0, 0), velocity=(1, 0, 0))
        with pytest.raises(ValueError):
            compute_refinement_index(good, bad_rho, v_wave=1.0)
        zero_b = FaceState(rho=1.0, energy=1.0, b1=(0.0, 0.0, 0.0), velocity=(1, 0, 0))
        with pytest.raises(ValueError):
            compute_refinement_index(good, zero_b, v_wave=1.0)

    def test_paper_thresholds(self):
        # refine when alpha > 0.02*(l+1)/L, unrefine below half of that
        assert refine_threshold(0, 4) == pytest.approx(0.005)
        assert unrefine_threshold(0, 4) == pytest.approx(0.0025)
        assert 0.015 > refine_threshold(0, 4)
        assert 0.002 < unrefine_threshold(0, 4)
        assert 0.021 > refine_threshold(3, 4)

    def test_adapt_by_index_thresholds(self):
        mesh = Mesh(Topology(2, 2, 2, 4), neighborhood_size=1)
        n_ref, n_unref = adapt_by_index(mesh, {1: 0.025, 2: 0.004, 3: 0.0001})
        assert n_ref == 1 and n_unref == 0  # level-0 cells cannot unrefine
        assert 1 in mesh._refine_requests and 2 not in mesh._refine_requests
