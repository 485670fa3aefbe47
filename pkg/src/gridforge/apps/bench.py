"""Benchmarks: pure AMR refinement speed, ghost-exchange throughput, and the
compiled-vs-pure kernel comparison."""

import time

import numpy as np

from .. import kernels
from ..exchange import DataContract
from ..geometry import Geometry
from ..mesh import Mesh
from ..topology import Topology


def bench_amr_speed(comm, base: int, target: int, print_stats=True) -> dict:
    """Refine every local cell until the grid holds target**3 cells.

    The initial space-filling-curve partition is not timed and cells are not
    moved between ranks during the loop. Reports created cells per second;
    the reference figure for comparison is on the order of 1e6 created cells
    per second (hardware dependent, not a gate).
    """
    doublings = 0
    while base << doublings < target:
        doublings += 1
    if base << doublings != target:
        raise ValueError(f"target {target}^3 is not a power-of-two multiple of base {base}^3")
    topo = Topology(base, base, base, doublings)
    mesh = Mesh(topo, neighborhood_size=1, comm=comm, partition_method="hilbert_sfc")
    start = time.perf_counter()
    created_total = 0
    while len(mesh.all_ids) < target**3:
        for cell in mesh.local_cells().tolist():
            mesh.refine_completely(cell)
        created, _removed = mesh.stop_refining()
        created_total += len(created)
        if print_stats and comm.rank == 0:
            print(f"step={doublings} cells={len(mesh.all_ids)} mass=0 fc={mesh.local_cell_fraction():g} dt=0")
    elapsed = time.perf_counter() - start
    rate = created_total / elapsed if elapsed > 0 else float("inf")
    if print_stats and comm.rank == 0:
        print(
            f"amr-speed base={base}^3 target={target}^3 ranks={comm.size} "
            f"created={created_total} seconds={elapsed:.3f} cells_per_second={rate:,.0f} "
            f"(reference figure ~1e6/s)"
        )
    return {"created": created_total, "seconds": elapsed, "rate": rate}


class _BlobContract(DataContract):
    def __init__(self, nbytes):
        self.nbytes = nbytes

    def max_payload(self, tag):
        return self.nbytes

    def serialize(self, data, tag):
        return data

    def deserialize(self, data, tag, payload):
        return payload


def bench_exchange(comm, cells: int, nbytes: int, batching="per-rank", rounds=20, print_stats=True) -> dict:
    """Time repeated ghost updates on a 1D block-partitioned chain."""
    topo = Topology(cells, 1, 1, 0)
    seed = np.random.default_rng(1)
    mesh = Mesh(
        topo,
        Geometry(),
        neighborhood_size=1,
        comm=comm,
        partition_method="block",
        data_factory=lambda: bytes(nbytes),
        data_contract=_BlobContract(nbytes),
    )
    mesh.set_message_batching(batching)
    for cell in mesh.local_cells().tolist():
        mesh.data[cell] = seed.bytes(nbytes)
    before = comm.stats_snapshot()
    start = time.perf_counter()
    for _ in range(rounds):
        mesh.update_remote_neighbor_data(0)
    elapsed = time.perf_counter() - start
    after = comm.stats_snapshot()
    messages = after["p2p_messages"] - before["p2p_messages"]
    payload = after["p2p_bytes"] - before["p2p_bytes"]
    collectives = sum(after["collectives"].values()) - sum(before["collectives"].values())
    rate = payload / elapsed / 1e6 if elapsed > 0 else float("inf")
    if print_stats and comm.rank == 0:
        print(
            f"exchange cells={cells} bytes={nbytes} ranks={comm.size} batching={batching} "
            f"rounds={rounds} messages={messages} payload_bytes={payload} "
            f"collectives={collectives} MB_per_second={rate:.1f}"
        )
    return {
        "messages": messages,
        "payload_bytes": payload,
        "collectives": collectives,
        "seconds": elapsed,
    }


def bench_kernels(base: int = 32, print_stats=True) -> dict:
    """Compare available kernel implementations on one uniform arrow rebuild."""
    topo = Topology(base, base, base, 1, periodic=(True, True, True))
    starts = np.asarray(topo.level_starts, dtype=np.int64)
    ids = np.arange(1, topo.level_count(0) + 1, dtype=np.int64)
    results = {}
    for name in kernels.available_implementations():
        impl = kernels.get_implementation(name)
        t0 = time.perf_counter()
        levels, x, y, z = impl.decode(ids, base, base, base, 1, starts)
        decode_s = time.perf_counter() - t0
        t0 = time.perf_counter()
        of_off, of_ids, _to_off, _to_ids = impl.build_arrows(
            1, base, base, base, 1, topo.periodic, starts, [ids - 1, np.empty(0, dtype=np.int64)],
            ids, levels, x, y, z,
        )
        arrows_s = time.perf_counter() - t0
        t0 = time.perf_counter()
        impl.hilbert_keys(6, x, y, z)
        hilbert_s = time.perf_counter() - t0
        results[name] = {"decode": decode_s, "arrows": arrows_s, "hilbert": hilbert_s}
        if print_stats:
            print(
                f"kernels[{name}] cells={len(ids)} decode={decode_s:.4f}s "
                f"arrows={arrows_s:.4f}s ({len(of_ids)} arrows) hilbert={hilbert_s:.4f}s"
            )
    if print_stats and len(results) == 2:
        speedup = results["pure"]["arrows"] / max(results["compiled"]["arrows"], 1e-12)
        print(f"compiled arrow-build speedup over pure: {speedup:.2f}x")
    return results
