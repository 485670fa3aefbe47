"""Remote-neighbor-copy updates.

Send/receive lists are precomputed from replicated metadata alone whenever
the grid structure changes: rank A sends cell c to rank B exactly when one of
B's cells has c in either arrow direction, which by arrow duality both sides
can derive locally. Updates then move only point-to-point messages; no
collective communication happens during ordinary time stepping.

Updates come in three flavours: synchronous (returns when copies are fresh),
split-phase (start / wait-receives / wait-sends, in either wait order, for
overlapping computation), and a two-phase protocol for variable-size data
(counts first, receiver resizes, payloads second, so the receiver always
declares an exact maximum).

Wire image of a batched (per-rank) message: 8-byte little-endian cell count,
then per cell: 8-byte cell id, 4-byte payload length, payload bytes. Per-cell
mode sends one such record per message.
"""

import pickle
import struct

import numpy as np

EXCHANGE_SUBSYS = 1 << 24
MAX_USER_TAG = (1 << 24) - 1

_COUNT = struct.Struct("<Q")
_RECORD = struct.Struct("<QI")


class ExchangeStateError(RuntimeError):
    """Update lifecycle misuse: double start, double wait, or a structural
    change while transfers are in flight."""


class ExchangeSizeError(RuntimeError):
    """A received payload does not match what the receiver declared."""


class DataContract:
    """How cell data turns into bytes, per transfer tag.

    Subclasses implement ``serialize``/``deserialize`` for each tag they use,
    ``max_payload`` returning a fixed per-cell bound (or None for tags moved
    only by the two-phase protocol) and, for variable tags, ``payload_size``
    giving the exact expected byte count from the receiver's current data.
    Whole-cell state for migration defaults to pickle.
    """

    def max_payload(self, tag) -> int | None:
        raise NotImplementedError

    def serialize(self, data, tag) -> bytes:
        raise NotImplementedError

    def deserialize(self, data, tag, payload: bytes):
        raise NotImplementedError

    def payload_size(self, data, tag) -> int:
        raise NotImplementedError(f"tag {tag} has no receiver-side size rule")

    def pack_cell(self, data) -> bytes:
        return pickle.dumps(data, protocol=4)

    def unpack_cell(self, payload: bytes):
        return pickle.loads(payload)


class TransferPlan:
    """Per-rank ordered send/receive cell lists for one structure epoch."""

    def __init__(self, epoch, send, recv):
        self.epoch = epoch
        self.send = send  # dict rank -> ascending int64 ids (local cells)
        self.recv = recv  # dict rank -> ascending int64 ids (remote copies)

    def counterpart_consistent(self, plans: list["TransferPlan"], me: int) -> bool:
        """Cross-validate against every rank's plan (testing helper)."""
        for other, plan in enumerate(plans):
            mine_to = self.send.get(other, np.empty(0, dtype=np.int64))
            theirs_from = plan.recv.get(me, np.empty(0, dtype=np.int64))
            if not np.array_equal(mine_to, theirs_from):
                return False
            mine_from = self.recv.get(other, np.empty(0, dtype=np.int64))
            theirs_to = plan.send.get(me, np.empty(0, dtype=np.int64))
            if not np.array_equal(mine_from, theirs_to):
                return False
        return True


def build_transfer_plan(mesh) -> TransferPlan:
    """Compute the plan purely from replicated metadata (zero communication)."""
    me = mesh.comm.rank
    if mesh.comm.size == 1:
        return TransferPlan(mesh.structure_epoch, {}, {})
    pair_owner = []
    pair_cell = []
    for offsets, ids in ((mesh._of_offsets, mesh._of_ids), (mesh._to_offsets, mesh._to_ids)):
        if len(ids) == 0:
            continue
        owners = mesh.owners_of_ids(ids)
        alien = owners != me
        if not alien.any():
            continue
        slots = np.repeat(np.arange(len(mesh.local_ids)), np.diff(offsets))
        pair_owner.append(owners[alien])
        pair_cell.append(mesh.local_ids[slots[alien]])
    send = {}
    if pair_owner:
        stacked = np.stack((np.concatenate(pair_owner), np.concatenate(pair_cell)))
        uniq = np.unique(stacked, axis=1)
        for rank in np.unique(uniq[0]):
            send[int(rank)] = uniq[1][uniq[0] == rank].astype(np.int64)
    recv = {}
    if len(mesh.remote_neighbor_ids):
        owners = mesh.owners_of_ids(mesh.remote_neighbor_ids)
        for rank in np.unique(owners):
            recv[int(rank)] = mesh.remote_neighbor_ids[owners == rank]
    return TransferPlan(mesh.structure_epoch, send, recv)


def _wire_tag(tag: int) -> int:
    if not 0 <= tag <= MAX_USER_TAG:
        raise ValueError(f"transfer tag {tag} outside [0, {MAX_USER_TAG}]")
    return EXCHANGE_SUBSYS | tag


def _encode_batch(mesh, cells, tag) -> bytes:
    contract = mesh.data_contract
    parts = [_COUNT.pack(len(cells))]
    for cell in cells.tolist():
        payload = contract.serialize(mesh.data[cell], tag)
        parts.append(_RECORD.pack(cell, len(payload)))
        parts.append(payload)
    return b"".join(parts)


def _decode_batch(mesh, source, data: bytes, expected_cells, tag, max_bytes_per_cell):
    contract = mesh.data_contract
    (count,) = _COUNT.unpack_from(data, 0)
    if count != len(expected_cells):
        raise ExchangeSizeError(
            f"rank {mesh.comm.rank}: expected {len(expected_cells)} cells from rank {source}, got {count}"
        )
    offset = _COUNT.size
    for cell in expected_cells.tolist():
        got_cell, length = _RECORD.unpack_from(data, offset)
        offset += _RECORD.size
        if got_cell != cell:
            raise ExchangeSizeError(
                f"rank {mesh.comm.rank}: expected cell {cell} from rank {source}, got {got_cell}"
            )
        if max_bytes_per_cell is not None:
            if length > max_bytes_per_cell:
                raise ExchangeSizeError(
                    f"cell {cell}: payload of {length} bytes exceeds declared maximum {max_bytes_per_cell}"
                )
        else:
            expected = contract.payload_size(mesh.data[cell], tag)
            if length != expected:
                raise ExchangeSizeError(
                    f"cell {cell}: payload of {length} bytes disagrees with the "
                    f"declared size {expected} from the count phase"
                )
        payload = data[offset : offset + length]
        offset += length
        mesh.data[cell] = contract.deserialize(mesh.data[cell], tag, payload)


def _receive_bound(mesh, cells, tag) -> tuple[int, int | None]:
    """(total message bound, per-cell bound) for a batched receive."""
    contract = mesh.data_contract
    fixed = contract.max_payload(tag)
    if fixed is not None:
        per_cell = fixed
        total = _COUNT.size + len(cells) * (_RECORD.size + fixed)
        return total, per_cell
    # variable tag: exact expectation from the receiver's current (resized) data
    sizes = [contract.payload_size(mesh.data[cell], tag) for cell in cells.tolist()]
    total = _COUNT.size + sum(_RECORD.size + s for s in sizes)
    return total, None


class _ExchangeState:
    def __init__(self, tag, epoch, mode):
        self.tag = tag
        self.epoch = epoch
        self.mode = mode
        self.receives = []  # (source rank, cells, handle(s), per-cell bound)
        self.waited_receives = False
        self.waited_sends = False


def start_updates(mesh, tag: int):
    """Post all receives and sends for one ghost update; non-blocking."""
    if mesh.data_contract is None:
        raise ExchangeStateError("mesh has no data contract; nothing to exchange")
    if mesh._exchange_state is not None:
        raise ExchangeStateError("a remote-copy update is already in flight")
    plan = mesh.transfer_plan()
    comm = mesh.comm
    wire = _wire_tag(tag)
    state = _ExchangeState(tag, mesh.structure_epoch, mesh.batching)
    if mesh.batching == "per-rank":
        for source in sorted(plan.recv):
            cells = plan.recv[source]
            bound, per_cell = _receive_bound(mesh, cells, tag)
            handle = comm.post_receive(source, wire, bound)
            state.receives.append((source, cells, handle, per_cell))
        for dest in sorted(plan.send):
            comm.post_send(dest, wire, _encode_batch(mesh, plan.send[dest], tag))
    else:
        contract = mesh.data_contract
        for source in sorted(plan.recv):
            cells = plan.recv[source]
            fixed = contract.max_payload(tag)
            handles = []
            for cell in cells.tolist():
                per = fixed if fixed is not None else contract.payload_size(mesh.data[cell], tag)
                handles.append(comm.post_receive(source, wire, _RECORD.size + per))
            state.receives.append((source, cells, handles, fixed))
        for dest in sorted(plan.send):
            for cell in plan.send[dest].tolist():
                payload = contract.serialize(mesh.data[cell], tag)
                comm.post_send(dest, wire, _RECORD.pack(cell, len(payload)) + payload)
    mesh._exchange_state = state


def _check_state(mesh) -> _ExchangeState:
    state = mesh._exchange_state
    if state is None:
        raise ExchangeStateError("no remote-copy update in flight")
    if state.epoch != mesh.structure_epoch:
        raise ExchangeStateError("grid structure changed while an update was in flight")
    return state


def _finish_if_done(mesh, state):
    if state.waited_receives and state.waited_sends:
        mesh._exchange_state = None


def wait_receives(mesh):
    """Block until all remote copies for the in-flight update are fresh."""
    state = _check_state(mesh)
    if state.waited_receives:
        raise ExchangeStateError("wait for receives called twice for one update")
    contract = mesh.data_contract
    for source, cells, handles, per_cell in state.receives:
        if state.mode == "per-rank":
            _decode_batch(mesh, source, handles.wait(), cells, state.tag, per_cell)
        else:
            for cell, handle in zip(cells.tolist(), handles):
                data = handle.wait()
                got_cell, length = _RECORD.unpack_from(data, 0)
                if got_cell != cell:
                    raise ExchangeSizeError(
                        f"rank {mesh.comm.rank}: expected cell {cell} from rank {source}, got {got_cell}"
                    )
                if per_cell is None:
                    expected = contract.payload_size(mesh.data[cell], state.tag)
                    if length != expected:
                        raise ExchangeSizeError(
                            f"cell {cell}: payload of {length} bytes disagrees with the "
                            f"declared size {expected} from the count phase"
                        )
                payload = data[_RECORD.size : _RECORD.size + length]
                mesh.data[cell] = contract.deserialize(mesh.data[cell], state.tag, payload)
    state.waited_receives = True
    _finish_if_done(mesh, state)


def wait_sends(mesh):
    """Release the send side; local cell data may be mutated again after this."""
    state = _check_state(mesh)
    if state.waited_sends:
        raise ExchangeStateError("wait for sends called twice for one update")
    state.waited_sends = True
    _finish_if_done(mesh, state)


def update_synchronous(mesh, tag: int):
    start_updates(mesh, tag)
    wait_receives(mesh)
    wait_sends(mesh)


def two_phase_variable_exchange(mesh, count_tag: int, payload_tag: int, resize_hook):
    """Counts first, resize receive buffers, then exactly-sized payloads."""
    update_synchronous(mesh, count_tag)
    for cell in mesh.remote_neighbor_ids.tolist():
        mesh.data[cell] = resize_hook(mesh.data[cell], cell)
    update_synchronous(mesh, payload_tag)
