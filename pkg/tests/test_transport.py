import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gridforge import DeadlockError, Envelope, decode_envelope, gather_to_root, run_ranks
from gridforge.transport import ReceiveOverflowError, SerialComm, TransportError


class TestPointToPoint:
    def test_self_send_zero_bytes(self):
        def program(comm):
            comm.post_send(comm.rank, 7, b"")
            return comm.recv(comm.rank, 7, 16)

        assert run_ranks(1, program, timeout=30) == [b""]

    def test_two_rank_exchange_128_bytes(self):
        payloads = [bytes(range(128)), bytes(reversed(range(128)))]

        def program(comm):
            other = 1 - comm.rank
            handle = comm.post_receive(other, 3, 128)
            comm.post_send(other, 3, payloads[comm.rank])
            return handle.wait()

        results = run_ranks(2, program, timeout=30)
        assert results[0] == payloads[1]
        assert results[1] == payloads[0]

    def test_fifo_per_triple(self):
        def program(comm):
            if comm.rank == 0:
                comm.send(1, 9, b"A")
                comm.send(1, 9, b"B")
                return None
            first = comm.recv(0, 9, 4)
            second = comm.recv(0, 9, 4)
            return (first, second)

        assert run_ranks(2, program, timeout=30)[1] == (b"A", b"B")

    def test_receive_overflow_is_an_error(self):
        def program(comm):
            if comm.rank == 0:
                comm.send(1, 1, b"too long for you")
                comm.barrier()
                return "sent"
            try:
                comm.recv(0, 1, 4)
            except ReceiveOverflowError:
                comm.barrier()
                return "overflow"
            return "not detected"

        assert run_ranks(2, program, timeout=30) == ["sent", "overflow"]

    def test_tag_isolation(self):
        def program(comm):
            if comm.rank == 0:
                comm.send(1, 5, b"five")
                comm.send(1, 6, b"six")
                return None
            six = comm.recv(0, 6, 8)
            five = comm.recv(0, 5, 8)
            return (five, six)

        assert run_ranks(2, program, timeout=30)[1] == (b"five", b"six")


class TestCollectives:
    def test_allreduce_min(self):
        values = [0.5, 0.2, 0.9]

        def program(comm):
            return comm.allreduce(values[comm.rank], "min")

        assert run_ranks(3, program, timeout=30) == [0.2, 0.2, 0.2]

    def test_allreduce_sum_rank_ids(self):
        results = run_ranks(4, lambda comm: comm.allreduce(comm.rank, "sum"), timeout=30)
        assert results == [6, 6, 6, 6]

    def test_allgather_variable(self):
        blocks = [b"", b"hello", b"abc"]

        def program(comm):
            return comm.allgather(blocks[comm.rank])

        for result in run_ranks(3, program, timeout=30):
            assert result == blocks

    def test_barrier_and_counters(self):
        def program(comm):
            comm.barrier()
            comm.allreduce(1, "sum")
            return comm.stats_snapshot()

        stats = run_ranks(2, program, timeout=30)[0]
        assert stats["collectives"]["barrier"] == 1
        assert stats["collectives"]["allreduce"] == 1

    def test_serial_comm(self):
        comm = SerialComm()
        assert comm.allreduce(5, "min") == 5
        assert comm.allgather(b"x") == [b"x"]
        comm.send(0, 2, b"loop")
        assert comm.recv(0, 2, 8) == b"loop"


class TestRunRanks:
    def test_single_rank_result(self):
        assert run_ranks(1, lambda comm: comm.rank, timeout=30) == [0]

    def test_rank_failure_propagates(self):
        def program(comm):
            if comm.rank == 1:
                raise RuntimeError("boom")
            comm.barrier()

        with pytest.raises(RuntimeError, match="boom"):
            run_ranks(2, program, timeout=30)

    def test_zero_size_rejected(self):
        with pytest.raises(ValueError):
            run_ranks(0, lambda comm: None)

    def test_mismatched_tags_deadlock(self):
        def program(comm):
            other = 1 - comm.rank
            comm.post_send(other, 100 + comm.rank, b"x")
            return comm.recv(other, 42, 8)

        with pytest.raises(DeadlockError):
            run_ranks(2, program, timeout=30)

    def test_gather_to_root(self):
        def program(comm):
            return gather_to_root(comm, bytes([comm.rank]) * (comm.rank + 1), 77)

        results = run_ranks(3, program, timeout=30)
        assert results[0] == [b"\x00", b"\x01\x01", b"\x02\x02\x02"]
        assert results[1] is None and results[2] is None


class TestEnvelope:
    def test_wire_round_trip(self):
        env = Envelope(3, 9, 4096, b"payload-bytes")
        assert decode_envelope(env.encode()) == env

    def test_little_endian_layout(self):
        env = Envelope(1, 2, 3, b"AB")
        raw = env.encode()
        assert raw[:4] == b"\x01\x00\x00\x00"
        assert raw[4:8] == b"\x02\x00\x00\x00"
        assert raw[8:12] == b"\x03\x00\x00\x00"
        assert raw[12:20] == (2).to_bytes(8, "little")
        assert raw[20:] == b"AB"

    def test_truncated_rejected(self):
        raw = Envelope(0, 0, 0, b"abcdef").encode()
        with pytest.raises(TransportError):
            decode_envelope(raw[:-2])


@settings(max_examples=40, deadline=None)
@given(payload=st.binary(max_size=65536))
def test_bit_exact_delivery(payload):
    def program(comm):
        if comm.rank == 0:
            comm.send(1, 11, payload)
            return None
        return comm.recv(0, 11, 1 << 20)

    assert run_ranks(2, program, timeout=60)[1] == payload
