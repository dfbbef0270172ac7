import random

import pytest
from hypothesis import given
from hypothesis import strategies as st

from splitstream import (FLAG_END_OF_TENSOR, WIRE_HEADER, BandwidthEstimator,
                         Confirmation, FrameAssembler, MsgType, ProtocolError,
                         ReassemblyError, SendBuffer, WireMessage,
                         decode_message, encode_message, frame_deadline_us,
                         make_control, may_send, parse_control,
                         process_send_buffer, reassemble,
                         should_process_frame)


def _data_msg(frame_id, offset, payload, total):
    flags = FLAG_END_OF_TENSOR if offset + len(payload) == total else 0
    return WireMessage(msg_type=MsgType.DATA, frame_id=frame_id,
                       offset=offset, total_len=total, payload=payload,
                       flags=flags)


class TestWireMessage:
    def test_header_is_19_bytes(self):
        assert WIRE_HEADER.size == 19

    def test_end_flag_must_match_geometry(self):
        with pytest.raises(ProtocolError, match="END_OF_TENSOR"):
            WireMessage(msg_type=MsgType.DATA, frame_id=0, offset=0,
                        total_len=100, payload=b"x" * 50,
                        flags=FLAG_END_OF_TENSOR)
        with pytest.raises(ProtocolError, match="END_OF_TENSOR"):
            WireMessage(msg_type=MsgType.DATA, frame_id=0, offset=50,
                        total_len=100, payload=b"x" * 50, flags=0)

    def test_end_of_tensor_property(self):
        msg = _data_msg(1, 60, b"y" * 40, 100)
        assert msg.end_of_tensor
        assert not _data_msg(1, 0, b"y" * 40, 100).end_of_tensor

    def test_payload_length_capped_at_u16(self):
        with pytest.raises(ProtocolError, match="u16"):
            _data_msg(0, 0, b"z" * 0x10000, 0x10000)

    @given(
        st.sampled_from(list(MsgType)),
        st.integers(0, 2 ** 32 - 1),
        st.integers(0, 2 ** 20),
        st.binary(max_size=300),
        st.integers(0, 5),
    )
    def test_round_trip_identity(self, mtype, frame_id, offset, payload, slack):
        total = offset + len(payload) + slack
        flags = FLAG_END_OF_TENSOR if slack == 0 else 0
        msg = WireMessage(msg_type=mtype, frame_id=frame_id, offset=offset,
                          total_len=total, payload=payload, flags=flags)
        wire = encode_message(msg)
        assert len(wire) == WIRE_HEADER.size + len(payload)
        assert decode_message(wire) == msg

    def test_decode_rejects_short_buffer(self):
        with pytest.raises(ProtocolError, match="shorter"):
            decode_message(b"\x54\x46\x01")

    def test_decode_rejects_bad_magic(self):
        wire = bytearray(encode_message(_data_msg(0, 0, b"abc", 3)))
        wire[0] = 0x00
        with pytest.raises(ProtocolError, match="magic"):
            decode_message(bytes(wire))

    def test_decode_rejects_bad_version(self):
        wire = bytearray(encode_message(_data_msg(0, 0, b"abc", 3)))
        wire[2] = 9
        with pytest.raises(ProtocolError, match="version"):
            decode_message(bytes(wire))

    def test_decode_rejects_unknown_type(self):
        wire = bytearray(encode_message(_data_msg(0, 0, b"abc", 3)))
        wire[3] = 77
        with pytest.raises(ProtocolError, match="type"):
            decode_message(bytes(wire))

    def test_decode_rejects_length_mismatch(self):
        wire = encode_message(_data_msg(0, 0, b"abc", 3))
        with pytest.raises(ProtocolError, match="payload_len"):
            decode_message(wire + b"!")
        with pytest.raises(ProtocolError, match="payload_len"):
            decode_message(wire[:-1])


class TestControlMessages:
    def test_round_trip(self):
        obj = {"cut": "stage2", "levels": 256, "clip": 3.0}
        msg = make_control(MsgType.MODEL_SWITCH, 7, obj)
        assert msg.end_of_tensor
        assert parse_control(decode_message(encode_message(msg))) == obj

    def test_payload_is_canonical_json(self):
        a = make_control(MsgType.RESULT, 0, {"b": 1, "a": 2})
        b = make_control(MsgType.RESULT, 0, {"a": 2, "b": 1})
        assert a.payload == b.payload

    def test_parse_rejects_garbage(self):
        junk = _data_msg(0, 0, b"\xff\xfe{", 3)
        with pytest.raises(ProtocolError, match="control"):
            parse_control(junk)


class TestConfirmation:
    def test_pack_unpack(self):
        conf = Confirmation(frame_id=9, packet_offset=2800,
                            cumulative_bytes=4200, recv_time_us=123456)
        packed = conf.pack()
        assert len(packed) == 24
        assert Confirmation.unpack(packed) == conf

    def test_unpack_size_checked(self):
        with pytest.raises(ProtocolError, match="24"):
            Confirmation.unpack(b"\x00" * 23)


class TestSendBuffer:
    def test_full_frame_packetizes_with_flush(self):
        buf = SendBuffer()
        data = bytes(range(250)) * 1  # 2.5 x mss for mss=100
        buf.enqueue(3, data, end=True)
        msgs = process_send_buffer(buf, mss=100)
        assert [len(m.payload) for m in msgs] == [100, 100, 50]
        assert [m.offset for m in msgs] == [0, 100, 200]
        assert all(m.total_len == 250 for m in msgs)
        assert [m.end_of_tensor for m in msgs] == [False, False, True]
        assert b"".join(m.payload for m in msgs) == data
        assert len(buf) == 0 and buf.pending_bytes == 0

    def test_partial_frame_held_back(self):
        buf = SendBuffer()
        buf.enqueue(1, b"a" * 50, end=False)
        assert buf.peek(100) is None
        assert buf.pop_next(100) is None
        assert buf.pending_bytes == 50
        buf.enqueue(1, b"b" * 60, end=True)
        msgs = process_send_buffer(buf, mss=100)
        assert [len(m.payload) for m in msgs] == [100, 10]
        assert msgs[0].payload == b"a" * 50 + b"b" * 50
        assert msgs[-1].end_of_tensor

    def test_empty_buffer(self):
        buf = SendBuffer()
        assert process_send_buffer(buf, mss=100) == []
        assert buf.peek(100) is None

    def test_peek_matches_pop(self):
        buf = SendBuffer()
        buf.enqueue(4, b"x" * 120, end=True)
        assert buf.peek(100) == (4, 0)
        msg = buf.pop_next(100)
        assert (msg.frame_id, msg.offset) == (4, 0)
        assert buf.peek(100) == (4, 100)

    def test_frames_drain_fifo(self):
        buf = SendBuffer()
        buf.enqueue(1, b"a" * 150, end=True)
        buf.enqueue(2, b"b" * 80, end=True)
        msgs = process_send_buffer(buf, mss=100)
        assert [(m.frame_id, m.offset, len(m.payload)) for m in msgs] == [
            (1, 0, 100), (1, 100, 50), (2, 0, 80)]

    def test_unfinished_head_blocks_queue(self):
        buf = SendBuffer()
        buf.enqueue(1, b"a" * 300, end=False)
        buf.enqueue(2, b"b" * 100, end=True)
        assert buf.pop_next(100) is None
        assert buf.peek(100) is None

    def test_mss_validated(self):
        buf = SendBuffer()
        with pytest.raises(ValueError, match="mss"):
            buf.pop_next(0)
        with pytest.raises(ValueError, match="mss"):
            buf.peek(0)


class TestBandwidthEstimator:
    def test_rtt_validated(self):
        with pytest.raises(ValueError, match="rtt"):
            BandwidthEstimator(rtt_us=-1)

    def test_initial_state(self):
        est = BandwidthEstimator(rtt_us=10_000)
        assert est.loss_ewma == 1.0
        assert est.bytes_sent == est.bytes_confirmed == 0

    def test_cold_estimate_is_prior(self):
        est = BandwidthEstimator(rtt_us=10_000)
        assert est.estimate_bandwidth(0) == 1e6
        est.record_received(100, 0)
        est.record_received(100, 10)
        est.record_received(100, 20)
        assert est.estimate_bandwidth(30) == 1e6  # below min samples

    def test_windowed_estimate(self):
        est = BandwidthEstimator(rtt_us=10_000)
        for t in (900_000, 933_333, 966_666, 1_000_000):
            est.record_received(25_000, t)
        assert est.estimate_bandwidth(1_000_000) == pytest.approx(1e6)

    def test_estimate_distinct_from_prior(self):
        est = BandwidthEstimator(rtt_us=10_000)
        for t in (900_000, 933_333, 966_666, 1_000_000):
            est.record_received(50_000, t)
        assert est.estimate_bandwidth(1_000_000) == pytest.approx(2e6)

    def test_stale_samples_expire(self):
        est = BandwidthEstimator(rtt_us=10_000)
        for t in (0, 10, 20, 30):
            est.record_received(50_000, t)
        assert est.estimate_bandwidth(2_000_000) == 1e6

    def test_duplicate_send_rejected(self):
        est = BandwidthEstimator(rtt_us=10_000)
        est.record_sent(1, 0, 100, now_us=0)
        with pytest.raises(ProtocolError, match="duplicate send"):
            est.record_sent(1, 0, 100, now_us=5)

    def test_unknown_confirmation_rejected(self):
        est = BandwidthEstimator(rtt_us=10_000)
        with pytest.raises(ProtocolError, match="unknown packet"):
            est.process_confirmation(Confirmation(1, 0, 100, 50), now_us=50)

    def test_duplicate_confirmation_is_noop(self):
        est = BandwidthEstimator(rtt_us=10_000)
        est.record_sent(1, 0, 100, now_us=0)
        conf = Confirmation(1, 0, 100, 5_000)
        est.process_confirmation(conf, now_us=5_000)
        est.process_confirmation(conf, now_us=6_000)
        assert est.bytes_confirmed == 100

    def test_prompt_confirmation_keeps_loss_estimate(self):
        est = BandwidthEstimator(rtt_us=10_000)
        est.record_sent(1, 0, 100, now_us=0)
        est.process_confirmation(Confirmation(1, 0, 100, 9_000), now_us=9_000)
        assert est.loss_ewma == 1.0

    def test_late_confirmation_lowers_loss_estimate(self):
        est = BandwidthEstimator(rtt_us=10_000)
        est.record_sent(1, 0, 200, now_us=0)
        est.process_confirmation(Confirmation(1, 0, 200, 25_000),
                                 now_us=25_000)
        assert est.loss_ewma == pytest.approx(0.9)

    def test_declared_loss_and_recovery(self):
        est = BandwidthEstimator(rtt_us=10_000)
        est.record_sent(1, 0, 500, now_us=0)
        assert est.expected_lost_bytes(40_001) == 500.0
        assert est.bytes_declared_lost == 500
        est.process_confirmation(Confirmation(1, 0, 500, 50_000),
                                 now_us=50_000)
        assert est.bytes_declared_lost == 0
        assert est.bytes_confirmed == 500
        assert est.loss_ewma == pytest.approx(0.9)
        assert est.unreceived_bytes(50_000) == 0.0

    def test_outstanding_bytes(self):
        est = BandwidthEstimator(rtt_us=10_000)
        est.record_sent(1, 0, 300, now_us=0)
        assert est.outstanding_bytes() == 300
        est.process_confirmation(Confirmation(1, 0, 300, 100), now_us=100)
        assert est.outstanding_bytes() == 0


class TestMaySend:
    def test_rate_limit_blocks(self):
        est = BandwidthEstimator(rtt_us=10_000)
        assert not may_send(est, now_us=5, last_request_us=0,
                            server_rate_limit_us=10)
        assert may_send(est, now_us=10, last_request_us=0,
                        server_rate_limit_us=10)

    def test_unconfirmed_bytes_block(self):
        est = BandwidthEstimator(rtt_us=10_000)
        est.record_sent(1, 0, 100, now_us=0)
        assert not may_send(est, now_us=100, last_request_us=0,
                            server_rate_limit_us=0)
        est.process_confirmation(Confirmation(1, 0, 100, 5_000), now_us=5_000)
        assert may_send(est, now_us=5_000, last_request_us=0,
                        server_rate_limit_us=0)

    def test_single_loss_releases_gate_at_presumption_age(self):
        est = BandwidthEstimator(rtt_us=10_000)
        for i in range(10):
            est.record_sent(0, i * 100, 100, now_us=0)
        for i in range(10):
            if i == 3:
                continue  # the lost packet
            est.process_confirmation(
                Confirmation(0, i * 100, (i + 1) * 100, 10_000),
                now_us=10_000)
        assert not may_send(est, 15_000, 0, 0)
        assert may_send(est, 20_000, 0, 0)  # within 2 RTT < 3 RTT bound


class TestShouldProcessFrame:
    def test_idle_server_and_link_keep(self):
        assert should_process_frame(10_000, 0, 0)

    def test_busy_server_drops(self):
        assert not should_process_frame(10_000, 50_000, 0)

    def test_backlogged_link_drops(self):
        assert not should_process_frame(10_000, 0, 50_000)

    def test_slow_client_keeps(self):
        assert should_process_frame(50_000, 10_000, 10_000)

    def test_equality_keeps(self):
        assert should_process_frame(10_000, 10_000, 10_000)

    def test_invert_flips(self):
        for args in [(10_000, 0, 0), (10_000, 50_000, 0),
                     (50_000, 10_000, 10_000)]:
            assert should_process_frame(*args, invert=True) != \
                should_process_frame(*args)


class TestFrameAssembler:
    def test_in_order_assembly(self):
        asm = FrameAssembler(5)
        added = asm.add(_data_msg(5, 0, b"a" * 100, 150), now_us=10)
        added += asm.add(_data_msg(5, 100, b"b" * 50, 150), now_us=20)
        assert added == 150
        assert asm.complete and asm.end_seen
        assert asm.first_arrival_us == 10
        data, gaps = asm.payload()
        assert data == b"a" * 100 + b"b" * 50
        assert gaps == []

    def test_duplicates_do_not_double_count(self):
        asm = FrameAssembler(1)
        msg = _data_msg(1, 0, b"x" * 80, 200)
        assert asm.add(msg) == 80
        assert asm.add(msg) == 0
        assert asm.bytes_received == 80

    def test_conflicting_total_len(self):
        asm = FrameAssembler(1)
        asm.add(_data_msg(1, 0, b"x" * 50, 200))
        with pytest.raises(ReassemblyError, match="total_len"):
            asm.add(_data_msg(1, 50, b"y" * 50, 300))

    def test_conflicting_payload(self):
        asm = FrameAssembler(1)
        asm.add(_data_msg(1, 0, b"x" * 50, 200))
        with pytest.raises(ReassemblyError, match="conflicting payload"):
            asm.add(_data_msg(1, 0, b"y" * 50, 200))

    def test_overlapping_segment(self):
        asm = FrameAssembler(1)
        asm.add(_data_msg(1, 0, b"x" * 50, 200))
        with pytest.raises(ReassemblyError, match="overlap"):
            asm.add(_data_msg(1, 25, b"y" * 50, 200))

    def test_segment_past_frame_end(self):
        asm = FrameAssembler(1)
        with pytest.raises(ReassemblyError, match="past declared"):
            asm.add(_data_msg(1, 180, b"x" * 50, 200))

    def test_wrong_frame_or_type(self):
        asm = FrameAssembler(1)
        with pytest.raises(ReassemblyError, match="frame 2"):
            asm.add(_data_msg(2, 0, b"x", 1))
        with pytest.raises(ReassemblyError, match="DATA"):
            asm.add(make_control(MsgType.RESULT, 1, {}))

    def test_gap_reporting(self):
        asm = FrameAssembler(9)
        asm.add(_data_msg(9, 0, b"a" * 100, 250))
        asm.add(_data_msg(9, 150, b"b" * 50, 250))
        data, gaps = asm.payload()
        assert gaps == [(100, 150), (200, 250)]
        assert data[:100] == b"a" * 100
        assert data[100:150] == b"\x00" * 50
        assert data[150:200] == b"b" * 50
        assert data[200:] == b"\x00" * 50
        assert not asm.complete

    def test_payload_requires_metadata(self):
        with pytest.raises(ReassemblyError, match="no segments"):
            FrameAssembler(0).payload()

    def test_reassemble_requires_messages(self):
        with pytest.raises(ReassemblyError, match="no messages"):
            reassemble([])

    @given(st.binary(min_size=1, max_size=2000),
           st.integers(1, 700), st.integers(0, 2 ** 32 - 1))
    def test_any_arrival_order_reconstructs(self, data, mss, seed):
        buf = SendBuffer()
        buf.enqueue(12, data, end=True)
        msgs = process_send_buffer(buf, mss=mss)
        assert all(len(m.payload) == mss for m in msgs[:-1])
        assert msgs[-1].end_of_tensor
        random.Random(seed).shuffle(msgs)
        assert reassemble(msgs) == (data, [])


class TestFrameDeadline:
    def test_known_value(self):
        assert frame_deadline_us(100_000, 2e6, 10_000) == 120_000

    def test_custom_margin(self):
        assert frame_deadline_us(0, 1e6, 1_000, margin_us=7) == 2_007

    def test_dead_bandwidth_floored(self):
        # bw 0 is floored to 1 B/s rather than dividing by zero
        assert frame_deadline_us(10, 0.0, 0) == 10 * 10 ** 6 + 50_000
