"""Tensor streaming protocol: wire format, pacing and reassembly.

Every message shares one little-endian 19-byte header:

    magic       u16   0x4654
    version     u8    1
    msg_type    u8    DATA=1 CONFIRM=2 MODEL_SWITCH=3 MODEL_READY=4 RESULT=5
    frame_id    u32
    offset      u32   byte offset of this payload within the frame
    total_len   u32   full frame length in bytes
    flags       u8    bit 0 = END_OF_TENSOR
    payload_len u16
    payload     payload_len bytes

END_OF_TENSOR is set exactly when offset + payload_len == total_len, so a
receiver can recognize the flush without bookkeeping.  DATA payloads carry
bitstream chunks; CONFIRM payloads carry a fixed 24-byte receipt (frame,
packet offset, cumulative unique bytes, receive time); the control types
carry JSON.

The sender side couples a frame queue (``SendBuffer``) with a
``BandwidthEstimator`` that meters confirmed bytes over a sliding window
and presumes unconfirmed packets lost once they outlive two round trips.
``may_send`` releases a packet only when the server rate limit has elapsed
and everything previously sent is either confirmed or presumed lost, which
caps in-flight data at one MSS beyond the presumed-lost pool.
``should_process_frame`` is the capture-time drop rule: skip the frame
when the client could not finish it before the server slot or the backlog
drains.
"""

from __future__ import annotations

import json
import struct
from collections import deque
from dataclasses import dataclass, field
from enum import IntEnum

__all__ = [
    "MsgType",
    "WireMessage",
    "Confirmation",
    "ProtocolError",
    "ReassemblyError",
    "FLAG_END_OF_TENSOR",
    "WIRE_HEADER",
    "encode_message",
    "decode_message",
    "make_control",
    "parse_control",
    "SendBuffer",
    "process_send_buffer",
    "BandwidthEstimator",
    "may_send",
    "should_process_frame",
    "FrameAssembler",
    "reassemble",
    "frame_deadline_us",
]

WIRE_MAGIC = 0x4654
WIRE_VERSION = 1
WIRE_HEADER = struct.Struct("<HBBIIIBH")
CONFIRM_PAYLOAD = struct.Struct("<IIQQ")
FLAG_END_OF_TENSOR = 0x01

DEFAULT_MSS = 1400


class MsgType(IntEnum):
    DATA = 1
    CONFIRM = 2
    MODEL_SWITCH = 3
    MODEL_READY = 4
    RESULT = 5


class ProtocolError(Exception):
    pass


class ReassemblyError(ProtocolError):
    pass


@dataclass(frozen=True)
class WireMessage:
    msg_type: MsgType
    frame_id: int
    offset: int
    total_len: int
    payload: bytes = b""
    flags: int = 0

    def __post_init__(self):
        if len(self.payload) > 0xFFFF:
            raise ProtocolError(f"payload {len(self.payload)} exceeds u16 range")
        end = bool(self.flags & FLAG_END_OF_TENSOR)
        if end != (self.offset + len(self.payload) == self.total_len):
            raise ProtocolError(
                "END_OF_TENSOR flag inconsistent with offset/total_len"
            )

    @property
    def end_of_tensor(self) -> bool:
        return bool(self.flags & FLAG_END_OF_TENSOR)


def _flags_for(offset: int, payload_len: int, total_len: int) -> int:
    return FLAG_END_OF_TENSOR if offset + payload_len == total_len else 0


@dataclass(frozen=True)
class Confirmation:
    """Receipt for one DATA packet."""

    frame_id: int
    packet_offset: int
    cumulative_bytes: int     # unique frame bytes held by the receiver
    recv_time_us: int

    def pack(self) -> bytes:
        return CONFIRM_PAYLOAD.pack(
            self.frame_id, self.packet_offset, self.cumulative_bytes,
            self.recv_time_us,
        )

    @classmethod
    def unpack(cls, payload: bytes) -> "Confirmation":
        if len(payload) != CONFIRM_PAYLOAD.size:
            raise ProtocolError(
                f"confirmation payload must be {CONFIRM_PAYLOAD.size} bytes"
            )
        return cls(*CONFIRM_PAYLOAD.unpack(payload))


def encode_message(msg: WireMessage) -> bytes:
    return WIRE_HEADER.pack(
        WIRE_MAGIC, WIRE_VERSION, int(msg.msg_type), msg.frame_id,
        msg.offset, msg.total_len, msg.flags, len(msg.payload),
    ) + msg.payload


def decode_message(data: bytes) -> WireMessage:
    if len(data) < WIRE_HEADER.size:
        raise ProtocolError(f"buffer {len(data)} shorter than header")
    magic, version, mtype, frame_id, offset, total_len, flags, plen = \
        WIRE_HEADER.unpack_from(data)
    if magic != WIRE_MAGIC:
        raise ProtocolError(f"bad magic 0x{magic:04x}")
    if version != WIRE_VERSION:
        raise ProtocolError(f"unsupported version {version}")
    try:
        mtype = MsgType(mtype)
    except ValueError:
        raise ProtocolError(f"unknown message type {mtype}") from None
    if len(data) != WIRE_HEADER.size + plen:
        raise ProtocolError(
            f"buffer {len(data)} does not match header + payload_len {plen}"
        )
    return WireMessage(
        msg_type=mtype, frame_id=frame_id, offset=offset,
        total_len=total_len, payload=data[WIRE_HEADER.size:], flags=flags,
    )


def make_control(msg_type: MsgType, frame_id: int, obj: dict) -> WireMessage:
    payload = json.dumps(obj, sort_keys=True).encode("utf-8")
    return WireMessage(
        msg_type=msg_type, frame_id=frame_id, offset=0,
        total_len=len(payload), payload=payload,
        flags=_flags_for(0, len(payload), len(payload)),
    )


def parse_control(msg: WireMessage) -> dict:
    try:
        return json.loads(msg.payload.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ProtocolError(f"bad control payload: {exc}") from None


# --------------------------------------------------------------------- sender


@dataclass
class _QueuedFrame:
    frame_id: int
    data: bytearray
    end_marked: bool
    next_offset: int = 0


class SendBuffer:
    """FIFO of frame bitstreams awaiting packetization."""

    def __init__(self):
        self._frames: deque[_QueuedFrame] = deque()

    def enqueue(self, frame_id: int, data: bytes, end: bool = True) -> None:
        """Append bytes for a frame; ``end=True`` marks the tensor boundary.

        Appending to the tail frame is allowed until its boundary is marked.
        """
        if self._frames and self._frames[-1].frame_id == frame_id \
                and not self._frames[-1].end_marked:
            self._frames[-1].data.extend(data)
            self._frames[-1].end_marked = end
        else:
            self._frames.append(_QueuedFrame(frame_id, bytearray(data), end))

    @property
    def pending_bytes(self) -> int:
        return sum(len(f.data) - f.next_offset for f in self._frames)

    def __len__(self) -> int:
        return len(self._frames)

    def peek(self, mss: int) -> tuple[int, int] | None:
        """(frame_id, offset) of the message pop_next would emit, or None."""
        if mss < 1:
            raise ValueError("mss must be positive")
        for frame in self._frames:
            if not frame.end_marked:
                return None
            if len(frame.data) - frame.next_offset > 0:
                return frame.frame_id, frame.next_offset
        return None

    def pop_next(self, mss: int) -> WireMessage | None:
        """Next DATA message, or None when nothing is ready to go.

        Full-MSS chunks go out while available; once a frame's boundary is
        in the buffer, its remainder goes out immediately (sub-MSS, with
        END_OF_TENSOR).  A frame whose boundary has not been enqueued yet
        is held back entirely: its final length is not known, and every
        wire header carries total_len.
        """
        if mss < 1:
            raise ValueError("mss must be positive")
        while self._frames:
            frame = self._frames[0]
            if not frame.end_marked:
                return None
            total = len(frame.data)
            pending = total - frame.next_offset
            if pending == 0:
                self._frames.popleft()
                continue
            chunk_len = mss if pending >= mss else pending
            offset = frame.next_offset
            chunk = bytes(frame.data[offset:offset + chunk_len])
            frame.next_offset += chunk_len
            if frame.next_offset == total:
                self._frames.popleft()
            return WireMessage(
                msg_type=MsgType.DATA, frame_id=frame.frame_id, offset=offset,
                total_len=total, payload=chunk,
                flags=_flags_for(offset, chunk_len, total),
            )
        return None


def process_send_buffer(buffer: SendBuffer, mss: int = DEFAULT_MSS) -> list[WireMessage]:
    """Drain every currently emittable DATA message, in order."""
    out = []
    while (msg := buffer.pop_next(mss)) is not None:
        out.append(msg)
    return out


# ------------------------------------------------------------------ estimator


class BandwidthEstimator:
    """Confirmed-byte bandwidth over a sliding window, plus loss presumption.

    Packets are keyed by (frame_id, offset).  One still unconfirmed after
    ``presume_after_rtts`` round trips counts as presumptively lost at
    confidence ``loss_ewma``; after twice that age it is declared lost
    outright.  ``loss_ewma`` starts at 1.0 (an aged packet is assumed gone)
    and is corrected downward whenever a confirmation does arrive late,
    at smoothing factor alpha.
    """

    WINDOW_US = 1_000_000
    MIN_SAMPLES = 4
    PRIOR_BW = 1e6            # bytes/second
    LOSS_ALPHA = 0.1
    PRESUME_AFTER_RTTS = 2

    def __init__(self, rtt_us: int, mss: int = DEFAULT_MSS):
        if rtt_us < 0:
            raise ValueError("rtt must be non-negative")
        self.rtt_us = rtt_us
        self.mss = mss
        self.loss_ewma = 1.0
        self.bytes_sent = 0
        self.bytes_confirmed = 0
        self.bytes_declared_lost = 0
        self._pending: dict[tuple[int, int], tuple[int, int]] = {}  # key -> (sent_us, size)
        self._confirmed: set[tuple[int, int]] = set()
        self._declared: dict[tuple[int, int], int] = {}
        self._samples: deque[tuple[int, int]] = deque()  # (recv_time_us, bytes)

    # -- sending side bookkeeping

    def record_sent(self, frame_id: int, offset: int, size: int, now_us: int) -> None:
        key = (frame_id, offset)
        if key in self._pending or key in self._confirmed or key in self._declared:
            raise ProtocolError(f"duplicate send of packet {key}")
        self._pending[key] = (now_us, size)
        self.bytes_sent += size

    def process_confirmation(self, conf: Confirmation, now_us: int) -> None:
        key = (conf.frame_id, conf.packet_offset)
        self._sweep_declared(now_us)
        if key in self._confirmed:
            return  # duplicate receipt
        if key in self._pending:
            sent_us, size = self._pending.pop(key)
            if now_us - sent_us > self.PRESUME_AFTER_RTTS * self.rtt_us:
                # late arrival: aged packets are not always lost
                self.loss_ewma += self.LOSS_ALPHA * (0.0 - self.loss_ewma)
        elif key in self._declared:
            size = self._declared.pop(key)
            self.bytes_declared_lost -= size
            self.loss_ewma += self.LOSS_ALPHA * (0.0 - self.loss_ewma)
        else:
            raise ProtocolError(f"confirmation for unknown packet {key}")
        self._confirmed.add(key)
        self.bytes_confirmed += size
        self._samples.append((conf.recv_time_us, size))

    def _sweep_declared(self, now_us: int) -> None:
        """Move packets older than twice the presumption age to declared-lost."""
        cutoff = now_us - 2 * self.PRESUME_AFTER_RTTS * self.rtt_us
        for key in [k for k, (t, _) in self._pending.items() if t < cutoff]:
            _, size = self._pending.pop(key)
            self._declared[key] = size
            self.bytes_declared_lost += size
            self.loss_ewma += self.LOSS_ALPHA * (1.0 - self.loss_ewma)

    def record_received(self, size: int, now_us: int) -> None:
        """Receiver-side hook: count arrived bytes toward the rate window."""
        self._samples.append((now_us, size))

    # -- estimates

    def estimate_bandwidth(self, now_us: int) -> float:
        """Bytes per second from confirmations inside the window; a cold or
        sparse window falls back to the prior."""
        horizon = now_us - self.WINDOW_US
        while self._samples and self._samples[0][0] < horizon:
            self._samples.popleft()
        if len(self._samples) < self.MIN_SAMPLES:
            return self.PRIOR_BW
        span_us = now_us - self._samples[0][0]
        if span_us <= 0:
            return self.PRIOR_BW
        total = sum(size for _, size in self._samples)
        return total * 1e6 / span_us

    def expected_lost_bytes(self, now_us: int) -> float:
        """Declared losses plus the presumed share of aged in-flight bytes."""
        self._sweep_declared(now_us)
        horizon = now_us - self.PRESUME_AFTER_RTTS * self.rtt_us
        aged = sum(size for t, size in self._pending.values() if t <= horizon)
        return self.bytes_declared_lost + self.loss_ewma * aged

    def unreceived_bytes(self, now_us: int) -> float:
        return self.bytes_sent - self.bytes_confirmed - self.expected_lost_bytes(now_us)

    def outstanding_bytes(self) -> int:
        """In-flight bytes not yet confirmed or declared lost."""
        return sum(size for _, size in self._pending.values())


def may_send(est: BandwidthEstimator, now_us: int, last_request_us: int,
             server_rate_limit_us: int) -> bool:
    """Gate on the server slot having elapsed and everything previously
    sent being accounted for (confirmed or presumed lost)."""
    if now_us < last_request_us + server_rate_limit_us:
        return False
    return est.unreceived_bytes(now_us) <= 0.0


def should_process_frame(client_remain_us: float, server_remain_us: float,
                         bandwidth_remain_us: float, invert: bool = False) -> bool:
    """Capture-time keep/drop rule.

    Keep the frame unless the client-side work would outlast either the
    wait for the next server slot or the time to drain the send backlog.
    ``invert`` flips the decision; that is a documented experiment knob,
    not the default behavior.
    """
    keep = not (
        client_remain_us < server_remain_us
        or client_remain_us < bandwidth_remain_us
    )
    return not keep if invert else keep


# ------------------------------------------------------------------ receiver


class FrameAssembler:
    """Order-independent reassembly of one frame's DATA messages."""

    def __init__(self, frame_id: int):
        self.frame_id = frame_id
        self.total_len: int | None = None
        self.end_seen = False
        self.first_arrival_us: int | None = None
        self._segments: dict[int, bytes] = {}

    def add(self, msg: WireMessage, now_us: int | None = None) -> int:
        """Ingest a DATA message; returns the bytes newly added (0 for a
        duplicate).  Conflicting metadata discards the frame via error."""
        if msg.msg_type != MsgType.DATA:
            raise ReassemblyError(f"not a DATA message: {msg.msg_type}")
        if msg.frame_id != self.frame_id:
            raise ReassemblyError(
                f"message for frame {msg.frame_id} fed to assembler {self.frame_id}"
            )
        if self.total_len is None:
            self.total_len = msg.total_len
        elif self.total_len != msg.total_len:
            raise ReassemblyError(
                f"conflicting total_len {msg.total_len} vs {self.total_len}"
            )
        if msg.offset + len(msg.payload) > msg.total_len:
            raise ReassemblyError("segment extends past declared frame length")
        if self.first_arrival_us is None and now_us is not None:
            self.first_arrival_us = now_us
        if msg.end_of_tensor:
            self.end_seen = True
        existing = self._segments.get(msg.offset)
        if existing is not None:
            if existing != msg.payload:
                raise ReassemblyError(f"conflicting payload at offset {msg.offset}")
            return 0
        for off, seg in self._segments.items():
            if off < msg.offset + len(msg.payload) and msg.offset < off + len(seg):
                raise ReassemblyError(f"overlapping segment at offset {msg.offset}")
        self._segments[msg.offset] = msg.payload
        return len(msg.payload)

    @property
    def bytes_received(self) -> int:
        return sum(len(s) for s in self._segments.values())

    @property
    def complete(self) -> bool:
        return self.total_len is not None and self.bytes_received == self.total_len

    def payload(self) -> tuple[bytes, list[tuple[int, int]]]:
        """(assembled bytes, gap ranges).  Gaps are zero-filled in the
        returned buffer and reported as [start, end) pairs."""
        if self.total_len is None:
            raise ReassemblyError("no segments received")
        buf = bytearray(self.total_len)
        have = bytearray(self.total_len)
        for off in sorted(self._segments):
            seg = self._segments[off]
            buf[off:off + len(seg)] = seg
            have[off:off + len(seg)] = b"\x01" * len(seg)
        gaps = []
        pos = 0
        while pos < self.total_len:
            if have[pos]:
                pos += 1
                continue
            start = pos
            while pos < self.total_len and not have[pos]:
                pos += 1
            gaps.append((start, pos))
        return bytes(buf), gaps


def reassemble(messages) -> tuple[bytes, list[tuple[int, int]]]:
    """One-shot reassembly of an iterable of DATA messages (any order)."""
    it = iter(messages)
    try:
        first = next(it)
    except StopIteration:
        raise ReassemblyError("no messages") from None
    asm = FrameAssembler(first.frame_id)
    asm.add(first)
    for msg in it:
        asm.add(msg)
    return asm.payload()


def frame_deadline_us(total_len: int, est_bw_bps: float, rtt_us: int,
                      margin_us: int = 50_000) -> int:
    """How long a receiver waits for stragglers before processing with gaps."""
    transfer_us = int(total_len * 1e6 / max(est_bw_bps, 1.0))
    return 2 * rtt_us + transfer_us + margin_us
