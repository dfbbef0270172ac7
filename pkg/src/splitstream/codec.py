"""Block-transform codec for tiled symbol planes.

The plane is padded to 8x8 blocks by edge replication, level-shifted by
-128, transformed with the orthonormal 2-D DCT-II, divided by a quality-
scaled quantization table, and entropy coded.  The entropy stage is
deliberately simple and byte-aligned: zigzag scan, DC delta against the
previous block, then (run, value) pairs for nonzero ACs, with values in
signed LEB128 and a run byte of 255 closing each block.

Bitstream container (FTCB, little-endian):

    magic     4 bytes  b"FTCB"
    version   u8       1
    quality   u8       1..100
    plane_w   u16
    plane_h   u16
    grid_cols u8
    grid_rows u8
    tile_w    u16
    tile_h    u16
    channels  u16
    levels    u16
    blocks    raster order over the padded plane

The DCT runs in double precision, but coefficients are snapped to 1/4096
steps before quantization so the bitstream does not depend on how a
platform rounds the last ulp.
"""

from __future__ import annotations

import struct

import numpy as np

from .tiling import TileLayout, TiledPlane

__all__ = [
    "CodecError",
    "BadMagicError",
    "TruncatedStreamError",
    "BlockCountError",
    "TargetInfeasibleError",
    "quality_table",
    "encode",
    "decode",
    "decode_prefix",
    "undecoded_plane_mask",
    "encode_to_target",
    "rate_fidelity_curve",
    "stream_info",
    "FTCB_HEADER",
]

FTCB_MAGIC = b"FTCB"
FTCB_VERSION = 1
FTCB_HEADER = struct.Struct("<4sBBHHBBHHHH")

_BLOCK_END = 255
_COEF_SNAP = 4096.0

# IJG reference luminance quantization table, row-major
BASE_TABLE = np.array(
    [
        [16, 11, 10, 16, 24, 40, 51, 61],
        [12, 12, 14, 19, 26, 58, 60, 55],
        [14, 13, 16, 24, 40, 57, 69, 56],
        [14, 17, 22, 29, 51, 87, 80, 62],
        [18, 22, 37, 56, 68, 109, 103, 77],
        [24, 35, 55, 64, 81, 104, 113, 92],
        [49, 64, 78, 87, 103, 121, 120, 101],
        [72, 92, 95, 98, 112, 100, 103, 99],
    ],
    dtype=np.int64,
)


class CodecError(Exception):
    pass


class BadMagicError(CodecError):
    pass


class TruncatedStreamError(CodecError):
    pass


class BlockCountError(CodecError):
    pass


class TargetInfeasibleError(CodecError):
    def __init__(self, target: int, min_size: int):
        super().__init__(
            f"target {target} bytes below minimum achievable {min_size}"
        )
        self.target = target
        self.min_size = min_size


def _dct_matrix() -> np.ndarray:
    k = np.arange(8)
    m = np.cos((2 * k[None, :] + 1) * k[:, None] * np.pi / 16.0)
    m[0, :] = 1.0
    scale = np.full((8, 1), np.sqrt(2.0 / 8.0))
    scale[0, 0] = np.sqrt(1.0 / 8.0)
    return m * scale


_DCT_M = _dct_matrix()


def _zigzag_order() -> np.ndarray:
    order = []
    for d in range(15):
        i_range = range(min(d, 7), max(0, d - 7) - 1, -1) if d % 2 == 0 else \
            range(max(0, d - 7), min(d, 7) + 1)
        order.extend(i * 8 + (d - i) for i in i_range)
    return np.array(order, dtype=np.int64)


_ZIGZAG = _zigzag_order()
_UNZIGZAG = np.argsort(_ZIGZAG)


def quality_table(quality: int) -> np.ndarray:
    """Quality-scaled quantization divisors (1..255 each)."""
    if not 1 <= quality <= 100:
        raise ValueError(f"quality must be 1..100, got {quality}")
    scale = 5000 // quality if quality < 50 else 200 - 2 * quality
    return np.clip((BASE_TABLE * scale + 50) // 100, 1, 255)


def _leb128s_encode(value: int, out: bytearray) -> None:
    while True:
        byte = value & 0x7F
        value >>= 7
        if (value == 0 and not byte & 0x40) or (value == -1 and byte & 0x40):
            out.append(byte)
            return
        out.append(byte | 0x80)


class _Reader:
    def __init__(self, data: bytes, pos: int = 0):
        self.data = data
        self.pos = pos

    def u8(self) -> int:
        if self.pos >= len(self.data):
            raise TruncatedStreamError("stream ended inside a block")
        b = self.data[self.pos]
        self.pos += 1
        return b

    def leb128s(self) -> int:
        result = 0
        shift = 0
        while True:
            b = self.u8()
            result |= (b & 0x7F) << shift
            shift += 7
            if not b & 0x80:
                if b & 0x40:
                    result -= 1 << shift
                return result


def _pad_plane(plane: np.ndarray) -> np.ndarray:
    h, w = plane.shape
    ph = -(-h // 8) * 8
    pw = -(-w // 8) * 8
    return np.pad(plane, ((0, ph - h), (0, pw - w)), mode="edge")


def _blocks_of(padded: np.ndarray) -> np.ndarray:
    h, w = padded.shape
    return (
        padded.reshape(h // 8, 8, w // 8, 8)
        .transpose(0, 2, 1, 3)
        .reshape(-1, 8, 8)
    )


def encode(p: TiledPlane, quality: int) -> bytes:
    table = quality_table(quality)
    layout = p.layout
    padded = _pad_plane(p.bytes)
    blocks = _blocks_of(padded).astype(np.float64) - 128.0
    coefs = _DCT_M @ blocks @ _DCT_M.T
    coefs = np.rint(coefs * _COEF_SNAP) / _COEF_SNAP
    scaled = coefs / table
    symbols = (np.sign(scaled) * np.floor(np.abs(scaled) + 0.5)).astype(np.int64)
    zz = symbols.reshape(-1, 64)[:, _ZIGZAG]

    out = bytearray(
        FTCB_HEADER.pack(
            FTCB_MAGIC,
            FTCB_VERSION,
            quality,
            layout.plane_w,
            layout.plane_h,
            layout.grid_cols,
            layout.grid_rows,
            layout.tile_w,
            layout.tile_h,
            layout.channels,
            p.levels,
        )
    )
    prev_dc = 0
    for row in zz:
        dc = int(row[0])
        _leb128s_encode(dc - prev_dc, out)
        prev_dc = dc
        run = 0
        for v in row[1:]:
            if v == 0:
                run += 1
            else:
                out.append(run)
                _leb128s_encode(int(v), out)
                run = 0
        out.append(_BLOCK_END)
    return bytes(out)


def _parse_header(data: bytes):
    if len(data) < FTCB_HEADER.size:
        raise TruncatedStreamError("stream shorter than header")
    magic, version, quality, plane_w, plane_h, gc, gr, tw, th, ch, levels = \
        FTCB_HEADER.unpack_from(data)
    if magic != FTCB_MAGIC:
        raise BadMagicError(f"bad magic {magic!r}")
    if version != FTCB_VERSION:
        raise CodecError(f"unsupported version {version}")
    if not 1 <= quality <= 100:
        raise CodecError(f"quality {quality} out of range")
    try:
        layout = TileLayout(grid_cols=gc, grid_rows=gr, tile_w=tw, tile_h=th, channels=ch)
    except ValueError as exc:
        raise CodecError(f"invalid tile layout in header: {exc}") from None
    if (layout.plane_w, layout.plane_h) != (plane_w, plane_h):
        raise CodecError("plane dims inconsistent with tile grid")
    return layout, quality, levels


def _decode_blocks(reader: _Reader, n_blocks: int, stop_on_truncation: bool):
    """Returns (zigzag symbol rows, blocks decoded)."""
    zz = np.zeros((n_blocks, 64), dtype=np.int64)
    prev_dc = 0
    done = 0
    for b in range(n_blocks):
        mark = reader.pos
        try:
            prev_dc += reader.leb128s()
            zz[b, 0] = prev_dc
            pos = 0
            while True:
                run = reader.u8()
                if run == _BLOCK_END:
                    break
                pos += run + 1
                if pos > 63:
                    raise CodecError(f"AC run overflows block {b}")
                zz[b, pos] = reader.leb128s()
        except TruncatedStreamError:
            if stop_on_truncation:
                reader.pos = mark
                zz[b:] = 0
                return zz, done
            raise
        done += 1
    return zz, done


def _reconstruct(zz: np.ndarray, table: np.ndarray, plane_h: int, plane_w: int) -> np.ndarray:
    symbols = zz[:, _UNZIGZAG].reshape(-1, 8, 8)
    coefs = symbols * table
    blocks = _DCT_M.T @ coefs.astype(np.float64) @ _DCT_M
    pixels = np.clip(np.rint(blocks + 128.0), 0, 255).astype(np.uint8)
    ph = -(-plane_h // 8) * 8
    pw = -(-plane_w // 8) * 8
    padded = (
        pixels.reshape(ph // 8, pw // 8, 8, 8)
        .transpose(0, 2, 1, 3)
        .reshape(ph, pw)
    )
    return padded[:plane_h, :plane_w]


def decode(data: bytes) -> TiledPlane:
    """Strict decode; raises on truncation, bad magic, or trailing bytes."""
    layout, quality, levels = _parse_header(data)
    n_blocks = (-(-layout.plane_h // 8)) * (-(-layout.plane_w // 8))
    reader = _Reader(data, FTCB_HEADER.size)
    zz, done = _decode_blocks(reader, n_blocks, stop_on_truncation=False)
    if done != n_blocks:
        raise BlockCountError(f"decoded {done} of {n_blocks} blocks")
    if reader.pos != len(data):
        raise BlockCountError(
            f"{len(data) - reader.pos} trailing bytes after last block"
        )
    plane = _reconstruct(zz, quality_table(quality), layout.plane_h, layout.plane_w)
    return TiledPlane(plane, layout, levels)


def decode_prefix(data: bytes) -> tuple[TiledPlane, int, int]:
    """Best-effort decode of a truncated stream.

    Returns (plane, blocks_decoded, total_blocks); undecoded blocks come
    back as mid-gray and should be masked via ``undecoded_plane_mask``.
    Raises if even the header is unreadable.
    """
    layout, quality, levels = _parse_header(data)
    n_blocks = (-(-layout.plane_h // 8)) * (-(-layout.plane_w // 8))
    reader = _Reader(data, FTCB_HEADER.size)
    zz, done = _decode_blocks(reader, n_blocks, stop_on_truncation=True)
    plane = _reconstruct(zz, quality_table(quality), layout.plane_h, layout.plane_w)
    return TiledPlane(plane, layout, levels), done, n_blocks


def undecoded_plane_mask(layout: TileLayout, blocks_decoded: int) -> np.ndarray:
    """Boolean plane mask, True where block data was not decoded."""
    ph = -(-layout.plane_h // 8)
    pw = -(-layout.plane_w // 8)
    block_mask = np.zeros(ph * pw, dtype=bool)
    block_mask[blocks_decoded:] = True
    grid = block_mask.reshape(ph, pw)
    full = np.repeat(np.repeat(grid, 8, axis=0), 8, axis=1)
    return full[: layout.plane_h, : layout.plane_w]


def stream_info(data: bytes) -> dict:
    layout, quality, levels = _parse_header(data)
    return {
        "quality": quality,
        "levels": levels,
        "plane_w": layout.plane_w,
        "plane_h": layout.plane_h,
        "channels": layout.channels,
        "size": len(data),
    }


def encode_to_target(p: TiledPlane, target_bytes: int) -> tuple[bytes, int]:
    """Highest-quality stream whose size fits the target.

    Binary search over quality 1..100 (stream size grows with quality).
    Returns (bitstream, quality); raises TargetInfeasibleError when even
    quality 1 exceeds the target.
    """
    cache: dict[int, bytes] = {}

    def attempt(q: int) -> bytes:
        if q not in cache:
            cache[q] = encode(p, q)
        return cache[q]

    if len(attempt(1)) > target_bytes:
        raise TargetInfeasibleError(target_bytes, len(cache[1]))
    lo, hi = 1, 100
    while lo < hi:
        mid = (lo + hi + 1) // 2
        if len(attempt(mid)) <= target_bytes:
            lo = mid
        else:
            hi = mid - 1
    return cache[lo], lo


def rate_fidelity_curve(model, image_ids, cut, qualities, stats,
                        levels: int = 256, clip_width: float = 3.0) -> list[dict]:
    """Mean bitstream size and argmax agreement per quality setting.

    Each image runs the full compression path (256-level quantize, tile,
    encode, decode, detile, dequantize) before the server-side forward.
    """
    from .quantizer import QuantizerSpec, dequantize, quantize
    from .tiling import detile, tile

    spec = QuantizerSpec(levels=levels, clip_width=clip_width, mode="aggregate")
    ids = list(image_ids)
    tensors = [model.forward_client(model.generate_input(i), cut) for i in ids]
    clean = [int(np.argmax(model.forward_server(t, cut))) for t in tensors]
    planes = [tile(quantize(t, spec, stats)) for t in tensors]

    rows = []
    for q in qualities:
        total = 0
        match = 0
        for plane, c in zip(planes, clean):
            bits = encode(plane, int(q))
            total += len(bits)
            t_hat = dequantize(detile(decode(bits), spec, stats.label), stats)
            match += int(int(np.argmax(model.forward_server(t_hat, cut))) == c)
        rows.append(
            {
                "quality": int(q),
                "mean_bytes": total / len(ids),
                "agreement": match / len(ids),
            }
        )
    return rows
