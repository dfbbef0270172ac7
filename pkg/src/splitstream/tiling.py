"""Packing quantized channels into a single 8-bit image plane.

A C-channel tensor becomes a near-square grid of H x W tiles, channel c at
grid position (c // cols, c % cols), so standard image tooling (and the
block codec) can treat the whole tensor as one grayscale picture.  Grid
cells past the last channel are padding, filled with the mid symbol and
ignored on the way back.

``channel_distance`` scores how similar two channels look after max-pool
summarization, checking both polarities; it exists to support channel-
ordering experiments and is not applied by default anywhere.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .quantizer import QuantizedTensor, QuantizerSpec
from .tensor import FeatureTensor

__all__ = [
    "TileLayout",
    "TiledPlane",
    "layout_for",
    "tile",
    "detile",
    "channel_distance",
    "write_pgm",
]


@dataclass(frozen=True)
class TileLayout:
    grid_cols: int
    grid_rows: int
    tile_w: int
    tile_h: int
    channels: int

    def __post_init__(self):
        if min(self.grid_cols, self.grid_rows, self.tile_w, self.tile_h,
               self.channels) < 1:
            raise ValueError("layout dimensions must be positive")
        if self.grid_cols * self.grid_rows < self.channels:
            raise ValueError("grid too small for channel count")

    @property
    def plane_w(self) -> int:
        return self.grid_cols * self.tile_w

    @property
    def plane_h(self) -> int:
        return self.grid_rows * self.tile_h


@dataclass(frozen=True, eq=False)
class TiledPlane:
    bytes: np.ndarray             # plane_h x plane_w uint8
    layout: TileLayout
    levels: int

    def __post_init__(self):
        arr = np.ascontiguousarray(self.bytes, dtype=np.uint8)
        if arr.shape != (self.layout.plane_h, self.layout.plane_w):
            raise ValueError(
                f"plane shape {arr.shape} does not match layout "
                f"({self.layout.plane_h}, {self.layout.plane_w})"
            )
        arr.flags.writeable = False
        object.__setattr__(self, "bytes", arr)


def layout_for(height: int, width: int, channels: int) -> TileLayout:
    cols = math.isqrt(channels)
    if cols * cols < channels:
        cols += 1
    rows = -(-channels // cols)
    return TileLayout(
        grid_cols=cols, grid_rows=rows, tile_w=width, tile_h=height, channels=channels
    )


def _check_order(order, channels: int) -> list[int]:
    perm = [int(i) for i in order]
    if sorted(perm) != list(range(channels)):
        raise ValueError(f"order must be a permutation of 0..{channels - 1}")
    return perm


def tile(q: QuantizedTensor, order=None) -> TiledPlane:
    """Lay channels out on the plane; padding tiles get the mid symbol.

    ``order``, when given, is a permutation: grid slot i receives channel
    order[i] (so similar channels can be placed adjacently).  Pass the same
    permutation to ``detile`` to get the original channel order back.
    """
    h, w, c = q.shape
    layout = layout_for(h, w, c)
    perm = list(range(c)) if order is None else _check_order(order, c)
    plane = np.full(
        (layout.plane_h, layout.plane_w), q.spec.levels // 2, dtype=np.uint8
    )
    for slot, ch in enumerate(perm):
        r, col = divmod(slot, layout.grid_cols)
        plane[r * h:(r + 1) * h, col * w:(col + 1) * w] = q.symbols[:, :, ch]
    return TiledPlane(plane, layout, q.spec.levels)


def detile(
    p: TiledPlane, spec: QuantizerSpec, stats_ref: str = "", order=None
) -> QuantizedTensor:
    """Inverse of ``tile``; the quantizer spec restores symbol semantics."""
    if spec.levels != p.levels:
        raise ValueError(f"plane carries {p.levels} levels, spec says {spec.levels}")
    layout = p.layout
    h, w = layout.tile_h, layout.tile_w
    perm = (
        list(range(layout.channels))
        if order is None
        else _check_order(order, layout.channels)
    )
    symbols = np.empty((h, w, layout.channels), dtype=np.uint8)
    for slot, ch in enumerate(perm):
        r, col = divmod(slot, layout.grid_cols)
        symbols[:, :, ch] = p.bytes[r * h:(r + 1) * h, col * w:(col + 1) * w]
    return QuantizedTensor(symbols, spec, stats_ref)


def _maxpool(x: np.ndarray, stride: int) -> np.ndarray:
    """Non-overlapping max pool; ragged edges are padded with -inf."""
    h, w = x.shape
    ph = -(-h // stride) * stride
    pw = -(-w // stride) * stride
    padded = np.full((ph, pw), -np.inf)
    padded[:h, :w] = x
    return padded.reshape(ph // stride, stride, pw // stride, stride).max(axis=(1, 3))


def _normalized_channel(t: FeatureTensor, c: int) -> np.ndarray:
    ch = t.data[:, :, c].astype(np.float64)
    std = ch.std()
    if std == 0.0:
        return np.zeros_like(ch)
    return (ch - ch.mean()) / std


def channel_distance(t: FeatureTensor, c: int, c2: int, pool_stride: int = 2) -> float:
    """Polarity-insensitive L2 distance between max-pooled, normalized
    channel maps."""
    if not (0 <= c < t.channels and 0 <= c2 < t.channels):
        raise ValueError("channel index out of range")
    if pool_stride < 1:
        raise ValueError("pool stride must be >= 1")
    a = _normalized_channel(t, c)
    b = _normalized_channel(t, c2)
    # Pooling does not commute with negation, so the sign flip must be tried
    # on either channel (and both) for the distance to come out symmetric.
    pa = (_maxpool(a, pool_stride), _maxpool(-a, pool_stride))
    pb = (_maxpool(b, pool_stride), _maxpool(-b, pool_stride))
    return min(float(np.linalg.norm(x - y)) for x in pa for y in pb)


def write_pgm(p: TiledPlane, path) -> None:
    """Binary PGM (P5) dump for eyeballing a plane."""
    with open(path, "wb") as fh:
        fh.write(f"P5\n{p.layout.plane_w} {p.layout.plane_h}\n255\n".encode("ascii"))
        fh.write(p.bytes.tobytes())
