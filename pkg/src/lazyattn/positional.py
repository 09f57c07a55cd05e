"""Position handling for attention scores.

Two complementary mechanisms: dimension-wise rotary embedding (feature
pairs rotated at geometric frequencies) and a head-wise learnable bias
over relative distance, zero beyond a local window. A fixed-slope linear
decay (ALiBi style) is kept as a non-learnable comparison mode.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .core import ShapeError, Tensor, record_op


@dataclass(frozen=True)
class RopeConfig:
    """Rotary embedding parameters: frequency base and per-head width."""

    head_dim: int
    base: float = 10000.0

    def __post_init__(self):
        if self.head_dim < 2 or self.head_dim % 2 != 0:
            raise ValueError(f"head_dim must be a positive even integer, got {self.head_dim}")
        if self.base <= 1.0:
            raise ValueError(f"rope base must exceed 1, got {self.base}")


def rope_freq(cfg: RopeConfig, k: int) -> float:
    """Rotation frequency of feature pair ``k``: base^(-2k / head_dim)."""
    if not 0 <= k < cfg.head_dim // 2:
        raise IndexError(f"pair index {k} outside [0, {cfg.head_dim // 2})")
    return float(cfg.base ** (-2.0 * k / cfg.head_dim))


def _rope_tables(cfg: RopeConfig, positions: np.ndarray, dtype) -> tuple[np.ndarray, np.ndarray]:
    ks = np.arange(cfg.head_dim // 2, dtype=np.float64)
    freqs = cfg.base ** (-2.0 * ks / cfg.head_dim)
    ang = positions.astype(np.float64)[:, None] * freqs[None, :]
    return np.cos(ang).astype(dtype), np.sin(ang).astype(dtype)


def apply_rope(x: Tensor, positions: np.ndarray, cfg: RopeConfig) -> Tensor:
    """Rotate consecutive feature pairs of each row by its position angle.

    ``x`` is (n, head_dim), or (n, k * head_dim) to rotate several heads at
    once with the same frequencies. Rotations are isometries, so row norms
    are preserved, and query/key dot products end up depending only on the
    position difference.
    """
    positions = np.asarray(positions).reshape(-1)
    if x.ndim != 2 or positions.shape[0] != x.shape[0]:
        raise ShapeError(f"apply_rope: rows {x.shape} vs positions {positions.shape}")
    if x.shape[1] % cfg.head_dim != 0:
        raise ShapeError(f"apply_rope: width {x.shape[1]} is not a multiple of head_dim {cfg.head_dim}")
    if positions.min(initial=0) < 0:
        raise ValueError("apply_rope: positions must be non-negative")
    n = x.shape[0]
    blocks = x.shape[1] // cfg.head_dim
    half = cfg.head_dim // 2
    cos, sin = _rope_tables(cfg, positions, x.data.dtype)
    c = cos[:, None, :]  # (n, 1, half), shared across head blocks
    s = sin[:, None, :]

    xr = x.data.reshape(n, blocks, half, 2)
    ev, od = xr[..., 0], xr[..., 1]
    out_r = np.empty_like(xr)
    out_r[..., 0] = ev * c - od * s
    out_r[..., 1] = ev * s + od * c
    out = Tensor(out_r.reshape(n, -1), requires_grad=x.requires_grad)

    def vjp(g):
        gr = g.reshape(n, blocks, half, 2)
        ge, go = gr[..., 0], gr[..., 1]
        d = np.empty_like(gr)
        d[..., 0] = ge * c + go * s  # inverse rotation
        d[..., 1] = -ge * s + go * c
        return (d.reshape(n, -1),)

    return record_op(out, (x,), vjp)


class BiasTable:
    """Per-layer, per-head learnable bias over relative distance.

    Each layer holds an (n_heads, window + 1) parameter; index 0 is the
    self-distance and lookups beyond the window return exactly 0 and carry
    no gradient. Tables start at zero so the score formula degenerates to
    plain rotary attention until training moves them.
    """

    def __init__(self, n_layers: int, n_heads: int, window: int, dtype="float32"):
        if window < 0:
            raise ValueError("window must be non-negative")
        self.n_layers = n_layers
        self.n_heads = n_heads
        self.window = window
        self.tables = [
            Tensor(np.zeros((n_heads, window + 1)), requires_grad=True, dtype=dtype)
            for _ in range(n_layers)
        ]

    def lookup(self, layer: int, head: int, dist: int) -> float:
        if dist < 0:
            raise ValueError("distance must be non-negative")
        if dist > self.window:
            return 0.0
        return float(self.tables[layer].data[head, dist])

    def rows(self):
        """Yield (layer, head, distance, bias) for CSV export."""
        for layer, t in enumerate(self.tables):
            for head in range(self.n_heads):
                for dist in range(self.window + 1):
                    yield layer, head, dist, float(t.data[head, dist])


def bias_lookup(table: BiasTable, layer: int, head: int, dist: int) -> float:
    """Distance-bias value for one (layer, head); 0 beyond the window."""
    return table.lookup(layer, head, dist)


def write_bias_csv(table: BiasTable, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["layer", "head", "distance", "bias"])
        for row in table.rows():
            w.writerow([row[0], row[1], row[2], repr(row[3])])


def distance_bias_matrix(table: np.ndarray, n: int, window: int) -> np.ndarray:
    """Expand an (H, window+1) table into per-head (H, n, n) score biases.

    Entry [h, i, j] is table[h, i-j] for 0 <= i-j <= window and 0 otherwise;
    only the causal lower triangle is ever nonzero.
    """
    d = np.arange(n)[:, None] - np.arange(n)[None, :]
    valid = (d >= 0) & (d <= window)
    idx = np.where(valid, d, 0)
    return table[:, idx] * valid


def distance_bias_grad(g: np.ndarray, window: int) -> np.ndarray:
    """Fold per-head (H, n, n) score gradients back onto the (H, window+1) table."""
    h, n, _ = g.shape
    d = np.arange(n)[:, None] - np.arange(n)[None, :]
    valid = (d >= 0) & (d <= window)
    dist = d[valid]
    out = np.empty((h, window + 1), dtype=g.dtype)
    for hi in range(h):
        out[hi] = np.bincount(dist, weights=g[hi][valid], minlength=window + 1)
    return out


def alibi_slope(head: int, n_heads: int) -> float:
    """Geometric slope 2^(-8(head+1)/H) for 0-based head indices."""
    if not 0 <= head < n_heads:
        raise IndexError(f"head {head} outside [0, {n_heads})")
    return float(2.0 ** (-8.0 * (head + 1) / n_heads))


def alibi_bias(head: int, n_heads: int, dist: int) -> float:
    """Fixed linear-decay score bias: -slope * distance."""
    if dist < 0:
        raise ValueError("distance must be non-negative")
    return -alibi_slope(head, n_heads) * dist


def alibi_matrix(n_heads: int, n: int, dtype=np.float64) -> np.ndarray:
    """Per-head (H, n, n) fixed decay biases -slope_h * |i-j|."""
    d = np.abs(np.arange(n)[:, None] - np.arange(n)[None, :]).astype(dtype)
    slopes = np.array([alibi_slope(h, n_heads) for h in range(n_heads)], dtype=dtype)
    return -slopes[:, None, None] * d[None]
