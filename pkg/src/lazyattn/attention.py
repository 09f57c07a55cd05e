"""Causal multi-head attention with pluggable row normalizers.

Scores are scaled rotary dot products plus an optional per-head distance
bias (or fixed ALiBi decay). Two execution paths compute the same
function: ``attend_naive`` materializes the full weight matrix and is the
reference, while ``attend_two_pass`` streams key tiles twice, first
collecting per-query softmax statistics (running max and exp-sum), then
applying the offset + rectifier and the weighted value sum, keeping
auxiliary memory linear in sequence length for a fixed tile size. The
two-pass backward recomputes tile-local weights from the saved statistics
instead of storing the full matrix.

Sparsemax needs globally sorted rows, which does not stream; it is
supported on the naive path only.

Tensors enter as flat 2-D arrays: a batch of B length-n sequences is
stacked into (B*n, H*head_dim), grouped internally into (B*H, n, head_dim).
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass

import numpy as np

from .core import ShapeError, Tensor, matmul, record_op
from .normalizers import NormalizerMode, sparsemax_row, sparsemax_vjp
from .positional import (
    RopeConfig,
    alibi_matrix,
    apply_rope,
    distance_bias_grad,
    distance_bias_matrix,
)


@dataclass
class AttentionConfig:
    """Static attention hyperparameters for one model."""

    n_heads: int
    head_dim: int
    positional: str = "rope_bias"  # "rope" | "rope_bias" | "alibi"
    normalizer: NormalizerMode = NormalizerMode.ELASTIC_PER_QUERY
    tau_init: float = -1.0
    tile: int = 64
    path: str = "naive"  # "naive" | "two_pass"
    capture: bool = False

    def __post_init__(self):
        self.normalizer = NormalizerMode.parse(self.normalizer)
        if self.n_heads < 1 or self.head_dim < 1:
            raise ValueError("n_heads and head_dim must be positive")
        if self.tile < 1:
            raise ValueError("tile size must be >= 1")
        if self.positional not in ("rope", "rope_bias", "alibi"):
            raise ValueError(f"unknown positional mode {self.positional!r}")
        if self.path not in ("naive", "two_pass"):
            raise ValueError(f"unknown attention path {self.path!r}")

    @property
    def d_model(self) -> int:
        return self.n_heads * self.head_dim


class CaptureBuffer:
    """Collects per-layer attention weights (always float32) for diagnostics."""

    def __init__(self):
        self.layers: list[np.ndarray] = []

    def add(self, weights: np.ndarray) -> None:
        self.layers.append(weights.astype(np.float32, copy=False))

    def clear(self) -> None:
        self.layers.clear()


class AllocationMeter:
    """Tracks peak auxiliary bytes reported by the tiled attention path."""

    def __init__(self):
        self.peak = 0

    def observe(self, nbytes: int) -> None:
        if nbytes > self.peak:
            self.peak = nbytes


@functools.lru_cache(maxsize=32)
def _lower_mask(n: int) -> np.ndarray:
    m = np.tril(np.ones((n, n), dtype=bool))
    m.setflags(write=False)
    return m


def _row_offsets(kind: str, tau_g: np.ndarray | None, n: int, dtype) -> np.ndarray | None:
    """Per-(group, query) additive offset applied after softmax, or None."""
    idx = np.arange(1, n + 1, dtype=dtype)
    if kind == "none" or kind == "sparsemax":
        return None
    if kind == "fixed":
        return np.broadcast_to(-1.0 / idx, (1, n)).astype(dtype)
    if kind == "per_query":
        return tau_g[:, None] / idx[None, :]
    if kind == "global":
        return np.broadcast_to(tau_g[:, None], (tau_g.shape[0], n)).astype(dtype, copy=False)
    raise ValueError(f"unknown offset kind {kind!r}")


def _split_groups(x: np.ndarray, batch: int, n_heads: int) -> np.ndarray:
    """(B*n, H*dh) -> (B*H, n, dh)."""
    bn, hd = x.shape
    n = bn // batch
    dh = hd // n_heads
    return (
        x.reshape(batch, n, n_heads, dh).transpose(0, 2, 1, 3).reshape(batch * n_heads, n, dh)
    )


def _merge_groups(x3: np.ndarray, batch: int, n_heads: int) -> np.ndarray:
    """(B*H, n, dh) -> (B*n, H*dh)."""
    g, n, dh = x3.shape
    return (
        x3.reshape(batch, n_heads, n, dh).transpose(0, 2, 1, 3).reshape(batch * n, n_heads * dh)
    )


def _check_qkv(q: Tensor, k: Tensor, v: Tensor, config: AttentionConfig, batch: int) -> int:
    if q.shape != k.shape or q.shape != v.shape:
        raise ShapeError("q, k, v must share a shape")
    if q.ndim != 2 or q.shape[1] != config.d_model:
        raise ShapeError(f"expected (rows, {config.d_model}) inputs, got {q.shape}")
    if batch < 1 or q.shape[0] % batch != 0:
        raise ShapeError(f"row count {q.shape[0]} not divisible by batch {batch}")
    n = q.shape[0] // batch
    if n < 1:
        raise ShapeError("empty sequence")
    return n


def _resolve_bias(bias: Tensor | None, config: AttentionConfig) -> tuple[np.ndarray | None, int]:
    if bias is None:
        return None, 0
    tb = bias.data
    if tb.ndim == 1:
        tb = tb.reshape(1, -1)
    if tb.ndim != 2 or tb.shape[0] != config.n_heads:
        raise ShapeError(f"bias table must be ({config.n_heads}, window+1), got {bias.shape}")
    return tb, tb.shape[1] - 1


def _resolve_tau(tau: Tensor | None, config: AttentionConfig, batch: int) -> np.ndarray | None:
    if not config.normalizer.learns_tau:
        return None
    if tau is None:
        raise ValueError(f"normalizer {config.normalizer.value} needs a tau tensor")
    td = tau.data.reshape(-1)
    if td.shape[0] != config.n_heads:
        raise ShapeError(f"tau must have one entry per head, got {tau.shape}")
    return np.tile(td, batch)  # group g = b * H + h


def _score_bias(config: AttentionConfig, bias_table: np.ndarray | None, window: int,
                n: int, dtype) -> np.ndarray | None:
    """Full (H, n, n) additive score bias for the configured positional mode."""
    if config.positional == "alibi":
        return alibi_matrix(config.n_heads, n, dtype)
    if bias_table is not None:
        return distance_bias_matrix(bias_table.astype(dtype, copy=False), n, window)
    return None


def scores(q: Tensor, k: Tensor, bias: Tensor | None = None) -> Tensor:
    """Single-head causal score matrix: <q_i, k_j>/sqrt(d_h) + bias[i-j].

    Inputs are already position-rotated. The upper triangle is zeroed here
    and masked again by every normalizer, so no gradient crosses it. The
    optional ``bias`` is a 1-D learnable distance table; distances beyond
    its window contribute exactly 0 and receive no gradient.
    """
    if q.ndim != 2 or q.shape != k.shape:
        raise ShapeError(f"scores: expected matching (n, d_h) inputs, got {q.shape} and {k.shape}")
    n, dh = q.shape
    sc = 1.0 / math.sqrt(dh)
    lower = _lower_mask(n)
    s = (q.data @ k.data.T) * sc
    window = -1
    if bias is not None:
        if bias.ndim != 1:
            raise ShapeError("scores: bias must be a 1-D distance table")
        window = bias.shape[0] - 1
        s = s + distance_bias_matrix(bias.data[None], n, window)[0]
    s = np.where(lower, s, 0.0)
    inputs = (q, k) if bias is None else (q, k, bias)
    out = Tensor(s, requires_grad=any(t.requires_grad for t in inputs))

    def vjp(g):
        gm = g * lower
        dq = (gm @ k.data) * sc
        dk = (gm.T @ q.data) * sc
        if bias is None:
            return dq, dk
        return dq, dk, distance_bias_grad(gm[None], window)[0]

    return record_op(out, inputs, vjp)


def _normalize_full(s_masked: np.ndarray, raw_scores: np.ndarray, kind: str,
                    off: np.ndarray | None, lower: np.ndarray):
    """Forward normalization of full (G, n, n) masked scores.

    Returns (weights, softmax_probs, active_gate). For sparsemax the probs
    slot carries None and the gate is the support.
    """
    if kind == "sparsemax":
        g, n, _ = raw_scores.shape
        w = np.zeros_like(raw_scores)
        for gi in range(g):
            for i in range(n):
                w[gi, i, : i + 1] = sparsemax_row(raw_scores[gi, i, : i + 1])
        return w, None, w > 0
    m = s_masked.max(axis=-1, keepdims=True)
    e = np.exp(s_masked - m)
    l = e.sum(axis=-1, keepdims=True)
    p = e / l
    if kind == "none":
        return p, p, None
    pre = p + off[:, :, None]
    w = np.maximum(pre, 0.0) * lower
    return w, p, (pre > 0) & lower


def attend_naive(q: Tensor, k: Tensor, v: Tensor, config: AttentionConfig, *,
                 bias: Tensor | None = None, tau: Tensor | None = None,
                 batch: int = 1, capture: CaptureBuffer | None = None) -> Tensor:
    """Reference attention: materialize all causal weights, then mix values.

    Output row i is sum_j w_ij v_j with w from the configured normalizer.
    If ``capture`` is given, the (B, H, n, n) weights are stored in it at
    float32.
    """
    n = _check_qkv(q, k, v, config, batch)
    h, dh = config.n_heads, config.head_dim
    dtype = q.data.dtype
    sc = 1.0 / math.sqrt(dh)
    kind = config.normalizer.offset_kind
    bias_table, window = _resolve_bias(bias, config)
    tau_g = _resolve_tau(tau, config, batch)
    lower = _lower_mask(n)

    q3 = _split_groups(q.data, batch, h)
    k3 = _split_groups(k.data, batch, h)
    v3 = _split_groups(v.data, batch, h)

    s = q3 @ k3.transpose(0, 2, 1)
    s *= sc
    sb = _score_bias(config, bias_table, window, n, dtype)
    if sb is not None:
        s.reshape(batch, h, n, n)[...] += sb[None]
    s_masked = np.where(lower, s, -np.inf)
    off = _row_offsets(kind, tau_g, n, dtype)
    w, p, gate = _normalize_full(s_masked, s, kind, off, lower)
    out3 = w @ v3
    out = Tensor(_merge_groups(out3, batch, h),
                 requires_grad=any(t.requires_grad for t in (q, k, v))
                 or (bias is not None and bias.requires_grad)
                 or (tau is not None and tau.requires_grad))

    if capture is not None:
        capture.add(w.reshape(batch, h, n, n))

    inputs = [q, k, v]
    if bias is not None and config.positional == "rope_bias":
        inputs.append(bias)
    if tau_g is not None:
        inputs.append(tau)
    learn_bias = bias is not None and config.positional == "rope_bias"
    rows1 = np.arange(1, n + 1, dtype=dtype)

    def vjp(g):
        g3 = _split_groups(g, batch, h)
        dw = g3 @ v3.transpose(0, 2, 1)
        dv3 = w.transpose(0, 2, 1) @ g3
        dtau_h = None
        if kind == "sparsemax":
            ds = np.zeros_like(dw)
            gcount, _, _ = dw.shape
            for gi in range(gcount):
                for i in range(n):
                    ds[gi, i, : i + 1] = sparsemax_vjp(w[gi, i, : i + 1], dw[gi, i, : i + 1])
        else:
            if kind == "none":
                dpre = dw * lower
            else:
                dpre = dw * gate
                if kind == "per_query":
                    dtau_g = (dpre.sum(axis=-1) / rows1[None, :]).sum(axis=-1)
                    dtau_h = dtau_g.reshape(batch, h).sum(axis=0)
                elif kind == "global":
                    dtau_h = dpre.sum(axis=(-1, -2)).reshape(batch, h).sum(axis=0)
            rho = (p * dpre).sum(axis=-1, keepdims=True)
            ds = p * (dpre - rho)
        dq3 = (ds @ k3) * sc
        dk3 = (ds.transpose(0, 2, 1) @ q3) * sc
        grads = [
            _merge_groups(dq3, batch, h),
            _merge_groups(dk3, batch, h),
            _merge_groups(dv3, batch, h),
        ]
        if learn_bias:
            ds_h = ds.reshape(batch, h, n, n).sum(axis=0)
            grads.append(distance_bias_grad(ds_h, window))
        if dtau_h is not None:
            grads.append(dtau_h.astype(dtype).reshape(tau.shape))
        return tuple(grads)

    return record_op(out, tuple(inputs), vjp)


def _bias_block(table: np.ndarray | None, config: AttentionConfig, window: int,
                n: int, t0: int, t1: int, dtype) -> np.ndarray | None:
    """(H, n, t1-t0) additive score bias for key columns [t0, t1)."""
    if config.positional == "alibi":
        d = np.abs(np.arange(n)[:, None] - np.arange(t0, t1)[None, :]).astype(dtype)
        slopes = 2.0 ** (-8.0 * (np.arange(config.n_heads) + 1) / config.n_heads)
        return -slopes[:, None, None].astype(dtype) * d[None]
    if table is None:
        return None
    d = np.arange(n)[:, None] - np.arange(t0, t1)[None, :]
    valid = (d >= 0) & (d <= window)
    idx = np.where(valid, d, 0)
    return table[:, idx] * valid


def _bias_grad_block(g_h: np.ndarray, window: int, t0: int) -> np.ndarray:
    """Fold (H, n, T) score grads for key columns starting at t0 onto the table."""
    h, n, t = g_h.shape
    d = np.arange(n)[:, None] - np.arange(t0, t0 + t)[None, :]
    valid = (d >= 0) & (d <= window)
    dist = d[valid]
    out = np.empty((h, window + 1), dtype=g_h.dtype)
    for hi in range(h):
        out[hi] = np.bincount(dist, weights=g_h[hi][valid], minlength=window + 1)
    return out


def attend_two_pass(q: Tensor, k: Tensor, v: Tensor, config: AttentionConfig, *,
                    bias: Tensor | None = None, tau: Tensor | None = None,
                    batch: int = 1, capture: CaptureBuffer | None = None,
                    meter: AllocationMeter | None = None) -> Tensor:
    """Tiled attention equal to ``attend_naive`` for every offset normalizer.

    Pass 1 streams key tiles and keeps only per-query running max and
    exp-sum. Pass 2 streams the tiles again, rebuilds each weight block
    from those statistics, applies the offset + rectifier, and accumulates
    the value sum. Nothing of size n*n is materialized (unless ``capture``
    asks for the weights), so auxiliary memory is O(n) per head at a fixed
    tile size. The backward pass replays the tiles twice more, recomputing
    block weights from the saved statistics.
    """
    n = _check_qkv(q, k, v, config, batch)
    h, dh = config.n_heads, config.head_dim
    kind = config.normalizer.offset_kind
    if kind == "sparsemax":
        raise ValueError("sparsemax needs globally sorted rows; use attend_naive")
    dtype = q.data.dtype
    sc = 1.0 / math.sqrt(dh)
    tile = min(config.tile, n)

    bias_table, window = _resolve_bias(bias, config)
    tau_g = _resolve_tau(tau, config, batch)
    lower = _lower_mask(n)
    off = _row_offsets(kind, tau_g, n, dtype)

    q3 = _split_groups(q.data, batch, h)
    k3 = _split_groups(k.data, batch, h)
    v3 = _split_groups(v.data, batch, h)
    groups = batch * h

    def score_block(t0: int, t1: int) -> np.ndarray:
        s = q3 @ k3[:, t0:t1].transpose(0, 2, 1)
        s *= sc
        blk = _bias_block(bias_table, config, window, n, t0, t1, dtype)
        if blk is not None:
            s.reshape(batch, h, n, t1 - t0)[...] += blk[None]
        return np.where(lower[:, t0:t1], s, -np.inf)

    # Pass 1: running softmax statistics.
    m = np.full((groups, n), -np.inf, dtype=dtype)
    l = np.zeros((groups, n), dtype=dtype)
    for t0 in range(0, n, tile):
        t1 = min(t0 + tile, n)
        s = score_block(t0, t1)
        bm = s.max(axis=-1)
        nm = np.maximum(m, bm)
        e = np.exp(s - nm[:, :, None])
        l = l * np.exp(m - nm) + e.sum(axis=-1)
        m = nm
        if meter is not None:
            meter.observe(s.nbytes + e.nbytes + bm.nbytes + 2 * m.nbytes + l.nbytes)

    # Pass 2: offset + rectifier, weighted value sum.
    out3 = np.zeros((groups, n, dh), dtype=dtype)
    cap = None
    if capture is not None:
        cap = np.zeros((groups, n, n), dtype=np.float32)
    for t0 in range(0, n, tile):
        t1 = min(t0 + tile, n)
        s = score_block(t0, t1)
        p = np.exp(s - m[:, :, None]) / l[:, :, None]
        if kind == "none":
            w = p
        else:
            w = np.maximum(p + off[:, :, None], 0.0) * lower[:, t0:t1]
        out3 += w @ v3[:, t0:t1]
        if cap is not None:
            cap[:, :, t0:t1] = w
        if meter is not None:
            meter.observe(s.nbytes + p.nbytes + w.nbytes + m.nbytes + l.nbytes + out3.nbytes)

    out = Tensor(_merge_groups(out3, batch, h),
                 requires_grad=any(t.requires_grad for t in (q, k, v))
                 or (bias is not None and bias.requires_grad)
                 or (tau is not None and tau.requires_grad))
    if cap is not None:
        capture.add(cap.reshape(batch, h, n, n))

    inputs = [q, k, v]
    learn_bias = bias is not None and config.positional == "rope_bias"
    if learn_bias:
        inputs.append(bias)
    if tau_g is not None:
        inputs.append(tau)
    rows1 = np.arange(1, n + 1, dtype=dtype)

    def vjp(g):
        g3 = _split_groups(g, batch, h)
        dv3 = np.zeros_like(v3)
        rho = np.zeros((groups, n), dtype=dtype)
        dtau_g = np.zeros(groups, dtype=dtype) if kind in ("per_query", "global") else None

        # Sweep 1: dv, the softmax row-dot, and the offset gradient.
        for t0 in range(0, n, tile):
            t1 = min(t0 + tile, n)
            s = score_block(t0, t1)
            p = np.exp(s - m[:, :, None]) / l[:, :, None]
            dw = g3 @ v3[:, t0:t1].transpose(0, 2, 1)
            if kind == "none":
                w = p
                dpre = dw * lower[:, t0:t1]
            else:
                pre = p + off[:, :, None]
                gate = (pre > 0) & lower[:, t0:t1]
                w = np.maximum(pre, 0.0) * lower[:, t0:t1]
                dpre = dw * gate
                if kind == "per_query":
                    dtau_g += (dpre.sum(axis=-1) / rows1[None, :]).sum(axis=-1)
                elif kind == "global":
                    dtau_g += dpre.sum(axis=(-1, -2))
            dv3[:, t0:t1] += w.transpose(0, 2, 1) @ g3
            rho += (p * dpre).sum(axis=-1)

        # Sweep 2: score gradients back to q, k, and the bias table.
        dq3 = np.zeros_like(q3)
        dk3 = np.zeros_like(k3)
        dbias = np.zeros((h, window + 1), dtype=dtype) if learn_bias else None
        for t0 in range(0, n, tile):
            t1 = min(t0 + tile, n)
            s = score_block(t0, t1)
            p = np.exp(s - m[:, :, None]) / l[:, :, None]
            dw = g3 @ v3[:, t0:t1].transpose(0, 2, 1)
            if kind == "none":
                dpre = dw * lower[:, t0:t1]
            else:
                dpre = dw * (((p + off[:, :, None]) > 0) & lower[:, t0:t1])
            ds = p * (dpre - rho[:, :, None])
            dq3 += (ds @ k3[:, t0:t1]) * sc
            dk3[:, t0:t1] += (ds.transpose(0, 2, 1) @ q3) * sc
            if dbias is not None:
                dbias += _bias_grad_block(ds.reshape(batch, h, n, t1 - t0).sum(axis=0), window, t0)

        grads = [
            _merge_groups(dq3, batch, h),
            _merge_groups(dk3, batch, h),
            _merge_groups(dv3, batch, h),
        ]
        if dbias is not None:
            grads.append(dbias)
        if dtau_g is not None:
            grads.append(dtau_g.reshape(batch, h).sum(axis=0).astype(dtype).reshape(tau.shape))
        return tuple(grads)

    return record_op(out, tuple(inputs), vjp)


@dataclass
class AttentionLayerParams:
    """Learnable pieces of one attention layer."""

    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor
    bias: Tensor | None = None  # (H, window+1)
    tau: Tensor | None = None  # (H,)


def multi_head(x: Tensor, params: AttentionLayerParams, config: AttentionConfig,
               rope_cfg: RopeConfig, positions: np.ndarray, *, batch: int = 1,
               capture: CaptureBuffer | None = None, meter: AllocationMeter | None = None,
               value_sink: list | None = None) -> Tensor:
    """Project, rotate, attend, and re-project one layer of heads.

    ``x`` is the (B*n, d) normalized residual input. Heads share projection
    matrices column-blocked per head; outputs concatenate in fixed head
    order before the output projection.
    """
    q = matmul(x, params.wq)
    k = matmul(x, params.wk)
    v = matmul(x, params.wv)
    if config.positional != "alibi":
        q = apply_rope(q, positions, rope_cfg)
        k = apply_rope(k, positions, rope_cfg)
    if value_sink is not None:
        value_sink.append(v.data.copy())

    bias = params.bias if config.positional == "rope_bias" else None
    tau = params.tau if config.normalizer.learns_tau else None
    if config.path == "two_pass":
        attended = attend_two_pass(q, k, v, config, bias=bias, tau=tau, batch=batch,
                                   capture=capture, meter=meter)
    else:
        attended = attend_naive(q, k, v, config, bias=bias, tau=tau, batch=batch,
                                capture=capture)
    return matmul(attended, params.wo)
