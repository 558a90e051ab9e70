"""Causal multi-head attention with pluggable positional encodings.

The batched ``attention_forward`` / ``attention_backward`` pair is what the
model trains through; ``mha_forward`` is the single-sequence entry point that
also resolves a PEStrategy into rotations, input embeddings or logit biases.

Sequences in a batch are right-padded, so under the causal mask a valid query
never sees a padded key.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, InputError
from .rope import (
    AngleSourceSpec,
    HeadAllocation,
    apply_rotation,
    effective_frequencies,
    rotary_angles,
)

ROTARY = "rotary"
SINUSOIDAL = "sinusoidal"
INDEX_APE = "index_ape"
TIME_APE = "time_ape"
RELATIVE_BIAS = "relative_bias"
PE_KINDS = (ROTARY, SINUSOIDAL, INDEX_APE, TIME_APE, RELATIVE_BIAS)

MINUTE_IN_DAYS = 1.0 / 1440.0


@dataclass(frozen=True)
class HeadParams:
    """Per-head projections: W_Q/W_K/W_V are (H, d_model, d), W_O is (H*d, d_model)."""

    W_Q: np.ndarray
    W_K: np.ndarray
    W_V: np.ndarray
    W_O: np.ndarray

    def __post_init__(self):
        shapes = {a.shape for a in (self.W_Q, self.W_K, self.W_V)}
        if len(shapes) != 1 or self.W_Q.ndim != 3:
            raise InputError("W_Q, W_K and W_V must share one (H, d_model, d) shape")
        h, d_model, d = self.W_Q.shape
        if self.W_O.shape != (h * d, d_model):
            raise InputError(f"W_O must be {(h * d, d_model)}, got {self.W_O.shape}")
        for a in (self.W_Q, self.W_K, self.W_V, self.W_O):
            if not np.all(np.isfinite(a)):
                raise InputError("projection weights must be finite")

    @property
    def n_heads(self) -> int:
        return self.W_Q.shape[0]

    @property
    def head_dim(self) -> int:
        return self.W_Q.shape[2]

    @property
    def d_model(self) -> int:
        return self.W_Q.shape[1]

    @classmethod
    def init(cls, rng: np.random.Generator, n_heads: int, d_model: int, head_dim: int, std=0.02):
        shape = (n_heads, d_model, head_dim)
        return cls(
            rng.normal(0.0, std, shape),
            rng.normal(0.0, std, shape),
            rng.normal(0.0, std, shape),
            rng.normal(0.0, std, (n_heads * head_dim, d_model)),
        )


# ---------------------------------------------------------------------------
# Buckets


@dataclass(frozen=True, eq=False)
class BucketScheme:
    """Monotone boundaries b_0 < ... < b_{B-1}; B buckets.

    A value lands in the bucket equal to the number of boundaries <= value,
    clamped to B - 1, so anything below b_0 is bucket 0.
    """

    boundaries: np.ndarray

    def __post_init__(self):
        b = np.asarray(self.boundaries, dtype=np.float64).reshape(-1)
        if b.size < 1:
            raise ConfigError("a bucket scheme needs at least one bucket")
        if not np.all(np.isfinite(b)) or np.any(np.diff(b) <= 0):
            raise ConfigError("bucket boundaries must be finite and strictly increasing")
        b.setflags(write=False)
        object.__setattr__(self, "boundaries", b)

    @property
    def n_buckets(self) -> int:
        return int(self.boundaries.size)

    def __call__(self, x) -> np.ndarray:
        idx = np.searchsorted(self.boundaries, np.asarray(x, dtype=np.float64), side="right")
        return np.minimum(idx, self.n_buckets - 1)

    def to_list(self) -> list:
        return self.boundaries.tolist()


def bucketize_time(tau, scheme: BucketScheme):
    out = scheme(tau)
    return int(out) if np.ndim(out) == 0 else out


def relative_index_scheme(max_distance: int, n_buckets: int = 32, exact: int = 8) -> BucketScheme:
    """Exact buckets for distances below ``exact``, log-spaced boundaries beyond."""
    exact = min(exact, n_buckets - 1)
    bounds = [float(k) for k in range(1, exact + 1)]
    n_log = n_buckets - len(bounds)
    hi = max(float(max_distance), bounds[-1] + 1.0)
    if n_log > 0:
        log_part = np.geomspace(bounds[-1], hi, n_log + 1)[1:]
        bounds.extend(log_part.tolist())
    return BucketScheme(np.array(bounds))


def time_gap_scheme(
    n_buckets: int = 32, smallest: float = MINUTE_IN_DAYS, largest: float = 180.0
) -> BucketScheme:
    """Log-spaced gap boundaries (tau units, default days): 1 minute .. 180 days."""
    return BucketScheme(np.geomspace(smallest, largest, n_buckets))


def time_ape_scheme(tau_span: float, n_buckets: int = 128, smallest: float | None = None) -> BucketScheme:
    """Log-spaced absolute-tau boundaries covering [0, tau_span]."""
    span = max(float(tau_span), 1e-6)
    lo = smallest if smallest is not None else span / 1e4
    return BucketScheme(np.geomspace(lo, span, n_buckets))


# ---------------------------------------------------------------------------
# Strategy


@dataclass(frozen=True)
class PEStrategy:
    """One positional-encoding arm.

    ``kind`` picks the primary mechanism. ``add_time_ape`` stacks a bucketed
    absolute-time embedding on top of it ("index APE + time APE",
    "index RoPE + time APE").
    """

    kind: str
    angles: AngleSourceSpec | None = None
    time_buckets: BucketScheme | None = None
    add_time_ape: bool = False
    index_buckets: BucketScheme | None = None
    gap_buckets: BucketScheme | None = None

    def __post_init__(self):
        if self.kind not in PE_KINDS:
            raise ConfigError(f"unknown PE kind {self.kind!r}; expected one of {PE_KINDS}")
        if self.kind == ROTARY and self.angles is None:
            raise ConfigError("rotary strategy needs an AngleSourceSpec")
        if self.kind != ROTARY and self.angles is not None:
            raise ConfigError("only the rotary kind takes an AngleSourceSpec")
        if self.uses_time_ape and self.time_buckets is None:
            raise ConfigError("time APE needs a time bucket scheme")
        if self.kind == RELATIVE_BIAS and (self.index_buckets is None or self.gap_buckets is None):
            raise ConfigError("relative bias needs index-distance and time-gap bucket schemes")

    @property
    def uses_time_ape(self) -> bool:
        return self.kind == TIME_APE or self.add_time_ape

    @property
    def is_rotary(self) -> bool:
        return self.kind == ROTARY


def sinusoidal_ape(T: int, d_model: int) -> np.ndarray:
    """Fixed table; column 2k holds sin(p * w_k), column 2k+1 cos(p * w_k), w_k = 10000^(-2k/d)."""
    if d_model % 2:
        raise ConfigError(f"sinusoidal APE needs an even width, got {d_model}")
    pos = np.arange(T, dtype=np.float64)[:, None]
    w = np.power(10000.0, -2.0 * np.arange(d_model // 2) / d_model)
    table = np.empty((T, d_model))
    table[:, 0::2] = np.sin(pos * w)
    table[:, 1::2] = np.cos(pos * w)
    return table


def relative_bias_matrix(indices, taus, index_buckets, gap_buckets, index_bias, gap_bias) -> np.ndarray:
    """(H, T, T) additive bias; entries above the diagonal are left at 0 (masked later).

    ``index_bias`` is (H, B_idx) and ``gap_bias`` is (H, B_gap).
    """
    idx_b, gap_b = relative_buckets(indices, taus, index_buckets, gap_buckets)
    bias = index_bias[:, idx_b] + gap_bias[:, gap_b]
    causal = np.tril(np.ones(idx_b.shape[-2:], dtype=bool))
    return np.where(causal, bias, 0.0)


def relative_buckets(indices, taus, index_buckets, gap_buckets):
    """Bucket ids of (i - j) and (tau_i - tau_j) for every causal pair; trailing dims (T, T)."""
    i = np.asarray(indices, dtype=np.float64)
    t = np.asarray(taus, dtype=np.float64)
    di = i[..., :, None] - i[..., None, :]
    dt = t[..., :, None] - t[..., None, :]
    causal = np.tril(np.ones(di.shape[-2:], dtype=bool))
    if np.any(di[..., causal] < 0) or np.any(dt[..., causal] < 0):
        raise RuntimeError("negative relative distance on a causal pair; inputs are not ordered")
    di = np.where(causal, di, 0.0)
    dt = np.where(causal, dt, 0.0)
    return index_buckets(di), gap_buckets(dt)


def rotary_cos_sin(spec: AngleSourceSpec, indices, taus, n_heads: int, gates=None, index_scales=None, time_scales=None):
    """cos/sin of the (..., H, T, N) rotation angles plus the per-head effective frequencies."""
    if gates is None:
        gates = spec.gate_matrix(n_heads)
    spec_v = spec if index_scales is None and time_scales is None else spec.with_values(
        index_scales=index_scales, time_scales=time_scales
    )
    f_index, f_time = effective_frequencies(spec_v, gates)  # (H, N)
    i = np.asarray(indices, dtype=np.float64)[..., None, :]
    t = np.asarray(taus, dtype=np.float64)[..., None, :]
    theta = rotary_angles(i, t, f_index[:, None, :], f_time[:, None, :])
    return np.cos(theta), np.sin(theta), f_index, f_time


def split_head_rotate(Q, K, head: int, alloc: HeadAllocation, spec: AngleSourceSpec, indices, taus):
    """Rotate one head's (T, d) Q and K with the single source its allocation assigns."""
    if not 0 <= head < alloc.n_heads:
        raise InputError(f"head {head} outside 0..{alloc.n_heads - 1}")
    gates = np.full(spec.n_planes, 1.0 if head in alloc.time_heads else 0.0)
    f_index, f_time = effective_frequencies(spec, gates)
    theta = rotary_angles(indices, taus, f_index, f_time)
    cos, sin = np.cos(theta), np.sin(theta)
    return apply_rotation(Q, cos, sin), apply_rotation(K, cos, sin)


# ---------------------------------------------------------------------------
# Batched core


def _unrotate(g, cos, sin):
    out = np.empty_like(g)
    ge, go = g[..., 0::2], g[..., 1::2]
    out[..., 0::2] = ge * cos + go * sin
    out[..., 1::2] = -ge * sin + go * cos
    return out


def _angle_grad(g, rotated):
    # d(rotated)/d(theta): even -> -odd', odd -> even'
    return -g[..., 0::2] * rotated[..., 1::2] + g[..., 1::2] * rotated[..., 0::2]


@dataclass
class AttentionCache:
    x: np.ndarray
    W: HeadParams
    Qr: np.ndarray
    Kr: np.ndarray
    V: np.ndarray
    probs: np.ndarray
    dropped: np.ndarray
    keep: np.ndarray | None
    cos: np.ndarray | None
    sin: np.ndarray | None
    concat: np.ndarray
    scale: float


def _fused_qkv(W: HeadParams) -> np.ndarray:
    # (D, 3*H*d), column blocks ordered Q | K | V, each head-major
    D = W.d_model
    return np.concatenate(
        [w.transpose(1, 0, 2).reshape(D, -1) for w in (W.W_Q, W.W_K, W.W_V)], axis=1
    )


def causal_mask(T: int) -> np.ndarray:
    return np.tril(np.ones((T, T), dtype=bool))


def attention_forward(
    x,
    W: HeadParams,
    *,
    cos=None,
    sin=None,
    bias=None,
    dropout: float = 0.0,
    rng: np.random.Generator | None = None,
):
    """x: (B, T, d_model). cos/sin broadcast to (B, H, T, N); bias to (B, H, T, T).

    Returns (out, logits, cache); ``logits`` are the scaled pre-softmax scores
    with masked entries at -inf, ``cache.probs`` the attention probabilities.
    """
    B, T, D = x.shape
    H, d = W.n_heads, W.head_dim
    qkv = x.reshape(B * T, D) @ _fused_qkv(W)
    qkv = qkv.reshape(B, T, 3, H, d).transpose(2, 0, 3, 1, 4)
    Q, K, V = qkv[0], qkv[1], qkv[2]
    if cos is not None:
        Qr, Kr = apply_rotation(Q, cos, sin), apply_rotation(K, cos, sin)
    else:
        Qr, Kr = Q, K
    scale = 1.0 / math.sqrt(d)
    scores = (Qr @ Kr.swapaxes(-1, -2)) * scale
    if bias is not None:
        scores = scores + bias
    mask = causal_mask(T)
    logits = np.where(mask, scores, -np.inf)
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    probs = e / e.sum(axis=-1, keepdims=True)
    keep = None
    dropped = probs
    if dropout > 0.0:
        keep = (rng.random(probs.shape, dtype=np.float32) >= dropout).astype(probs.dtype) / probs.dtype.type(1.0 - dropout)
        dropped = probs * keep
    heads = dropped @ V  # (B, H, T, d)
    concat = heads.transpose(0, 2, 1, 3).reshape(B, T, H * d)
    out = concat @ W.W_O
    cache = AttentionCache(x, W, Qr, Kr, V, probs, dropped, keep, cos, sin, concat, scale)
    return out, logits, cache


def attention_backward(dout, cache: AttentionCache):
    """Gradients w.r.t. x, the projections, the rotation angles and the logit bias.

    Returns (dx, dW dict, dtheta (B, H, T, N) or None, dbias (B, H, T, T)).
    """
    c = cache
    W = c.W
    B, T, D = c.x.shape
    H, d = W.n_heads, W.head_dim
    dW_O = c.concat.reshape(B * T, H * d).T @ dout.reshape(B * T, D)
    dconcat = dout @ W.W_O.T
    dheads = dconcat.reshape(B, T, H, d).transpose(0, 2, 1, 3)
    dV = c.dropped.swapaxes(-1, -2) @ dheads
    dP = dheads @ c.V.swapaxes(-1, -2)
    if c.keep is not None:
        dP = dP * c.keep
    dS = c.probs * (dP - (dP * c.probs).sum(axis=-1, keepdims=True))
    dbias = dS
    dscores = dS * c.scale
    dQr = dscores @ c.Kr
    dKr = dscores.swapaxes(-1, -2) @ c.Qr
    dtheta = None
    if c.cos is not None:
        dtheta = _angle_grad(dQr, c.Qr) + _angle_grad(dKr, c.Kr)
        dQ = _unrotate(dQr, c.cos, c.sin)
        dK = _unrotate(dKr, c.cos, c.sin)
    else:
        dQ, dK = dQr, dKr
    xf = c.x.reshape(B * T, D)
    dqkv = np.stack([dQ, dK, dV]).transpose(1, 3, 0, 2, 4).reshape(B * T, 3 * H * d)
    dfused = (xf.T @ dqkv).reshape(D, 3, H, d).transpose(1, 2, 0, 3)
    dW = {"W_Q": dfused[0], "W_K": dfused[1], "W_V": dfused[2], "W_O": dW_O}
    dx = (dqkv @ _fused_qkv(W).T).reshape(B, T, D)
    return dx, dW, dtheta, dbias


# ---------------------------------------------------------------------------
# Single-sequence entry point


@dataclass
class AttentionTrace:
    """Captured attention: ``probs[layer]`` is (H, T, T) or (B, H, T, T).

    ``lengths`` (one per sequence) marks the valid prefix when a batch is padded.
    """

    probs: list = field(default_factory=list)
    logits: list | None = None
    lengths: np.ndarray | None = None

    @property
    def n_layers(self) -> int:
        return len(self.probs)

    def check_stochastic(self, tol: float = 1e-9) -> None:
        for layer, p in enumerate(self.probs):
            p4 = p if p.ndim == 4 else p[None]
            T = p4.shape[-1]
            if np.any(p4[..., ~causal_mask(T)] != 0):
                raise InputError(f"layer {layer}: masked attention entries are non-zero")
            rows = p4.sum(axis=-1)
            if self.lengths is not None:
                valid = np.arange(T)[None, :] < np.asarray(self.lengths)[:, None]
                rows = np.where(valid[:, None, :], rows, 1.0)
            if np.any(np.abs(rows - 1.0) > tol):
                raise InputError(f"layer {layer}: attention rows do not sum to 1")


def _positional_inputs(strategy: PEStrategy, indices, taus, tables, d_model):
    extra = 0.0
    tables = tables or {}
    if strategy.kind == SINUSOIDAL:
        extra = extra + sinusoidal_ape(int(np.max(indices)) + 1, d_model)[np.asarray(indices)]
    if strategy.kind == INDEX_APE:
        extra = extra + _need(tables, "index_table")[np.asarray(indices)]
    if strategy.uses_time_ape:
        extra = extra + _need(tables, "time_table")[strategy.time_buckets(taus)]
    return extra


def _need(tables, key):
    if key not in tables:
        raise InputError(f"strategy needs the {key!r} parameter table")
    return np.asarray(tables[key], dtype=np.float64)


def mha_forward(
    X,
    params: HeadParams,
    strategy: PEStrategy,
    indices,
    taus,
    tables: dict | None = None,
    capture: bool = False,
):
    """Causal MHA on one (T, d_model) sequence.

    ``tables`` supplies learned PE parameters where the strategy needs them:
    ``index_table`` (max_len, d_model), ``time_table`` (B_time, d_model),
    ``index_bias`` (H, B_idx), ``gap_bias`` (H, B_gap).
    Returns ``(output, trace)``; trace is None unless ``capture``.
    """
    X = np.asarray(X, dtype=np.float64)
    indices = np.asarray(indices)
    taus = np.asarray(taus, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] < 1:
        raise InputError(f"X must be (T >= 1, d_model), got {X.shape}")
    T, d_model = X.shape
    if d_model != params.d_model:
        raise InputError(f"X width {d_model} does not match projections ({params.d_model})")
    if indices.shape != (T,) or taus.shape != (T,):
        raise InputError("indices and taus must each have one entry per token")
    if np.isnan(X).any() or np.isnan(taus).any():
        raise InputError("NaN in attention inputs")
    H = params.n_heads
    x = X + _positional_inputs(strategy, indices, taus, tables, d_model)
    cos = sin = bias = None
    if strategy.is_rotary:
        if strategy.angles.n_planes * 2 != params.head_dim:
            raise InputError("rotary planes do not match the head width")
        cos, sin, _, _ = rotary_cos_sin(strategy.angles, indices, taus, H)
        cos, sin = cos[None], sin[None]
    if strategy.kind == RELATIVE_BIAS:
        bias = relative_bias_matrix(
            indices,
            taus,
            strategy.index_buckets,
            strategy.gap_buckets,
            _need(tables, "index_bias"),
            _need(tables, "gap_bias"),
        )[None]
    out, logits, cache = attention_forward(x[None], params, cos=cos, sin=sin, bias=bias)
    trace = None
    if capture:
        trace = AttentionTrace(probs=[cache.probs[0]], logits=[logits[0]])
    return out[0], trace
