"""Toy autoregressive next-item recommender in numpy.

Pre-norm decoder blocks (attention + 4x GELU feed-forward), tied output
embedding with a free output bias, analytic backward pass, Adam, and
bit-exact checkpoints. Every positional arm shares this backbone; only the
PE strategy changes.
"""

from __future__ import annotations

import hashlib
import io
import json
import math
import zipfile
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import __version__
from .attention import (
    INDEX_APE,
    RELATIVE_BIAS,
    SINUSOIDAL,
    AttentionTrace,
    HeadParams,
    PEStrategy,
    attention_backward,
    attention_forward,
    relative_buckets,
    rotary_cos_sin,
    sinusoidal_ape,
)
from .errors import ConfigError, InputError, NumericError
from .rope import (
    EventSequence,
    TimeNormalization,
    inverse_softplus,
    logit,
    normalize_timestamps,
    sigmoid,
    softplus,
)

LN_EPS = 1e-5
INIT_STD = 0.02
CHECKPOINT_FORMAT = 1
GELU_C = math.sqrt(2.0 / math.pi)


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    pe_strategy: PEStrategy
    d_model: int = 64
    n_heads: int = 4
    head_dim: int = 16
    n_layers: int = 2
    max_seq_len: int = 50
    dropout_rate: float = 0.2
    seed: int = 0
    pe_seed: int | None = None
    learning_rate: float = 1e-3
    batch_size: int = 128
    time_norm: TimeNormalization = field(default_factory=TimeNormalization)
    dtype: str = "float64"

    def __post_init__(self):
        if self.d_model != self.n_heads * self.head_dim:
            raise ConfigError(
                f"d_model ({self.d_model}) must equal n_heads*head_dim ({self.n_heads}*{self.head_dim})"
            )
        if self.head_dim % 2:
            raise ConfigError("head_dim must be even")
        if self.max_seq_len < 2:
            raise ConfigError("max_seq_len must be at least 2")
        if self.vocab_size < 1 or self.n_layers < 1:
            raise ConfigError("vocab_size and n_layers must be positive")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError("dropout_rate must lie in [0, 1)")
        if self.dtype not in ("float64", "float32"):
            raise ConfigError("dtype must be float64 or float32")
        s = self.pe_strategy
        if s.is_rotary and 2 * s.angles.n_planes != self.head_dim:
            raise ConfigError(
                f"rotary spec has {s.angles.n_planes} planes; head_dim {self.head_dim} needs {self.head_dim // 2}"
            )
        if s.is_rotary and s.angles.head_allocation is not None:
            if s.angles.head_allocation.n_heads != self.n_heads:
                raise ConfigError("head allocation does not match n_heads")

    @property
    def n_planes(self) -> int:
        return self.head_dim // 2

    @property
    def ffn_dim(self) -> int:
        return 4 * self.d_model


# ---------------------------------------------------------------------------
# Batching


@dataclass
class Batch:
    """Right-padded arrays; ``targets`` is -1 where no loss is taken."""

    items: np.ndarray
    targets: np.ndarray
    indices: np.ndarray
    taus: np.ndarray
    lengths: np.ndarray

    @property
    def size(self) -> int:
        return self.items.shape[0]


def _pad(rows, T, fill, dtype):
    out = np.full((len(rows), T), fill, dtype=dtype)
    for b, r in enumerate(rows):
        out[b, : len(r)] = r
    return out


def _assemble(inputs, targets, max_len, norm):
    if not inputs:
        raise InputError("empty batch")
    T = max(len(s) for s in inputs)
    taus = []
    for s in inputs:
        t = normalize_timestamps(s.raw_timestamps, norm)
        taus.append(t)
    tau_arr = np.zeros((len(inputs), T))
    for b, t in enumerate(taus):
        tau_arr[b, : len(t)] = t
        tau_arr[b, len(t):] = t[-1]
    return Batch(
        items=_pad([s.item_ids for s in inputs], T, 0, np.int64),
        targets=_pad(targets, T, -1, np.int64),
        indices=np.broadcast_to(np.arange(T), (len(inputs), T)).copy(),
        taus=tau_arr,
        lengths=np.array([len(s) for s in inputs]),
    )


def training_batch(seqs, max_len: int, norm: TimeNormalization) -> Batch:
    """Teacher-forced next-item batch over the most recent ``max_len`` transitions."""
    inputs, targets = [], []
    for s in seqs:
        if s.length < 2:
            continue
        start = max(0, s.length - 1 - max_len)
        inputs.append(s.slice(start, s.length - 1))
        targets.append(s.item_ids[start + 1 :])
    return _assemble(inputs, targets, max_len, norm)


def prediction_batch(seqs, max_len: int, norm: TimeNormalization, targets=None) -> Batch:
    """Context windows truncated to the most recent ``max_len`` events; loss only at the end."""
    inputs, tgt = [], []
    for b, s in enumerate(seqs):
        if s.length < 1:
            raise InputError("cannot predict from an empty history")
        w = s.slice(max(0, s.length - max_len), None)
        inputs.append(w)
        row = np.full(w.length, -1, dtype=np.int64)
        if targets is not None:
            row[-1] = targets[b]
        tgt.append(row)
    return _assemble(inputs, tgt, max_len, norm)


# ---------------------------------------------------------------------------
# Numerics


def _layer_norm(x, g, b):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    rstd = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + LN_EPS)
    xh = xc * rstd
    return xh * g + b, (xh, rstd, g)


def _layer_norm_backward(dy, cache):
    xh, rstd, g = cache
    dg = (dy * xh).reshape(-1, xh.shape[-1]).sum(axis=0)
    db = dy.reshape(-1, xh.shape[-1]).sum(axis=0)
    dxh = dy * g
    dx = rstd * (dxh - dxh.mean(axis=-1, keepdims=True) - xh * (dxh * xh).mean(axis=-1, keepdims=True))
    return dx, dg, db


def _gelu(x):
    # tanh approximation; returns the activation and the tanh term for backward
    x2 = x * x
    t = np.tanh(x * (GELU_C + (GELU_C * 0.044715) * x2))
    y = 0.5 * x
    y *= 1.0 + t
    return y, t


def _gelu_backward(dy, x, t):
    x2 = x * x
    slope = 0.5 * x * (1.0 - t * t)
    slope *= GELU_C + (3 * GELU_C * 0.044715) * x2
    slope += 0.5 * (1.0 + t)
    return dy * slope


# ---------------------------------------------------------------------------
# Model


@dataclass
class ForwardResult:
    loss: float
    logits: np.ndarray
    trace: AttentionTrace | None
    cache: dict | None
    n_targets: int


class Model:
    """Stateless forward/backward over a flat ``{name: ndarray}`` parameter dict."""

    def __init__(self, config: ModelConfig):
        self.config = config
        self.strategy = config.pe_strategy
        self.dtype = np.dtype(config.dtype)
        self._sin_table = (
            sinusoidal_ape(config.max_seq_len, config.d_model).astype(self.dtype)
            if self.strategy.kind == SINUSOIDAL
            else None
        )

    # -- parameters ---------------------------------------------------------

    def init_params(self) -> dict:
        c = self.config
        rng = np.random.default_rng(c.seed)
        D, F = c.d_model, c.ffn_dim
        p = {"tok_emb": rng.normal(0.0, INIT_STD, (c.vocab_size, D)), "out_bias": np.zeros(c.vocab_size)}
        for layer in range(c.n_layers):
            pre = f"l{layer}."
            hp = HeadParams.init(rng, c.n_heads, D, c.head_dim, INIT_STD)
            p[pre + "ln1.g"], p[pre + "ln1.b"] = np.ones(D), np.zeros(D)
            p[pre + "attn.W_Q"], p[pre + "attn.W_K"] = hp.W_Q, hp.W_K
            p[pre + "attn.W_V"], p[pre + "attn.W_O"] = hp.W_V, hp.W_O
            p[pre + "ln2.g"], p[pre + "ln2.b"] = np.ones(D), np.zeros(D)
            p[pre + "ffn.W1"], p[pre + "ffn.b1"] = rng.normal(0.0, INIT_STD, (D, F)), np.zeros(F)
            p[pre + "ffn.W2"], p[pre + "ffn.b2"] = rng.normal(0.0, INIT_STD, (F, D)), np.zeros(D)
        p["lnf.g"], p["lnf.b"] = np.ones(D), np.zeros(D)
        p.update(self._init_pe_params())
        return {k: np.ascontiguousarray(v, dtype=self.dtype) for k, v in p.items()}

    def _init_pe_params(self) -> dict:
        c, s = self.config, self.strategy
        rng = np.random.default_rng(c.seed if c.pe_seed is None else c.pe_seed)
        p = {}
        if s.kind == INDEX_APE:
            p["pe.index_table"] = rng.normal(0.0, INIT_STD, (c.max_seq_len, c.d_model))
        if s.uses_time_ape:
            p["pe.time_table"] = rng.normal(0.0, INIT_STD, (s.time_buckets.n_buckets, c.d_model))
        if s.kind == RELATIVE_BIAS:
            p["pe.index_bias"] = np.zeros((c.n_heads, s.index_buckets.n_buckets))
            p["pe.gap_bias"] = np.zeros((c.n_heads, s.gap_buckets.n_buckets))
        if s.is_rotary:
            a = s.angles
            p["pe.gate"] = logit(a.gates) if a.gates_learnable else a.gates.copy()
            if a.scales_learnable:
                p["pe.index_scale"] = inverse_softplus(a.index_scales)
                p["pe.time_scale"] = inverse_softplus(a.time_scales)
            else:
                p["pe.index_scale"] = a.index_scales.copy()
                p["pe.time_scale"] = a.time_scales.copy()
        return p

    def trainable(self, name: str) -> bool:
        if not name.startswith("pe."):
            return True
        a = self.strategy.angles
        if name == "pe.gate":
            return bool(a.gates_learnable)
        if name in ("pe.index_scale", "pe.time_scale"):
            return bool(a.scales_learnable)
        return True

    def parameter_count(self, params: dict) -> int:
        return int(sum(v.size for k, v in params.items() if self.trainable(k)))

    def rotary_values(self, params):
        """Constrained (gates (H, N), index_scales, time_scales) from the parameter dict."""
        a = self.strategy.angles
        H = self.config.n_heads
        if a.gates_learnable:
            gates = np.broadcast_to(sigmoid(params["pe.gate"]), (H, a.n_planes))
        else:
            gates = a.gate_matrix(H)
        if a.scales_learnable:
            si, st = softplus(params["pe.index_scale"]), softplus(params["pe.time_scale"])
        else:
            si = np.asarray(params["pe.index_scale"], dtype=np.float64)
            st = np.asarray(params["pe.time_scale"], dtype=np.float64)
        return gates, si, st

    def angle_spec(self, params):
        """The AngleSourceSpec with the current (possibly learned) gates and scales."""
        a = self.strategy.angles
        gates, si, st = self.rotary_values(params)
        return a.with_values(gates=gates[0] if a.gates_learnable else None, index_scales=si, time_scales=st)

    # -- forward ------------------------------------------------------------

    def forward(self, params, batch: Batch, *, train=False, rng=None, capture=False, keep_cache=True, positions=None):
        """Run the decoder on a padded batch.

        Logits are returned only at ``positions`` (a (B, T) mask, default: the
        positions that carry a target), flattened in row-major order.
        """
        c, s = self.config, self.strategy
        dt = self.dtype
        B, T = batch.items.shape
        if T > c.max_seq_len:
            raise InputError(f"batch length {T} exceeds max_seq_len {c.max_seq_len}")
        drop = c.dropout_rate if train else 0.0
        if drop > 0 and rng is None:
            raise InputError("training-mode dropout needs an rng")
        cache = {}
        x = params["tok_emb"][batch.items]
        if s.kind == SINUSOIDAL:
            x = x + self._sin_table[batch.indices]
        if s.kind == INDEX_APE:
            x = x + params["pe.index_table"][batch.indices]
        if s.uses_time_ape:
            tb = s.time_buckets(batch.taus)
            cache["time_buckets"] = tb
            x = x + params["pe.time_table"][tb]
        cos = sin = bias = None
        if s.is_rotary:
            gates, si, st = self.rotary_values(params)
            spec = s.angles.with_values(index_scales=si, time_scales=st)
            cos, sin, _, _ = rotary_cos_sin(spec, batch.indices, batch.taus, c.n_heads, gates=gates)
            cos, sin = cos.astype(dt, copy=False), sin.astype(dt, copy=False)
            cache["rotary"] = (gates, si, st)
        if s.kind == RELATIVE_BIAS:
            ib, gb = relative_buckets(batch.indices, batch.taus, s.index_buckets, s.gap_buckets)
            cache["rel_buckets"] = (ib, gb)
            bias = (params["pe.index_bias"][:, ib] + params["pe.gap_bias"][:, gb]).transpose(1, 0, 2, 3)
        layers = []
        probs = []
        logit_list = []
        for layer in range(c.n_layers):
            pre = f"l{layer}."
            W = HeadParams(
                params[pre + "attn.W_Q"], params[pre + "attn.W_K"], params[pre + "attn.W_V"], params[pre + "attn.W_O"]
            )
            a, ln1 = _layer_norm(x, params[pre + "ln1.g"], params[pre + "ln1.b"])
            att, att_logits, acache = attention_forward(a, W, cos=cos, sin=sin, bias=bias, dropout=drop, rng=rng)
            x = x + att
            h, ln2 = _layer_norm(x, params[pre + "ln2.g"], params[pre + "ln2.b"])
            u = h @ params[pre + "ffn.W1"] + params[pre + "ffn.b1"]
            g, t = _gelu(u)
            keep = None
            if drop > 0:
                keep = (rng.random(g.shape, dtype=np.float32) >= drop).astype(dt) / dt.type(1.0 - drop)
                g = g * keep
            x = x + g @ params[pre + "ffn.W2"] + params[pre + "ffn.b2"]
            layers.append((ln1, acache, ln2, h, u, t, g, keep))
            if capture:
                probs.append(acache.probs)
                logit_list.append(att_logits)
        hf, lnf = _layer_norm(x, params["lnf.g"], params["lnf.b"])
        valid = batch.targets >= 0
        where = valid if positions is None else positions
        logits = hf[where] @ params["tok_emb"].T + params["out_bias"]
        n = int(valid.sum())
        loss = float("nan")
        if n:
            z = logits if positions is None else (hf[valid] @ params["tok_emb"].T + params["out_bias"])
            z = z - z.max(axis=-1, keepdims=True)
            ez = np.exp(z)
            se = ez.sum(axis=-1)
            tgt = batch.targets[valid]
            nll = np.log(se) - z[np.arange(n), tgt]
            loss = float(nll.sum(dtype=np.float64) / n)
            if keep_cache:
                cache["softmax"] = ez / se[:, None]
        trace = AttentionTrace(probs=probs, logits=logit_list, lengths=batch.lengths.copy()) if capture else None
        if keep_cache:
            cache.update(batch=batch, layers=layers, hf=hf, lnf=lnf, valid=valid, n=n)
        return ForwardResult(loss, logits, trace, cache if keep_cache else None, n)

    # -- backward -----------------------------------------------------------

    def backward(self, params, result: ForwardResult) -> dict:
        """Analytic gradient of the mean next-item cross-entropy for every parameter."""
        c, s = self.config, self.strategy
        cache = result.cache
        if cache is None or "softmax" not in cache:
            raise InputError("backward needs a cached forward pass with at least one target")
        batch, valid, n = cache["batch"], cache["valid"], cache["n"]
        grads = {k: np.zeros_like(v) for k, v in params.items()}
        dz = cache["softmax"]
        dz[np.arange(n), batch.targets[valid]] -= 1.0
        dz /= n
        B, T = batch.items.shape
        hv = cache["hf"][valid]
        grads["out_bias"] += dz.sum(axis=0)
        grads["tok_emb"] += dz.T @ hv
        dhf = np.zeros_like(cache["hf"])
        dhf[valid] = dz @ params["tok_emb"]
        dx, grads["lnf.g"], grads["lnf.b"] = _layer_norm_backward(dhf, cache["lnf"])
        dtheta = None
        dbias = None
        for layer in reversed(range(c.n_layers)):
            pre = f"l{layer}."
            ln1, acache, ln2, h, u, t, g, keep = cache["layers"][layer]
            # feed-forward
            grads[pre + "ffn.b2"] += dx.reshape(-1, c.d_model).sum(axis=0)
            grads[pre + "ffn.W2"] += g.reshape(-1, c.ffn_dim).T @ dx.reshape(-1, c.d_model)
            dg = dx @ params[pre + "ffn.W2"].T
            if keep is not None:
                dg = dg * keep
            du = _gelu_backward(dg, u, t)
            grads[pre + "ffn.b1"] += du.reshape(-1, c.ffn_dim).sum(axis=0)
            grads[pre + "ffn.W1"] += h.reshape(-1, c.d_model).T @ du.reshape(-1, c.ffn_dim)
            dh = du @ params[pre + "ffn.W1"].T
            dln, dgam, dbet = _layer_norm_backward(dh, ln2)
            grads[pre + "ln2.g"] += dgam
            grads[pre + "ln2.b"] += dbet
            dx = dx + dln
            # attention
            da, dW, dth, dbi = attention_backward(dx, acache)
            for key, val in dW.items():
                grads[pre + "attn." + key] += val
            if dth is not None:
                dtheta = dth if dtheta is None else dtheta + dth
            if s.kind == RELATIVE_BIAS:
                dbias = dbi if dbias is None else dbias + dbi
            dln, dgam, dbet = _layer_norm_backward(da, ln1)
            grads[pre + "ln1.g"] += dgam
            grads[pre + "ln1.b"] += dbet
            dx = dx + dln
        # embeddings
        flat = dx.reshape(-1, c.d_model)
        np.add.at(grads["tok_emb"], batch.items.reshape(-1), flat)
        if s.kind == INDEX_APE:
            np.add.at(grads["pe.index_table"], batch.indices.reshape(-1), flat)
        if s.uses_time_ape:
            np.add.at(grads["pe.time_table"], cache["time_buckets"].reshape(-1), flat)
        if s.kind == RELATIVE_BIAS:
            self._bias_grads(grads, dbias, cache["rel_buckets"])
        if s.is_rotary:
            self._rotary_grads(grads, params, dtheta, batch, cache["rotary"])
        for k in grads:
            if not self.trainable(k):
                grads[k][...] = 0.0
        return grads

    def _bias_grads(self, grads, dbias, buckets):
        H = self.config.n_heads
        ib, gb = buckets
        per_head = dbias.transpose(1, 0, 2, 3).reshape(H, -1)
        for name, b in (("pe.index_bias", ib), ("pe.gap_bias", gb)):
            nb = grads[name].shape[1]
            flat = (np.arange(H)[:, None] * nb + b.reshape(1, -1)).reshape(-1)
            grads[name] += np.bincount(flat, weights=per_head.reshape(-1), minlength=H * nb).reshape(H, nb)

    def _rotary_grads(self, grads, params, dtheta, batch, values):
        a = self.strategy.angles
        gates, si, st = values
        dth = dtheta.astype(np.float64)
        # theta[b,h,t,k] = i[b,t] * fi[h,k] + tau[b,t] * ft[h,k]
        d_fi = np.einsum("bhtk,bt->hk", dth, batch.indices.astype(np.float64))
        d_ft = np.einsum("bhtk,bt->hk", dth, batch.taus)
        wi, wt = a.index_omegas, a.time_omegas
        d_si = (d_fi * (1.0 - gates) * wi).sum(axis=0)
        d_st = (d_ft * gates * wt).sum(axis=0)
        if a.scales_learnable:
            grads["pe.index_scale"] += d_si * sigmoid(params["pe.index_scale"])
            grads["pe.time_scale"] += d_st * sigmoid(params["pe.time_scale"])
        if a.gates_learnable:
            d_gate = (-d_fi * si * wi + d_ft * st * wt).sum(axis=0)
            lam = sigmoid(params["pe.gate"])
            grads["pe.gate"] += d_gate * lam * (1.0 - lam)

    # -- convenience ----------------------------------------------------------

    def loss_and_grads(self, params, batch: Batch, rng=None, train=False):
        res = self.forward(params, batch, train=train, rng=rng)
        return res.loss, self.backward(params, res)

    def last_logits(self, params, seqs) -> np.ndarray:
        """(B, V) next-item logits after each sequence's final event."""
        batch = prediction_batch(seqs, self.config.max_seq_len, self.config.time_norm)
        last = np.zeros(batch.items.shape, dtype=bool)
        last[np.arange(batch.size), batch.lengths - 1] = True
        return self.forward(params, batch, keep_cache=False, positions=last).logits


# ---------------------------------------------------------------------------
# Optimizer and state


class Adam:
    def __init__(self, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m: dict = {}
        self.v: dict = {}
        self.t = 0

    def step(self, params: dict, grads: dict, names) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for k in names:
            g = grads[k]
            if k not in self.m:
                self.m[k] = np.zeros_like(params[k])
                self.v[k] = np.zeros_like(params[k])
            m, v = self.m[k], self.v[k]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            params[k] -= (self.lr / bc1) * m / (np.sqrt(v / bc2) + self.eps)


@dataclass
class TrainState:
    config: ModelConfig
    params: dict
    optimizer: Adam
    step: int = 0
    rng: np.random.Generator = field(default_factory=lambda: np.random.default_rng(0))

    @property
    def model(self) -> Model:
        return Model(self.config)

    @classmethod
    def initial(cls, config: ModelConfig) -> "TrainState":
        model = Model(config)
        # shuffling and dropout draw from a stream separate from initialization
        return cls(config, model.init_params(), Adam(config.learning_rate), 0, np.random.default_rng([config.seed, 1]))

    def parameter_count(self) -> int:
        return self.model.parameter_count(self.params)

    def check_finite(self) -> None:
        for k, v in self.params.items():
            if not np.all(np.isfinite(v)):
                raise NumericError(f"non-finite values in parameter {k!r} at step {self.step}")


def forward_loss(batch_seqs, state: TrainState, capture=False):
    """Mean next-item cross-entropy of ``state`` on raw sequences (dropout off)."""
    if not batch_seqs:
        raise InputError("empty batch")
    c = state.config
    batch = training_batch(batch_seqs, c.max_seq_len, c.time_norm)
    res = state.model.forward(state.params, batch, capture=capture, keep_cache=False)
    return res.loss, res.trace


def backward(state: TrainState, batch_seqs) -> dict:
    c = state.config
    model = state.model
    batch = training_batch(batch_seqs, c.max_seq_len, c.time_norm)
    grads = model.backward(state.params, model.forward(state.params, batch))
    for k, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter {k!r}")
    return grads


def evaluation_loss(state: TrainState, contexts, targets, batch_size: int = 512) -> float:
    """Mean cross-entropy of predicting ``targets[u]`` right after ``contexts[u]``."""
    c = state.config
    model = state.model
    total, count = 0.0, 0
    for lo in range(0, len(contexts), batch_size):
        chunk = contexts[lo : lo + batch_size]
        batch = prediction_batch(chunk, c.max_seq_len, c.time_norm, targets[lo : lo + batch_size])
        res = model.forward(state.params, batch, keep_cache=False)
        total += res.loss * res.n_targets
        count += res.n_targets
    return total / count


@dataclass
class EpochMetrics:
    epoch: int
    train_loss: float
    val_loss: float | None = None


def train(split, config: ModelConfig, epochs: int, state: TrainState | None = None, log=None):
    """Adam over shuffled mini-batches; returns (state, [EpochMetrics]).

    ``split`` is a DatasetSplit (or anything with ``train_sequences()`` and
    ``validation_pairs()``).
    """
    state = state or TrainState.initial(config)
    history = []
    if epochs <= 0:
        return state, history
    model = state.model
    names = [k for k in state.params if model.trainable(k)]
    seqs = [s for s in split.train_sequences() if s.length >= 2]
    if not seqs:
        raise InputError("no training sequence has two or more events")
    val_ctx, val_tgt = split.validation_pairs()
    for epoch in range(epochs):
        order = state.rng.permutation(len(seqs))
        total, count = 0.0, 0
        for lo in range(0, len(order), config.batch_size):
            chunk = [seqs[i] for i in order[lo : lo + config.batch_size]]
            batch = training_batch(chunk, config.max_seq_len, config.time_norm)
            res = model.forward(state.params, batch, train=True, rng=state.rng)
            if not math.isfinite(res.loss) or res.loss > 1e4:
                raise NumericError(f"training diverged at step {state.step}: loss={res.loss}")
            grads = model.backward(state.params, res)
            for k in names:
                if not np.all(np.isfinite(grads[k])):
                    raise NumericError(f"non-finite gradient for parameter {k!r} at step {state.step}")
            state.optimizer.step(state.params, grads, names)
            state.step += 1
            total += res.loss * res.n_targets
            count += res.n_targets
        state.check_finite()
        val = evaluation_loss(state, val_ctx, val_tgt) if val_ctx else None
        history.append(EpochMetrics(epoch + 1, total / count, val))
        if log is not None:
            log(history[-1])
    return state, history


def predict_topk(state: TrainState, seq: EventSequence, k: int, exclude_history: bool = False):
    return rank_items(state, [seq], k, exclude_history)[0]


def rank_items(state: TrainState, seqs, k: int, exclude_history: bool = False, batch_size: int = 512):
    """Top-k item ids per sequence over the full vocabulary; ties go to the smaller id."""
    V = state.config.vocab_size
    if not 1 <= k <= V:
        raise InputError(f"k must lie in [1, {V}], got {k}")
    model = state.model
    out = []
    for lo in range(0, len(seqs), batch_size):
        chunk = seqs[lo : lo + batch_size]
        logits = model.last_logits(state.params, chunk).astype(np.float64)
        if exclude_history:
            for b, s in enumerate(chunk):
                logits[b, s.item_ids] = -np.inf
        out.extend(rank_from_logits(logits, k))
    return out


def evaluate_next(state: TrainState, contexts, targets, k: int, exclude_history: bool = False, batch_size: int = 512):
    """Loss and top-k ranking for ``targets`` after ``contexts`` from one forward pass.

    Returns ``(mean cross-entropy, rankings)``; the values equal those of
    ``evaluation_loss`` and ``rank_items``.
    """
    V = state.config.vocab_size
    if not 1 <= k <= V:
        raise InputError(f"k must lie in [1, {V}], got {k}")
    c = state.config
    model = state.model
    total, count, ranks = 0.0, 0, []
    for lo in range(0, len(contexts), batch_size):
        chunk = contexts[lo : lo + batch_size]
        batch = prediction_batch(chunk, c.max_seq_len, c.time_norm, targets[lo : lo + batch_size])
        res = model.forward(state.params, batch, keep_cache=False)
        total += res.loss * res.n_targets
        count += res.n_targets
        logits = res.logits.astype(np.float64)
        if exclude_history:
            for b, s in enumerate(chunk):
                logits[b, s.item_ids] = -np.inf
        ranks.extend(rank_from_logits(logits, k))
    return total / count, ranks


def rank_from_logits(logits, k):
    logits = np.atleast_2d(logits)
    return np.argsort(-logits, axis=1, kind="stable")[:, :k]


# ---------------------------------------------------------------------------
# Checkpoints


def config_hash(payload: dict) -> str:
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()


def save_checkpoint(state: TrainState, path, config_payload: dict) -> str:
    """Write params, Adam moments, step and RNG state to an .npz; returns the config hash.

    ``config_payload`` is the JSON-able description the state was built from;
    loading needs it to rebuild the PE strategy.
    """
    arrays = {f"param/{k}": v for k, v in state.params.items()}
    arrays.update({f"adam_m/{k}": v for k, v in state.optimizer.m.items()})
    arrays.update({f"adam_v/{k}": v for k, v in state.optimizer.v.items()})
    h = config_hash(config_payload)
    meta = {
        "format": CHECKPOINT_FORMAT,
        "library_version": __version__,
        "config": config_payload,
        "config_hash": h,
        "step": state.step,
        "adam": {"t": state.optimizer.t, "lr": state.optimizer.lr},
        "rng": state.rng.bit_generator.state,
    }
    arrays["meta"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    Path(path).write_bytes(buf.getvalue())
    return h


def load_checkpoint(path, build_config):
    """Inverse of save_checkpoint. ``build_config(payload) -> ModelConfig``."""
    path = Path(path)
    if not path.exists():
        raise InputError(f"checkpoint {path} does not exist")
    try:
        data = np.load(path, allow_pickle=False)
    except (OSError, ValueError, zipfile.BadZipFile) as exc:
        raise InputError(f"unreadable checkpoint {path}: {exc}") from exc
    with data:
        meta = json.loads(bytes(data["meta"]).decode())
        if meta.get("format") != CHECKPOINT_FORMAT:
            raise InputError(f"unsupported checkpoint format {meta.get('format')}")
        if config_hash(meta["config"]) != meta["config_hash"]:
            raise InputError("checkpoint config hash mismatch")
        params, m, v = {}, {}, {}
        for key in data.files:
            if key == "meta":
                continue
            kind, name = key.split("/", 1)
            {"param": params, "adam_m": m, "adam_v": v}[kind][name] = data[key]
    config = build_config(meta["config"])
    opt = Adam(meta["adam"]["lr"])
    opt.t, opt.m, opt.v = meta["adam"]["t"], m, v
    rng = np.random.default_rng()
    rng.bit_generator.state = meta["rng"]
    return TrainState(config, params, opt, meta["step"], rng), meta


def with_dropout(config: ModelConfig, rate: float) -> ModelConfig:
    return replace(config, dropout_rate=rate)
