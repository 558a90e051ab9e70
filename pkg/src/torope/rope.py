"""Rotary angle machinery for (index, timestamp) event streams.

Covers frequency-bank construction, timestamp normalization, the fused
time-and-order angle map with its single-source and split special cases,
plane rotation, and a few closed-form per-plane diagnostics.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, replace
from decimal import ROUND_HALF_UP, Decimal
from typing import Sequence

import numpy as np

from .errors import ConfigError, InputError

INDEX_ONLY = "index_only"
TIME_ONLY = "time_only"
EARLY_FUSION = "early_fusion"
SPLIT_BY_DIM = "split_by_dim"
SPLIT_BY_HEAD = "split_by_head"
VARIANTS = (INDEX_ONLY, TIME_ONLY, EARLY_FUSION, SPLIT_BY_DIM, SPLIT_BY_HEAD)

SECONDS_PER_DAY = 86400.0


def _frozen(a, dtype) -> np.ndarray:
    out = np.array(a, dtype=dtype)
    out.setflags(write=False)
    return out


@dataclass(frozen=True, eq=False)
class EventSequence:
    """One user's chronologically ordered interactions.

    ``item_ids[i]`` happened at ``raw_timestamps[i]`` (epoch seconds); ``i`` is
    the 0-based order index. Arrays are stored read-only.
    """

    item_ids: np.ndarray
    raw_timestamps: np.ndarray
    user: object = None

    def __post_init__(self):
        items = np.asarray(self.item_ids)
        ts = np.asarray(self.raw_timestamps)
        if items.ndim != 1 or ts.ndim != 1:
            raise InputError("item_ids and raw_timestamps must be 1-D")
        if items.shape != ts.shape:
            raise InputError(
                f"item_ids ({items.size}) and raw_timestamps ({ts.size}) differ in length"
            )
        if items.size and not np.issubdtype(items.dtype, np.integer):
            raise InputError("item_ids must be integers")
        if ts.size and not np.issubdtype(ts.dtype, np.integer):
            raise InputError("raw_timestamps must be integer epoch seconds")
        if items.size and items.min() < 0:
            raise InputError("item_ids must be non-negative")
        if np.any(np.diff(ts) < 0):
            raise InputError(
                "raw_timestamps are not non-decreasing; use EventSequence.sorted_from() to repair"
            )
        object.__setattr__(self, "item_ids", _frozen(items, np.int64))
        object.__setattr__(self, "raw_timestamps", _frozen(ts, np.int64))

    @classmethod
    def sorted_from(cls, item_ids, raw_timestamps, user=None) -> "EventSequence":
        """Repair mode: stable-sort events by timestamp before construction."""
        items = np.asarray(item_ids, dtype=np.int64)
        ts = np.asarray(raw_timestamps, dtype=np.int64)
        if items.shape != ts.shape:
            raise InputError("item_ids and raw_timestamps differ in length")
        order = np.argsort(ts, kind="stable")
        return cls(items[order], ts[order], user)

    @property
    def length(self) -> int:
        return int(self.item_ids.size)

    def __len__(self) -> int:
        return self.length

    def check_vocab(self, vocab_size: int) -> None:
        if self.length and self.item_ids.max() >= vocab_size:
            raise InputError(
                f"item id {int(self.item_ids.max())} outside vocabulary of size {vocab_size}"
            )

    def slice(self, start: int | None = None, stop: int | None = None) -> "EventSequence":
        return EventSequence(self.item_ids[start:stop], self.raw_timestamps[start:stop], self.user)

    def __eq__(self, other):
        if not isinstance(other, EventSequence):
            return NotImplemented
        return (
            self.user == other.user
            and np.array_equal(self.item_ids, other.item_ids)
            and np.array_equal(self.raw_timestamps, other.raw_timestamps)
        )

    def __hash__(self):
        return hash((self.user, self.item_ids.tobytes(), self.raw_timestamps.tobytes()))

    def __repr__(self):
        return f"EventSequence(user={self.user!r}, length={self.length})"


@dataclass(frozen=True)
class TimeNormalization:
    """tau = (u - u_ref) / s; default unit is days."""

    u_ref: int = 0
    s: float = SECONDS_PER_DAY

    def __post_init__(self):
        if not (self.s > 0) or not math.isfinite(self.s):
            raise ConfigError(f"time normalization divisor must be positive, got {self.s}")


def normalize_timestamps(seq, norm: TimeNormalization) -> np.ndarray:
    """Map raw epoch seconds to tau units. Accepts an EventSequence or any integer array."""
    if not isinstance(norm, TimeNormalization):
        raise ConfigError("norm must be a TimeNormalization")
    norm.__post_init__()
    raw = seq.raw_timestamps if isinstance(seq, EventSequence) else np.asarray(seq)
    # Integer subtraction first so a common shift of u and u_ref cancels exactly.
    if np.issubdtype(raw.dtype, np.integer) and float(norm.u_ref).is_integer():
        delta = raw.astype(np.int64) - np.int64(norm.u_ref)
    else:
        delta = raw.astype(np.float64) - float(norm.u_ref)
    return delta.astype(np.float64) / float(norm.s)


# ---------------------------------------------------------------------------
# Frequency banks


@dataclass(frozen=True, eq=False)
class FrequencyBank:
    """Per-plane angular frequencies (radians per unit of the source).

    ``recipe`` remembers how the ladder was built so it can be rebuilt at a
    different plane count (split-by-dimension keeps multi-scale coverage that way).
    """

    omegas: np.ndarray
    source_unit: str = "index"
    recipe: tuple = ("explicit",)

    def __post_init__(self):
        om = np.asarray(self.omegas, dtype=np.float64).reshape(-1)
        if om.size < 1:
            raise ConfigError("a frequency bank needs at least one plane")
        if not np.all(np.isfinite(om)) or np.any(om <= 0):
            raise ConfigError("all bank frequencies must be finite and positive")
        if np.any(np.diff(om) > 0):
            raise ConfigError("bank frequencies must be non-increasing in k")
        object.__setattr__(self, "omegas", _frozen(om, np.float64))

    def __len__(self):
        return int(self.omegas.size)

    @property
    def degenerate(self) -> bool:
        return len(self) > 1 and bool(np.all(self.omegas == self.omegas[0]))

    def __eq__(self, other):
        if not isinstance(other, FrequencyBank):
            return NotImplemented
        return (
            self.source_unit == other.source_unit
            and self.recipe == other.recipe
            and np.array_equal(self.omegas, other.omegas)
        )

    def __hash__(self):
        return hash((self.source_unit, self.recipe, self.omegas.tobytes()))

    def resized(self, n: int) -> "FrequencyBank":
        """Rebuild the same ladder over ``n`` planes."""
        if n == len(self):
            return self
        kind = self.recipe[0]
        if kind == "base":
            return build_base_bank(self.recipe[1], 2 * n, source_unit=self.source_unit)
        if kind == "wavelength":
            lo, hi = self.recipe[1], self.recipe[2]
            if n == 1 and lo < hi:
                # a one-plane ladder sits at the geometric centre of the band
                mid = math.sqrt(lo * hi)
                return build_wavelength_bank(mid, mid, 1, source_unit=self.source_unit)
            return build_wavelength_bank(lo, hi, n, source_unit=self.source_unit)
        raise ConfigError(f"cannot resize an explicit bank from {len(self)} to {n} planes")


def build_base_bank(base: float, d: int, source_unit: str = "index") -> FrequencyBank:
    """omega_k = base ** (-2k/d) for k = 0 .. d/2 - 1."""
    if not isinstance(d, (int, np.integer)) or d < 2 or d % 2:
        raise ConfigError(f"rotary dimension must be an even integer >= 2, got {d!r}")
    if not (base > 1) or not math.isfinite(base):
        raise ConfigError(f"bank base must exceed 1, got {base!r}")
    k = np.arange(d // 2, dtype=np.float64)
    omegas = np.power(float(base), -2.0 * k / d)
    return FrequencyBank(omegas, source_unit, ("base", float(base)))


def build_wavelength_bank(
    lambda_min: float, lambda_max: float, n: int, source_unit: str = "tau"
) -> FrequencyBank:
    """Log-spaced frequencies whose periods span [lambda_min, lambda_max]."""
    if not (lambda_min > 0) or not (lambda_max > 0):
        raise ConfigError("wavelengths must be positive")
    if lambda_min > lambda_max:
        raise ConfigError(f"lambda_min {lambda_min} exceeds lambda_max {lambda_max}")
    if n < 1:
        raise ConfigError("a frequency bank needs at least one plane")
    w_max = 2.0 * math.pi / lambda_min
    w_min = 2.0 * math.pi / lambda_max
    if lambda_min == lambda_max:
        if n > 1:
            warnings.warn(
                f"degenerate wavelength band at period {lambda_min}: constant bank of {n} planes",
                stacklevel=2,
            )
        omegas = np.full(n, w_max)
    else:
        if n == 1:
            raise ConfigError("one plane cannot span a band with lambda_min < lambda_max")
        k = np.arange(n, dtype=np.float64)
        omegas = w_max * np.power(w_min / w_max, k / (n - 1))
        omegas[0], omegas[-1] = w_max, w_min
    return FrequencyBank(omegas, source_unit, ("wavelength", float(lambda_min), float(lambda_max)))


def effective_periods(bank: FrequencyBank) -> np.ndarray:
    return 2.0 * math.pi / bank.omegas


# ---------------------------------------------------------------------------
# Allocations


def round_half_up(rho: float, n: int) -> int:
    return int((Decimal(repr(float(rho))) * n).quantize(Decimal(1), rounding=ROUND_HALF_UP))


def _check_ratio(rho):
    if not (0.0 <= rho <= 1.0):
        raise ConfigError(f"split ratio must lie in [0, 1], got {rho}")


@dataclass(frozen=True)
class PlaneAllocation:
    time_planes: frozenset
    index_planes: frozenset

    def __post_init__(self):
        if self.time_planes & self.index_planes:
            raise ConfigError("time and index plane sets overlap")
        n = len(self.time_planes) + len(self.index_planes)
        if set(self.time_planes | self.index_planes) != set(range(n)):
            raise ConfigError("plane sets must cover 0..N-1")

    @property
    def n_planes(self) -> int:
        return len(self.time_planes) + len(self.index_planes)

    @property
    def ratio(self) -> float:
        return len(self.time_planes) / self.n_planes


@dataclass(frozen=True)
class HeadAllocation:
    time_heads: frozenset
    index_heads: frozenset

    def __post_init__(self):
        if self.time_heads & self.index_heads:
            raise ConfigError("time and index head sets overlap")
        n = len(self.time_heads) + len(self.index_heads)
        if set(self.time_heads | self.index_heads) != set(range(n)):
            raise ConfigError("head sets must cover every head")

    @property
    def n_heads(self) -> int:
        return len(self.time_heads) + len(self.index_heads)

    @property
    def ratio(self) -> float:
        return len(self.time_heads) / self.n_heads


def allocate_planes(n: int, rho: float) -> PlaneAllocation:
    """The first round_half_up(rho*N) plane slots go to time, the rest to index."""
    if n < 1:
        raise ConfigError("need at least one plane")
    _check_ratio(rho)
    n_time = round_half_up(rho, n)
    return PlaneAllocation(frozenset(range(n_time)), frozenset(range(n_time, n)))


def allocate_heads(n_heads: int, rho: float) -> HeadAllocation:
    """The lowest round_half_up(rho*H) head indices become time heads."""
    if n_heads < 1:
        raise ConfigError("need at least one head")
    _check_ratio(rho)
    n_time = round_half_up(rho, n_heads)
    return HeadAllocation(frozenset(range(n_time)), frozenset(range(n_time, n_heads)))


# ---------------------------------------------------------------------------
# Gate / scale parameterization


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=np.float64)))


def logit(p):
    p = np.asarray(p, dtype=np.float64)
    return np.log(p) - np.log1p(-p)


def softplus(x):
    x = np.asarray(x, dtype=np.float64)
    return np.logaddexp(0.0, x)


def inverse_softplus(y):
    y = np.asarray(y, dtype=np.float64)
    return y + np.log(-np.expm1(-y))


# ---------------------------------------------------------------------------
# Angle sources


@dataclass(frozen=True, eq=False)
class AngleSourceSpec:
    """Which angle source(s) drive each rotary plane, with gates and scales.

    ``index_omegas`` / ``time_omegas`` are the per-plane ladders actually used
    (for split-by-dimension each side is rebuilt over its own plane count and
    scattered into its slots). ``gates`` and the scales hold constrained values.
    """

    variant: str
    index_bank: FrequencyBank
    time_bank: FrequencyBank
    index_omegas: np.ndarray
    time_omegas: np.ndarray
    gates: np.ndarray
    index_scales: np.ndarray
    time_scales: np.ndarray
    gates_learnable: bool = False
    scales_learnable: bool = False
    plane_allocation: PlaneAllocation | None = None
    head_allocation: HeadAllocation | None = None

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown rotary variant {self.variant!r}; expected one of {VARIANTS}")
        n = len(self.index_bank)
        if len(self.time_bank) != n:
            raise ConfigError(
                f"index bank has {n} planes but time bank has {len(self.time_bank)}"
            )
        for name in ("index_omegas", "time_omegas", "gates", "index_scales", "time_scales"):
            arr = np.asarray(getattr(self, name), dtype=np.float64).reshape(-1)
            if arr.size != n:
                raise ConfigError(f"{name} has {arr.size} entries, expected {n}")
            if not np.all(np.isfinite(arr)):
                raise ConfigError(f"{name} must be finite")
            object.__setattr__(self, name, _frozen(arr, np.float64))
        g = self.gates
        if np.any(g < 0) or np.any(g > 1):
            raise ConfigError("gates must lie in [0, 1]")
        if np.any(self.index_scales <= 0) or np.any(self.time_scales <= 0):
            raise ConfigError("scales must be positive")
        if self.variant == INDEX_ONLY and np.any(g != 0):
            raise ConfigError("index-only rotary requires every gate to be 0")
        if self.variant == TIME_ONLY and np.any(g != 1):
            raise ConfigError("time-only rotary requires every gate to be 1")
        if self.variant in (INDEX_ONLY, TIME_ONLY, SPLIT_BY_DIM, SPLIT_BY_HEAD) and self.gates_learnable:
            raise ConfigError(f"{self.variant} uses hard gates; they cannot be learnable")
        if self.variant == SPLIT_BY_DIM:
            alloc = self.plane_allocation
            if alloc is None or alloc.n_planes != n:
                raise ConfigError("split_by_dim needs a plane allocation over every plane")
            expect = np.array([1.0 if k in alloc.time_planes else 0.0 for k in range(n)])
            if not np.array_equal(g, expect):
                raise ConfigError("split_by_dim gates must match the plane allocation")
        if self.variant == SPLIT_BY_HEAD and self.head_allocation is None:
            raise ConfigError("split_by_head needs a head allocation")

    @property
    def n_planes(self) -> int:
        return len(self.index_bank)

    def head_gates(self, head: int = 0) -> np.ndarray:
        """Per-plane gates seen by one head."""
        if self.variant == SPLIT_BY_HEAD:
            alloc = self.head_allocation
            if not 0 <= head < alloc.n_heads:
                raise InputError(f"head {head} outside 0..{alloc.n_heads - 1}")
            fill = 1.0 if head in alloc.time_heads else 0.0
            return np.full(self.n_planes, fill)
        return self.gates

    def gate_matrix(self, n_heads: int) -> np.ndarray:
        """(H, N) gates; identical rows unless split by head."""
        if self.variant == SPLIT_BY_HEAD and self.head_allocation.n_heads != n_heads:
            raise ConfigError(
                f"head allocation covers {self.head_allocation.n_heads} heads, model has {n_heads}"
            )
        return np.stack([self.head_gates(h) for h in range(n_heads)])

    def with_values(self, gates=None, index_scales=None, time_scales=None) -> "AngleSourceSpec":
        """Copy with updated (constrained) gate/scale values, e.g. after training."""
        kw = {}
        if gates is not None:
            kw["gates"] = gates
        if index_scales is not None:
            kw["index_scales"] = index_scales
        if time_scales is not None:
            kw["time_scales"] = time_scales
        return replace(self, **kw)

    def describe(self) -> dict:
        out = {
            "variant": self.variant,
            "gates": self.gates.tolist(),
            "index_periods": (2 * math.pi / self.index_omegas).tolist(),
            "time_periods": (2 * math.pi / self.time_omegas).tolist(),
        }
        if self.time_bank.degenerate:
            out["warning"] = "time bank is degenerate (constant period)"
        if self.plane_allocation is not None:
            out["time_planes"] = sorted(self.plane_allocation.time_planes)
        if self.head_allocation is not None:
            out["time_heads"] = sorted(self.head_allocation.time_heads)
        return out


def make_angle_spec(
    variant: str,
    index_bank: FrequencyBank,
    time_bank: FrequencyBank,
    *,
    rho: float | None = None,
    n_heads: int | None = None,
    gate: float | Sequence[float] = 0.5,
    gates_learnable: bool | None = None,
    scales_learnable: bool = False,
    index_scale: float | Sequence[float] = 1.0,
    time_scale: float | Sequence[float] = 1.0,
) -> AngleSourceSpec:
    """Build a consistent AngleSourceSpec for any rotary variant.

    ``rho`` is the time share for the split variants; ``gate`` only matters for
    early fusion (learnable by default there).
    """
    n = len(index_bank)
    if len(time_bank) != n:
        raise ConfigError(f"index bank has {n} planes but time bank has {len(time_bank)}")
    index_omegas = index_bank.omegas.copy()
    time_omegas = time_bank.omegas.copy()
    plane_alloc = head_alloc = None
    if variant == INDEX_ONLY:
        gates = np.zeros(n)
    elif variant == TIME_ONLY:
        gates = np.ones(n)
    elif variant == EARLY_FUSION:
        gates = np.broadcast_to(np.asarray(gate, dtype=np.float64), (n,)).copy()
        if gates_learnable is None:
            gates_learnable = True
    elif variant == SPLIT_BY_DIM:
        if rho is None:
            raise ConfigError("split_by_dim needs a ratio rho")
        plane_alloc = allocate_planes(n, rho)
        t_slots = sorted(plane_alloc.time_planes)
        p_slots = sorted(plane_alloc.index_planes)
        if t_slots:
            time_omegas[t_slots] = time_bank.resized(len(t_slots)).omegas
        if p_slots:
            index_omegas[p_slots] = index_bank.resized(len(p_slots)).omegas
        gates = np.zeros(n)
        gates[t_slots] = 1.0
    elif variant == SPLIT_BY_HEAD:
        if rho is None or n_heads is None:
            raise ConfigError("split_by_head needs a ratio rho and a head count")
        head_alloc = allocate_heads(n_heads, rho)
        gates = np.zeros(n)
    else:
        raise ConfigError(f"unknown rotary variant {variant!r}; expected one of {VARIANTS}")
    return AngleSourceSpec(
        variant=variant,
        index_bank=index_bank,
        time_bank=time_bank,
        index_omegas=index_omegas,
        time_omegas=time_omegas,
        gates=gates,
        index_scales=np.broadcast_to(np.asarray(index_scale, dtype=np.float64), (n,)),
        time_scales=np.broadcast_to(np.asarray(time_scale, dtype=np.float64), (n,)),
        gates_learnable=bool(gates_learnable),
        scales_learnable=scales_learnable,
        plane_allocation=plane_alloc,
        head_allocation=head_alloc,
    )


def effective_frequencies(spec: AngleSourceSpec, gates=None):
    """Gate-and-scale-adjusted (index, time) frequencies; broadcast over leading gate dims."""
    g = spec.gates if gates is None else np.asarray(gates, dtype=np.float64)
    f_index = (1.0 - g) * spec.index_scales * spec.index_omegas
    f_time = g * spec.time_scales * spec.time_omegas
    return f_index, f_time


def rotary_angles(indices, taus, f_index, f_time) -> np.ndarray:
    """theta[..., t, k] = i_t * f_index[k] + tau_t * f_time[k] (broadcasting)."""
    i = np.asarray(indices, dtype=np.float64)[..., None]
    t = np.asarray(taus, dtype=np.float64)[..., None]
    return i * f_index + t * f_time


def compute_angles(indices, taus, spec: AngleSourceSpec, head: int = 0) -> np.ndarray:
    """(T, N) rotation angles for one head under ``spec``."""
    indices = np.asarray(indices)
    taus = np.asarray(taus, dtype=np.float64)
    if indices.shape != taus.shape or indices.ndim != 1:
        raise InputError(
            f"indices {indices.shape} and taus {taus.shape} must be 1-D of equal length"
        )
    f_index, f_time = effective_frequencies(spec, spec.head_gates(head))
    return rotary_angles(indices, taus, f_index, f_time)


def rotate_pairs(vectors, angles) -> np.ndarray:
    """Rotate each (2k, 2k+1) channel pair by ``angles[..., k]``."""
    v = np.asarray(vectors)
    a = np.asarray(angles)
    if v.shape[-1] % 2:
        raise ConfigError(f"rotary width must be even, got {v.shape[-1]}")
    if a.shape[-1] != v.shape[-1] // 2:
        raise InputError(f"angles have {a.shape[-1]} planes, vectors need {v.shape[-1] // 2}")
    cos, sin = np.cos(a), np.sin(a)
    return apply_rotation(v, cos, sin)


def apply_rotation(v, cos, sin):
    """Rotate channel pairs given precomputed cos/sin of the angles."""
    even, odd = v[..., 0::2], v[..., 1::2]
    out = np.empty(np.broadcast_shapes(v.shape, cos.shape[:-1] + (v.shape[-1],)), dtype=np.result_type(v, cos))
    out[..., 0::2] = even * cos - odd * sin
    out[..., 1::2] = even * sin + odd * cos
    return out


# ---------------------------------------------------------------------------
# Diagnostics


def relative_phase_kernel(delta_i, delta_tau, spec: AngleSourceSpec, head: int = 0) -> np.ndarray:
    """cos of the per-plane relative phase for an (index gap, time gap) pair."""
    f_index, f_time = effective_frequencies(spec, spec.head_gates(head))
    return np.cos(delta_i * f_index + delta_tau * f_time)


def interference_decompose(a, b):
    """Split cos(a + b) into its constructive and interference parts.

    Returns ``(cos a cos b, sin a sin b, cos a cos b - sin a sin b)``.
    """
    constructive = np.cos(a) * np.cos(b)
    interference = np.sin(a) * np.sin(b)
    return constructive, interference, constructive - interference


def phase_sensitivities(delta_theta, omega_p, omega_t):
    """Derivatives of cos(delta_theta) w.r.t. the index gap and the time gap."""
    s = np.sin(delta_theta)
    return -omega_p * s, -omega_t * s


def default_banks(
    head_dim: int,
    index_base: float = 10000.0,
    time_bank: dict | None = None,
) -> tuple[FrequencyBank, FrequencyBank]:
    """Index ladder in base form; time ladder per ``time_bank`` recipe (tau units)."""
    index = build_base_bank(index_base, head_dim, source_unit="index")
    recipe = dict(time_bank or {"kind": "wavelength", "lambda_min": 1.0 / 24.0, "lambda_max": 365.0})
    kind = recipe.pop("kind", "wavelength")
    if kind == "base":
        time = build_base_bank(float(recipe.get("base", 1000.0)), head_dim, source_unit="tau")
    elif kind == "wavelength":
        time = build_wavelength_bank(
            float(recipe["lambda_min"]), float(recipe["lambda_max"]), head_dim // 2, source_unit="tau"
        )
    else:
        raise ConfigError(f"unknown time bank kind {kind!r}")
    return index, time


