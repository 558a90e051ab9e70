"""Experiment orchestration: YAML configs, the PE-arm grid, the capacity-ratio
sweep, attention analytics over trained cells, and deterministic export."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import platform
import time
from dataclasses import asdict, dataclass, field, fields
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from .attention import (
    INDEX_APE,
    RELATIVE_BIAS,
    ROTARY,
    SINUSOIDAL,
    TIME_APE,
    PEStrategy,
    relative_index_scheme,
    time_ape_scheme,
    time_gap_scheme,
)
from .data import (
    LEAVE_ONE_OUT,
    SPLIT_MODES,
    SynthConfig,
    five_core_filter,
    ingest_ratings,
    read_canonical,
    reindex_items,
    split_leave_one_out,
    synth_generate,
)
from .errors import ConfigError, InputError
from .metrics import aggregate_stats, per_user_attention, ranking_report
from .model import (
    ModelConfig,
    TrainState,
    config_hash,
    evaluate_next,
    evaluation_loss,
    load_checkpoint,
    prediction_batch,
    train,
)
from .rope import (
    EARLY_FUSION,
    INDEX_ONLY,
    SPLIT_BY_DIM,
    SPLIT_BY_HEAD,
    TIME_ONLY,
    TimeNormalization,
    default_banks,
    make_angle_spec,
)

# Arm name -> (PE kind, rotary variant, stacked time APE)
ARMS = {
    "index_ape": (INDEX_APE, None, False),
    "index_ape+time_ape": (INDEX_APE, None, True),
    "relative_bias": (RELATIVE_BIAS, None, False),
    "index_rope": (ROTARY, INDEX_ONLY, False),
    "time_rope": (ROTARY, TIME_ONLY, False),
    "index_rope+time_ape": (ROTARY, INDEX_ONLY, True),
    "early_fusion": (ROTARY, EARLY_FUSION, False),
    "split_head": (ROTARY, SPLIT_BY_HEAD, False),
    "split_dim": (ROTARY, SPLIT_BY_DIM, False),
    # extra baselines outside the main grid
    "sinusoidal_ape": (SINUSOIDAL, None, False),
    "time_ape": (TIME_APE, None, False),
}
GRID_ARMS = tuple(list(ARMS)[:9])
SPLIT_ARMS = ("split_dim", "split_head")
SENTINEL_REFERENCE = {0.0: "index_rope", 1.0: "time_rope"}


# ---------------------------------------------------------------- settings


@dataclass
class DatasetSpec:
    """``kind`` is synthetic (generator settings in ``synthetic``), ratings (a
    MovieLens csv at ``path``) or events (a canonical tsv at ``path``)."""

    kind: str = "synthetic"
    synthetic: dict = field(default_factory=dict)
    path: str | None = None
    five_core: bool = True
    split: str = LEAVE_ONE_OUT


@dataclass
class ModelSettings:
    d_model: int = 64
    n_heads: int = 4
    head_dim: int = 16
    n_layers: int = 2
    max_seq_len: int = 50
    dropout: float = 0.2
    learning_rate: float = 1e-3
    batch_size: int = 128
    epochs: int = 5
    dtype: str = "float64"


@dataclass
class RopeSettings:
    """Frequency banks and gate/scale options shared by every rotary arm.

    Time periods are given in days whatever ``time_unit_seconds`` is.
    """

    index_base: float = 10000.0
    time_bank: str = "wavelength"
    time_min_period_days: float = 1.0 / 24.0
    time_max_period_days: float = 365.0
    time_base: float = 1000.0
    time_unit_seconds: float = 86400.0
    split_ratio: float = 0.5
    gate_init: float = 0.5
    gates_learnable: bool = True
    scales_learnable: bool = False


@dataclass
class AnalysisSettings:
    n_users: int = 1000
    min_len: int = 20
    seed: int = 0


@dataclass
class ExperimentConfig:
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    model: ModelSettings = field(default_factory=ModelSettings)
    rope: RopeSettings = field(default_factory=RopeSettings)
    arms: list = field(default_factory=lambda: list(GRID_ARMS))
    ratios: list = field(default_factory=lambda: [0.1, 0.3, 0.5, 0.9])
    seeds: list = field(default_factory=lambda: [0])
    global_seed: int = 0
    ks: list = field(default_factory=lambda: [1, 5, 10, 20])
    exclude_history: bool = False
    output_dir: str | None = None
    analysis: AnalysisSettings = field(default_factory=AnalysisSettings)

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if not self.arms:
            raise ConfigError("at least one arm is required")
        bad = [a for a in self.arms if a not in ARMS]
        if bad:
            raise ConfigError(f"unknown arm(s) {', '.join(bad)}; valid arms: {', '.join(ARMS)}")
        if len(set(self.arms)) != len(self.arms):
            raise ConfigError("arms are listed more than once")
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        if len(set(self.seeds)) != len(self.seeds):
            raise ConfigError("seeds are listed more than once")
        if not self.ks or list(self.ks) != sorted(set(self.ks)) or self.ks[0] < 1:
            raise ConfigError(f"ks must be positive, ascending and distinct, got {self.ks}")
        for r in self.ratios:
            if not 0.0 <= r <= 1.0:
                raise ConfigError(f"split ratio {r} outside [0, 1]")
        if not 0.0 <= self.rope.split_ratio <= 1.0:
            raise ConfigError("rope.split_ratio must lie in [0, 1]")
        if self.dataset.kind not in ("synthetic", "ratings", "events"):
            raise ConfigError(f"dataset.kind must be synthetic, ratings or events, got {self.dataset.kind!r}")
        if self.dataset.kind != "synthetic" and not self.dataset.path:
            raise ConfigError(f"dataset.path is required for kind {self.dataset.kind}")
        if self.dataset.split not in SPLIT_MODES:
            raise ConfigError(f"dataset.split must be one of {SPLIT_MODES}")
        m = self.model
        if m.epochs < 0:
            raise ConfigError("model.epochs must be non-negative")
        if m.batch_size < 1 or m.learning_rate <= 0:
            raise ConfigError("model.batch_size and model.learning_rate must be positive")
        if self.rope.time_bank not in ("wavelength", "base"):
            raise ConfigError("rope.time_bank must be wavelength or base")
        if self.rope.time_unit_seconds <= 0:
            raise ConfigError("rope.time_unit_seconds must be positive")
        if self.dataset.kind == "synthetic":
            SynthConfig(**self.dataset.synthetic)

    def to_dict(self) -> dict:
        return asdict(self)

    @property
    def hash(self) -> str:
        return config_hash(self.to_dict())


# ---------------------------------------------------------------- YAML loading


def _marks(node, path=(), out=None) -> dict:
    """Map key paths to (line, column) of their values (1-based)."""
    out = {} if out is None else out
    out[path] = (node.start_mark.line + 1, node.start_mark.column + 1)
    if isinstance(node, yaml.MappingNode):
        for k, v in node.value:
            key = k.value
            out[path + (key,)] = (v.start_mark.line + 1, v.start_mark.column + 1)
            out[("key",) + path + (key,)] = (k.start_mark.line + 1, k.start_mark.column + 1)
            _marks(v, path + (key,), out)
    elif isinstance(node, yaml.SequenceNode):
        for i, v in enumerate(node.value):
            _marks(v, path + (i,), out)
    return out


_SECTIONS = {"dataset": DatasetSpec, "model": ModelSettings, "rope": RopeSettings, "analysis": AnalysisSettings}
_TYPES = {int: (int,), float: (int, float), bool: (bool,), str: (str,)}


def _check_type(value, target, where):
    if value is None:
        return value
    if target in (int, float) and isinstance(value, bool):
        raise ConfigError(f"{where}: expected {target.__name__}, got boolean")
    if target in _TYPES and not isinstance(value, _TYPES[target]):
        raise ConfigError(f"{where}: expected {target.__name__}, got {type(value).__name__}")
    return float(value) if target is float else value


def _hint(tp):
    return {"int": int, "float": float, "bool": bool, "str": str, "list": list, "dict": dict}.get(
        str(tp).split("|")[0].strip(), None
    )


def config_from_dict(data: dict, marks: dict | None = None, source: str = "<config>") -> ExperimentConfig:
    """Validate a plain dict (as parsed from YAML) into an ExperimentConfig."""
    marks = marks or {}

    def where(*path):
        line_col = marks.get(path) or marks.get(path[:-1]) or marks.get(())
        return f"{source}:{line_col[0]}:{line_col[1]}" if line_col else source

    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{where()}: top level must be a mapping")
    top = {f.name: f for f in fields(ExperimentConfig)}
    kwargs = {}
    for key, value in data.items():
        if key not in top:
            raise ConfigError(f"{where(key)}: unknown key {key!r}; expected one of {', '.join(top)}")
        if key in _SECTIONS:
            cls = _SECTIONS[key]
            if not isinstance(value, dict):
                raise ConfigError(f"{where(key)}: {key} must be a mapping")
            known = {f.name: f for f in fields(cls)}
            sub = {}
            for k, v in value.items():
                if k not in known:
                    raise ConfigError(f"{where(key, k)}: unknown key {key}.{k}; expected one of {', '.join(known)}")
                target = _hint(known[k].type)
                if target is dict and not isinstance(v, dict):
                    raise ConfigError(f"{where(key, k)}: {key}.{k} must be a mapping")
                sub[k] = v if target in (dict, list, None) else _check_type(v, target, where(key, k))
            kwargs[key] = sub
        elif key in ("arms", "ratios", "seeds", "ks"):
            if not isinstance(value, list):
                raise ConfigError(f"{where(key)}: {key} must be a list")
            item_type = {"arms": str, "ratios": float, "seeds": int, "ks": int}[key]
            kwargs[key] = [_check_type(v, item_type, where(key, i)) for i, v in enumerate(value)]
            if key == "arms":
                for i, arm in enumerate(kwargs[key]):
                    if arm not in ARMS:
                        raise ConfigError(f"{where(key, i)}: unknown arm {arm!r}; valid arms: {', '.join(ARMS)}")
        else:
            kwargs[key] = _check_type(value, _hint(top[key].type), where(key))
    try:
        sections = {k: _SECTIONS[k](**v) for k, v in kwargs.items() if k in _SECTIONS}
        rest = {k: v for k, v in kwargs.items() if k not in _SECTIONS}
        return ExperimentConfig(**sections, **rest)
    except ConfigError as exc:
        raise ConfigError(f"{source}: {exc}") from None


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} does not exist")
    text = path.read_text(encoding="utf-8")
    try:
        node = yaml.compose(text, Loader=yaml.SafeLoader)
        data = yaml.safe_load(text)
    except yaml.MarkedYAMLError as exc:
        mark = exc.problem_mark
        pos = f"{mark.line + 1}:{mark.column + 1}" if mark else "?"
        raise ConfigError(f"{path}:{pos}: {exc.problem}") from None
    marks = _marks(node) if node is not None else {}
    return config_from_dict(data, marks, str(path))


# ---------------------------------------------------------------- data


@dataclass
class PreparedData:
    split: object
    vocab_size: int
    norm: TimeNormalization
    tau_span: float
    item_raw_ids: np.ndarray | None = None
    synth: object = None


def prepare_data(cfg: ExperimentConfig) -> PreparedData:
    """Load or generate the event sequences and split them once for every cell."""
    ds = cfg.dataset
    raw_ids = synth = None
    if ds.kind == "synthetic":
        synth = synth_generate(SynthConfig(**ds.synthetic))
        seqs = synth.sequences
        vocab = synth.config.vocab_size
    else:
        if ds.kind == "ratings":
            corpus = ingest_ratings(ds.path)
            seqs, raw_ids = corpus.sequences, corpus.item_raw_ids
        else:
            seqs = read_canonical(ds.path)
        if ds.five_core:
            seqs = five_core_filter(seqs)
        seqs, used = reindex_items(seqs)
        raw_ids = used if raw_ids is None else raw_ids[used]
        vocab = int(used.size)
    if not seqs:
        raise InputError("dataset is empty after filtering")
    split = split_leave_one_out(seqs, ds.split)
    if not len(split):
        raise InputError("no user survives the split")
    u_ref = split.earliest_train_timestamp()
    s = cfg.rope.time_unit_seconds
    last = max(int(t.raw_timestamps[-1]) for t in split.train if t.length)
    return PreparedData(split, vocab, TimeNormalization(u_ref, s), (last - u_ref) / s, raw_ids, synth)


# ---------------------------------------------------------------- arms and cells


def cell_seed(global_seed: int, arm: str, ratio, replicate: int) -> int:
    """Stable 63-bit seed from (global seed, arm, ratio, replicate)."""
    r = "" if ratio is None else repr(float(ratio))
    digest = hashlib.sha256(f"{global_seed}|{arm}|{r}|{replicate}".encode()).digest()
    return int.from_bytes(digest[:8], "big") >> 1


def build_strategy(arm: str, ratio, rope: RopeSettings, model: ModelSettings, tau_span: float) -> PEStrategy:
    if arm not in ARMS:
        raise ConfigError(f"unknown arm {arm!r}; valid arms: {', '.join(ARMS)}")
    kind, variant, time_ape = ARMS[arm]
    day = 86400.0 / rope.time_unit_seconds  # one day in tau units
    time_buckets = time_ape_scheme(tau_span) if (time_ape or kind == TIME_APE) else None
    if kind == RELATIVE_BIAS:
        return PEStrategy(
            kind,
            index_buckets=relative_index_scheme(model.max_seq_len),
            gap_buckets=time_gap_scheme(smallest=day / 1440.0, largest=180.0 * day),
        )
    if kind != ROTARY:
        return PEStrategy(kind, time_buckets=time_buckets, add_time_ape=time_ape and kind != TIME_APE)
    if rope.time_bank == "wavelength":
        recipe = {
            "kind": "wavelength",
            "lambda_min": rope.time_min_period_days * day,
            "lambda_max": rope.time_max_period_days * day,
        }
    else:
        recipe = {"kind": "base", "base": rope.time_base}
    index_bank, time_bank = default_banks(model.head_dim, rope.index_base, recipe)
    if variant in (SPLIT_BY_DIM, SPLIT_BY_HEAD) and ratio is None:
        ratio = rope.split_ratio
    spec = make_angle_spec(
        variant,
        index_bank,
        time_bank,
        rho=ratio,
        n_heads=model.n_heads,
        gate=rope.gate_init,
        gates_learnable=rope.gates_learnable if variant == EARLY_FUSION else False,
        scales_learnable=rope.scales_learnable,
    )
    return PEStrategy(ROTARY, angles=spec, time_buckets=time_buckets, add_time_ape=time_ape)


def cell_payload(cfg: ExperimentConfig, data: PreparedData, arm: str, ratio, seed: int) -> dict:
    """Everything needed to rebuild a cell's ModelConfig (stored in checkpoints)."""
    return {
        "arm": arm,
        "ratio": ratio,
        "seed": seed,
        "cell_seed": cell_seed(cfg.global_seed, arm, ratio, seed),
        "model": asdict(cfg.model),
        "rope": asdict(cfg.rope),
        "vocab_size": data.vocab_size,
        "u_ref": data.norm.u_ref,
        "tau_span": data.tau_span,
        "experiment_hash": cfg.hash,
    }


def model_config_from_payload(p: dict) -> ModelConfig:
    m = ModelSettings(**p["model"])
    rope = RopeSettings(**p["rope"])
    strategy = build_strategy(p["arm"], p["ratio"], rope, m, p["tau_span"])
    return ModelConfig(
        vocab_size=p["vocab_size"],
        pe_strategy=strategy,
        d_model=m.d_model,
        n_heads=m.n_heads,
        head_dim=m.head_dim,
        n_layers=m.n_layers,
        max_seq_len=m.max_seq_len,
        dropout_rate=m.dropout,
        seed=p["seed"],
        pe_seed=p["cell_seed"],
        learning_rate=m.learning_rate,
        batch_size=m.batch_size,
        time_norm=TimeNormalization(p["u_ref"], rope.time_unit_seconds),
        dtype=m.dtype,
    )


@dataclass
class Cell:
    arm: str
    ratio: float | None
    seed: int

    @property
    def key(self):
        return (self.arm, -1.0 if self.ratio is None else self.ratio, self.seed)


@dataclass
class CellOutcome:
    row: dict
    state: TrainState
    payload: dict
    seconds: float
    history: list


def run_cell(cfg: ExperimentConfig, data: PreparedData, cell: Cell, log=None) -> CellOutcome:
    """Train and evaluate one (arm, ratio, seed) cell."""
    t0 = time.perf_counter()
    payload = cell_payload(cfg, data, cell.arm, cell.ratio, cell.seed)
    mc = model_config_from_payload(payload)
    state, history = train(data.split, mc, cfg.model.epochs, log=log)
    if history and history[-1].val_loss is not None:
        val_loss = history[-1].val_loss
    else:
        val_loss = evaluation_loss(state, *data.split.validation_pairs())
    test_ctx, test_tgt = data.split.test_pairs()
    test_loss, ranks = evaluate_next(state, test_ctx, test_tgt, max(cfg.ks), exclude_history=cfg.exclude_history)
    report = ranking_report(ranks, test_tgt, cfg.ks)
    row = {
        "arm": cell.arm,
        "ratio": cell.ratio,
        "seed": cell.seed,
        "cell_seed": payload["cell_seed"],
        "epochs": cfg.model.epochs,
        "n_params": state.parameter_count(),
        "train_loss": history[-1].train_loss if history else float("nan"),
        "val_loss": val_loss,
        "test_loss": test_loss,
        "n_users": report.n_users,
    }
    for k in cfg.ks:
        row[f"hr@{k}"] = report.hr[k]
    for k in cfg.ks:
        row[f"ndcg@{k}"] = report.ndcg[k]
    return CellOutcome(row, state, payload, time.perf_counter() - t0, history)


def result_columns(ks) -> list:
    base = ["arm", "ratio", "seed", "cell_seed", "epochs", "n_params", "train_loss", "val_loss", "test_loss", "n_users"]
    return base + [f"hr@{k}" for k in ks] + [f"ndcg@{k}" for k in ks]


def summarize(rows, ks) -> list:
    """Mean and sample standard deviation (0 for a single seed) per (arm, ratio)."""
    metrics = ["train_loss", "val_loss", "test_loss"] + [f"hr@{k}" for k in ks] + [f"ndcg@{k}" for k in ks]
    groups = {}
    for r in rows:
        groups.setdefault((r["arm"], r["ratio"]), []).append(r)
    out = []
    for (arm, ratio), rs in sorted(groups.items(), key=lambda kv: (kv[0][0], -1.0 if kv[0][1] is None else kv[0][1])):
        row = {"arm": arm, "ratio": ratio, "n_seeds": len(rs)}
        for m in metrics:
            vals = np.array([r[m] for r in rs], dtype=np.float64)
            row[f"{m}_mean"] = float(vals.mean())
            row[f"{m}_std"] = float(vals.std(ddof=1)) if vals.size > 1 else 0.0
        out.append(row)
    return out


def summary_columns(ks) -> list:
    metrics = ["train_loss", "val_loss", "test_loss"] + [f"hr@{k}" for k in ks] + [f"ndcg@{k}" for k in ks]
    return ["arm", "ratio", "n_seeds"] + [f"{m}_{s}" for m in metrics for s in ("mean", "std")]


@dataclass
class ExperimentResult:
    rows: list
    summary: list
    outcomes: dict
    data: PreparedData
    files: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)


def _run_cells(cfg, data, cells, keep_states, log):
    outcomes = {}
    for cell in sorted(cells, key=lambda c: c.key):
        if log:
            log(f"cell arm={cell.arm} ratio={cell.ratio} seed={cell.seed}")
        out = run_cell(cfg, data, cell)
        if not keep_states:
            out.state = None
        outcomes[cell.key] = out
    return outcomes


def run_experiment(cfg: ExperimentConfig, *, data: PreparedData | None = None, keep_states=False, log=None):
    """Train and evaluate every (arm, seed) cell; split arms use ``rope.split_ratio``."""
    started = time.time()
    data = data or prepare_data(cfg)
    cells = [
        Cell(arm, cfg.rope.split_ratio if arm in SPLIT_ARMS else None, seed) for arm in cfg.arms for seed in cfg.seeds
    ]
    outcomes = _run_cells(cfg, data, cells, keep_states, log)
    rows = [o.row for o in outcomes.values()]
    result = ExperimentResult(rows, summarize(rows, cfg.ks), outcomes, data)
    if cfg.output_dir:
        _write_outputs(cfg, result, started)
    return result


def sweep_ratios(cfg: ExperimentConfig, *, data: PreparedData | None = None, keep_states=False, log=None):
    """Split arms over ``ratios`` plus the 0 and 1 sentinels, next to the
    index-only and time-only reference arms the sentinels reduce to."""
    started = time.time()
    bad = [a for a in cfg.arms if a not in SPLIT_ARMS]
    if bad:
        raise ConfigError(f"sweep only takes split arms ({', '.join(SPLIT_ARMS)}); got {', '.join(bad)}")
    data = data or prepare_data(cfg)
    ratios = sorted({float(r) for r in cfg.ratios} | set(SENTINEL_REFERENCE))
    cells = [Cell(arm, r, s) for arm in cfg.arms for r in ratios for s in cfg.seeds]
    cells += [Cell(ref, None, s) for ref in SENTINEL_REFERENCE.values() for s in cfg.seeds]
    outcomes = _run_cells(cfg, data, cells, keep_states, log)
    rows = [o.row for o in outcomes.values()]
    result = ExperimentResult(rows, summarize(rows, cfg.ks), outcomes, data)
    result.extra["sentinels"] = sentinel_rows(rows, cfg.model.dropout)
    if cfg.output_dir:
        _write_outputs(cfg, result, started)
    return result


def sentinel_rows(rows, dropout: float) -> list:
    """Compare ratio-0/1 split rows against the single-source reference arms."""
    by_key = {(r["arm"], r["ratio"], r["seed"]): r for r in rows}
    out = []
    for r in rows:
        if r["arm"] not in SPLIT_ARMS or r["ratio"] not in SENTINEL_REFERENCE:
            continue
        ref_arm = SENTINEL_REFERENCE[r["ratio"]]
        ref = by_key.get((ref_arm, None, r["seed"]))
        if ref is None:
            continue
        dv = abs(r["val_loss"] - ref["val_loss"])
        dt = abs(r["test_loss"] - ref["test_loss"])
        out.append(
            {
                "arm": r["arm"],
                "ratio": r["ratio"],
                "seed": r["seed"],
                "reference": ref_arm,
                "abs_diff_val_loss": dv,
                "abs_diff_test_loss": dt,
                "match": ("yes" if max(dv, dt) <= 1e-9 else "no") if dropout == 0 else "n/a",
            }
        )
    return out


SENTINEL_COLUMNS = ["arm", "ratio", "seed", "reference", "abs_diff_val_loss", "abs_diff_test_loss", "match"]


# ---------------------------------------------------------------- attention analytics

ANALYSIS_COLUMNS = ["arm", "ratio", "seed", "layer", "distance", "entropy", "n_users", "n_eligible"]


def attention_rows(state: TrainState, data: PreparedData, settings: AnalysisSettings, arm, ratio, seed, batch_size=256):
    """Per-layer mean attention distance/entropy over sampled users' latest windows."""
    contexts, _ = data.split.test_pairs()
    lengths = np.array([c.length for c in contexts])
    eligible = np.flatnonzero(lengths >= settings.min_len)
    if eligible.size == 0:
        raise InputError(f"no user has at least {settings.min_len} events")
    if eligible.size > settings.n_users:
        pick = np.sort(np.random.default_rng(settings.seed).choice(eligible, settings.n_users, replace=False))
    else:
        pick = eligible
    model = state.model
    c = state.config
    dist, ent = [], []
    for lo in range(0, pick.size, batch_size):
        chunk = [contexts[i] for i in pick[lo : lo + batch_size]]
        batch = prediction_batch(chunk, c.max_seq_len, c.time_norm)
        res = model.forward(state.params, batch, capture=True, keep_cache=False)
        d, e = per_user_attention(res.trace)
        dist.append(d)
        ent.append(e)
    dist, ent = np.concatenate(dist), np.concatenate(ent)
    stats = aggregate_stats(dist, ent, lengths[pick], n_users=pick.size, min_len=settings.min_len, seed=settings.seed)
    return [
        {
            "arm": arm,
            "ratio": ratio,
            "seed": seed,
            "layer": layer,
            "distance": float(stats.distance[layer]),
            "entropy": float(stats.entropy[layer]),
            "n_users": stats.n_users,
            "n_eligible": int(eligible.size),
        }
        for layer in range(stats.n_layers)
    ]


def analyze_attention(cfg: ExperimentConfig, checkpoints, *, data: PreparedData | None = None) -> list:
    """Attention stats for trained cells; ``checkpoints`` holds paths or
    (arm, ratio, seed, TrainState) tuples."""
    data = data or prepare_data(cfg)
    rows = []
    for item in checkpoints:
        if isinstance(item, tuple):
            arm, ratio, seed, state = item
        else:
            state, meta = load_checkpoint(item, model_config_from_payload)
            p = meta["config"]
            arm, ratio, seed = p["arm"], p["ratio"], p["seed"]
        rows.extend(attention_rows(state, data, cfg.analysis, arm, ratio, seed))
    rows.sort(key=lambda r: (r["arm"], -1.0 if r["ratio"] is None else r["ratio"], r["seed"], r["layer"]))
    return rows


# ---------------------------------------------------------------- export


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        if math.isnan(v):
            return "nan"
        return f"{float(v):.6f}"
    return str(v)


def format_table(rows, columns, sep: str = ",") -> str:
    """Header plus one line per row, fixed column order, floats to 6 decimals."""
    buf = io.StringIO()
    writer = csv.writer(buf, delimiter=sep, lineterminator="\n")
    writer.writerow(columns)
    for r in rows:
        missing = [c for c in columns if c not in r]
        if missing:
            raise InputError(f"row lacks column(s) {', '.join(missing)}")
        writer.writerow([_fmt(r[c]) for c in columns])
    return buf.getvalue()


def export_results(rows, path, columns=None, sep: str = ",") -> str:
    """Write the table to ``path``; returns the sha256 of the bytes written."""
    rows = list(rows)
    if columns is None:
        if not rows:
            raise InputError("cannot infer columns from an empty row set; pass columns")
        columns = list(rows[0])
    text = format_table(rows, columns, sep).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(text)
    return hashlib.sha256(text).hexdigest()


def write_manifest(path, cfg: ExperimentConfig, files: dict, started: float, cells=None, extra=None) -> None:
    manifest = {
        "library": "torope",
        "library_version": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "config_hash": cfg.hash,
        "config": cfg.to_dict(),
        "seeds": list(cfg.seeds),
        "global_seed": cfg.global_seed,
        "cells": cells or [],
        "outputs": files,
        "started_utc": datetime.fromtimestamp(started, tz=timezone.utc).isoformat(),
        "wall_clock_seconds": round(time.time() - started, 3),
    }
    if "relative_bias" in cfg.arms:
        manifest["relative_bias_buckets"] = (
            "substitute scheme: 32 index-distance buckets (exact to 8, then log-spaced) "
            "and 32 log-spaced time-gap buckets from 1 minute to 180 days"
        )
    if extra:
        manifest.update(extra)
    Path(path).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _write_outputs(cfg: ExperimentConfig, result: ExperimentResult, started: float) -> None:
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = {
        "results.csv": export_results(result.rows, out / "results.csv", result_columns(cfg.ks)),
        "summary.csv": export_results(result.summary, out / "summary.csv", summary_columns(cfg.ks)),
    }
    if "sentinels" in result.extra:
        files["sentinels.csv"] = export_results(result.extra["sentinels"], out / "sentinels.csv", SENTINEL_COLUMNS)
    (out / "cells.json").write_text(json.dumps(result.rows, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    cells = [
        {"arm": o.row["arm"], "ratio": o.row["ratio"], "seed": o.row["seed"], "cell_seed": o.row["cell_seed"], "seconds": round(o.seconds, 3)}
        for o in result.outcomes.values()
    ]
    write_manifest(out / "manifest.json", cfg, files, started, cells)
    result.files = files
