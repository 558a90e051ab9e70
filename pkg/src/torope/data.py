"""Event-stream datasets: a synthetic temporal-pattern generator, MovieLens
ingestion, k-core filtering, per-user splits and the canonical on-disk form.

Calendar slots (weekday, hour) are always computed in UTC from epoch seconds.
"""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError, InputError
from .rope import EventSequence

SECONDS_PER_DAY = 86400
WEEKDAYS = ("monday", "tuesday", "wednesday", "thursday", "friday", "saturday", "sunday")
# 2024-01-01 00:00:00 UTC, a Monday
DEFAULT_START = 1704067200

LEAVE_ONE_OUT = "leave_one_out"
LAST_DAY = "last_day"
SPLIT_MODES = (LEAVE_ONE_OUT, LAST_DAY)


def weekday(ts) -> np.ndarray:
    """UTC weekday of epoch seconds, Monday = 0."""
    return (np.asarray(ts, dtype=np.int64) // SECONDS_PER_DAY + 3) % 7


def day_index(ts) -> np.ndarray:
    """UTC calendar day number (days since the epoch)."""
    return np.asarray(ts, dtype=np.int64) // SECONDS_PER_DAY


def _weekday_key(key) -> int:
    if isinstance(key, str):
        k = key.strip().lower()
        for i, name in enumerate(WEEKDAYS):
            if k == name or k == name[:3]:
                return i
        if not k.lstrip("-").isdigit():
            raise ConfigError(f"unknown weekday {key!r}")
        key = int(k)
    if isinstance(key, bool) or not isinstance(key, (int, np.integer)) or not 0 <= key < 7:
        raise ConfigError(f"weekday must be 0..6 (Monday = 0) or a day name, got {key!r}")
    return int(key)


def default_periodic_rule() -> dict:
    return {d: d for d in range(7)}


@dataclass(frozen=True)
class SynthConfig:
    """Knobs of the synthetic behaviour generator.

    Users have at most one session per UTC day (each day is active with
    probability ``session_rate``). A session starts inside ``active_hours``,
    holds ``session_length_range`` events (inclusive) separated by
    ``intra_session_gap_seconds_range`` seconds, and is labelled with the class
    that ``periodic_rule`` assigns to its weekday. ``long_range_rule`` is
    ``(interval_days, return_prob)``: once ``interval_days`` have passed since
    a user's last franchise session, a new session is a franchise session with
    probability ``return_prob``. Inside a session each event follows the
    session class with probability ``focus``; otherwise it is a stray pick
    from the whole catalogue.
    """

    n_users: int = 5000
    vocab_size: int = 500
    n_item_classes: int = 10
    session_rate: float = 0.4
    session_length_range: tuple = (2, 8)
    intra_session_gap_seconds_range: tuple = (30, 600)
    periodic_rule: dict = field(default_factory=default_periodic_rule)
    long_range_rule: tuple = (14.0, 0.5)
    horizon_days: int = 56
    seed: int = 0
    focus: float = 0.8
    active_hours: tuple = (8, 20)
    start_epoch: int = DEFAULT_START
    popularity_exponent: float = 1.0

    def __post_init__(self):
        rule = {_weekday_key(k): v for k, v in dict(self.periodic_rule).items()}
        object.__setattr__(self, "periodic_rule", rule)
        object.__setattr__(self, "session_length_range", tuple(int(v) for v in self.session_length_range))
        object.__setattr__(
            self, "intra_session_gap_seconds_range", tuple(int(v) for v in self.intra_session_gap_seconds_range)
        )
        object.__setattr__(self, "long_range_rule", tuple(float(v) for v in self.long_range_rule))
        object.__setattr__(self, "active_hours", tuple(int(v) for v in self.active_hours))
        self.validate()

    def validate(self) -> None:
        if self.n_users < 1:
            raise ConfigError("n_users must be at least 1")
        if self.n_item_classes < 1 or self.vocab_size < self.n_item_classes:
            raise ConfigError("need 1 <= n_item_classes <= vocab_size")
        if self.vocab_size % self.n_item_classes:
            raise ConfigError(
                f"vocab_size {self.vocab_size} is not divisible into {self.n_item_classes} classes"
            )
        if not 0.0 < self.session_rate <= 1.0:
            raise ConfigError(
                f"session_rate must be in (0, 1] (at most one session per day), got {self.session_rate}"
            )
        if self.horizon_days < 1:
            raise ConfigError("horizon_days must be at least 1")
        lo, hi = self.session_length_range
        if len(self.session_length_range) != 2 or not 1 <= lo <= hi:
            raise ConfigError(f"session_length_range must be (lo, hi) with 1 <= lo <= hi, got {self.session_length_range}")
        glo, ghi = self.intra_session_gap_seconds_range
        if not 1 <= glo <= ghi:
            raise ConfigError(f"intra-session gaps must satisfy 1 <= lo <= hi, got {self.intra_session_gap_seconds_range}")
        h0, h1 = self.active_hours
        if not 0 <= h0 < h1 <= 24:
            raise ConfigError(f"active_hours must satisfy 0 <= start < end <= 24, got {self.active_hours}")
        if h1 * 3600 + (hi - 1) * ghi >= SECONDS_PER_DAY:
            raise ConfigError("a session may run past midnight; shorten sessions or active_hours")
        if ghi >= (24 - h1 + h0) * 3600:
            raise ConfigError("intra-session gaps must be shorter than the overnight gap")
        interval, prob = self.long_range_rule
        if interval < 0 or not 0.0 <= prob <= 1.0:
            raise ConfigError(f"long_range_rule needs interval >= 0 and probability in [0, 1], got {self.long_range_rule}")
        if not 0.0 <= self.focus <= 1.0:
            raise ConfigError("focus must be a probability")
        for day, cls in self.periodic_rule.items():
            if not 0 <= cls < self.n_item_classes:
                raise ConfigError(f"periodic_rule maps weekday {day} to class {cls}, outside [0, {self.n_item_classes})")
        if self.start_epoch < 0 or self.start_epoch % SECONDS_PER_DAY:
            raise ConfigError("start_epoch must be a non-negative UTC midnight")

    @property
    def class_size(self) -> int:
        return self.vocab_size // self.n_item_classes

    def item_class(self, items) -> np.ndarray:
        return np.asarray(items, dtype=np.int64) // self.class_size


@dataclass
class SynthData:
    """Generated sequences plus per-event ground truth.

    ``classes[u][i]`` is the class of event i, ``sessions[u][i]`` its session
    number within the user, ``governed[u][i]`` whether its class was set by the
    periodic rule (False for franchise sessions and stray picks).
    """

    sequences: list
    classes: list
    sessions: list
    governed: list
    franchise: np.ndarray
    config: SynthConfig


def synth_generate(cfg: SynthConfig) -> SynthData:
    """Deterministic per ``cfg.seed``."""
    rng = np.random.default_rng(cfg.seed)
    m = cfg.class_size
    C = cfg.n_item_classes
    ranks = np.arange(1, m + 1, dtype=float) ** -cfg.popularity_exponent
    pick_p = ranks / ranks.sum()
    lo, hi = cfg.session_length_range
    glo, ghi = cfg.intra_session_gap_seconds_range
    interval, return_prob = cfg.long_range_rule
    h0, h1 = cfg.active_hours
    rule_classes = set(cfg.periodic_rule.values())
    franchise_pool = np.array([c for c in range(C) if c not in rule_classes] or list(range(C)))
    # each user ranks items of a class differently: a per-user rotation of a shared popularity ladder
    offsets = rng.integers(0, m, size=(cfg.n_users, C))
    franchise = rng.choice(franchise_pool, size=cfg.n_users)

    sequences, classes, sessions, governed = [], [], [], []
    for u in range(cfg.n_users):
        days = np.flatnonzero(rng.random(cfg.horizon_days) < cfg.session_rate)
        if days.size == 0:
            days = np.array([rng.integers(cfg.horizon_days)])
        items, ts, cl, sid, gov = [], [], [], [], []
        last_franchise = -math.inf
        for s, d in enumerate(days):
            day_start = cfg.start_epoch + int(d) * SECONDS_PER_DAY
            wd = int(weekday(day_start))
            if d - last_franchise >= interval and rng.random() < return_prob:
                cls, by_rule = int(franchise[u]), False
                last_franchise = d
            elif wd in cfg.periodic_rule:
                cls, by_rule = cfg.periodic_rule[wd], True
            else:
                cls, by_rule = int(rng.integers(C)), False
            n = int(rng.integers(lo, hi + 1))
            start = day_start + int(rng.integers(h0 * 3600, h1 * 3600))
            gaps = rng.integers(glo, ghi + 1, size=n - 1)
            times = start + np.concatenate([[0], np.cumsum(gaps)])
            on_class = rng.random(n) < cfg.focus
            picks = rng.choice(m, size=n, p=pick_p)
            in_class = cls * m + (picks + offsets[u, cls]) % m
            stray = rng.integers(0, cfg.vocab_size, size=n)
            ev = np.where(on_class, in_class, stray)
            items.append(ev)
            ts.append(times)
            cl.append(ev // m)
            sid.append(np.full(n, s))
            gov.append(on_class & by_rule)
        sequences.append(EventSequence(np.concatenate(items), np.concatenate(ts), user=u))
        classes.append(np.concatenate(cl))
        sessions.append(np.concatenate(sid))
        governed.append(np.concatenate(gov))
    return SynthData(sequences, classes, sessions, governed, franchise, cfg)


# ---------------------------------------------------------------- ingestion


@dataclass
class Corpus:
    """Ingested sequences with the raw-id tables needed to map back.

    ``item_raw_ids[dense]`` is the original movieId; users keep their raw id in
    ``EventSequence.user``.
    """

    sequences: list
    item_raw_ids: np.ndarray

    def __len__(self):
        return len(self.sequences)


def _parse_int(text, what, line):
    try:
        return int(text)
    except ValueError:
        raise DataError(f"line {line}: {what} {text!r} is not an integer") from None


def ingest_ratings(path) -> Corpus:
    """Read a MovieLens ratings file (userId,movieId,rating,timestamp).

    Events are grouped by user (ascending raw user id) and stably sorted by
    timestamp, so ties keep file order. Item ids become dense 0-based ids in
    ascending raw-id order. Rating values are checked for syntax and dropped.
    """
    path = Path(path)
    users, movies, stamps = [], [], []
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise InputError(f"{path}: empty file")
        if [h.strip() for h in header] != ["userId", "movieId", "rating", "timestamp"]:
            raise DataError(f"line 1: expected header userId,movieId,rating,timestamp, got {','.join(header)}")
        for row in reader:
            line = reader.line_num
            if not row:
                continue
            if len(row) != 4:
                raise DataError(f"line {line}: expected 4 fields, got {len(row)}")
            users.append(_parse_int(row[0], "userId", line))
            movies.append(_parse_int(row[1], "movieId", line))
            try:
                float(row[2])
            except ValueError:
                raise DataError(f"line {line}: rating {row[2]!r} is not a number") from None
            t = _parse_int(row[3], "timestamp", line)
            if t < 0:
                raise DataError(f"line {line}: negative timestamp {t}")
            stamps.append(t)
    if not users:
        raise InputError(f"{path}: no rating rows")
    users = np.array(users, dtype=np.int64)
    movies = np.array(movies, dtype=np.int64)
    stamps = np.array(stamps, dtype=np.int64)
    raw_items, dense = np.unique(movies, return_inverse=True)
    # user, then timestamp, then file position
    order = np.lexsort((np.arange(users.size), stamps, users))
    return Corpus(_group(users[order], dense[order], stamps[order]), raw_items)


def _group(users, items, stamps) -> list:
    cuts = np.flatnonzero(np.diff(users)) + 1
    starts = np.concatenate([[0], cuts])
    ends = np.concatenate([cuts, [users.size]])
    return [EventSequence(items[a:b], stamps[a:b], user=int(users[a])) for a, b in zip(starts, ends)]


def five_core_filter(sequences, k: int = 5) -> list:
    """Drop users with fewer than ``k`` events and items with fewer than ``k``
    occurrences, repeatedly, until neither rule removes anything.

    Order of users and of events within users is preserved.
    """
    seqs = list(sequences)
    while True:
        if not seqs:
            return []
        all_items = np.concatenate([s.item_ids for s in seqs])
        counts = np.bincount(all_items) if all_items.size else np.zeros(0, dtype=np.int64)
        rare = counts < k
        changed = False
        kept = []
        for s in seqs:
            mask = ~rare[s.item_ids]
            if not mask.all():
                changed = True
                s = EventSequence(s.item_ids[mask], s.raw_timestamps[mask], user=s.user)
            if s.length >= k:
                kept.append(s)
            else:
                changed = True
        seqs = kept
        if not changed:
            return seqs


def reindex_items(sequences):
    """Map the item ids in use onto 0..n-1 (ascending); returns (sequences, old_ids)."""
    used = np.unique(np.concatenate([s.item_ids for s in sequences])) if sequences else np.zeros(0, np.int64)
    out = [EventSequence(np.searchsorted(used, s.item_ids), s.raw_timestamps, user=s.user) for s in sequences]
    return out, used


# ---------------------------------------------------------------- splits


@dataclass
class DatasetSplit:
    """Per-user train / validation / test event blocks (aligned lists).

    ``rule`` is the split mode; ``dropped`` counts users that were too short.
    """

    train: list
    validation: list
    test: list
    rule: str = LEAVE_ONE_OUT
    dropped: int = 0

    def __len__(self):
        return len(self.train)

    @property
    def users(self) -> list:
        return [s.user for s in self.train]

    def train_sequences(self) -> list:
        return self.train

    @staticmethod
    def _pairs(prefixes, held):
        contexts, targets = [], []
        for pre, h in zip(prefixes, held):
            items = np.concatenate([pre.item_ids, h.item_ids])
            ts = np.concatenate([pre.raw_timestamps, h.raw_timestamps])
            for j in range(h.length):
                n = pre.length + j
                contexts.append(EventSequence(items[:n], ts[:n], user=pre.user))
                targets.append(int(h.item_ids[j]))
        return contexts, np.array(targets, dtype=np.int64)

    def validation_pairs(self):
        """(contexts, targets): each validation event with all earlier train events."""
        return self._pairs(self.train, self.validation)

    def test_pairs(self):
        """(contexts, targets): each test event with every earlier event."""
        prefixes = [_concat(a, b) for a, b in zip(self.train, self.validation)]
        return self._pairs(prefixes, self.test)

    def earliest_train_timestamp(self) -> int:
        starts = [int(s.raw_timestamps[0]) for s in self.train if s.length]
        if not starts:
            raise InputError("split has no training events")
        return min(starts)


def _concat(a: EventSequence, b: EventSequence) -> EventSequence:
    return EventSequence(
        np.concatenate([a.item_ids, b.item_ids]),
        np.concatenate([a.raw_timestamps, b.raw_timestamps]),
        user=a.user,
    )


def split_leave_one_out(sequences, mode: str = LEAVE_ONE_OUT) -> DatasetSplit:
    """Per user: last event (or last UTC day) to test, the one before to
    validation, the rest to train. Users that cannot fill all three blocks are
    dropped and counted (and a warning is issued when any are)."""
    if mode not in SPLIT_MODES:
        raise ConfigError(f"unknown split mode {mode!r}; valid: {', '.join(SPLIT_MODES)}")
    train, val, test = [], [], []
    dropped = 0
    for s in sequences:
        if mode == LEAVE_ONE_OUT:
            if s.length < 3:
                dropped += 1
                continue
            a, b = s.length - 2, s.length - 1
        else:
            days = day_index(s.raw_timestamps)
            distinct = np.unique(days)
            if distinct.size < 3:
                dropped += 1
                continue
            a = int(np.searchsorted(days, distinct[-2]))
            b = int(np.searchsorted(days, distinct[-1]))
        train.append(s.slice(0, a))
        val.append(s.slice(a, b))
        test.append(s.slice(b, s.length))
    if dropped:
        warnings.warn(f"split dropped {dropped} user(s) too short for {mode}", stacklevel=2)
    return DatasetSplit(train, val, test, mode, dropped)


# ---------------------------------------------------------------- canonical files

CANONICAL_HEADER = "user\titem\ttimestamp\n"
ID_MAP_HEADER = "raw_id\tdense_id\n"


def write_canonical(sequences, path) -> None:
    """One event per line, tab-separated (user, item, epoch seconds), users
    ascending and events in sequence order; LF line endings, header first."""
    seqs = sorted(sequences, key=lambda s: s.user)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(CANONICAL_HEADER)
        for s in seqs:
            u = int(s.user)
            fh.writelines(f"{u}\t{i}\t{t}\n" for i, t in zip(s.item_ids.tolist(), s.raw_timestamps.tolist()))


def read_canonical(path, repair: bool = False) -> list:
    """Inverse of ``write_canonical``. Out-of-order timestamps within a user
    are rejected unless ``repair`` (stable sort by timestamp)."""
    with open(path, encoding="utf-8", newline="") as fh:
        header = fh.readline()
        if header != CANONICAL_HEADER:
            raise DataError(f"{path}: line 1: expected header {CANONICAL_HEADER.strip()!r}")
        users, items, stamps = [], [], []
        for line_no, line in enumerate(fh, start=2):
            parts = line.rstrip("\n").split("\t")
            if len(parts) != 3:
                raise DataError(f"{path}: line {line_no}: expected 3 tab-separated fields")
            users.append(_parse_int(parts[0], "user", line_no))
            items.append(_parse_int(parts[1], "item", line_no))
            stamps.append(_parse_int(parts[2], "timestamp", line_no))
    users = np.array(users, dtype=np.int64)
    items = np.array(items, dtype=np.int64)
    stamps = np.array(stamps, dtype=np.int64)
    if users.size and np.any(np.diff(users) < 0):
        raise DataError(f"{path}: users are not in ascending order")
    out = []
    for s in _group_raw(users, items, stamps):
        u, it, ts = s
        if np.any(np.diff(ts) < 0):
            if not repair:
                raise DataError(f"{path}: timestamps for user {u} are out of order (use repair mode)")
            out.append(EventSequence.sorted_from(it, ts, user=u))
        else:
            out.append(EventSequence(it, ts, user=u))
    return out


def _group_raw(users, items, stamps):
    if not users.size:
        return []
    cuts = np.flatnonzero(np.diff(users)) + 1
    starts = np.concatenate([[0], cuts])
    ends = np.concatenate([cuts, [users.size]])
    return [(int(users[a]), items[a:b], stamps[a:b]) for a, b in zip(starts, ends)]


def write_id_map(raw_ids, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(ID_MAP_HEADER)
        fh.writelines(f"{int(r)}\t{d}\n" for d, r in enumerate(raw_ids))


def read_id_map(path) -> np.ndarray:
    with open(path, encoding="utf-8", newline="") as fh:
        if fh.readline() != ID_MAP_HEADER:
            raise DataError(f"{path}: line 1: expected header {ID_MAP_HEADER.strip()!r}")
        raw = []
        for line_no, line in enumerate(fh, start=2):
            parts = line.rstrip("\n").split("\t")
            if len(parts) != 2 or _parse_int(parts[1], "dense_id", line_no) != len(raw):
                raise DataError(f"{path}: line {line_no}: expected '<raw>\\t{len(raw)}'")
            raw.append(_parse_int(parts[0], "raw_id", line_no))
    return np.array(raw, dtype=np.int64)


def write_ratings(sequences, item_raw_ids, path) -> None:
    """Write sequences back in MovieLens layout (rating column fixed at 0)."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("userId,movieId,rating,timestamp\n")
        for s in sorted(sequences, key=lambda s: s.user):
            raw = np.asarray(item_raw_ids)[s.item_ids]
            fh.writelines(f"{int(s.user)},{m},0,{t}\n" for m, t in zip(raw.tolist(), s.raw_timestamps.tolist()))
