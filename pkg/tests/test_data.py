import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import five_core_fixpoint
from torope.errors import ConfigError, DataError, InputError
from torope.data import (
    LAST_DAY,
    SynthConfig,
    day_index,
    five_core_filter,
    ingest_ratings,
    read_canonical,
    read_id_map,
    reindex_items,
    split_leave_one_out,
    synth_generate,
    weekday,
    write_canonical,
    write_id_map,
    write_ratings,
)
from torope.rope import EventSequence

DAY = 86400
SMALL = dict(n_users=60, vocab_size=40, n_item_classes=8, horizon_days=21, seed=3)


def seq(items, stamps, user=0):
    return EventSequence(np.array(items), np.array(stamps), user=user)


def test_weekday_is_utc_calendar():
    assert int(weekday(0)) == 3  # 1970-01-01 was a Thursday
    assert int(weekday(1704067200)) == 0  # 2024-01-01, a Monday
    assert int(weekday(1704067200 + 5 * DAY + 23 * 3600)) == 5
    assert int(day_index(DAY - 1)) == 0 and int(day_index(DAY)) == 1


def test_generator_is_deterministic():
    a = synth_generate(SynthConfig(**SMALL))
    b = synth_generate(SynthConfig(**SMALL))
    for x, y in zip(a.sequences, b.sequences):
        assert x.item_ids.tobytes() == y.item_ids.tobytes()
        assert x.raw_timestamps.tobytes() == y.raw_timestamps.tobytes()
    c = synth_generate(SynthConfig(**{**SMALL, "seed": 4}))
    assert any(x.item_ids.tobytes() != y.item_ids.tobytes() for x, y in zip(a.sequences, c.sequences))


def test_saturday_rule_labels():
    cfg = SynthConfig(**SMALL, periodic_rule={"saturday": 3})
    data = synth_generate(cfg)
    n_sat = 0
    for s, cls, gov in zip(data.sequences, data.classes, data.governed):
        sat = weekday(s.raw_timestamps) == 5
        n_sat += int(np.sum(sat & gov))
        assert np.all(cls[sat & gov] == 3)
        # governed events only ever come from the rule's weekday
        assert np.all(sat[gov])
        assert np.array_equal(cls, cfg.item_class(s.item_ids))
    assert n_sat > 0


def test_focused_saturday_sessions_are_all_class_three():
    cfg = SynthConfig(**SMALL, periodic_rule={5: 3}, focus=1.0, long_range_rule=(14.0, 0.0))
    data = synth_generate(cfg)
    for s, cls in zip(data.sequences, data.classes):
        sat = weekday(s.raw_timestamps) == 5
        assert np.all(cls[sat] == 3)


def test_gap_structure():
    cfg = SynthConfig(**SMALL)
    data = synth_generate(cfg)
    lo, hi = cfg.intra_session_gap_seconds_range
    for s, sid in zip(data.sequences, data.sessions):
        gaps = np.diff(s.raw_timestamps)
        same = np.diff(sid) == 0
        assert np.all(gaps > 0)
        assert np.all((gaps[same] >= lo) & (gaps[same] <= hi))
        assert np.all(gaps[~same] > hi)
        lengths = np.bincount(sid)
        assert lengths.min() >= cfg.session_length_range[0] and lengths.max() <= cfg.session_length_range[1]


def test_franchise_returns_after_interval():
    cfg = SynthConfig(**SMALL, long_range_rule=(7.0, 1.0), focus=1.0)
    data = synth_generate(cfg)
    for s, cls, sid, gov, fr in zip(data.sequences, data.classes, data.sessions, data.governed, data.franchise):
        days = day_index(s.raw_timestamps)
        starts = np.flatnonzero(np.diff(np.concatenate([[-1], sid])))
        fr_days = [int(days[i]) for i in starts if cls[i] == fr and not gov[i]]
        assert fr_days, "the first session is always a franchise session when the return probability is 1"
        assert all(b - a >= 7 for a, b in zip(fr_days, fr_days[1:]))


@pytest.mark.parametrize(
    "bad",
    [
        {"vocab_size": 41},
        {"session_rate": 0.0},
        {"session_rate": 1.5},
        {"session_length_range": (3, 2)},
        {"long_range_rule": (7, 1.5)},
        {"periodic_rule": {"caturday": 1}},
        {"periodic_rule": {1: 99}},
        {"n_users": 0},
    ],
)
def test_infeasible_configs_rejected(bad):
    with pytest.raises(ConfigError):
        SynthConfig(**{**SMALL, **bad})


def write(tmp_path, text, name="ratings.csv"):
    p = tmp_path / name
    p.write_text(text)
    return p


def test_ingest_groups_sorts_and_reindexes(tmp_path):
    p = write(
        tmp_path,
        "userId,movieId,rating,timestamp\n2,10,4.0,50\n1,99,3.5,20\n1,10,5,10\n",
    )
    corpus = ingest_ratings(p)
    assert [s.user for s in corpus.sequences] == [1, 2]
    assert [s.length for s in corpus.sequences] == [2, 1]
    assert corpus.item_raw_ids.tolist() == [10, 99]
    first = corpus.sequences[0]
    assert first.item_ids.tolist() == [0, 1] and first.raw_timestamps.tolist() == [10, 20]


def test_ingest_reindexing_example(tmp_path):
    p = write(tmp_path, "userId,movieId,rating,timestamp\n1,10,1,1\n1,99,1,2\n1,10,1,3\n")
    assert ingest_ratings(p).sequences[0].item_ids.tolist() == [0, 1, 0]


def test_ingest_ties_keep_file_order(tmp_path):
    p = write(tmp_path, "userId,movieId,rating,timestamp\n1,30,1,5\n1,20,1,5\n1,10,1,5\n1,40,1,1\n")
    s = ingest_ratings(p).sequences[0]
    assert s.item_ids.tolist() == [3, 2, 1, 0]


@pytest.mark.parametrize(
    "body,line",
    [
        ("1,10,4.0\n", 2),
        ("1,10,4.0,5\n1,x,3,6\n", 3),
        ("1,10,good,5\n", 2),
        ("1,10,4.0,5\n1,10,4.0,-1\n", 3),
    ],
)
def test_ingest_reports_line_numbers(tmp_path, body, line):
    p = write(tmp_path, "userId,movieId,rating,timestamp\n" + body)
    with pytest.raises(DataError, match=f"line {line}"):
        ingest_ratings(p)


def test_ingest_empty_and_bad_header(tmp_path):
    with pytest.raises(InputError):
        ingest_ratings(write(tmp_path, ""))
    with pytest.raises(InputError):
        ingest_ratings(write(tmp_path, "userId,movieId,rating,timestamp\n"))
    with pytest.raises(DataError, match="line 1"):
        ingest_ratings(write(tmp_path, "user,item,rating,time\n1,2,3,4\n"))


def test_ratings_round_trip(tmp_path):
    data = synth_generate(SynthConfig(**SMALL))
    raw_ids = np.arange(data.config.vocab_size) * 7 + 3
    used = np.unique(np.concatenate([s.item_ids for s in data.sequences]))
    path = tmp_path / "r.csv"
    write_ratings(data.sequences, raw_ids, path)
    back = ingest_ratings(path)
    assert back.item_raw_ids.tolist() == raw_ids[used].tolist()
    for a, b in zip(data.sequences, back.sequences):
        assert a.user == b.user
        assert np.array_equal(raw_ids[a.item_ids], back.item_raw_ids[b.item_ids])
        assert np.array_equal(a.raw_timestamps, b.raw_timestamps)


def test_canonical_and_id_map_round_trip(tmp_path):
    seqs = [seq([0, 2, 1], [5, 5, 9], user=4), seq([1], [3], user=1)]
    p = tmp_path / "events.tsv"
    write_canonical(seqs, p)
    assert p.read_bytes() == b"user\titem\ttimestamp\n1\t1\t3\n4\t0\t5\n4\t2\t5\n4\t1\t9\n"
    back = read_canonical(p)
    assert [s.user for s in back] == [1, 4]
    assert back[1].item_ids.tolist() == [0, 2, 1] and back[1].raw_timestamps.tolist() == [5, 5, 9]
    m = tmp_path / "ids.tsv"
    write_id_map([10, 99], m)
    assert m.read_bytes() == b"raw_id\tdense_id\n10\t0\n99\t1\n"
    assert read_id_map(m).tolist() == [10, 99]


def test_canonical_out_of_order_needs_repair(tmp_path):
    p = tmp_path / "e.tsv"
    p.write_text("user\titem\ttimestamp\n1\t0\t9\n1\t1\t3\n")
    with pytest.raises(DataError, match="repair"):
        read_canonical(p)
    fixed = read_canonical(p, repair=True)
    assert fixed[0].item_ids.tolist() == [1, 0]
    p.write_text("user\titem\ttimestamp\n1\t0\n")
    with pytest.raises(DataError, match="line 2"):
        read_canonical(p)


def test_five_core_examples():
    assert five_core_filter([]) == []
    full = [seq([0, 1, 2, 3, 4], np.arange(5), user=u) for u in range(5)]
    out = five_core_filter(full)
    assert len(out) == 5 and all(a is b or np.array_equal(a.item_ids, b.item_ids) for a, b in zip(full, out))
    # user 5 has 4 events and is the reason item 9 reaches five occurrences
    base = [seq([0, 1, 2, 3, 4, 9], np.arange(6), user=u) for u in range(4)]
    base.append(seq([0, 1, 2, 3, 4], np.arange(5), user=4))
    short = seq([9, 0, 1, 2], np.arange(4), user=5)
    out = five_core_filter(base + [short])
    assert [s.user for s in out] == [0, 1, 2, 3, 4]
    assert all(s.item_ids.tolist() == [0, 1, 2, 3, 4] for s in out)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.lists(st.integers(0, 6), min_size=0, max_size=12), min_size=0, max_size=12))
def test_five_core_matches_fixpoint_oracle(rows):
    seqs = [seq(items, np.arange(len(items)), user=u) for u, items in enumerate(rows) if items]
    got = five_core_filter(seqs)
    events = [(s.user, int(i), int(t)) for s in seqs for i, t in zip(s.item_ids, s.raw_timestamps)]
    want = five_core_fixpoint(events)
    assert [(s.user, int(i), int(t)) for s in got for i, t in zip(s.item_ids, s.raw_timestamps)] == want
    users, items = {}, {}
    for u, i, _ in want:
        users[u] = users.get(u, 0) + 1
        items[i] = items.get(i, 0) + 1
    assert all(v >= 5 for v in users.values()) and all(v >= 5 for v in items.values())


def test_reindex_items():
    out, used = reindex_items([seq([5, 9], [0, 1]), seq([9, 2], [0, 1], user=1)])
    assert used.tolist() == [2, 5, 9]
    assert out[0].item_ids.tolist() == [1, 2] and out[1].item_ids.tolist() == [2, 0]


def test_leave_one_out_examples():
    sp = split_leave_one_out([seq([1, 2, 3], [1, 2, 3])])
    assert (sp.train[0].length, sp.validation[0].length, sp.test[0].length) == (1, 1, 1)
    with pytest.warns(UserWarning, match="dropped 1"):
        sp = split_leave_one_out([seq([1, 2], [1, 2]), seq([1, 2, 3, 4], [1, 2, 3, 4], user=1)])
    assert sp.dropped == 1 and sp.users == [1]
    assert sp.test[0].item_ids.tolist() == [4] and sp.validation[0].item_ids.tolist() == [3]


def test_last_day_mode():
    stamps = [0, 3600, DAY + 10, 2 * DAY + 5, 2 * DAY + 50, 2 * DAY + 70]
    sp = split_leave_one_out([seq([1, 2, 3, 4, 5, 6], stamps)], mode=LAST_DAY)
    assert sp.train[0].item_ids.tolist() == [1, 2]
    assert sp.validation[0].item_ids.tolist() == [3]
    assert sp.test[0].item_ids.tolist() == [4, 5, 6]
    ctx, tgt = sp.test_pairs()
    assert tgt.tolist() == [4, 5, 6] and [c.length for c in ctx] == [3, 4, 5]
    with pytest.raises(ConfigError):
        split_leave_one_out([], mode="random")


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(1, 12), min_size=1, max_size=10), st.sampled_from(["leave_one_out", LAST_DAY]))
def test_split_partitions_each_user(lengths, mode):
    rng = np.random.default_rng(sum(lengths))
    seqs = [
        seq(rng.integers(0, 50, L), np.sort(rng.integers(0, 5 * DAY, L)), user=u) for u, L in enumerate(lengths)
    ]
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        sp = split_leave_one_out(seqs, mode=mode)
    assert len(sp) + sp.dropped == len(seqs)
    by_user = {s.user: s for s in seqs}
    for a, b, c in zip(sp.train, sp.validation, sp.test):
        whole = by_user[a.user]
        assert min(a.length, b.length, c.length) >= 1
        assert np.array_equal(np.concatenate([a.item_ids, b.item_ids, c.item_ids]), whole.item_ids)
        assert np.array_equal(np.concatenate([a.raw_timestamps, b.raw_timestamps, c.raw_timestamps]), whole.raw_timestamps)
    if sp.train:
        assert sp.earliest_train_timestamp() == min(int(s.raw_timestamps[0]) for s in sp.train)
