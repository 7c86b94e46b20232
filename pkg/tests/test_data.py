import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cali3f.data import (
    ClientShard,
    EmptyDatasetError,
    InsufficientNegativesError,
    InteractionTable,
    ParseError,
    build_shards,
    filter_min_interactions,
    leave_one_out_split,
    load_shards,
    parse_ratings,
    sample_eval_negatives,
    sample_train_negatives,
    save_shards,
)


def write(tmp_path, text, name="ratings.txt"):
    p = tmp_path / name
    p.write_text(text)
    return p


def table(records):
    return InteractionTable.from_records(records)


class TestParse:
    def test_tab_line(self, tmp_path):
        t = parse_ratings(write(tmp_path, "1\t50\t5\t874965758\n"))
        assert list(t) == [(0, 0, 874965758)]
        assert t.user_ids[0] == 1 and t.item_ids[0] == 50

    def test_double_colon(self, tmp_path):
        t = parse_ratings(write(tmp_path, "1::1193::5::978300760\n1::661::3::978302109\n"), "double-colon")
        assert t.num_users == 1 and t.num_items == 2
        assert list(t.item_ids) == [1193, 661]

    def test_single_line(self, tmp_path):
        t = parse_ratings(write(tmp_path, "7\t3\t1\t10\n"))
        assert (t.num_users, t.num_items, t.num_interactions) == (1, 1, 1)

    def test_duplicates_keep_latest(self, tmp_path):
        t = parse_ratings(write(tmp_path, "1\t2\t3\t10\n1\t2\t4\t20\n"))
        assert list(t) == [(0, 0, 20)]
        t = parse_ratings(write(tmp_path, "1\t2\t3\t20\n1\t2\t4\t10\n"))
        assert list(t) == [(0, 0, 20)]

    def test_first_appearance_order(self, tmp_path):
        t = parse_ratings(write(tmp_path, "9\t5\t1\t1\n3\t5\t1\t2\n9\t1\t1\t3\n"))
        assert list(t.user_ids) == [9, 3]
        assert list(t.item_ids) == [5, 1]

    def test_malformed_line_reports_line_number(self, tmp_path):
        with pytest.raises(ParseError) as err:
            parse_ratings(write(tmp_path, "1\t2\t3\t4\n1\t2\t3\n"))
        assert err.value.lineno == 2

    def test_non_numeric(self, tmp_path):
        with pytest.raises(ParseError):
            parse_ratings(write(tmp_path, "a\tb\tc\td\n"))

    def test_empty(self, tmp_path):
        with pytest.raises(EmptyDatasetError):
            parse_ratings(write(tmp_path, ""))

    def test_real_ml100k_line(self, ml100k_path):
        t = parse_ratings(ml100k_path)
        u = list(t.user_ids).index(1)
        i = list(t.item_ids).index(50)
        hit = (t.users == u) & (t.items == i)
        assert hit.sum() == 1
        # the genuine u.data row is "1\t50\t5\t874965954"
        assert t.timestamps[hit][0] == 874965954


class TestFilter:
    def test_boundary(self):
        recs = [("A", i, i) for i in range(25)] + [("B", i, i) for i in range(19)]
        out = filter_min_interactions(table(recs), 20)
        assert list(out.user_ids) == ["A"]
        assert out.num_items == 25

    def test_zero_is_noop(self):
        t = table([("A", 1, 1), ("B", 2, 2)])
        assert filter_min_interactions(t, 0) is t

    def test_idempotent(self):
        rng = np.random.default_rng(0)
        recs = [(int(u), int(i), int(ts)) for u, i, ts in rng.integers(0, 40, size=(600, 3))]
        t = table(recs)
        once = filter_min_interactions(t, 20)
        twice = filter_min_interactions(once, 20)
        assert once.original_pairs() == twice.original_pairs()

    def test_redensified(self):
        recs = [("A", "x", 1), ("B", "y", 2), ("B", "z", 3), ("C", "z", 4), ("C", "w", 5)]
        out = filter_min_interactions(table(recs), 2)
        assert out.num_users == 2
        assert set(out.users) == {0, 1} and set(out.items) == set(range(out.num_items))
        assert sorted(out.original_pairs()) == [("B", "y"), ("B", "z"), ("C", "w"), ("C", "z")]


class TestSplit:
    def test_latest_is_test(self):
        (s,) = leave_one_out_split(table([(1, 5, 100), (1, 9, 300), (1, 2, 200)]))
        t = table([(1, 5, 100), (1, 9, 300), (1, 2, 200)])
        assert t.item_ids[s.test_item] == 9
        assert [t.item_ids[i] for i in s.train_items] == [5, 2]

    def test_single_interaction(self):
        (s,) = leave_one_out_split(table([(1, 7, 50)]))
        assert s.test_item is None and list(s.train_items) == [0]
        assert not s.evaluable

    def test_tie_goes_to_larger_item(self):
        t = table([(1, 8, 100), (1, 3, 100)])
        (s,) = leave_one_out_split(t)
        assert t.item_ids[s.test_item] == 8

    def test_num_instances(self):
        (s,) = leave_one_out_split(table([(1, i, i) for i in range(11)]), neg_ratio=4)
        assert s.num_instances == 50

    def test_empty(self):
        t = table([])
        with pytest.raises(EmptyDatasetError):
            leave_one_out_split(t)


def _dense_table(num_items, user_items):
    recs = [(0, i, i) for i in user_items]
    recs += [(1, i, i) for i in range(num_items)]
    return table(recs)


class TestEvalNegatives:
    def test_forced_set(self):
        t = _dense_table(130, range(30))
        s = leave_one_out_split(t)[0]
        s = sample_eval_negatives(s, t, 0)
        assert sorted(s.eval_negatives.tolist()) == list(range(30, 130))

    def test_deterministic(self):
        t = _dense_table(400, range(30))
        s = leave_one_out_split(t)[0]
        a = sample_eval_negatives(s, t, 7).eval_negatives
        b = sample_eval_negatives(s, t, 7).eval_negatives
        assert np.array_equal(a, b)
        assert len(set(a.tolist())) == 100

    def test_insufficient(self):
        t = _dense_table(130, range(31))
        s = leave_one_out_split(t)[0]
        with pytest.raises(InsufficientNegativesError) as err:
            sample_eval_negatives(s, t, 0)
        assert err.value.user_id == 0


class TestTrainNegatives:
    shard = ClientShard(0, np.arange(10), test_item=10)

    def test_ratio_zero(self):
        assert len(sample_train_negatives(self.shard, 50, 0, 0)) == 0

    def test_count(self):
        assert len(sample_train_negatives(self.shard, 50, 4, 0)) == 40

    def test_excludes_interacted(self):
        neg = sample_train_negatives(self.shard, 15, 4, 3)
        assert set(neg.tolist()) <= set(range(11, 15))

    def test_deterministic(self):
        a = sample_train_negatives(self.shard, 50, 4, 11)
        b = sample_train_negatives(self.shard, 50, 4, 11)
        assert np.array_equal(a, b)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 8), st.integers(0, 150), st.integers(0, 50)), min_size=1, max_size=120))
def test_split_invariants(records):
    t = table(records)
    shards = leave_one_out_split(t)
    # densified bijection back to the deduplicated source pairs
    assert set(t.original_pairs()) == {(u, i) for u, i, _ in records}
    evaluable = sum(s.evaluable for s in shards)
    assert sum(len(s.train_items) for s in shards) == t.num_interactions - evaluable
    for s in shards:
        if s.evaluable:
            assert s.test_item not in set(s.train_items.tolist())


def test_shards_disjoint_and_reproducible(ml100k_table, tmp_path):
    a = build_shards(ml100k_table, seed=3)
    b = build_shards(ml100k_table, seed=3)
    for s in a:
        assert s.evaluable
        cand = set(s.candidates().tolist())
        assert len(cand) == 101
        assert not cand & set(s.train_items.tolist())
    save_shards(tmp_path / "a.jsonl", a, {"seed": 3})
    save_shards(tmp_path / "b.jsonl", b, {"seed": 3})
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()
    loaded, meta = load_shards(tmp_path / "a.jsonl")
    assert meta == {"seed": 3}
    assert json.dumps([s.to_record() for s in loaded]) == json.dumps([s.to_record() for s in a])
