"""Randomised invariants; each property runs at least 1000 cases."""

import numpy as np
from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from cali3f.aggregation import aggregate_item_embeddings, cali_up
from cali3f.clustering import ClusterAssignment, clus_avg, clus_samp, kmeans
from cali3f.evaluation import fairness_std, hr_at_k, ndcg_at_k, rank_of_first
from cali3f.models import GradientBlocks, RoundDelta, SparseRows

CASES = settings(max_examples=1000, deadline=None, suppress_health_check=[HealthCheck.too_slow])
finite = st.floats(-100, 100, allow_nan=False, allow_infinity=False)
ranks = st.integers(1, 101)


@CASES
@given(ranks, ranks)
def test_metrics_anti_monotone(r1, r2):
    lo, hi = min(r1, r2), max(r1, r2)
    assert hr_at_k(lo) >= hr_at_k(hi)
    assert ndcg_at_k(lo) >= ndcg_at_k(hi)


@CASES
@given(ranks)
def test_ndcg_at_most_hr(r):
    assert ndcg_at_k(r) <= hr_at_k(r)


# per-client NDCG values live on this grid
ndcg_values = st.sampled_from([0.0] + [1 / np.log2(r + 1) for r in range(1, 11)])


@CASES
@given(st.lists(ndcg_values, min_size=1, max_size=60), st.randoms(use_true_random=False))
def test_std_permutation_invariant(values, rnd):
    shuffled = list(values)
    rnd.shuffle(shuffled)
    a, b = fairness_std(values), fairness_std(shuffled)
    assert abs(a - b) <= 1e-12
    if len(set(values)) == 1:
        assert a == 0.0
    else:
        assert a > 0.0


@CASES
@given(arrays(np.float64, st.integers(2, 40), elements=st.floats(-5, 5)), st.data())
def test_rank_invariant_under_monotone_transform(scores, data):
    items = np.asarray(data.draw(st.permutations(range(len(scores)))))
    # a strictly increasing map on the observed values
    uniq = np.unique(scores)
    steps = data.draw(arrays(np.float64, len(uniq), elements=st.floats(0.5, 10)))
    transformed = np.cumsum(steps)[np.searchsorted(uniq, scores)]
    assert rank_of_first(scores, items) == rank_of_first(transformed, items)


@CASES
@given(st.integers(2, 30), st.integers(1, 4), st.integers(1, 6), st.integers(0, 2**31 - 1))
def test_kmeans_distortion_non_increasing(n, d, k, seed):
    k = min(k, n)
    rng = np.random.default_rng(seed)
    # mixing in duplicates exercises the empty-cluster repair
    pts = rng.normal(size=(n, d))
    pts[rng.random(n) < 0.3] = pts[0]
    a = kmeans(pts, k, seed)
    hist = a.distortions
    assert all(later <= earlier * (1 + 1e-12) + 1e-12 for earlier, later in zip(hist, hist[1:]))
    assert (a.sizes() > 0).all()


@CASES
@given(st.lists(st.integers(0, 5), min_size=1, max_size=40), st.integers(1, 40), st.integers(0, 1000))
def test_clus_samp_balanced(labels, m, seed):
    labels = np.asarray(labels)
    _, labels = np.unique(labels, return_inverse=True)
    m = min(m, len(labels))
    a = ClusterAssignment(labels, np.zeros((labels.max() + 1, 1)))
    plan = clus_samp(a, m, seed)
    counts = np.array([len(plan.delegates[p]) for p in range(a.num_clusters)])
    sizes = a.sizes()
    assert counts.sum() == m
    open_ = counts < sizes  # clusters not exhausted
    if open_.any():
        assert counts[open_].max() - counts[open_].min() <= 1
        assert counts.max() <= counts[open_].min() + 1


def _item_delta(uid, rows, moves, trained):
    return RoundDelta(uid, GradientBlocks({}, {"t": SparseRows(rows, moves)}, {}), 1,
                      new_item_rows={"t": SparseRows(rows, trained)})


@CASES
@given(st.integers(1, 4), st.integers(1, 5), st.integers(1, 3), st.integers(0, 2**31 - 1))
def test_item_aggregation_convex(num_delegates, num_items, dim, seed):
    rng = np.random.default_rng(seed)
    old = rng.normal(size=(num_items, dim))
    deltas = []
    for uid in range(num_delegates):
        rows = np.flatnonzero(rng.random(num_items) < 0.6)
        moves = rng.normal(size=(len(rows), dim)) * (rng.random((len(rows), dim)) < 0.8)
        deltas.append(_item_delta(uid, rows, moves, old[rows] - moves))
    out = aggregate_item_embeddings({"t": old}, deltas)["t"]
    for i in range(num_items):
        for j in range(dim):
            vals = [d.new_item_rows["t"].values[list(d.new_item_rows["t"].rows).index(i), j]
                    for d in deltas if i in d.new_item_rows["t"].rows
                    and d.delta.item["t"].values[list(d.delta.item["t"].rows).index(i), j] != 0]
            if vals:
                assert min(vals) - 1e-12 <= out[i, j] <= max(vals) + 1e-12
            else:
                assert out[i, j] == old[i, j]


@CASES
@given(st.integers(1, 12), st.integers(1, 4), st.integers(1, 4), st.integers(0, 2**31 - 1))
def test_clus_avg_convex(n, p_old, p_new, seed):
    rng = np.random.default_rng(seed)
    old = ClusterAssignment(rng.integers(0, p_old, size=n), np.zeros((p_old, 1)))
    new_labels = rng.integers(0, p_new, size=n)
    new_labels[:p_new] = np.arange(p_new)[: min(p_new, n)] if n >= p_new else new_labels[:p_new]
    new = ClusterAssignment(new_labels, np.zeros((int(new_labels.max()) + 1, 1)))
    models = {p: {"w": rng.normal(size=3), "b": rng.normal(size=(2, 2))} for p in range(p_old)}
    counts = rng.integers(0, 5, size=n)
    out = clus_avg(models, old, new, counts)
    for p in range(new.num_clusters):
        sources = np.unique(old.labels[new.labels == p])
        if len(sources) == 0:
            continue
        for k in ("w", "b"):
            stack = np.stack([models[s][k] for s in sources])
            assert np.all(out[p][k] >= stack.min(axis=0) - 1e-12)
            assert np.all(out[p][k] <= stack.max(axis=0) + 1e-12)


@CASES
@given(arrays(np.float64, 5, elements=finite), arrays(np.float64, 5, elements=finite),
       arrays(np.float64, 5, elements=finite), st.floats(0, 0.99), st.floats(0.01, 2))
def test_cali_up_pull_norm(v, w, g, phi, lr):
    out = cali_up({"a": v}, {"a": w}, {"a": g}, phi, lr)["a"]
    if np.linalg.norm(v - w) < 1e-12 or phi == 0:
        assert np.array_equal(out, v - lr * g)
    else:
        pull = (v - lr * g - out) / lr
        assert abs(np.linalg.norm(pull) - phi * np.linalg.norm(g)) <= 1e-6 * (1 + np.linalg.norm(g))
