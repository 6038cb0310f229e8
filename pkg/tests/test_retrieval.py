import math
import struct
from fractions import Fraction

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from lpn.model import LPN, ModelConfig, embed_images
from lpn.partition import PartitionSpec
from lpn.retrieval import (
    DISTRACTOR_ID,
    EmbeddingSet,
    RankingResult,
    ReportRow,
    average_precision,
    embeddings_to_csv,
    evaluate,
    inject_distractors,
    probe_part_combination,
    probe_rotation,
    probe_shift,
    rank,
    read_embeddings,
    read_report,
    recall_at_k,
    top1pct_k,
    write_embeddings,
    write_report,
)


# --------------------------------------------------------------------------- brute-force oracles

def oracle_order(Q, G):
    """Selection by repeated minimum over exact squared distances, lowest index on ties."""
    out = []
    for q in Q:
        d = [float(sum((float(a) - float(b)) ** 2 for a, b in zip(q, g))) for g in G]
        remaining = list(range(len(G)))
        order = []
        while remaining:
            best = remaining[0]
            for j in remaining[1:]:
                if d[j] < d[best]:
                    best = j
            order.append(best)
            remaining.remove(best)
        out.append(order)
    return out


def oracle_recall(order, qids, gids, k):
    hits = 0
    for o, qi in zip(order, qids):
        hits += any(gids[j] == qi for j in o[:k])
    return hits / len(order)


def oracle_ap(order, qid, gids):
    """Step-wise precision/recall curve integration: sum of precision * delta recall."""
    rel_total = sum(1 for g in gids if g == qid)
    if rel_total == 0:
        return None
    area, hits, prev_recall = Fraction(0), 0, Fraction(0)
    for r, j in enumerate(order, start=1):
        if gids[j] == qid:
            hits += 1
        recall = Fraction(hits, rel_total)
        area += Fraction(hits, r) * (recall - prev_recall)
        prev_recall = recall
    return float(area)


def _instance(rng, quantise=False):
    nq, ng, d = int(rng.integers(1, 15)), int(rng.integers(1, 50)), int(rng.integers(1, 6))
    n_ids = int(rng.integers(1, 8))
    Q, G = rng.normal(size=(nq, d)), rng.normal(size=(ng, d))
    if quantise:  # forces exact distance ties
        Q, G = np.round(Q), np.round(G)
    return (EmbeddingSet(Q, rng.integers(1, n_ids + 1, nq)), EmbeddingSet(G, rng.integers(1, n_ids + 1, ng)))


@pytest.mark.parametrize("quantise", [False, True])
def test_metrics_match_brute_force(quantise):
    rng = np.random.default_rng(7 + quantise)
    for _ in range(100):
        q, g = _instance(rng, quantise)
        r = rank(q, g)
        order = oracle_order(q.matrix, g.matrix)
        assert r.order.tolist() == order
        for k in (1, 2, 5, 10, 100):
            assert recall_at_k(r, k) == oracle_recall(order, q.ids, g.ids, min(k, len(g)))
        ap = average_precision(r)
        expected = [oracle_ap(o, qi, g.ids) for o, qi in zip(order, q.ids)]
        assert ap.excluded == sum(e is None for e in expected)
        for got, want in zip(ap.per_query, expected):
            if want is None:
                assert math.isnan(got)
            else:
                assert abs(got - want) < 1e-9


def test_rank_examples():
    G = np.eye(4)
    r = rank(EmbeddingSet(G[[2]], [3]), EmbeddingSet(G, [1, 2, 3, 4]))
    assert r.order.tolist() == [[2, 0, 1, 3]]
    rng = np.random.default_rng(0)
    Q, Gr = rng.normal(size=(10, 8)), rng.normal(size=(10, 8))
    r = rank(EmbeddingSet(Q, np.arange(10)), EmbeddingSet(Gr, np.arange(10)))
    assert r.order.tolist() == oracle_order(Q, Gr)


def test_rank_dimension_mismatch():
    with pytest.raises(ValueError, match="dim"):
        rank(EmbeddingSet(np.zeros((1, 3)), [1]), EmbeddingSet(np.zeros((2, 4)), [1, 2]))


def test_rank_chunking_is_invisible():
    rng = np.random.default_rng(1)
    q = EmbeddingSet(rng.normal(size=(37, 5)), rng.integers(1, 4, 37))
    g = EmbeddingSet(rng.normal(size=(20, 5)), rng.integers(1, 4, 20))
    assert np.array_equal(rank(q, g).order, rank(q, g, chunk=4).order)


def _ranking(relevance):
    rel = np.asarray(relevance, dtype=bool)
    return RankingResult(np.tile(np.arange(rel.shape[1]), (rel.shape[0], 1)), rel)


def test_recall_examples():
    r = _ranking([[0, 0, 1, 0, 0]])
    assert recall_at_k(r, 1) == 0 and recall_at_k(r, 5) == 1
    assert recall_at_k(r, 50) == 1  # clamped
    assert recall_at_k(_ranking([[1, 0, 0]] * 3), 1) == 1
    with pytest.raises(ValueError):
        recall_at_k(r, 0)


def test_ap_examples():
    assert average_precision(_ranking([[1, 0, 0]])).mean == 1.0
    assert average_precision(_ranking([[1, 0, 1, 0]])).mean == 5 / 6
    res = average_precision(_ranking([[0, 0], [0, 1]]))
    assert res.excluded == 1 and res.mean == 0.5


def test_top1pct_uses_ceiling():
    assert top1pct_k(1) == 1
    assert top1pct_k(100) == 1
    assert top1pct_k(101) == 2
    assert top1pct_k(951) == 10


def test_multi_match_queries():
    # one satellite query against several matching drone images
    g = EmbeddingSet(np.array([[0.0], [1.0], [2.0], [3.0]]), [2, 1, 1, 2])
    r = rank(EmbeddingSet(np.array([[1.4]]), [1]), g)
    m = evaluate(r)
    assert m["R@1"] == 1.0
    assert m["AP"] == 1.0
    r = rank(EmbeddingSet(np.array([[0.9]]), [1]), g)  # matches at ranks 1 and 3
    assert evaluate(r)["AP"] == 5 / 6


@settings(max_examples=80, deadline=None)
@given(st.integers(0, 10_000))
def test_recall_monotone_and_ap_bounds(seed):
    q, g = _instance(np.random.default_rng(seed))
    r = rank(q, g)
    recalls = [recall_at_k(r, k) for k in range(1, len(g) + 1)]
    assert all(a <= b for a, b in zip(recalls, recalls[1:]))
    ap = average_precision(r)
    valid = ap.per_query[~np.isnan(ap.per_query)]
    assert np.all((valid >= 0) & (valid <= 1 + 1e-12))
    # AP is 1 exactly when every relevant item precedes every irrelevant one
    for row, value in zip(r.relevant, ap.per_query):
        if row.any():
            perfect = not np.any(np.diff(row.astype(int)) > 0)
            assert (abs(value - 1) < 1e-12) == perfect


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10_000), st.integers(0, 30))
def test_distractors_never_raise_recall(seed, n_extra):
    rng = np.random.default_rng(seed)
    q, g = _instance(rng)
    extra = EmbeddingSet(rng.normal(size=(n_extra, g.dim)), np.zeros(n_extra))
    before, after = rank(q, g), rank(q, inject_distractors(g, extra))
    for k in range(1, len(g) + n_extra + 1):
        assert recall_at_k(after, k) <= recall_at_k(before, k)


def test_inject_distractors():
    g = EmbeddingSet(np.zeros((3, 2)), [1, 2, 3], paths=("a", "b", "c"))
    extra = EmbeddingSet(np.ones((2, 2)), [1, 2])
    out = inject_distractors(g, extra)
    assert len(out) == 5
    assert out.ids.tolist() == [1, 2, 3, DISTRACTOR_ID, DISTRACTOR_ID]
    assert inject_distractors(g, EmbeddingSet(np.zeros((0, 2)), [])) is g
    with pytest.raises(ValueError):
        inject_distractors(g, EmbeddingSet(np.zeros((1, 3)), [1]))


# --------------------------------------------------------------------------- embedding sets and files

def test_embedding_set_validation():
    with pytest.raises(ValueError):
        EmbeddingSet(np.zeros(3), [1, 2, 3])
    with pytest.raises(ValueError):
        EmbeddingSet(np.zeros((2, 3)), [1])
    with pytest.raises(ValueError):
        EmbeddingSet(np.zeros((2, 3)), [1, 2], n_parts=2)
    with pytest.raises(ValueError):
        EmbeddingSet(np.full((1, 2), np.inf), [1])


def test_select_parts():
    parts = np.arange(2 * 4 * 3).reshape(2, 4, 3).astype(float)
    es = EmbeddingSet.from_parts(parts, [1, 2])
    assert es.n_parts == 4 and es.dim == 12
    sub = es.select_parts([3, 1])
    assert sub.n_parts == 2
    assert np.array_equal(sub.matrix[0], np.concatenate([parts[0, 2], parts[0, 0]]))
    with pytest.raises(ValueError):
        es.select_parts([5])
    with pytest.raises(ValueError):
        es.select_parts([])


@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_embedding_file_round_trip(tmp_path, dtype):
    rng = np.random.default_rng(0)
    es = EmbeddingSet(rng.normal(size=(7, 8)).astype(dtype), rng.integers(-1, 5, 7), "drone", "query", 2,
                      tuple(f"q/{i}.png" for i in range(7)))
    write_embeddings(tmp_path / "e.bin", es)
    back = read_embeddings(tmp_path / "e.bin")
    assert back.matrix.dtype == dtype
    assert np.array_equal(back.matrix, es.matrix) and np.array_equal(back.ids, es.ids)
    assert (back.platform, back.split, back.n_parts, back.paths) == ("drone", "query", 2, es.paths)
    raw = (tmp_path / "e.bin").read_bytes()
    assert raw[:4] == b"LPNE"
    magic, version, code, _, n, d, n_parts = struct.unpack_from("<4sHBBQQI", raw)
    assert (version, code, n, d, n_parts) == (1, 1 if dtype == np.float32 else 2, 7, 8, 2)
    body = 28 + 7 * 8 * np.dtype(dtype).itemsize + 7 * 8
    (meta_len,) = struct.unpack_from("<I", raw, body)
    assert len(raw) == body + 4 + meta_len


def test_embedding_file_rejects_garbage(tmp_path):
    (tmp_path / "x").write_bytes(b"nope" + bytes(40))
    with pytest.raises(ValueError, match="magic"):
        read_embeddings(tmp_path / "x")
    (tmp_path / "y").write_bytes(b"LP")
    with pytest.raises(ValueError, match="truncated"):
        read_embeddings(tmp_path / "y")


def test_embeddings_csv(tmp_path):
    es = EmbeddingSet(np.array([[0.5, 1.0]]), [3], paths=("a.png",))
    embeddings_to_csv(tmp_path / "e.csv", es)
    lines = (tmp_path / "e.csv").read_text().splitlines()
    assert lines == ["id,path,f0,f1", "3,a.png,0.5,1.0"]


def test_report_round_trip(tmp_path):
    metrics = {"R@1": 0.5, "R@5": 0.75, "R@10": 1.0, "R@top1pct": 0.5, "AP": 0.6, "excluded": 0}
    write_report(tmp_path / "r.csv", [ReportRow("drone->satellite", "rotate", "90", metrics)])
    text = (tmp_path / "r.csv").read_text()
    assert text.startswith("# R@top1pct uses k = ceil(0.01 * gallery size)\n")
    rows = read_report(tmp_path / "r.csv")
    assert list(rows[0]) == ["task", "transform", "param", "R@1", "R@5", "R@10", "R@top1pct", "AP"]
    assert rows[0]["param"] == "90" and float(rows[0]["AP"]) == 0.6


# --------------------------------------------------------------------------- probes on an untrained model

@pytest.fixture(scope="module")
def tiny_setup():
    torch.manual_seed(0)
    model = LPN(ModelConfig(num_classes=5, partition=PartitionSpec("square_ring", 2), input_size=64)).eval()
    rng = np.random.default_rng(0)
    images = rng.integers(0, 256, (6, 64, 64, 3), dtype=np.uint8)
    ids = np.array([1, 2, 3, 4, 5, 1])
    gallery = EmbeddingSet.from_parts(embed_images(model, images[:5], 1), ids[:5])
    queries = EmbeddingSet.from_parts(embed_images(model, images, 2), ids)
    return model, images, ids, gallery, queries


def test_zero_probes_reproduce_baseline(tiny_setup):
    model, images, ids, gallery, queries = tiny_setup
    base = evaluate(rank(queries, gallery))
    assert probe_rotation(model, images, ids, gallery, [0])[0] == base
    assert probe_rotation(model, images, ids, gallery, [360.0])[360.0] == base
    assert probe_shift(model, images, ids, gallery, [0])[0] == base
    assert probe_part_combination(queries, gallery, [1, 2], [1, 2]) == base


def test_probes_return_one_entry_per_setting(tiny_setup):
    model, images, ids, gallery, _ = tiny_setup
    assert list(probe_rotation(model, images, ids, gallery, [0, 90, 45])) == [0, 90, 45]
    assert list(probe_shift(model, images, ids, gallery, [0, 10, 20])) == [0, 10, 20]
