import math
import random

import pytest

from toolctx.llmclient import ScriptedBackend
from toolctx.retrieval import (
    RetrieverConfig,
    chunk_spans,
    chunk_text,
    index_kb,
    load_index,
    recall_at_k,
    retrieve,
    save_index,
)
from toolctx.tooldoc import ToolDocument, ToolKnowledgeBase

KB3 = ToolKnowledgeBase([
    ToolDocument("flight_status", "check the flight status for an airline booking", "d"),
    ToolDocument("hotel_rooms", "list free hotel rooms in a city for a booking", "d"),
    ToolDocument("weather_now", "current weather conditions for a city", "d"),
])


def bm25_by_hand(docs, query, k1=1.5, b=0.75):
    """Direct per-document evaluation of the lexical formula, one chunk per tool."""
    toks = [d.lower().split() for d in docs]
    n = len(toks)
    avgdl = sum(map(len, toks)) / n
    out = []
    for d in toks:
        s = 0.0
        for t in query.lower().split():
            df = sum(t in x for x in toks)
            if not df:
                continue
            idf = math.log(1 + (n - df + 0.5) / (df + 0.5))
            f = d.count(t)
            s += idf * f * (k1 + 1) / (f + k1 * (1 - b + b * len(d) / avgdl))
        out.append(s)
    return out


def test_spans_single_window():
    assert chunk_spans(100, RetrieverConfig()) == [(0, 100)]
    assert chunk_spans(0, RetrieverConfig()) == []
    assert chunk_text("") == []


def test_spans_cover_every_token_with_overlap():
    cfg = RetrieverConfig(chunk_size=7, overlap=3)
    for n in range(1, 60):
        spans = chunk_spans(n, cfg)
        covered = set()
        for s, e in spans:
            covered.update(range(s, e))
        assert covered == set(range(n))
        for (s1, e1), (s2, _) in zip(spans, spans[1:]):
            assert e1 - s2 == 3


def test_config_validation():
    with pytest.raises(ValueError):
        RetrieverConfig(chunk_size=10, overlap=10)
    with pytest.raises(ValueError):
        RetrieverConfig(scorer="neural")


def test_empty_kb_gives_empty_results():
    index = index_kb(ToolKnowledgeBase())
    assert retrieve(index, "anything", 5) == []


def test_empty_retrieval_content_is_an_error():
    with pytest.raises(ValueError, match="bad"):
        index_kb(ToolKnowledgeBase([ToolDocument("bad", "  ", "d")]))


def test_flight_query_ranks_flight_tool_first():
    index = index_kb(KB3)
    ranking = retrieve(index, "flight status", 10)
    oracle = bm25_by_hand([d.retrieval_content for d in KB3], "flight status")
    by_hand = sorted(zip(KB3.names(), oracle), key=lambda kv: (-kv[1], kv[0]))
    assert [n for n, _ in ranking] == [n for n, _ in by_hand]
    for (_, got), (_, want) in zip(ranking, by_hand):
        assert got == pytest.approx(want, rel=1e-12)
    top2 = retrieve(index, "flight status", 2)
    assert len(top2) == 2 and top2[0][0] == "flight_status"


def test_k_larger_than_tool_count_returns_all():
    assert len(retrieve(index_kb(KB3), "city", 50)) == 3


def test_recall_all_or_nothing():
    ranking = [("a", 1.0), ("c", 0.5), ("b", 0.2)]
    assert recall_at_k(ranking, {"a", "b"}, 10) == 1
    assert recall_at_k(ranking, {"a", "b"}, 2) == 0
    assert recall_at_k(["a", "x"], {"a", "b"}, 10) == 0


def test_recall_empty_expected_warns(caplog):
    assert recall_at_k([], set(), 3) == 1
    assert "empty expected" in caplog.text


def test_rebuild_and_reload_are_deterministic(tmp_path):
    rng = random.Random(0)
    vocab = "flight hotel city weather booking status rooms airline current".split()
    a, b = index_kb(KB3), index_kb(KB3)
    save_index(a, tmp_path / "i.json")
    c = load_index(tmp_path / "i.json")
    for _ in range(20):
        q = " ".join(rng.sample(vocab, 3))
        assert retrieve(a, q, 2) == retrieve(b, q, 2) == retrieve(c, q, 2)


def test_embedding_and_hybrid_scorers():
    emb = ScriptedBackend(default="x")
    for scorer in ("external_embedding", "hybrid"):
        cfg = RetrieverConfig(scorer=scorer)
        with pytest.raises(ValueError):
            index_kb(KB3, cfg)
        index = index_kb(KB3, cfg, emb)
        first = retrieve(index, "flight status airline", 3)
        assert first == retrieve(index_kb(KB3, cfg, emb), "flight status airline", 3)
        assert len(first) == 3
