"""Chunked retrieval over tool retrieval content, and Recall@k."""

from __future__ import annotations

import json
import logging
import math
import re
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .tooldoc import ToolKnowledgeBase

logger = logging.getLogger(__name__)

INDEX_FORMAT = "toolctx-retrieval-index"
INDEX_FORMAT_VERSION = 1

_WORD = re.compile(r"\w+")


def terms(text: str) -> list[str]:
    """Lower-cased word terms used for lexical scoring."""
    return _WORD.findall(text.lower())


@dataclass(frozen=True)
class RetrieverConfig:
    chunk_size: int = 300
    overlap: int = 20
    k: int = 10
    scorer: str = "lexical"  # "lexical" | "external_embedding" | "hybrid"
    hybrid_weight: float = 0.5
    bm25_k1: float = 1.5
    bm25_b: float = 0.75

    def __post_init__(self):
        if self.chunk_size < 1:
            raise ValueError("chunk_size must be positive")
        if not 0 <= self.overlap < self.chunk_size:
            raise ValueError("overlap must satisfy 0 <= overlap < chunk_size")
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.scorer not in ("lexical", "external_embedding", "hybrid"):
            raise ValueError(f"unknown scorer {self.scorer!r}")
        if not 0.0 <= self.hybrid_weight <= 1.0:
            raise ValueError("hybrid_weight must lie in [0, 1]")


@dataclass(frozen=True)
class Chunk:
    tool_name: str
    token_span: tuple[int, int]
    text: str


def chunk_spans(n_tokens: int, cfg: RetrieverConfig) -> list[tuple[int, int]]:
    if n_tokens <= 0:
        return []
    stride = cfg.chunk_size - cfg.overlap
    spans = []
    start = 0
    while True:
        end = min(start + cfg.chunk_size, n_tokens)
        spans.append((start, end))
        if end >= n_tokens:
            return spans
        start += stride


def chunk_text(text: str, cfg: RetrieverConfig = RetrieverConfig(), tool_name: str = "") -> list[Chunk]:
    """Sliding windows over whitespace tokens; the last window may be short."""
    tokens = text.split()
    return [Chunk(tool_name, span, " ".join(tokens[span[0]:span[1]])) for span in chunk_spans(len(tokens), cfg)]


class LexicalScorer:
    """Okapi BM25 over chunks, with the always-positive ``ln(1 + ...)`` idf."""

    def __init__(self, docs: Sequence[Sequence[str]], k1: float = 1.5, b: float = 0.75):
        self.k1, self.b = k1, b
        self.tfs = [Counter(d) for d in docs]
        self.lengths = np.array([len(d) for d in docs], dtype=float)
        self.n = len(docs)
        self.avgdl = float(self.lengths.mean()) if self.n and self.lengths.sum() else 1.0
        df = Counter(t for tf in self.tfs for t in tf)
        self.idf = {t: math.log(1.0 + (self.n - c + 0.5) / (c + 0.5)) for t, c in df.items()}

    def scores(self, query_terms: Sequence[str]) -> np.ndarray:
        out = np.zeros(self.n)
        norm = self.k1 * (1.0 - self.b + self.b * self.lengths / self.avgdl)
        for t in query_terms:
            idf = self.idf.get(t)
            if idf is None:
                continue
            f = np.array([tf.get(t, 0) for tf in self.tfs], dtype=float)
            out += idf * f * (self.k1 + 1.0) / (f + norm)
        return out


def _minmax(x: np.ndarray) -> np.ndarray:
    if x.size == 0:
        return x
    lo, hi = float(x.min()), float(x.max())
    if hi - lo <= 0:
        return np.zeros_like(x) if hi == 0 else np.ones_like(x)
    return (x - lo) / (hi - lo)


class RetrievalIndex:
    def __init__(self, chunks: list[Chunk], tool_names: list[str], cfg: RetrieverConfig,
                 embeddings: np.ndarray | None = None, embedder=None):
        self.chunks = chunks
        self.tool_names = sorted(tool_names)
        self.cfg = cfg
        self.lexical = LexicalScorer([terms(c.text) for c in chunks], cfg.bm25_k1, cfg.bm25_b)
        self.embeddings = embeddings
        self.embedder = embedder

    def __len__(self) -> int:
        return len(self.tool_names)

    def chunk_scores(self, query: str) -> np.ndarray:
        if not self.chunks:
            return np.zeros(0)
        if self.cfg.scorer == "lexical":
            return self.lexical.scores(terms(query))
        if self.embedder is None or self.embeddings is None:
            raise RuntimeError(f"scorer {self.cfg.scorer!r} needs an embedding backend")
        q = np.asarray(self.embedder.embed([query])[0], dtype=float)
        semantic = self.embeddings @ (q / (np.linalg.norm(q) or 1.0))
        if self.cfg.scorer == "external_embedding":
            return semantic
        w = self.cfg.hybrid_weight
        return w * _minmax(semantic) + (1.0 - w) * _minmax(self.lexical.scores(terms(query)))

    def tool_scores(self, query: str) -> dict[str, float]:
        best = {name: 0.0 if self.cfg.scorer == "lexical" else -math.inf for name in self.tool_names}
        for chunk, s in zip(self.chunks, self.chunk_scores(query)):
            if s > best[chunk.tool_name]:
                best[chunk.tool_name] = float(s)
        return best


def index_kb(kb: ToolKnowledgeBase, cfg: RetrieverConfig = RetrieverConfig(), embedder=None) -> RetrievalIndex:
    """Chunk every tool's retrieval content and build the scorer."""
    chunks: list[Chunk] = []
    for doc in kb:
        if not doc.retrieval_content.strip():
            raise ValueError(f"tool {doc.name!r} has empty retrieval content")
        chunks.extend(chunk_text(doc.retrieval_content, cfg, doc.name))
    embeddings = None
    if cfg.scorer != "lexical":
        if embedder is None:
            raise ValueError(f"scorer {cfg.scorer!r} needs an embedding backend")
        if chunks:
            vecs = np.asarray(embedder.embed([c.text for c in chunks]), dtype=float)
            norms = np.linalg.norm(vecs, axis=1, keepdims=True)
            embeddings = vecs / np.where(norms == 0, 1.0, norms)
        else:
            embeddings = np.zeros((0, 0))
    return RetrievalIndex(chunks, kb.names(), cfg, embeddings, embedder)


def retrieve(index: RetrievalIndex, query: str, k: int | None = None) -> list[tuple[str, float]]:
    """Top-``k`` tools by best chunk score; ties go to the smaller tool name."""
    k = index.cfg.k if k is None else k
    if k < 1:
        raise ValueError("k must be >= 1")
    scores = index.tool_scores(query)
    ranked = sorted(scores.items(), key=lambda kv: (-kv[1], kv[0]))
    return ranked[:k]


def recall_at_k(retrieved: Sequence, expected_tools: Iterable[str], k: int) -> int:
    """1 if every expected tool is among the first ``k`` retrieved, else 0."""
    expected = set(expected_tools)
    if not expected:
        logger.warning("recall_at_k called with an empty expected set; counting as a hit")
        return 1
    names = {r[0] if isinstance(r, (tuple, list)) else r for r in list(retrieved)[:k]}
    return int(expected <= names)


def save_index(index: RetrievalIndex, path: str | Path) -> None:
    payload = {
        "format": INDEX_FORMAT,
        "format_version": INDEX_FORMAT_VERSION,
        "config": asdict(index.cfg),
        "tool_names": index.tool_names,
        "chunks": [{"tool_name": c.tool_name, "token_span": list(c.token_span), "text": c.text} for c in index.chunks],
        "embeddings": None if index.embeddings is None else index.embeddings.tolist(),
    }
    Path(path).write_text(json.dumps(payload))


def load_index(path: str | Path, embedder=None) -> RetrievalIndex:
    payload = json.loads(Path(path).read_text())
    if payload.get("format") != INDEX_FORMAT or payload.get("format_version") != INDEX_FORMAT_VERSION:
        raise ValueError("not a retrieval index file of a supported version")
    cfg = RetrieverConfig(**payload["config"])
    chunks = [Chunk(c["tool_name"], tuple(c["token_span"]), c["text"]) for c in payload["chunks"]]
    emb = payload.get("embeddings")
    return RetrievalIndex(chunks, payload["tool_names"], cfg, None if emb is None else np.asarray(emb), embedder)
