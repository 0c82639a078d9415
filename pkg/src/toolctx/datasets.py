"""Dataset loaders (xLAM-style, BFCL-style, native JSONL) and the answer-grouped split.

xLAM-style record::

    {"query": "...", "tools": [{"name", "description", "parameters": {p: {"type", "description", "default"?}}}],
     "answers": [{"name", "arguments": {...}}]}

``tools`` and ``answers`` may also be JSON-encoded strings. BFCL-style record::

    {"id": "...", "question": "..." | [[{"role": "user", "content": "..."}]],
     "function": [{"name", "description", "parameters": {"type": "dict", "properties": {...}, "required": [...]}}],
     "ground_truth": [{"fname": {"param": [acceptable values...]}}]}

The ground truth may come instead from a separate file of ``{"id", "ground_truth"}`` rows.
"""

from __future__ import annotations

import json
import logging
import math
import random
from collections import Counter, defaultdict
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

from .callparse import CallSyntaxError, ToolCall
from .evalharness import ValidationExample, answer_key
from .tooldoc import ParameterSpec, ToolDocument, ToolKnowledgeBase, summarize_document, validate_document

logger = logging.getLogger(__name__)

BFCL_CATEGORIES = ("simple", "multiple", "parallel", "parallel_multiple")
DEFAULT_TOP_N = 100


class DatasetError(ValueError):
    def __init__(self, message: str, index: int | None = None):
        super().__init__(message if index is None else f"record {index}: {message}")
        self.index = index


@dataclass
class LoadResult:
    examples: list
    kb: ToolKnowledgeBase
    dropped: int = 0  # examples removed by the top-N filter


@dataclass(frozen=True)
class DatasetSplit:
    train: tuple
    test: tuple
    split_seed: int
    rule: str = "ceil"
    key_by: str = "calls"

    def manifest(self) -> dict:
        return {"split_seed": self.split_seed, "rule": self.rule, "key_by": self.key_by,
                "n_train": len(self.train), "n_test": len(self.test)}


# -- reading --------------------------------------------------------------------------


def read_records(path: str | Path) -> list:
    """Records from a JSON array file or a JSON-lines file."""
    text = Path(path).read_text()
    if not text.strip():
        raise DatasetError(f"{path} is empty")
    stripped = text.lstrip()
    if stripped.startswith("["):
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise DatasetError(f"{path}: invalid JSON: {exc}") from None
        if not data:
            raise DatasetError(f"{path} holds no records")
        return data
    records = []
    for line in text.splitlines():
        if not line.strip():
            continue
        try:
            records.append(json.loads(line))
        except json.JSONDecodeError as exc:
            raise DatasetError(f"invalid JSON: {exc}", len(records)) from None
    return records


def _maybe_json(value, what: str, index: int):
    if isinstance(value, str):
        try:
            return json.loads(value)
        except json.JSONDecodeError as exc:
            raise DatasetError(f"{what} is not valid JSON: {exc}", index) from None
    return value


def params_from_schema(raw) -> tuple[ParameterSpec, ...]:
    """Parameters from either a ``{name: spec}`` map or a JSON-schema object."""
    if raw is None:
        return ()
    if isinstance(raw, list):
        return tuple(ParameterSpec.from_dict(p) for p in raw)
    if not isinstance(raw, Mapping):
        raise ValueError("parameters must be an object")
    if "properties" in raw and str(raw.get("type", "object")).lower() in ("object", "dict"):
        required = set(raw.get("required", ()))
        out = []
        for name, spec in raw["properties"].items():
            spec = dict(spec)
            spec["name"] = name
            spec["required"] = name in required
            if spec["required"]:
                spec.pop("default", None)
            out.append(ParameterSpec.from_dict(spec))
        return tuple(out)
    return tuple(ParameterSpec.from_dict({**spec, "name": name}) for name, spec in raw.items())


def tool_from_record(raw: Mapping[str, Any]) -> ToolDocument:
    doc = ToolDocument(name=str(raw["name"]), description=str(raw.get("description", "")),
                       parameters=params_from_schema(raw.get("parameters")))
    violations = validate_document(doc, require_content=False)
    if violations:
        raise ValueError("; ".join(violations))
    return replace(doc, retrieval_content=summarize_document(doc))


def _calls(raw, index: int) -> tuple[ToolCall, ...]:
    if not isinstance(raw, list):
        raise DatasetError("answers must be a list", index)
    try:
        return tuple(ToolCall.from_dict(c) for c in raw)
    except (KeyError, TypeError, ValueError, CallSyntaxError) as exc:
        raise DatasetError(f"bad answer: {exc}", index) from None


# -- xLAM ---------------------------------------------------------------------------------


def load_xlam(path: str | Path, top_n: int | None = DEFAULT_TOP_N) -> LoadResult:
    records = read_records(path)
    docs: dict[str, ToolDocument] = {}
    parsed = []
    for i, rec in enumerate(records):
        if not isinstance(rec, Mapping):
            raise DatasetError("record is not an object", i)
        query = rec.get("query")
        if not isinstance(query, str) or not query.strip():
            raise DatasetError("missing query", i)
        tools = _maybe_json(rec.get("tools", []), "tools", i)
        answers = _maybe_json(rec.get("answers"), "answers", i)
        if answers is None:
            raise DatasetError("missing answers", i)
        candidates = []
        for t in tools or ():
            try:
                doc = tool_from_record(t)
            except (KeyError, TypeError, ValueError) as exc:
                raise DatasetError(f"bad tool document: {exc}", i) from None
            if doc.name in docs and docs[doc.name].to_dict() != doc.to_dict():
                logger.debug("tool %r documented differently in record %d; keeping the first", doc.name, i)
            docs.setdefault(doc.name, doc)
            candidates.append(doc.name)
        calls = _calls(answers, i)
        if not calls:
            raise DatasetError("record has no answers", i)
        missing = {c.name for c in calls} - set(docs)
        if missing:
            raise DatasetError(f"answers call undocumented tools {sorted(missing)}", i)
        parsed.append((query, calls, tuple(candidates)))

    usage = Counter(c.name for _, calls, _ in parsed for c in calls)
    ranked = sorted(usage, key=lambda n: (-usage[n], n))
    keep = set(ranked if top_n is None else ranked[:top_n])
    examples, dropped = [], 0
    for query, calls, candidates in parsed:
        if not {c.name for c in calls} <= keep:
            dropped += 1
            continue
        examples.append(ValidationExample(query, frozenset(c.name for c in calls), calls, source="xlam",
                                          candidates=candidates))
    if dropped:
        logger.info("top-%s filter dropped %d of %d examples", top_n, dropped, len(parsed))
    kb = ToolKnowledgeBase(docs[n] for n in sorted(keep))
    return LoadResult(examples, kb, dropped)


# -- BFCL ----------------------------------------------------------------------------------


def _question_text(q) -> str:
    if isinstance(q, str):
        return q
    turns = q
    while isinstance(turns, list) and turns and isinstance(turns[0], list):
        turns = turns[0]
    if isinstance(turns, list):
        user = [t.get("content", "") for t in turns if isinstance(t, Mapping) and t.get("role", "user") == "user"]
        if user:
            return user[-1]
    raise ValueError("unrecognized question format")


def _ground_truth_calls(gt, index: int) -> tuple[ToolCall, ...]:
    """BFCL lists acceptable values per argument; the first non-empty one becomes canonical.

    An argument whose only acceptable value is "" is optional and omitted.
    """
    if not isinstance(gt, list):
        raise DatasetError("ground_truth must be a list", index)
    calls = []
    for entry in gt:
        if not isinstance(entry, Mapping) or len(entry) != 1:
            raise DatasetError("each ground-truth entry maps one function name to its arguments", index)
        (name, args), = entry.items()
        canon = {}
        for p, options in (args or {}).items():
            options = options if isinstance(options, list) else [options]
            chosen = [v for v in options if v != "" and v is not None]
            if chosen:
                canon[p] = chosen[0]
        try:
            calls.append(ToolCall.make(name, canon))
        except (TypeError, ValueError) as exc:
            raise DatasetError(f"bad ground-truth value: {exc}", index) from None
    return tuple(calls)


def load_bfcl(path: str | Path, category: str, answers_path: str | Path | None = None) -> LoadResult:
    if category not in BFCL_CATEGORIES:
        raise ValueError(f"unknown category {category!r}; expected one of {BFCL_CATEGORIES}")
    records = read_records(path)
    truth = {}
    if answers_path is not None:
        truth = {r["id"]: r["ground_truth"] for r in read_records(answers_path)}
    docs: dict[str, ToolDocument] = {}
    examples = []
    for i, rec in enumerate(records):
        try:
            query = _question_text(rec["question"])
            functions = rec["function"]
            functions = functions if isinstance(functions, list) else [functions]
            candidates = [tool_from_record(f) for f in functions]
        except (KeyError, TypeError, ValueError) as exc:
            raise DatasetError(f"malformed record: {exc}", i) from None
        gt = rec.get("ground_truth", truth.get(rec.get("id")))
        if gt is None:
            raise DatasetError("no ground truth", i)
        calls = _ground_truth_calls(gt, i)
        names = [d.name for d in candidates]
        called = {c.name for c in calls}
        if not calls:
            raise DatasetError("no expected calls", i)
        if not called <= set(names):
            raise DatasetError(f"ground truth calls non-candidate tools {sorted(called - set(names))}", i)
        if category == "simple" and (len(names) != 1 or len(calls) != 1):
            raise DatasetError("simple records have one candidate and one call", i)
        if category == "multiple" and (not 2 <= len(names) <= 4 or len(calls) != 1):
            raise DatasetError(f"multiple records have 2-4 candidates and one call (got {len(names)} and {len(calls)})", i)
        if category == "parallel" and len(names) != 1:
            raise DatasetError("parallel records have exactly one candidate tool", i)
        if category == "parallel_multiple" and len(names) < 2:
            raise DatasetError("parallel_multiple records have several candidate tools", i)
        for d in candidates:
            docs.setdefault(d.name, d)
        examples.append(ValidationExample(query, frozenset(called), calls, source="bfcl", candidates=tuple(names)))
    return LoadResult(examples, ToolKnowledgeBase(docs[n] for n in sorted(docs)), 0)


# -- native format -------------------------------------------------------------------------


def write_examples(examples: Iterable[ValidationExample], path: str | Path) -> Path:
    path = Path(path)
    with path.open("w") as fh:
        for ex in examples:
            fh.write(json.dumps(ex.to_dict(), ensure_ascii=False) + "\n")
    return path


def read_examples(path: str | Path) -> list[ValidationExample]:
    out = []
    for i, rec in enumerate(read_records(path)):
        try:
            out.append(ValidationExample.from_dict(rec))
        except (KeyError, TypeError, ValueError) as exc:
            raise DatasetError(f"bad example: {exc}", i) from None
    return out


# -- split ---------------------------------------------------------------------------------


def split_by_answer(examples: Sequence[ValidationExample], seed: int = 0, rule: str = "ceil",
                    key_by: str = "calls") -> DatasetSplit:
    """Group by unique answer; singletons go to train, larger groups split about 2:1.

    Examples sharing a query string are kept together so no query lands on both
    sides.
    """
    if rule not in ("ceil", "floor"):
        raise ValueError("rule must be 'ceil' or 'floor'")
    groups: dict[str, list[ValidationExample]] = defaultdict(list)
    for ex in examples:
        key = ex.entity_key if key_by == "calls" else answer_key(ex.expected_calls, by="names")
        groups[key].append(ex)
    rng = random.Random(seed)
    train, test = [], []
    for key in sorted(groups):
        members = groups[key]
        # collapse identical queries into one unit
        units: dict[str, list] = {}
        for ex in members:
            units.setdefault(ex.query, []).append(ex)
        unit_list = list(units.values())
        if len(unit_list) == 1:
            train.extend(unit_list[0])
            continue
        rng.shuffle(unit_list)
        n = len(unit_list)
        n_train = math.ceil(2 * n / 3) if rule == "ceil" else max(1, math.floor(2 * n / 3))
        for u in unit_list[:n_train]:
            train.extend(u)
        for u in unit_list[n_train:]:
            test.extend(u)
    # the same query can carry different answers across groups; keep it out of test
    train_queries = {ex.query for ex in train}
    leaked = [ex for ex in test if ex.query in train_queries]
    if leaked:
        logger.info("moving %d test examples whose query also appears in train", len(leaked))
        train.extend(leaked)
        test = [ex for ex in test if ex.query not in train_queries]
    return DatasetSplit(tuple(train), tuple(test), seed, rule, key_by)
