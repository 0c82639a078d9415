"""Validation-set evaluation: stage metrics, final accuracy, mismatch records.

Stage metrics in ``product`` mode are conditional: selection accuracy is
measured over queries whose retrieval passed, filling accuracy over queries
whose selection also passed, so their product is the joint success rate.
``joint`` mode reports unconditional stage rates instead.
"""

from __future__ import annotations

import json
import logging
import statistics
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Any, Iterable, Mapping, Sequence

from .callparse import DEFAULT_POLICY, MatchPolicy, ToolCall, UnknownToolError, match_call_set, tool_name_set_match
from .pipeline import FAIL, PASS, SKIPPED, InferenceOutcome, PipelineConfig, run_query
from .retrieval import RetrieverConfig, index_kb, recall_at_k, retrieve
from .tooldoc import ToolKnowledgeBase

logger = logging.getLogger(__name__)

METRICS = ("retrieval_recall", "tool_selection_acc", "parameter_filling_acc", "final_acc")
LEVEL_METRIC = {"retrieval": "retrieval_recall", "tool": "tool_selection_acc", "parameter": "parameter_filling_acc"}


def answer_key(calls: Iterable[ToolCall], by: str = "calls") -> str:
    """Order-free serialization of an answer (call multiset, or tool-name multiset)."""
    if by == "names":
        return json.dumps(sorted(c.name for c in calls))
    if by == "calls":
        return json.dumps(sorted(c.key() for c in calls))
    raise ValueError(f"unknown answer keying {by!r}")


@dataclass(frozen=True)
class ValidationExample:
    query: str
    expected_tools: frozenset
    expected_calls: tuple
    source: str = "synthetic"
    entity_key: str = ""
    candidates: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "expected_tools", frozenset(self.expected_tools))
        object.__setattr__(self, "expected_calls", tuple(self.expected_calls))
        if not self.expected_calls:
            raise ValueError(f"example {self.query[:40]!r} has no expected calls")
        missing = {c.name for c in self.expected_calls} - self.expected_tools
        if missing:
            raise ValueError(f"expected calls name tools outside expected_tools: {sorted(missing)}")
        if not self.entity_key:
            object.__setattr__(self, "entity_key", answer_key(self.expected_calls))

    def to_dict(self) -> dict:
        return {
            "query": self.query,
            "expected_tools": sorted(self.expected_tools),
            "expected_calls": [c.to_dict() for c in self.expected_calls],
            "source": self.source,
            "entity_key": self.entity_key,
            "candidates": list(self.candidates),
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "ValidationExample":
        calls = tuple(ToolCall.from_dict(c) for c in data["expected_calls"])
        return cls(
            query=data["query"],
            expected_tools=frozenset(data.get("expected_tools") or {c.name for c in calls}),
            expected_calls=calls,
            source=data.get("source", "synthetic"),
            entity_key=data.get("entity_key", ""),
            candidates=tuple(data.get("candidates", ())),
        )


@dataclass(frozen=True)
class MismatchRecord:
    level: str
    query: str
    expected_tools: tuple = ()
    actual_tools: tuple = ()
    expected_calls: tuple = ()
    actual_calls: tuple = ()
    model_response_excerpt: str = ""
    param_coverage_ratio: float | None = None
    param_all_match: bool | None = None
    index: int = 0

    def tools_named(self) -> set[str]:
        names = set(self.expected_tools) | set(self.actual_tools)
        names |= {c.name for c in self.expected_calls} | {c.name for c in self.actual_calls}
        return names

    def context_key(self) -> str:
        return f"{self.level}:{self.query}"

    def to_dict(self) -> dict:
        return {
            "level": self.level,
            "query": self.query,
            "expected_tools": list(self.expected_tools),
            "actual_tools": list(self.actual_tools),
            "expected_calls": [c.to_dict() for c in self.expected_calls],
            "actual_calls": [c.to_dict() for c in self.actual_calls],
            "model_response_excerpt": self.model_response_excerpt,
            "param_coverage_ratio": self.param_coverage_ratio,
            "param_all_match": self.param_all_match,
            "index": self.index,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "MismatchRecord":
        data = dict(data)
        data["expected_tools"] = tuple(data.get("expected_tools", ()))
        data["actual_tools"] = tuple(data.get("actual_tools", ()))
        data["expected_calls"] = tuple(ToolCall.from_dict(c) for c in data.get("expected_calls", ()))
        data["actual_calls"] = tuple(ToolCall.from_dict(c) for c in data.get("actual_calls", ()))
        return cls(**data)


@dataclass(frozen=True)
class EvalConfig:
    pipeline: PipelineConfig = PipelineConfig()
    retriever: RetrieverConfig = RetrieverConfig()
    policy: MatchPolicy = DEFAULT_POLICY
    mode: str = "product"  # "product" | "joint"
    recall_averaging: str = "per_query"  # "per_query" | "per_tool"
    workers: int = 1

    def __post_init__(self):
        if self.mode not in ("product", "joint"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.recall_averaging not in ("per_query", "per_tool"):
            raise ValueError(f"unknown recall averaging {self.recall_averaging!r}")

    @property
    def k(self) -> int:
        return self.pipeline.k


@dataclass(frozen=True)
class EvalReport:
    retrieval_recall: float
    tool_selection_acc: float
    parameter_filling_acc: float
    final_acc: float
    final_acc_joint: float
    per_query: tuple
    mismatches: tuple
    kb_snapshot_id: str
    mode: str = "product"
    complete: bool = True
    n_errored: int = 0

    def metric(self, name: str) -> float:
        if name in ("final_acc_product", "final_acc"):
            return self.final_acc
        return getattr(self, name)

    def metrics(self) -> dict[str, float]:
        return {m: getattr(self, m) for m in METRICS}

    def to_dict(self) -> dict:
        return {
            "retrieval_recall": self.retrieval_recall,
            "tool_selection_acc": self.tool_selection_acc,
            "parameter_filling_acc": self.parameter_filling_acc,
            "final_acc": self.final_acc,
            "final_acc_joint": self.final_acc_joint,
            "mode": self.mode,
            "complete": self.complete,
            "n_errored": self.n_errored,
            "kb_snapshot_id": self.kb_snapshot_id,
            "per_query": [o.to_dict() for o in self.per_query],
            "mismatches": [m.to_dict() for m in self.mismatches],
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "EvalReport":
        data = dict(data)
        data["per_query"] = tuple(InferenceOutcome.from_dict(o) for o in data["per_query"])
        data["mismatches"] = tuple(MismatchRecord.from_dict(m) for m in data["mismatches"])
        return cls(**data)


def final_accuracy(recall: float, selection: float, filling: float) -> float:
    """Joint accuracy under conditional stage composition."""
    return recall * selection * filling


def _ratio(num: int, den: int) -> float:
    return num / den if den else 0.0


def _score(outcome: InferenceOutcome, ex: ValidationExample, kb: ToolKnowledgeBase, cfg: EvalConfig):
    """Attach stage statuses. Also returns the unconditional filling verdict."""
    if outcome.errored:
        return replace(outcome, retrieval_ok=FAIL, selection_ok=FAIL, filling_ok=FAIL), False
    retrieval = PASS if recall_at_k(outcome.retrieved, ex.expected_tools, cfg.k) else FAIL
    selection = PASS if tool_name_set_match(outcome.predicted_calls, ex.expected_calls) else FAIL
    try:
        verdict = match_call_set(outcome.predicted_calls, ex.expected_calls, kb, cfg.policy)
        fill_match, coverage = verdict.match, verdict.param_coverage_ratio
    except UnknownToolError:
        fill_match, coverage = False, 0.0
    filling = (PASS if fill_match else FAIL) if selection == PASS else SKIPPED
    scored = replace(
        outcome,
        retrieval_ok=retrieval,
        selection_ok=selection,
        filling_ok=filling,
        param_coverage_ratio=coverage if selection == PASS else None,
    )
    return scored, fill_match


def _mismatch(i: int, o: InferenceOutcome, ex: ValidationExample) -> MismatchRecord | None:
    if o.errored:
        return None
    common = dict(query=ex.query, model_response_excerpt=o.reasoning_excerpt, index=i,
                  expected_tools=tuple(sorted(ex.expected_tools)))
    if o.retrieval_ok == FAIL:
        return MismatchRecord("retrieval", actual_tools=tuple(o.retrieved_names()), **common)
    if o.selection_ok == FAIL:
        return MismatchRecord("tool", actual_tools=tuple(c.name for c in o.predicted_calls),
                              expected_calls=ex.expected_calls, actual_calls=o.predicted_calls, **common)
    if o.filling_ok == FAIL:
        return MismatchRecord("parameter", actual_tools=tuple(c.name for c in o.predicted_calls),
                              expected_calls=ex.expected_calls, actual_calls=o.predicted_calls,
                              param_coverage_ratio=o.param_coverage_ratio, param_all_match=False, **common)
    return None


def aggregate(outcomes: Sequence[InferenceOutcome], dataset: Sequence[ValidationExample], kb: ToolKnowledgeBase,
              cfg: EvalConfig) -> EvalReport:
    """Score raw outcomes against the dataset and fold them into a report."""
    scored, uncond_fill = [], []
    for o, ex in zip(outcomes, dataset):
        s, f = _score(o, ex, kb, cfg)
        scored.append(s)
        uncond_fill.append(f)
    n = len(scored)
    r_pass = [o.retrieval_ok == PASS for o in scored]
    s_pass = [o.selection_ok == PASS for o in scored]
    f_pass = [o.filling_ok == PASS for o in scored]
    n_r = sum(r_pass)
    n_rs = sum(r and s for r, s in zip(r_pass, s_pass))
    n_all = sum(r and s and f for r, s, f in zip(r_pass, s_pass, f_pass))

    if cfg.recall_averaging == "per_tool":
        hit = tot = 0
        for o, ex in zip(scored, dataset):
            top = set(o.retrieved_names()[: cfg.k])
            hit += len(ex.expected_tools & top)
            tot += len(ex.expected_tools)
        recall = _ratio(hit, tot)
    else:
        recall = _ratio(n_r, n)

    joint = _ratio(n_all, n)
    if cfg.mode == "product":
        selection = _ratio(n_rs, n_r)
        filling = _ratio(n_all, n_rs)
        final = final_accuracy(recall, selection, filling)
    else:
        selection = _ratio(sum(s_pass), n)
        filling = _ratio(sum(uncond_fill), n)
        final = joint

    mismatches = tuple(m for i, (o, ex) in enumerate(zip(scored, dataset)) if (m := _mismatch(i, o, ex)))
    n_err = sum(o.errored for o in scored)
    if n_err:
        logger.warning("%d of %d queries errored; report marked incomplete", n_err, n)
    return EvalReport(
        retrieval_recall=recall,
        tool_selection_acc=selection,
        parameter_filling_acc=filling,
        final_acc=final,
        final_acc_joint=joint,
        per_query=tuple(scored),
        mismatches=mismatches,
        kb_snapshot_id=kb.snapshot_id,
        mode=cfg.mode,
        complete=n_err == 0,
        n_errored=n_err,
    )


def _run_all(kb, index, queries, backend, cfg: EvalConfig) -> list[InferenceOutcome]:
    if cfg.workers > 1 and len(queries) > 1:
        with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
            return list(pool.map(lambda q: run_query(kb, index, q, backend, cfg.pipeline), queries))
    return [run_query(kb, index, q, backend, cfg.pipeline) for q in queries]


def evaluate_set(kb: ToolKnowledgeBase, dataset: Sequence[ValidationExample], backend,
                 cfg: EvalConfig = EvalConfig(), embedder=None) -> EvalReport:
    if not dataset:
        raise ValueError("empty dataset")
    index = index_kb(kb, cfg.retriever, embedder)
    outcomes = _run_all(kb, index, [ex.query for ex in dataset], backend, cfg)
    return aggregate(outcomes, dataset, kb, cfg)


def collect_mismatches(report: EvalReport, level: str) -> list[MismatchRecord]:
    if not report.complete:
        raise ValueError("cannot collect mismatches from an incomplete report")
    return [m for m in report.mismatches if m.level == level]


class LineageError(ValueError):
    """The previous report was not produced on the parent of the new snapshot."""


def cached_reevaluate(prev_report: EvalReport, kb_new: ToolKnowledgeBase, touched_tools: Iterable[str],
                      dataset: Sequence[ValidationExample], backend, cfg: EvalConfig = EvalConfig(),
                      embedder=None) -> EvalReport:
    """Re-evaluate after an edit, re-running inference only where it can differ.

    Retrieval is recomputed for every query (it is local and cheap, and an
    edited retrieval text shifts corpus statistics for everyone). Inference is
    re-run when the candidate list changed, when a candidate or an expected
    tool was touched, or when the previous attempt errored.
    """
    if kb_new.snapshot_id != prev_report.kb_snapshot_id and kb_new.parent_id != prev_report.kb_snapshot_id:
        raise LineageError(f"report {prev_report.kb_snapshot_id} is not the parent of {kb_new.snapshot_id}")
    if len(prev_report.per_query) != len(dataset) or any(
        o.query != ex.query for o, ex in zip(prev_report.per_query, dataset)
    ):
        raise LineageError("previous report was computed on a different dataset")
    touched = set(touched_tools)
    index = index_kb(kb_new, cfg.retriever, embedder)
    outcomes = []
    for old, ex in zip(prev_report.per_query, dataset):
        new_retrieved = tuple(retrieve(index, ex.query, cfg.k)) if len(index) else ()
        names = [n for n, _ in new_retrieved]
        stale = (
            old.errored
            or names != old.retrieved_names()
            or touched & set(names)
            or touched & ex.expected_tools
        )
        if stale:
            outcomes.append(run_query(kb_new, index, ex.query, backend, cfg.pipeline))
        else:
            outcomes.append(replace(old, retrieved=new_retrieved, snapshot_id=kb_new.snapshot_id,
                                    retrieval_ok=None, selection_ok=None, filling_ok=None,
                                    param_coverage_ratio=None))
    return aggregate(outcomes, dataset, kb_new, cfg)


def summarize_trials(reports: Sequence[EvalReport]) -> dict[str, tuple[float, float]]:
    """Mean and sample standard deviation of each metric across trials."""
    out = {}
    for m in METRICS:
        values = [getattr(r, m) for r in reports]
        out[m] = (statistics.fmean(values), statistics.stdev(values) if len(values) > 1 else 0.0)
    return out


def format_summary(report: EvalReport | None = None, trials: Mapping[str, tuple[float, float]] | None = None) -> str:
    labels = {
        "retrieval_recall": "Retrieval Recall",
        "tool_selection_acc": "Tool Selection",
        "parameter_filling_acc": "Parameter Filling",
        "final_acc": "Final Acc.",
    }
    rows = []
    for m in METRICS:
        if trials is not None:
            mean, sd = trials[m]
            rows.append(f"{labels[m]:<18} {100 * mean:6.1f} ± {100 * sd:.1f}")
        else:
            rows.append(f"{labels[m]:<18} {100 * getattr(report, m):6.1f}")
    if report is not None and not report.complete:
        rows.append(f"INCOMPLETE: {report.n_errored} queries errored")
    return "\n".join(rows)
