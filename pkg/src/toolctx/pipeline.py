"""Staged inference: retrieve candidates, prompt the model, parse its calls."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace
from typing import Sequence

from .callparse import ToolCall, extract_calls
from .llmclient import BackendError, CompletionRequest
from .retrieval import RetrievalIndex, retrieve
from .tooldoc import ParameterSpec, ToolDocument, ToolKnowledgeBase

logger = logging.getLogger(__name__)

PASS, FAIL, SKIPPED = "pass", "fail", "skipped"
EXCERPT_CHARS = 2000

PROMPT_HEADER = (
    "You are a tool-calling assistant. Answer the user query by calling tools from the "
    "candidate list below. Use only the listed tools and their documented parameters."
)
OUTPUT_INSTRUCTION = (
    'Respond with a JSON array of calls, each of the form {"name": <tool name>, "arguments": '
    '{<parameter name>: <value>}}. Call a tool several times if the query needs it. '
    "Respond with [] if no listed tool applies."
)


@dataclass(frozen=True)
class PipelineConfig:
    k: int = 10
    model: str = "default"
    temperature: float = 0.0
    top_p: float = 1.0
    max_tokens: int = 4096


@dataclass(frozen=True)
class InferenceOutcome:
    query: str
    retrieved: tuple[tuple[str, float], ...]
    predicted_calls: tuple[ToolCall, ...]
    raw_response: str
    reasoning_excerpt: str = ""
    snapshot_id: str | None = None
    parsed: bool = True
    errored: bool = False
    error: str | None = None
    # set by the evaluation harness only
    retrieval_ok: str | None = None
    selection_ok: str | None = None
    filling_ok: str | None = None
    param_coverage_ratio: float | None = None

    def retrieved_names(self) -> list[str]:
        return [name for name, _ in self.retrieved]

    def to_dict(self) -> dict:
        return {
            "query": self.query,
            "retrieved": [[n, s] for n, s in self.retrieved],
            "predicted_calls": [c.to_dict() for c in self.predicted_calls],
            "raw_response": self.raw_response,
            "reasoning_excerpt": self.reasoning_excerpt,
            "snapshot_id": self.snapshot_id,
            "parsed": self.parsed,
            "errored": self.errored,
            "error": self.error,
            "retrieval_ok": self.retrieval_ok,
            "selection_ok": self.selection_ok,
            "filling_ok": self.filling_ok,
            "param_coverage_ratio": self.param_coverage_ratio,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "InferenceOutcome":
        data = dict(data)
        data["retrieved"] = tuple((n, float(s)) for n, s in data["retrieved"])
        data["predicted_calls"] = tuple(ToolCall.from_dict(c) for c in data["predicted_calls"])
        return cls(**data)


def _param_line(p: ParameterSpec) -> str:
    kind = "|".join(p.kinds())
    bits = [kind, "required" if p.required else "optional"]
    if p.default_value is not None:
        bits.append(f"default: {json.dumps(p.default_value)}")
    if p.example_values:
        bits.append(f"examples: {json.dumps(list(p.example_values))}")
    desc = " ".join(p.description.split())
    return f"- {p.name} ({', '.join(bits)}): {desc}"


def render_tool_block(rank: int, doc: ToolDocument) -> str:
    lines = [f"## Tool {rank}: {doc.name}", f"Description: {' '.join(doc.description.split())}", "Parameters:"]
    lines.extend(_param_line(p) for p in doc.parameters)
    if not doc.parameters:
        lines.append("- (none)")
    return "\n".join(lines)


def assemble_prompt(candidates: Sequence[ToolDocument], query: str) -> str:
    """Selection/filling prompt; tool blocks appear in the given (rank) order.

    Retrieval content is deliberately left out: it only serves retrieval.
    """
    if not candidates:
        raise ValueError("no candidate tools to prompt with")
    blocks = [render_tool_block(i + 1, d) for i, d in enumerate(candidates)]
    return "\n\n".join([PROMPT_HEADER, *blocks, f"## Query\n{query}", f"## Output format\n{OUTPUT_INSTRUCTION}"]) + "\n"


def run_query(
    kb: ToolKnowledgeBase,
    index: RetrievalIndex,
    query: str,
    backend,
    cfg: PipelineConfig = PipelineConfig(),
) -> InferenceOutcome:
    retrieved = tuple(retrieve(index, query, cfg.k)) if len(index) else ()
    base = InferenceOutcome(query=query, retrieved=retrieved, predicted_calls=(), raw_response="", snapshot_id=kb.snapshot_id)
    if not retrieved:
        return replace(base, parsed=False)
    prompt = assemble_prompt([kb[name] for name, _ in retrieved], query)
    request = CompletionRequest(prompt, model=cfg.model, temperature=cfg.temperature, top_p=cfg.top_p,
                                max_tokens=cfg.max_tokens, role="inference")
    try:
        response = backend.complete(request)
    except BackendError as exc:
        logger.warning("inference failed for query %r: %s", query[:60], exc)
        return replace(base, errored=True, error=str(exc), parsed=False)
    calls, parsed = extract_calls(response.text)
    return replace(
        base,
        predicted_calls=tuple(calls),
        raw_response=response.text,
        reasoning_excerpt=response.text[:EXCERPT_CHARS],
        parsed=parsed,
    )
