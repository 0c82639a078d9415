"""Editor frontends for the retrieval, tool and parameter levels.

Each editor gets a guided instruction (task, evidence, edit history, allowed
actions, examples), answers with an ANALYSIS section plus a JSON block of
replacement contents, and its proposal is then restricted to the tools that
appear in the evidence.
"""

from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass, field, replace
from importlib import resources
from typing import Any, Iterable, Mapping, Sequence

from .evalharness import MismatchRecord
from .llmclient import BackendError, CompletionRequest, EmptyResponseError
from .prompts import HEADERS, HISTORY_LABEL, RETRY_SUFFIX, SUMMARY_PROMPT, TEMPLATES
from .tooldoc import LEVELS, ParameterSpec, ToolDocument, ToolKnowledgeBase, validate_content

logger = logging.getLogger(__name__)

HISTORY_LIMIT = 10
DEFAULT_ICL_CAP = 4
MAX_PARSE_RETRIES = 2


class EditorParseError(ValueError):
    def __init__(self, message: str, raw: str):
        super().__init__(message)
        self.raw = raw


@dataclass(frozen=True)
class EditProposal:
    level: str
    analysis: str
    modifications: Mapping[str, Any]
    source_mismatches: tuple = ()
    pre_score: float | None = None
    post_score: float | None = None
    accepted: bool | None = None
    iteration: int | None = None
    prompt: str = ""
    raw_response: str = ""
    dropped: tuple = ()  # (tool, reason) pairs removed by enforcement
    before: Mapping[str, Any] = field(default_factory=dict)  # prior content of edited tools

    def tools(self) -> list[str]:
        return sorted(self.modifications)

    @property
    def delta(self) -> float | None:
        if self.pre_score is None or self.post_score is None:
            return None
        return self.post_score - self.pre_score

    def context_key(self) -> str:
        return "|".join(sorted(m.context_key() for m in self.source_mismatches))

    def to_dict(self) -> dict:
        return {
            "level": self.level,
            "analysis": self.analysis,
            "modifications": {k: _content_to_json(v) for k, v in self.modifications.items()},
            "source_mismatches": [m.to_dict() for m in self.source_mismatches],
            "pre_score": self.pre_score,
            "post_score": self.post_score,
            "accepted": self.accepted,
            "iteration": self.iteration,
            "prompt": self.prompt,
            "raw_response": self.raw_response,
            "dropped": [list(d) for d in self.dropped],
            "before": {k: _content_to_json(v) for k, v in self.before.items()},
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "EditProposal":
        level = data["level"]
        mods = {k: _content_from_json(level, v) for k, v in data.get("modifications", {}).items()}
        return cls(
            level=level,
            analysis=data.get("analysis", ""),
            modifications=mods,
            source_mismatches=tuple(MismatchRecord.from_dict(m) for m in data.get("source_mismatches", ())),
            pre_score=data.get("pre_score"),
            post_score=data.get("post_score"),
            accepted=data.get("accepted"),
            iteration=data.get("iteration"),
            prompt=data.get("prompt", ""),
            raw_response=data.get("raw_response", ""),
            dropped=tuple(tuple(d) for d in data.get("dropped", ())),
            before={k: _content_from_json(level, v) for k, v in data.get("before", {}).items()},
        )


def _content_to_json(content):
    if isinstance(content, str):
        return content
    return [p.to_dict() for p in content]


def _content_from_json(level, content):
    if level == "parameter":
        return tuple(ParameterSpec.from_dict(p) for p in content)
    return content


@dataclass(frozen=True)
class ICLExample:
    level: str
    tool: str
    before: Any
    after: Any
    outcome: str  # "accepted" | "rejected"
    delta: float | None = None


def load_icl_fixtures() -> list[ICLExample]:
    raw = json.loads(resources.files("toolctx").joinpath("data/icl_examples.json").read_text())
    return [ICLExample(e["level"], e["tool"], e["before"], e["after"], e["outcome"]) for e in raw["examples"]]


def icl_from_history(history: Iterable[EditProposal]) -> list[ICLExample]:
    """Turn evaluated proposals into ICL examples, most recent first."""
    out = []
    for p in reversed(list(history)):
        if p.accepted is None or p.post_score is None:
            continue
        for tool, after in p.modifications.items():
            before = p.before.get(tool)
            out.append(ICLExample(p.level, tool, None if before is None else _content_to_json(before),
                                  _content_to_json(after), "accepted" if p.accepted else "rejected", p.delta))
    return out


def select_icl(level: str, history: Sequence[EditProposal] = (), fixtures: Sequence[ICLExample] | None = None,
               cap: int = DEFAULT_ICL_CAP) -> list[ICLExample]:
    fixtures = load_icl_fixtures() if fixtures is None else fixtures
    ranked = [e for e in icl_from_history(history) if e.level == level]
    ranked += [e for e in fixtures if e.level == level]
    return ranked[:cap]


# -- rendering ----------------------------------------------------------------


def _param_json(p: ParameterSpec) -> dict:
    out = {"name": p.name, "description": p.description, "type": "|".join(p.kinds()), "required": p.required}
    if p.default_value is not None:
        out["default"] = p.default_value
    if p.example_values:
        out["examples"] = list(p.example_values)
    return out


def _current_contents(level: str, docs: Sequence[ToolDocument]) -> list[dict]:
    if level == "retrieval":
        return [{"name": d.name, "retrieval content": d.retrieval_content} for d in docs]
    if level == "tool":
        return [{"name": d.name, "description": d.description} for d in docs]
    return [{"name": d.name, "tools": [_param_json(p) for p in d.parameters]} for d in docs]


def _mismatch_json(level: str, m: MismatchRecord) -> dict:
    if level == "retrieval":
        return {
            "query": m.query,
            "expected_tools": list(m.expected_tools),
            "retrieved_tools": list(m.actual_tools),
            "retrieval_response": m.model_response_excerpt,
        }
    if level == "tool":
        return {
            "query": m.query,
            "expected_tools": list(m.expected_tools),
            "actual_tools": list(m.actual_tools),
            "model_response": m.model_response_excerpt,
        }
    return {
        "query": m.query,
        "param_coverage_ratio": m.param_coverage_ratio,
        "param_all_match": bool(m.param_all_match),
        "tools_schema_expected": [c.to_dict() for c in m.expected_calls],
        "tools_schema_actual": [c.to_dict() for c in m.actual_calls],
    }


def _history_line(p: EditProposal) -> str:
    outcome = {True: "accepted", False: "rejected", None: "not evaluated"}[p.accepted]
    tools = ", ".join(p.tools()) or "(nothing applied)"
    if p.delta is None:
        return f"- iteration {p.iteration}: edited {tools}; {outcome}"
    return f"- iteration {p.iteration}: edited {tools}; {outcome} (score {p.pre_score:.4f} -> {p.post_score:.4f}, delta {p.delta:+.4f})"


def _icl_text(ex: ICLExample, n: int) -> str:
    delta = "" if ex.delta is None else f", score delta {ex.delta:+.4f}"
    before = ex.before if isinstance(ex.before, str) or ex.before is None else json.dumps(ex.before)
    after = ex.after if isinstance(ex.after, str) else json.dumps(ex.after)
    return f"Example {n} ({ex.tool}, {ex.outcome}{delta}):\nBefore: {before if before is not None else '(not recorded)'}\nAfter: {after}"


def allowed_tools(level: str, mismatches: Iterable[MismatchRecord]) -> set[str]:
    """Tools an editor may touch for the given evidence."""
    names: set[str] = set()
    for m in mismatches:
        if level == "parameter":
            names |= {c.name for c in m.expected_calls}
        else:
            names |= m.tools_named()
    return names


def build_instruction(level: str, kb: ToolKnowledgeBase, mismatches: Sequence[MismatchRecord],
                      state: Sequence[EditProposal] = (), icl: Sequence[ICLExample] = ()) -> str:
    """Render the guided instruction for one editor call."""
    if level not in LEVELS:
        raise ValueError(f"unknown level {level!r}")
    if not mismatches:
        raise ValueError("an editor instruction needs at least one mismatch")
    wrong = [m.level for m in mismatches if m.level != level]
    if wrong:
        raise ValueError(f"{level} editor given mismatches from levels {sorted(set(wrong))}")
    t = TEMPLATES[level]
    names = sorted(n for n in allowed_tools(level, mismatches) if n in kb)
    docs = [kb[n] for n in names]
    history = [p for p in state if p.level == level][-HISTORY_LIMIT:]

    parts = [
        t["title"],
        f"{HEADERS['task_description']}\n{t['task_description']}",
        "\n".join([
            HEADERS["input_data"],
            f"{t['contents_label']}: {json.dumps(_current_contents(level, docs), indent=2, ensure_ascii=False)}",
            f"{t['mismatch_label']}: {json.dumps([_mismatch_json(level, m) for m in mismatches], indent=2, ensure_ascii=False)}",
            f"{HISTORY_LABEL}:",
            *([_history_line(p) for p in history] or ["- none yet"]),
        ]),
        f"{HEADERS['analysis_task']}\n{t['analysis_task']}",
        "\n".join([t["issues_header"], *(f"- {b}" for b in t["common_issues"])]),
        "\n".join([HEADERS["output_format"], *t["output_format"]]),
        "\n".join([HEADERS["requirements"], *(f"- {r}" for r in t["requirements"])]),
        "\n".join([HEADERS["icl_examples"], *([_icl_text(e, i + 1) for i, e in enumerate(icl)] or ["(none yet)"])]),
    ]
    return "\n\n".join(parts) + "\n"


# -- parsing ------------------------------------------------------------------

_ANALYSIS = re.compile(r"ANALYSIS", re.I)
_IMPROVED = re.compile(r"IMPROVED[\w ]*?(?:DESCRIPTIONS|SCHEMAS|CONTENTS)", re.I)


def _first_json(text: str, start: int):
    decoder = json.JSONDecoder()
    for m in re.finditer(r"[\[{]", text[start:]):
        try:
            value, _ = decoder.raw_decode(text, start + m.start())
            return value
        except json.JSONDecodeError:
            continue
    return None


def _entries(value) -> list[dict]:
    if isinstance(value, dict):
        if any(k in value for k in ("name", "Tool Name", "tool_name")):
            return [value]
        # {"tool": content, ...}
        return [{"name": k, "__content__": v} for k, v in value.items()]
    if isinstance(value, list):
        out = []
        for v in value:
            out.extend(_entries(v) if isinstance(v, dict) else [])
        return out
    return []


def _entry_name(e: dict) -> str:
    for key in ("name", "Tool Name", "tool_name"):
        if key in e:
            return str(e[key]).strip()
    raise ValueError("entry without a tool name")


def _text_content(e: dict, keys: Sequence[str]):
    if "__content__" in e:
        return e["__content__"]
    for key in keys:
        if key in e:
            return e[key]
    raise ValueError(f"entry for {_entry_name(e)!r} lacks any of {list(keys)}")


def _param_list(raw) -> tuple[ParameterSpec, ...]:
    if isinstance(raw, dict):
        raw = [raw]
    if not isinstance(raw, list):
        raise ValueError("parameter schema must be a list")
    specs = []
    for item in raw:
        if not isinstance(item, dict):
            raise ValueError("parameter entries must be objects")
        if "name" in item:
            specs.append(ParameterSpec.from_dict(item))
        else:  # compact {"param": "type"} form
            specs.extend(ParameterSpec.from_dict({"name": k, "type": v}) for k, v in item.items())
    return tuple(specs)


def parse_editor_output(text: str, level: str) -> EditProposal:
    """Extract the analysis and modifications; raises :class:`EditorParseError` only."""
    try:
        return _parse(text, level)
    except EditorParseError:
        raise
    except Exception as exc:  # any malformed shape is a parse failure, never a crash
        raise EditorParseError(f"malformed editor output: {exc}", text) from None


def _parse(text: str, level: str) -> EditProposal:
    if level not in LEVELS:
        raise EditorParseError(f"unknown level {level!r}", text)
    if not isinstance(text, str):
        raise EditorParseError("editor output is not text", str(text))
    improved = _IMPROVED.search(text)
    if improved is None:
        raise EditorParseError("missing IMPROVED section", text)
    analysis = _ANALYSIS.search(text, 0, improved.start())
    if analysis is None:
        raise EditorParseError("missing ANALYSIS section", text)
    analysis_text = text[analysis.end():improved.start()].strip(" \t\n:—-*#`")
    value = _first_json(text, improved.end())
    if value is None:
        raise EditorParseError("no JSON value after the IMPROVED header", text)
    mods: dict[str, Any] = {}
    for e in _entries(value):
        name = _entry_name(e)
        if level == "retrieval":
            content = _text_content(e, ("retrieval content", "retrieval_content", "content"))
            if not isinstance(content, str):
                raise ValueError(f"retrieval content for {name!r} is not text")
        elif level == "tool":
            content = _text_content(e, ("description",))
            if not isinstance(content, str):
                raise ValueError(f"description for {name!r} is not text")
        else:
            content = _param_list(_text_content(e, ("tools", "parameters")))
        mods[name] = content.strip() if isinstance(content, str) else content
    if not mods:
        raise EditorParseError("IMPROVED section holds no tool entries", text)
    return EditProposal(level=level, analysis=analysis_text, modifications=mods, raw_response=text)


def enforce_constraints(proposal: EditProposal, allowed: Iterable[str], kb: ToolKnowledgeBase):
    """Drop modifications outside ``allowed`` or failing validation.

    Returns ``(enforced_proposal, dropped)``. A proposal left with nothing is
    marked rejected.
    """
    allowed = set(allowed)
    kept: dict[str, Any] = {}
    dropped: list[tuple[str, str]] = []
    for name, content in proposal.modifications.items():
        if name not in allowed:
            dropped.append((name, "tool not named in the mismatch examples"))
        elif name not in kb:
            dropped.append((name, "tool not in knowledge base"))
        else:
            violations = validate_content(proposal.level, content)
            if violations:
                dropped.append((name, "; ".join(violations)))
            else:
                kept[name] = content
    for name, reason in dropped:
        logger.warning("dropping %s-level edit of %r: %s", proposal.level, name, reason)
    enforced = replace(proposal, modifications=kept, dropped=tuple(dropped))
    if not kept:
        enforced = replace(enforced, accepted=False)
    return enforced, dropped


def request_proposal(level: str, kb: ToolKnowledgeBase, mismatches: Sequence[MismatchRecord], backend,
                     state: Sequence[EditProposal] = (), icl: Sequence[ICLExample] = (),
                     retries: int = MAX_PARSE_RETRIES, model: str = "default") -> EditProposal | None:
    """Ask the editor for a proposal, retrying malformed answers.

    Returns None when every attempt was unparseable. Backend errors propagate.
    """
    prompt = build_instruction(level, kb, mismatches, state, icl)
    attempt_prompt = prompt
    for attempt in range(retries + 1):
        response = backend.complete(CompletionRequest(attempt_prompt, model=model, role=f"editor_{level}"))
        try:
            proposal = parse_editor_output(response.text, level)
        except EditorParseError as exc:
            logger.info("editor output unparseable (attempt %d): %s", attempt + 1, exc)
            attempt_prompt = prompt + RETRY_SUFFIX.format(error=exc)
            continue
        return replace(proposal, source_mismatches=tuple(mismatches), prompt=prompt)
    return None


def generate_retrieval_content(doc: ToolDocument, backend, model: str = "default") -> str:
    """Ask a model for the retrieval summary of ``doc``."""
    if not doc.description.strip() and not doc.parameters:
        raise ValueError(f"tool {doc.name!r} has neither description nor schema to summarize")
    document = json.dumps(
        {"name": doc.name, "description": doc.description, "parameters": [_param_json(p) for p in doc.parameters]},
        indent=2,
        ensure_ascii=False,
    )
    response = backend.complete(CompletionRequest(SUMMARY_PROMPT.format(document=document), model=model, role="summarizer"))
    text = response.text.strip()
    if not text:
        raise EmptyResponseError(f"empty summary for {doc.name!r}")
    return text
