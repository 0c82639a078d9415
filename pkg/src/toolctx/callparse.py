"""Parsing model output into tool calls, and schema-aware call matching.

Two output forms are accepted: keyword call expressions such as
``f(a=1, b=[2, 3])`` (several per text, separated by commas or newlines) and
a JSON array of ``{"name": ..., "arguments": {...}}`` objects.
"""

from __future__ import annotations

import ast
import json
import math
import re
from collections import Counter
from dataclasses import dataclass, field
from typing import Any, Iterable, Mapping, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from .tooldoc import ToolDocument, ToolKnowledgeBase

EXHAUSTIVE_LIMIT = 6


class CallSyntaxError(ValueError):
    def __init__(self, message: str, position: int | None = None):
        super().__init__(message if position is None else f"{message} (at offset {position})")
        self.position = position


def canonical_value(value: Any) -> Any:
    """Canonical form of a call argument value.

    Strings are trimmed, integral reals become ints, tuples become lists.
    ``None`` and non-finite reals are rejected.
    """
    if isinstance(value, bool):
        return value
    if isinstance(value, int):
        return int(value)
    if isinstance(value, float):
        if not math.isfinite(value):
            raise ValueError(f"non-finite real {value!r}")
        return int(value) if value.is_integer() else value
    if isinstance(value, str):
        return value.strip()
    if isinstance(value, (list, tuple)):
        return [canonical_value(v) for v in value]
    if isinstance(value, dict):
        return {str(k): canonical_value(v) for k, v in value.items()}
    if value is None:
        raise ValueError("null values are not supported")
    raise ValueError(f"unsupported value type {type(value).__name__}")


@dataclass(frozen=True)
class ToolCall:
    name: str
    args: dict = field(default_factory=dict)

    @classmethod
    def make(cls, name: str, args: Mapping[str, Any] | None = None) -> "ToolCall":
        return cls(str(name).strip(), {str(k): canonical_value(v) for k, v in (args or {}).items()})

    def to_dict(self) -> dict:
        return {"name": self.name, "arguments": self.args}

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "ToolCall":
        args = data.get("arguments", data.get("args", {}))
        if isinstance(args, str):
            args = json.loads(args) if args.strip() else {}
        return cls.make(data["name"], args)

    def key(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def calls_to_json(calls: Iterable[ToolCall]) -> str:
    return json.dumps([c.to_dict() for c in calls])


# -- parsing ------------------------------------------------------------------

_JSON_LITERALS = {"true": True, "false": False}


def _literal(node: ast.AST, text: str) -> Any:
    if isinstance(node, ast.Name) and node.id in _JSON_LITERALS:
        return _JSON_LITERALS[node.id]
    if isinstance(node, ast.List | ast.Tuple):
        return [_literal(e, text) for e in node.elts]
    if isinstance(node, ast.Dict):
        out = {}
        for k, v in zip(node.keys, node.values):
            if k is None:
                raise CallSyntaxError("dict unpacking is not a literal", _offset(text, node))
            out[str(_literal(k, text))] = _literal(v, text)
        return out
    try:
        value = ast.literal_eval(node)
    except (ValueError, SyntaxError, TypeError):
        raise CallSyntaxError(f"argument is not a literal: {ast.get_source_segment(text, node)!r}", _offset(text, node)) from None
    try:
        return canonical_value(value)
    except ValueError as exc:
        raise CallSyntaxError(str(exc), _offset(text, node)) from None


def _offset(text: str, node: ast.AST) -> int:
    lines = text.splitlines(keepends=True)
    lineno = getattr(node, "lineno", 1)
    return sum(len(line) for line in lines[: lineno - 1]) + getattr(node, "col_offset", 0)


def _func_name(node: ast.AST, text: str) -> str:
    if isinstance(node, ast.Name):
        return node.id
    if isinstance(node, ast.Attribute):
        return f"{_func_name(node.value, text)}.{node.attr}"
    raise CallSyntaxError("callee is not a name", _offset(text, node))


def _call(node: ast.AST, text: str) -> ToolCall:
    if not isinstance(node, ast.Call):
        raise CallSyntaxError("expected a call expression", _offset(text, node))
    name = _func_name(node.func, text)
    if node.args:
        raise CallSyntaxError(f"positional arguments in call to {name}", _offset(text, node.args[0]))
    args: dict[str, Any] = {}
    for kw in node.keywords:
        if kw.arg is None:
            raise CallSyntaxError(f"keyword unpacking in call to {name}", _offset(text, kw))
        if kw.arg in args:
            raise CallSyntaxError(f"duplicate keyword {kw.arg!r} in call to {name}", _offset(text, kw))
        args[kw.arg] = _literal(kw.value, text)
    return ToolCall(name, args)


def _parse_structured(text: str) -> list[ToolCall]:
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise CallSyntaxError(f"malformed JSON: {exc.msg}", exc.pos) from None
    if isinstance(data, dict):
        data = [data]
    if not isinstance(data, list):
        raise CallSyntaxError("structured calls must be a JSON array", 0)
    calls = []
    for i, item in enumerate(data):
        if not isinstance(item, dict) or "name" not in item:
            raise CallSyntaxError(f"element {i} is not a call object", 0)
        try:
            calls.append(ToolCall.from_dict(item))
        except (ValueError, TypeError, AttributeError) as exc:
            raise CallSyntaxError(f"element {i}: {exc}", 0) from None
    return calls


def parse_call_expression(text: str) -> list[ToolCall]:
    """Parse ``text`` into calls in textual order; raises :class:`CallSyntaxError`."""
    text = text.strip()
    if not text:
        return []
    if text[0] in "[{":
        return _parse_structured(text)
    try:
        tree = ast.parse(text, mode="exec")
    except SyntaxError as exc:
        lines = text.splitlines(keepends=True)
        pos = sum(len(line) for line in lines[: (exc.lineno or 1) - 1]) + max((exc.offset or 1) - 1, 0)
        raise CallSyntaxError(f"syntax error: {exc.msg}", pos) from None
    calls = []
    for stmt in tree.body:
        if not isinstance(stmt, ast.Expr):
            raise CallSyntaxError("expected call expressions only", _offset(text, stmt))
        nodes = stmt.value.elts if isinstance(stmt.value, ast.Tuple) else [stmt.value]
        calls.extend(_call(n, text) for n in nodes)
    return calls


_FENCE = re.compile(r"```[a-zA-Z]*\n(.*?)```", re.S)
_CALL_LINE = re.compile(r"^\s*[A-Za-z_][\w.]*\s*\(.*\)\s*,?\s*$")


def extract_calls(text: str) -> tuple[list[ToolCall], bool]:
    """Lenient extraction from free-form model output.

    Returns ``(calls, parsed)``; ``parsed`` is False when nothing call-shaped
    could be read. Tries, in order: the whole text, fenced blocks, the first
    JSON array, then individual call-shaped lines.
    """
    try:
        return parse_call_expression(text), True
    except CallSyntaxError:
        pass
    for block in _FENCE.findall(text):
        try:
            return parse_call_expression(block), True
        except CallSyntaxError:
            continue
    decoder = json.JSONDecoder()
    for m in re.finditer(r"\[", text):
        try:
            value, _ = decoder.raw_decode(text, m.start())
        except json.JSONDecodeError:
            continue
        if isinstance(value, list) and value and all(isinstance(v, dict) and "name" in v for v in value):
            try:
                return _parse_structured(json.dumps(value)), True
            except CallSyntaxError:
                continue
    calls = []
    for line in text.splitlines():
        if _CALL_LINE.match(line):
            try:
                calls.extend(parse_call_expression(line.strip().rstrip(",")))
            except CallSyntaxError:
                continue
    return calls, bool(calls)


# -- matching -----------------------------------------------------------------


@dataclass(frozen=True)
class MatchPolicy:
    string_normalization: str = "casefold_trim"  # or "exact"
    optional_param_rule: str = "contextual"  # or "strict"
    multi_call_rule: str = "all_or_nothing"
    order_rule: str = "order_insensitive_multiset"
    real_tolerance: float = 1e-9

    def __post_init__(self):
        if not self.real_tolerance >= 0:
            raise ValueError("real_tolerance must be non-negative")
        if self.string_normalization not in ("exact", "casefold_trim"):
            raise ValueError(f"unknown string normalization {self.string_normalization!r}")
        if self.optional_param_rule not in ("strict", "contextual"):
            raise ValueError(f"unknown optional parameter rule {self.optional_param_rule!r}")


DEFAULT_POLICY = MatchPolicy()


def normalize_string(s: str, policy: MatchPolicy) -> str:
    if policy.string_normalization == "exact":
        return s
    s = s.strip()
    while len(s) >= 2 and s[0] == s[-1] and s[0] in "'\"`":
        s = s[1:-1].strip()
    return s.casefold()


def values_equal(a: Any, b: Any, policy: MatchPolicy = DEFAULT_POLICY) -> bool:
    """Structural equality with string normalization and relative real tolerance.

    No cross-type coercion: the string ``"12"`` never equals the integer 12,
    and booleans never equal numbers.
    """
    if isinstance(a, bool) or isinstance(b, bool):
        return isinstance(a, bool) and isinstance(b, bool) and a == b
    if isinstance(a, (int, float)) and isinstance(b, (int, float)):
        if isinstance(a, int) and isinstance(b, int):
            return a == b
        return abs(a - b) <= policy.real_tolerance * max(abs(a), abs(b))
    if isinstance(a, str) and isinstance(b, str):
        return normalize_string(a, policy) == normalize_string(b, policy)
    if isinstance(a, (list, tuple)) and isinstance(b, (list, tuple)):
        return len(a) == len(b) and all(values_equal(x, y, policy) for x, y in zip(a, b))
    if isinstance(a, dict) and isinstance(b, dict):
        return a.keys() == b.keys() and all(values_equal(a[k], b[k], policy) for k in a)
    return False


@dataclass(frozen=True)
class CallVerdict:
    reasons: tuple[str, ...] = ()
    required_correct: int = 0
    required_total: int = 0

    @property
    def match(self) -> bool:
        return not self.reasons

    def __bool__(self) -> bool:
        return self.match


def match_call(
    predicted: ToolCall,
    expected: ToolCall,
    schema: ToolDocument,
    policy: MatchPolicy = DEFAULT_POLICY,
) -> CallVerdict:
    required = schema.required_names()
    if predicted.name != expected.name:
        return CallVerdict((f"name mismatch: expected {expected.name}, got {predicted.name}",), 0, len(required))

    reasons = []
    unknown = [p for p in predicted.args if schema.parameter(p) is None]
    reasons.extend(f"unknown parameter {p}" for p in unknown)
    correct = 0
    for spec in schema.parameters:
        name = spec.name
        has_pred, has_exp = name in predicted.args, name in expected.args
        if has_pred and not spec.accepts(predicted.args[name]):
            reasons.append(f"type mismatch for {name}: expected {spec.value_kind}")
            continue
        if spec.required:
            if not has_pred:
                reasons.append(f"missing required {name}")
            elif not has_exp or not values_equal(predicted.args[name], expected.args[name], policy):
                reasons.append(f"wrong value for {name}")
            else:
                correct += 1
            continue
        # optional parameter
        if has_pred and has_exp:
            if not values_equal(predicted.args[name], expected.args[name], policy):
                reasons.append(f"wrong value for {name}")
        elif has_pred or has_exp:
            present = predicted.args[name] if has_pred else expected.args[name]
            contextual_ok = (
                policy.optional_param_rule == "contextual"
                and spec.default_value is not None
                and values_equal(present, spec.default_value, policy)
            )
            if not contextual_ok:
                reasons.append(f"{'unexpected' if has_pred else 'missing'} optional {name}")
    return CallVerdict(tuple(reasons), correct, len(required))


@dataclass(frozen=True)
class SetVerdict:
    match: bool
    pairing: tuple[tuple[int, int | None], ...]  # (expected index, predicted index)
    param_coverage_ratio: float
    call_verdicts: tuple[CallVerdict | None, ...]

    def __bool__(self) -> bool:
        return self.match


class UnknownToolError(KeyError):
    pass


def _score_matrix(predicted, expected, kb, policy):
    verdicts = {}
    for i, e in enumerate(expected):
        if e.name not in kb:
            raise UnknownToolError(e.name)
        schema = kb[e.name]
        for j, p in enumerate(predicted):
            verdicts[i, j] = match_call(p, e, schema, policy)
    return verdicts


def _best_pairing_exhaustive(n_exp, n_pred, weight):
    best = [(-1, -1), None]

    def search(i, used, full, partial, assign):
        if i == n_exp:
            if (full, partial) > best[0]:
                best[0], best[1] = (full, partial), tuple(assign)
            return
        for j in range(n_pred):
            if j not in used:
                f, p = weight(i, j)
                used.add(j)
                assign.append(j)
                search(i + 1, used, full + f, partial + p, assign)
                assign.pop()
                used.discard(j)
        assign.append(None)
        search(i + 1, used, full, partial, assign)
        assign.pop()

    search(0, set(), 0, 0, [])
    return best[1]


def _best_pairing_assignment(n_exp, n_pred, weight, scale):
    w = np.zeros((n_exp, n_pred))
    for i in range(n_exp):
        for j in range(n_pred):
            full, partial = weight(i, j)
            w[i, j] = full * scale + partial
    rows, cols = linear_sum_assignment(w, maximize=True)
    assign = [None] * n_exp
    for r, c in zip(rows, cols):
        if w[r, c] > 0:
            assign[r] = int(c)
    return tuple(assign)


def match_call_set(
    predicted: Sequence[ToolCall],
    expected: Sequence[ToolCall],
    kb: ToolKnowledgeBase,
    policy: MatchPolicy = DEFAULT_POLICY,
    exhaustive_limit: int = EXHAUSTIVE_LIMIT,
) -> SetVerdict:
    """Multiset matching of predicted against expected calls.

    The best pairing maximizes, lexicographically, the number of fully matched
    pairs and then the number of correctly filled required parameters. The
    verdict is a match only when every call on both sides is fully matched.
    """
    verdicts = _score_matrix(predicted, expected, kb, policy)

    def weight(i, j):
        v = verdicts[i, j]
        return (1 if v.match else 0, v.required_correct)

    n_exp, n_pred = len(expected), len(predicted)
    if n_exp == 0 or n_pred == 0:
        assign = (None,) * n_exp
    elif max(n_exp, n_pred) <= exhaustive_limit:
        assign = _best_pairing_exhaustive(n_exp, n_pred, weight)
    else:
        total_required = sum(len(kb[e.name].required_names()) for e in expected)
        assign = _best_pairing_assignment(n_exp, n_pred, weight, total_required + 1)

    total_required = sum(len(kb[e.name].required_names()) for e in expected)
    full = sum(1 for i, j in enumerate(assign) if j is not None and verdicts[i, j].match)
    correct = sum(verdicts[i, j].required_correct for i, j in enumerate(assign) if j is not None)
    ok = n_exp == n_pred and full == n_exp
    coverage = 1.0 if total_required == 0 else correct / total_required
    return SetVerdict(
        match=ok,
        pairing=tuple(enumerate(assign)),
        param_coverage_ratio=coverage,
        call_verdicts=tuple(verdicts[i, j] if j is not None else None for i, j in enumerate(assign)),
    )


def tool_name_set_match(predicted: Iterable[ToolCall], expected: Iterable[ToolCall]) -> bool:
    return Counter(c.name for c in predicted) == Counter(c.name for c in expected)
