"""Desk-scale scenarios with planted documentation defects.

A scenario bundles a knowledge base, a labeled query set, a simulated
inference model and a scripted editor. The inference model reads the prompt
the way a careful but literal model would: it picks the candidate whose
description shares the most content words with the query, and fills
arguments from a per-query answer table, switching date formats only when
the parameter text spells out the expected format.
"""

from __future__ import annotations

import hashlib
import json
import random
import re
import string
from dataclasses import dataclass, replace
from typing import Any, Mapping

from .callparse import ToolCall
from .evalharness import EvalConfig, ValidationExample
from .llmclient import CompletionRequest, Route, ScriptedBackend
from .pipeline import PipelineConfig
from .prompts import TEMPLATES
from .retrieval import RetrieverConfig, terms
from .tooldoc import ParameterSpec, ToolDocument, ToolKnowledgeBase, summarize_document

DEFECTS = ("retrieval", "ambiguity", "param_format")
DEFECT_LEVEL = {"retrieval": "retrieval", "ambiguity": "tool", "param_format": "parameter"}
DATE_HINT = "YYYY-MM-DD"

STOPWORDS = frozenset(
    "a an and are as at be by for from get gets i in into is it its me my of on or please "
    "the to what with you your this that which".split()
)


def content_words(text: str) -> set[str]:
    return {t for t in terms(text) if t not in STOPWORDS}


@dataclass(frozen=True)
class Hinted:
    """An argument whose surface form depends on a format hint in the schema."""

    hint: str
    with_hint: Any
    without_hint: Any

    def to_dict(self) -> dict:
        return {"hint": self.hint, "with": self.with_hint, "without": self.without_hint}


def _answer_value(v):
    if isinstance(v, Mapping) and "hint" in v:
        return Hinted(v["hint"], v["with"], v["without"])
    return v


@dataclass(frozen=True)
class ScenarioSpec:
    tool_count: int = 10
    defects: tuple = DEFECTS
    queries_per_defect: int = 3
    k: int = 3

    def __post_init__(self):
        object.__setattr__(self, "defects", tuple(self.defects))
        unknown = [d for d in self.defects if d not in DEFECTS]
        if unknown:
            raise ValueError(f"unknown defects {unknown}")
        if len(set(self.defects)) != len(self.defects):
            raise ValueError("each defect may be planted once")
        if self.queries_per_defect < 1:
            raise ValueError("queries_per_defect must be >= 1")
        if not 4 <= self.tool_count <= len(_CATALOGUE):
            raise ValueError(f"tool_count must lie in [4, {len(_CATALOGUE)}] so the planted retrieval defect is outranked")
        if self.k < 1 or self.k >= self.tool_count:
            raise ValueError("k must be >= 1 and smaller than tool_count")

    def to_dict(self) -> dict:
        return {"tool_count": self.tool_count, "defects": list(self.defects),
                "queries_per_defect": self.queries_per_defect, "k": self.k}


@dataclass
class Scenario:
    kb: ToolKnowledgeBase
    examples: list
    answers: dict  # query -> tool -> param -> value | Hinted
    fixes: dict  # (level, tool) -> replacement content
    planted: dict  # query -> level it fails at on the initial kb
    k: int
    spec: Any = None

    def eval_config(self, **kw) -> EvalConfig:
        return EvalConfig(pipeline=PipelineConfig(k=self.k), retriever=RetrieverConfig(k=self.k), **kw)

    def inference_model(self) -> "SimulatedModel":
        return SimulatedModel(self.answers)

    def inference_backend(self) -> ScriptedBackend:
        return ScriptedBackend(routes=[Route(r"## Query\n", self.inference_model())], role="inference")

    def editor_backend(self) -> ScriptedBackend:
        """Editor that answers every planted mismatch with its fix."""
        routes = []
        for (level, tool), content in sorted(self.fixes.items()):
            title = re.escape(TEMPLATES[level]["title"])
            for q, lv in self.planted.items():
                if lv == level and tool in self.answers[q]:
                    qpat = re.escape(json.dumps(q, ensure_ascii=False)[1:-1])
                    routes.append(Route(rf"(?s)\A{title}.*{qpat}", editor_response(level, {tool: content})))
        return ScriptedBackend(routes=routes, default=NO_CHANGE_RESPONSE, role="editor")

    def random_editor_backend(self, seed: int = 0, **weights) -> ScriptedBackend:
        return ScriptedBackend(routes=[Route(r"Optimization Editor", RandomEditor(self, seed, **weights))], role="editor")

    def fixture(self) -> dict:
        """Portable description from which the CLI rebuilds the simulated backends."""
        return {"kind": "synthetic-scenario", "spec": self.spec.to_dict() if self.spec else None,
                "answers": {q: {t: {p: (v.to_dict() if isinstance(v, Hinted) else v) for p, v in a.items()}
                                for t, a in tools.items()} for q, tools in self.answers.items()},
                "fixes": [{"level": lv, "tool": t, "content": _content_json(c)} for (lv, t), c in sorted(self.fixes.items())],
                "planted": self.planted, "k": self.k}


def _content_json(c):
    return c if isinstance(c, str) else [p.to_dict() for p in c]


def scenario_backends(fixture: Mapping[str, Any]):
    """Rebuild (inference, editor) backends from :meth:`Scenario.fixture` output."""
    if fixture.get("kind") != "synthetic-scenario":
        raise ValueError("not a synthetic-scenario fixture")
    answers = {q: {t: {p: _answer_value(v) for p, v in a.items()} for t, a in tools.items()}
               for q, tools in fixture["answers"].items()}
    fixes = {}
    for f in fixture["fixes"]:
        c = f["content"]
        fixes[(f["level"], f["tool"])] = c if isinstance(c, str) else tuple(ParameterSpec.from_dict(p) for p in c)
    sc = Scenario(ToolKnowledgeBase(), [], answers, fixes, dict(fixture["planted"]), int(fixture["k"]))
    return sc.inference_backend(), sc.editor_backend()


NO_CHANGE_RESPONSE = "ANALYSIS\nNo actionable issue found.\n\nIMPROVED TOOL DESCRIPTIONS\n[]\n"


def editor_response(level: str, mods: Mapping[str, Any], analysis: str = "The documentation does not separate this tool from its neighbours.") -> str:
    header = TEMPLATES[level]["improved_header"]
    key = {"retrieval": "retrieval content", "tool": "description", "parameter": "tools"}[level]
    entries = [{"name": name, key: _content_json(c)} for name, c in mods.items()]
    return f"ANALYSIS\n{analysis}\n\n{header}\n```json\n{json.dumps(entries, indent=2, ensure_ascii=False)}\n```\n"


# -- simulated inference ----------------------------------------------------------

_BLOCK = re.compile(r"^## Tool \d+: (\S+)\nDescription: (.*)\nParameters:\n((?:- .*(?:\n|$))*)", re.M)
_QUERY = re.compile(r"^## Query\n(.*?)\n\n## Output format", re.M | re.S)


def parse_prompt(prompt: str):
    """Recover (query, [(tool, description, {param: line})]) from a rendered prompt."""
    m = _QUERY.search(prompt)
    if m is None:
        raise ValueError("prompt has no query section")
    blocks = []
    for b in _BLOCK.finditer(prompt):
        params = {}
        for line in b.group(3).splitlines():
            name = line[2:].split(" ", 1)[0]
            if name != "(none)":
                params[name] = line
        blocks.append((b.group(1), b.group(2), params))
    return m.group(1), blocks


class SimulatedModel:
    def __init__(self, answers: Mapping[str, Mapping[str, Mapping[str, Any]]]):
        self.answers = answers

    def select(self, query: str, blocks) -> str | None:
        words = content_words(query)
        best, best_score = None, -1
        for name, desc, _ in blocks:
            score = len(words & content_words(desc))
            if score > best_score:
                best, best_score = name, score
        return best

    def __call__(self, request: CompletionRequest) -> str:
        query, blocks = parse_prompt(request.prompt)
        tool = self.select(query, blocks)
        if tool is None:
            return "None of the listed tools applies.\n[]"
        lines = next(p for n, _, p in blocks if n == tool)
        args = {}
        for pname, value in self.answers.get(query, {}).get(tool, {}).items():
            if pname not in lines:
                continue
            if isinstance(value, Hinted):
                value = value.with_hint if value.hint in lines[pname] else value.without_hint
            args[pname] = value
        return json.dumps([{"name": tool, "arguments": args}])


# -- the planted-defect scenario -----------------------------------------------------

P = ParameterSpec


def _tool(name, desc, params, retrieval=None):
    doc = ToolDocument(name=name, retrieval_content="", description=desc, parameters=tuple(params))
    return ToolDocument(name=name, retrieval_content=retrieval or summarize_document(doc), description=desc,
                        parameters=tuple(params))


# (tool, defect it can carry, clean description, params, [(query, args)])
_CATALOGUE = [
    ("fetch_sales_data", "retrieval",
     "Fetches sales data figures for a sales region and year.",
     [P("region", "Sales region code such as EMEA or APAC.", "string", True),
      P("year", "Calendar year of the figures.", "integer", True)],
     [("Fetch the sales data for the EMEA region in 2023", {"region": "EMEA", "year": 2023}),
      ("I need the sales data figures of APAC for 2021", {"region": "APAC", "year": 2021}),
      ("Pull sales data for region LATAM, year 2019", {"region": "LATAM", "year": 2019})]),
    ("book_flight", "ambiguity",
     "Makes a booking for a flight trip from an origin airport to a destination airport.",
     [P("origin", "Departure airport or city.", "string", True),
      P("destination", "Arrival airport or city.", "string", True)],
     [("Make a booking for a flight trip from Boston to Denver", {"origin": "Boston", "destination": "Denver"}),
      ("Need a booking for a flight trip from Oslo to Rome", {"origin": "Oslo", "destination": "Rome"}),
      ("Arrange a booking: flight trip from Lima to Quito", {"origin": "Lima", "destination": "Quito"})]),
    ("schedule_meeting", "param_format",
     "Schedules a calendar meeting with a title on a given date.",
     [P("title", "Title of the meeting.", "string", True),
      P("date", "Date of the meeting in YYYY-MM-DD format, e.g. 2024-05-17.", "string", True)],
     [("Schedule a calendar meeting titled Budget sync on May 17th 2024",
       {"title": "Budget sync", "date": Hinted(DATE_HINT, "2024-05-17", "May 17th 2024")}),
      ("Put a meeting called Retro on the calendar for March 3rd 2025",
       {"title": "Retro", "date": Hinted(DATE_HINT, "2025-03-03", "March 3rd 2025")}),
      ("Schedule the Kickoff meeting on January 9th 2024",
       {"title": "Kickoff", "date": Hinted(DATE_HINT, "2024-01-09", "January 9th 2024")})]),
    ("book_hotel", None,
     "Makes a booking for a trip stay, reserving a hotel room in a city for some nights.",
     [P("city", "City of the hotel.", "string", True), P("nights", "Number of nights.", "integer", True)],
     [("Reserve a hotel room in Paris for 3 nights", {"city": "Paris", "nights": 3})]),
    ("get_weather", None,
     "Returns the current weather forecast for a city.",
     [P("city", "Name of the city.", "string", True)],
     [("What is the weather forecast in Lisbon?", {"city": "Lisbon"})]),
    ("convert_currency", None,
     "Converts an amount of money between two currencies using exchange rates.",
     [P("amount", "Amount to convert.", "number", True),
      P("from_currency", "ISO code of the source currency.", "string", True),
      P("to_currency", "ISO code of the target currency.", "string", True)],
     [("Convert 120.5 USD to EUR using current exchange rates",
       {"amount": 120.5, "from_currency": "USD", "to_currency": "EUR"})]),
    ("get_stock_price", None,
     "Looks up the latest trading price of a stock symbol.",
     [P("symbol", "Ticker symbol.", "string", True)],
     [("What is the latest trading price of the AAPL stock?", {"symbol": "AAPL"})]),
    ("translate_text", None,
     "Translates text into a target language.",
     [P("text", "Text to translate.", "string", True), P("target_language", "Language to translate into.", "string", True)],
     [("Translate the text good morning into Spanish", {"text": "good morning", "target_language": "Spanish"})]),
    ("send_email", None,
     "Sends an email message to a recipient with a subject line.",
     [P("recipient", "Email address of the recipient.", "string", True),
      P("subject", "Subject line.", "string", True),
      P("urgent", "Flag the message as urgent.", "boolean", False, default_value=False)],
     [("Send an email message to ana@example.com with the subject Quarterly review",
       {"recipient": "ana@example.com", "subject": "Quarterly review"})]),
    ("get_product", None,
     "Retrieves product information for a single product ID per call.",
     [P("product_id", "Numeric product ID.", "integer", True)],
     [("Get product information for product ID 101112", {"product_id": 101112})]),
]

_DEFECTIVE = {
    "retrieval": lambda doc: {"retrieval_content": "Internal helper."},
    "ambiguity": lambda doc: {"description": "Makes a booking."},
    "param_format": lambda doc: {"parameters": tuple(
        ParameterSpec(p.name, "Date of the meeting.", p.value_kind, p.required) if p.name == "date" else p
        for p in doc.parameters)},
}


def generate_synthetic_scenario(spec: ScenarioSpec = ScenarioSpec()) -> Scenario:
    """Build the planted-defect scenario described by ``spec``."""
    defect_rows = [row for row in _CATALOGUE if row[1] is not None]
    clean_rows = [row for row in _CATALOGUE if row[1] is None]
    rows = defect_rows + clean_rows[: spec.tool_count - len(defect_rows)]
    if len(rows) != spec.tool_count:
        raise ValueError("tool_count too small for the catalogue")
    docs, examples, answers, fixes, planted = [], [], {}, {}, {}
    for name, defect, desc, params, queries in rows:
        clean = _tool(name, desc, params)
        doc = clean
        planted_here = defect in spec.defects
        if planted_here:
            doc = replace(clean, **_DEFECTIVE[defect](clean))
            level = DEFECT_LEVEL[defect]
            fixes[(level, name)] = clean.content(level)
        docs.append(doc)
        n_queries = spec.queries_per_defect if defect is not None else 1
        for q, args in queries[:n_queries]:
            answers[q] = {name: dict(args)}
            expected = {p: (v.with_hint if isinstance(v, Hinted) else v) for p, v in args.items()}
            examples.append(ValidationExample(q, frozenset({name}), (ToolCall.make(name, expected),)))
            if planted_here:
                planted[q] = DEFECT_LEVEL[defect]
    return Scenario(ToolKnowledgeBase(docs), examples, answers, fixes, planted, spec.k, spec)


# -- randomized scenarios ----------------------------------------------------------


def _word(rng: random.Random) -> str:
    return "".join(rng.choice("bcdfghjklmnprstvz") + rng.choice("aeiou") for _ in range(rng.randint(2, 3)))


def _random_value(rng, kind):
    if kind == "string":
        return _word(rng).capitalize()
    if kind == "integer":
        return rng.randint(1, 500)
    if kind == "number":
        return round(rng.uniform(0.5, 99.5), 2) + 0.25
    return rng.random() < 0.5


def random_scenario(seed: int, n_tools: int | None = None, k: int | None = None) -> Scenario:
    """A small random KB with random planted defects and known fixes."""
    rng = random.Random(seed)
    n_tools = n_tools or rng.randint(4, 8)
    k = k or rng.randint(2, 3)
    shared = [_word(rng) for _ in range(4)]
    docs, examples, answers, fixes, planted = [], [], {}, {}, {}
    used = set()
    for i in range(n_tools):
        vocab = []
        while len(vocab) < 4:
            w = _word(rng)
            if w not in used and w not in shared:
                used.add(w)
                vocab.append(w)
        name = f"{vocab[0]}_{i}"
        desc = " ".join([*vocab, *rng.sample(shared, 2)]).capitalize() + "."
        params = []
        for j in range(rng.randint(1, 3)):
            kind = rng.choice(("string", "integer", "number", "boolean"))
            params.append(ParameterSpec(f"p{j}_{_word(rng)}", f"The {vocab[j % 4]} value.", kind, True))
        if rng.random() < 0.3:
            params.append(ParameterSpec("when", f"Date of the {vocab[1]} in {DATE_HINT} format.", "string", True))
        clean = _tool(name, desc, params)
        defect = rng.choice((None, None, *DEFECTS))
        if defect == "param_format" and clean.parameter("when") is None:
            defect = None
        doc = clean
        if defect == "retrieval":
            doc = replace_field(clean, retrieval_content=" ".join(_word(rng) for _ in range(5)))
        elif defect == "ambiguity":
            doc = replace_field(clean, description=" ".join(rng.sample(shared, 2)).capitalize() + ".")
        elif defect == "param_format":
            doc = replace_field(clean, parameters=tuple(
                ParameterSpec("when", "Date of the event.", "string", True) if p.name == "when" else p
                for p in clean.parameters))
        if defect:
            level = DEFECT_LEVEL[defect]
            fixes[(level, name)] = clean.content(level)
        docs.append(doc)
        for qi in range(rng.randint(1, 3)):
            q = f"{' '.join(rng.sample(vocab, 2))} {rng.choice(shared)} request {seed}-{i}-{qi}"
            args = {}
            for p in clean.parameters:
                if p.name == "when":
                    y, m, d = rng.randint(2020, 2026), rng.randint(1, 12), rng.randint(1, 28)
                    args[p.name] = Hinted(DATE_HINT, f"{y:04d}-{m:02d}-{d:02d}", f"{d} of month {m}, {y}")
                else:
                    args[p.name] = _random_value(rng, p.value_kind)
            answers[q] = {name: args}
            expected = {p: (v.with_hint if isinstance(v, Hinted) else v) for p, v in args.items()}
            examples.append(ValidationExample(q, frozenset({name}), (ToolCall.make(name, expected),)))
            if defect:
                planted[q] = DEFECT_LEVEL[defect]
    return Scenario(ToolKnowledgeBase(docs), examples, answers, fixes, planted, min(k, n_tools))


def replace_field(doc: ToolDocument, **changes) -> ToolDocument:
    return replace(doc, **changes)


class RandomEditor:
    """Editor whose proposals are a seeded mix of fixes, regressions and junk.

    The choice depends only on (seed, prompt), so runs are reproducible.
    """

    ACTIONS = ("fix", "harm", "swap", "out_of_scope", "garbage", "invalid")

    def __init__(self, scenario: Scenario, seed: int = 0, **weights):
        self.scenario = scenario
        self.seed = seed
        self.weights = [weights.get(a, d) for a, d in zip(self.ACTIONS, (0.35, 0.25, 0.15, 0.1, 0.1, 0.05))]
        self.tools = sorted({t for tools in scenario.answers.values() for t in tools} | {lv_t[1] for lv_t in scenario.fixes})

    def __call__(self, request: CompletionRequest) -> str:
        prompt = request.prompt
        digest = hashlib.sha256(f"{self.seed}\x00{prompt}".encode()).digest()
        rng = random.Random(int.from_bytes(digest[:8], "big"))
        level = next(lv for lv, t in TEMPLATES.items() if prompt.startswith(t["title"]))
        named = [t for t in self.tools if f'"name": "{t}"' in prompt]
        if not named:
            return NO_CHANGE_RESPONSE
        target = rng.choice(named)
        action = rng.choices(self.ACTIONS, self.weights)[0]
        fix = self.scenario.fixes.get((level, target))
        if action == "fix" and fix is not None:
            return editor_response(level, {target: fix})
        if action == "garbage":
            return "I think the descriptions look fine " + "".join(rng.choice(string.ascii_letters) for _ in range(20))
        if action == "invalid":
            if level == "parameter":
                dup = [ParameterSpec("x", "dup", "string", True), ParameterSpec("x", "dup", "string", True)]
                return editor_response(level, {target: tuple(dup)})
            return editor_response(level, {target: "   "})
        if action == "out_of_scope":
            others = [t for t in self.tools if t not in named] or named
            return editor_response(level, {rng.choice(others): self._noise(level, rng)})
        if action == "swap":
            other = rng.choice(self.tools)
            for lv_t, content in self.scenario.fixes.items():
                if lv_t == (level, other):
                    return editor_response(level, {target: content})
        return editor_response(level, {target: self._noise(level, rng)})

    def _noise(self, level, rng):
        if level == "parameter":
            return (ParameterSpec(f"q_{_word(rng)}", "Some value.", rng.choice(("string", "integer")), True),)
        return " ".join(_word(rng) for _ in range(rng.randint(3, 8))).capitalize() + "."
