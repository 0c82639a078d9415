"""Hierarchical tool documents, the tool knowledge base, and versioned edits.

A tool document carries three levels of context:

* ``retrieval_content`` - free text indexed by the retriever,
* ``description`` - what the selection model reads,
* ``parameters`` - the schema the model fills.

Knowledge bases are immutable snapshots. :func:`apply_modifications` replaces
whole field values at one level and returns a new snapshot.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import re
from dataclasses import dataclass, field, replace
from pathlib import Path
from types import MappingProxyType
from typing import Any, Iterable, Iterator, Mapping

logger = logging.getLogger(__name__)

VALUE_KINDS = ("string", "integer", "number", "boolean", "array", "object")
LEVELS = ("retrieval", "tool", "parameter")
KB_FORMAT_VERSION = 1

# Loose type spellings seen in tool catalogues, normalized onto VALUE_KINDS.
_KIND_ALIASES = {
    "str": "string",
    "string": "string",
    "text": "string",
    "int": "integer",
    "integer": "integer",
    "long": "integer",
    "float": "number",
    "double": "number",
    "number": "number",
    "real": "number",
    "bool": "boolean",
    "boolean": "boolean",
    "list": "array",
    "array": "array",
    "tuple": "array",
    "set": "array",
    "dict": "object",
    "object": "object",
    "map": "object",
}


class ModificationError(ValueError):
    """Raised when an edit cannot be applied to a knowledge base."""

    def __init__(self, message: str, unknown: Iterable[str] = (), violations: Iterable[str] = ()):
        super().__init__(message)
        self.unknown = list(unknown)
        self.violations = list(violations)


def normalize_kind(raw: str) -> tuple[str, tuple[str, ...], bool]:
    """Map a loose type spelling to ``(value_kind, alternates, optional)``.

    Handles ``"int"``, ``"List[int]"``, ``"str, optional"``, ``"Optional[str]"``
    and ``"X|Y"`` unions (first member becomes the kind, the rest alternates).
    """
    text = str(raw).strip()
    optional = False
    if re.search(r",\s*optional\s*$", text, flags=re.I):
        optional = True
        text = re.sub(r",\s*optional\s*$", "", text, flags=re.I)
    m = re.fullmatch(r"optional\[(.*)\]", text, flags=re.I)
    if m:
        optional = True
        text = m.group(1)
    kinds: list[str] = []
    for part in re.split(r"\s*\|\s*|\s+or\s+", text):
        kind = _kind_of(part)
        if kind not in kinds:
            kinds.append(kind)
    if not kinds:
        kinds = ["string"]
    return kinds[0], tuple(kinds[1:]), optional


def _kind_of(part: str) -> str:
    head = re.split(r"[\[\(<]", part.strip(), maxsplit=1)[0].strip().lower()
    if head in ("none", "null", ""):
        return "string"
    try:
        return _KIND_ALIASES[head]
    except KeyError:
        raise ValueError(f"unknown value kind {part!r}") from None


def conforms(value: Any, kind: str) -> bool:
    """True if ``value`` is an instance of the value kind ``kind``."""
    if kind == "string":
        return isinstance(value, str)
    if kind == "boolean":
        return isinstance(value, bool)
    if kind == "integer":
        if isinstance(value, bool):
            return False
        if isinstance(value, int):
            return True
        return isinstance(value, float) and math.isfinite(value) and value.is_integer()
    if kind == "number":
        return isinstance(value, (int, float)) and not isinstance(value, bool) and math.isfinite(value)
    if kind == "array":
        return isinstance(value, (list, tuple))
    if kind == "object":
        return isinstance(value, dict)
    return False


def coerce_default(value: Any, kind: str) -> Any:
    """Best-effort conversion of a catalogue default (often a string) to ``kind``."""
    if value is None or conforms(value, kind):
        return value
    if isinstance(value, str):
        text = value.strip()
        try:
            if kind == "boolean" and text.lower() in ("true", "false"):
                return text.lower() == "true"
            if kind == "integer":
                return int(text)
            if kind == "number":
                return float(text)
            if kind in ("array", "object"):
                parsed = json.loads(text)
                if conforms(parsed, kind):
                    return parsed
        except ValueError:
            pass
    return value


@dataclass(frozen=True)
class ParameterSpec:
    name: str
    description: str = ""
    value_kind: str = "string"
    required: bool = True
    default_value: Any = None
    example_values: tuple = ()
    alternates: tuple[str, ...] = ()

    def kinds(self) -> tuple[str, ...]:
        return (self.value_kind, *self.alternates)

    def accepts(self, value: Any) -> bool:
        return any(conforms(value, k) for k in self.kinds())

    def to_dict(self) -> dict:
        out = {
            "name": self.name,
            "description": self.description,
            "value_kind": self.value_kind,
            "required": self.required,
        }
        if self.default_value is not None:
            out["default_value"] = self.default_value
        if self.example_values:
            out["example_values"] = list(self.example_values)
        if self.alternates:
            out["alternates"] = list(self.alternates)
        return out

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "ParameterSpec":
        """Build from our own field names or from catalogue-style entries.

        Catalogue entries use ``type`` instead of ``value_kind`` and ``default``
        instead of ``default_value``; a parameter with no explicit ``required``
        flag is required unless it carries a default.
        """
        raw_kind = data.get("value_kind", data.get("type", "string"))
        kind, alternates, optional = normalize_kind(raw_kind)
        alternates = tuple(data.get("alternates", alternates))
        default = data.get("default_value", data.get("default"))
        default = coerce_default(default, kind)
        if "required" in data:
            required = bool(data["required"])
        else:
            required = not optional and default is None
        examples = data.get("example_values", data.get("examples", ()))
        if not isinstance(examples, (list, tuple)):
            examples = (examples,)
        return cls(
            name=str(data.get("name", "")),
            description=str(data.get("description", "")),
            value_kind=kind,
            required=required,
            default_value=default,
            example_values=tuple(examples),
            alternates=alternates,
        )


@dataclass(frozen=True)
class Provenance:
    kind: str = "original"  # "original" | "edited"
    level: str | None = None
    iteration: int | None = None

    def to_dict(self) -> dict:
        return {"kind": self.kind, "level": self.level, "iteration": self.iteration}

    @classmethod
    def from_dict(cls, data: Mapping[str, Any] | None) -> "Provenance":
        if not data:
            return cls()
        return cls(data.get("kind", "original"), data.get("level"), data.get("iteration"))


ORIGINAL = Provenance()


@dataclass(frozen=True)
class ToolDocument:
    name: str
    retrieval_content: str = ""
    description: str = ""
    parameters: tuple[ParameterSpec, ...] = ()
    version: int = 0
    provenance: Provenance = ORIGINAL

    def parameter(self, name: str) -> ParameterSpec | None:
        for p in self.parameters:
            if p.name == name:
                return p
        return None

    def required_names(self) -> list[str]:
        return [p.name for p in self.parameters if p.required]

    def content(self, level: str) -> Any:
        if level == "retrieval":
            return self.retrieval_content
        if level == "tool":
            return self.description
        if level == "parameter":
            return self.parameters
        raise ValueError(f"unknown level {level!r}")

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "retrieval_content": self.retrieval_content,
            "description": self.description,
            "parameters": [p.to_dict() for p in self.parameters],
            "version": self.version,
            "provenance": self.provenance.to_dict(),
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "ToolDocument":
        return cls(
            name=str(data["name"]),
            retrieval_content=str(data.get("retrieval_content", "")),
            description=str(data.get("description", "")),
            parameters=tuple(ParameterSpec.from_dict(p) for p in data.get("parameters", ())),
            version=int(data.get("version", 0)),
            provenance=Provenance.from_dict(data.get("provenance")),
        )


def validate_parameters(params: Iterable[ParameterSpec]) -> list[str]:
    violations = []
    seen: set[str] = set()
    for p in params:
        if not p.name:
            violations.append("empty parameter name")
        elif p.name in seen:
            violations.append(f"duplicate parameter name {p.name!r}")
        seen.add(p.name)
        if p.value_kind not in VALUE_KINDS:
            violations.append(f"parameter {p.name!r}: unknown value kind {p.value_kind!r}")
        for alt in p.alternates:
            if alt not in VALUE_KINDS:
                violations.append(f"parameter {p.name!r}: unknown alternate kind {alt!r}")
        if p.required and p.default_value is not None:
            violations.append(f"parameter {p.name!r}: required parameter has a default value")
        for ex in p.example_values:
            if not p.accepts(ex):
                violations.append(f"parameter {p.name!r}: example {ex!r} does not conform to {p.value_kind}")
    return violations


def validate_document(doc: ToolDocument, require_content: bool = True) -> list[str]:
    """Return every invariant violation of ``doc``; an empty list means valid.

    ``require_content=False`` skips the non-empty checks on retrieval content
    and description, for documents that have not had their summary generated.
    """
    violations = []
    if not doc.name:
        violations.append("empty tool name")
    if doc.version < 0:
        violations.append("negative version")
    if require_content:
        if not doc.retrieval_content.strip():
            violations.append("empty retrieval content")
        if not doc.description.strip():
            violations.append("empty description")
    violations.extend(validate_parameters(doc.parameters))
    return violations


def validate_content(level: str, content: Any) -> list[str]:
    """Validate a replacement value for one level of a document."""
    if level in ("retrieval", "tool"):
        if not isinstance(content, str):
            return [f"{level} content must be text"]
        if not content.strip():
            return [f"empty {level} content"]
        return []
    if level == "parameter":
        if not isinstance(content, (list, tuple)) or not all(isinstance(p, ParameterSpec) for p in content):
            return ["parameter content must be a list of ParameterSpec"]
        return validate_parameters(content)
    return [f"unknown level {level!r}"]


def _digest(*parts: str) -> str:
    h = hashlib.sha256()
    for part in parts:
        h.update(part.encode())
        h.update(b"\0")
    return h.hexdigest()[:16]


def content_hash(docs: Iterable[ToolDocument]) -> str:
    payload = json.dumps([d.to_dict() for d in docs], sort_keys=True, default=str)
    return _digest(payload)


class ToolKnowledgeBase:
    """Immutable mapping from tool name to :class:`ToolDocument`."""

    __slots__ = ("_tools", "snapshot_id", "parent_id")

    def __init__(self, tools: Iterable[ToolDocument] = (), snapshot_id: str | None = None, parent_id: str | None = None):
        table: dict[str, ToolDocument] = {}
        for doc in tools:
            if doc.name in table:
                raise ValueError(f"duplicate tool name {doc.name!r}")
            table[doc.name] = doc
        self._tools = MappingProxyType(table)
        self.snapshot_id = snapshot_id or content_hash(table.values())
        self.parent_id = parent_id

    @property
    def tools(self) -> Mapping[str, ToolDocument]:
        return self._tools

    def __getitem__(self, name: str) -> ToolDocument:
        return self._tools[name]

    def __contains__(self, name: object) -> bool:
        return name in self._tools

    def __iter__(self) -> Iterator[ToolDocument]:
        return iter(self._tools.values())

    def __len__(self) -> int:
        return len(self._tools)

    def names(self) -> list[str]:
        return list(self._tools)

    def get(self, name: str) -> ToolDocument | None:
        return self._tools.get(name)

    def same_content(self, other: "ToolKnowledgeBase") -> bool:
        return not diff_snapshots(self, other)

    def __repr__(self) -> str:
        return f"ToolKnowledgeBase({len(self)} tools, snapshot_id={self.snapshot_id!r})"


def apply_modifications(
    kb: ToolKnowledgeBase,
    level: str,
    mods: Mapping[str, Any],
    iteration: int | None = None,
) -> ToolKnowledgeBase:
    """Return a new snapshot with the ``level`` field of each named tool replaced.

    Versions are bumped only on documents whose content actually changes.
    """
    if level not in LEVELS:
        raise ValueError(f"unknown level {level!r}")
    unknown = sorted(name for name in mods if name not in kb)
    if unknown:
        raise ModificationError(f"unknown tools: {', '.join(unknown)}", unknown=unknown)
    violations = []
    for name, content in mods.items():
        if level == "parameter" and isinstance(content, list):
            content = tuple(content)
        violations.extend(f"{name}: {v}" for v in validate_content(level, content))
    if violations:
        raise ModificationError("invalid content: " + "; ".join(violations), violations=violations)

    field_name = {"retrieval": "retrieval_content", "tool": "description", "parameter": "parameters"}[level]
    docs = []
    for doc in kb:
        if doc.name in mods:
            new = mods[doc.name]
            if level == "parameter":
                new = tuple(new)
            if getattr(doc, field_name) != new:
                doc = replace(
                    doc,
                    **{field_name: new},
                    version=doc.version + 1,
                    provenance=Provenance("edited", level, iteration),
                )
        docs.append(doc)
    payload = json.dumps(
        {name: (c if isinstance(c, str) else [p.to_dict() for p in c]) for name, c in sorted(mods.items())},
        sort_keys=True,
        default=str,
    )
    snapshot_id = _digest(kb.snapshot_id, level, str(iteration), payload)
    return ToolKnowledgeBase(docs, snapshot_id=snapshot_id, parent_id=kb.snapshot_id)


@dataclass(frozen=True)
class FieldChange:
    tool: str
    level: str
    before: Any
    after: Any


def diff_snapshots(a: ToolKnowledgeBase, b: ToolKnowledgeBase) -> list[FieldChange]:
    """List every differing (tool, level) field between two snapshots.

    Tools present on only one side are reported at level ``"presence"``.
    """
    changes = []
    for name in sorted(set(a.names()) | set(b.names())):
        da, db = a.get(name), b.get(name)
        if da is None or db is None:
            changes.append(FieldChange(name, "presence", da, db))
            continue
        for level in LEVELS:
            before, after = da.content(level), db.content(level)
            if before != after:
                changes.append(FieldChange(name, level, before, after))
    return changes


def _safe_filename(i: int, name: str) -> str:
    return f"{i:04d}_{re.sub(r'[^A-Za-z0-9_.-]', '_', name)[:80]}.json"


def save_kb(kb: ToolKnowledgeBase, directory: str | Path) -> Path:
    """Write one JSON file per tool plus ``manifest.json``."""
    directory = Path(directory)
    (directory / "tools").mkdir(parents=True, exist_ok=True)
    files = {}
    for i, doc in enumerate(kb):
        fname = _safe_filename(i, doc.name)
        (directory / "tools" / fname).write_text(json.dumps(doc.to_dict(), indent=2, ensure_ascii=False))
        files[doc.name] = f"tools/{fname}"
    manifest = {
        "format_version": KB_FORMAT_VERSION,
        "snapshot_id": kb.snapshot_id,
        "parent_id": kb.parent_id,
        "tools": kb.names(),
        "files": files,
    }
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return directory


def load_kb(directory: str | Path) -> ToolKnowledgeBase:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    if manifest.get("format_version") != KB_FORMAT_VERSION:
        raise ValueError(f"unsupported knowledge-base format {manifest.get('format_version')!r}")
    docs = []
    for name in manifest["tools"]:
        doc = ToolDocument.from_dict(json.loads((directory / manifest["files"][name]).read_text()))
        if doc.name != name:
            raise ValueError(f"manifest lists {name!r} but file holds {doc.name!r}")
        docs.append(doc)
    return ToolKnowledgeBase(docs, snapshot_id=manifest["snapshot_id"], parent_id=manifest.get("parent_id"))


def kb_to_dict(kb: ToolKnowledgeBase) -> dict:
    return {"snapshot_id": kb.snapshot_id, "parent_id": kb.parent_id, "tools": [d.to_dict() for d in kb]}


def kb_from_dict(data: Mapping[str, Any]) -> ToolKnowledgeBase:
    return ToolKnowledgeBase(
        (ToolDocument.from_dict(d) for d in data["tools"]),
        snapshot_id=data["snapshot_id"],
        parent_id=data.get("parent_id"),
    )


def summarize_document(doc: ToolDocument) -> str:
    """Deterministic template summary used as retrieval content before any model pass."""
    lines = [f"Tool {doc.name}: {doc.description}".strip()]
    for p in doc.parameters:
        need = "required" if p.required else "optional"
        lines.append(f"Parameter {p.name} ({p.value_kind}, {need}): {p.description}".rstrip(": "))
    return "\n".join(lines)
