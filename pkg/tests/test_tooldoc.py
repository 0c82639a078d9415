import pytest

from toolctx.tooldoc import (
    ModificationError,
    ParameterSpec,
    ToolDocument,
    ToolKnowledgeBase,
    apply_modifications,
    diff_snapshots,
    load_kb,
    normalize_kind,
    save_kb,
    summarize_document,
    validate_document,
)

P = ParameterSpec


def make_kb():
    return ToolKnowledgeBase([
        ToolDocument("get_product", "product lookup", "Retrieves product information for a single product ID per call",
                     (P("product_id", "Product id.", "string", True),)),
        ToolDocument("bacterial_growth", "bacteria", "Calculates bacterial population size for one growth scenario.",
                     (P("initial_population", "", "number", True), P("growth_rate", "", "number", True),
                      P("time", "", "number", True))),
        ToolDocument("whois", "domain lookup", "Looks up a domain.", (P("domain", "", "string", True),)),
    ])


def test_duplicate_parameter_names_violate():
    doc = ToolDocument("f", "r", "d", (P("charge", "", "number"), P("charge", "", "number")))
    assert any("duplicate parameter name" in v for v in validate_document(doc))


def test_valid_document_has_no_violations():
    assert validate_document(make_kb()["get_product"]) == []


def test_required_parameter_with_default_violates():
    doc = ToolDocument("f", "r", "d", (P("x", "", "integer", True, default_value=3),))
    assert any("required parameter has a default" in v for v in validate_document(doc))


def test_empty_content_and_unknown_kind_violate():
    doc = ToolDocument("f", "", "d", (P("x", "", "tensor", False),))
    violations = validate_document(doc)
    assert "empty retrieval content" in violations
    assert any("unknown value kind" in v for v in violations)
    assert validate_document(doc, require_content=False) == [v for v in violations if "empty" not in v]


def test_empty_modification_keeps_content_with_fresh_id():
    kb = make_kb()
    new = apply_modifications(kb, "tool", {})
    assert new.same_content(kb)
    assert new.snapshot_id != kb.snapshot_id
    assert new.parent_id == kb.snapshot_id


def test_single_description_edit_touches_only_that_field():
    kb = make_kb()
    text = ("Calculates bacterial population size for a single set of parameters including initial count, "
            "growth rate, and time requiring separate calls for each calculation.")
    new = apply_modifications(kb, "tool", {"bacterial_growth": text}, iteration=1)
    changes = diff_snapshots(kb, new)
    assert [(c.tool, c.level) for c in changes] == [("bacterial_growth", "tool")]
    assert new["bacterial_growth"].version == 1
    assert new["bacterial_growth"].provenance.level == "tool"
    assert new["get_product"] == kb["get_product"]


def test_unknown_tool_is_rejected_by_name():
    with pytest.raises(ModificationError) as err:
        apply_modifications(make_kb(), "tool", {"no_such_tool": "x"})
    assert err.value.unknown == ["no_such_tool"]
    assert "no_such_tool" in str(err.value)


def test_invalid_content_is_rejected():
    with pytest.raises(ModificationError) as err:
        apply_modifications(make_kb(), "parameter", {"whois": [P("a"), P("a")]})
    assert err.value.violations


def test_identical_content_does_not_bump_version():
    kb = make_kb()
    new = apply_modifications(kb, "tool", {"whois": kb["whois"].description})
    assert new["whois"].version == 0
    assert diff_snapshots(kb, new) == []


def test_diff_reflexive_and_two_levels():
    kb = make_kb()
    assert diff_snapshots(kb, kb) == []
    a = apply_modifications(kb, "tool", {"whois": "Looks up registration data for a domain."})
    b = apply_modifications(a, "retrieval", {"whois": "whois domain registration"})
    changes = diff_snapshots(kb, b)
    assert sorted(c.level for c in changes) == ["retrieval", "tool"]
    assert b["whois"].version == 2


def test_retrieval_edit_is_level_isolated():
    kb = make_kb()
    new = apply_modifications(kb, "retrieval", {d.name: d.retrieval_content + " more" for d in kb})
    for d in kb:
        assert new[d.name].description == d.description
        assert new[d.name].parameters == d.parameters


def test_snapshot_ids_are_deterministic():
    kb = make_kb()
    assert kb.snapshot_id == make_kb().snapshot_id
    a = apply_modifications(kb, "tool", {"whois": "x y"}, iteration=2)
    b = apply_modifications(kb, "tool", {"whois": "x y"}, iteration=2)
    assert a.snapshot_id == b.snapshot_id


def test_save_load_round_trip(tmp_path):
    kb = apply_modifications(make_kb(), "tool", {"whois": "edited"}, iteration=1)
    loaded = load_kb(save_kb(kb, tmp_path / "kb"))
    assert loaded.snapshot_id == kb.snapshot_id and loaded.parent_id == kb.parent_id
    assert list(loaded) == list(kb)


@pytest.mark.parametrize("raw,expected", [
    ("int", ("integer", (), False)),
    ("str, optional", ("string", (), True)),
    ("number|array", ("number", ("array",), False)),
    ("List[int]", ("array", (), False)),
    ("Optional[bool]", ("boolean", (), True)),
])
def test_normalize_kind(raw, expected):
    assert normalize_kind(raw) == expected


def test_summary_template_mentions_parameters():
    text = summarize_document(make_kb()["bacterial_growth"])
    assert text.startswith("Tool bacterial_growth:")
    assert "Parameter growth_rate (number, required)" in text
