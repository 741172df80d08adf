from __future__ import annotations

from policyflow.grounding import TIER_EXACT, TIER_KEYWORD, TIER_QUALIFIED, ground_criterion, name_tokens
from policyflow.schema import schema_from_names

SCHEMA = schema_from_names(["Type_2_Diabetes_Prior", "Diabetes", "DM_Treatment"])


def test_qualified_concept_prefers_qualified_column():
    assert ground_criterion("Type 2 diabetes", ["prior", "previously diagnosed"], SCHEMA) == (
        frozenset({"Type_2_Diabetes_Prior"}), TIER_QUALIFIED)


def test_bare_concept_matches_exact_column():
    assert ground_criterion("diabetes", [], SCHEMA) == (frozenset({"Diabetes"}), TIER_EXACT)


def test_unknown_concept_is_absent():
    assert ground_criterion("podiatry referral", [], SCHEMA) is None


def test_keyword_tier():
    schema = schema_from_names(["fasting_glucose", "HbA1c"])
    cols, tier = ground_criterion("glucose", [], schema)
    assert cols == frozenset({"fasting_glucose"}) and tier == TIER_KEYWORD


def test_tokens_split_camel_case_and_plurals():
    assert name_tokens("FastingGlucoseLevels") == frozenset({"fasting", "glucose", "level"})
    assert name_tokens("HbA1c") == frozenset({"hb", "a1c"})
    assert name_tokens("fasting_glucose") == name_tokens("FastingGlucose")


def test_aliases():
    schema = schema_from_names(["DM_Treatment"])
    found = ground_criterion("diabetes treatment", [], schema, aliases={"diabetes": "dm"})
    assert found == (frozenset({"DM_Treatment"}), TIER_EXACT)
