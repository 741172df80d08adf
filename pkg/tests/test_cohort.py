from __future__ import annotations

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from policyflow.cohort import CohortSpec, boundary_values, check_cohort, generate, load_csv, save_csv
from policyflow.errors import HeaderMismatch, RowError, SpecError
from policyflow.schema import Column, PatientSchema, ValueKind

HBA1C = PatientSchema((Column("HbA1c", plausible_range=(4.0, 12.0), thresholds=(6.5,)),
                       Column("eGFR", plausible_range=(5, 120), thresholds=(30, 60))))


def test_boundary_records_present():
    cohort = generate(CohortSpec(HBA1C, size=1000, seed=1, boundary_epsilon={"HbA1c": 0.1}))
    values = {r["HbA1c"] for r in cohort}
    assert {6.4, 6.5, 6.6} <= values
    assert {29.0, 30.0, 31.0, 59.0, 60.0, 61.0} <= {r["eGFR"] for r in cohort}


def test_default_epsilon_is_least_significant_digit():
    spec = CohortSpec(HBA1C)
    assert spec.epsilon(HBA1C.get("HbA1c")) == pytest.approx(0.1)
    assert spec.epsilon(HBA1C.get("eGFR")) == 1.0
    assert boundary_values(HBA1C.get("HbA1c"), 0.1) == [(6.4, 6.5, 6.6)]


def test_determinism_and_ids():
    spec = CohortSpec(HBA1C, size=200, seed=9)
    a, b = generate(spec), generate(spec)
    assert a == b
    assert len({r.id for r in a}) == 200
    assert generate(CohortSpec(HBA1C, size=200, seed=10)) != a


def test_size_below_mandate():
    with pytest.raises(SpecError):
        generate(CohortSpec(HBA1C, size=8))


def test_non_positive_epsilon():
    with pytest.raises(SpecError):
        generate(CohortSpec(HBA1C, size=20, boundary_epsilon={"HbA1c": 0}))


def test_city1_cohort_covers_grades_and_conforms(city1_schema):
    cohort = generate(CohortSpec(city1_schema, size=1000, seed=7))
    check_cohort(cohort, city1_schema)
    assert {r["urine_protein"] for r in cohort} == set(city1_schema.get("urine_protein").grades)


def test_csv_round_trip(tmp_path, city1_schema):
    cohort = generate(CohortSpec(city1_schema, size=1000, seed=2))
    path = tmp_path / "c.csv"
    save_csv(cohort, path, city1_schema)
    assert load_csv(path, city1_schema) == cohort


def test_csv_bad_number(tmp_path):
    path = tmp_path / "c.csv"
    path.write_text("patient_id,HbA1c,eGFR\nP1,6.5,40\nP2,abc,40\n", encoding="utf-8")
    with pytest.raises(RowError) as info:
        load_csv(path, HBA1C)
    assert (info.value.line, info.value.column) == (3, "HbA1c")


def test_csv_rejects_locale_numbers(tmp_path):
    path = tmp_path / "c.csv"
    path.write_text('HbA1c,eGFR\n"6,5",40\n', encoding="utf-8")
    with pytest.raises(RowError):
        load_csv(path, HBA1C)


def test_csv_header_mismatch(tmp_path):
    path = tmp_path / "c.csv"
    path.write_text("HbA1c\n6.5\n", encoding="utf-8")
    with pytest.raises(HeaderMismatch):
        load_csv(path, HBA1C)


def test_csv_unknown_grade(tmp_path):
    schema = PatientSchema((Column("up", ValueKind.CATEGORY, grades=("-", "+"), ordered=True),))
    path = tmp_path / "c.csv"
    path.write_text("up\n++\n", encoding="utf-8")
    with pytest.raises(RowError):
        load_csv(path, schema)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(1, 50).map(lambda x: round(x, 1)), min_size=1, max_size=3, unique=True),
       st.integers(0, 2**63 - 1))
def test_boundary_coverage_property(thresholds, seed):
    schema = PatientSchema((Column("x", plausible_range=(0, 60), thresholds=tuple(thresholds), decimals=1),))
    cohort = generate(CohortSpec(schema, size=30, seed=seed))
    values = {r["x"] for r in cohort}
    for lo, t, hi in boundary_values(schema.get("x"), 0.1):
        assert {lo, t, hi} <= values
