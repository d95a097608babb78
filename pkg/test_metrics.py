"""Tests for kappa, exact-match rates and the agreement report"""
from fractions import Fraction

import numpy as np
import pandas as pd
import pytest
from sklearn.metrics import cohen_kappa_score

from corpus import ClassLabel
from errors import StructuralError
from metrics import (
    ENSEMBLE, build_report, cohen_kappa, decision_value, exact_match_rate,
    export_excel, format_number, irr_table, one_vs_rest_kappas, render_csv, render_text,
)


def _perfect_engine(corpus):
    """Engine outputs that agree with the resolved labels everywhere"""
    cases = corpus.cases()
    return pd.DataFrame({
        "response_id": cases["response_id"],
        "prompt_id": cases["prompt_id"],
        "slot_id": cases["slot_id"],
        "engine_class": cases["resolved_class"],
        "value:left": cases["resolved"],
        f"value:{ENSEMBLE}": cases["resolved"],
    })


# =============================================================================
# KAPPA
# =============================================================================

def test_kappa_hand_example():
    result = cohen_kappa([0, 0, 1, 1], [0, 1, 1, 1])
    assert result.p_o == Fraction(3, 4)
    assert result.p_e == Fraction(1, 2)
    assert result.kappa == pytest.approx(0.5)


def test_kappa_identical_and_chance():
    assert cohen_kappa(["a", "b", "a"], ["a", "b", "a"]).kappa == 1.0
    assert cohen_kappa([0, 1, 0, 1], [0, 0, 1, 1]).kappa == 0.0


def test_kappa_matches_sklearn():
    rng = np.random.default_rng(5)
    for _ in range(25):
        n = int(rng.integers(5, 60))
        a = rng.integers(0, 3, size=n)
        b = np.where(rng.random(n) < 0.6, a, rng.integers(0, 3, size=n))
        if len(set(a) | set(b)) < 2:
            continue
        assert cohen_kappa(a.tolist(), b.tolist()).kappa == pytest.approx(cohen_kappa_score(a, b), abs=1e-12)


def test_kappa_degenerate_convention():
    zeros = [ClassLabel.ZERO] * 5
    kappas = one_vs_rest_kappas(zeros, zeros)
    assert all(k.kappa == 1.0 and k.degenerate for k in kappas.values())
    strict = one_vs_rest_kappas(zeros, zeros, strict=True)
    assert all(k.kappa is None for k in strict.values())
    assert cohen_kappa(["x", "x"], ["x", "x"], strict=True).kappa is None


def test_kappa_errors():
    with pytest.raises(StructuralError):
        cohen_kappa([], [])
    with pytest.raises(StructuralError):
        cohen_kappa([1], [1, 2])


def test_one_vs_rest_matches_binarized_kappa():
    a = [ClassLabel.ZERO, ClassLabel.ONE, ClassLabel.OTHER, ClassLabel.OTHER, ClassLabel.ZERO, ClassLabel.ONE]
    b = [ClassLabel.ZERO, ClassLabel.OTHER, ClassLabel.OTHER, ClassLabel.ONE, ClassLabel.ZERO, ClassLabel.ONE]
    kappas = one_vs_rest_kappas(a, b)
    for c in (ClassLabel.ZERO, ClassLabel.ONE, ClassLabel.OTHER):
        expected = cohen_kappa_score([x == c for x in a], [y == c for y in b])
        assert kappas[c].kappa == pytest.approx(expected)


# =============================================================================
# EXACT MATCH
# =============================================================================

def test_exact_match_example():
    pairs = [(Fraction(2), Fraction(2)), (Fraction(3), Fraction(5)), (None, Fraction(7)), (Fraction(1, 2), 0.5)]
    assert exact_match_rate(pairs) == Fraction(1, 2)


def test_exact_match_restrictions():
    pairs = [(None, None), (Fraction(4), Fraction(4)), (None, Fraction(1))]
    assert exact_match_rate(pairs, "either") == Fraction(1, 2)
    assert exact_match_rate(pairs, "first") == 1
    assert exact_match_rate(pairs, "none") == Fraction(1, 3)
    assert exact_match_rate([(None, None)]) is None
    with pytest.raises(StructuralError):
        exact_match_rate(pairs, "both")


def test_decision_value():
    assert decision_value(ClassLabel.ZERO, Fraction(9)) == 0
    assert decision_value(ClassLabel.ONE, None) == 1
    assert decision_value(ClassLabel.OTHER, Fraction(9)) == 9


def test_format_number():
    assert format_number(None) == "-"
    assert format_number(float("nan")) == "-"
    assert format_number(0.84146) == "0.841"


# =============================================================================
# TABLES
# =============================================================================

def test_irr_table_has_total_last(candy_corpus):
    table = irr_table(candy_corpus)
    assert list(table["prompt_id"]) == ["p1", "Total"]
    assert table.iloc[-1]["N"] == 6
    assert table.iloc[0]["irr_p"] == 1.0


def test_perfect_engine_report(candy_corpus):
    report = build_report(candy_corpus, _perfect_engine(candy_corpus), [r.response_id for r in candy_corpus.records])
    prompt_row = report.prompt_table.set_index("prompt_id").loc["p1"]
    assert prompt_row["eng_kv"] == 1.0
    assert prompt_row["p:left"] == 1.0
    assert prompt_row["pipeline_p"] == 1.0
    assert list(report.prompt_table["prompt_id"]) == ["p1", "Total"]

    slots = report.slot_table.set_index("slot_id")
    assert slots.loc["s3", "N_other"] == 3
    assert slots.loc["s3", "M"] == 1
    assert slots.loc["s3", "bound"] == pytest.approx(2 / 3)
    assert report.regressions.empty


def test_report_marks_empty_slots(candy_corpus):
    report = build_report(candy_corpus, _perfect_engine(candy_corpus), ["r2"])
    text = render_text(report.slot_table)
    row = report.slot_table.set_index("slot_id").loc["s2"]
    assert row["N_other"] == 0
    assert pd.isna(row["p:left"])
    assert " - " in text or text.rstrip().endswith("-")
    csv_text = render_csv(report.slot_table)
    assert "p1,s2,0,0,,1.0,," in csv_text


def test_report_requires_engine_rows(candy_corpus):
    engine = _perfect_engine(candy_corpus)
    engine = engine[engine["response_id"] != "r4"]
    with pytest.raises(StructuralError, match="r4"):
        build_report(candy_corpus, engine, [r.response_id for r in candy_corpus.records])


def test_regression_is_listed(candy_corpus):
    engine = _perfect_engine(candy_corpus)
    engine[f"value:{ENSEMBLE}"] = None
    report = build_report(candy_corpus, engine, [r.response_id for r in candy_corpus.records])
    assert set(report.regressions["slot_id"]) == {"s1", "s2", "s3"}


def test_csv_keeps_full_precision():
    table = pd.DataFrame([{"prompt_id": "p1", "p": 2 / 3}])
    assert repr(2 / 3) in render_csv(table)
    assert "0.667" in render_text(table)


def test_excel_export(candy_corpus, tmp_path):
    report = build_report(candy_corpus, _perfect_engine(candy_corpus), [r.response_id for r in candy_corpus.records])
    path = tmp_path / "report.xlsx"
    export_excel({"prompts": report.prompt_table, "slots": report.slot_table}, path)
    sheets = pd.read_excel(path, sheet_name=None, engine="openpyxl")
    assert set(sheets) == {"prompts", "slots"}
