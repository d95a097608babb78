"""
Agreement Metrics - Cohen's kappa, one-vs-rest class kappas and exact-match rates
Builds the prompt-level and slot-level agreement tables for rater pairs and
for the engine against the resolved labels.
"""
from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass
from fractions import Fraction
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from corpus import CLASS_ORDER, ClassLabel, Corpus, audit_missing_values, derive_class_label
from errors import StructuralError

logger = logging.getLogger(__name__)

NOT_APPLICABLE = "-"
ENSEMBLE = "ensemble"
RESTRICT_EITHER = "either"
RESTRICT_FIRST = "first"
RESTRICT_NONE = "none"


def is_absent(value) -> bool:
    """None, or the NaN pandas puts in empty cells"""
    return value is None or (isinstance(value, float) and np.isnan(value))


# =============================================================================
# 1. KAPPA
# =============================================================================

@dataclass(frozen=True)
class KappaResult:
    kappa: Optional[float]
    p_o: Fraction
    p_e: Fraction
    n_cases: int
    degenerate: bool = False

    def __str__(self):
        return format_number(self.kappa)


def cohen_kappa(labels_a: Sequence, labels_b: Sequence, strict: bool = False) -> KappaResult:
    """
    Cohen's kappa with exact rational p_o and p_e

    When p_e = 1 (both sides use one and the same category) the formula is
    undefined: kappa is 1 if p_o = 1 and 0 otherwise, or None with strict.

    Raises:
        StructuralError: empty input or length mismatch
    """
    labels_a = list(labels_a)
    labels_b = list(labels_b)
    if len(labels_a) != len(labels_b):
        raise StructuralError(f"label sequences differ in length: {len(labels_a)} vs {len(labels_b)}")
    n = len(labels_a)
    if n == 0:
        raise StructuralError("kappa needs at least one case")

    p_o = Fraction(sum(1 for a, b in zip(labels_a, labels_b) if a == b), n)
    count_a = Counter(labels_a)
    count_b = Counter(labels_b)
    p_e = Fraction(sum(count_a[c] * count_b[c] for c in count_a), n * n)
    if p_e == 1:
        kappa = None if strict else (1.0 if p_o == 1 else 0.0)
        return KappaResult(kappa, p_o, p_e, n, degenerate=True)
    return KappaResult(float((p_o - p_e) / (1 - p_e)), p_o, p_e, n)


def one_vs_rest_kappas(labels_a: Sequence[ClassLabel], labels_b: Sequence[ClassLabel],
                       strict: bool = False) -> Dict[ClassLabel, KappaResult]:
    """kappa_c of the binarized sequences (c vs not c) for c in Zero, One, Other"""
    labels_a = list(labels_a)
    labels_b = list(labels_b)
    return {
        c: cohen_kappa([a == c for a in labels_a], [b == c for b in labels_b], strict)
        for c in CLASS_ORDER
    }


def exact_match_rate(pairs: Iterable[Tuple], restriction: str = RESTRICT_EITHER) -> Optional[Fraction]:
    """
    Share of pairs where both sides state the same value

    Args:
        pairs: (value_a, value_b) with None for Absent
        restriction: "either" keeps pairs where at least one side states a
            value, "first" keeps pairs where the first side does, "none" keeps all

    Returns:
        Exact rate, or None when the restriction leaves nothing
    """
    if restriction == RESTRICT_EITHER:
        kept = [(a, b) for a, b in pairs if not is_absent(a) or not is_absent(b)]
    elif restriction == RESTRICT_FIRST:
        kept = [(a, b) for a, b in pairs if not is_absent(a)]
    elif restriction == RESTRICT_NONE:
        kept = list(pairs)
    else:
        raise StructuralError(f"unknown restriction {restriction!r}")
    if not kept:
        return None
    hits = sum(1 for a, b in kept if not is_absent(a) and not is_absent(b) and Fraction(a) == Fraction(b))
    return Fraction(hits, len(kept))


def format_number(value, digits: int = 3) -> str:
    if is_absent(value):
        return NOT_APPLICABLE
    return f"{float(value):.{digits}f}"


# =============================================================================
# 2. TABLES
# =============================================================================

def _kappa_columns(prefix, a_classes, b_classes, strict):
    if not a_classes:
        return {f"{prefix}_k0": None, f"{prefix}_k1": None, f"{prefix}_kv": None}
    kappas = one_vs_rest_kappas(a_classes, b_classes, strict)
    return {
        f"{prefix}_k0": kappas[ClassLabel.ZERO].kappa,
        f"{prefix}_k1": kappas[ClassLabel.ONE].kappa,
        f"{prefix}_kv": kappas[ClassLabel.OTHER].kappa,
    }


def _rate(value):
    return None if is_absent(value) else float(value)


def _irr_columns(cases: pd.DataFrame, strict: bool) -> dict:
    row = _kappa_columns(
        "irr",
        [derive_class_label(v) for v in cases["rater1"]],
        [derive_class_label(v) for v in cases["rater2"]],
        strict,
    )
    row["irr_p"] = _rate(exact_match_rate(zip(cases["rater1"], cases["rater2"])))
    return row


def irr_table(corpus: Corpus, response_ids=None, strict: bool = False) -> pd.DataFrame:
    """Rater 1 vs rater 2: kappa_0, kappa_1, kappa_v and exact-match p per prompt plus Total"""
    cases = corpus.cases(response_ids)
    rows = []
    for prompt_id in corpus.prompt_ids:
        sub = cases[cases["prompt_id"] == prompt_id]
        rows.append({"prompt_id": prompt_id, "N": sub["response_id"].nunique(), **_irr_columns(sub, strict)})
    rows.append({"prompt_id": "Total", "N": cases["response_id"].nunique(), **_irr_columns(cases, strict)})
    return pd.DataFrame(rows)


def decision_value(engine_class: ClassLabel, chosen):
    """Value the pipeline reports: the class for 0/1, the identified value otherwise"""
    if engine_class == ClassLabel.ZERO:
        return Fraction(0)
    if engine_class == ClassLabel.ONE:
        return Fraction(1)
    return chosen


def _identification_rate(rows: pd.DataFrame, column: str) -> Optional[float]:
    other = rows[rows["resolved_class"] == ClassLabel.OTHER]
    if other.empty:
        return None
    hits = sum(1 for v, r in zip(other[column], other["resolved"]) if not is_absent(v) and v == r)
    return hits / len(other)


def _pipeline_rate(rows: pd.DataFrame) -> Optional[float]:
    pairs = [
        (resolved, decision_value(c, chosen))
        for resolved, c, chosen in zip(rows["resolved"], rows["engine_class"], rows[f"value:{ENSEMBLE}"])
    ]
    return _rate(exact_match_rate(pairs, RESTRICT_FIRST))


def join_engine(corpus: Corpus, engine: pd.DataFrame, response_ids) -> pd.DataFrame:
    """
    Test cases joined with engine outputs

    Raises:
        StructuralError: engine outputs missing for some responses
    """
    cases = corpus.cases(response_ids)
    have = set(engine["response_id"])
    missing = sorted(set(cases["response_id"]) - have)
    if missing:
        shown = ", ".join(missing[:10]) + (" ..." if len(missing) > 10 else "")
        raise StructuralError(f"engine outputs missing for {len(missing)} response(s): {shown}")
    return cases.merge(engine.drop(columns=["prompt_id"], errors="ignore"), on=["response_id", "slot_id"], how="left")


def model_columns(engine: pd.DataFrame) -> List[str]:
    return [c[len("value:"):] for c in engine.columns if c.startswith("value:")]


@dataclass
class AgreementReport:
    prompt_table: pd.DataFrame
    slot_table: pd.DataFrame
    regressions: pd.DataFrame

    def to_csv(self) -> str:
        return "\n".join([render_csv(self.prompt_table), render_csv(self.slot_table)])

    def to_text(self) -> str:
        return "\n\n".join([
            "AGREEMENT BY PROMPT",
            render_text(self.prompt_table),
            "AGREEMENT BY VALUE SLOT",
            render_text(self.slot_table),
        ])


def build_report(corpus: Corpus, engine: pd.DataFrame, response_ids, strict: bool = False) -> AgreementReport:
    """
    Prompt table and slot table for the test split

    Args:
        corpus: Full corpus (labels come from here)
        engine: One row per (response, slot) with engine_class and a
            value:<model> column per member plus value:ensemble
        response_ids: The evaluated responses (the test split)
        strict: Render degenerate kappas as "-"
    """
    joined = join_engine(corpus, engine, response_ids)
    models = model_columns(engine)

    def prompt_row(prompt_id, rows):
        row = {"prompt_id": prompt_id, "N": rows["response_id"].nunique()}
        row.update(_irr_columns(rows, strict))
        row.update(_kappa_columns("eng", list(rows["resolved_class"]), list(rows["engine_class"]), strict))
        for model in models:
            row[f"p:{model}"] = _identification_rate(rows, f"value:{model}")
        row["pipeline_p"] = _pipeline_rate(rows)
        return row

    prompt_rows = [prompt_row(p, joined[joined["prompt_id"] == p]) for p in corpus.prompt_ids]
    prompt_rows.append(prompt_row("Total", joined))
    prompt_table = pd.DataFrame(prompt_rows)

    audit = audit_missing_values(corpus, response_ids).set_index(["prompt_id", "slot_id"])
    slot_rows = []
    for prompt_id in corpus.prompt_ids:
        for slot_id in corpus.prompts[prompt_id].slot_ids:
            rows = joined[(joined["prompt_id"] == prompt_id) & (joined["slot_id"] == slot_id)]
            entry = audit.loc[(prompt_id, slot_id)]
            row = {
                "prompt_id": prompt_id,
                "slot_id": slot_id,
                "N_other": int(entry["n_other"]),
                "M": int(entry["missing"]),
                "bound": entry["bound"] if entry["n_other"] else None,
                "irr_p": _rate(exact_match_rate(zip(rows["rater1"], rows["rater2"]))),
            }
            for model in models:
                row[f"p:{model}"] = _identification_rate(rows, f"value:{model}")
            slot_rows.append(row)
    slot_table = pd.DataFrame(slot_rows)
    regressions = ensemble_regressions(slot_table, [m for m in models if m != ENSEMBLE])
    if not regressions.empty:
        logger.info("Ensemble below a member on the test split in %d slot(s)", len(regressions))
    return AgreementReport(prompt_table, slot_table, regressions)


def ensemble_regressions(slot_table: pd.DataFrame, member_ids: Sequence[str]) -> pd.DataFrame:
    """Slots where the ensemble's test accuracy falls below its best member"""
    columns = ["prompt_id", "slot_id", "ensemble", "best_member", "best_accuracy"]
    if f"p:{ENSEMBLE}" not in slot_table.columns or not member_ids:
        return pd.DataFrame(columns=columns)
    rows = []
    for _, row in slot_table.iterrows():
        ens = row[f"p:{ENSEMBLE}"]
        scored = [(row[f"p:{m}"], m) for m in member_ids if not is_absent(row[f"p:{m}"])]
        if is_absent(ens) or not scored:
            continue
        best_accuracy, best_member = max(scored, key=lambda t: t[0])
        if ens < best_accuracy:
            rows.append({
                "prompt_id": row["prompt_id"],
                "slot_id": row["slot_id"],
                "ensemble": ens,
                "best_member": best_member,
                "best_accuracy": best_accuracy,
            })
    return pd.DataFrame(rows, columns=columns)


# =============================================================================
# 3. RENDERING
# =============================================================================

def _machine(value) -> str:
    if is_absent(value):
        return ""
    if isinstance(value, float):
        return repr(float(value))
    return str(value)


def render_csv(table: pd.DataFrame) -> str:
    """Comma-separated form with full float precision; empty cell for n/a"""
    return table.map(_machine).to_csv(index=False)


def render_text(table: pd.DataFrame) -> str:
    """Aligned form at 3 decimals; "-" for n/a"""
    def cell(value):
        if value is None or isinstance(value, float):
            return format_number(value)
        return str(value)
    return table.map(cell).to_string(index=False)


def export_excel(tables: Dict[str, pd.DataFrame], path) -> None:
    """One sheet per table"""
    with pd.ExcelWriter(path, engine="openpyxl") as writer:
        for name, table in tables.items():
            table.to_excel(writer, sheet_name=name[:31], index=False)
