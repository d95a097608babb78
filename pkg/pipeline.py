"""
Engine Run - classifier, identification models and ensemble over a set of responses
Produces one row per (response, slot): class probabilities, engine class and
the value each member and the ensemble would pick.
"""
from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from typing import List, Sequence

import numpy as np
import pandas as pd

from classify import ClassifierModel, format_classifier_input
from corpus import CLASS_ORDER, ClassLabel, Corpus, format_label, natural_key, parse_label, read_jsonl, require_field, write_jsonl
from ensemble import FittedEnsemble, ensemble_predict, score_members
from errors import DataFormatError, StructuralError
from identify import identification_cases, select_value
from metrics import ENSEMBLE, decision_value

logger = logging.getLogger(__name__)

ENGINE_FORMAT = "valueid-engine"
CHUNK_SIZE = 2000


def _chunks(items: Sequence, size: int = CHUNK_SIZE) -> List[Sequence]:
    return [items[i:i + size] for i in range(0, len(items), size)]


def order_members(members, fitted: FittedEnsemble):
    """Members in the order the fitted weights expect"""
    by_id = {m.model_id: m for m in members}
    missing = [mid for mid in fitted.member_ids if mid not in by_id]
    if missing:
        raise StructuralError(f"ensemble member(s) not provided: {', '.join(missing)}")
    return [by_id[mid] for mid in fitted.member_ids]


def run_engine(corpus: Corpus, response_ids, classifier: ClassifierModel, members,
               fitted: FittedEnsemble, workers: int = 1) -> pd.DataFrame:
    """
    Run the full engine over the given responses

    Work is split into fixed-size chunks, so the output does not depend on
    the worker count.

    Returns:
        DataFrame with response_id, prompt_id, slot_id, p_zero, p_one,
        p_other, engine_class, value:<member>..., value:ensemble, decision
    """
    members = order_members(members, fitted)
    ids = sorted(set(response_ids), key=natural_key)
    cases = identification_cases(corpus, ids)
    logger.info("Running engine on %d responses (%d cases) with %d worker(s)", len(ids), len(cases), workers)

    inputs = [format_classifier_input(c.question, corpus.by_id[c.response_id].text) for c in cases]
    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        probs = list(pool.map(classifier.predict_proba, _chunks(inputs)))
        scored = list(pool.map(lambda chunk: score_members(members, chunk), _chunks(cases)))
    probs = np.vstack(probs) if probs else np.zeros((0, 3))
    member_scores = [row for chunk in scored for row in chunk]

    rows = []
    for case, p, scores in zip(cases, probs, member_scores):
        engine_class = CLASS_ORDER[int(np.argmax(p))]
        row = {
            "response_id": case.response_id,
            "prompt_id": case.prompt_id,
            "slot_id": case.slot_id,
            "p_zero": float(p[0]),
            "p_one": float(p[1]),
            "p_other": float(p[2]),
            "engine_class": engine_class,
        }
        for member, s in zip(members, scores):
            choice = select_value(s, case.masked)
            row[f"value:{member.model_id}"] = None if choice is None else choice.chosen
        by_member = {m.model_id: s for m, s in zip(members, scores)}
        choice = ensemble_predict(fitted, by_member, case.masked, case.prompt_id, case.slot_id)
        row[f"value:{ENSEMBLE}"] = None if choice is None else choice.chosen
        row["decision"] = decision_value(engine_class, row[f"value:{ENSEMBLE}"])
        rows.append(row)
    return pd.DataFrame(rows)


def save_engine_outputs(engine: pd.DataFrame, path) -> None:
    value_columns = [c for c in engine.columns if c.startswith("value:")] + ["decision"]
    rows = []
    for record in engine.to_dict("records"):
        row = {k: record[k] for k in ("response_id", "prompt_id", "slot_id")}
        row["probabilities"] = [repr(float(record[k])) for k in ("p_zero", "p_one", "p_other")]
        row["engine_class"] = ClassLabel(record["engine_class"]).value
        row["values"] = {c: format_label(record[c]) for c in value_columns}
        rows.append(row)
    write_jsonl(path, ENGINE_FORMAT, rows)


def load_engine_outputs(path) -> pd.DataFrame:
    rows = []
    for lineno, obj in read_jsonl(path, ENGINE_FORMAT):
        row = {k: require_field(obj, k, path, lineno) for k in ("response_id", "prompt_id", "slot_id")}
        probabilities = require_field(obj, "probabilities", path, lineno, list)
        if len(probabilities) != 3:
            raise DataFormatError("expected 3 class probabilities", path, lineno, "probabilities")
        try:
            row["p_zero"], row["p_one"], row["p_other"] = (float(p) for p in probabilities)
            row["engine_class"] = ClassLabel(require_field(obj, "engine_class", path, lineno))
            for column, text in require_field(obj, "values", path, lineno, dict).items():
                row[column] = parse_label(text)
        except ValueError as exc:
            raise DataFormatError(str(exc), path, lineno)
        rows.append(row)
    logger.info("Loaded %d engine rows from %s", len(rows), path)
    return pd.DataFrame(rows)
