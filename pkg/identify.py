"""
Identification Model - which masked value in a response answers a slot?
Each placeholder gets a probability of being the slot's value; the value
with the highest probability is the choice.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Dict, List, Optional, Protocol, Sequence, Tuple

import joblib
import numpy as np
import pandas as pd
from sklearn.feature_extraction import DictVectorizer
from sklearn.linear_model import LogisticRegression

from classify import find_anchor, load_artifact, normalize_word, slot_anchor, template_tokens
from corpus import ClassLabel, Corpus, corpus_digest, derive_class_label, read_csv_table
from errors import DataFormatError, StructuralError
from numlex import MASK, MaskedText

logger = logging.getLogger(__name__)

MODEL_FORMAT = "valueid-identifier"
MODEL_VERSION = 1
C_GRID = (0.3, 3.0)

CONFIG_CONTEXT = "context"
CONFIG_NUMERIC = "numeric"
CONFIGS = (CONFIG_CONTEXT, CONFIG_NUMERIC)

SCOPE_GENERIC = "generic"
SCOPE_PROMPT = "prompt"

SCORE_COLUMNS = ["response_id", "slot_id", "model_id", "probabilities"]
_OPERATORS = {"=", "×", "*", "+", "-", "/"}


# =============================================================================
# 1. SCORES AND CHOICES
# =============================================================================

@dataclass(frozen=True)
class TokenScores:
    """One probability per placeholder, in placeholder order; not normalized"""
    probabilities: tuple

    def __post_init__(self):
        probs = tuple(float(p) for p in self.probabilities)
        for p in probs:
            if not 0.0 <= p <= 1.0:
                raise StructuralError(f"probability {p} outside [0, 1]")
        object.__setattr__(self, "probabilities", probs)

    def __len__(self):
        return len(self.probabilities)


@dataclass(frozen=True)
class ValueChoice:
    chosen: Fraction
    placeholder_index: int
    score: float


@dataclass(frozen=True)
class IdentificationCase:
    """A (response, slot) pair as the identification models see it"""
    response_id: str
    prompt_id: str
    slot_id: str
    question: str
    masked: MaskedText
    resolved: Optional[Fraction] = None


def identification_cases(corpus: Corpus, response_ids=None, other_only: bool = False) -> List[IdentificationCase]:
    keep = None if response_ids is None else set(response_ids)
    masks = corpus.masks
    cases = []
    for record in corpus.records:
        if keep is not None and record.response_id not in keep:
            continue
        for slot in corpus.prompts[record.prompt_id].slots:
            resolved = record.labels[slot.slot_id].resolved
            if other_only and derive_class_label(resolved) != ClassLabel.OTHER:
                continue
            cases.append(IdentificationCase(
                record.response_id, record.prompt_id, slot.slot_id, slot.question,
                masks[record.response_id], resolved,
            ))
    return cases


def select_value(scores, masked: MaskedText) -> Optional[ValueChoice]:
    """
    Pick the value with the maximal score

    Ties go to the smallest placeholder index. Only the order of the scores
    matters, so any positive rescaling gives the same choice.

    Args:
        scores: TokenScores or a plain sequence of non-negative numbers
        masked: The masked response the scores belong to

    Returns:
        ValueChoice, or None when there are no placeholders

    Raises:
        StructuralError: scores and placeholders differ in length
    """
    values = np.asarray(scores.probabilities if isinstance(scores, TokenScores) else scores, dtype=float)
    if len(values) != len(masked.values):
        raise StructuralError(f"{len(values)} scores for {len(masked.values)} placeholders")
    if len(values) == 0:
        return None
    index = int(np.argmax(values))
    return ValueChoice(masked.values[index], index, float(values[index]))


def make_training_targets(masked: MaskedText, resolved) -> Optional[Tuple[int, ...]]:
    """
    1 for every placeholder whose value equals the resolved value, 0 elsewhere

    A value that occurs twice is labeled twice, even when one occurrence is
    an unrelated quantity.

    Returns:
        The labels, or None (skip-record) when the value does not occur
    """
    if resolved is None:
        return None
    resolved = Fraction(resolved)
    labels = tuple(int(v == resolved) for v in masked.values)
    return labels if any(labels) else None


# =============================================================================
# 2. PLACEHOLDER FEATURES
# =============================================================================

def _magnitude(value: Fraction) -> str:
    if value.denominator != 1:
        return "frac"
    if value <= 0:
        return "nonpos"
    return f"e{int(math.log10(value))}" if value < 10 ** 6 else "big"


def placeholder_features(question: str, masked: MaskedText, config: str) -> List[dict]:
    """One feature dict per placeholder under the given configuration"""
    if config not in CONFIGS:
        raise StructuralError(f"unknown identifier configuration {config!r}")
    tokens = template_tokens(masked.template)
    mask_positions = [i for i, t in enumerate(tokens) if t == MASK]
    if len(mask_positions) != len(masked.values):
        raise StructuralError("placeholder count differs from template tokens")
    anchor = slot_anchor(question)
    starts, length = find_anchor(tokens, anchor)
    n = len(mask_positions)

    rows = []
    for ordinal, (pos, value) in enumerate(zip(mask_positions, masked.values)):
        f = {}
        if starts:
            ahead = [s - pos for s in starts if s > pos]
            behind = [pos - (s + length - 1) for s in starts if s + length - 1 < pos]
            # "9 bags of chocolates" vs "chocolates: 9": side depends on how much of the anchor matched
            if ahead and min(ahead) <= 4:
                f[f"anchor_ahead={min(ahead)}"] = 1
                f[f"anchor_ahead={min(ahead)}|len={min(length, 3)}"] = 1
            if behind and min(behind) <= 4:
                f[f"anchor_behind={min(behind)}"] = 1
                f[f"anchor_behind={min(behind)}|len={min(length, 3)}"] = 1
            if not (ahead and min(ahead) <= 4) and not (behind and min(behind) <= 4):
                f["anchor_far"] = 1
            f[f"anchor_len={min(length, 3)}"] = 1
        else:
            f["anchor=none"] = 1
        f[f"ordinal={min(ordinal, 5)}"] = 1

        if config == CONFIG_CONTEXT:
            for d in range(1, 6):
                if pos - d >= 0:
                    f[f"w-{d}={normalize_word(tokens[pos - d])}"] = 1
                if pos + d < len(tokens):
                    f[f"w+{d}={normalize_word(tokens[pos + d])}"] = 1
            for word in anchor:
                f[f"q={word}"] = 1
        else:
            f[f"mag={_magnitude(value)}"] = 1
            f["is_last"] = int(ordinal == n - 1)
            f[f"repeats={min(sum(v == value for v in masked.values), 3)}"] = 1
            prev_tok = tokens[pos - 1] if pos > 0 else "<start>"
            next_tok = tokens[pos + 1] if pos + 1 < len(tokens) else "<end>"
            f[f"prev_op={prev_tok}" if prev_tok in _OPERATORS else "prev_word"] = 1
            f[f"next_op={next_tok}" if next_tok in _OPERATORS else "next_word"] = 1
            if next_tok not in _OPERATORS:
                f[f"next={normalize_word(next_tok)}"] = 1
        rows.append(f)
    return rows


# =============================================================================
# 3. MODEL
# =============================================================================

class TokenScorer(Protocol):
    """Anything that scores the placeholders of an identification case"""
    model_id: str

    def score_case(self, case: IdentificationCase) -> TokenScores:
        ...


@dataclass
class IdentifierModel:
    """Trained placeholder scorer; scoring is pure in (state, question, masked)"""
    model_id: str
    config: str
    vectorizer: DictVectorizer
    estimator: LogisticRegression
    per_prompt: Dict[str, Tuple[DictVectorizer, LogisticRegression]] = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)

    def _pick(self, prompt_id):
        return self.per_prompt.get(prompt_id, (self.vectorizer, self.estimator))

    def score(self, question: str, masked: MaskedText, prompt_id: Optional[str] = None) -> TokenScores:
        if not masked.values:
            return TokenScores(())
        vectorizer, estimator = self._pick(prompt_id)
        X = vectorizer.transform(placeholder_features(question, masked, self.config))
        return TokenScores(tuple(estimator.predict_proba(X)[:, _positive_column(estimator)]))

    def score_case(self, case: IdentificationCase) -> TokenScores:
        return self.score(case.question, case.masked, case.prompt_id)

    def score_cases(self, cases: Sequence[IdentificationCase]) -> List[TokenScores]:
        """Batch version of score_case; one transform per prompt-level estimator"""
        results: List[Optional[TokenScores]] = [None] * len(cases)
        groups: Dict[int, List[int]] = {}
        for i, case in enumerate(cases):
            if not case.masked.values:
                results[i] = TokenScores(())
            else:
                groups.setdefault(id(self._pick(case.prompt_id)[1]), []).append(i)
        for indices in groups.values():
            vectorizer, estimator = self._pick(cases[indices[0]].prompt_id)
            rows = []
            for i in indices:
                rows.extend(placeholder_features(cases[i].question, cases[i].masked, self.config))
            probs = estimator.predict_proba(vectorizer.transform(rows))[:, _positive_column(estimator)]
            offset = 0
            for i in indices:
                n = len(cases[i].masked.values)
                results[i] = TokenScores(tuple(probs[offset:offset + n]))
                offset += n
        return results


def _positive_column(estimator) -> int:
    return list(estimator.classes_).index(1)


def score_tokens(model: IdentifierModel, slot_question: str, masked: MaskedText, prompt_id=None) -> TokenScores:
    return model.score(slot_question, masked, prompt_id)


def training_rows(cases: Sequence[IdentificationCase], config: str, strict: bool = False):
    """
    Feature dicts and 0/1 targets for every usable placeholder

    Returns:
        (rows, targets, used, skipped); skipped counts records whose value
        is missing from the text or, with strict, is matched more than once
    """
    rows, targets = [], []
    used = skipped = 0
    for case in cases:
        labels = make_training_targets(case.masked, case.resolved)
        if labels is None or (strict and sum(labels) > 1):
            skipped += 1
            continue
        rows.extend(placeholder_features(case.question, case.masked, config))
        targets.extend(labels)
        used += 1
    return rows, np.array(targets, dtype=int), used, skipped


def _fit(rows, targets, C, seed):
    vectorizer = DictVectorizer(sort=True)
    X = vectorizer.fit_transform(rows)
    estimator = LogisticRegression(C=C, class_weight="balanced", max_iter=2000, random_state=seed)
    estimator.fit(X, targets)
    return vectorizer, estimator


def choice_accuracy(scorer, cases: Sequence[IdentificationCase]) -> Optional[float]:
    """Share of cases whose chosen value equals the resolved value"""
    if not cases:
        return None
    scored = scorer.score_cases(cases) if hasattr(scorer, "score_cases") else [scorer.score_case(c) for c in cases]
    hits = 0
    for case, scores in zip(cases, scored):
        choice = select_value(scores, case.masked)
        hits += int(choice is not None and choice.chosen == case.resolved)
    return hits / len(cases)


def train_baseline_identifier(
    train: Corpus,
    dev: Corpus,
    seed: int,
    model_id: str,
    config: str = CONFIG_CONTEXT,
    scope: str = SCOPE_GENERIC,
    strict: bool = False,
) -> IdentifierModel:
    """
    Fit a placeholder scorer on the Other-class cases of the training split

    Args:
        train: Training split
        dev: Development split (picks the regularization strength)
        seed: Recorded in the metadata; fitting is deterministic
        model_id: Name the ensemble and reports use for this model
        config: "context" (window words) or "numeric" (magnitude and operators)
        scope: "generic" for one model across prompts, "prompt" to add
            prompt-specific models on top of the generic one
        strict: Drop records where the value occurs more than once

    Raises:
        StructuralError: no usable training record, or unknown config/scope
    """
    if scope not in (SCOPE_GENERIC, SCOPE_PROMPT):
        raise StructuralError(f"unknown scope {scope!r}")
    train_cases = identification_cases(train, other_only=True)
    rows, targets, used, skipped = training_rows(train_cases, config, strict)
    logger.info("Identifier %s: %d usable records, %d skipped", model_id, used, skipped)
    if used == 0:
        raise StructuralError("no usable identifier training records")
    if len(set(targets)) < 2:
        raise StructuralError("identifier training placeholders are all positive")

    dev_cases = [c for c in identification_cases(dev, other_only=True) if c.masked.values]
    best = None
    for C in C_GRID if dev_cases else (1.0,):
        vectorizer, estimator = _fit(rows, targets, C, seed)
        model = IdentifierModel(model_id, config, vectorizer, estimator)
        accuracy = choice_accuracy(model, dev_cases) if dev_cases else float("nan")
        logger.info("Identifier %s C=%s dev accuracy %.4f", model_id, C, accuracy)
        if best is None or accuracy > best[0]:
            best = (accuracy, C, model)
    accuracy, C, model = best

    if scope == SCOPE_PROMPT:
        for prompt_id in train.prompt_ids:
            prompt_rows, prompt_targets, prompt_used, _ = training_rows(
                [c for c in train_cases if c.prompt_id == prompt_id], config, strict)
            if prompt_used and len(set(prompt_targets)) == 2:
                model.per_prompt[prompt_id] = _fit(prompt_rows, prompt_targets, C, seed)
            else:
                logger.warning("Identifier %s: prompt %s falls back to the generic model", model_id, prompt_id)

    model.metadata = {
        "model_id": model_id,
        "training_corpus": corpus_digest(r.response_id for r in train.records),
        "seed": seed,
        "config": config,
        "scope": scope,
        "strict": strict,
        "C": C,
        "dev_accuracy": accuracy,
        "records_used": used,
        "records_skipped": skipped,
    }
    return model


def save_identifier(model: IdentifierModel, path) -> None:
    joblib.dump({
        "format": MODEL_FORMAT,
        "version": MODEL_VERSION,
        "metadata": model.metadata,
        "model_id": model.model_id,
        "config": model.config,
        "vectorizer": model.vectorizer,
        "estimator": model.estimator,
        "per_prompt": model.per_prompt,
    }, path)


def load_identifier(path) -> IdentifierModel:
    payload = load_artifact(path, MODEL_FORMAT, MODEL_VERSION)
    return IdentifierModel(
        payload["model_id"], payload["config"], payload["vectorizer"], payload["estimator"],
        payload["per_prompt"], payload["metadata"],
    )


# =============================================================================
# 4. EXTERNAL SCORES
# =============================================================================

@dataclass
class ImportedScorer:
    """Scores computed outside this package, looked up by (response, slot)"""
    model_id: str
    table: Dict[Tuple[str, str], TokenScores]

    def score_case(self, case: IdentificationCase) -> TokenScores:
        try:
            return self.table[(case.response_id, case.slot_id)]
        except KeyError:
            raise StructuralError(
                f"model {self.model_id} has no scores for response {case.response_id}, slot {case.slot_id}")


def import_external_scores(path, corpus: Corpus) -> Dict[Tuple[str, str, str], TokenScores]:
    """
    Read a score file produced by an external model

    Format: CSV with header response_id,slot_id,model_id,probabilities; the
    last column holds comma-separated per-placeholder probabilities in
    placeholder order. Subword pooling is the producer's job.

    Raises:
        DataFormatError: unknown response or slot, placeholder count mismatch,
            probability outside [0, 1], duplicate key
    """
    frame = read_csv_table(path, SCORE_COLUMNS)

    masks = corpus.masks
    table = {}
    for offset, row in enumerate(frame.itertuples(index=False)):
        line = offset + 2
        record = corpus.by_id.get(row.response_id)
        if record is None:
            raise DataFormatError(f"unknown response {row.response_id}", path, line, "response_id")
        if row.slot_id not in corpus.prompts[record.prompt_id].slot_ids:
            raise DataFormatError(f"unknown slot {row.slot_id} for response {row.response_id}", path, line, "slot_id")
        text = row.probabilities.strip()
        try:
            probs = tuple(float(p) for p in text.split(",")) if text else ()
        except ValueError:
            raise DataFormatError("not a number", path, line, "probabilities")
        expected = masks[row.response_id].placeholder_count
        if len(probs) != expected:
            raise DataFormatError(
                f"response {row.response_id} has {expected} placeholders, got {len(probs)} probabilities",
                path, line, "probabilities")
        if any(not 0.0 <= p <= 1.0 for p in probs):
            raise DataFormatError(f"probability outside [0, 1] for response {row.response_id}", path, line, "probabilities")
        key = (row.response_id, row.slot_id, row.model_id)
        if key in table:
            raise DataFormatError(f"duplicate scores for {key}", path, line)
        table[key] = TokenScores(probs)
    logger.info("Imported %d score rows from %s", len(table), path)
    return table


def imported_scorers(table: Dict[Tuple[str, str, str], TokenScores]) -> Dict[str, ImportedScorer]:
    """Split an import table into one scorer per model id"""
    scorers: Dict[str, ImportedScorer] = {}
    for (response_id, slot_id, model_id), scores in table.items():
        scorers.setdefault(model_id, ImportedScorer(model_id, {})).table[(response_id, slot_id)] = scores
    return scorers


def export_scores(rows: Dict[Tuple[str, str, str], TokenScores], path) -> None:
    """Write scores in the import format (shortest exact float text)"""
    frame = pd.DataFrame(
        [
            {"response_id": r, "slot_id": s, "model_id": m, "probabilities": ",".join(repr(p) for p in scores.probabilities)}
            for (r, s, m), scores in sorted(rows.items())
        ],
        columns=SCORE_COLUMNS,
    )
    frame.to_csv(path, index=False)
