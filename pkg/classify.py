"""
Classification Model - does the response state 0, 1 or some other value for a slot?
One generic model serves every prompt and slot: the slot question stands in
for the prompt in the `<cls><prompt><sep><response><sep>` input.
"""
from __future__ import annotations

import logging
import re
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import List, Sequence, Tuple

import joblib
import numpy as np
import scipy.sparse as sp
from sklearn.feature_extraction import DictVectorizer
from sklearn.feature_extraction.text import HashingVectorizer
from sklearn.linear_model import LogisticRegression
from sklearn.metrics import balanced_accuracy_score

from corpus import CLASS_ORDER, ClassLabel, Corpus, corpus_digest, derive_class_label
from errors import DataFormatError, StructuralError
from numlex import MASK, MaskedText, mask_text, template_segments

logger = logging.getLogger(__name__)

CLS = "<cls>"
SEP = "<sep>"

MODEL_FORMAT = "valueid-classifier"
MODEL_VERSION = 1
C_GRID = (0.3, 3.0)


# =============================================================================
# 1. INPUT FORMAT
# =============================================================================

@dataclass(frozen=True)
class ClassifierInput:
    formatted: str

    @property
    def parts(self) -> Tuple[str, str]:
        return parse_classifier_input(self.formatted)


def _escape(text: str) -> str:
    # Every literal "<" is doubled, so a single "<" can only open a marker
    return text.replace("<", "<<")


def format_classifier_input(slot_question: str, response: str) -> ClassifierInput:
    """
    Build `<cls>question<sep>response<sep>`

    Example:
        ("How many bags of gum sticks?", "no gum")
        -> "<cls>How many bags of gum sticks?<sep>no gum<sep>"
    """
    return ClassifierInput(f"{CLS}{_escape(slot_question)}{SEP}{_escape(response)}{SEP}")


def parse_classifier_input(formatted: str) -> Tuple[str, str]:
    """
    Inverse of format_classifier_input

    Raises:
        StructuralError: not a well-formed classifier input
    """
    if not formatted.startswith(CLS):
        raise StructuralError("classifier input must start with <cls>")
    segments = []
    current = []
    i = len(CLS)
    while i < len(formatted):
        if formatted.startswith("<<", i):
            current.append("<")
            i += 2
        elif formatted.startswith(SEP, i):
            segments.append("".join(current))
            current = []
            i += len(SEP)
        elif formatted[i] == "<":
            raise StructuralError(f"unescaped '<' at offset {i}")
        else:
            current.append(formatted[i])
            i += 1
    if current or len(segments) != 2:
        raise StructuralError("classifier input must hold exactly two <sep>-terminated segments")
    return segments[0], segments[1]


# =============================================================================
# 2. SHARED TEXT FEATURES (also used by the identification models)
# =============================================================================

_QUESTION_WORDS = {
    "how", "many", "much", "what", "which", "number", "of", "is", "are", "was", "were",
    "the", "a", "an", "did", "do", "does", "will", "would", "should", "you", "they",
    "student", "students", "buy", "bought", "purchase", "purchased", "there", "in", "for",
}
_TOKEN_RE = re.compile(r"[a-z]+|[=×*+\-/]")

ZERO_TOKEN = "__zero__"
ONE_TOKEN = "__one__"
NUMBER_TOKEN = "__num__"


def normalize_word(word: str) -> str:
    if len(word) > 3 and word.endswith("s") and not word.endswith("ss"):
        return word[:-1]
    return word


def slot_anchor(question: str) -> Tuple[str, ...]:
    """
    The phrase a response uses to talk about a slot, from its question

    "How many bags of gum sticks did you buy?" -> ("bag", "of", "gum", "stick")
    """
    words = re.findall(r"[a-z]+", question.lower())
    for marker in ("many", "much"):
        if marker in words:
            words = words[len(words) - words[::-1].index(marker):]
            break
    while words and words[0] in _QUESTION_WORDS:
        words.pop(0)
    while words and words[-1] in _QUESTION_WORDS:
        words.pop()
    return tuple(normalize_word(w) for w in words)


def template_tokens(template: str) -> List[str]:
    """Words, operators and <mask> placeholders of a masked template"""
    segments = template_segments(template)
    tokens = _TOKEN_RE.findall(segments[0].lower())
    for segment in segments[1:]:
        tokens.append(MASK)
        tokens.extend(_TOKEN_RE.findall(segment.lower()))
    return tokens


def find_anchor(tokens: Sequence[str], anchor: Sequence[str]) -> Tuple[List[int], int]:
    """
    Where the slot is mentioned: start offsets of the longest anchor suffix found

    Returns:
        (start positions, matched length); ([], 0) when the slot is never mentioned
    """
    normalized = [normalize_word(t) for t in tokens]
    for length in range(len(anchor), 0, -1):
        suffix = list(anchor[-length:])
        positions = [i for i in range(len(normalized) - length + 1) if normalized[i:i + length] == suffix]
        if positions:
            return positions, length
    return [], 0


def number_class_token(value) -> str:
    if value == 0:
        return ZERO_TOKEN
    if value == 1:
        return ONE_TOKEN
    return NUMBER_TOKEN


@lru_cache(maxsize=65536)
def masked_response(text: str) -> MaskedText:
    return mask_text(text)


def classed_tokens(masked: MaskedText) -> List[str]:
    """Template tokens with each placeholder replaced by its value's class token"""
    values = iter(masked.values)
    return [number_class_token(next(values)) if t == MASK else t for t in template_tokens(masked.template)]


# =============================================================================
# 3. FEATURES AND MODEL
# =============================================================================

_NGRAMS = HashingVectorizer(
    ngram_range=(1, 3), n_features=2 ** 18, alternate_sign=False, binary=True, norm=None,
    token_pattern=r"<cls>|<sep>|[a-z0-9]+", lowercase=True,
)
_QUESTION_NGRAMS = HashingVectorizer(
    ngram_range=(1, 3), n_features=2 ** 14, alternate_sign=False, binary=True, norm=None,
)


def anchored_features(question: str, masked: MaskedText) -> dict:
    """Context of the slot mention plus numlex counts"""
    tokens = classed_tokens(masked)
    positions, length = find_anchor(tokens, slot_anchor(question))
    features = {
        "numbers": min(len(masked.values), 5),
        "has_zero": int(any(v == 0 for v in masked.values)),
        "has_one": int(any(v == 1 for v in masked.values)),
    }
    if not positions:
        features["anchor=none"] = 1
        return features
    features[f"anchor_len={min(length, 3)}"] = 1
    features["anchor_count"] = min(len(positions), 3)
    for start in positions[:3]:
        end = start + length
        for d in range(1, 4):
            if start - d >= 0:
                features[f"pre{d}={tokens[start - d]}"] = 1
        for d in range(2):
            if end + d < len(tokens):
                features[f"post{d + 1}={tokens[end + d]}"] = 1
        for t in tokens[max(0, end - length - 4):start]:
            features[f"near={t}"] = 1
    return features


@dataclass(frozen=True)
class ClassDistribution:
    p_zero: float
    p_one: float
    p_other: float

    def __post_init__(self):
        probs = (self.p_zero, self.p_one, self.p_other)
        if any(p < 0 or p > 1 for p in probs) or abs(sum(probs) - 1.0) > 1e-9:
            raise StructuralError(f"not a class distribution: {probs}")

    @property
    def as_tuple(self):
        return (self.p_zero, self.p_one, self.p_other)

    @property
    def label(self) -> ClassLabel:
        # np.argmax keeps the first maximum: Zero < One < Other
        return CLASS_ORDER[int(np.argmax(self.as_tuple))]


@dataclass
class ClassifierModel:
    """Trained baseline classifier; predict is a pure function of (state, input)"""
    vectorizer: DictVectorizer
    estimator: LogisticRegression
    metadata: dict = field(default_factory=dict)

    def features(self, inputs: Sequence[ClassifierInput]):
        questions, responses = zip(*(i.parts for i in inputs)) if inputs else ((), ())
        engineered = [anchored_features(q, masked_response(r)) for q, r in zip(questions, responses)]
        return sp.hstack([
            self.vectorizer.transform(engineered),
            _NGRAMS.transform([i.formatted for i in inputs]),
            _QUESTION_NGRAMS.transform(list(questions)),
        ]).tocsr()

    def predict_proba(self, inputs: Sequence[ClassifierInput]) -> np.ndarray:
        """Rows of (p_zero, p_one, p_other); classes unseen in training get 0"""
        if not inputs:
            return np.zeros((0, 3))
        raw = self.estimator.predict_proba(self.features(inputs))
        probs = np.zeros((len(inputs), len(CLASS_ORDER)))
        for column, label in enumerate(self.estimator.classes_):
            probs[:, CLASS_ORDER.index(ClassLabel(label))] = raw[:, column]
        return probs / probs.sum(axis=1, keepdims=True)


def _to_distribution(row) -> ClassDistribution:
    row = np.clip(row, 0.0, 1.0)
    row = row / row.sum()
    return ClassDistribution(float(row[0]), float(row[1]), float(row[2]))


def predict_class(model: ClassifierModel, classifier_input: ClassifierInput) -> ClassDistribution:
    return _to_distribution(model.predict_proba([classifier_input])[0])


def predict_classes(model: ClassifierModel, inputs: Sequence[ClassifierInput]) -> List[ClassDistribution]:
    return [_to_distribution(row) for row in model.predict_proba(list(inputs))]


def classification_examples(corpus: Corpus):
    """(inputs, resolved class labels) for every (response, slot) case"""
    inputs = []
    labels = []
    for record in corpus.records:
        prompt = corpus.prompts[record.prompt_id]
        for slot in prompt.slots:
            inputs.append(format_classifier_input(slot.question, record.text))
            labels.append(derive_class_label(record.labels[slot.slot_id].resolved))
    return inputs, labels


def train_baseline_classifier(train: Corpus, dev: Corpus, seed: int) -> ClassifierModel:
    """
    Fit the generic three-way classifier

    Class-weighted logistic regression over slot-anchored context features,
    numlex counts, n-grams (n <= 3) of the formatted input and of the slot
    question. The regularization strength is picked on the dev split by
    balanced accuracy.

    Raises:
        StructuralError: fewer than two classes in the training split
    """
    inputs, labels = classification_examples(train)
    y = np.array([label.value for label in labels])
    if len(set(y)) < 2:
        raise StructuralError(f"training data has a single class: {sorted(set(y))}")

    vectorizer = DictVectorizer(sort=True)
    vectorizer.fit(anchored_features(q, masked_response(r)) for q, r in (i.parts for i in inputs))
    shell = ClassifierModel(vectorizer, None)
    X = shell.features(inputs)

    dev_inputs, dev_labels = classification_examples(dev)
    X_dev = shell.features(dev_inputs) if dev_inputs else None
    y_dev = np.array([label.value for label in dev_labels])

    best = None
    for C in C_GRID if X_dev is not None else (1.0,):
        estimator = LogisticRegression(C=C, class_weight="balanced", max_iter=2000, random_state=seed)
        estimator.fit(X, y)
        score = balanced_accuracy_score(y_dev, estimator.predict(X_dev)) if X_dev is not None else float("nan")
        logger.info("Classifier C=%s dev balanced accuracy %.4f", C, score)
        if best is None or score > best[0]:
            best = (score, C, estimator)

    score, C, estimator = best
    metadata = {
        "training_corpus": corpus_digest(r.response_id for r in train.records),
        "seed": seed,
        "C": C,
        "dev_balanced_accuracy": score,
        "classes": [str(c) for c in estimator.classes_],
    }
    return ClassifierModel(vectorizer, estimator, metadata)


def save_classifier(model: ClassifierModel, path) -> None:
    joblib.dump({
        "format": MODEL_FORMAT,
        "version": MODEL_VERSION,
        "metadata": model.metadata,
        "vectorizer": model.vectorizer,
        "estimator": model.estimator,
    }, path)


def load_artifact(path, fmt: str, version: int) -> dict:
    """
    Unpickle a joblib model artifact and check its format header

    Raises:
        DataFormatError: missing or unreadable file, not a joblib pickle,
            or a different format or version
    """
    path = Path(path)
    if not path.is_file():
        raise DataFormatError("file not found" if not path.exists() else "not a file", path)
    try:
        payload = joblib.load(path)
    except Exception as exc:
        # arbitrary bytes can fail anywhere inside the unpickler
        raise DataFormatError(f"not a joblib artifact ({type(exc).__name__}: {exc})", path)
    if not isinstance(payload, dict) or payload.get("format") != fmt:
        raise DataFormatError(f"not a {fmt} artifact", path)
    if payload.get("version") != version:
        raise DataFormatError(f"unsupported version {payload.get('version')!r}", path, field="version")
    return payload


def load_classifier(path) -> ClassifierModel:
    payload = load_artifact(path, MODEL_FORMAT, MODEL_VERSION)
    return ClassifierModel(payload["vectorizer"], payload["estimator"], payload["metadata"])
