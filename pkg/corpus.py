"""
Corpus Module - prompts, value slots, double-scored responses and splits
Class labeling, deterministic 70/15/15 splits, class distribution and the
missing-value audit that bounds identification accuracy.
"""
from __future__ import annotations

import hashlib
import io
import json
import logging
import re
from dataclasses import dataclass, field
from enum import Enum
from fractions import Fraction
from functools import cached_property
from pathlib import Path
from typing import Dict, Iterable, Mapping, Optional

import numpy as np
import pandas as pd

from errors import DataFormatError, StructuralError
from numlex import MaskedText, mask_text, parse_rational
from verify import LinearConstraint

logger = logging.getLogger(__name__)

PROMPTS_FORMAT = "valueid-prompts"
CORPUS_FORMAT = "valueid-corpus"
FORMAT_VERSION = 1

TRAIN = "train"
DEV = "dev"
TEST = "test"
PARTITIONS = (TRAIN, DEV, TEST)
SPLIT_PERCENT = (70, 15, 15)
SPLIT_COLUMNS = ["response_id", "prompt_id", "partition"]

RATERS = ("rater1", "rater2", "resolved")


# =============================================================================
# 1. LABELS
# =============================================================================

class ClassLabel(str, Enum):
    """Zero-or-absent, one, or any other stated value"""
    ZERO = "0"
    ONE = "1"
    OTHER = "v"


# Argmax tie-break order everywhere in the pipeline
CLASS_ORDER = (ClassLabel.ZERO, ClassLabel.ONE, ClassLabel.OTHER)


def derive_class_label(label: Optional[Fraction]) -> ClassLabel:
    """
    Collapse a value label to its class

    Absent (None) counts as zero, since a quantity the student never
    mentions is taken to be 0.
    """
    if label is None or label == 0:
        return ClassLabel.ZERO
    if label == 1:
        return ClassLabel.ONE
    return ClassLabel.OTHER


def format_label(label: Optional[Fraction]) -> str:
    """Storage form of a value label: "" for Absent, exact "p/q" or "n" otherwise"""
    return "" if label is None else str(Fraction(label))


def parse_label(text: str) -> Optional[Fraction]:
    text = text.strip()
    return None if text == "" else parse_rational(text)


# =============================================================================
# 2. DATA MODEL
# =============================================================================

@dataclass(frozen=True)
class Slot:
    slot_id: str
    name: str
    question: str


@dataclass(frozen=True)
class Prompt:
    prompt_id: str
    question: str
    slots: tuple
    constraint: Optional[LinearConstraint] = None

    def __post_init__(self):
        if not self.slots:
            raise StructuralError(f"prompt {self.prompt_id} has no value slots")
        ids = [s.slot_id for s in self.slots]
        if len(set(ids)) != len(ids):
            raise StructuralError(f"prompt {self.prompt_id} has duplicate slot ids")

    @property
    def V(self) -> int:
        return len(self.slots)

    @property
    def slot_ids(self):
        return tuple(s.slot_id for s in self.slots)

    def slot(self, slot_id: str) -> Slot:
        for s in self.slots:
            if s.slot_id == slot_id:
                return s
        raise KeyError(slot_id)


@dataclass(frozen=True)
class SlotLabels:
    rater1: Optional[Fraction] = None
    rater2: Optional[Fraction] = None
    resolved: Optional[Fraction] = None


@dataclass(frozen=True)
class ResponseRecord:
    response_id: str
    prompt_id: str
    text: str
    labels: Mapping[str, SlotLabels] = field(default_factory=dict)


@dataclass(frozen=True)
class Corpus:
    """Prompts plus their responses; immutable after construction"""
    prompts: Mapping[str, Prompt]
    records: tuple

    def __post_init__(self):
        seen = set()
        for record in self.records:
            if record.response_id in seen:
                raise StructuralError(f"duplicate response id {record.response_id}")
            seen.add(record.response_id)
            prompt = self.prompts.get(record.prompt_id)
            if prompt is None:
                raise StructuralError(f"response {record.response_id}: unknown prompt {record.prompt_id}")
            if set(record.labels) != set(prompt.slot_ids):
                raise StructuralError(f"response {record.response_id}: labels do not match slots of {prompt.prompt_id}")

    def __len__(self):
        return len(self.records)

    @property
    def prompt_ids(self):
        return sorted(self.prompts, key=natural_key)

    @cached_property
    def by_id(self) -> Dict[str, ResponseRecord]:
        return {r.response_id: r for r in self.records}

    @cached_property
    def masks(self) -> Dict[str, MaskedText]:
        """Masked form of every response, computed once"""
        return {r.response_id: mask_text(r.text) for r in self.records}

    def subset(self, response_ids: Iterable[str]) -> "Corpus":
        keep = set(response_ids)
        return Corpus(self.prompts, tuple(r for r in self.records if r.response_id in keep))

    def cases(self, response_ids: Optional[Iterable[str]] = None) -> pd.DataFrame:
        """
        One row per (response, slot) case

        Returns:
            DataFrame with response_id, prompt_id, slot_id, rater1, rater2,
            resolved (Fraction or None) and resolved_class
        """
        keep = None if response_ids is None else set(response_ids)
        rows = []
        for record in self.records:
            if keep is not None and record.response_id not in keep:
                continue
            for slot_id in self.prompts[record.prompt_id].slot_ids:
                labels = record.labels[slot_id]
                rows.append({
                    "response_id": record.response_id,
                    "prompt_id": record.prompt_id,
                    "slot_id": slot_id,
                    "rater1": labels.rater1,
                    "rater2": labels.rater2,
                    "resolved": labels.resolved,
                    "resolved_class": derive_class_label(labels.resolved),
                })
        columns = ["response_id", "prompt_id", "slot_id", "rater1", "rater2", "resolved", "resolved_class"]
        return pd.DataFrame(rows, columns=columns)


def natural_key(identifier: str):
    """Sort "p2" before "p10" """
    return [int(part) if part.isdigit() else part for part in re.split(r"(\d+)", str(identifier))]


def corpus_digest(response_ids: Iterable[str]) -> str:
    """Stable short id for a set of responses (used in model metadata)"""
    joined = "\n".join(sorted(response_ids)).encode("utf-8")
    return hashlib.sha256(joined).hexdigest()[:16]


# =============================================================================
# 3. SPLITS
# =============================================================================

@dataclass(frozen=True)
class SplitAssignment:
    partition: Mapping[str, str]
    seed: int

    def ids(self, name: str):
        return [rid for rid, part in self.partition.items() if part == name]

    def sizes(self):
        counts = {name: 0 for name in PARTITIONS}
        for part in self.partition.values():
            counts[part] += 1
        return tuple(counts[name] for name in PARTITIONS)


def split_sizes(n: int):
    """
    Exact 70/15/15 sizes for n items, largest-remainder rounding

    Returns:
        (train, dev, test) summing to n
    """
    quotas = [n * pct for pct in SPLIT_PERCENT]
    sizes = [q // 100 for q in quotas]
    remainders = [q % 100 for q in quotas]
    leftover = n - sum(sizes)
    # Ties go to train, then dev, then test
    order = sorted(range(len(sizes)), key=lambda i: (-remainders[i], i))
    for i in order[:leftover]:
        sizes[i] += 1
    return tuple(sizes)


def _split_hash(seed: int, response_id: str) -> str:
    return hashlib.sha256(f"{seed}-{response_id}".encode("utf-8")).hexdigest()


def split_corpus(corpus: Corpus, seed: int) -> SplitAssignment:
    """
    Assign every response to train/dev/test

    Each prompt is split on its own: its response ids are ordered by a seeded
    hash (so file order does not matter), then cut at exact 70/15/15 sizes.

    Raises:
        StructuralError: corpus is empty
    """
    if len(corpus) == 0:
        raise StructuralError("cannot split an empty corpus")

    ids_by_prompt = {}
    for record in corpus.records:
        ids_by_prompt.setdefault(record.prompt_id, []).append(record.response_id)

    partition = {}
    for prompt_id in sorted(ids_by_prompt, key=natural_key):
        ids = sorted(ids_by_prompt[prompt_id], key=lambda rid: (_split_hash(seed, rid), rid))
        n_train, n_dev, _ = split_sizes(len(ids))
        if len(ids) < 7:
            logger.warning("Prompt %s has only %d responses; some partitions are empty", prompt_id, len(ids))
        for i, rid in enumerate(ids):
            partition[rid] = TRAIN if i < n_train else DEV if i < n_train + n_dev else TEST

    return SplitAssignment(partition, seed)


def save_splits(assignment: SplitAssignment, corpus: Corpus, path) -> None:
    rows = [
        {"response_id": r.response_id, "prompt_id": r.prompt_id, "partition": assignment.partition[r.response_id]}
        for r in corpus.records
    ]
    path = Path(path)
    with open(path, "w", encoding="utf-8", newline="") as handle:
        handle.write(f"# seed={assignment.seed}\n")
        pd.DataFrame(rows, columns=SPLIT_COLUMNS).to_csv(handle, index=False)


def load_splits(path) -> SplitAssignment:
    path = Path(path)
    header = read_text_file(path).split("\n", 1)[0].strip()
    match = re.fullmatch(r"# seed=(-?\d+)", header)
    if not match:
        raise DataFormatError("missing '# seed=<n>' header", path, 1)
    df = read_csv_table(path, SPLIT_COLUMNS, skip_lines=1)
    bad = df.loc[~df["partition"].isin(PARTITIONS)]
    if len(bad):
        raise DataFormatError(f"unknown partition {bad.iloc[0]['partition']!r}", path, int(bad.index[0]) + 3, "partition")
    return SplitAssignment(dict(zip(df["response_id"], df["partition"])), int(match.group(1)))


# =============================================================================
# 4. DISTRIBUTION, TRAINING COUNTS AND AUDIT
# =============================================================================

def class_distribution(corpus: Corpus) -> pd.DataFrame:
    """
    Percentage of Zero / One / Other resolved labels per prompt over N x V cases

    Returns:
        DataFrame indexed by prompt_id with columns V, N, zero, one, other
    """
    cases = corpus.cases()
    if cases.empty:
        raise StructuralError("class distribution of an empty corpus")
    rows = []
    for prompt_id in corpus.prompt_ids:
        sub = cases[cases["prompt_id"] == prompt_id]
        if sub.empty:
            continue
        counts = sub["resolved_class"].value_counts()
        total = len(sub)
        rows.append({
            "prompt_id": prompt_id,
            "V": corpus.prompts[prompt_id].V,
            "N": sub["response_id"].nunique(),
            "zero": 100.0 * counts.get(ClassLabel.ZERO, 0) / total,
            "one": 100.0 * counts.get(ClassLabel.ONE, 0) / total,
            "other": 100.0 * counts.get(ClassLabel.OTHER, 0) / total,
        })
    return pd.DataFrame(rows).set_index("prompt_id")


def format_distribution_row(zero: float, one: float, other: float) -> str:
    return f"{zero:.1f} / {one:.1f} / {other:.1f}"


def training_example_counts(corpus: Corpus, assignment: SplitAssignment) -> pd.DataFrame:
    """
    Per prompt: min / max / mean number of Other-class training cases per slot

    This is how much data each value slot gives the identification model.
    """
    cases = corpus.cases(assignment.ids(TRAIN))
    other = cases[cases["resolved_class"] == ClassLabel.OTHER]
    rows = []
    for prompt_id in corpus.prompt_ids:
        prompt = corpus.prompts[prompt_id]
        per_slot = other[other["prompt_id"] == prompt_id].groupby("slot_id").size()
        counts = np.array([per_slot.get(s, 0) for s in prompt.slot_ids])
        rows.append({
            "prompt_id": prompt_id,
            "V": prompt.V,
            "min": int(counts.min()) if prompt.V > 1 else None,
            "max": int(counts.max()) if prompt.V > 1 else None,
            "avg": float(counts.mean()),
        })
    return pd.DataFrame(rows).set_index("prompt_id")


def audit_bound(n_other: int, missing: int) -> Optional[float]:
    """Best achievable identification accuracy, None when there is nothing to identify"""
    if n_other == 0:
        return None
    return float(Fraction(n_other - missing, n_other))


def audit_missing_values(corpus: Corpus, response_ids: Optional[Iterable[str]] = None) -> pd.DataFrame:
    """
    Count Other-class cases whose resolved value never appears in the masked response

    Value equality is exact rational equality, so "1/2" in the text matches a
    resolved 0.5 and "two" matches 2.

    Returns:
        DataFrame with prompt_id, slot_id, n_other, missing, bound (None when n_other == 0)
    """
    cases = corpus.cases(response_ids)
    masks = corpus.masks
    rows = []
    for prompt_id in corpus.prompt_ids:
        for slot_id in corpus.prompts[prompt_id].slot_ids:
            sub = cases[(cases["prompt_id"] == prompt_id) & (cases["slot_id"] == slot_id)]
            other = sub[sub["resolved_class"] == ClassLabel.OTHER]
            missing = sum(
                1 for rid, value in zip(other["response_id"], other["resolved"])
                if value not in masks[rid].values
            )
            rows.append({
                "prompt_id": prompt_id,
                "slot_id": slot_id,
                "n_other": len(other),
                "missing": missing,
                "bound": audit_bound(len(other), missing),
            })
    return pd.DataFrame(rows, columns=["prompt_id", "slot_id", "n_other", "missing", "bound"])


# =============================================================================
# 5. FILES
# =============================================================================

def _dump(obj) -> str:
    return json.dumps(obj, sort_keys=True, ensure_ascii=False)


def read_text_file(path) -> str:
    """
    Whole file as UTF-8 text

    Raises:
        DataFormatError: missing, a directory, unreadable or not UTF-8
    """
    path = Path(path)
    if not path.exists():
        raise DataFormatError("file not found", path)
    try:
        return path.read_text(encoding="utf-8")
    except (OSError, UnicodeDecodeError) as exc:
        raise DataFormatError(f"cannot read file: {exc}", path)


def read_csv_table(path, columns, skip_lines: int = 0) -> pd.DataFrame:
    """
    String-valued CSV whose header must be exactly `columns`

    Args:
        path: CSV file
        columns: Expected header, in order
        skip_lines: Leading lines before the header (e.g. a "# seed=" line)

    Raises:
        DataFormatError: unreadable file, empty or malformed CSV, wrong header
    """
    lines = read_text_file(path).splitlines(keepends=True)
    header_line = skip_lines + 1
    try:
        frame = pd.read_csv(io.StringIO("".join(lines[skip_lines:])), dtype=str, keep_default_na=False)
    except (pd.errors.EmptyDataError, pd.errors.ParserError) as exc:
        raise DataFormatError(f"not a CSV table: {exc}", path, header_line)
    if list(frame.columns) != list(columns):
        raise DataFormatError(f"header must be {','.join(columns)}", path, header_line)
    return frame


def read_jsonl(path, expected_format):
    path = Path(path)
    lines = read_text_file(path).splitlines()
    if not lines:
        raise DataFormatError("empty file", path)
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as e:
        raise DataFormatError(f"bad header: {e}", path, 1)
    if not isinstance(header, dict) or header.get("format") != expected_format:
        raise DataFormatError(f"expected a {expected_format} header", path, 1, "format")
    if header.get("version") != FORMAT_VERSION:
        raise DataFormatError(f"unsupported version {header.get('version')!r}", path, 1, "version")
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as e:
            raise DataFormatError(f"invalid JSON: {e.msg}", path, lineno)
        if not isinstance(obj, dict):
            raise DataFormatError("record is not an object", path, lineno)
        yield lineno, obj


def require_field(obj, key, path, lineno, kind=str):
    if key not in obj:
        raise DataFormatError("missing", path, lineno, key)
    value = obj[key]
    if not isinstance(value, kind):
        raise DataFormatError(f"expected {kind.__name__}", path, lineno, key)
    return value


def write_jsonl(path, fmt, rows) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as handle:
        handle.write(_dump({"format": fmt, "version": FORMAT_VERSION}) + "\n")
        for row in rows:
            handle.write(_dump(row) + "\n")


def prompt_to_dict(prompt: Prompt) -> dict:
    constraint = None
    if prompt.constraint is not None:
        constraint = {
            "coefficients": [str(c) for c in prompt.constraint.coefficients],
            "total": str(prompt.constraint.total),
        }
    return {
        "prompt_id": prompt.prompt_id,
        "question": prompt.question,
        "slots": [{"slot_id": s.slot_id, "name": s.name, "question": s.question} for s in prompt.slots],
        "constraint": constraint,
    }


def save_prompts(prompts: Iterable[Prompt], path) -> None:
    write_jsonl(path, PROMPTS_FORMAT, [prompt_to_dict(p) for p in sorted(prompts, key=lambda p: natural_key(p.prompt_id))])


def load_prompts(path) -> Dict[str, Prompt]:
    prompts = {}
    for lineno, obj in read_jsonl(path, PROMPTS_FORMAT):
        prompt_id = require_field(obj, "prompt_id", path, lineno)
        question = require_field(obj, "question", path, lineno)
        raw_slots = require_field(obj, "slots", path, lineno, list)
        slots = []
        for i, raw in enumerate(raw_slots):
            if not isinstance(raw, dict):
                raise DataFormatError("slot is not an object", path, lineno, f"slots[{i}]")
            slots.append(Slot(
                require_field(raw, "slot_id", path, lineno),
                require_field(raw, "name", path, lineno),
                require_field(raw, "question", path, lineno),
            ))
        constraint = None
        raw_constraint = obj.get("constraint")
        if raw_constraint is not None:
            try:
                constraint = LinearConstraint(
                    tuple(parse_rational(str(c)) for c in raw_constraint["coefficients"]),
                    parse_rational(str(raw_constraint["total"])),
                )
            except (KeyError, TypeError, ValueError) as e:
                raise DataFormatError(str(e), path, lineno, "constraint")
        if prompt_id in prompts:
            raise DataFormatError(f"duplicate prompt id {prompt_id}", path, lineno, "prompt_id")
        try:
            prompts[prompt_id] = Prompt(prompt_id, question, tuple(slots), constraint)
        except StructuralError as e:
            raise DataFormatError(str(e), path, lineno, "slots")
    return prompts


def record_to_dict(record: ResponseRecord, prompt: Prompt) -> dict:
    return {
        "response_id": record.response_id,
        "prompt_id": record.prompt_id,
        "text": record.text,
        "labels": {
            slot_id: {rater: format_label(getattr(record.labels[slot_id], rater)) for rater in RATERS}
            for slot_id in prompt.slot_ids
        },
    }


def save_corpus(corpus: Corpus, path) -> None:
    """Write responses as JSON lines under a versioned header (prompts go to their own file)"""
    write_jsonl(path, CORPUS_FORMAT, (record_to_dict(r, corpus.prompts[r.prompt_id]) for r in corpus.records))


def load_corpus(path, prompts) -> Corpus:
    """
    Read a corpus file written by save_corpus

    Args:
        path: Corpus file
        prompts: Mapping of prompt id -> Prompt, or a prompt file path

    Raises:
        DataFormatError: malformed record (names the line and field) or duplicate response id
    """
    if not isinstance(prompts, Mapping):
        prompts = load_prompts(prompts)
    records = []
    seen = set()
    for lineno, obj in read_jsonl(path, CORPUS_FORMAT):
        response_id = require_field(obj, "response_id", path, lineno)
        prompt_id = require_field(obj, "prompt_id", path, lineno)
        text = require_field(obj, "text", path, lineno)
        raw_labels = require_field(obj, "labels", path, lineno, dict)
        if response_id in seen:
            raise DataFormatError(f"duplicate response id {response_id}", path, lineno, "response_id")
        seen.add(response_id)
        prompt = prompts.get(prompt_id)
        if prompt is None:
            raise DataFormatError(f"unknown prompt {prompt_id}", path, lineno, "prompt_id")
        labels = {}
        for slot_id in prompt.slot_ids:
            raw = raw_labels.get(slot_id)
            if not isinstance(raw, dict):
                raise DataFormatError("missing slot label", path, lineno, f"labels.{slot_id}")
            values = {}
            for rater in RATERS:
                if not isinstance(raw.get(rater), str):
                    raise DataFormatError("missing or not a string", path, lineno, f"labels.{slot_id}.{rater}")
                try:
                    values[rater] = parse_label(raw[rater])
                except ValueError as e:
                    raise DataFormatError(str(e), path, lineno, f"labels.{slot_id}.{rater}")
            labels[slot_id] = SlotLabels(**values)
        extra = set(raw_labels) - set(prompt.slot_ids)
        if extra:
            raise DataFormatError(f"unknown slots {sorted(extra)}", path, lineno, "labels")
        records.append(ResponseRecord(response_id, prompt_id, text, labels))
    logger.info("Loaded %d responses from %s", len(records), path)
    return Corpus(dict(prompts), tuple(records))


def load_corpus_dir(directory) -> Corpus:
    """Load prompts.jsonl + responses.jsonl from one directory (the layout `gen` writes)"""
    directory = Path(directory)
    return load_corpus(directory / "responses.jsonl", directory / "prompts.jsonl")
