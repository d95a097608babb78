"""
Synthetic Data Generator - prompts, responses and rater labels with known gold values
Lets the whole pipeline train and evaluate without a real assessment dataset.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, fields, replace
from fractions import Fraction
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import inflect
import numpy as np
from dotenv import dotenv_values
from scipy.stats import binomtest

from corpus import (
    CLASS_ORDER, ClassLabel, Corpus, Prompt, ResponseRecord, Slot, SlotLabels,
    read_jsonl, require_field, write_jsonl, derive_class_label, format_label, natural_key,
    parse_label, save_corpus, save_prompts,
)
from errors import DataFormatError, InvariantError, StructuralError
from numlex import NUMBER_WORDS, scan_numbers
from verify import LinearConstraint

logger = logging.getLogger(__name__)

GOLD_FORMAT = "valueid-gold"
MAX_RENDERED = 999_999
MAX_SLOTS = 12


# =============================================================================
# 1. NUMBER WORDS
# =============================================================================

_ENGINE = inflect.engine()


def _spelled(n) -> str:
    if isinstance(n, bool) or not isinstance(n, (int, np.integer)) or not 0 <= n <= MAX_RENDERED:
        raise StructuralError(f"cannot render {n!r} in words (0..{MAX_RENDERED})")
    # inflect writes "one thousand, two hundred"; drop the commas and the "and"
    text = " ".join(_ENGINE.number_to_words(int(n), andword="").replace(",", " ").split())
    stray = [w for w in text.replace("-", " ").split() if w not in NUMBER_WORDS]
    if stray:
        raise InvariantError(f"inflect rendered {n} with words the lexer does not know: {stray}")
    return text


def render_words(n: int) -> List[str]:
    """
    English words for 0 <= n <= 999,999, without "and" or hyphens

    Example:
        105 -> ["one", "hundred", "five"]

    Raises:
        StructuralError: n outside the range or not an integer
    """
    return _spelled(n).replace("-", " ").split()


def words_text(n: int) -> str:
    """render_words as running text, tens and units hyphenated ("sixty-four")"""
    return _spelled(n)


# =============================================================================
# 2. CONFIGURATION
# =============================================================================

@dataclass(frozen=True)
class GeneratorConfig:
    seed: int = 7
    prompts: int = 7
    responses_per_prompt: int = 4000
    min_slots: int = 1
    max_slots: int = 12
    include_candy: bool = True
    class_zero: float = 0.25
    class_one: float = 0.07
    class_other: float = 0.68
    form_digit: float = 0.8
    form_written: float = 0.15
    form_fraction: float = 0.05
    rater_disagreement: float = 0.0
    misspelling_rate: float = 0.0
    misspell_numbers: bool = False
    distractor_rate: float = 0.0
    omission_rate: float = 0.0
    list_style_rate: float = 0.2

    def validate(self) -> "GeneratorConfig":
        """
        Raises:
            StructuralError: probabilities out of range, mixes not summing to 1,
                or slot counts the generator cannot produce
        """
        probabilities = {
            f.name: getattr(self, f.name) for f in fields(self)
            if f.name.startswith(("class_", "form_")) or f.name.endswith("_rate") or f.name == "rater_disagreement"
        }
        for name, p in probabilities.items():
            if not 0.0 <= p <= 1.0:
                raise StructuralError(f"{name}={p} is not a probability")
        if self.rater_disagreement >= 1.0:
            raise StructuralError("rater_disagreement must be below 1")
        if abs(self.class_zero + self.class_one + self.class_other - 1.0) > 1e-9:
            raise StructuralError("class_zero + class_one + class_other must be 1")
        if abs(self.form_digit + self.form_written + self.form_fraction - 1.0) > 1e-9:
            raise StructuralError("form_digit + form_written + form_fraction must be 1")
        if not 1 <= self.min_slots <= self.max_slots <= MAX_SLOTS:
            raise StructuralError(f"slot range [{self.min_slots}, {self.max_slots}] must lie in [1, {MAX_SLOTS}]")
        if self.prompts < 1 or self.responses_per_prompt < 1:
            raise StructuralError("prompts and responses_per_prompt must be positive")
        return self


def _coerce(name: str, kind, text: str, path):
    try:
        if kind is bool:
            lowered = text.strip().lower()
            if lowered not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(text)
            return lowered in ("true", "1", "yes")
        return kind(text)
    except (TypeError, ValueError):
        raise DataFormatError(f"cannot read {text!r} as {kind.__name__}", path, field=name)


def load_config(path, **overrides) -> GeneratorConfig:
    """
    Read a key=value generator config (dotenv syntax)

    Keys are GeneratorConfig field names; overrides (e.g. a --seed flag) win.

    Raises:
        DataFormatError: unknown key or unreadable value
    """
    path = Path(path)
    if not path.is_file():
        raise DataFormatError("file not found" if not path.exists() else "not a file", path)
    kinds = {f.name: type(f.default) for f in fields(GeneratorConfig)}
    values = {}
    try:
        entries = dotenv_values(path, encoding="utf-8")
    except (OSError, UnicodeDecodeError) as exc:
        raise DataFormatError(f"cannot read config: {exc}", path)
    for key, text in entries.items():
        if key not in kinds:
            raise DataFormatError("unknown key", path, field=key)
        values[key] = _coerce(key, kinds[key], text or "", path)
    values.update({k: v for k, v in overrides.items() if v is not None})
    return GeneratorConfig(**values).validate()


# =============================================================================
# 3. PROMPTS
# =============================================================================

@dataclass(frozen=True)
class Item:
    unit: str
    name: str
    price: int
    fractional: bool = False

    @property
    def units(self) -> str:
        return self.unit + ("es" if self.unit.endswith(("x", "ch", "sh")) else "s")

    def question(self) -> str:
        return f"How many {self.units} of {self.name}?"


CANDY_ITEMS = (
    Item("bag", "chocolates", 7),
    Item("bag", "lollipops", 3),
    Item("bag", "gum sticks", 5),
)

CATALOG = (
    ("box", "crayons", False), ("pack", "stickers", False), ("jar", "marbles", False),
    ("bottle", "juice", False), ("carton", "eggs", False), ("box", "pencils", False),
    ("bag", "apples", False), ("crate", "oranges", False), ("tin", "cookies", False),
    ("roll", "tape", False), ("pack", "batteries", False), ("bag", "pretzels", False),
    ("box", "erasers", False), ("cup", "flour", True), ("cup", "sugar", True),
    ("bag", "chocolates", False), ("bag", "lollipops", False), ("bag", "gum sticks", False),
)


def candy_prompt() -> Prompt:
    """$64 to spend on chocolates ($7 a bag), lollipops ($3) and gum sticks ($5)"""
    question = (
        "You have $64 to spend on candy. A bag of chocolates costs $7, a bag of lollipops "
        "costs $3 and a bag of gum sticks costs $5. How many bags of each could you buy "
        "so that you spend exactly $64?"
    )
    slots = tuple(Slot(f"s{i + 1}", item.name, item.question()) for i, item in enumerate(CANDY_ITEMS))
    return Prompt("p1", question, slots, LinearConstraint(tuple(i.price for i in CANDY_ITEMS), 64))


def _random_prompt(prompt_id: str, n_slots: int, rng) -> Tuple[Prompt, Tuple[Item, ...]]:
    order = rng.permutation(len(CATALOG))
    items = []
    seen = set()
    for index in order:
        unit, name, fractional = CATALOG[index]
        noun = name.split()[-1]
        if noun in seen:
            continue
        seen.add(noun)
        items.append(Item(unit, name, int(rng.integers(2, 10)), fractional))
        if len(items) == n_slots:
            break
    counts = rng.integers(0, 5, size=len(items))
    total = max(int(sum(i.price * c for i, c in zip(items, counts))), items[0].price)
    listing = ", ".join(f"a {i.unit} of {i.name} costs ${i.price}" for i in items)
    question = f"You have ${total} to spend. {listing[0].upper()}{listing[1:]}. How many of each could you buy?"
    slots = tuple(Slot(f"s{k + 1}", item.name, item.question()) for k, item in enumerate(items))
    constraint = LinearConstraint(tuple(i.price for i in items), total)
    return Prompt(prompt_id, question, slots, constraint), tuple(items)


# =============================================================================
# 4. RESPONSES
# =============================================================================

@dataclass(frozen=True)
class GoldRecord:
    """A generated response with its gold values and where each one sits"""
    record: ResponseRecord
    gold: Dict[str, Optional[Fraction]]
    placeholder: Dict[str, Optional[int]] = field(default_factory=dict)
    omitted: Dict[str, bool] = field(default_factory=dict)


class _TextBuilder:
    """Concatenates pieces and remembers where each answer surface starts"""

    def __init__(self, rng, config: GeneratorConfig):
        self.parts: List[str] = []
        self.length = 0
        self.starts: Dict[str, int] = {}
        self.rng = rng
        self.config = config

    def add(self, text: str) -> None:
        text = _misspell(text, self.rng, self.config)
        self.parts.append(text)
        self.length += len(text)

    def add_value(self, slot_id: str, surface: str) -> None:
        self.starts[slot_id] = self.length
        self.parts.append(surface)
        self.length += len(surface)

    @property
    def text(self) -> str:
        return "".join(self.parts)


def _misspell(text: str, rng, config: GeneratorConfig) -> str:
    if config.misspelling_rate <= 0:
        return text
    out = []
    for word in text.split(" "):
        core = word.strip(".,:;()")
        if (len(core) > 3 and core.isalpha() and rng.random() < config.misspelling_rate
                and (config.misspell_numbers or core.lower() not in NUMBER_WORDS)):
            i = int(rng.integers(1, len(core) - 1))
            kind = int(rng.integers(3))
            if kind == 0:
                typo = core[:i] + core[i + 1] + core[i] + core[i + 2:]
            elif kind == 1:
                typo = core[:i] + core[i + 1:]
            else:
                typo = core[:i] + core[i] + core[i:]
            # A typo must not turn an ordinary word into a number word
            if typo.lower() not in NUMBER_WORDS or config.misspell_numbers:
                word = word.replace(core, typo, 1)
        out.append(word)
    return " ".join(out)


def _stratified_classes(n: int, config: GeneratorConfig, rng) -> List[ClassLabel]:
    """Exactly the target mix (largest remainder), in random order"""
    targets = [config.class_zero, config.class_one, config.class_other]
    raw = [t * n for t in targets]
    counts = [int(r) for r in raw]
    for k in sorted(range(3), key=lambda k: (-(raw[k] - counts[k]), k))[: n - sum(counts)]:
        counts[k] += 1
    labels = [c for c, k in zip(CLASS_ORDER, counts) for _ in range(k)]
    return [labels[i] for i in rng.permutation(n)]


def _other_value(item: Item, rng) -> Fraction:
    if item.fractional and rng.random() < 0.5:
        return Fraction(int(rng.choice([1, 3, 5, 7, 9])), int(rng.choice([2, 4])))
    return Fraction(int(rng.integers(2, 21)))


def _surface(value: Fraction, config: GeneratorConfig, rng) -> Tuple[str, str]:
    """(surface text, form) for a value; written words only for integers"""
    form = rng.choice(["digit", "written", "fraction"], p=[config.form_digit, config.form_written, config.form_fraction])
    if value.denominator == 1:
        if form == "written":
            return words_text(value.numerator), "written"
        return str(value.numerator), "digit"
    if form == "fraction" or value.denominator not in (2, 4):
        if rng.random() < 0.3:
            # unsimplified, e.g. 2/4
            return f"{value.numerator * 2}/{value.denominator * 2}", "fraction"
        return f"{value.numerator}/{value.denominator}", "fraction"
    return str(float(value)), "digit"


_OPENERS = ("I would buy ", "I bought ", "You could buy ", "Buy ", "One possible way is to buy ", "My answer: ")
_ZERO_WORDS = ("no", "0", "zero")
_ONE_WORDS = ("a", "1", "one")


def _response(prompt: Prompt, items, classes, config: GeneratorConfig, rng):
    builder = _TextBuilder(rng, config)
    gold: Dict[str, Optional[Fraction]] = {}
    omitted: Dict[str, bool] = {}
    clauses = []
    for slot, item, label in zip(prompt.slots, items, classes):
        omitted[slot.slot_id] = False
        if label == ClassLabel.ZERO:
            choice = int(rng.integers(4))
            if choice == 3:
                gold[slot.slot_id] = None
                continue
            gold[slot.slot_id] = Fraction(0)
            clauses.append((slot, item, "zero", _ZERO_WORDS[choice]))
        elif label == ClassLabel.ONE:
            gold[slot.slot_id] = Fraction(1)
            clauses.append((slot, item, "one", _ONE_WORDS[int(rng.integers(3))]))
        else:
            value = _other_value(item, rng)
            gold[slot.slot_id] = value
            clauses.append((slot, item, "other", value))

    order = rng.permutation(len(clauses))
    clauses = [clauses[i] for i in order]
    list_style = rng.random() < config.list_style_rate

    if not clauses:
        builder.add("I would not buy anything.")
    elif list_style:
        for k, (slot, item, kind, payload) in enumerate(clauses):
            if k:
                builder.add(", ")
            builder.add(f"{item.name}: ")
            _add_quantity(builder, slot, item, kind, payload, config, rng, omitted, bare=True)
        builder.add(".")
    else:
        builder.add(_OPENERS[int(rng.integers(len(_OPENERS)))])
        for k, (slot, item, kind, payload) in enumerate(clauses):
            if k:
                builder.add(" and " if k == len(clauses) - 1 else ", ")
            _add_quantity(builder, slot, item, kind, payload, config, rng, omitted, bare=False)
        if rng.random() < config.distractor_rate and prompt.constraint is not None:
            builder.add(f" for a total of ${prompt.constraint.total}")
        builder.add(".")
    return builder, gold, omitted


def _add_quantity(builder, slot, item, kind, payload, config, rng, omitted, bare):
    noun = f" {item.units} of {item.name}"
    if kind == "zero":
        if payload == "no":
            builder.add("none" if bare else f"no{noun}")
            return
        builder.add_value(slot.slot_id, payload)
        builder.add("" if bare else noun)
        return
    if kind == "one":
        if payload == "a":
            builder.add(f"a {item.unit}" if bare else f"a {item.unit} of {item.name}")
            return
        if payload == "one":
            # a lone "one" is not read as a number
            builder.add(payload)
        else:
            builder.add_value(slot.slot_id, payload)
        builder.add("" if bare else f" {item.unit} of {item.name}")
        return

    value = payload
    if (not bare and value.denominator == 1 and value > 2
            and rng.random() < config.omission_rate):
        # The answer is only implied: "3 bags ... and then 5 more"
        first = int(rng.integers(1, value.numerator))
        builder.add(f"{first}{noun} and then {value.numerator - first} more")
        omitted[slot.slot_id] = True
        return
    surface, form = _surface(value, config, rng)
    builder.add_value(slot.slot_id, surface)
    builder.add("" if bare else noun)
    if not bare and form == "digit" and value.denominator == 1 and rng.random() < config.distractor_rate:
        builder.add(f" (${item.price} × {surface} = ${item.price * value.numerator})")


def _placeholders(text: str, starts: Dict[str, int], gold) -> Dict[str, Optional[int]]:
    """Placeholder index of every tracked surface, cross-checked against the lexer"""
    tokens = scan_numbers(text).tokens
    by_start = {t.start: (i, t.value) for i, t in enumerate(tokens)}
    found: Dict[str, Optional[int]] = {}
    for slot_id, value in gold.items():
        start = starts.get(slot_id)
        if start is None:
            found[slot_id] = None
            continue
        if start not in by_start or by_start[start][1] != value:
            raise InvariantError(f"generated value {value} at offset {start} not recovered from {text!r}")
        found[slot_id] = by_start[start][0]
    return found


def generate_corpus(config: GeneratorConfig) -> Tuple[Dict[str, Prompt], List[GoldRecord]]:
    """
    Generate prompts and gold-labelled responses

    Deterministic given config.seed. Classes follow the configured mix
    exactly per prompt; every Other-class gold value appears in the text
    unless the omission knob fired for it.

    Returns:
        (prompts by id, gold records); rater labels are still the gold values
    """
    config.validate()
    rng = np.random.default_rng(config.seed)
    prompts: Dict[str, Prompt] = {}
    items_by_prompt = {}
    for k in range(config.prompts):
        prompt_id = f"p{k + 1}"
        if k == 0 and config.include_candy:
            prompts[prompt_id], items_by_prompt[prompt_id] = candy_prompt(), CANDY_ITEMS
        else:
            n_slots = int(rng.integers(config.min_slots, config.max_slots + 1))
            prompts[prompt_id], items_by_prompt[prompt_id] = _random_prompt(prompt_id, n_slots, rng)

    records: List[GoldRecord] = []
    for prompt_id in sorted(prompts, key=natural_key):
        prompt = prompts[prompt_id]
        items = items_by_prompt[prompt_id]
        n = config.responses_per_prompt
        classes = _stratified_classes(n * prompt.V, config, rng)
        for r in range(n):
            response_id = f"{prompt_id}-r{r + 1:05d}"
            slot_classes = classes[r * prompt.V:(r + 1) * prompt.V]
            builder, gold, omitted = _response(prompt, items, slot_classes, config, rng)
            text = builder.text
            labels = {sid: SlotLabels(v, v, v) for sid, v in gold.items()}
            records.append(GoldRecord(
                ResponseRecord(response_id, prompt_id, text, labels),
                gold,
                _placeholders(text, builder.starts, gold),
                omitted,
            ))
    logger.info("Generated %d responses over %d prompts", len(records), len(prompts))
    return prompts, records


def achieved_rate_pvalue(successes: int, trials: int, rate: float) -> float:
    """Two-sided binomial test of an achieved count against its target rate"""
    if trials == 0:
        return 1.0
    return float(binomtest(successes, trials, rate).pvalue)


# =============================================================================
# 5. RATERS
# =============================================================================

def _perturb(value: Fraction, rng) -> Optional[Fraction]:
    kind = int(rng.integers(3))
    if kind == 0:
        return None
    if kind == 1:
        return value + 1
    return value - 1 if value - 1 >= 0 else value + 2


def simulate_raters(corpus: Corpus, rate: float, seed: int) -> Corpus:
    """
    Fill rater1/rater2 from the resolved (gold) labels

    Each case with a stated gold value is, with probability rate, given a
    wrong label by exactly one of the two raters (Absent, or the value moved
    by one). resolved always stays the gold value.

    Raises:
        StructuralError: rate outside [0, 1)
    """
    if not 0.0 <= rate < 1.0:
        raise StructuralError(f"rater disagreement {rate} must lie in [0, 1)")
    rng = np.random.default_rng(seed)
    records = []
    for record in corpus.records:
        labels = {}
        for slot_id in corpus.prompts[record.prompt_id].slot_ids:
            gold = record.labels[slot_id].resolved
            rater1 = rater2 = gold
            if gold is not None and rng.random() < rate:
                if rng.random() < 0.5:
                    rater1 = _perturb(gold, rng)
                else:
                    rater2 = _perturb(gold, rng)
            labels[slot_id] = SlotLabels(rater1, rater2, gold)
        records.append(replace(record, labels=labels))
    return Corpus(corpus.prompts, tuple(records))


def gold_corpus(prompts: Dict[str, Prompt], gold: List[GoldRecord]) -> Corpus:
    return Corpus(prompts, tuple(g.record for g in gold))


# =============================================================================
# 6. FILES
# =============================================================================

def save_gold(gold: List[GoldRecord], prompts: Dict[str, Prompt], path) -> None:
    rows = []
    for g in gold:
        for slot_id in prompts[g.record.prompt_id].slot_ids:
            index = g.placeholder.get(slot_id)
            rows.append({
                "response_id": g.record.response_id,
                "slot_id": slot_id,
                "gold": format_label(g.gold[slot_id]),
                "placeholder": -1 if index is None else index,
                "omitted": g.omitted.get(slot_id, False),
            })
    write_jsonl(path, GOLD_FORMAT, rows)


def load_gold(path) -> Dict[Tuple[str, str], dict]:
    table = {}
    for lineno, obj in read_jsonl(path, GOLD_FORMAT):
        key = (require_field(obj, "response_id", path, lineno), require_field(obj, "slot_id", path, lineno))
        placeholder = require_field(obj, "placeholder", path, lineno, int)
        try:
            gold = parse_label(require_field(obj, "gold", path, lineno))
        except ValueError as exc:
            raise DataFormatError(str(exc), path, lineno, "gold")
        table[key] = {
            "gold": gold,
            "placeholder": None if placeholder < 0 else placeholder,
            "omitted": bool(obj.get("omitted", False)),
        }
    return table


def write_generated(config: GeneratorConfig, out_dir, rater_seed: Optional[int] = None) -> Corpus:
    """
    Generate, simulate raters and write prompts.jsonl, responses.jsonl, gold.jsonl

    Returns:
        The written corpus
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    prompts, gold = generate_corpus(config)
    corpus = simulate_raters(gold_corpus(prompts, gold), config.rater_disagreement,
                             config.seed + 1 if rater_seed is None else rater_seed)
    save_prompts(prompts.values(), out_dir / "prompts.jsonl")
    save_corpus(corpus, out_dir / "responses.jsonl")
    save_gold(gold, prompts, out_dir / "gold.jsonl")

    cases = sum(p.V for p in prompts.values()) * config.responses_per_prompt
    other = sum(1 for g in gold for v in g.gold.values() if derive_class_label(v) == ClassLabel.OTHER)
    p = achieved_rate_pvalue(other, cases, config.class_other)
    if p < 0.01:
        logger.warning("Other-class share %.4f is far from the target %.4f", other / cases, config.class_other)
    return corpus
