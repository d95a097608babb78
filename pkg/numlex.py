"""
Number Lexer - find every number a student wrote and put it in one standard form
Handles decimal literals, fractions, mixed numbers and written English numerals,
adds a canonical annotation next to each number and masks numbers for the
token-classification models.
"""
from __future__ import annotations

import logging
import re
from dataclasses import dataclass
from decimal import Decimal, localcontext
from fractions import Fraction
from typing import List, Optional, Sequence

from errors import StructuralError

logger = logging.getLogger(__name__)

# Every value in the pipeline is an exact rational; Fraction keeps
# denominator > 0 and gcd(num, den) == 1 on construction.
Rational = Fraction

# Bit-exact literals: both end up in training data for downstream models
MASK = "<mask>"
ANNOTATION = " [={}]"

FRACTION_DENOMINATOR_LIMIT = 64
SIGNIFICANT_DIGITS = 6
MAX_PHRASE_WORDS = 24

FORM_DECIMAL = "decimal"
FORM_FRACTION = "fraction"
FORM_WRITTEN = "written"
FORM_MIXED = "mixed"


# =============================================================================
# 1. CANONICAL RENDERING
# =============================================================================

def _is_terminating(denominator: int) -> bool:
    for p in (2, 5):
        while denominator % p == 0:
            denominator //= p
    return denominator == 1


def _exact_decimal(value: Fraction) -> str:
    den = value.denominator
    places = 0
    while den != 1:
        # den only has factors 2 and 5 here
        den = den // 2 if den % 2 == 0 else den // 5
        places += 1
    scaled = abs(value) * 10 ** places
    digits = str(scaled.numerator).rjust(places + 1, "0")
    text = f"{digits[:-places]}.{digits[-places:]}".rstrip("0").rstrip(".")
    return f"-{text}" if value < 0 else text


def canonical(value) -> str:
    """
    Render a value in its one standard text form

    Integers as plain digits, other values as a reduced fraction "p/q" when
    q <= 64, otherwise as a decimal (exact when it terminates, else six
    significant digits).

    The six-digit form is lossy: 1/70 renders as 0.0142857, which parses
    back to 142857/10000000. Compare values as Fractions, not as canonical
    text, when the denominator is large and non-terminating.
    """
    value = Fraction(value)
    if value.denominator == 1:
        return str(value.numerator)
    if value.denominator <= FRACTION_DENOMINATOR_LIMIT:
        return f"{value.numerator}/{value.denominator}"
    if _is_terminating(value.denominator):
        return _exact_decimal(value)
    with localcontext() as ctx:
        ctx.prec = SIGNIFICANT_DIGITS
        approx = Decimal(value.numerator) / Decimal(value.denominator)
    return format(approx, "f")


_RATIONAL_TEXT = re.compile(r"^[-+]?(?:\d+(?:\.\d+)?|\.\d+|\d+/\d+)$")


def parse_rational(text: str) -> Fraction:
    """
    Parse "3/2", "1.5", "2" or "-0.25" into an exact rational

    Raises:
        ValueError: text is not a plain rational literal or has a zero denominator
    """
    text = text.strip()
    if not _RATIONAL_TEXT.match(text):
        raise ValueError(f"not a rational number: {text!r}")
    try:
        return Fraction(text)
    except ZeroDivisionError:
        raise ValueError(f"zero denominator: {text!r}") from None


# =============================================================================
# 2. WRITTEN NUMBERS - FINITE STATE AUTOMATON
# =============================================================================

_UNITS = {
    "one": 1, "two": 2, "three": 3, "four": 4, "five": 5,
    "six": 6, "seven": 7, "eight": 8, "nine": 9,
}
_TEENS = {
    "ten": 10, "eleven": 11, "twelve": 12, "thirteen": 13, "fourteen": 14,
    "fifteen": 15, "sixteen": 16, "seventeen": 17, "eighteen": 18, "nineteen": 19,
}
_TENS = {
    "twenty": 20, "thirty": 30, "forty": 40, "fifty": 50,
    "sixty": 60, "seventy": 70, "eighty": 80, "ninety": 90,
}
_SCALES = {"thousand": 1_000, "million": 1_000_000}
_DIGIT_WORDS = {"zero": 0, **_UNITS}

NUMBER_WORDS = frozenset(
    list(_DIGIT_WORDS) + list(_TEENS) + list(_TENS) + list(_SCALES)
    + ["hundred", "and", "point"]
)

# Automaton states
_START = "start"
_ZERO = "zero"
_UNIT = "unit"
_TEEN = "teen"
_TENS_STATE = "tens"
_TENS_UNIT = "tens_unit"
_HUNDRED = "hundred"
_SCALE = "scale"
_AND = "and"
_POINT = "point"
_DIGITS = "digits"

_OPEN = {_START, _AND, _HUNDRED, _SCALE}
_GROUP_END = {_UNIT, _TEEN, _TENS_STATE, _TENS_UNIT, _HUNDRED}
_ACCEPTING = _GROUP_END | {_ZERO, _SCALE, _DIGITS}


def parse_written(words: Sequence[str]) -> Optional[Fraction]:
    """
    Run the written-number automaton over lowercase word tokens

    Accepts integers up to 999,999,999 ("sixty four", "one hundred and five",
    "two million three thousand") and decimals spelled with "point" followed by
    digit words ("three point one four"). Hyphenated words must already be split.

    Returns:
        The value, or None when the words are not one complete number phrase
    """
    state = _START
    total = 0
    group = 0
    scale_cap = None
    after_and = False
    digits = []

    for word in words:
        if state in (_POINT, _DIGITS):
            if word not in _DIGIT_WORDS:
                return None
            digits.append(str(_DIGIT_WORDS[word]))
            state = _DIGITS
        elif word == "point":
            if state not in _ACCEPTING:
                return None
            state = _POINT
        elif word == "zero":
            if state != _START:
                return None
            state = _ZERO
        elif word in _UNITS:
            if state in _OPEN:
                state = _UNIT
            elif state == _TENS_STATE:
                state = _TENS_UNIT
            else:
                return None
            group += _UNITS[word]
        elif word in _TEENS or word in _TENS:
            if state not in _OPEN:
                return None
            group += _TEENS.get(word) or _TENS[word]
            state = _TEEN if word in _TEENS else _TENS_STATE
        elif word == "hundred":
            if state != _UNIT or group >= 10 or after_and:
                return None
            group *= 100
            state = _HUNDRED
        elif word in _SCALES:
            scale = _SCALES[word]
            if state not in _GROUP_END or (scale_cap is not None and scale >= scale_cap):
                return None
            total += group * scale
            group = 0
            scale_cap = scale
            after_and = False
            state = _SCALE
        elif word == "and":
            if state not in (_HUNDRED, _SCALE):
                return None
            after_and = True
            state = _AND
        else:
            return None

    if state not in _ACCEPTING:
        return None
    value = Fraction(total + group)
    if digits:
        value += Fraction(int("".join(digits)), 10 ** len(digits))
    return value


# =============================================================================
# 3. SCANNING
# =============================================================================

@dataclass(frozen=True)
class NumberToken:
    """One detected number; surface == source[start:end]"""
    start: int
    end: int
    surface: str
    value: Fraction
    form: str
    # End offset of an annotation already present right after the surface
    annotation_end: Optional[int] = None

    @property
    def span(self):
        return (self.start, self.end)

    @property
    def masked_end(self) -> int:
        return self.annotation_end if self.annotation_end is not None else self.end


@dataclass(frozen=True)
class AnnotatedText:
    source: str
    tokens: tuple = ()
    diagnostics: tuple = ()

    def __post_init__(self):
        last_end = -1
        for token in self.tokens:
            if token.start < last_end or token.start >= token.end:
                raise StructuralError(f"overlapping or empty number span at {token.start}")
            if self.source[token.start:token.end] != token.surface:
                raise StructuralError(f"surface mismatch at {token.start}: {token.surface!r}")
            last_end = token.masked_end

    @property
    def values(self):
        return tuple(token.value for token in self.tokens)


_ANNOTATION_RE = re.compile(r" \[=[^\]\s]*\]")
_NUMERIC_RE = re.compile(
    r"""
    (?<![\w.])(?<!\d/)
    (?P<sign>[-+])?
    (?P<currency>[$£€])?
    (?:
        (?P<whole>\d+)[ ]+(?P<mnum>\d+)/(?P<mden>\d+)
      | (?P<num>\d+)/(?P<den>\d+)
      | (?P<dec>\d{1,3}(?:,\d{3})+(?:\.\d+)?|\d+(?:\.\d+)?|\.\d+)
    )
    (?![\w/]|\.\d)
    """,
    re.VERBOSE,
)
_WORD_RE = re.compile(r"[A-Za-z]+(?:-[A-Za-z]+)*")


def _numeric_candidates(text):
    for match in _NUMERIC_RE.finditer(text):
        negative = match.group("sign") == "-"
        if match.group("whole") is not None:
            den = int(match.group("mden"))
            form = FORM_MIXED
            value = None if den == 0 else int(match.group("whole")) + Fraction(int(match.group("mnum")), den)
        elif match.group("num") is not None:
            den = int(match.group("den"))
            form = FORM_FRACTION
            value = None if den == 0 else Fraction(int(match.group("num")), den)
        else:
            form = FORM_DECIMAL
            value = Fraction(match.group("dec").replace(",", ""))
        if value is not None and negative:
            value = -value
        yield match.start(), match.end(), value, form


def _written_candidates(text, bare_one):
    words = [(m.start(), m.end(), m.group(0).lower().split("-")) for m in _WORD_RE.finditer(text)]
    for i, (start, _, parts) in enumerate(words):
        if not all(p in NUMBER_WORDS for p in parts):
            continue
        # Extend the run while words are number words separated only by spaces
        j = i + 1
        while (j < len(words) and j - i < MAX_PHRASE_WORDS
               and text[words[j - 1][1]:words[j][0]].isspace()
               and all(p in NUMBER_WORDS for p in words[j][2])):
            j += 1
        for k in range(j, i, -1):
            phrase = [p for w in words[i:k] for p in w[2]]
            value = parse_written(phrase)
            if value is None:
                continue
            # A lone "one" is usually a pronoun or determiner ("one possible way")
            if phrase == ["one"] and not bare_one:
                break
            yield start, words[k - 1][1], value, FORM_WRITTEN
            break


def scan_numbers(text: str, bare_one: bool = False) -> AnnotatedText:
    """
    Detect every number in free text

    Candidates from the numeric regex and the written-number automaton are
    resolved left to right, longest match first; anything overlapping an
    earlier pick is discarded. Existing " [=...]" annotations are never
    scanned, and a token directly followed by one remembers it.

    Args:
        text: Any text
        bare_one: Also report the single word "one" as the number 1

    Returns:
        AnnotatedText with tokens in offset order and a diagnostics list
        (fractions with a zero denominator are rejected there)
    """
    annotations = {m.start(): m.end() for m in _ANNOTATION_RE.finditer(text)}
    blocked = [(s, e) for s, e in annotations.items()]

    candidates = list(_numeric_candidates(text)) + list(_written_candidates(text, bare_one))
    candidates.sort(key=lambda c: (c[0], -(c[1] - c[0])))

    tokens = []
    diagnostics = []
    last_end = 0
    for start, end, value, form in candidates:
        if start < last_end:
            continue
        if any(start < b_end and b_start < end for b_start, b_end in blocked):
            continue
        last_end = end
        surface = text[start:end]
        if value is None:
            message = f"zero denominator in {surface!r} at offset {start}"
            logger.warning("Rejected number: %s", message)
            diagnostics.append(message)
            continue
        annotation_end = annotations.get(end)
        if annotation_end is not None:
            last_end = annotation_end
        tokens.append(NumberToken(start, end, surface, value, form, annotation_end))

    return AnnotatedText(text, tuple(tokens), tuple(diagnostics))


# =============================================================================
# 4. ANNOTATION AND MASKING
# =============================================================================

def annotate(annotated: AnnotatedText) -> str:
    """
    Insert " [=<canonical>]" right after each number that lacks one

    "3/6 of a pie" -> "3/6 [=1/2] of a pie". Running it again on the scan of
    its own output changes nothing.
    """
    pieces = []
    cursor = 0
    for token in annotated.tokens:
        pieces.append(annotated.source[cursor:token.end])
        if token.annotation_end is None:
            pieces.append(ANNOTATION.format(canonical(token.value)))
        cursor = token.end
    pieces.append(annotated.source[cursor:])
    return "".join(pieces)


_TEMPLATE_RE = re.compile(r"<<|<mask>")


def template_segments(template: str) -> List[str]:
    """
    Literal text around the placeholders of a masked template, unescaped

    In a template every literal "<" is written "<<", so a "<mask>" typed by
    the student never reads as a placeholder. One more segment than
    placeholders is returned.
    """
    segments = []
    current = []
    cursor = 0
    for match in _TEMPLATE_RE.finditer(template):
        current.append(template[cursor:match.start()])
        if match.group() == "<<":
            current.append("<")
        else:
            segments.append("".join(current))
            current = []
        cursor = match.end()
    current.append(template[cursor:])
    segments.append("".join(current))
    return segments


@dataclass(frozen=True)
class MaskedText:
    """Template with one MASK per number and the masked values in order"""
    template: str
    values: tuple = ()

    @property
    def placeholder_count(self) -> int:
        return len(template_segments(self.template)) - 1


def _escape_literal(text: str) -> str:
    return text.replace("<", "<<")


def mask_values(annotated: AnnotatedText) -> MaskedText:
    """
    Replace every number (together with its annotation, if any) by MASK

    Value multiplicity is preserved: "2 and 2" keeps both 2s. Literal "<" in
    the surrounding text is doubled.
    """
    pieces = []
    cursor = 0
    for token in annotated.tokens:
        pieces.append(_escape_literal(annotated.source[cursor:token.start]))
        pieces.append(MASK)
        cursor = token.masked_end
    pieces.append(_escape_literal(annotated.source[cursor:]))
    return MaskedText("".join(pieces), annotated.values)


def unmask(masked: MaskedText) -> str:
    """
    Put canonical renderings back in place of the placeholders

    Raises:
        StructuralError: placeholder count and value count differ
    """
    parts = template_segments(masked.template)
    if len(parts) - 1 != len(masked.values):
        raise StructuralError(
            f"template has {len(parts) - 1} placeholders but {len(masked.values)} values"
        )
    pieces = [parts[0]]
    for value, rest in zip(masked.values, parts[1:]):
        pieces.append(canonical(value))
        pieces.append(rest)
    return "".join(pieces)


def mask_text(text: str) -> MaskedText:
    """Shortcut: scan then mask"""
    return mask_values(scan_numbers(text))
