"""
Solution Verification - check extracted values against a prompt's linear constraint
Misconception diagnostics (over/under the total, non-integer counts,
unsimplified fractions) and brute-force enumeration of every valid answer.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from fractions import Fraction
from typing import Optional, Sequence

from errors import StructuralError

ENUMERATION_LIMIT = 10 ** 7


@dataclass(frozen=True)
class LinearConstraint:
    """c1*x1 + ... + ck*xk = total over non-negative integers (0 included)"""
    coefficients: tuple
    total: Fraction

    def __post_init__(self):
        if not self.coefficients:
            raise StructuralError("a constraint needs at least one coefficient")
        object.__setattr__(self, "coefficients", tuple(Fraction(c) for c in self.coefficients))
        object.__setattr__(self, "total", Fraction(self.total))

    @property
    def k(self) -> int:
        return len(self.coefficients)


class Verdict(str, Enum):
    VALID = "Valid"
    OVER = "Over"
    UNDER = "Under"
    NON_INTEGER = "NonInteger"
    NEGATIVE = "Negative"


@dataclass(frozen=True)
class Diagnosis:
    verdict: Verdict
    amount: Optional[Fraction] = None
    slots: tuple = ()

    def __str__(self):
        if self.verdict in (Verdict.OVER, Verdict.UNDER):
            amount = self.amount.numerator if self.amount.denominator == 1 else self.amount
            return f"{self.verdict.value}({amount})"
        if self.slots:
            return f"{self.verdict.value}([{', '.join(map(str, self.slots))}])"
        return self.verdict.value


def check_solution(values: Sequence, constraint: LinearConstraint, slot_ids: Optional[Sequence] = None) -> Diagnosis:
    """
    Check a vector of extracted values against the constraint

    Absent slots must already be replaced by 0. Domain problems (non-integer,
    negative) are reported before any mismatch of the total.

    Args:
        values: One rational per slot
        constraint: The prompt's constraint
        slot_ids: Names used in the diagnosis (defaults to 1-based positions)

    Raises:
        StructuralError: values length differs from the number of coefficients
    """
    if len(values) != constraint.k:
        raise StructuralError(f"expected {constraint.k} values, got {len(values)}")
    names = list(slot_ids) if slot_ids is not None else list(range(1, constraint.k + 1))
    values = [Fraction(v) for v in values]

    non_integer = tuple(names[i] for i, v in enumerate(values) if v.denominator != 1)
    if non_integer:
        return Diagnosis(Verdict.NON_INTEGER, slots=non_integer)
    negative = tuple(names[i] for i, v in enumerate(values) if v < 0)
    if negative:
        return Diagnosis(Verdict.NEGATIVE, slots=negative)

    residual = sum(c * v for c, v in zip(constraint.coefficients, values)) - constraint.total
    if residual > 0:
        return Diagnosis(Verdict.OVER, amount=residual)
    if residual < 0:
        return Diagnosis(Verdict.UNDER, amount=-residual)
    return Diagnosis(Verdict.VALID)


def enumerate_solutions(constraint: LinearConstraint, limit: int = ENUMERATION_LIMIT):
    """
    Every non-negative integer vector satisfying the constraint, sorted lexicographically

    Each variable is bounded by floor(total / c_i), which keeps the search finite.

    Raises:
        StructuralError: a coefficient is not positive, or the search space
            exceeds `limit` candidate tuples
    """
    coefficients = constraint.coefficients
    if any(c <= 0 for c in coefficients):
        raise StructuralError("all coefficients must be positive for a bounded search")
    total = constraint.total
    if total < 0:
        return []

    bounds = [math.floor(total / c) for c in coefficients]
    # The last variable is solved for, not searched
    candidates = math.prod(b + 1 for b in bounds[:-1])
    if candidates > limit:
        raise StructuralError(f"search space of {candidates} tuples exceeds the limit of {limit}")

    last = len(coefficients) - 1

    def search(index, remaining, prefix):
        c = coefficients[index]
        if index == last:
            x = remaining / c
            if x.denominator == 1:
                yield prefix + (int(x),)
            return
        for x in range(math.floor(remaining / c) + 1):
            yield from search(index + 1, remaining - c * x, prefix + (x,))

    return list(search(0, total, ()))


class FractionVerdict(str, Enum):
    EXACT = "Exact"
    EQUIVALENT_UNSIMPLIFIED = "EquivalentUnsimplified"
    WRONG_VALUE = "WrongValue"
    ZERO_DENOMINATOR = "ZeroDenominator"


def diagnose_fraction(expected, numerator, denominator) -> FractionVerdict:
    """
    Compare a student's numerator/denominator pair with the expected value

    Exact when the pair is the reduced form of the expected value,
    EquivalentUnsimplified when it has the right value but is not reduced.
    """
    expected = Fraction(expected)
    numerator = Fraction(numerator)
    denominator = Fraction(denominator)
    if denominator == 0:
        return FractionVerdict.ZERO_DENOMINATOR
    if numerator / denominator != expected:
        return FractionVerdict.WRONG_VALUE
    if (numerator, denominator) == (expected.numerator, expected.denominator):
        return FractionVerdict.EXACT
    return FractionVerdict.EQUIVALENT_UNSIMPLIFIED


# =============================================================================
# FEEDBACK
# =============================================================================

def feedback(diagnosis: Diagnosis, unit: str = "$") -> str:
    """One-line message for the student or grader"""
    if diagnosis.verdict == Verdict.VALID:
        return "Valid: the quantities meet the required total."
    if diagnosis.verdict == Verdict.OVER:
        return f"Over by {unit}{diagnosis.amount}: the quantities cost more than the required total."
    if diagnosis.verdict == Verdict.UNDER:
        return f"Under by {unit}{diagnosis.amount}: the quantities do not reach the required total."
    names = ", ".join(map(str, diagnosis.slots))
    if diagnosis.verdict == Verdict.NON_INTEGER:
        return f"Non-integer count for {names}: items can only be bought whole."
    return f"Negative count for {names}: quantities cannot be below zero."


FRACTION_FEEDBACK = {
    FractionVerdict.EXACT: "Correct and fully simplified.",
    FractionVerdict.EQUIVALENT_UNSIMPLIFIED: "Right value, but the fraction can be simplified.",
    FractionVerdict.WRONG_VALUE: "The fraction does not have the expected value; check the common denominator.",
    FractionVerdict.ZERO_DENOMINATOR: "A fraction cannot have a denominator of zero.",
}
