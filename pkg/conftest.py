"""Shared fixtures: a hand-written candy corpus and a small generated one"""
from fractions import Fraction

import pytest

from corpus import Corpus, ResponseRecord, SlotLabels
from syngen import GeneratorConfig, candy_prompt, generate_corpus, gold_corpus, simulate_raters


MODEL_ANSWER = (
    "One possible way to spend a total of $64 using a combination of chocolates, "
    "lollipops, and gum sticks would be to purchase 9 bags of chocolates "
    "($7 × 9 = $ 63), 1 bag of lollipops ($ 3), and 2 bags of gum sticks "
    "($5 × 2 = $ 10). This combination would total $64."
)
MODEL_VALUES = [64, 9, 7, 9, 63, 1, 3, 2, 5, 2, 10, 64]


def make_record(response_id, text, values, raters=None):
    """
    values: resolved label per candy slot (None = Absent)
    raters: optional (rater1, rater2) tuples per slot; defaults to agreement
    """
    prompt = candy_prompt()
    labels = {}
    for i, slot_id in enumerate(prompt.slot_ids):
        resolved = None if values[i] is None else Fraction(values[i])
        r1, r2 = (resolved, resolved) if raters is None else raters[i]
        labels[slot_id] = SlotLabels(r1, r2, resolved)
    return ResponseRecord(response_id, prompt.prompt_id, text, labels)


CANDY_RESPONSES = [
    ("r1", "I would buy 7 bags of chocolates and 3 bags of gum sticks.", (7, None, 3)),
    ("r2", "Buy 9 bags of chocolates ($7 × 9 = $63) and 1 bag of lollipops.", (9, 1, None)),
    ("r3", "Chocolates: 2, lollipops: 10, gum sticks: 4", (2, 10, 4)),
    ("r4", "I bought five bags of chocolates, two bags of lollipops and a bag of gum sticks.", (5, 2, 1)),
    ("r5", "You could buy 4 bags of lollipops and 8 bags of chocolates.", (8, 4, None)),
    ("r6", "I spent it all on gum sticks: 12 bags and then 1 more.", (None, None, 13)),
]


@pytest.fixture
def candy_corpus():
    prompt = candy_prompt()
    records = tuple(make_record(rid, text, values) for rid, text, values in CANDY_RESPONSES)
    return Corpus({prompt.prompt_id: prompt}, records)


@pytest.fixture(scope="session")
def small_generated():
    """Two prompts, 300 responses each, raters disagreeing 10% of the time"""
    config = GeneratorConfig(seed=11, prompts=2, responses_per_prompt=300)
    prompts, gold = generate_corpus(config)
    corpus = simulate_raters(gold_corpus(prompts, gold), rate=0.1, seed=3)
    return corpus, gold
