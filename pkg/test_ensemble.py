"""Tests for convex score combination and simplex weight fitting"""
import itertools
from fractions import Fraction

import numpy as np
import pytest

from ensemble import (
    EnsembleWeights, FittedEnsemble, GLOBAL_KEY, SlotFit, accuracies, combine_scores,
    ensemble_predict, fit_simplex, fit_weights, load_weights, save_weights,
)
from errors import StructuralError
from identify import ImportedScorer, TokenScores, identification_cases, select_value
from numlex import MASK, MaskedText


def _random_dev(rng, m, n_cases=30, max_len=5):
    """Random member scores with one correct placeholder per case, padded like dev_tensor"""
    scores = np.full((n_cases, m, max_len), -1.0)
    correct = np.zeros((n_cases, max_len), dtype=bool)
    for i in range(n_cases):
        n = int(rng.integers(2, max_len + 1))
        scores[i, :, :n] = rng.random((m, n))
        correct[i, int(rng.integers(n))] = True
    return scores, correct


def _grid_oracle(scores, correct, m):
    """Best accuracy over every weight vector on a 0.01 grid, by plain loops"""
    best = 0.0
    for head in itertools.product(range(101), repeat=m - 1):
        if sum(head) > 100:
            continue
        alphas = [h / 100 for h in head] + [(100 - sum(head)) / 100]
        hits = 0
        for i in range(scores.shape[0]):
            n = int((scores[i, 0] >= 0).sum())
            combined = [sum(alphas[k] * scores[i, k, j] for k in range(m)) for j in range(n)]
            hits += int(correct[i, int(np.argmax(combined))])
        best = max(best, hits / scores.shape[0])
    return best


# =============================================================================
# COMBINATION
# =============================================================================

def test_combine_example():
    combined = combine_scores([TokenScores((0.9, 0.1)), TokenScores((0.2, 0.8))], EnsembleWeights((0.5, 0.5)))
    assert combined.probabilities == pytest.approx((0.55, 0.45))
    masked = MaskedText(f"{MASK} {MASK}", (Fraction(4), Fraction(6)))
    assert select_value(combined, masked).placeholder_index == 0


def test_vertex_returns_member_unchanged():
    first = TokenScores((0.3, 0.6, 0.1))
    second = TokenScores((0.9, 0.05, 0.05))
    assert combine_scores([first, second], EnsembleWeights.vertex(2, 0)) == first
    assert combine_scores([first], EnsembleWeights((1.0,))) == first


def test_combine_rejects_mismatch():
    with pytest.raises(StructuralError):
        combine_scores([TokenScores((0.5,))], EnsembleWeights.uniform(2))
    with pytest.raises(StructuralError):
        combine_scores([TokenScores((0.5,)), TokenScores((0.5, 0.5))], EnsembleWeights.uniform(2))


def test_accuracies_agree_with_combine_scores():
    rng = np.random.default_rng(4)
    scores, correct = _random_dev(rng, 3)
    alphas = rng.dirichlet(np.ones(3), size=20)
    fast = accuracies(scores, correct, alphas)
    for row, expected in zip(alphas, fast):
        hits = 0
        for i in range(scores.shape[0]):
            n = int((scores[i, 0] >= 0).sum())
            members = [TokenScores(tuple(scores[i, k, :n])) for k in range(3)]
            combined = combine_scores(members, EnsembleWeights(tuple(row)))
            hits += int(correct[i, int(np.argmax(combined.probabilities))])
        assert hits / scores.shape[0] == expected


def test_weights_must_be_on_simplex():
    with pytest.raises(StructuralError):
        EnsembleWeights((0.7, 0.7))
    with pytest.raises(StructuralError):
        EnsembleWeights((1.2, -0.2))


# =============================================================================
# FITTING
# =============================================================================

@pytest.mark.parametrize("m", [2, 3])
def test_fit_never_below_any_member(m):
    rng = np.random.default_rng(100 + m)
    for _ in range(100):
        scores, correct = _random_dev(rng, m)
        weights, accuracy = fit_simplex(scores, correct)
        member = accuracies(scores, correct, np.eye(m))
        assert accuracy >= member.max()
        assert sum(weights.alphas) == pytest.approx(1.0)


@pytest.mark.parametrize("m", [2, 3])
def test_fit_reaches_grid_optimum(m):
    rng = np.random.default_rng(7 * m)
    for _ in range(5):
        scores, correct = _random_dev(rng, m, n_cases=12, max_len=3)
        _, accuracy = fit_simplex(scores, correct)
        assert accuracy >= _grid_oracle(scores, correct, m) - 1e-12


def test_complementary_members_reach_full_accuracy():
    # Each member is sure when right and unsure when wrong
    first_right = [[0.9, 0.1], [0.4, 0.6]]
    second_right = [[0.45, 0.55], [1.0, 0.0]]
    scores = np.array([first_right] * 10 + [second_right] * 10)
    correct = np.zeros((20, 2), dtype=bool)
    correct[:, 0] = True
    member = accuracies(scores, correct, np.eye(2))
    assert list(member) == [0.5, 0.5]
    weights, accuracy = fit_simplex(scores, correct)
    assert accuracy == 1.0
    assert 0.2 < weights.alphas[0] < 0.909


def test_single_member():
    rng = np.random.default_rng(0)
    scores, correct = _random_dev(rng, 1)
    weights, accuracy = fit_simplex(scores, correct)
    assert weights.alphas == (1.0,)
    assert accuracy == accuracies(scores, correct, np.array([[1.0]]))[0]


def test_dominant_member_keeps_its_accuracy():
    rng = np.random.default_rng(4)
    scores, correct = _random_dev(rng, 2)
    # member 0 puts its mass on the right answer, member 1 is noise
    valid = scores[:, 1, :] >= 0
    scores[:, 0, :] = np.where(valid, correct.astype(float), -1.0)
    _, accuracy = fit_simplex(scores, correct)
    assert accuracy == 1.0


# =============================================================================
# FITTED ENSEMBLES ON A CORPUS
# =============================================================================

def _scorers(corpus):
    """Member "left" likes the first placeholder, "right" the last"""
    left, right = {}, {}
    for case in identification_cases(corpus):
        n = len(case.masked.values)
        left[(case.response_id, case.slot_id)] = TokenScores(tuple(1.0 if j == 0 else 0.1 for j in range(n)))
        right[(case.response_id, case.slot_id)] = TokenScores(tuple(1.0 if j == n - 1 else 0.1 for j in range(n)))
    return [ImportedScorer("left", left), ImportedScorer("right", right)]


def test_fit_weights_per_slot(candy_corpus):
    members = _scorers(candy_corpus)
    fitted = fit_weights(members, candy_corpus)
    assert fitted.member_ids == ("left", "right")
    assert set(fitted.fits) == {("p1", "s1"), ("p1", "s2"), ("p1", "s3")}
    for fit in fitted.fits.values():
        assert fit.dev_accuracy >= max(fit.member_accuracy)


def test_fit_weights_is_worker_independent(candy_corpus):
    members = _scorers(candy_corpus)
    one = fit_weights(members, candy_corpus, workers=1)
    four = fit_weights(members, candy_corpus, workers=4)
    assert one.fits == four.fits


def test_global_weights(candy_corpus):
    fitted = fit_weights(_scorers(candy_corpus), candy_corpus, per_slot=False)
    assert set(fitted.fits) == {GLOBAL_KEY}
    assert fitted.weights_for("p1", "s2") == fitted.fits[GLOBAL_KEY].weights


def test_empty_dev_slot_falls_back_to_uniform(candy_corpus):
    # r2 states nothing other than 0/1 for s2 and s3
    dev = candy_corpus.subset(["r2"])
    fitted = fit_weights(_scorers(candy_corpus), dev)
    assert fitted.fits[("p1", "s2")].uniform_fallback
    assert fitted.fits[("p1", "s2")].weights == EnsembleWeights.uniform(2)


def test_predict_with_missing_member(candy_corpus):
    fitted = FittedEnsemble(("left", "right"), {GLOBAL_KEY: SlotFit(EnsembleWeights.uniform(2), 1.0)})
    masked = MaskedText(MASK, (Fraction(3),))
    with pytest.raises(StructuralError, match="right"):
        ensemble_predict(fitted, {"left": TokenScores((0.5,))}, masked, "p1", "s1")


def test_vertex_prediction_matches_member():
    fitted = FittedEnsemble(("a", "b"), {GLOBAL_KEY: SlotFit(EnsembleWeights.vertex(2, 0), 1.0)})
    masked = MaskedText(f"{MASK} {MASK} {MASK}", (Fraction(2), Fraction(5), Fraction(7)))
    a = TokenScores((0.1, 0.2, 0.7))
    b = TokenScores((0.9, 0.0, 0.1))
    assert ensemble_predict(fitted, {"a": a, "b": b}, masked, "p1", "s1") == select_value(a, masked)


def test_weights_file_round_trip(candy_corpus, tmp_path):
    fitted = fit_weights(_scorers(candy_corpus), candy_corpus)
    path = tmp_path / "weights.csv"
    save_weights(fitted, path)
    loaded = load_weights(path)
    assert loaded.member_ids == fitted.member_ids
    for key, fit in fitted.fits.items():
        assert loaded.fits[key].weights == fit.weights
        assert loaded.fits[key].dev_accuracy == fit.dev_accuracy
