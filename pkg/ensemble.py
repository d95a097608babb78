"""
Ensemble - convex combination of identification models
Weights live on the simplex and are fitted per (prompt, slot) by a
Powell-style direction-set search that maximizes dev exact-match accuracy.
"""
from __future__ import annotations

import itertools
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from corpus import Corpus, read_csv_table
from errors import DataFormatError, StructuralError
from identify import IdentificationCase, TokenScores, identification_cases, select_value
from numlex import MaskedText

logger = logging.getLogger(__name__)

LINE_TOLERANCE = 1e-3
MAX_SWEEPS = 20
LINE_GRID = 41
LATTICE_RESOLUTION = 100
LATTICE_LIMIT = 10_000
GLOBAL_KEY = ("*", "*")
WEIGHT_COLUMNS = ["prompt_id", "slot_id", "model_id", "alpha", "dev_accuracy"]

_R = (math.sqrt(5) - 1) / 2


# =============================================================================
# 1. WEIGHTS AND COMBINATION
# =============================================================================

@dataclass(frozen=True)
class EnsembleWeights:
    alphas: tuple

    def __post_init__(self):
        alphas = tuple(float(a) for a in self.alphas)
        if not alphas:
            raise StructuralError("an ensemble needs at least one member")
        if any(a < -1e-12 or a > 1 + 1e-12 for a in alphas) or abs(sum(alphas) - 1.0) > 1e-9:
            raise StructuralError(f"weights are not on the simplex: {alphas}")
        object.__setattr__(self, "alphas", alphas)

    @classmethod
    def uniform(cls, m: int) -> "EnsembleWeights":
        return cls(tuple([1.0 / m] * m))

    @classmethod
    def vertex(cls, m: int, k: int) -> "EnsembleWeights":
        return cls(tuple(1.0 if i == k else 0.0 for i in range(m)))

    def __len__(self):
        return len(self.alphas)


def mix_members(scores: np.ndarray, alphas: np.ndarray) -> np.ndarray:
    """
    Weighted sum over the member axis, clipped to [0, 1]

    Args:
        scores: (..., members, placeholders)
        alphas: (weight rows, members)

    Returns:
        (weight rows, ..., placeholders)
    """
    return np.clip(np.einsum("...ml,am->a...l", scores, np.atleast_2d(alphas)), 0.0, 1.0)


def combine_scores(member_scores: Sequence[TokenScores], weights: EnsembleWeights) -> TokenScores:
    """
    P_j = sum_i alpha_i * p_ij for every placeholder j

    Raises:
        StructuralError: member count differs from the weights, or members
            disagree on the number of placeholders
    """
    if len(member_scores) != len(weights):
        raise StructuralError(f"{len(member_scores)} members for {len(weights)} weights")
    lengths = {len(s) for s in member_scores}
    if len(lengths) > 1:
        raise StructuralError(f"members disagree on placeholder count: {sorted(lengths)}")
    matrix = np.array([s.probabilities for s in member_scores], dtype=float).reshape(len(member_scores), -1)
    combined = mix_members(matrix, np.asarray(weights.alphas, dtype=float))[0]
    return TokenScores(tuple(float(p) for p in combined))


# =============================================================================
# 2. DEV ACCURACY OVER THE SIMPLEX
# =============================================================================

def dev_tensor(case_scores: Sequence[Sequence[TokenScores]], cases: Sequence[IdentificationCase]):
    """
    Pack member scores of dev cases into arrays

    Returns:
        scores: (cases, members, max placeholders) with padding at -1
        correct: (cases, max placeholders) True where the value equals the resolved value
    """
    m = len(case_scores[0]) if case_scores else 0
    width = max([len(c.masked.values) for c in cases] + [1])
    scores = np.full((len(cases), m, width), -1.0)
    correct = np.zeros((len(cases), width), dtype=bool)
    for i, (case, members) in enumerate(zip(cases, case_scores)):
        n = len(case.masked.values)
        for k, s in enumerate(members):
            scores[i, k, :n] = s.probabilities
        correct[i, :n] = [v == case.resolved for v in case.masked.values]
    return scores, correct


def accuracies(scores: np.ndarray, correct: np.ndarray, alphas: np.ndarray) -> np.ndarray:
    """Dev accuracy for each row of alphas (argmax keeps the first maximum)"""
    alphas = np.atleast_2d(alphas)
    if scores.shape[0] == 0:
        return np.zeros(len(alphas))
    out = np.empty(len(alphas))
    rows = np.arange(scores.shape[0])
    for start in range(0, len(alphas), 256):
        block = alphas[start:start + 256]
        combined = mix_members(scores, block)
        choice = combined.argmax(axis=2)
        out[start:start + 256] = correct[rows[None, :], choice].mean(axis=1)
    return out


def _to_alphas(x: np.ndarray) -> np.ndarray:
    return np.append(x, 1.0 - x.sum())


def _feasible_segment(x: np.ndarray, direction: np.ndarray) -> Tuple[float, float]:
    """Range of t keeping x + t*d inside {x >= 0, sum(x) <= 1}"""
    lo, hi = -np.inf, np.inf
    rows = list(zip(x, direction)) + [(1.0 - x.sum(), -direction.sum())]
    for value, d in rows:
        if d > 1e-15:
            lo = max(lo, -value / d)
        elif d < -1e-15:
            hi = min(hi, -value / d)
    return max(lo, -1e6), min(hi, 1e6)


def _golden_section(f, a: float, b: float, tol: float = LINE_TOLERANCE) -> Tuple[float, float]:
    """Maximize f on [a, b]"""
    if b - a <= tol:
        t = (a + b) / 2
        return t, f(t)
    n_iter = int(math.ceil(math.log(tol / (b - a)) / math.log(_R)))
    x1 = b - _R * (b - a)
    x2 = a + _R * (b - a)
    f1, f2 = f(x1), f(x2)
    for _ in range(n_iter):
        if f1 >= f2:
            b, x2, f2 = x2, x1, f1
            x1 = b - _R * (b - a)
            f1 = f(x1)
        else:
            a, x1, f1 = x1, x2, f2
            x2 = a + _R * (b - a)
            f2 = f(x2)
    return (x1, f1) if f1 >= f2 else (x2, f2)


def _line_search(objective, x: np.ndarray, direction: np.ndarray, fx: float) -> Tuple[np.ndarray, float]:
    lo, hi = _feasible_segment(x, direction)
    if hi - lo <= 1e-12:
        return x, fx
    grid = np.linspace(lo, hi, LINE_GRID)
    values = [objective(x + t * direction) for t in grid]
    best = int(np.argmax(values))
    a = grid[max(best - 1, 0)]
    b = grid[min(best + 1, LINE_GRID - 1)]
    t, ft = _golden_section(lambda s: objective(x + s * direction), a, b)
    if values[best] >= ft:
        t, ft = grid[best], values[best]
    if ft > fx:
        return x + t * direction, ft
    return x, fx


def powell_simplex(objective, start: np.ndarray) -> Tuple[np.ndarray, float]:
    """
    Direction-set search on the (m-1)-dimensional simplex coordinates

    Each sweep line-searches every direction inside the feasible segment,
    then adds the sweep's total displacement as a new direction in place of
    the one that gained most. Only strict improvements move the point.
    Stops after a sweep without improvement or MAX_SWEEPS sweeps.
    """
    x = np.array(start, dtype=float)
    fx = objective(x)
    n = len(x)
    if n == 0:
        return x, fx
    directions = list(np.eye(n))
    for sweep in range(MAX_SWEEPS):
        x_prev, f_prev = x.copy(), fx
        gains = []
        for d in directions:
            before = fx
            x, fx = _line_search(objective, x, d, fx)
            gains.append(fx - before)
        displacement = x - x_prev
        if fx <= f_prev:
            logger.debug("Powell converged after %d sweeps at %.4f", sweep + 1, fx)
            break
        if np.linalg.norm(displacement) > 1e-12:
            x, fx = _line_search(objective, x, displacement, fx)
            directions[int(np.argmax(gains))] = displacement / np.linalg.norm(displacement)
    return x, fx


def _lattice(m: int) -> Optional[np.ndarray]:
    count = math.comb(LATTICE_RESOLUTION + m - 1, m - 1)
    if m < 2 or count > LATTICE_LIMIT:
        return None
    points = [
        c + (LATTICE_RESOLUTION - sum(c),)
        for c in itertools.product(range(LATTICE_RESOLUTION + 1), repeat=m - 1)
        if sum(c) <= LATTICE_RESOLUTION
    ]
    return np.array(points, dtype=float) / LATTICE_RESOLUTION


def fit_simplex(scores: np.ndarray, correct: np.ndarray) -> Tuple[EnsembleWeights, float]:
    """
    Best simplex weights for one dev set

    Candidates, in tie-break order: Powell from the centroid, Powell from
    each vertex, Powell from the best point of a 0.01 lattice (small m
    only), then every vertex itself. The winner therefore never scores
    below any single member on the dev set.

    Returns:
        (weights, dev accuracy)
    """
    m = scores.shape[1]
    if m == 1:
        return EnsembleWeights((1.0,)), float(accuracies(scores, correct, np.array([[1.0]]))[0])

    def objective(x):
        return float(accuracies(scores, correct, _to_alphas(x))[0])

    starts = [np.full(m - 1, 1.0 / m)] + [np.eye(m)[k][:-1] for k in range(m)]
    lattice = _lattice(m)
    if lattice is not None:
        starts.append(lattice[int(np.argmax(accuracies(scores, correct, lattice)))][:-1])

    candidates = [powell_simplex(objective, s) for s in starts]
    candidates += [(np.eye(m)[k][:-1], objective(np.eye(m)[k][:-1])) for k in range(m)]

    best_x, best_f = candidates[0]
    for x, f in candidates[1:]:
        if f > best_f:
            best_x, best_f = x, f
    alphas = np.clip(_to_alphas(best_x), 0.0, 1.0)
    alphas = alphas / alphas.sum()
    return EnsembleWeights(tuple(alphas)), float(best_f)


# =============================================================================
# 3. FITTED ENSEMBLE
# =============================================================================

@dataclass(frozen=True)
class SlotFit:
    weights: EnsembleWeights
    dev_accuracy: Optional[float]
    member_accuracy: tuple = ()
    uniform_fallback: bool = False


@dataclass
class FittedEnsemble:
    member_ids: tuple
    fits: Dict[Tuple[str, str], SlotFit] = field(default_factory=dict)

    def fit_for(self, prompt_id: str, slot_id: str) -> SlotFit:
        fit = self.fits.get((prompt_id, slot_id)) or self.fits.get(GLOBAL_KEY)
        if fit is None:
            raise StructuralError(f"no ensemble weights for prompt {prompt_id}, slot {slot_id}")
        return fit

    def weights_for(self, prompt_id: str, slot_id: str) -> EnsembleWeights:
        return self.fit_for(prompt_id, slot_id).weights


def score_members(members, cases: Sequence[IdentificationCase]) -> List[List[TokenScores]]:
    """Per case, one TokenScores per member"""
    per_member = []
    for member in members:
        if hasattr(member, "score_cases"):
            per_member.append(member.score_cases(cases))
        else:
            per_member.append([member.score_case(c) for c in cases])
    return [list(row) for row in zip(*per_member)] if cases else []


def _fit_group(key, cases, case_scores, m) -> Tuple[Tuple[str, str], SlotFit]:
    if not cases:
        logger.warning("No dev cases for %s/%s: using uniform weights", *key)
        return key, SlotFit(EnsembleWeights.uniform(m), None, uniform_fallback=True)
    scores, correct = dev_tensor(case_scores, cases)
    member_accuracy = tuple(float(a) for a in accuracies(scores, correct, np.eye(m)))
    weights, accuracy = fit_simplex(scores, correct)
    logger.debug("Fitted %s/%s: alphas=%s dev=%.4f", key[0], key[1], weights.alphas, accuracy)
    return key, SlotFit(weights, accuracy, member_accuracy)


def fit_weights(members, dev: Corpus, per_slot: bool = True, workers: int = 1) -> FittedEnsemble:
    """
    Fit ensemble weights on the dev split

    Only resolved Other-class cases count, since those are the ones the
    identification step answers. Slots are independent and may be fitted by
    several workers; the result does not depend on the worker count.

    Args:
        members: Scorers (trained or imported) with a model_id
        dev: Development split
        per_slot: One weight vector per (prompt, slot); False fits one global vector
        workers: Thread count for per-slot fitting
    """
    if not members:
        raise StructuralError("an ensemble needs at least one member")
    m = len(members)
    cases = identification_cases(dev, other_only=True)
    case_scores = score_members(members, cases)

    if per_slot:
        groups = {(p, s): ([], []) for p in dev.prompt_ids for s in dev.prompts[p].slot_ids}
    else:
        groups = {GLOBAL_KEY: ([], [])}
    for case, scores in zip(cases, case_scores):
        key = (case.prompt_id, case.slot_id) if per_slot else GLOBAL_KEY
        groups[key][0].append(case)
        groups[key][1].append(scores)

    jobs = [(key, c, s, m) for key, (c, s) in groups.items()]
    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        fits = dict(pool.map(lambda job: _fit_group(*job), jobs))
    logger.info("Fitted ensemble weights for %d slot(s) over %d members", len(fits), m)
    return FittedEnsemble(tuple(member.model_id for member in members), fits)


def ensemble_predict(fitted: FittedEnsemble, response_scores: Mapping[str, TokenScores],
                     masked: MaskedText, prompt_id: str, slot_id: str):
    """
    Combine member scores with the slot's weights and pick the value

    Raises:
        StructuralError: a member's scores are missing
    """
    missing = [mid for mid in fitted.member_ids if mid not in response_scores]
    if missing:
        raise StructuralError(f"missing scores for member(s) {', '.join(missing)}")
    combined = combine_scores([response_scores[mid] for mid in fitted.member_ids],
                              fitted.weights_for(prompt_id, slot_id))
    return select_value(combined, masked)


def save_weights(fitted: FittedEnsemble, path) -> None:
    rows = []
    for (prompt_id, slot_id), fit in sorted(fitted.fits.items()):
        for model_id, alpha in zip(fitted.member_ids, fit.weights.alphas):
            rows.append({
                "prompt_id": prompt_id,
                "slot_id": slot_id,
                "model_id": model_id,
                "alpha": repr(alpha),
                "dev_accuracy": "" if fit.dev_accuracy is None else repr(fit.dev_accuracy),
            })
    pd.DataFrame(rows, columns=WEIGHT_COLUMNS).to_csv(path, index=False)


def load_weights(path) -> FittedEnsemble:
    frame = read_csv_table(path, WEIGHT_COLUMNS)
    member_ids: List[str] = []
    for model_id in frame["model_id"]:
        if model_id not in member_ids:
            member_ids.append(model_id)
    fits = {}
    for (prompt_id, slot_id), group in frame.groupby(["prompt_id", "slot_id"], sort=False):
        if list(group["model_id"]) != member_ids:
            raise DataFormatError(f"members of {prompt_id}/{slot_id} differ from {member_ids}", path, field="model_id")
        try:
            weights = EnsembleWeights(tuple(float(a) for a in group["alpha"]))
        except (ValueError, StructuralError) as exc:
            raise DataFormatError(str(exc), path, field="alpha")
        dev = group["dev_accuracy"].iloc[0]
        fits[(prompt_id, slot_id)] = SlotFit(weights, float(dev) if dev else None, uniform_fallback=not dev)
    return FittedEnsemble(tuple(member_ids), fits)
