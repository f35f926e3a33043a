"""Combine three models' class probabilities by averaging or voting.

Both combiners take exactly three probability vectors over (AD, MCI, CN)
and are invariant to the order the models appear in.  Exact argmax ties are
broken by fixed class order and flagged, never silently.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ValidationError


@dataclass(frozen=True)
class AverageDecision:
    class_id: int
    probs: np.ndarray
    tie: bool  # argmax of the averaged vector was not unique


@dataclass(frozen=True)
class VoteDecision:
    class_id: int
    votes: tuple  # per-model argmax class ids, in input order
    by_probability: bool  # all votes differed; highest single entry decided
    tie: bool  # an exact tie was broken by class order somewhere


def _check_prediction_set(prediction_set) -> np.ndarray:
    vectors = [np.asarray(v, dtype=np.float64) for v in prediction_set]
    if len(vectors) != 3:
        raise ValidationError(
            f"a prediction set holds exactly 3 model outputs, got {len(vectors)}"
        )
    for i, v in enumerate(vectors):
        if v.shape != (3,):
            raise ValidationError(
                f"model {i}: probability vector must have 3 entries, "
                f"got shape {v.shape}"
            )
        if not np.isfinite(v).all() or (v < 0).any():
            raise ValidationError(f"model {i}: malformed probability vector")
        if abs(float(v.sum()) - 1.0) > 1e-9:
            raise ValidationError(
                f"model {i}: probabilities sum to {v.sum()!r}, not 1"
            )
    return np.stack(vectors)


def _first_argmax(v) -> tuple:
    """(index, tied) with ties resolved to the lowest class index."""
    idx = int(np.argmax(v))
    tied = int(np.sum(v == v[idx])) > 1
    return idx, tied


def ensemble_average(prediction_set) -> AverageDecision:
    """Elementwise mean of the three vectors, then argmax."""
    p = _check_prediction_set(prediction_set)
    mean = p.mean(axis=0)
    idx, tied = _first_argmax(mean)
    return AverageDecision(class_id=idx, probs=mean, tie=tied)


def ensemble_vote(prediction_set) -> VoteDecision:
    """Majority vote of per-model argmax classes.

    When all three votes differ, the sample goes to the class holding the
    single highest probability among all nine entries (compared per class
    over its best model score, so model order never matters).
    """
    p = _check_prediction_set(prediction_set)
    votes = []
    any_tie = False
    for row in p:
        idx, tied = _first_argmax(row)
        votes.append(idx)
        any_tie |= tied
    counts = np.bincount(votes, minlength=3)
    top = int(counts.max())
    if top >= 2:
        winners = np.flatnonzero(counts == top)
        return VoteDecision(class_id=int(winners[0]), votes=tuple(votes),
                            by_probability=False,
                            tie=any_tie or len(winners) > 1)
    best_per_class = p.max(axis=0)
    idx, tied = _first_argmax(best_per_class)
    return VoteDecision(class_id=idx, votes=tuple(votes),
                        by_probability=True, tie=any_tie or tied)
