"""Tests for the averaging and voting ensemble combiners."""

import itertools

import numpy as np
import pytest
from numpy.testing import assert_allclose

from voxcnn.ensemble import ensemble_average, ensemble_vote
from voxcnn.errors import ValidationError


def random_prediction_set(rng, quantize=None):
    """Three random probability vectors; optional rounding to force ties."""
    vectors = []
    for _ in range(3):
        v = rng.uniform(0.05, 1.0, size=3)
        if quantize:
            v = np.round(v * quantize) / quantize
            v[v == 0] = 1.0 / quantize
        vectors.append(v / v.sum())
    return vectors


def oracle_average(pset):
    mean = (np.asarray(pset[0]) + np.asarray(pset[1]) + np.asarray(pset[2])) / 3.0
    best = max(range(3), key=lambda c: (mean[c], -c))
    return best, mean


def oracle_vote(pset):
    """Independent re-statement of the voting rule."""
    votes = [max(range(3), key=lambda c: (v[c], -c)) for v in pset]
    for c in range(3):
        if votes.count(c) >= 2:
            candidates = [k for k in range(3)
                          if votes.count(k) == max(votes.count(j)
                                                   for j in range(3))]
            return min(candidates), votes
    # three-way split: class of the highest single probability anywhere
    best_val = max(max(v) for v in pset)
    winners = [c for c in range(3) if any(v[c] == best_val for v in pset)]
    return min(winners), votes


class TestEnsembleAverage:
    def test_identical_vectors_are_idempotent(self):
        """Averaging three copies returns the same vector and argmax."""
        v = np.array([0.5, 0.3, 0.2])
        d = ensemble_average([v, v, v])
        assert_allclose(d.probs, v, rtol=1e-15)
        assert d.class_id == 0
        assert not d.tie

    def test_worked_mean_example(self):
        """(0.6,0.3,0.1), (0.2,0.5,0.3), (0.1,0.2,0.7) average to CN."""
        d = ensemble_average([(0.6, 0.3, 0.1), (0.2, 0.5, 0.3),
                              (0.1, 0.2, 0.7)])
        assert_allclose(d.probs, [0.3, 1.0 / 3.0, 11.0 / 30.0], rtol=1e-12)
        assert d.class_id == 2
        assert not d.tie

    def test_mean_sums_to_one(self):
        rng = np.random.default_rng(0)
        for _ in range(100):
            d = ensemble_average(random_prediction_set(rng))
            assert abs(d.probs.sum() - 1.0) < 1e-9

    def test_matches_brute_force_oracle(self):
        """10000 random prediction sets agree with mean-then-argmax."""
        rng = np.random.default_rng(1)
        for trial in range(10_000):
            pset = random_prediction_set(rng,
                                         quantize=10 if trial % 3 else None)
            d = ensemble_average(pset)
            expected_class, expected_mean = oracle_average(pset)
            assert d.class_id == expected_class
            assert_allclose(d.probs, expected_mean, rtol=1e-12)

    def test_exact_tie_flagged_and_broken_by_order(self):
        """An exact two-way argmax tie picks the earlier class, flagged."""
        pset = [(0.5, 0.5, 0.0), (0.5, 0.5, 0.0), (0.5, 0.5, 0.0)]
        d = ensemble_average(pset)
        assert d.class_id == 0
        assert d.tie

    def test_permutation_invariance(self):
        rng = np.random.default_rng(2)
        for _ in range(200):
            pset = random_prediction_set(rng, quantize=8)
            base = ensemble_average(pset)
            for perm in itertools.permutations(pset):
                d = ensemble_average(list(perm))
                assert d.class_id == base.class_id
                assert_allclose(d.probs, base.probs, rtol=1e-12)


class TestEnsembleVote:
    def test_majority_wins(self):
        """Votes (AD, AD, CN) elect AD."""
        pset = [(0.8, 0.1, 0.1), (0.6, 0.3, 0.1), (0.1, 0.2, 0.7)]
        d = ensemble_vote(pset)
        assert d.votes == (0, 0, 2)
        assert d.class_id == 0
        assert not d.by_probability

    def test_unanimity_regardless_of_magnitudes(self):
        """Three weak MCI votes still elect MCI."""
        pset = [(0.3, 0.4, 0.3), (0.0, 0.9, 0.1), (0.33, 0.34, 0.33)]
        d = ensemble_vote(pset)
        assert d.votes == (1, 1, 1)
        assert d.class_id == 1

    def test_three_way_split_uses_highest_probability(self):
        """Votes (AD, MCI, CN) with a 0.9 MCI entry elect MCI."""
        pset = [(0.5, 0.3, 0.2), (0.05, 0.9, 0.05), (0.2, 0.2, 0.6)]
        d = ensemble_vote(pset)
        assert d.votes == (0, 1, 2)
        assert d.class_id == 1
        assert d.by_probability

    def test_matches_brute_force_oracle(self):
        """10000 random prediction sets agree with the re-stated rule."""
        rng = np.random.default_rng(3)
        for trial in range(10_000):
            pset = random_prediction_set(rng,
                                         quantize=10 if trial % 3 else None)
            d = ensemble_vote(pset)
            expected_class, expected_votes = oracle_vote(pset)
            assert d.votes == tuple(expected_votes)
            assert d.class_id == expected_class

    def test_split_decision_is_permutation_invariant(self):
        """The 9-entry max rule cannot depend on model order."""
        rng = np.random.default_rng(4)
        seen_split = 0
        for _ in range(500):
            pset = random_prediction_set(rng, quantize=6)
            base = ensemble_vote(pset)
            if base.by_probability:
                seen_split += 1
            for perm in itertools.permutations(pset):
                assert ensemble_vote(list(perm)).class_id == base.class_id
        assert seen_split > 0  # the scenario actually occurred

    def test_agreeing_argmax_matches_average_ensemble(self):
        """When all models agree, both combiners return that class."""
        rng = np.random.default_rng(5)
        checked = 0
        for _ in range(300):
            pset = random_prediction_set(rng)
            votes = {int(np.argmax(v)) for v in pset}
            if len(votes) == 1:
                cls = votes.pop()
                assert ensemble_vote(pset).class_id == cls
                assert ensemble_average(pset).class_id == cls
                checked += 1
        assert checked > 10


class TestValidation:
    def test_wrong_count_rejected(self):
        v = (0.5, 0.3, 0.2)
        with pytest.raises(ValidationError, match="3 model"):
            ensemble_average([v, v])
        with pytest.raises(ValidationError):
            ensemble_vote([v, v, v, v])

    def test_wrong_length_vector_rejected(self):
        with pytest.raises(ValidationError):
            ensemble_average([(0.5, 0.5), (1.0, 0.0, 0.0), (1.0, 0.0, 0.0)])

    def test_non_normalized_vector_rejected(self):
        v = (0.5, 0.3, 0.3)
        with pytest.raises(ValidationError, match="sum"):
            ensemble_vote([v, v, v])

    def test_negative_entries_rejected(self):
        v = (1.2, -0.1, -0.1)
        with pytest.raises(ValidationError):
            ensemble_average([v, v, v])
