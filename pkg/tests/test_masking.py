"""Mask construction under unstructured and N:M patterns."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from siprune import NM, Rng, Unstructured, apply_mask, make_mask, parse_pattern
from siprune.errors import PatternError, ShapeError
from siprune.masking import check_mask


class TestPatternParsing:
    def test_rate(self):
        assert parse_pattern("0.5") == Unstructured(0.5)

    def test_nm(self):
        assert parse_pattern("2:4") == NM(2, 4)

    @pytest.mark.parametrize("text", ["1.5", "-0.1", "4:2", "2:2", "x:y", ""])
    def test_bad_patterns(self, text):
        with pytest.raises(PatternError):
            parse_pattern(text)


class TestMakeMask:
    def test_nm_ordered_scores(self):
        mask = make_mask(np.array([[4.0, 3.0, 2.0, 1.0]]), NM(2, 4))
        assert np.array_equal(mask, [[1, 1, 0, 0]])

    def test_unstructured_half(self):
        mask = make_mask(np.array([[1.0, 2.0], [3.0, 4.0]]), Unstructured(0.5))
        assert np.array_equal(mask, [[0, 0], [1, 1]])

    def test_rate_zero_keeps_all(self):
        mask = make_mask(Rng(0).normal((3, 4)), Unstructured(0.0))
        assert mask.min() == 1

    def test_rate_one_drops_all(self):
        mask = make_mask(Rng(0).normal((3, 4)), Unstructured(1.0))
        assert mask.max() == 0

    def test_unstructured_zero_count_exact(self):
        for rate in (0.1, 0.3, 0.5, 0.77):
            scores = Rng(5).normal((7, 13))
            mask = make_mask(scores, Unstructured(rate))
            assert (mask == 0).sum() == int(np.floor(rate * scores.size))

    def test_nm_group_constraint(self):
        scores = Rng(6).normal((5, 12))
        mask = make_mask(scores, NM(2, 4))
        groups = mask.reshape(5, 3, 4)
        assert np.all(groups.sum(axis=2) == 2)

    def test_nm_indivisible_cols(self):
        with pytest.raises(PatternError):
            make_mask(np.ones((2, 5)), NM(2, 4))

    def test_tie_break_keeps_lower_flat_index(self):
        mask = make_mask(np.ones((1, 4)), NM(2, 4))
        assert np.array_equal(mask, [[1, 1, 0, 0]])
        mask = make_mask(np.zeros((2, 2)), Unstructured(0.5))
        assert np.array_equal(mask, [[1, 1], [0, 0]])

    @given(seed=st.integers(0, 200))
    @settings(max_examples=50, deadline=None)
    def test_argtop_invariance(self, seed):
        scores = Rng(seed).normal((4, 8))
        for pattern in (Unstructured(0.5), NM(2, 4)):
            a = make_mask(scores, pattern)
            b = make_mask(np.exp(scores), pattern)
            assert np.array_equal(a, b)

    @given(seed=st.integers(0, 100))
    @settings(max_examples=30, deadline=None)
    def test_permutation_equivariance(self, seed):
        rng = Rng(seed)
        scores = np.abs(rng.normal((6, 6))) + np.arange(36).reshape(6, 6) * 1e-9
        perm = rng.permutation(6)
        base = make_mask(scores, Unstructured(0.5))
        permuted = make_mask(scores[perm], Unstructured(0.5))
        assert np.array_equal(permuted, base[perm])


class TestApplyAndCheck:
    def test_apply(self):
        out = apply_mask(np.array([[5.0, 6.0]]), np.array([[1.0, 0.0]]))
        assert np.array_equal(out, [[5.0, 0.0]])

    def test_apply_identity_and_zero(self):
        w = Rng(1).normal((3, 4))
        assert np.array_equal(apply_mask(w, np.ones_like(w)), w)
        assert not apply_mask(w, np.zeros_like(w)).any()

    def test_apply_shape_mismatch(self):
        with pytest.raises(ShapeError):
            apply_mask(np.ones((2, 2)), np.ones((2, 3)))

    def test_check_mask(self):
        scores = Rng(2).normal((4, 8))
        assert check_mask(make_mask(scores, NM(2, 4)), NM(2, 4))
        assert not check_mask(np.ones((4, 8)), NM(2, 4))
