from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

import oracles
from xdssl.errors import InvalidInputError
from xdssl.fusion import FusionInputs, entropy_confidence, fuse, margin_confidence, minmax_normalize


def test_entropy_confidence_values():
    assert entropy_confidence(0.9) == pytest.approx(0.53100, abs=1e-5)
    assert entropy_confidence(0.5) == pytest.approx(0.0, abs=1e-12)
    assert entropy_confidence(1.0) == pytest.approx(1.0, abs=1e-5)
    # natural-log variant spans [1 - ln 2, 1]
    assert entropy_confidence(0.5, base=math.e) == pytest.approx(1 - math.log(2), abs=1e-12)


def test_margin_confidence_values():
    np.testing.assert_allclose(margin_confidence([0.5, 0.9, 0.1, 0.0, 1.0]), [0.0, 0.8, 0.8, 1.0, 1.0], atol=1e-12)


def test_minmax_cases():
    np.testing.assert_allclose(minmax_normalize(np.array([[1.0, 2.0], [3.0, 5.0]])), [[0, 0.25], [0.5, 1]])
    np.testing.assert_array_equal(minmax_normalize(np.full((2, 3, 3), 0.4)), np.ones((2, 3, 3)))
    stack = np.stack([np.array([[0.0, 1.0]]), np.array([[2.0, 4.0]])])
    np.testing.assert_allclose(minmax_normalize(stack, "image"), [[[0, 1]], [[0, 1]]])
    np.testing.assert_allclose(minmax_normalize(stack, "batch"), [[[0, 0.25]], [[0.5, 1]]])
    with pytest.raises(InvalidInputError):
        minmax_normalize(stack, "galaxy")


def test_fuse_matches_oracle():
    rng = np.random.default_rng(0)
    for strategy in ("entropy", "margin", "average"):
        pg, pc = rng.random((3, 4, 5)), rng.random((3, 4, 5))
        out = fuse(FusionInputs(pg, pc, strategy))
        for i in range(3):
            ref = np.array(oracles.fuse_image(pg[i].ravel().tolist(), pc[i].ravel().tolist(), strategy))
            np.testing.assert_allclose(out.probabilities[i].ravel(), ref, atol=1e-12)
        np.testing.assert_array_equal(out.binary_mask, out.probabilities >= 0.5)


def test_fuse_confident_agreement_and_threshold():
    p = np.array([[0.999, 0.001], [0.5, 0.98]])
    out = fuse(FusionInputs(p, p.copy(), "entropy"))
    assert out.binary_mask[0, 0] and not out.binary_mask[0, 1] and not out.binary_mask[1, 0]
    # fused value is exactly 0.5 -> foreground (inclusive threshold)
    half = fuse(FusionInputs(np.array([[1.0, 0.0]]), np.array([[0.0, 1.0]]), "average"))
    assert half.binary_mask.all()


def test_explicit_confidences_are_used():
    pg, pc = np.array([[0.8, 0.2]]), np.array([[0.6, 0.4]])
    out = fuse(FusionInputs(pg, pc, "entropy", c_g=np.array([[1.0, 0.0]]), c_c=np.array([[0.0, 1.0]])))
    np.testing.assert_allclose(out.probabilities, [[0.4, 0.2]])


def test_fusion_input_validation():
    with pytest.raises(InvalidInputError):
        FusionInputs(np.zeros((2, 2)), np.zeros((2, 3)))
    with pytest.raises(InvalidInputError):
        FusionInputs(np.full((2, 2), 1.5), np.zeros((2, 2)))
    with pytest.raises(InvalidInputError):
        FusionInputs(np.zeros((2, 2)), np.zeros((2, 2)), "vote")


prob_maps = arrays(np.float64, (2, 3, 3), elements=st.floats(0, 1))


@settings(max_examples=60, deadline=None)
@given(prob_maps, prob_maps, st.sampled_from(["entropy", "margin", "average"]))
def test_fuse_symmetric_and_bounded(pg, pc, strategy):
    a = fuse(FusionInputs(pg, pc, strategy)).probabilities
    b = fuse(FusionInputs(pc, pg, strategy)).probabilities
    np.testing.assert_allclose(a, b, atol=1e-15)
    assert np.all(a >= 0) and np.all(a <= 1)


@settings(max_examples=60, deadline=None)
@given(st.floats(0.5, 1.0), st.floats(0.5, 1.0))
def test_confidence_monotone_in_certainty(p, q):
    lo, hi = sorted((p, q))
    assert entropy_confidence(lo) <= entropy_confidence(hi) + 1e-12
    assert margin_confidence(lo) <= margin_confidence(hi) + 1e-12
    assert entropy_confidence(p) == pytest.approx(entropy_confidence(1 - p), abs=1e-9)


def test_average_is_entropy_limit_with_unit_confidences():
    rng = np.random.default_rng(4)
    pg, pc = rng.random((2, 5, 5)), rng.random((2, 5, 5))
    ones = np.ones_like(pg)
    forced = fuse(FusionInputs(pg, pc, "entropy", c_g=ones, c_c=ones))
    avg = fuse(FusionInputs(pg, pc, "average"))
    np.testing.assert_array_equal(forced.probabilities, avg.probabilities)
    np.testing.assert_array_equal(avg.probabilities, 0.5 * (pg + pc))


def test_one_silent_branch_halves_the_other():
    # pixels 1.. have normalised c_g* = 1 and c_c* = 0, so the fused value there is p_g / 2
    pg = np.array([[0.3, 0.8, 0.6, 0.95]])
    pc = np.array([[0.9, 0.1, 0.7, 0.2]])
    c_g = np.array([[0.0, 1.0, 1.0, 1.0]])
    c_c = np.array([[1.0, 0.0, 0.0, 0.0]])
    out = fuse(FusionInputs(pg, pc, "entropy", c_g=c_g, c_c=c_c))
    np.testing.assert_allclose(out.probabilities[0, 1:], pg[0, 1:] / 2)
    assert not out.binary_mask[0, 1:].any()
