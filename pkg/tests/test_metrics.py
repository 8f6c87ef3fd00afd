import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from anchorgnn.metrics import (
    MetricError,
    PredictionRecord,
    accuracy,
    auroc,
    ece,
    gep_candidates,
    gep_error,
    predicted_accuracy,
    records_from,
    tune_gep_threshold,
)

from oracles import auroc_oracle, ece_oracle, gep_tau_oracle


def recs(confs, correct, spread=20):
    """Records with the given top-1 confidence (class 0) and correctness.

    The remaining mass is spread over ``spread`` classes so class 0 stays on top
    for any confidence above 1 / (spread + 1).
    """
    out = []
    for c, ok in zip(confs, correct):
        p = np.concatenate([[c], np.full(spread, (1 - c) / spread)])
        out.append(PredictionRecord(p, 0 if ok else 1))
    return out


def random_records(rng, n, q):
    probs = rng.dirichlet(np.ones(q) * rng.uniform(0.2, 3.0), size=n)
    return probs, rng.integers(0, q, size=n)


# -- accuracy --------------------------------------------------------------------

def test_accuracy_examples():
    assert accuracy(recs([0.9] * 3, [True] * 3)) == 1.0
    assert accuracy(recs([0.9] * 3, [False] * 3)) == 0.0
    assert accuracy(recs([0.9] * 4, [True, True, True, False])) == 0.75


def test_argmax_ties_pick_lowest_index():
    r = PredictionRecord(np.array([0.4, 0.4, 0.2]), 0)
    assert r.correct and r.confidence == 0.4


def test_records_and_tuple_inputs_agree(rng):
    probs, labels = random_records(rng, 50, 4)
    rs = records_from(probs, labels)
    assert accuracy(rs) == accuracy((probs, labels))
    assert ece(rs) == ece((probs, labels))


# -- ECE -------------------------------------------------------------------------

def test_ece_perfect_confidence():
    assert ece(recs([1.0] * 5, [True] * 5)) == 0.0


def test_ece_single_bin_hand_value():
    assert ece(recs([0.9] * 4, [True, True, True, False])) == pytest.approx(0.15, abs=1e-15)


def test_confidence_one_goes_to_top_bin():
    # with two bins, 1.0 shares the top bin with 0.75: bin acc 0.5, mean conf 0.875
    assert ece(recs([1.0, 0.75], [True, False]), n_bins=2) == pytest.approx(0.375, abs=1e-15)


@settings(max_examples=200)
@given(st.integers(1, 60), st.integers(2, 5), st.sampled_from([1, 5, 10, 15]), st.integers(0, 2**32 - 1))
def test_ece_matches_oracle(n, q, bins, seed):
    probs, labels = random_records(np.random.default_rng(seed), n, q)
    assert abs(ece((probs, labels), bins) - ece_oracle(probs, labels, bins)) <= 1e-12


def test_ece_empty():
    with pytest.raises(MetricError):
        ece([])


# -- AUROC -----------------------------------------------------------------------

def test_auroc_examples():
    assert auroc([0.9, 0.8], [0.2, 0.1]) == 1.0
    assert auroc([0.5] * 3, [0.5] * 4) == 0.5
    assert auroc([0.9, 0.4], [0.5, 0.1]) == 0.75


@settings(max_examples=200)
@given(st.lists(st.integers(0, 6), min_size=1, max_size=30), st.lists(st.integers(0, 6), min_size=1, max_size=30))
def test_auroc_matches_pair_enumeration(a, b):
    # small integer scores force many ties
    ids, oods = [x / 6 for x in a], [x / 6 for x in b]
    assert auroc(ids, oods) == auroc_oracle(ids, oods)


def test_auroc_empty():
    with pytest.raises(MetricError):
        auroc([], [0.1])


# -- GEP -------------------------------------------------------------------------

def test_gep_threshold_examples():
    assert tune_gep_threshold(recs([0.9] * 4, [True] * 4)) == 0.0
    assert tune_gep_threshold(recs([0.2, 0.8], [False, True])) == 0.5


def test_gep_candidates_include_endpoints_and_midpoints():
    np.testing.assert_array_equal(gep_candidates([0.8, 0.2, 0.8]), [0.0, 0.5, 1.0])


@settings(max_examples=200)
@given(st.integers(1, 40), st.integers(2, 4), st.booleans(), st.integers(0, 2**32 - 1))
def test_gep_tau_matches_exhaustive_search(n, q, coarse, seed):
    rng = np.random.default_rng(seed)
    probs, labels = random_records(rng, n, q)
    if coarse:
        probs = np.round(probs, 1)
    assert tune_gep_threshold((probs, labels)) == gep_tau_oracle(probs, labels)


@given(st.lists(st.floats(0, 1), min_size=1, max_size=30), st.floats(0, 1), st.floats(0, 1))
def test_predicted_accuracy_monotone_in_tau(scores, t1, t2):
    lo, hi = min(t1, t2), max(t1, t2)
    assert predicted_accuracy(scores, lo) >= predicted_accuracy(scores, hi)


def test_gep_error_examples():
    assert gep_error(recs([0.7, 0.9], [True, True]), 1.0, tau=0.0) == 0.0
    assert gep_error(recs([0.7, 0.9], [True, False]), None, tau=1.0) == 0.5
    ten = recs([0.9] * 6 + [0.55] * 4, [True] * 8 + [False] * 2)
    assert gep_error(ten, 0.8, tau=0.6) == pytest.approx(0.2, abs=1e-15)
