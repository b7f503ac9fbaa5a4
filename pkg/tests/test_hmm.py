"""Hidden-Markov counter: matrices, sampler, backward recursion, classification."""

import dataclasses
import math
from itertools import product

import numpy as np
import pytest

from fluxcount import hmm
from fluxcount.device import default_device_params
from fluxcount.errors import ParameterError, UndecidableSequenceError


def perfect_params():
    base = default_device_params()
    big = math.inf  # exact no-decoherence limit
    return dataclasses.replace(
        base,
        t1_q=big,
        t2_q=big,
        t1_s=big,
        t2_s=big,
        nbar_q=0.0,
        nbar_s=0.0,
        f_gg=1.0,
        f_ee=1.0,
    )


def random_model(rng):
    t = rng.random((4, 4))
    t /= t.sum(axis=1, keepdims=True)
    e = rng.random((4, 2))
    e /= e.sum(axis=1, keepdims=True)
    return hmm.HmmModel(t, e, t_m=7.3e-6, t_p=151e-9)


def brute_force_p(model, bits, storage):
    """Sum the path products over all hidden trajectories; transmon prior 1/2."""
    n = len(bits)
    total = 0.0
    for transmon in (0, 1):
        start = 2 * storage + transmon
        for path in product(range(4), repeat=n - 1):
            full = (start,) + path
            p = model.emission[full[0], bits[0]]
            for t in range(n - 1):
                p *= model.transition[full[t], full[t + 1]]
                p *= model.emission[full[t + 1], bits[t + 1]]
            total += 0.5 * p
    return total


def test_transition_elements_match_hand_values():
    params = default_device_params()
    el = hmm.transition_elements(params, t1_s=65e-6)
    assert el["p_10"] == pytest.approx(1.0 - math.exp(-7.3 / 65.0), rel=1e-12)
    assert el["p_10"] == pytest.approx(0.1062, abs=1e-4)
    el0 = hmm.transition_elements(params)
    assert el0["p_eg"] == pytest.approx(0.1980, abs=1e-4)  # quoted value truncated
    assert el0["p_ge"] == pytest.approx(0.007566, abs=2e-6)
    assert el0["p_01"] == pytest.approx(params.nbar_s * el0["p_10"], rel=1e-12)


def test_transition_rows_structure():
    params = default_device_params()
    el = hmm.transition_elements(params)
    t = hmm.build_transition(params)
    p00, p01 = 1.0 - el["p_01"], el["p_01"]
    pgg, pge = 1.0 - el["p_ge"], el["p_ge"]
    # storage-0, transmon-g row keeps the transmon role; assembled entries verbatim
    assert t[0] == pytest.approx([p00 * pgg, p00 * pge, p01 * pge, p01 * pgg], rel=1e-9)
    # photon rows exchange the g/e columns (parity flip embedded in T)
    p10, p11 = el["p_10"], 1.0 - el["p_10"]
    assert t[2] == pytest.approx([p10 * pgg, p10 * pge, p11 * pge, p11 * pgg], rel=1e-9)
    assert t[2, 3] > 0.8  # toggling is the dominant photon-present step


def test_no_decoherence_limit_is_deterministic():
    model = hmm.build_model(perfect_params())
    expect_t = np.zeros((4, 4))
    expect_t[0, 0] = 1.0  # |0g> holds
    expect_t[1, 1] = 1.0  # |0e> holds
    expect_t[2, 3] = 1.0  # |1g> toggles to |1e>
    expect_t[3, 2] = 1.0  # |1e> toggles to |1g>
    assert model.transition == pytest.approx(expect_t, abs=1e-12)
    assert model.emission == pytest.approx(
        np.array([[1, 0], [0, 1], [1, 0], [0, 1]]), abs=1e-12
    )


def test_parameter_sanity_error():
    bad = dataclasses.replace(default_device_params(), t1_q=0.5e-6, t2_q=1e-9)
    with pytest.raises(ParameterError):
        hmm.build_transition(bad)


def test_multiplicative_combine_variant():
    params = default_device_params()
    add = hmm.transition_elements(params)
    mult = hmm.transition_elements(params, combine="multiplicative")
    a = 1.0 - math.exp(-params.t_m / params.t1_q)
    b = 1.0 - math.exp(-params.t_p / params.t2_q)
    assert mult["p_eg"] == pytest.approx(1.0 - (1.0 - a) * (1.0 - b), rel=1e-12)
    assert mult["p_eg"] < add["p_eg"]
    with pytest.raises(ParameterError):
        hmm.transition_elements(params, combine="geometric")


def test_emission_rows():
    e = hmm.build_emission(0.978, 0.938)
    assert e[0] == pytest.approx([0.978, 0.022])
    assert e[2] == pytest.approx([0.978, 0.022])
    assert e[1] == pytest.approx([0.062, 0.938])
    rng = np.random.default_rng(5)
    for _ in range(20):
        e = hmm.build_emission(rng.uniform(0.51, 1.0), rng.uniform(0.51, 1.0))
        assert e.sum(axis=1) == pytest.approx([1, 1, 1, 1], rel=1e-14)
    with pytest.raises(ParameterError):
        hmm.build_emission(0.5, 0.9)


def test_model_validation():
    t = np.full((4, 4), 0.25)
    e = np.full((4, 2), 0.5)
    hmm.HmmModel(t, e, 7.3e-6, 151e-9)
    with pytest.raises(ParameterError):
        hmm.HmmModel(t * 1.01, e, 7.3e-6, 151e-9)
    with pytest.raises(ParameterError):
        hmm.HmmModel(t[:3], e, 7.3e-6, 151e-9)


def test_sampler_perfect_limits():
    model = hmm.build_model(perfect_params())
    rng = np.random.default_rng(0)
    seq0 = hmm.sample_sequence(model, 0, "g", 25, rng)
    assert seq0.to_string() == "g" * 25
    seq1 = hmm.sample_sequence(model, 1, "g", 25, rng)
    assert seq1.to_string() == "ge" * 12 + "g"
    seq1e = hmm.sample_sequence(model, 1, "e", 6, rng)
    assert seq1e.to_string() == "egegeg"


def test_sampler_emission_frequencies():
    # hold the chain in one state (identity T) and check emission statistics
    params = default_device_params()
    e = hmm.build_emission(params.f_gg, params.f_ee)
    model = hmm.HmmModel(np.eye(4), e, 7.3e-6, 151e-9)
    rng = np.random.default_rng(11)
    n = 100000
    bits = hmm.sample_sequences(
        model, np.zeros(n, dtype=bool), np.ones(n, dtype=bool), 1, rng
    )
    p_e = bits.mean()
    sigma = math.sqrt(params.f_ee * (1 - params.f_ee) / n)
    assert abs(p_e - params.f_ee) < 3 * sigma


def test_sampler_determinism():
    model = hmm.build_model(default_device_params())
    a = hmm.sample_sequences(
        model, np.array([True] * 50), np.array([False] * 50), 25,
        np.random.default_rng(42),
    )
    b = hmm.sample_sequences(
        model, np.array([True] * 50), np.array([False] * 50), 25,
        np.random.default_rng(42),
    )
    assert np.array_equal(a, b)


def test_backward_matches_brute_force():
    rng = np.random.default_rng(123)
    for _ in range(100):
        model = random_model(rng)
        n = int(rng.integers(2, 7))
        bits = rng.integers(0, 2, size=n)
        seq = hmm.ReadoutSequence(bits.astype(np.uint8))
        v = hmm.backward_probabilities(model, seq)
        b0 = brute_force_p(model, bits, storage=0)
        b1 = brute_force_p(model, bits, storage=1)
        assert v.p0 == pytest.approx(b0, rel=1e-10)
        assert v.p1 == pytest.approx(b1, rel=1e-10)


def test_backward_on_real_params_brute_force():
    model = hmm.build_model(default_device_params())
    for bits in ([0, 1, 0, 1, 0], [0, 0, 0, 0, 0], [1, 0, 0, 1, 0, 1]):
        seq = hmm.ReadoutSequence(np.array(bits, dtype=np.uint8))
        v = hmm.backward_probabilities(model, seq)
        assert v.p0 == pytest.approx(brute_force_p(model, bits, 0), rel=1e-10)
        assert v.p1 == pytest.approx(brute_force_p(model, bits, 1), rel=1e-10)


def test_parity_signature_perfect_model():
    model = hmm.build_model(perfect_params())
    for n in range(2, 9):
        alt = hmm.ReadoutSequence.from_string("ge" * n)
        v = hmm.backward_probabilities(model, alt)
        assert v.p0 == 0.0 and v.p1 > 0.0
        assert math.isinf(v.lam) and v.positive
        const = hmm.ReadoutSequence.from_string("g" * (2 * n))
        v0 = hmm.backward_probabilities(model, const)
        assert v0.p1 == 0.0 and v0.p0 > 0.0
        assert v0.lam == 0.0 and not v0.positive


def test_classification_boundary_and_monotonicity():
    assert hmm.classify(hmm.CountVerdict(p0=1.0, p1=125.0, lam=125.0, positive=True), 125.0)
    assert not hmm.classify(
        hmm.CountVerdict(p0=1.0, p1=124.9, lam=124.9, positive=False), 125.0
    )
    with pytest.raises(UndecidableSequenceError):
        hmm.classify(hmm.CountVerdict(p0=0.0, p1=0.0, lam=0.0, positive=False), 125.0)

    model = hmm.build_model(default_device_params())
    rng = np.random.default_rng(9)
    storage = rng.random(300) < 0.5
    transmon = np.zeros(300, dtype=bool)
    bits = hmm.sample_sequences(model, storage, transmon, 25, rng)
    lp0, lp1 = hmm.backward_log(model, bits)
    prev = None
    for thresh in [10.0, 30.0, 125.0, 400.0, 1000.0]:
        pos = set(np.flatnonzero(hmm.classify_log(lp0, lp1, thresh)))
        if prev is not None:
            assert pos <= prev  # raising the threshold never adds positives
        prev = pos


def test_sequence_normalization_sums_to_two():
    # sum of p0 + p1 over all 2^N sequences = 2 (one per initial storage state)
    rng = np.random.default_rng(21)
    for n in range(2, 7):
        model = random_model(rng)
        all_bits = np.array(list(product([0, 1], repeat=n)), dtype=np.uint8)
        lp0, lp1 = hmm.backward_log(model, all_bits)
        total = np.exp(lp0).sum() + np.exp(lp1).sum()
        assert total == pytest.approx(2.0, rel=1e-10)


def test_likelihood_ratio_ceiling():
    # the no-photon hypothesis can mimic any record by one heating event, so
    # lambda is bounded; the N = 25 perfect alternation realizes the maximum
    model = hmm.build_model(default_device_params())
    alt = hmm.ReadoutSequence.from_string("ge" * 12 + "g")
    v = hmm.backward_probabilities(model, alt)
    assert v.lam == pytest.approx(866.44, abs=0.01)
    el = hmm.transition_elements(default_device_params())
    asymptote = (1.0 - el["p_10"]) / el["p_01"]  # flip-and-ride entry cost ratio
    assert v.lam < asymptote
    rng = np.random.default_rng(2)
    storage = rng.random(2000) < 0.5
    bits = hmm.sample_sequences(model, storage, np.zeros(2000, dtype=bool), 25, rng)
    lp0, lp1 = hmm.backward_log(model, bits)
    assert np.all(lp1 - lp0 <= math.log(v.lam) + 1e-9)


def test_sequence_text_roundtrip():
    seq = hmm.ReadoutSequence.from_string("gegge")
    assert seq.to_string() == "gegge"
    assert len(seq) == 5
    with pytest.raises(ParameterError):
        hmm.ReadoutSequence.from_string("gxg")
    batch = np.array([[0, 1, 1], [1, 0, 0]], dtype=np.uint8)
    text = hmm.sequences_to_text(batch)
    assert text == "gee\negg\n"
    back = hmm.sequences_from_text(text)
    assert np.array_equal(back, batch)


def test_model_csv_dump():
    model = hmm.build_model(default_device_params())
    text = hmm.model_to_csv(model)
    lines = text.strip().splitlines()
    assert lines[0].startswith("matrix,row")
    t_rows = [l for l in lines if l.startswith("T,")]
    assert len(t_rows) == 4
    vals = [float(x) for x in t_rows[0].split(",")[2:]]
    assert vals == pytest.approx(model.transition[0], rel=1e-15)
