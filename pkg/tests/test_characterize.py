"""Monte-Carlo characterization: injection response fit and threshold sweep."""

import dataclasses
import json
import math

import numpy as np
import pytest

from fluxcount import characterize
from fluxcount.device import default_device_params
from fluxcount.errors import CharacterizationFitError, ParameterError

INJECTIONS = [0.0, 0.02, 0.04, 0.06, 0.08, 0.10, 0.12]


def perfect_params():
    return dataclasses.replace(
        default_device_params(),
        t1_q=math.inf,
        t2_q=math.inf,
        t1_s=math.inf,
        t2_s=math.inf,
        nbar_q=0.0,
        nbar_s=0.0,
        f_gg=1.0,
        f_ee=1.0,
    )


def test_perfect_device_unit_response():
    res = characterize.run_characterization(
        perfect_params(), [0.0, 0.05, 0.10], 500, rng=3
    )
    assert res.eta == pytest.approx(1.0, abs=3 * res.eta_err + 1e-12)
    assert res.delta == pytest.approx(0.0, abs=3 * res.delta_err + 1e-12)


def test_measured_bands_at_table_parameters():
    res = characterize.run_characterization(
        default_device_params(), INJECTIONS, 20000, rng=1234
    )
    nbar_s = default_device_params().nbar_s
    assert res.eta >= 0.14
    assert 0.2 * nbar_s <= res.delta <= 5.0 * nbar_s
    # frozen-seed regression corridor around the model's own level
    assert 0.40 <= res.eta <= 0.50
    assert 0.003 <= res.delta <= 0.006
    assert [p.n_inj for p in res.points] == INJECTIONS
    assert all(p.trials == 20000 for p in res.points)
    # measured rates rise with injection overall
    rates = [p.n_meas for p in res.points]
    assert rates[-1] > rates[0]


def test_thermal_floor_variants():
    params = default_device_params()
    full = characterize.run_characterization(params, INJECTIONS, 20000, rng=5)
    bare = characterize.run_characterization(
        params, INJECTIONS, 20000, rng=5, include_thermal_start=False
    )
    # ambient occupation feeds the intercept, not the slope
    assert bare.delta < 1.5e-3
    assert full.delta > bare.delta
    assert abs(full.eta - bare.eta) < 5 * math.hypot(full.eta_err, bare.eta_err)


def test_fit_error_paths():
    params = default_device_params()
    with pytest.raises(CharacterizationFitError) as exc:
        characterize.run_characterization(params, [0.0, 0.0, 0.0], 2000, rng=8)
    est = exc.value.delta_estimate
    assert est is not None and 0.0 < est < 0.05
    with pytest.raises(CharacterizationFitError) as exc2:
        characterize.run_characterization(params, [0.05, 0.05], 2000, rng=8)
    assert exc2.value.delta_estimate is None


def test_input_validation():
    params = default_device_params()
    with pytest.raises(ParameterError):
        characterize.run_characterization(params, [0.0, 0.3], 2000, rng=1)
    with pytest.raises(ParameterError):
        characterize.run_characterization(params, [0.0, 0.1], 50, rng=1)
    with pytest.raises(ParameterError):
        characterize.run_characterization(params, [], 2000, rng=1)


def test_fit_recovers_planted_line():
    # synthetic binomial data around a known line; bias over replications < 1 sigma
    rng = np.random.default_rng(17)
    eta_true, delta_true = 0.3, 0.01
    x = np.array(INJECTIONS)
    trials = np.full(x.size, 5000)
    etas, deltas, eta_errs, delta_errs = [], [], [], []
    for _ in range(100):
        p = eta_true * x + delta_true
        y = rng.binomial(trials, p) / trials
        eta, delta, eta_err, delta_err = characterize.fit_rate_line(x, y, trials)
        etas.append(eta)
        deltas.append(delta)
        eta_errs.append(eta_err)
        delta_errs.append(delta_err)
    assert abs(np.mean(etas) - eta_true) < np.mean(eta_errs)
    assert abs(np.mean(deltas) - delta_true) < np.mean(delta_errs)
    # reported error should match the observed scatter reasonably well
    assert np.std(etas) == pytest.approx(np.mean(eta_errs), rel=0.35)


def test_error_scaling_with_trials():
    rng = np.random.default_rng(23)
    x = np.array(INJECTIONS)
    eta_true, delta_true = 0.3, 0.01
    ratios = []
    for _ in range(30):
        errs = []
        for m in (2000, 8000):
            trials = np.full(x.size, m)
            y = rng.binomial(trials, eta_true * x + delta_true) / trials
            errs.append(characterize.fit_rate_line(x, y, trials)[2])
        ratios.append(errs[0] / errs[1])
    assert np.mean(ratios) == pytest.approx(2.0, rel=0.15)


def test_result_invariants_enforced():
    pt = characterize.CharacterizationPoint(0.0, 0.01, 1000)
    with pytest.raises(ParameterError):
        characterize.CharacterizationResult(1.5, 0.01, 0.01, 0.001, (pt,))
    with pytest.raises(ParameterError):
        characterize.CharacterizationResult(0.3, -0.1, 0.01, 0.001, (pt,))
    with pytest.raises(ParameterError):
        characterize.CharacterizationResult(0.3, 0.01, 0.01, 0.001, tuple())


def test_threshold_sweep_limits_and_monotonicity():
    params = default_device_params()
    thresholds = [1e-9, 10.0, 50.0, 125.0, 250.0, 500.0, 1000.0]
    pts = characterize.threshold_sweep(params, 0.10, thresholds, 40000, rng=77)
    assert pts[0].eta == 1.0 and pts[0].delta == 1.0
    etas = [p.eta for p in pts]
    deltas = [p.delta for p in pts]
    assert all(a >= b for a, b in zip(etas, etas[1:]))  # exactly non-increasing
    assert all(a >= b for a, b in zip(deltas, deltas[1:]))
    # ratio plateau over the attainable range above the knee
    defined = [p.delta_over_eta for p in pts if p.lambda_thresh >= 125.0 and p.eta > 0]
    assert len(defined) >= 3
    assert (max(defined) - min(defined)) / min(defined) < 0.30
    # thresholds beyond the model's ratio ceiling pass nothing
    top = pts[-1]
    assert top.lambda_thresh == 1000.0
    assert top.eta == 0.0 and top.delta == 0.0 and math.isnan(top.delta_over_eta)


def test_threshold_sweep_determinism_and_validation():
    params = default_device_params()
    a = characterize.threshold_sweep(params, 0.1, [50.0, 125.0], 2000, rng=9)
    b = characterize.threshold_sweep(params, 0.1, [50.0, 125.0], 2000, rng=9)
    assert a == b
    with pytest.raises(ParameterError):
        characterize.threshold_sweep(params, 0.1, [125.0, 50.0], 2000, rng=9)
    with pytest.raises(ParameterError):
        characterize.threshold_sweep(params, 0.1, [0.0, 50.0], 2000, rng=9)
    with pytest.raises(ParameterError):
        characterize.threshold_sweep(params, 0.5, [50.0], 2000, rng=9)


def test_serialization_formats():
    res = characterize.run_characterization(
        default_device_params(), [0.0, 0.05, 0.1], 500, rng=2
    )
    csv_text = characterize.points_to_csv(res)
    lines = csv_text.strip().splitlines()
    assert lines[0] == "n_inj,n_meas,trials"
    assert len(lines) == 4
    n_inj, n_meas, trials = lines[1].split(",")
    assert float(n_inj) == res.points[0].n_inj
    assert float(n_meas) == res.points[0].n_meas  # 17 digits round-trip exactly
    assert int(trials) == 500

    summary = characterize.summary_to_json_dict(res, 125.0)
    assert set(summary) == {"eta", "delta", "errors", "threshold"}
    assert json.dumps(summary)  # JSON-serializable

    pts = characterize.threshold_sweep(
        default_device_params(), 0.1, [125.0, 1000.0], 500, rng=2
    )
    sweep_csv = characterize.sweep_to_csv(pts)
    first = sweep_csv.splitlines()
    assert first[0] == "lambda,eta,delta,delta_over_eta"
    assert first[2].split(",")[0] == "1000"
