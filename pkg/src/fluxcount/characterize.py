"""Monte-Carlo characterization of the photon counter.

Samples the parity-readout protocol from the hidden-Markov device model,
classifies each record, and fits measured rate against injected population
to extract the detection efficiency (slope) and false-positive rate
(intercept). Also sweeps the decision threshold on a common sample batch.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .device import DeviceParams
from .errors import CharacterizationFitError, ParameterError
from .hmm import backward_log, build_model, sample_sequences
from .rng import STAGE_CHARACTERIZE, STAGE_SWEEP, as_seed, child_rng

__all__ = [
    "CharacterizationPoint",
    "CharacterizationResult",
    "ThresholdPoint",
    "run_characterization",
    "threshold_sweep",
    "fit_rate_line",
    "points_to_csv",
    "summary_to_json_dict",
    "sweep_to_csv",
]

_MAX_INJECTION = 0.2
_MIN_TRIALS = 100


@dataclass(frozen=True)
class CharacterizationPoint:
    """One injection point: programmed population, measured rate, sample size."""

    n_inj: float
    n_meas: float
    trials: int


@dataclass(frozen=True)
class CharacterizationResult:
    """Line-fit summary of a characterization run.

    eta is the fitted slope (detection efficiency), delta the intercept
    (false-positive rate); the _err fields are 1-sigma standard errors
    from the weighted least-squares covariance.
    """

    eta: float
    delta: float
    eta_err: float
    delta_err: float
    points: tuple[CharacterizationPoint, ...]

    def __post_init__(self) -> None:
        if not self.points:
            raise ParameterError("characterization result needs at least one point")
        if not (self.eta > -3.0 * self.eta_err and self.eta < 1.0 + 3.0 * self.eta_err):
            raise ParameterError(
                f"fitted efficiency {self.eta:.4g} outside [0, 1] by more than "
                f"3 standard errors ({self.eta_err:.4g})"
            )
        if self.delta < -3.0 * self.delta_err:
            raise ParameterError(
                f"fitted intercept {self.delta:.4g} below zero by more than "
                f"3 standard errors ({self.delta_err:.4g})"
            )


@dataclass(frozen=True)
class ThresholdPoint:
    """Efficiency and false-positive rate at one decision threshold.

    delta_over_eta is NaN when no trial passes the threshold (the ratio
    is 0/0 above the model's maximum attainable likelihood ratio).
    """

    lambda_thresh: float
    eta: float
    delta: float
    delta_over_eta: float


def _initial_states(
    n_inj: float,
    params: DeviceParams,
    rng: np.random.Generator,
    n: int,
    include_thermal_start: bool,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Draw per-trial initial occupations; returns (injected, storage, transmon)."""
    injected = rng.random(n) < n_inj
    storage = injected.copy()
    if include_thermal_start and params.nbar_s > 0.0:
        storage |= rng.random(n) < params.nbar_s
    transmon = rng.random(n) < params.nbar_q
    return injected, storage, transmon


def fit_rate_line(
    n_inj: np.ndarray,
    n_meas: np.ndarray,
    trials: np.ndarray,
) -> tuple[float, float, float, float]:
    """Weighted least-squares line n_meas = eta * n_inj + delta.

    Weights are inverse binomial variances p(1-p)/trials evaluated at the
    fitted line (two passes, starting from the unweighted solution) so that
    points with zero observed rate keep a finite weight.
    Returns (eta, delta, eta_err, delta_err).
    """
    x = np.asarray(n_inj, dtype=float)
    y = np.asarray(n_meas, dtype=float)
    m = np.asarray(trials, dtype=float)
    if x.size < 2 or np.unique(x).size < 2:
        raise CharacterizationFitError(
            "need at least 2 distinct injection values to fit a line",
            delta_estimate=float(np.average(y, weights=m)) if np.all(x == 0.0) else None,
        )
    design = np.column_stack([x, np.ones_like(x)])
    coef, *_ = np.linalg.lstsq(design, y, rcond=None)
    for _ in range(2):
        pred = np.clip(design @ coef, 1.0 / (10.0 * m), 1.0 - 1.0 / (10.0 * m))
        w = m / (pred * (1.0 - pred))
        wd = design * w[:, None]
        cov = np.linalg.inv(design.T @ wd)
        coef = cov @ (wd.T @ y)
    eta, delta = float(coef[0]), float(coef[1])
    eta_err, delta_err = (float(math.sqrt(v)) for v in np.diag(cov))
    return eta, delta, eta_err, delta_err


def run_characterization(
    params: DeviceParams,
    injections: list | tuple | np.ndarray,
    trials_per_point: int,
    rng: np.random.Generator | int,
    t1_s: float | None = None,
    lambda_thresh: float | None = None,
    include_thermal_start: bool = True,
) -> CharacterizationResult:
    """Inject known populations, count positives, and fit the response line.

    Each injection point runs on its own child stream derived from the
    master seed, so results are reproducible for a fixed seed no matter
    how points are scheduled. ``include_thermal_start`` adds the ambient
    storage occupation on top of the programmed injection, which is what
    the physical detector sees; disable it to study the heating-only
    floor.
    """
    injections = np.asarray(injections, dtype=float)
    if injections.ndim != 1 or injections.size == 0:
        raise ParameterError("injections must be a non-empty 1-d sequence")
    if np.any(injections < 0.0) or np.any(injections > _MAX_INJECTION):
        raise ParameterError(
            f"injected populations must lie in [0, {_MAX_INJECTION}] "
            "(weak-displacement regime)"
        )
    if trials_per_point < _MIN_TRIALS:
        raise ParameterError(f"trials_per_point must be >= {_MIN_TRIALS}")
    if np.unique(injections).size < 2:
        # Degenerate design: no slope information. Still report the pooled
        # positive rate when every injection is zero, as a delta estimate.
        delta_estimate = None
        if np.all(injections == 0.0):
            seed = as_seed(rng)
            model = build_model(params, t1_s=t1_s)
            thresh = params.lambda_thresh if lambda_thresh is None else lambda_thresh
            total_pos = 0
            for k in range(injections.size):
                rng_k = child_rng(seed, STAGE_CHARACTERIZE, k)
                _, storage, transmon = _initial_states(
                    0.0, params, rng_k, trials_per_point, include_thermal_start
                )
                bits = sample_sequences(
                    model, storage, transmon, params.n_parity, rng_k
                )
                lp0, lp1 = backward_log(model, bits)
                total_pos += int(np.sum(lp1 - lp0 >= math.log(thresh)))
            delta_estimate = total_pos / (trials_per_point * injections.size)
        raise CharacterizationFitError(
            "need at least 2 distinct injection values to fit a line",
            delta_estimate=delta_estimate,
        )

    seed = as_seed(rng)
    model = build_model(params, t1_s=t1_s)
    thresh = params.lambda_thresh if lambda_thresh is None else lambda_thresh
    log_thresh = math.log(thresh)

    points = []
    for k, n_inj in enumerate(injections):
        rng_k = child_rng(seed, STAGE_CHARACTERIZE, k)
        _, storage, transmon = _initial_states(
            float(n_inj), params, rng_k, trials_per_point, include_thermal_start
        )
        bits = sample_sequences(model, storage, transmon, params.n_parity, rng_k)
        lp0, lp1 = backward_log(model, bits)
        n_pos = int(np.sum(lp1 - lp0 >= log_thresh))
        points.append(
            CharacterizationPoint(float(n_inj), n_pos / trials_per_point, trials_per_point)
        )

    eta, delta, eta_err, delta_err = fit_rate_line(
        np.array([p.n_inj for p in points]),
        np.array([p.n_meas for p in points]),
        np.array([p.trials for p in points]),
    )
    return CharacterizationResult(eta, delta, eta_err, delta_err, tuple(points))


def threshold_sweep(
    params: DeviceParams,
    n_inj_probe: float,
    thresholds: list | tuple | np.ndarray,
    trials: int,
    rng: np.random.Generator | int,
    t1_s: float | None = None,
    include_thermal_start: bool = True,
) -> list[ThresholdPoint]:
    """Classify one common batch of trials at every threshold.

    A single sampled batch is reused across thresholds (common random
    numbers), which makes eta and delta exactly non-increasing in the
    threshold rather than merely statistically so.
    """
    thresholds = np.asarray(thresholds, dtype=float)
    if thresholds.ndim != 1 or thresholds.size == 0:
        raise ParameterError("thresholds must be a non-empty 1-d sequence")
    if np.any(thresholds <= 0.0):
        raise ParameterError("thresholds must be positive")
    if np.any(np.diff(thresholds) < 0.0):
        raise ParameterError("thresholds must be sorted ascending")
    if not 0.0 < n_inj_probe <= _MAX_INJECTION:
        raise ParameterError(
            f"probe injection must lie in (0, {_MAX_INJECTION}] so both the "
            "injected and empty trial groups are populated"
        )
    if trials < _MIN_TRIALS:
        raise ParameterError(f"trials must be >= {_MIN_TRIALS}")

    seed = as_seed(rng)
    rng_b = child_rng(seed, STAGE_SWEEP, 0)
    model = build_model(params, t1_s=t1_s)
    injected, storage, transmon = _initial_states(
        n_inj_probe, params, rng_b, trials, include_thermal_start
    )
    bits = sample_sequences(model, storage, transmon, params.n_parity, rng_b)
    lp0, lp1 = backward_log(model, bits)
    ratio = lp1 - lp0

    n_injected = int(np.sum(injected))
    if n_injected == 0 or n_injected == trials:
        raise CharacterizationFitError(
            "probe batch has only one trial group; increase trials"
        )
    out = []
    for lam in thresholds:
        pos = ratio >= math.log(lam)
        eta = float(np.mean(pos[injected]))
        delta = float(np.mean(pos[~injected]))
        out.append(
            ThresholdPoint(float(lam), eta, delta, delta / eta if eta > 0.0 else math.nan)
        )
    return out


def points_to_csv(result: CharacterizationResult) -> str:
    lines = ["n_inj,n_meas,trials"]
    for p in result.points:
        lines.append(f"{p.n_inj:.17g},{p.n_meas:.17g},{p.trials}")
    return "\n".join(lines) + "\n"


def summary_to_json_dict(result: CharacterizationResult, threshold: float) -> dict:
    return {
        "eta": result.eta,
        "delta": result.delta,
        "errors": {"eta": result.eta_err, "delta": result.delta_err},
        "threshold": threshold,
    }


def sweep_to_csv(points: list[ThresholdPoint]) -> str:
    lines = ["lambda,eta,delta,delta_over_eta"]
    for p in points:
        lines.append(
            f"{p.lambda_thresh:.17g},{p.eta:.17g},{p.delta:.17g},{p.delta_over_eta:.17g}"
        )
    return "\n".join(lines) + "\n"
