"""Device parameters, flux-to-frequency tuning, and photon-statistics calibrations.

Angular frequencies are stored in rad/s and times in seconds throughout. Flux is
expressed in units of the flux quantum.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import constants as const
from scipy.optimize import brentq, least_squares
from scipy.special import gammaln

from .errors import FitError, ParameterError

TWO_PI = 2.0 * math.pi


@dataclass(frozen=True)
class DeviceParams:
    """Hardware constants of the counter at one flux operating point."""

    omega_q: float          # transmon frequency, rad/s
    alpha_q: float          # transmon anharmonicity, rad/s, negative
    omega_r: float          # readout resonator frequency, rad/s
    chi: float              # storage-transmon dispersive shift, rad/s, negative.
                            # Number-splitting peak spacing is 2*chi.
    chi_qr: float           # transmon-readout dispersive shift, rad/s
    t1_q: float             # s
    t2_q: float             # s
    t1_s: float             # s, flux dependent
    t2_s: float             # s, flux dependent
    nbar_q: float           # transmon thermal occupation
    nbar_s: float           # storage thermal occupation
    f_gg: float             # P(read g | transmon g)
    f_ee: float             # P(read e | transmon e)
    t_r: float              # readout pulse, s
    t_l: float              # readout photon release, s
    t_c: float              # reset + integration window, s
    n_parity: int = 25      # parity checks per detection cycle
    lambda_thresh: float = 125.0

    def __post_init__(self):
        for name in ("t1_q", "t2_q", "t1_s", "t2_s", "t_r", "t_l", "t_c"):
            if getattr(self, name) <= 0:
                raise ParameterError(f"{name} must be positive")
        if self.t2_q > 2.0 * self.t1_q + 1e-15:
            raise ParameterError("t2_q must satisfy t2_q <= 2*t1_q")
        for name in ("f_gg", "f_ee"):
            v = getattr(self, name)
            if not 0.5 < v <= 1.0:
                raise ParameterError(f"{name} must lie in (0.5, 1]")
        for name in ("nbar_q", "nbar_s"):
            v = getattr(self, name)
            if not 0.0 <= v < 1.0:
                raise ParameterError(f"{name} must lie in [0, 1)")
        if self.chi == 0 or not math.isfinite(self.chi):
            raise ParameterError("chi must be nonzero and finite")
        if self.n_parity < 1:
            raise ParameterError("n_parity must be at least 1")
        if self.lambda_thresh <= 0:
            raise ParameterError("lambda_thresh must be positive")

    @property
    def t_p(self) -> float:
        """Parity accumulation wait: half a dispersive phase turn."""
        return math.pi / abs(2.0 * self.chi)

    @property
    def t_m(self) -> float:
        """Transmon readout interval per parity check (pulse plus release)."""
        return self.t_r + self.t_l

    def with_t1_s(self, t1_s: float) -> "DeviceParams":
        return replace(self, t1_s=t1_s)


def default_device_params() -> DeviceParams:
    """Factory defaults: the bundled detector model at zero external flux."""
    return DeviceParams(
        omega_q=TWO_PI * 4.811e9,
        alpha_q=-TWO_PI * 176.7e6,
        omega_r=TWO_PI * 6.733e9,
        chi=-TWO_PI * 1.655e6,
        chi_qr=-TWO_PI * 0.14e6,
        t1_q=34e-6,
        t2_q=31e-6,
        t1_s=65e-6,
        t2_s=40e-6,
        nbar_q=1.4e-2,
        nbar_s=8.6e-3,
        f_gg=0.978,
        f_ee=0.938,
        t_r=2.3e-6,
        t_l=5.0e-6,
        t_c=500e-6,
    )


# Column order of TuningModel.flux_table rows.
FLUX_TABLE_COLUMNS = ("phi_ext", "omega_s", "t1_s", "t2_s", "eta", "delta")


@dataclass(frozen=True)
class TuningModel:
    """Flux tuning of the storage mode via a SQUID-loaded coupler.

    flux_table rows are (phi_ext, omega_s, t1_s, t2_s, eta, delta) with phi_ext in
    flux-quantum units, omega_s in rad/s, lifetimes in seconds. Rows must be sorted
    by strictly increasing phi_ext.
    """

    omega_s_bare: float     # rad/s
    omega_c0: float         # coupler frequency at zero flux, rad/s
    g: float                # storage-coupler coupling, rad/s
    flux_table: np.ndarray = field(default_factory=lambda: np.empty((0, 6)))

    def __post_init__(self):
        if self.g <= 0:
            raise ParameterError("coupling g must be positive")
        table = np.asarray(self.flux_table, dtype=float)
        if table.size and (table.ndim != 2 or table.shape[1] != len(FLUX_TABLE_COLUMNS)):
            raise ParameterError(
                f"flux_table must have {len(FLUX_TABLE_COLUMNS)} columns "
                f"{FLUX_TABLE_COLUMNS}"
            )
        if table.shape[0] > 1 and not np.all(np.diff(table[:, 0]) > 0):
            raise ParameterError("flux_table must be sorted by strictly increasing phi_ext")
        object.__setattr__(self, "flux_table", table)


def squid_frequency(tuning: TuningModel, phi_ext: float) -> float:
    """Coupler frequency under the symmetric-SQUID law omega_c0*sqrt(|cos(pi*phi)|)."""
    c = abs(math.cos(math.pi * phi_ext))
    # cos(pi/2) lands at ~6e-17 in floats, so test against an epsilon
    if c < 1e-12:
        raise ValueError(
            f"coupler frequency undefined at phi_ext = {phi_ext}: |cos(pi*phi)| = 0"
        )
    return tuning.omega_c0 * math.sqrt(c)


def storage_frequency(tuning: TuningModel, phi_ext: float) -> float:
    """Upper-branch frequency of the storage-coupler avoided crossing at phi_ext."""
    omega_c = squid_frequency(tuning, phi_ext)
    return _upper_branch(tuning.omega_s_bare, omega_c, tuning.g)


def _upper_branch(omega_s_bare: float, omega_c: float, g: float) -> float:
    delta = omega_s_bare - omega_c
    return 0.5 * (omega_s_bare + omega_c) + 0.5 * math.hypot(2.0 * g, delta)


@dataclass(frozen=True)
class FluxPointParams:
    """Interpolated calibration values at one flux point."""

    t1_s: float
    t2_s: float
    eta: float
    delta: float
    omega_s: float


def interpolate_flux_params(tuning: TuningModel, phi_ext: float) -> FluxPointParams:
    """Linear interpolation of the calibration table at phi_ext. No extrapolation."""
    table = tuning.flux_table
    if table.shape[0] == 0:
        raise ParameterError("tuning model has an empty flux_table")
    phis = table[:, 0]
    if table.shape[0] == 1:
        # Degenerate table: constant values, but only inside its single "range".
        if not math.isclose(phi_ext, phis[0], rel_tol=0.0, abs_tol=1e-12):
            raise ValueError(
                f"phi_ext = {phi_ext} outside calibrated range "
                f"[{phis[0]}, {phis[0]}]"
            )
        row = table[0]
        return FluxPointParams(t1_s=row[2], t2_s=row[3], eta=row[4], delta=row[5],
                               omega_s=row[1])
    if phi_ext < phis[0] or phi_ext > phis[-1]:
        raise ValueError(
            f"phi_ext = {phi_ext} outside calibrated range [{phis[0]}, {phis[-1]}]"
        )
    omega_s, t1_s, t2_s, eta, delta = (
        float(np.interp(phi_ext, phis, table[:, j])) for j in (1, 2, 3, 4, 5)
    )
    return FluxPointParams(t1_s=t1_s, t2_s=t2_s, eta=eta, delta=delta, omega_s=omega_s)


def fit_tuning_model(
    f_top_hz: float = 5.6942e9,
    f_bottom_hz: float = 5.6714e9,
    phi_edge: float = 0.4793,
    g: float = TWO_PI * 170e6,
) -> TuningModel:
    """Solve (omega_s_bare, omega_c0) so the mapped band hits both frequency edges.

    The upper branch equals f_top at zero flux and f_bottom at phi = phi_edge. Both
    bare frequencies are treated as fit parameters; the coupling g is held fixed.
    """
    w_top = TWO_PI * f_top_hz
    w_bot = TWO_PI * f_bottom_hz
    r = math.sqrt(abs(math.cos(math.pi * phi_edge)))  # coupler scale factor at the edge

    def edge_mismatch(omega_c0: float) -> float:
        # Given omega_c0, omega_s_bare is pinned by the zero-flux equation; report
        # the residual of the band-bottom equation.
        ws = _bare_from_top(w_top, omega_c0, g)
        return _upper_branch(ws, r * omega_c0, g) - w_bot

    lo, hi = TWO_PI * 0.1e9, w_top - 1.0  # coupler below the storage branch
    omega_c0 = brentq(edge_mismatch, lo, hi, xtol=1e-6, rtol=1e-14)
    omega_s_bare = _bare_from_top(w_top, omega_c0, g)
    return TuningModel(omega_s_bare=omega_s_bare, omega_c0=omega_c0, g=g)


def _bare_from_top(w_top: float, omega_c: float, g: float) -> float:
    # Invert the upper branch for omega_s_bare at fixed coupler frequency:
    # w_top = (ws + wc)/2 + hypot(2g, ws - wc)/2 has the exact solution below
    # whenever w_top > wc (guaranteed: branch sits above both bare modes).
    return w_top - g * g / (w_top - omega_c)


def build_flux_table(
    tuning: TuningModel,
    phi_values: np.ndarray,
    t1_s_range: tuple[float, float] = (64.5e-6, 69.2e-6),
    t2_s_range: tuple[float, float] = (35e-6, 40e-6),
    eta_range: tuple[float, float] = (0.0681, 0.1981),
    delta_range: tuple[float, float] = (0.020, 0.008),
) -> np.ndarray:
    """Synthetic calibration rows over phi_values (ascending, typically negative).

    Calibration quantities vary linearly in |phi| from the zero-flux end (second
    element of each range pair... first element applies at max |phi|). omega_s comes
    from the tuning model.
    """
    phis = np.asarray(phi_values, dtype=float)
    if not np.all(np.diff(phis) > 0):
        raise ParameterError("phi_values must be strictly increasing")
    frac = np.abs(phis) / max(np.max(np.abs(phis)), 1e-30)  # 0 at zero flux
    rows = np.empty((phis.size, 6))
    rows[:, 0] = phis
    rows[:, 1] = [storage_frequency(tuning, p) for p in phis]
    for j, (far, near) in enumerate(
        [t1_s_range, t2_s_range, eta_range, delta_range], start=2
    ):
        rows[:, j] = near + (far - near) * frac
    return rows


def default_tuning_model(n_table_rows: int = 17) -> TuningModel:
    """Fitted tuning model with a synthetic calibration table over the full band."""
    base = fit_tuning_model()
    phis = np.linspace(-0.4807, 0.0, n_table_rows)
    table = build_flux_table(base, phis)
    return replace(base, flux_table=table)


# --- Photon statistics -----------------------------------------------------------


def coherent_populations(alpha: float, n_max: int) -> np.ndarray:
    """Fock populations P_n = alpha^(2n) exp(-alpha^2)/n! for n = 0..n_max."""
    if alpha < 0:
        raise ParameterError("alpha must be non-negative")
    if n_max < 0:
        raise ParameterError("n_max must be non-negative")
    n = np.arange(n_max + 1)
    if alpha == 0.0:
        out = np.zeros(n_max + 1)
        out[0] = 1.0
        return out
    log_p = 2.0 * n * math.log(alpha) - alpha * alpha - gammaln(n + 1)
    return np.exp(log_p)


@dataclass(frozen=True)
class CoherentCalibration:
    """Displacement amplitude per unit drive gain, from the population fit."""

    scale_c: float
    fit_residual: float

    def __post_init__(self):
        if self.scale_c <= 0:
            raise ParameterError("scale_c must be positive")


def fit_displacement_scale(
    gains: list[float],
    measured_pops: list[list[tuple[int, float]]],
) -> CoherentCalibration:
    """Least-squares fit of the drive-gain-to-displacement scale c.

    measured_pops[i] holds (Fock level, measured population) pairs taken at drive
    gain gains[i]. Negative population samples are dropped before fitting; values
    above 1.1 or below -0.1 are rejected as corrupt.
    """
    if len(gains) < 3:
        raise ParameterError(f"need at least 3 gain points, got {len(gains)}")
    if len(measured_pops) != len(gains):
        raise ParameterError("gains and measured_pops must have equal length")
    eps, ns, ps = [], [], []
    for gain, pairs in zip(gains, measured_pops):
        for n, p in pairs:
            if not -0.1 <= p <= 1.1:
                raise ParameterError(f"population {p} at n={n} outside plausible range")
            if p < 0:
                continue  # noisy negative estimates carry no usable weight
            eps.append(float(gain))
            ns.append(int(n))
            ps.append(float(p))
    if not eps:
        raise FitError("no population samples retained after negativity filter")
    eps_a = np.array(eps)
    ns_a = np.array(ns)
    ps_a = np.array(ps)

    def residual(c: np.ndarray) -> np.ndarray:
        alpha = c[0] * eps_a
        lam = alpha * alpha
        with np.errstate(divide="ignore"):
            log_p = np.where(
                lam > 0,
                ns_a * np.log(np.maximum(lam, 1e-300)) - lam - gammaln(ns_a + 1),
                np.where(ns_a == 0, 0.0, -np.inf),
            )
        return np.exp(log_p) - ps_a

    # Scale guess: strongest drive should land around one photon.
    c0 = 1.0 / max(np.max(eps_a), 1e-12)
    sol = least_squares(
        residual, x0=[c0], bounds=([1e-12], [np.inf]), xtol=1e-14, ftol=1e-14, gtol=1e-14
    )
    if not sol.success or sol.x[0] <= 0:
        raise FitError(f"displacement fit failed: {sol.message}; residual {sol.cost:.3g}")
    rms = math.sqrt(2.0 * sol.cost / len(eps_a))
    return CoherentCalibration(scale_c=float(sol.x[0]), fit_residual=rms)


# --- Thermal statistics -----------------------------------------------------------


def thermal_occupation(freq_hz: float, temp_k: float) -> float:
    """Bose-Einstein occupation of a mode at freq_hz (ordinary Hz) and temp_k."""
    if freq_hz <= 0:
        raise ParameterError("freq_hz must be positive")
    if temp_k <= 0:
        raise ParameterError("temp_k must be positive")
    x = const.h * freq_hz / (const.k * temp_k)
    if x > 700.0:  # expm1 overflows; 1/(e^x - 1) ~ e^-x to < 1e-300 relative
        return math.exp(-x)
    return 1.0 / math.expm1(x)


def temperature_from_occupation(freq_hz: float, nbar: float) -> float:
    """Exact inverse of thermal_occupation."""
    if freq_hz <= 0:
        raise ParameterError("freq_hz must be positive")
    if nbar <= 0.0:
        raise ParameterError("nbar must be positive")
    return const.h * freq_hz / (const.k * math.log1p(1.0 / nbar))


def thermal_from_ramsey_ratio(intensity_ratio: float) -> float:
    """Occupation from the sideband-to-carrier peak weight ratio r: nbar = r/(1+r)."""
    if not 0.0 <= intensity_ratio < 1.0:
        raise ParameterError("intensity_ratio must lie in [0, 1)")
    return intensity_ratio / (1.0 + intensity_ratio)


def qubit_temp_from_populations(p_g: float, p_e: float, freq_hz: float) -> float:
    """Effective temperature from two-level populations: T = hf/(k*ln(P_g/P_e))."""
    if abs(p_g + p_e - 1.0) > 1e-6:
        raise ParameterError("populations must sum to 1 within 1e-6")
    if p_e <= 0:
        return 0.0
    if p_e >= p_g:
        raise ValueError("P_e >= P_g implies a non-positive temperature, out of scope")
    return const.h * freq_hz / (const.k * math.log(p_g / p_e))
