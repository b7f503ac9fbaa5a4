"""Hidden-Markov model of the joint storage-transmon system.

State order is (|0g>, |0e>, |1g>, |1e>): index = 2*storage + transmon. Readout
outcomes are 0 for g, 1 for e. The parity flip is baked into the transition matrix:
rows with storage = 1 exchange the transmon's g/e roles, so repeated application
toggles the transmon exactly when a photon is present.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .device import DeviceParams
from .errors import ParameterError, UndecidableSequenceError

STATE_LABELS = ("0g", "0e", "1g", "1e")
OUTCOME_CHARS = ("g", "e")

# Raw error-probability expressions above this are outside the model's validity
# regime; clamping would silently hide a parameterization bug.
_SANITY_LIMIT = 1.5


@dataclass(frozen=True)
class HmmModel:
    """Transition/emission pair plus the timing that generated them."""

    transition: np.ndarray  # (4, 4), row-stochastic
    emission: np.ndarray    # (4, 2), rows P(outcome | state)
    t_m: float              # full readout interval, s
    t_p: float              # parity wait, s

    def __post_init__(self):
        t = np.asarray(self.transition, dtype=float)
        e = np.asarray(self.emission, dtype=float)
        if t.shape != (4, 4) or e.shape != (4, 2):
            raise ParameterError("transition must be 4x4 and emission 4x2")
        for name, m in (("transition", t), ("emission", e)):
            if np.any(m < 0) or np.any(m > 1):
                raise ParameterError(f"{name} entries must lie in [0, 1]")
            if np.max(np.abs(m.sum(axis=1) - 1.0)) > 1e-12:
                raise ParameterError(f"{name} rows must sum to 1 within 1e-12")
        object.__setattr__(self, "transition", t)
        object.__setattr__(self, "emission", e)


@dataclass(frozen=True)
class ReadoutSequence:
    """One detection cycle's transmon readouts, 0 = g, 1 = e."""

    bits: np.ndarray

    def __post_init__(self):
        b = np.asarray(self.bits, dtype=np.uint8)
        if b.ndim != 1 or b.size == 0:
            raise ValueError("bits must be a non-empty 1-d array")
        if np.any(b > 1):
            raise ValueError("bits must be 0 (g) or 1 (e)")
        object.__setattr__(self, "bits", b)

    @classmethod
    def from_string(cls, text: str) -> "ReadoutSequence":
        return cls(_chars_to_bits(text))

    def to_string(self) -> str:
        return "".join(OUTCOME_CHARS[b] for b in self.bits)

    def __len__(self) -> int:
        return int(self.bits.size)


@dataclass(frozen=True)
class CountVerdict:
    """Backward-algorithm likelihoods of the initial storage state."""

    p0: float
    p1: float
    lam: float        # p1/p0; inf when p0 = 0 and p1 > 0
    positive: bool
    log_p0: float = -math.inf
    log_p1: float = -math.inf


def transition_elements(
    params: DeviceParams, t1_s: float | None = None, combine: str = "additive"
) -> dict[str, float]:
    """Per-check error probabilities before matrix assembly.

    combine = "additive" sums the readout-interval and parity-wait error channels
    (can exceed 1 for pathological inputs, hence the clamping downstream);
    "multiplicative" composes them as independent events.
    """
    t1_s = params.t1_s if t1_s is None else t1_s
    if t1_s <= 0:
        raise ParameterError("t1_s must be positive")
    decay_q = -math.expm1(-params.t_m / params.t1_q)   # 1 - exp(-t_m/T1_q)
    dephase_q = -math.expm1(-params.t_p / params.t2_q)
    decay_s = -math.expm1(-params.t_m / t1_s)
    if combine == "additive":
        p_ge = params.nbar_q * decay_q + dephase_q
        p_eg = decay_q + dephase_q
    elif combine == "multiplicative":
        p_ge = 1.0 - (1.0 - params.nbar_q * decay_q) * (1.0 - dephase_q)
        p_eg = 1.0 - (1.0 - decay_q) * (1.0 - dephase_q)
    else:
        raise ParameterError(f"unknown combine mode {combine!r}")
    raw_max = max(p_ge, p_eg)
    if raw_max > _SANITY_LIMIT:
        raise ParameterError(
            f"transmon error probability {raw_max:.3g} exceeds sanity limit "
            f"{_SANITY_LIMIT}; parameters outside the model's validity regime"
        )
    return {
        "p_ge": min(max(p_ge, 0.0), 1.0),
        "p_eg": min(max(p_eg, 0.0), 1.0),
        "p_01": min(max(params.nbar_s * decay_s, 0.0), 1.0),
        "p_10": min(max(decay_s, 0.0), 1.0),
    }


def build_transition(
    params: DeviceParams, t1_s: float | None = None, combine: str = "additive"
) -> np.ndarray:
    """Row-stochastic 4x4 transition matrix for one parity check."""
    el = transition_elements(params, t1_s, combine)
    p_ge, p_eg, p_01, p_10 = el["p_ge"], el["p_eg"], el["p_01"], el["p_10"]
    p_gg, p_ee = 1.0 - p_ge, 1.0 - p_eg
    p_00, p_11 = 1.0 - p_01, 1.0 - p_10
    t = np.array([
        [p_00 * p_gg, p_00 * p_ge, p_01 * p_ge, p_01 * p_gg],
        [p_00 * p_eg, p_00 * p_ee, p_01 * p_ee, p_01 * p_eg],
        [p_10 * p_gg, p_10 * p_ge, p_11 * p_ge, p_11 * p_gg],
        [p_10 * p_eg, p_10 * p_ee, p_11 * p_ee, p_11 * p_eg],
    ])
    # Clamping can leave rows a hair off 1; renormalize exactly.
    return t / t.sum(axis=1, keepdims=True)


def build_emission(f_gg: float, f_ee: float) -> np.ndarray:
    """4x2 emission matrix from the two readout fidelities."""
    for name, v in (("f_gg", f_gg), ("f_ee", f_ee)):
        if not 0.5 < v <= 1.0:
            raise ParameterError(f"{name} must lie in (0.5, 1]")
    row_g = (f_gg, 1.0 - f_gg)
    row_e = (1.0 - f_ee, f_ee)
    return np.array([row_g, row_e, row_g, row_e])


def build_model(
    params: DeviceParams, t1_s: float | None = None, combine: str = "additive"
) -> HmmModel:
    return HmmModel(
        transition=build_transition(params, t1_s, combine),
        emission=build_emission(params.f_gg, params.f_ee),
        t_m=params.t_m,
        t_p=params.t_p,
    )


# --- Sampling ----------------------------------------------------------------------


def sample_sequences(
    model: HmmModel,
    storage_one: np.ndarray,
    transmon_e: np.ndarray,
    n_steps: int,
    rng: np.random.Generator,
) -> np.ndarray:
    """Forward-sample a batch of readout sequences, one row per trial.

    storage_one and transmon_e are boolean arrays selecting each trial's initial
    hidden state. Each step emits from E at the current state, then advances the
    state through T (which embeds the parity flip).
    """
    storage_one = np.asarray(storage_one, dtype=bool)
    transmon_e = np.asarray(transmon_e, dtype=bool)
    if storage_one.shape != transmon_e.shape or storage_one.ndim != 1:
        raise ValueError("initial-state arrays must be equal-length 1-d")
    if n_steps < 1:
        raise ValueError("n_steps must be at least 1")
    n = storage_one.size
    state = 2 * storage_one.astype(np.int64) + transmon_e.astype(np.int64)
    emit_e = model.emission[:, 1]
    cdf = np.cumsum(model.transition, axis=1)
    cdf[:, -1] = 1.0  # guard against rounding at the top edge
    bits = np.empty((n, n_steps), dtype=np.uint8)
    for t in range(n_steps):
        bits[:, t] = rng.random(n) < emit_e[state]
        u = rng.random(n)
        state = np.minimum((u[:, None] > cdf[state]).sum(axis=1), 3)
    return bits


def sample_sequence(
    model: HmmModel,
    initial_storage: int,
    initial_transmon: str | int,
    n_steps: int,
    rng: np.random.Generator,
) -> ReadoutSequence:
    """Single-trial convenience wrapper around sample_sequences."""
    if initial_storage not in (0, 1):
        raise ValueError("initial_storage must be 0 or 1")
    tr = _parse_transmon(initial_transmon)
    bits = sample_sequences(
        model,
        np.array([bool(initial_storage)]),
        np.array([bool(tr)]),
        n_steps,
        rng,
    )
    return ReadoutSequence(bits[0])


def _parse_transmon(value: str | int) -> int:
    if value in ("g", 0):
        return 0
    if value in ("e", 1):
        return 1
    raise ValueError("initial_transmon must be 'g'/'e' or 0/1")


# --- Backward algorithm -------------------------------------------------------------


def backward_log(model: HmmModel, bits: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Log-likelihoods (log p0, log p1) of the initial storage state, batched.

    bits has shape (n_trials, n_steps). Uses the backward recursion with per-step
    rescaling; a uniform 1/2 prior over the initial transmon state is folded in.
    Impossible-under-both-hypotheses rows come back as (-inf, -inf).
    """
    bits = np.atleast_2d(np.asarray(bits, dtype=np.uint8))
    if bits.shape[1] < 1:
        raise ValueError("sequences must be non-empty")
    t_mat = model.transition
    e_by_outcome = model.emission.T  # (2, 4): row r gives E[:, r]
    beta = e_by_outcome[bits[:, -1]].copy()  # (n, 4)
    log_scale = np.zeros(bits.shape[0])
    for t in range(bits.shape[1] - 2, -1, -1):
        beta = e_by_outcome[bits[:, t]] * (beta @ t_mat.T)
        peak = beta.max(axis=1)
        live = peak > 0
        beta[live] /= peak[live, None]
        with np.errstate(divide="ignore"):
            log_scale += np.where(live, np.log(np.where(live, peak, 1.0)), -np.inf)
    p0 = 0.5 * (beta[:, 0] + beta[:, 1])
    p1 = 0.5 * (beta[:, 2] + beta[:, 3])
    with np.errstate(divide="ignore"):
        return np.log(p0) + log_scale, np.log(p1) + log_scale


def backward_probabilities(
    model: HmmModel, seq: ReadoutSequence, lambda_thresh: float = 125.0
) -> CountVerdict:
    """Initial-state likelihoods for one sequence, classified at lambda_thresh."""
    log_p0, log_p1 = backward_log(model, seq.bits[None, :])
    lp0, lp1 = float(log_p0[0]), float(log_p1[0])
    p0 = math.exp(lp0) if lp0 > -math.inf else 0.0
    p1 = math.exp(lp1) if lp1 > -math.inf else 0.0
    if p0 > 0:
        lam = p1 / p0
    else:
        lam = math.inf if p1 > 0 else math.nan
    positive = _decide(lp0, lp1, lambda_thresh)
    return CountVerdict(p0=p0, p1=p1, lam=lam, positive=positive,
                        log_p0=lp0, log_p1=lp1)


def classify(verdict: CountVerdict, lambda_thresh: float) -> bool:
    """Positive iff p1/p0 >= lambda_thresh; exact ties are positive."""
    if lambda_thresh <= 0:
        raise ValueError("lambda_thresh must be positive")
    if verdict.p0 == 0.0 and verdict.p1 == 0.0:
        return _decide(verdict.log_p0, verdict.log_p1, lambda_thresh)
    if verdict.p0 > 0.0 and verdict.p1 >= 0.0 and math.isfinite(verdict.p1):
        return verdict.p1 / verdict.p0 >= lambda_thresh
    return _decide(verdict.log_p0, verdict.log_p1, lambda_thresh)


def _decide(log_p0: float, log_p1: float, lambda_thresh: float) -> bool:
    if log_p0 == -math.inf and log_p1 == -math.inf:
        raise UndecidableSequenceError(
            "sequence has zero likelihood under both initial states"
        )
    if log_p1 == -math.inf:
        return False
    if log_p0 == -math.inf:
        return True
    return log_p1 - log_p0 >= math.log(lambda_thresh)


def classify_log(
    log_p0: np.ndarray, log_p1: np.ndarray, lambda_thresh: float
) -> np.ndarray:
    """Vectorized classification on log-likelihood arrays."""
    if lambda_thresh <= 0:
        raise ValueError("lambda_thresh must be positive")
    log_p0 = np.asarray(log_p0)
    log_p1 = np.asarray(log_p1)
    dead = np.isneginf(log_p0) & np.isneginf(log_p1)
    if np.any(dead):
        raise UndecidableSequenceError(
            f"{int(dead.sum())} sequences have zero likelihood under both hypotheses"
        )
    out = np.zeros(log_p0.shape, dtype=bool)
    only_p1 = np.isneginf(log_p0) & ~np.isneginf(log_p1)
    both = ~np.isneginf(log_p0) & ~np.isneginf(log_p1)
    out[only_p1] = True
    out[both] = log_p1[both] - log_p0[both] >= math.log(lambda_thresh)
    return out


# --- Serialization ------------------------------------------------------------------


def sequences_to_text(bits: np.ndarray) -> str:
    """One sequence per line, characters in {g, e}."""
    bits = np.atleast_2d(np.asarray(bits, dtype=np.uint8))
    lookup = np.array(OUTCOME_CHARS)
    return "\n".join("".join(row) for row in lookup[bits]) + "\n"


def sequences_from_text(text: str) -> np.ndarray:
    """Inverse of sequences_to_text; all lines must share one length."""
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines:
        raise ValueError("no sequences found")
    rows = [_chars_to_bits(ln.strip()) for ln in lines]
    lengths = {r.size for r in rows}
    if len(lengths) != 1:
        raise ValueError(f"inconsistent sequence lengths: {sorted(lengths)}")
    return np.vstack(rows)


def _chars_to_bits(text: str) -> np.ndarray:
    try:
        return np.array([{"g": 0, "e": 1}[c] for c in text], dtype=np.uint8)
    except KeyError as exc:
        raise ParameterError(f"invalid readout character {exc.args[0]!r}") from None


def model_to_csv(model: HmmModel) -> str:
    """Matrix dump for inspection: transition rows then emission rows."""
    lines = ["matrix,row," + ",".join(STATE_LABELS)]
    for label, row in zip(STATE_LABELS, model.transition):
        lines.append("T," + label + "," + ",".join(f"{v:.17g}" for v in row))
    lines.append("matrix,row," + ",".join(OUTCOME_CHARS) + ",,")
    for label, row in zip(STATE_LABELS, model.emission):
        lines.append("E," + label + "," + ",".join(f"{v:.17g}" for v in row) + ",,")
    return "\n".join(lines) + "\n"
