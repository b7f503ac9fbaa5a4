"""Pipeline stages: synthetic scan generation, characterization,
efficiency simulation, exclusion, and figure-data emission.

Every stage writes plain CSV (one `#` header line carrying the artifact
version and config digest, floats at 17 significant digits) plus an
incrementally updated manifest.json with per-stage wall times and output
digests. Data outputs are byte-identical for a fixed config and seed at
any thread count; the manifest's wall times are the one deliberately
non-reproducible record.
"""

from __future__ import annotations

import hashlib
import json
import math
import time
import warnings
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from .characterize import (
    points_to_csv,
    run_characterization,
    summary_to_json_dict,
    sweep_to_csv,
    threshold_sweep,
)
from .config import ARTIFACT_VERSION, RunConfig
from .device import interpolate_flux_params
from .errors import DependencyError, ParameterError
from .exclusion import (
    ScanBin,
    ScanDataset,
    SignalModel,
    lineshape_envelope,
    lineshape_value,
    marginalized_confidence,
    savgol_background,
    signal_counts,
    solve_epsilon_95,
)
from .hmm import backward_log, build_model, sample_sequences
from .lindblad import simulate_parity_protocol
from .rng import STAGE_LINDBLAD, STAGE_SCAN, child_rng

__all__ = [
    "SCAN_CSV",
    "MANIFEST_JSON",
    "stage_simulate_scan",
    "stage_characterize",
    "stage_lindblad",
    "stage_exclude",
    "stage_report",
    "read_scan_csv",
    "load_manifest",
    "verify_manifest",
]

SCAN_CSV = "scan.csv"
MANIFEST_JSON = "manifest.json"
CHARACTERIZATION_CSV = "characterization.csv"
CHARACTERIZATION_JSON = "characterization_summary.json"
SWEEP_CSV = "threshold_sweep.csv"
LINDBLAD_CSV = "lindblad_efficiency.csv"
EXCLUSION_CSV = "exclusion.csv"
FAMILY_CSV = "exclusion_family.csv"
REPORT_COUNTS_CSV = "counts_background.csv"
REPORT_TRADEOFF_CSV = "threshold_tradeoff.csv"
REPORT_EFFICIENCY_CSV = "efficiency_vs_flux.csv"
REPORT_ENVELOPE_CSV = "exclusion_envelope.csv"


def _g(x: float) -> str:
    return f"{x:.17g}"


def _header(cfg: RunConfig) -> str:
    return f"# fluxcount {ARTIFACT_VERSION} config={cfg.digest}\n"


def _write_text(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def load_manifest(out_dir: Path) -> dict:
    path = Path(out_dir) / MANIFEST_JSON
    if path.is_file():
        return json.loads(path.read_text())
    return {
        "artifact_version": ARTIFACT_VERSION,
        "config": None,
        "seed": None,
        "stages": {},
        "notes": {},
    }


def _record_stage(
    out_dir: Path,
    cfg: RunConfig,
    stage: str,
    wall_s: float,
    outputs: list[Path],
    notes: dict | None = None,
) -> None:
    manifest = load_manifest(out_dir)
    manifest["artifact_version"] = ARTIFACT_VERSION
    manifest["config"] = cfg.digest
    manifest["seed"] = cfg.scan.seed
    manifest["stages"][stage] = {
        "wall_time_s": round(wall_s, 6),
        "outputs": {p.name: _sha256(p) for p in outputs},
    }
    if notes:
        manifest["notes"][stage] = notes
    _write_text(
        Path(out_dir) / MANIFEST_JSON,
        json.dumps(manifest, sort_keys=True, indent=2) + "\n",
    )


def verify_manifest(out_dir: Path) -> list[str]:
    """Names of recorded outputs whose digest no longer matches, or missing."""
    out_dir = Path(out_dir)
    manifest = load_manifest(out_dir)
    bad = []
    for stage, entry in manifest["stages"].items():
        for name, digest in entry["outputs"].items():
            path = out_dir / name
            if not path.is_file() or _sha256(path) != digest:
                bad.append(name)
    return bad


def duty_cycle_accounting(cfg: RunConfig) -> dict:
    """Cycle-time bookkeeping for one detection cycle and one tuning point.

    The quoted per-point measurement time implies a shorter cycle than the
    component sum; all derived numbers are reported and none is forced to
    agree (see the inconsistency flag).
    """
    d = cfg.device
    readout_s = d.t_m * d.n_parity
    cycle_s = d.t_c + readout_s
    protocol_s = cycle_s * cfg.scan.n_meas
    quoted_s = 10.65
    return {
        "cycle_time_s": cycle_s,
        "readout_time_s": readout_s,
        "readout_fraction": readout_s / cycle_s,
        "protocol_time_per_point_s": protocol_s,
        "quoted_measurement_time_per_point_s": quoted_s,
        "implied_cycle_time_s": quoted_s / cfg.scan.n_meas if cfg.scan.n_meas else None,
        "consistent": abs(protocol_s - quoted_s) < 1e-9,
    }


def _scan_phi_values(cfg: RunConfig) -> np.ndarray:
    table = cfg.tuning.flux_table
    if table.shape[0] == 0:
        raise ParameterError("tuning model has an empty flux_table")
    return np.linspace(table[0, 0], table[-1, 0], cfg.scan.n_flux_points)


def _sample_point(cfg: RunConfig, seed: int, index: int, phi: float) -> tuple:
    """(phi, freq_hz, n_obs) for one flux point, on its own child stream."""
    fp = interpolate_flux_params(cfg.tuning, phi)
    params = cfg.device.with_t1_s(fp.t1_s)
    model = build_model(params, t1_s=fp.t1_s)
    rng = child_rng(seed, STAGE_SCAN, index)
    n = cfg.scan.n_meas
    storage = rng.random(n) < params.nbar_s
    transmon = rng.random(n) < params.nbar_q
    bits = sample_sequences(model, storage, transmon, params.n_parity, rng)
    lp0, lp1 = backward_log(model, bits)
    n_obs = int(np.sum(lp1 - lp0 >= math.log(cfg.lambda_thresh)))
    return phi, fp.omega_s / (2.0 * math.pi), n_obs, fp


def _plant_counts(cfg: RunConfig, seed: int, freqs: np.ndarray, fps: list) -> np.ndarray:
    """Poisson signal counts for the two tunings nearest the planted mass."""
    extra = np.zeros(len(freqs), dtype=int)
    planted = cfg.scan.planted
    if planted is None or len(freqs) == 0:
        return extra
    model = SignalModel()
    order = np.argsort(np.abs(freqs - planted.mass_hz))
    rng = child_rng(seed, STAGE_SCAN, 2**31)
    for i in sorted(order[: min(2, len(freqs))]):
        shape = lineshape_value(
            cfg.analysis.lineshape,
            freqs[i] - planted.mass_hz,
            planted.mass_hz,
            model.q_dm,
        )
        if shape <= 0.0:
            continue
        scan_bin = ScanBin(
            phi_ext=0.0,
            freq_hz=float(freqs[i]),
            n_meas=cfg.scan.n_meas,
            n_obs=0,
            eta=fps[i].eta,
            t1_s=fps[i].t1_s,
            q_s=fps[i].omega_s * fps[i].t1_s,
        )
        lam = signal_counts(planted.epsilon, scan_bin, model) * shape
        extra[i] = int(rng.poisson(lam))
    return extra


def stage_simulate_scan(cfg: RunConfig, out_dir: Path, threads: int = 1) -> Path:
    """Sample the no-signal scan (plus any planted candidate) and write it."""
    seed = cfg.require_seed("simulate-scan")
    t0 = time.perf_counter()
    phis = _scan_phi_values(cfg)
    if phis.size == 0:
        warnings.warn("scan.n_flux_points is 0: writing an empty scan dataset")
        rows = []
    else:
        work = [(i, float(p)) for i, p in enumerate(phis)]
        if threads > 1:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                rows = list(
                    pool.map(lambda iw: _sample_point(cfg, seed, iw[0], iw[1]), work)
                )
        else:
            rows = [_sample_point(cfg, seed, i, p) for i, p in work]

    freqs = np.array([r[1] for r in rows])
    fps = [r[3] for r in rows]
    extra = _plant_counts(cfg, seed, freqs, fps)

    lines = [_header(cfg).rstrip("\n"), "phi_ext,freq_hz,n_meas,n_obs"]
    for (phi, freq, n_obs, _), add in zip(rows, extra):
        n_total = min(n_obs + int(add), cfg.scan.n_meas)
        lines.append(f"{_g(phi)},{_g(freq)},{cfg.scan.n_meas},{n_total}")
    out = Path(out_dir) / SCAN_CSV
    _write_text(out, "\n".join(lines) + "\n")
    _record_stage(
        out_dir, cfg, "simulate-scan", time.perf_counter() - t0, [out],
        notes=duty_cycle_accounting(cfg),
    )
    return out


def read_scan_csv(path: Path) -> list[tuple[float, float, int, int]]:
    path = Path(path)
    if not path.is_file():
        raise DependencyError(f"scan dataset not found: {path}")
    rows = []
    for line in path.read_text().splitlines():
        if not line or line.startswith("#") or line.startswith("phi_ext"):
            continue
        phi, freq, n_meas, n_obs = line.split(",")
        rows.append((float(phi), float(freq), int(n_meas), int(n_obs)))
    return rows


def stage_characterize(cfg: RunConfig, out_dir: Path, threads: int = 1) -> list[Path]:
    seed = cfg.require_seed("characterize")
    t0 = time.perf_counter()
    result = run_characterization(
        cfg.device,
        list(cfg.characterize.injections),
        cfg.characterize.trials,
        seed,
        lambda_thresh=cfg.lambda_thresh,
    )
    sweep = threshold_sweep(
        cfg.device,
        cfg.characterize.probe_injection,
        sorted(cfg.characterize.sweep_thresholds),
        cfg.characterize.trials,
        seed,
    )
    out_points = Path(out_dir) / CHARACTERIZATION_CSV
    out_json = Path(out_dir) / CHARACTERIZATION_JSON
    out_sweep = Path(out_dir) / SWEEP_CSV
    _write_text(out_points, _header(cfg) + points_to_csv(result))
    summary = summary_to_json_dict(result, cfg.lambda_thresh)
    summary["artifact_version"] = ARTIFACT_VERSION
    summary["config"] = cfg.digest
    _write_text(out_json, json.dumps(summary, sort_keys=True, indent=2) + "\n")
    _write_text(out_sweep, _header(cfg) + sweep_to_csv(sweep))
    outs = [out_points, out_json, out_sweep]
    _record_stage(out_dir, cfg, "characterize", time.perf_counter() - t0, outs)
    return outs


def stage_lindblad(cfg: RunConfig, out_dir: Path, threads: int = 1) -> Path:
    seed = cfg.require_seed("lindblad-eff")
    t0 = time.perf_counter()
    lines = [_header(cfg).rstrip("\n"), "mode,efficiency,stderr,trials"]
    for unit, mode in enumerate(cfg.lindblad.modes):
        est = simulate_parity_protocol(
            cfg.device,
            with_decoherence=(mode == "decoherent"),
            rng=child_rng(seed, STAGE_LINDBLAD, unit),
            trials=cfg.lindblad.trials,
        )
        lines.append(f"{mode},{_g(est.efficiency)},{_g(est.stderr)},{est.trials}")
    out = Path(out_dir) / LINDBLAD_CSV
    _write_text(out, "\n".join(lines) + "\n")
    _record_stage(out_dir, cfg, "lindblad-eff", time.perf_counter() - t0, [out])
    return out


def _bins_from_rows(cfg: RunConfig, rows: list) -> ScanDataset:
    bins = []
    for phi, freq, n_meas, n_obs in rows:
        fp = interpolate_flux_params(cfg.tuning, phi)
        bins.append(
            ScanBin(
                phi_ext=phi,
                freq_hz=freq,
                n_meas=n_meas,
                n_obs=n_obs,
                eta=fp.eta,
                t1_s=fp.t1_s,
                q_s=fp.omega_s * fp.t1_s,
            )
        )
    bins.sort(key=lambda b: b.freq_hz)
    return ScanDataset(tuple(bins))


def stage_exclude(cfg: RunConfig, out_dir: Path, threads: int = 1) -> list[Path]:
    t0 = time.perf_counter()
    scan_path = (
        Path(cfg.paths.scan_csv) if cfg.paths.scan_csv else Path(out_dir) / SCAN_CSV
    )
    rows = read_scan_csv(scan_path)
    out_env = Path(out_dir) / EXCLUSION_CSV
    out_fam = Path(out_dir) / FAMILY_CSV
    if not rows:
        warnings.warn("scan dataset is empty: writing empty exclusion outputs")
        _write_text(out_env, _header(cfg) + "freq_hz,n_back,epsilon95_envelope\n")
        _write_text(out_fam, _header(cfg) + "center_freq_hz,mass_hz,epsilon\n")
        outs = [out_env, out_fam]
        _record_stage(out_dir, cfg, "exclude", time.perf_counter() - t0, outs)
        return outs

    dataset = _bins_from_rows(cfg, rows)
    counts = np.array([b.n_obs for b in dataset.bins], dtype=float)
    smoothed = savgol_background(counts, cfg.analysis.window, cfg.analysis.order)
    n_back = np.maximum(smoothed, 0.0)

    model = SignalModel()
    mc = cfg.analysis.quadrature == "monte-carlo"
    seed = cfg.require_seed("exclude") if mc else None

    def solve(i: int) -> float:
        rng = child_rng(seed, STAGE_SCAN, 2**32 + i) if mc else None
        return solve_epsilon_95(
            dataset.bins[i],
            model,
            float(n_back[i]),
            n_nodes=cfg.analysis.nodes,
            mc_samples=cfg.analysis.mc_samples if mc else None,
            rng=rng,
        )
    indices = range(len(dataset.bins))
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            limits = list(pool.map(solve, indices))
    else:
        limits = [solve(i) for i in indices]

    freqs = [b.freq_hz for b in dataset.bins]
    curve = lineshape_envelope(
        list(zip(freqs, limits)),
        kind=cfg.analysis.lineshape,
        q_dm=model.q_dm,
    )
    lines = [_header(cfg).rstrip("\n"), "freq_hz,n_back,epsilon95_envelope"]
    for f, nb, env in zip(freqs, n_back, curve.envelope):
        lines.append(f"{_g(f)},{_g(nb)},{_g(env)}")
    _write_text(out_env, "\n".join(lines) + "\n")

    fam_lines = [_header(cfg).rstrip("\n"), "center_freq_hz,mass_hz,epsilon"]
    for center, values in curve.family:
        for m_hz, eps in zip(curve.mass_grid_hz, values):
            fam_lines.append(f"{_g(center)},{_g(m_hz)},{_g(eps)}")
    _write_text(out_fam, "\n".join(fam_lines) + "\n")
    outs = [out_env, out_fam]
    _record_stage(out_dir, cfg, "exclude", time.perf_counter() - t0, outs)
    return outs


def _require(path: Path, what: str) -> Path:
    if not path.is_file():
        raise DependencyError(f"{what} not found: {path} (run the producing stage first)")
    return path


def stage_report(cfg: RunConfig, out_dir: Path, threads: int = 1) -> list[Path]:
    """Assemble figure-ready data files from the upstream stage outputs."""
    t0 = time.perf_counter()
    out_dir = Path(out_dir)
    scan_path = _require(out_dir / SCAN_CSV, "scan dataset")
    excl_path = _require(out_dir / EXCLUSION_CSV, "exclusion envelope file")
    sweep_path = _require(out_dir / SWEEP_CSV, "threshold sweep file")

    scan_rows = read_scan_csv(scan_path)
    excl_rows = [
        line.split(",")
        for line in excl_path.read_text().splitlines()
        if line and not line.startswith("#") and not line.startswith("freq_hz")
    ]
    if len(excl_rows) != len(scan_rows):
        raise DependencyError(
            f"exclusion file {excl_path} has {len(excl_rows)} rows but the scan "
            f"has {len(scan_rows)}; rerun the exclude stage"
        )

    counts = [_header(cfg).rstrip("\n"), "freq_hz,n_obs,n_back"]
    for (phi, freq, n_meas, n_obs), erow in zip(scan_rows, excl_rows):
        counts.append(f"{_g(freq)},{n_obs},{erow[1]}")
    out_counts = out_dir / REPORT_COUNTS_CSV
    _write_text(out_counts, "\n".join(counts) + "\n")

    out_tradeoff = out_dir / REPORT_TRADEOFF_CSV
    _write_text(out_tradeoff, sweep_path.read_text())

    eff = [_header(cfg).rstrip("\n"), "phi_ext,freq_hz,eta"]
    for phi, freq, _, _ in scan_rows:
        fp = interpolate_flux_params(cfg.tuning, phi)
        eff.append(f"{_g(phi)},{_g(freq)},{_g(fp.eta)}")
    out_eff = out_dir / REPORT_EFFICIENCY_CSV
    _write_text(out_eff, "\n".join(eff) + "\n")

    env = [_header(cfg).rstrip("\n"), "mass_hz,epsilon95"]
    for erow in excl_rows:
        env.append(f"{erow[0]},{erow[2]}")
    out_env = out_dir / REPORT_ENVELOPE_CSV
    _write_text(out_env, "\n".join(env) + "\n")

    outs = [out_counts, out_tradeoff, out_eff, out_env]
    _record_stage(out_dir, cfg, "report", time.perf_counter() - t0, outs)
    return outs
