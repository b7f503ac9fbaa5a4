"""Run configuration: TOML loading, schema validation, environment overrides.

One structured-text file configures every pipeline stage. Unknown keys are
rejected, every diagnostic carries the dotted field path, and the resolved
configuration hashes to a short digest that all output files embed.

Environment overrides are deliberately narrow: FLUXCOUNT_SEED replaces
scan.seed and FLUXCOUNT_OUT replaces paths.out; nothing else is
overridable outside the file.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
import os
from dataclasses import dataclass
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

from . import __version__ as ARTIFACT_VERSION
from .device import (
    DeviceParams,
    TuningModel,
    default_device_params,
    default_tuning_model,
)
from .errors import ConfigError

__all__ = [
    "ARTIFACT_VERSION",
    "RunConfig",
    "load_config",
    "default_config_toml",
    "config_hash",
]

ENV_SEED = "FLUXCOUNT_SEED"
ENV_OUT = "FLUXCOUNT_OUT"

_SCAN_KEYS = {"n_flux_points", "n_meas", "seed", "planted"}
_PLANTED_KEYS = {"epsilon", "mass_hz"}
_ANALYSIS_KEYS = {
    "window",
    "order",
    "lambda_thresh",
    "quadrature",
    "nodes",
    "mc_samples",
    "lineshape",
}
_CHARACTERIZE_KEYS = {"injections", "trials", "sweep_thresholds", "probe_injection"}
_LINDBLAD_KEYS = {"trials", "modes"}
_PATHS_KEYS = {"out", "scan_csv"}
_TUNING_KEYS = {"f_top_hz", "f_bottom_hz", "phi_edge", "g_hz", "n_table_rows"}
_TOP_KEYS = {
    "scan",
    "analysis",
    "characterize",
    "lindblad",
    "paths",
    "device",
    "tuning",
}

_QUADRATURES = ("gauss-hermite", "monte-carlo")
_LINESHAPES = ("maxwellian", "lorentzian", "tophat")
_LINDBLAD_MODES = ("ideal", "decoherent")


def _expect(cond: bool, path: str, message: str, value) -> None:
    if not cond:
        raise ConfigError(f"{path}: {message}, got {value!r}")


def _as_int(value, path: str, minimum: int | None = None) -> int:
    _expect(
        isinstance(value, int) and not isinstance(value, bool),
        path,
        "expected an integer",
        value,
    )
    if minimum is not None:
        _expect(value >= minimum, path, f"must be >= {minimum}", value)
    return value


def _as_number(value, path: str, positive: bool = False) -> float:
    _expect(
        isinstance(value, (int, float)) and not isinstance(value, bool),
        path,
        "expected a number",
        value,
    )
    value = float(value)
    _expect(math.isfinite(value), path, "must be finite", value)
    if positive:
        _expect(value > 0.0, path, "must be positive", value)
    return value


def _check_keys(table: dict, allowed: set, path: str) -> None:
    unknown = set(table) - allowed
    if unknown:
        key = sorted(unknown)[0]
        raise ConfigError(
            f"{path}.{key}: unknown key (allowed: {', '.join(sorted(allowed))})"
        )


@dataclass(frozen=True)
class PlantedSignal:
    epsilon: float
    mass_hz: float


@dataclass(frozen=True)
class ScanConfig:
    n_flux_points: int = 200
    n_meas: int = 20000
    seed: int | None = None
    planted: PlantedSignal | None = None


@dataclass(frozen=True)
class AnalysisConfig:
    window: int = 112
    order: int = 4
    lambda_thresh: float | None = None  # None defers to the device default
    quadrature: str = "gauss-hermite"
    nodes: int = 7
    mc_samples: int = 20000
    lineshape: str = "maxwellian"


@dataclass(frozen=True)
class CharacterizeConfig:
    injections: tuple[float, ...] = (0.0, 0.01, 0.02, 0.05, 0.1)
    trials: int = 4000
    sweep_thresholds: tuple[float, ...] = (125.0, 177.0, 250.0, 354.0, 500.0, 707.0, 1000.0)
    probe_injection: float = 0.1


@dataclass(frozen=True)
class LindbladConfig:
    trials: int = 2000
    modes: tuple[str, ...] = ("ideal", "decoherent")


@dataclass(frozen=True)
class PathsConfig:
    out: str = "out"
    scan_csv: str | None = None


@dataclass(frozen=True)
class RunConfig:
    device: DeviceParams
    tuning: TuningModel
    scan: ScanConfig
    analysis: AnalysisConfig
    characterize: CharacterizeConfig
    lindblad: LindbladConfig
    paths: PathsConfig
    resolved: dict
    digest: str

    @property
    def lambda_thresh(self) -> float:
        if self.analysis.lambda_thresh is not None:
            return self.analysis.lambda_thresh
        return self.device.lambda_thresh

    def require_seed(self, stage: str) -> int:
        if self.scan.seed is None:
            raise ConfigError(
                f"scan.seed: required for the stochastic '{stage}' stage "
                f"(set it in the config or via {ENV_SEED})"
            )
        return self.scan.seed


def config_hash(resolved: dict) -> str:
    canon = json.dumps(resolved, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()[:12]


def _parse_scan(table: dict) -> ScanConfig:
    _check_keys(table, _SCAN_KEYS, "scan")
    n_flux = _as_int(table.get("n_flux_points", 200), "scan.n_flux_points", minimum=0)
    n_meas = _as_int(table.get("n_meas", 20000), "scan.n_meas", minimum=1)
    seed = table.get("seed")
    if seed is not None:
        seed = _as_int(seed, "scan.seed", minimum=0)
        _expect(seed < 2**64, "scan.seed", "must fit in 64 bits", seed)
    planted = None
    if "planted" in table:
        sub = table["planted"]
        _expect(isinstance(sub, dict), "scan.planted", "expected a table", sub)
        _check_keys(sub, _PLANTED_KEYS, "scan.planted")
        _expect("epsilon" in sub, "scan.planted.epsilon", "required key missing", None)
        _expect("mass_hz" in sub, "scan.planted.mass_hz", "required key missing", None)
        planted = PlantedSignal(
            epsilon=_as_number(sub["epsilon"], "scan.planted.epsilon", positive=True),
            mass_hz=_as_number(sub["mass_hz"], "scan.planted.mass_hz", positive=True),
        )
    return ScanConfig(n_flux, n_meas, seed, planted)


def _parse_analysis(table: dict) -> AnalysisConfig:
    _check_keys(table, _ANALYSIS_KEYS, "analysis")
    window = _as_int(table.get("window", 112), "analysis.window", minimum=1)
    order = _as_int(table.get("order", 4), "analysis.order", minimum=0)
    _expect(order < window, "analysis.order", f"must be < window ({window})", order)
    lam = table.get("lambda_thresh")
    if lam is not None:
        lam = _as_number(lam, "analysis.lambda_thresh", positive=True)
    quad = table.get("quadrature", "gauss-hermite")
    _expect(quad in _QUADRATURES, "analysis.quadrature", f"expected one of {_QUADRATURES}", quad)
    nodes = _as_int(table.get("nodes", 7), "analysis.nodes", minimum=1)
    mc = _as_int(table.get("mc_samples", 20000), "analysis.mc_samples", minimum=1)
    shape = table.get("lineshape", "maxwellian")
    _expect(shape in _LINESHAPES, "analysis.lineshape", f"expected one of {_LINESHAPES}", shape)
    return AnalysisConfig(window, order, lam, quad, nodes, mc, shape)


def _parse_characterize(table: dict) -> CharacterizeConfig:
    _check_keys(table, _CHARACTERIZE_KEYS, "characterize")
    base = CharacterizeConfig()
    inj = table.get("injections", list(base.injections))
    _expect(isinstance(inj, list) and inj, "characterize.injections", "expected a non-empty list", inj)
    inj = tuple(
        _as_number(v, f"characterize.injections[{i}]") for i, v in enumerate(inj)
    )
    trials = _as_int(table.get("trials", base.trials), "characterize.trials", minimum=100)
    sweep = table.get("sweep_thresholds", list(base.sweep_thresholds))
    _expect(
        isinstance(sweep, list) and sweep,
        "characterize.sweep_thresholds",
        "expected a non-empty list",
        sweep,
    )
    sweep = tuple(
        _as_number(v, f"characterize.sweep_thresholds[{i}]", positive=True)
        for i, v in enumerate(sweep)
    )
    probe = _as_number(
        table.get("probe_injection", base.probe_injection),
        "characterize.probe_injection",
        positive=True,
    )
    return CharacterizeConfig(inj, trials, sweep, probe)


def _parse_lindblad(table: dict) -> LindbladConfig:
    _check_keys(table, _LINDBLAD_KEYS, "lindblad")
    base = LindbladConfig()
    trials = _as_int(table.get("trials", base.trials), "lindblad.trials", minimum=1)
    modes = table.get("modes", list(base.modes))
    _expect(isinstance(modes, list) and modes, "lindblad.modes", "expected a non-empty list", modes)
    for i, m in enumerate(modes):
        _expect(m in _LINDBLAD_MODES, f"lindblad.modes[{i}]", f"expected one of {_LINDBLAD_MODES}", m)
    return LindbladConfig(trials, tuple(modes))


def _parse_paths(table: dict, base_dir: Path) -> PathsConfig:
    _check_keys(table, _PATHS_KEYS, "paths")
    out = table.get("out", "out")
    _expect(isinstance(out, str) and out, "paths.out", "expected a non-empty string", out)
    scan_csv = table.get("scan_csv")
    if scan_csv is not None:
        _expect(isinstance(scan_csv, str), "paths.scan_csv", "expected a string", scan_csv)
        resolved = (base_dir / scan_csv).resolve()
        if not resolved.is_file():
            raise ConfigError(f"paths.scan_csv: referenced file does not exist: {resolved}")
        scan_csv = str(resolved)
    return PathsConfig(out, scan_csv)


def _parse_device(table: dict) -> DeviceParams:
    base = default_device_params()
    field_names = {f.name for f in dataclasses.fields(DeviceParams)}
    overrides = {}
    for key, value in table.items():
        if key not in field_names:
            raise ConfigError(
                f"device.{key}: unknown device field "
                f"(allowed: {', '.join(sorted(field_names))})"
            )
        if key == "n_parity":
            overrides[key] = _as_int(value, f"device.{key}", minimum=1)
        else:
            overrides[key] = _as_number(value, f"device.{key}")
    try:
        return dataclasses.replace(base, **overrides)
    except ValueError as exc:
        raise ConfigError(f"device: {exc}") from exc


def _parse_tuning(table: dict) -> TuningModel:
    _check_keys(table, _TUNING_KEYS, "tuning")
    from .device import fit_tuning_model, build_flux_table
    import numpy as np

    kwargs = {}
    for key in ("f_top_hz", "f_bottom_hz", "phi_edge"):
        if key in table:
            kwargs[key] = _as_number(table[key], f"tuning.{key}", positive=True)
    if "g_hz" in table:
        kwargs["g"] = 2.0 * math.pi * _as_number(table["g_hz"], "tuning.g_hz", positive=True)
    rows = _as_int(table.get("n_table_rows", 17), "tuning.n_table_rows", minimum=2)
    if not kwargs and rows == 17:
        return default_tuning_model()
    try:
        base = fit_tuning_model(**kwargs)
        phis = np.linspace(-0.4807, 0.0, rows)
        return dataclasses.replace(base, flux_table=build_flux_table(base, phis))
    except ValueError as exc:
        raise ConfigError(f"tuning: {exc}") from exc


def _resolved_dict(
    device: DeviceParams,
    scan: ScanConfig,
    analysis: AnalysisConfig,
    character: CharacterizeConfig,
    lind: LindbladConfig,
    paths: PathsConfig,
    tuning_table: dict,
) -> dict:
    planted = None
    if scan.planted is not None:
        planted = {"epsilon": scan.planted.epsilon, "mass_hz": scan.planted.mass_hz}
    return {
        "artifact_version": ARTIFACT_VERSION,
        "device": dataclasses.asdict(device),
        "tuning": dict(tuning_table),
        "scan": {
            "n_flux_points": scan.n_flux_points,
            "n_meas": scan.n_meas,
            "seed": scan.seed,
            "planted": planted,
        },
        "analysis": dataclasses.asdict(analysis),
        "characterize": {
            "injections": list(character.injections),
            "trials": character.trials,
            "sweep_thresholds": list(character.sweep_thresholds),
            "probe_injection": character.probe_injection,
        },
        "lindblad": {"trials": lind.trials, "modes": list(lind.modes)},
        # paths are deliberately excluded: the digest identifies what was
        # computed, not where the outputs landed
    }


def load_config(path: str | Path, *, seed_override: int | None = None,
                out_override: str | None = None) -> RunConfig:
    """Parse and validate a TOML run configuration.

    Precedence for the two overridable settings, highest first: explicit
    function/CLI override, environment variable, config file, default.
    """
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file does not exist: {path}")
    try:
        raw = tomllib.loads(path.read_text())
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: invalid TOML: {exc}") from exc
    _check_keys(raw, _TOP_KEYS, "config")
    for key in _TOP_KEYS & set(raw):
        _expect(isinstance(raw[key], dict), key, "expected a table", raw[key])

    scan = _parse_scan(raw.get("scan", {}))
    analysis = _parse_analysis(raw.get("analysis", {}))
    character = _parse_characterize(raw.get("characterize", {}))
    lind = _parse_lindblad(raw.get("lindblad", {}))
    paths = _parse_paths(raw.get("paths", {}), path.parent)
    device = _parse_device(raw.get("device", {}))
    tuning = _parse_tuning(raw.get("tuning", {}))

    env_seed = os.environ.get(ENV_SEED)
    if seed_override is not None:
        scan = dataclasses.replace(scan, seed=seed_override)
    elif env_seed is not None:
        try:
            scan = dataclasses.replace(scan, seed=int(env_seed))
        except ValueError as exc:
            raise ConfigError(f"{ENV_SEED}: expected an integer, got {env_seed!r}") from exc
        _expect(scan.seed >= 0, ENV_SEED, "must be non-negative", scan.seed)

    env_out = os.environ.get(ENV_OUT)
    if out_override is not None:
        paths = dataclasses.replace(paths, out=out_override)
    elif env_out:
        paths = dataclasses.replace(paths, out=env_out)

    resolved = _resolved_dict(
        device, scan, analysis, character, lind, paths, raw.get("tuning", {})
    )
    return RunConfig(
        device=device,
        tuning=tuning,
        scan=scan,
        analysis=analysis,
        characterize=character,
        lindblad=lind,
        paths=paths,
        resolved=resolved,
        digest=config_hash(resolved),
    )


def default_config_toml(seed: int = 42) -> str:
    """A complete, commented configuration with package defaults."""
    return f"""\
# fluxcount run configuration

[scan]
n_flux_points = 200
n_meas = 20000
seed = {seed}
# [scan.planted]          # optional synthetic signal
# epsilon = 4.0e-14
# mass_hz = 5.68e9

[analysis]
window = 112              # normalized to the nearest odd length
order = 4
quadrature = "gauss-hermite"
nodes = 7
lineshape = "maxwellian"  # or "lorentzian" / "tophat"

[characterize]
injections = [0.0, 0.01, 0.02, 0.05, 0.1]
trials = 4000
sweep_thresholds = [125.0, 177.0, 250.0, 354.0, 500.0, 707.0, 1000.0]
probe_injection = 0.1

[lindblad]
trials = 2000
modes = ["ideal", "decoherent"]

[paths]
out = "out"
"""
