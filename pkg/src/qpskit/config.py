"""Pipeline configuration: JSON file with unit-suffixed keys, validated up front.

Every physical quantity carries its unit in the key name (``position_nm``,
``sigma_f_MHz``, ...). ``load_config`` collects every problem it finds and
raises one ConfigInvalid listing them by field path, so a user fixes a
config in one pass.

Minimal file::

    {"rng_seed": 0}

which simulates the default three-sensor array with 16 random defects.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import (
    D_PAR,
    D_PERP,
    EPSILON_DIAMOND,
    NVSensor,
    PhysicsConstants,
    SensorFrame,
    sensor_centroid,
    triangle_array,
)
from .errors import ConfigInvalid
from .events import DetectorConfig
from .qps import GridSpec, SolverConfig
from .telegraph import RESPONSES, BackgroundModel, NoiseModel, PointDefect, SimConfig, random_defects

SCHEMA_VERSION = 1
OPERATING_POINTS = ("auto", "truth", "config")


@dataclass
class PipelineConfig:
    raw: dict
    sensors: list
    defects: list
    sim: SimConfig
    detector: DetectorConfig
    solver: SolverConfig
    operating_point: str
    grid: GridSpec
    rng_seed: int
    output_dir: Path
    constants: PhysicsConstants = field(default_factory=PhysicsConstants)

    @property
    def noise(self) -> NoiseModel:
        return self.sim.noise

    def digest(self) -> str:
        return config_hash(self.raw)


def config_hash(raw: dict) -> str:
    blob = json.dumps(raw, sort_keys=True, separators=(",", ":"), allow_nan=False)
    return hashlib.sha256(blob.encode()).hexdigest()


class _Checker:
    """Collects (path, message) problems while reading a nested dict."""

    def __init__(self):
        self.problems = []

    def fail(self, path, msg):
        self.problems.append((path, msg))

    def section(self, d, key, allowed, path=""):
        full = f"{path}.{key}" if path else key
        sub = d.get(key, {})
        if not isinstance(sub, dict):
            self.fail(full, "must be an object")
            return {}, full
        self.unknown(sub, allowed, full)
        return sub, full

    def unknown(self, d, allowed, path):
        for k in d:
            if k not in allowed:
                self.fail(f"{path}.{k}" if path else k, "unknown key")

    def number(self, d, key, path, default, lo=None, hi=None, lo_open=False, hi_open=False, integer=False):
        full = f"{path}.{key}" if path else key
        v = d.get(key, default)
        if isinstance(v, bool) or not isinstance(v, (int, float)):
            self.fail(full, f"must be a number, got {v!r}")
            return default
        if integer and int(v) != v:
            self.fail(full, f"must be an integer, got {v!r}")
            return default
        if not np.isfinite(v):
            self.fail(full, "must be finite")
            return default
        if lo is not None and (v <= lo if lo_open else v < lo):
            self.fail(full, f"must be {'>' if lo_open else '>='} {lo}, got {v!r}")
        if hi is not None and (v >= hi if hi_open else v > hi):
            self.fail(full, f"must be {'<' if hi_open else '<='} {hi}, got {v!r}")
        return int(v) if integer else float(v)

    def vector(self, d, key, path, default, length=3):
        full = f"{path}.{key}" if path else key
        v = d.get(key, default)
        ok = (isinstance(v, list) and len(v) == length
              and all(isinstance(x, (int, float)) and not isinstance(x, bool) and np.isfinite(x) for x in v))
        if not ok:
            self.fail(full, f"must be a list of {length} finite numbers, got {v!r}")
            return None if default is None else np.array(default, dtype=float)
        return np.array(v, dtype=float)

    def boolean(self, d, key, path, default):
        full = f"{path}.{key}" if path else key
        v = d.get(key, default)
        if not isinstance(v, bool):
            self.fail(full, f"must be true or false, got {v!r}")
            return default
        return v

    def choice(self, d, key, path, default, options):
        full = f"{path}.{key}" if path else key
        v = d.get(key, default)
        if v not in options:
            self.fail(full, f"must be one of {list(options)}, got {v!r}")
            return default
        return v


TOP_KEYS = {"schema_version", "rng_seed", "output_dir", "physics", "sensors", "sensor_array", "defects",
            "scenario", "simulation", "noise", "background", "detector", "solver", "grid"}
SENSOR_KEYS = {"id", "position_nm", "z_axis", "x_reference", "strain_perp_V_per_cm",
               "d_par_MHz_per_V_per_cm", "d_perp_MHz_per_V_per_cm"}
DEFECT_KEYS = {"id", "position_nm", "flip_prob", "charge_e", "initial_occupied"}


def _sensors(c: _Checker, raw: dict):
    if "sensors" in raw and "sensor_array" in raw:
        c.fail("sensors", "give either sensors or sensor_array, not both")
    if "sensors" not in raw:
        arr, path = c.section(raw, "sensor_array", {"spacing_nm", "center_nm", "strain_perp_V_per_cm"})
        spacing = c.number(arr, "spacing_nm", path, 200.0, lo=0.0, lo_open=True)
        center = c.vector(arr, "center_nm", path, [0.0, 0.0, 0.0])
        strain = c.number(arr, "strain_perp_V_per_cm", path, 1000.0 / D_PERP, lo=0.0, lo_open=True)
        try:
            return triangle_array(spacing, center, strain_magnitude=strain)
        except ValueError as exc:
            c.fail(path, str(exc))
            return []
    items = raw["sensors"]
    if not isinstance(items, list) or not items:
        c.fail("sensors", "must be a non-empty list")
        return []
    out = []
    for k, s in enumerate(items):
        path = f"sensors[{k}]"
        if not isinstance(s, dict):
            c.fail(path, "must be an object")
            continue
        c.unknown(s, SENSOR_KEYS, path)
        sid = c.number(s, "id", path, k, lo=0, integer=True)
        pos = c.vector(s, "position_nm", path, None)
        z = c.vector(s, "z_axis", path, None)
        ref = c.vector(s, "x_reference", path, [0.0, 0.0, 1.0])
        strain = c.vector(s, "strain_perp_V_per_cm", path, None, length=2)
        dpar = c.number(s, "d_par_MHz_per_V_per_cm", path, D_PAR, lo=0.0, lo_open=True)
        dperp = c.number(s, "d_perp_MHz_per_V_per_cm", path, D_PERP, lo=0.0, lo_open=True)
        if pos is None or z is None or strain is None:
            continue
        if np.linalg.norm(z) == 0:
            c.fail(f"{path}.z_axis", "must be non-zero")
            continue
        try:
            out.append(NVSensor(sid, pos, SensorFrame.from_z(z, ref), strain, dpar, dperp))
        except ValueError as exc:
            c.fail(path, str(exc))
    return out


def _defects(c: _Checker, raw: dict, sensors, seed: int):
    if "defects" in raw and "scenario" in raw:
        c.fail("defects", "give either defects or scenario, not both")
    if "defects" in raw:
        items = raw["defects"]
        if not isinstance(items, list):
            c.fail("defects", "must be a list")
            return []
        out = []
        for k, d in enumerate(items):
            path = f"defects[{k}]"
            if not isinstance(d, dict):
                c.fail(path, "must be an object")
                continue
            c.unknown(d, DEFECT_KEYS, path)
            did = c.number(d, "id", path, k, lo=0, integer=True)
            pos = c.vector(d, "position_nm", path, None)
            p = c.number(d, "flip_prob", path, 0.02, lo=0.0, hi=1.0)
            q = c.number(d, "charge_e", path, -1.0)
            init = c.boolean(d, "initial_occupied", path, False)
            if pos is not None:
                out.append(PointDefect(did, pos, p, q, init))
        return out
    sc, path = c.section(raw, "scenario", {"n_defects", "radius_nm", "exclusion_nm", "flip_prob_range", "charge_e"})
    n = c.number(sc, "n_defects", path, 16, lo=0, integer=True)
    radius = c.number(sc, "radius_nm", path, 1000.0, lo=0.0, lo_open=True)
    excl = c.number(sc, "exclusion_nm", path, 20.0, lo=0.0)
    fr = c.vector(sc, "flip_prob_range", path, [0.005, 0.05], length=2)
    q = c.number(sc, "charge_e", path, -1.0)
    if fr is not None and not (0 <= fr[0] <= fr[1] <= 1):
        c.fail(f"{path}.flip_prob_range", "must satisfy 0 <= low <= high <= 1")
    if not sensors or c.problems:
        return []
    rng = np.random.default_rng(np.random.SeedSequence([seed, 1]))
    return random_defects(sensors, n, radius, excl, tuple(fr), q, rng)


def parse_config(raw: dict, seed_override: int | None = None, base_dir: Path | None = None) -> PipelineConfig:
    """Validate a decoded config dict; raises ConfigInvalid listing every problem."""
    c = _Checker()
    if not isinstance(raw, dict):
        raise ConfigInvalid([("", "top level must be an object")])
    if seed_override is not None:
        raw = {**raw, "rng_seed": int(seed_override)}
    c.unknown(raw, TOP_KEYS, "")
    version = raw.get("schema_version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        c.fail("schema_version", f"unsupported version {version!r} (expected {SCHEMA_VERSION})")
    seed = c.number(raw, "rng_seed", "", 0, lo=0, integer=True)
    out_dir = raw.get("output_dir", "qpskit-out")
    if not isinstance(out_dir, str) or not out_dir:
        c.fail("output_dir", "must be a non-empty string")
        out_dir = "qpskit-out"

    phys, path = c.section(raw, "physics", {"epsilon_r"})
    eps = c.number(phys, "epsilon_r", path, EPSILON_DIAMOND, lo=1.0, lo_open=True)
    constants = PhysicsConstants(epsilon_r=eps) if eps > 1 else PhysicsConstants()

    sensors = _sensors(c, raw)
    ids = [s.id for s in sensors]
    if len(set(ids)) != len(ids):
        c.fail("sensors", "sensor ids must be unique")
    defects = _defects(c, raw, sensors, seed)

    sim, path = c.section(raw, "simulation", {"n_epochs", "response", "ionization_charge_e"})
    n_epochs = c.number(sim, "n_epochs", path, 5000, lo=0, integer=True)
    response = c.choice(sim, "response", path, "exact", RESPONSES)
    ion = c.number(sim, "ionization_charge_e", path, 0.0)

    nz, path = c.section(raw, "noise", {"sigma_f_MHz", "missing_prob"})
    sigma = c.number(nz, "sigma_f_MHz", path, 1.0, lo=0.0, lo_open=True)
    missing = c.number(nz, "missing_prob", path, 0.0, lo=0.0, hi=1.0)

    bg, path = c.section(raw, "background", {"amplitude_V_per_cm", "correlation"})
    amp = c.number(bg, "amplitude_V_per_cm", path, 0.0, lo=0.0)
    corr = c.number(bg, "correlation", path, 0.999, lo=0.0, hi=1.0)
    if corr >= 1.0:
        c.fail(f"{path}.correlation", "must be below 1")

    det, path = c.section(raw, "detector", {"jump_threshold_sigma", "cluster_radius_sigma", "min_repeats",
                                            "min_valid_components"})
    detector_kw = dict(
        jump_threshold_sigma=c.number(det, "jump_threshold_sigma", path, 4.0, lo=0.0, lo_open=True),
        cluster_radius_sigma=c.number(det, "cluster_radius_sigma", path, 3.0, lo=0.0, lo_open=True),
        min_repeats=c.number(det, "min_repeats", path, 3, lo=2, integer=True),
        min_valid_components=c.number(det, "min_valid_components", path, 4, lo=4, integer=True),
    )

    so, path = c.section(raw, "solver", {"alpha", "operating_point", "max_iter", "grid_starts"})
    alpha = c.number(so, "alpha", path, 0.05, lo=0.0, hi=1.0, lo_open=True, hi_open=True)
    op = c.choice(so, "operating_point", path, "auto", OPERATING_POINTS)
    max_iter = c.number(so, "max_iter", path, 400, lo=1, integer=True)
    grid_starts = c.number(so, "grid_starts", path, 3, lo=0, integer=True)

    gr, path = c.section(raw, "grid", {"center_nm", "half_width_nm", "n"})
    default_center = sensor_centroid(sensors).tolist() if sensors else [0.0, 0.0, 0.0]
    gcenter = c.vector(gr, "center_nm", path, default_center)
    half = c.number(gr, "half_width_nm", path, 1000.0, lo=0.0, lo_open=True)
    gn = c.number(gr, "n", path, 64, lo=2, integer=True)

    if c.problems:
        raise ConfigInvalid(c.problems)

    noise = NoiseModel(sigma, missing, seed)
    sim_cfg = SimConfig(sensors, defects, n_epochs, noise, BackgroundModel(amp, corr), ion, response, constants)
    from .telegraph import validate_sim_config

    validate_sim_config(sim_cfg)
    out = Path(out_dir)
    if base_dir is not None and not out.is_absolute():
        out = base_dir / out
    return PipelineConfig(
        raw=raw,
        sensors=sensors,
        defects=defects,
        sim=sim_cfg,
        detector=DetectorConfig(**detector_kw),
        solver=SolverConfig(alpha=alpha, max_iter=max_iter, grid_starts=grid_starts),
        operating_point=op,
        grid=GridSpec.cube(gcenter, half, gn),
        rng_seed=seed,
        output_dir=out,
        constants=constants,
    )


def load_config(path, seed_override: int | None = None) -> PipelineConfig:
    """Read and validate a JSON config. Relative output_dir resolves against the config's folder."""
    path = Path(path)
    text = path.read_text()
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigInvalid([(f"line {exc.lineno} column {exc.colno}", exc.msg)]) from None
    return parse_config(raw, seed_override, path.parent)
