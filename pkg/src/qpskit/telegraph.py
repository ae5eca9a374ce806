"""Ground-truth defect charge dynamics and noisy per-epoch sensor spectra.

Each defect is a two-state charge trap that flips with a fixed probability
per measurement epoch. The sensors see the summed Coulomb field of the
occupied defects (plus an optional common-mode background) through the
exact Stark response, with Gaussian readout noise and random missing
epochs.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .core import (
    CC_BOND_NM,
    DEFAULT_CONSTANTS,
    NVSensor,
    ObservablePair,
    PhysicsConstants,
    coulomb_field,
    effective_sensors,
    exact_shift,
    linearized_shift,
    sensor_centroid,
    triangle_array,
)
from .errors import ConfigInvalid

RESPONSES = ("exact", "linear")


@dataclass(frozen=True)
class PointDefect:
    id: int
    position: np.ndarray
    flip_prob: float
    charge_when_occupied: float = -1.0
    initial_occupied: bool = False

    def __post_init__(self):
        object.__setattr__(self, "position", np.asarray(self.position, dtype=float))
        if not 0.0 <= self.flip_prob <= 1.0:
            raise ValueError(f"defect {self.id}: flip_prob must lie in [0, 1]")


@dataclass(frozen=True)
class ChargeTrace:
    defect_id: int
    occupancy: np.ndarray

    def __post_init__(self):
        occ = np.asarray(self.occupancy, dtype=np.int8)
        if occ.size and not np.all((occ == 0) | (occ == 1)):
            raise ValueError("occupancy must be binary")
        object.__setattr__(self, "occupancy", occ)

    def __len__(self):
        return len(self.occupancy)


@dataclass(frozen=True)
class NoiseModel:
    sigma_f: float = 1.0
    missing_prob: float = 0.0
    rng_seed: int = 0

    def __post_init__(self):
        if not self.sigma_f > 0:
            raise ValueError("sigma_f must be positive")
        if not 0.0 <= self.missing_prob < 1.0:
            raise ValueError("missing_prob must lie in [0, 1)")

    @property
    def diff_sigma(self) -> float:
        """Noise std of a difference of two independent readings."""
        return float(np.sqrt(2.0) * self.sigma_f)


@dataclass(frozen=True)
class SpectralSample:
    """One epoch of readings; ``values[i]`` is (f_par, f_perp) or NaN when missing."""

    epoch: int
    values: np.ndarray

    @property
    def present(self) -> np.ndarray:
        return np.all(np.isfinite(self.values), axis=-1)

    def pair(self, i: int) -> ObservablePair | None:
        if not self.present[i]:
            return None
        return ObservablePair(float(self.values[i, 0]), float(self.values[i, 1]))


@dataclass(frozen=True)
class BackgroundModel:
    """AR(1) common-mode field; stationary std ``amplitude`` (V/cm) per axis."""

    amplitude: float = 0.0
    correlation: float = 0.99

    def __post_init__(self):
        if self.amplitude < 0:
            raise ValueError("background amplitude must be non-negative")
        if not 0.0 <= self.correlation < 1.0:
            raise ValueError("background correlation must lie in [0, 1)")


@dataclass
class SimConfig:
    sensors: list
    defects: list
    n_epochs: int
    noise: NoiseModel = field(default_factory=NoiseModel)
    background: BackgroundModel = field(default_factory=BackgroundModel)
    ionization_charge: float = 0.0
    response: str = "exact"
    constants: PhysicsConstants = DEFAULT_CONSTANTS


@dataclass(frozen=True)
class SimRun:
    sensors: list
    defects: list
    traces: list
    values: np.ndarray  # (T, n, 2), NaN where missing
    noise: NoiseModel
    background: np.ndarray | None = None  # (T, 3) V/cm
    sensor_charges: np.ndarray | None = None  # (T, n) e, relative to the sensing state
    constants: PhysicsConstants = DEFAULT_CONSTANTS
    response: str = "exact"

    @property
    def n_epochs(self) -> int:
        return self.values.shape[0]

    @property
    def samples(self) -> list[SpectralSample]:
        return [SpectralSample(t, self.values[t]) for t in range(self.n_epochs)]

    @property
    def occupancy(self) -> np.ndarray:
        """(T, m) ground-truth occupancy matrix."""
        if not self.traces:
            return np.zeros((self.n_epochs, 0), dtype=np.int8)
        return np.stack([t.occupancy for t in self.traces], axis=1)

    def mean_environment_field(self) -> np.ndarray:
        """(n, 3) time-averaged field at each sensor from defects and background."""
        mean = np.zeros((len(self.sensors), 3))
        if self.defects and self.n_epochs:
            occ = self.occupancy.mean(axis=0)
            mean += np.einsum("m,mnc->nc", occ, defect_fields(self.sensors, self.defects, self.constants))
        if self.background is not None and self.n_epochs:
            mean += self.background.mean(axis=0)
        return mean

    def effective_sensors(self) -> list[NVSensor]:
        """Sensors calibrated to the run's mean operating point (see core.effective_sensors)."""
        return effective_sensors(self.sensors, self.mean_environment_field())


def stack_samples(samples: Sequence[SpectralSample], n_sensors: int | None = None) -> np.ndarray:
    """(T, n, 2) array from a sample sequence, NaN where missing."""
    if len(samples) == 0:
        return np.zeros((0, n_sensors or 0, 2))
    return np.stack([np.asarray(s.values, dtype=float) for s in samples])


# ---------------------------------------------------------------------------
# forward model helpers


def defect_fields(sensors: Sequence[NVSensor], defects: Sequence[PointDefect],
                  constants: PhysicsConstants = DEFAULT_CONSTANTS) -> np.ndarray:
    """(m, n, 3) field at each sensor from each defect when occupied."""
    if not defects:
        return np.zeros((0, len(sensors), 3))
    pos = np.array([d.position for d in defects])[:, None, :]
    q = np.array([d.charge_when_occupied for d in defects])[:, None]
    spos = np.array([s.position for s in sensors])[None, :, :]
    return coulomb_field(pos, q, spos, constants)


def sensor_mutual_fields(sensors: Sequence[NVSensor], charges: np.ndarray,
                         constants: PhysicsConstants = DEFAULT_CONSTANTS) -> np.ndarray:
    """(..., n, 3) field at each sensor from the other sensors' charges (..., n)."""
    charges = np.asarray(charges, dtype=float)
    n = len(sensors)
    pos = np.array([s.position for s in sensors])
    kernel = np.zeros((n, n, 3))  # kernel[j, i]: field at i per unit charge at j
    for j in range(n):
        for i in range(n):
            if i != j:
                kernel[j, i] = coulomb_field(pos[j], 1.0, pos[i], constants)
    return np.einsum("...j,jic->...ic", charges, kernel)


def sensor_response(sensors: Sequence[NVSensor], fields: np.ndarray, response: str = "exact") -> np.ndarray:
    """(..., n, 2) observable shifts for per-sensor fields (..., n, 3)."""
    shift = exact_shift if response == "exact" else linearized_shift
    out = np.empty(fields.shape[:-1] + (2,))
    for i, s in enumerate(sensors):
        p = shift(fields[..., i, :], s)
        out[..., i, 0] = p.f_par
        out[..., i, 1] = p.f_perp
    return out


def static_values(sensors: Sequence[NVSensor]) -> np.ndarray:
    return np.array([tuple(s.static_observables()) for s in sensors], dtype=float)


def defect_signatures(sensors, defects, constants=DEFAULT_CONSTANTS, response="exact") -> np.ndarray:
    """(m, 2n) noiseless jump vector of each defect charging from an empty background."""
    fields = defect_fields(sensors, defects, constants)
    return sensor_response(sensors, fields, response).reshape(len(defects), -1)


# ---------------------------------------------------------------------------
# operations


def step_charges(defects: Sequence[PointDefect], prev_occupancy, rng: np.random.Generator) -> np.ndarray:
    prev = np.asarray(prev_occupancy, dtype=np.int8)
    if prev.shape != (len(defects),):
        raise ValueError("prev_occupancy length must equal the number of defects")
    p = np.array([d.flip_prob for d in defects], dtype=float)
    flips = rng.random(len(defects)) < p
    return prev ^ flips.astype(np.int8)


def measure_epoch(sensors, defects, occupancy, background_field, noise: NoiseModel,
                  rng: np.random.Generator, epoch: int = 0, constants=DEFAULT_CONSTANTS,
                  sensor_charges=None, response: str = "exact") -> SpectralSample:
    n = len(sensors)
    fields = np.zeros((n, 3)) + np.asarray(background_field, dtype=float)
    occ = np.asarray(occupancy, dtype=float)
    if len(defects):
        fields = fields + np.einsum("m,mnc->nc", occ, defect_fields(sensors, defects, constants))
    if sensor_charges is not None:
        fields = fields + sensor_mutual_fields(sensors, sensor_charges, constants)
    values = static_values(sensors) + sensor_response(sensors, fields, response)
    missing = rng.random(n) < noise.missing_prob
    values = values + rng.normal(0.0, noise.sigma_f, size=(n, 2))
    values[missing] = np.nan
    return SpectralSample(epoch, values)


def validate_sim_config(cfg: SimConfig) -> None:
    problems = []
    if not isinstance(cfg.n_epochs, (int, np.integer)) or cfg.n_epochs < 0:
        problems.append(("n_epochs", "must be a non-negative integer"))
    if len(cfg.sensors) < 1:
        problems.append(("sensors", "at least one sensor is required"))
    ids = [s.id for s in cfg.sensors]
    if len(set(ids)) != len(ids):
        problems.append(("sensors", "sensor ids must be unique"))
    ids = [d.id for d in cfg.defects]
    if len(set(ids)) != len(ids):
        problems.append(("defects", "defect ids must be unique"))
    for k, d in enumerate(cfg.defects):
        for s in cfg.sensors:
            sep = float(np.linalg.norm(d.position - s.position))
            if sep <= CC_BOND_NM:
                problems.append((f"defects[{k}].position", f"{sep:.4g} nm from sensor {s.id}"))
    if cfg.response not in RESPONSES:
        problems.append(("response", f"must be one of {RESPONSES}"))
    if problems:
        raise ConfigInvalid(problems)


def simulate_background(model: BackgroundModel, n_epochs: int, rng: np.random.Generator) -> np.ndarray:
    z = rng.normal(size=(n_epochs, 3))
    b = np.empty((n_epochs, 3))
    if n_epochs == 0:
        return b
    rho = model.correlation
    b[0] = z[0]
    for t in range(1, n_epochs):
        b[t] = rho * b[t - 1] + np.sqrt(1.0 - rho**2) * z[t]
    return model.amplitude * b


def run_simulation(cfg: SimConfig) -> SimRun:
    """Simulate ``cfg.n_epochs`` epochs; deterministic in ``cfg.noise.rng_seed``."""
    validate_sim_config(cfg)
    sensors, defects = list(cfg.sensors), list(cfg.defects)
    n, m, T = len(sensors), len(defects), int(cfg.n_epochs)
    # independent streams so that toggling one feature leaves the others unchanged
    seq = np.random.SeedSequence(cfg.noise.rng_seed)
    rng_charge, rng_noise, rng_missing, rng_bg = (np.random.default_rng(s) for s in seq.spawn(4))

    p = np.array([d.flip_prob for d in defects], dtype=float)
    init = np.array([d.initial_occupied for d in defects], dtype=np.int8)
    flips = (rng_charge.random((T, m)) < p).astype(np.int8)
    if T:
        flips[0] = 0
    occ = (init[None, :] + np.cumsum(flips, axis=0)) % 2 if T else np.zeros((0, m), np.int8)
    occ = occ.astype(np.int8)

    fields = np.zeros((T, n, 3))
    if m:
        q_fields = defect_fields(sensors, defects, cfg.constants)
        fields += np.einsum("tm,mnc->tnc", occ.astype(float), q_fields)

    background = None
    if cfg.background.amplitude > 0:
        background = simulate_background(cfg.background, T, rng_bg)
        fields += background[:, None, :]

    missing = rng_missing.random((T, n)) < cfg.noise.missing_prob
    sensor_charges = None
    if cfg.ionization_charge != 0.0:
        sensor_charges = cfg.ionization_charge * missing.astype(float)
        fields += sensor_mutual_fields(sensors, sensor_charges, cfg.constants)

    values = static_values(sensors)[None] + sensor_response(sensors, fields, cfg.response)
    values = values + rng_noise.normal(0.0, cfg.noise.sigma_f, size=(T, n, 2))
    values[missing] = np.nan

    traces = [ChargeTrace(d.id, occ[:, k]) for k, d in enumerate(defects)]
    return SimRun(sensors, defects, traces, values, cfg.noise, background, sensor_charges,
                  cfg.constants, cfg.response)


# ---------------------------------------------------------------------------
# scenario generation


def random_defects(
    sensors: Sequence[NVSensor],
    n_defects: int = 16,
    radius: float = 1000.0,
    exclusion: float = 20.0,
    flip_range: tuple[float, float] = (0.005, 0.05),
    charge: float = -1.0,
    rng: np.random.Generator | int | None = 0,
    center=None,
) -> list[PointDefect]:
    """Defects uniform in a ball around the array, kept ``exclusion`` nm from every sensor."""
    rng = np.random.default_rng(rng)
    c = sensor_centroid(sensors) if center is None else np.asarray(center, dtype=float)
    spos = np.array([s.position for s in sensors])
    out = []
    while len(out) < n_defects:
        u = rng.uniform(-1.0, 1.0, 3)
        if u @ u > 1.0:
            continue
        pos = c + radius * u
        if np.min(np.linalg.norm(spos - pos, axis=1)) <= exclusion:
            continue
        p = rng.uniform(*flip_range)
        init = bool(rng.random() < 0.5)
        out.append(PointDefect(len(out), pos, float(p), charge, init))
    return out


def default_scenario(seed: int = 0, n_epochs: int = 5000, sigma_f: float = 1.0,
                     missing_prob: float = 0.0, n_defects: int = 16, spacing: float = 200.0,
                     **kwargs) -> SimConfig:
    """Three sensors 200 nm apart and 16 defects within 1 um, as in the reference experiment."""
    sensors = triangle_array(spacing)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 1]))
    defects = random_defects(sensors, n_defects, rng=rng)
    noise = NoiseModel(sigma_f, missing_prob, seed)
    return SimConfig(sensors, defects, n_epochs, noise, **kwargs)

