"""Geometry, units and Stark-shift forward physics for NV electrometers.

Units throughout the package: positions in nm, electric fields in V/cm,
frequencies in MHz, charge in units of the elementary charge e.

All functions accept numpy arrays and broadcast over leading axes, so a
field evaluated at many defect positions is a single call.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np
from scipy import constants as _sc

from .errors import DegenerateGeometry, LabelOrder

# e/(4 pi eps0) in V*m is 1.43996e-9; with r in nm and E in V/cm this becomes
# 1e-9 V*m * 1e18 nm^2/m^2 / 100 (cm/m) = 1e7 * (value in 1e-9 V*m).
COULOMB_K = _sc.e / (4 * np.pi * _sc.epsilon_0) * 1e16
"""Coulomb prefactor in V/cm * nm^2 per elementary charge."""

CC_BOND_NM = 0.154
"""Diamond C-C bond length; the point-charge model is not used below it."""

D_PAR = 1.42
D_PERP = 1.83
"""Excited-state Stark susceptibilities in MHz/(V/cm)."""

EPSILON_DIAMOND = 5.7

FWHM_PER_SIGMA = 2.0 * np.sqrt(2.0 * np.log(2.0))

_ORTHO_TOL = 1e-12


@dataclass(frozen=True)
class PhysicsConstants:
    epsilon_r: float = EPSILON_DIAMOND
    coulomb_k: float = COULOMB_K

    def __post_init__(self):
        if not self.epsilon_r > 1:
            raise ValueError(f"epsilon_r must exceed 1, got {self.epsilon_r}")
        if not self.coulomb_k > 0:
            raise ValueError(f"coulomb_k must be positive, got {self.coulomb_k}")


DEFAULT_CONSTANTS = PhysicsConstants()


class ObservablePair(NamedTuple):
    """Mean (f_par) and half-splitting (f_perp) of the E_x/E_y lines, MHz."""

    f_par: np.ndarray | float
    f_perp: np.ndarray | float


def as_vec3(v, name="vector") -> np.ndarray:
    a = np.asarray(v, dtype=float)
    if a.shape[-1:] != (3,):
        raise ValueError(f"{name} must have a trailing axis of length 3, got {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{name} has non-finite components")
    return a


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=float)
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class SensorFrame:
    """Right-handed orthonormal frame (x_hat, y_hat, z_hat) in global coordinates.

    z_hat is the NV symmetry axis.
    """

    x_hat: np.ndarray
    y_hat: np.ndarray
    z_hat: np.ndarray

    def __post_init__(self):
        for name in ("x_hat", "y_hat", "z_hat"):
            object.__setattr__(self, name, _frozen(as_vec3(getattr(self, name), name)))
        m = self.matrix
        if not np.allclose(m @ m.T, np.eye(3), rtol=0, atol=_ORTHO_TOL):
            raise ValueError("frame axes are not orthonormal")
        if not np.allclose(np.cross(self.x_hat, self.y_hat), self.z_hat, rtol=0, atol=_ORTHO_TOL):
            raise ValueError("frame is not right-handed")

    @property
    def matrix(self) -> np.ndarray:
        """Rows are the local axes, so ``matrix @ v_global`` gives local components."""
        return np.stack([self.x_hat, self.y_hat, self.z_hat])

    @classmethod
    def from_z(cls, z_axis, reference=(0.0, 0.0, 1.0)) -> "SensorFrame":
        """Frame with the given z axis; x is the reference direction made perpendicular."""
        z = as_vec3(z_axis, "z_axis")
        z = z / np.linalg.norm(z)
        ref = as_vec3(reference, "reference")
        x = ref - (ref @ z) * z
        if np.linalg.norm(x) < 1e-6:
            # reference parallel to z: any perpendicular will do
            x = np.cross(z, [1.0, 0.0, 0.0])
            if np.linalg.norm(x) < 1e-6:
                x = np.cross(z, [0.0, 1.0, 0.0])
        x = x / np.linalg.norm(x)
        y = np.cross(z, x)
        # re-orthogonalize so the axes sit at round-off distance from orthonormal
        y = y / np.linalg.norm(y)
        x = np.cross(y, z)
        return cls(x, y, z)

    def rotated(self, rotation) -> "SensorFrame":
        r = np.asarray(rotation, dtype=float)
        if not np.allclose(r @ r.T, np.eye(3), atol=1e-10) or np.linalg.det(r) < 0:
            raise ValueError("rotation must be a proper orthogonal matrix")
        # Gram-Schmidt keeps the composed frame orthonormal at round-off level
        x = r @ self.x_hat
        x = x / np.linalg.norm(x)
        y = r @ self.y_hat
        y = y - (y @ x) * x
        y = y / np.linalg.norm(y)
        return SensorFrame(x, y, np.cross(x, y))

    def to_local(self, v):
        return np.asarray(v, dtype=float) @ self.matrix.T

    def to_global(self, v_local):
        return np.asarray(v_local, dtype=float) @ self.matrix


@dataclass(frozen=True)
class NVSensor:
    """A single NV center used as a two-component electric-field sensor.

    ``strain_perp`` is the static transverse field (V/cm) in the local
    (x_hat, y_hat) plane. The longitudinal static field is taken as zero.
    """

    id: int
    position: np.ndarray
    frame: SensorFrame
    strain_perp: np.ndarray
    d_par: float = D_PAR
    d_perp: float = D_PERP

    def __post_init__(self):
        object.__setattr__(self, "position", _frozen(as_vec3(self.position, "position")))
        s = np.asarray(self.strain_perp, dtype=float)
        if s.shape != (2,) or not np.all(np.isfinite(s)):
            raise ValueError("strain_perp must be a finite 2-vector")
        if np.linalg.norm(s) == 0:
            raise ValueError(f"sensor {self.id}: zero transverse strain leaves n_perp undefined")
        object.__setattr__(self, "strain_perp", _frozen(s))
        if not self.d_par > 0 or not self.d_perp > 0:
            raise ValueError(f"sensor {self.id}: susceptibilities must be positive")

    @property
    def n_par(self) -> np.ndarray:
        return self.frame.z_hat

    @property
    def n_perp(self) -> np.ndarray:
        """Global unit vector along the static transverse strain field."""
        s = self.strain_perp / np.linalg.norm(self.strain_perp)
        return s[0] * self.frame.x_hat + s[1] * self.frame.y_hat

    @property
    def strain_magnitude(self) -> float:
        return float(np.linalg.norm(self.strain_perp))

    def static_observables(self) -> ObservablePair:
        return ObservablePair(0.0, self.d_perp * self.strain_magnitude)


def coulomb_field(charge_pos, charge, sensor_pos, constants: PhysicsConstants = DEFAULT_CONSTANTS):
    """Field (V/cm) at ``sensor_pos`` from a point charge ``charge`` (e) at ``charge_pos``.

    Broadcasts over leading axes. Raises DegenerateGeometry when any
    separation is at or below one C-C bond length.
    """
    d = np.asarray(sensor_pos, dtype=float) - np.asarray(charge_pos, dtype=float)
    r = np.linalg.norm(d, axis=-1, keepdims=True)
    if np.any(r <= CC_BOND_NM):
        raise DegenerateGeometry(
            f"charge within {CC_BOND_NM} nm of sensor (min separation {float(r.min()):.4g} nm)"
        )
    q = np.asarray(charge, dtype=float)[..., None]
    return constants.coulomb_k * q * d / (constants.epsilon_r * r**3)


def excited_state_frequencies(E_local, sensor: NVSensor, f_center=0.0):
    """E_x and E_y transition frequencies for a field given in the sensor frame.

    These are the eigenvalues of d_par*E_z + d_perp*[[E_x, -E_y], [-E_y, -E_x]],
    offset by ``f_center``.
    """
    e = np.asarray(E_local, dtype=float)
    mean = f_center + sensor.d_par * e[..., 2]
    half = sensor.d_perp * np.hypot(e[..., 0], e[..., 1])
    return mean + half, mean - half


def observables_from_frequencies(f_Ex, f_Ey) -> ObservablePair:
    f_Ex = np.asarray(f_Ex, dtype=float)
    f_Ey = np.asarray(f_Ey, dtype=float)
    if np.any(f_Ex < f_Ey):
        raise LabelOrder("f_Ex must not be below f_Ey")
    par = (f_Ex + f_Ey) / 2
    perp = (f_Ex - f_Ey) / 2
    if par.ndim == 0:
        return ObservablePair(float(par), float(perp))
    return ObservablePair(par, perp)


def linearized_shift(delta_E_global, sensor: NVSensor) -> ObservablePair:
    """First-order observable change for a small field perturbation."""
    dE = np.asarray(delta_E_global, dtype=float)
    return ObservablePair(sensor.d_par * (dE @ sensor.n_par), sensor.d_perp * (dE @ sensor.n_perp))


def exact_shift(delta_E_global, sensor: NVSensor) -> ObservablePair:
    """Observable change for a perturbation on top of the static strain field."""
    dE = sensor.frame.to_local(delta_E_global)
    s = sensor.strain_perp
    perp = sensor.d_perp * (np.hypot(s[0] + dE[..., 0], s[1] + dE[..., 1]) - np.hypot(s[0], s[1]))
    return ObservablePair(sensor.d_par * dE[..., 2], perp)


# ---------------------------------------------------------------------------
# default geometry

DIAMOND_111 = np.array(
    [[1.0, 1.0, 1.0], [1.0, -1.0, -1.0], [-1.0, 1.0, -1.0], [-1.0, -1.0, 1.0]]
) / np.sqrt(3.0)
"""The four NV axis orientations in a (001)-cut diamond."""


def default_strain_magnitude(d_perp: float = D_PERP, splitting_mhz: float = 1000.0) -> float:
    """Transverse strain field (V/cm) giving a half-splitting of ``splitting_mhz``."""
    return splitting_mhz / d_perp


def triangle_array(
    spacing: float = 200.0,
    center=(0.0, 0.0, 0.0),
    orientations: Sequence | None = None,
    strain_angles: Sequence[float] = (0.0, np.pi / 3, 2 * np.pi / 3),
    strain_magnitude: float | None = None,
    d_par: float = D_PAR,
    d_perp: float = D_PERP,
) -> list[NVSensor]:
    """Three sensors on an equilateral triangle of side ``spacing`` in the xy plane."""
    if orientations is None:
        orientations = DIAMOND_111[:3]
    if strain_magnitude is None:
        strain_magnitude = default_strain_magnitude(d_perp)
    rc = spacing / np.sqrt(3.0)
    angles = np.pi / 2 + 2 * np.pi * np.arange(3) / 3
    c = np.asarray(center, dtype=float)
    sensors = []
    for i, a in enumerate(angles):
        pos = c + rc * np.array([np.cos(a), np.sin(a), 0.0])
        frame = SensorFrame.from_z(orientations[i])
        phi = strain_angles[i]
        strain = strain_magnitude * np.array([np.cos(phi), np.sin(phi)])
        sensors.append(NVSensor(i, pos, frame, strain, d_par, d_perp))
    return sensors


def sensor_centroid(sensors: Sequence[NVSensor]) -> np.ndarray:
    return np.mean([s.position for s in sensors], axis=0)


def mean_spacing(sensors: Sequence[NVSensor]) -> float:
    pos = np.array([s.position for s in sensors])
    if len(pos) < 2:
        return 0.0
    d = np.linalg.norm(pos[:, None] - pos[None], axis=-1)
    iu = np.triu_indices(len(pos), 1)
    return float(d[iu].mean())


def scaled_array(sensors: Sequence[NVSensor], factor: float) -> list[NVSensor]:
    """Same sensors with positions scaled about their centroid."""
    c = sensor_centroid(sensors)
    return [
        NVSensor(s.id, c + factor * (s.position - c), s.frame, s.strain_perp, s.d_par, s.d_perp)
        for s in sensors
    ]


def effective_sensors(sensors: Sequence[NVSensor], mean_fields) -> list[NVSensor]:
    """Sensors whose static transverse field includes a time-averaged environment field.

    ``mean_fields`` is (n, 3) in global coordinates. This is the operating
    point a static-spectrum characterization of each sensor would report.
    """
    mf = np.asarray(mean_fields, dtype=float).reshape(len(sensors), 3)
    out = []
    for s, e in zip(sensors, mf):
        loc = s.frame.to_local(e)
        out.append(NVSensor(s.id, s.position, s.frame, s.strain_perp + loc[:2], s.d_par, s.d_perp))
    return out
