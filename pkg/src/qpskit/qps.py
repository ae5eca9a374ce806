"""Point-charge localization from multi-sensor jump amplitudes.

The forward model gives, for a charge ``q`` at position ``r``, the exact
(df_par, df_perp) shift it produces at every sensor on top of that
sensor's static strain. ``localize`` inverts it by weighted nonlinear least
squares and attaches a Gauss-Newton covariance and a chi-square test of
the point-charge hypothesis.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import stats

from .core import (
    CC_BOND_NM,
    DEFAULT_CONSTANTS,
    FWHM_PER_SIGMA,
    NVSensor,
    PhysicsConstants,
    mean_spacing,
    sensor_centroid,
)
from .errors import (
    NEAR_SINGULAR_JACOBIAN,
    POLARITY_AMBIGUOUS,
    SINGULAR_INFORMATION,
    ConfigInvalid,
    DegenerateGeometry,
    NoConvergence,
)


def n_threads() -> int:
    try:
        return max(1, int(os.environ.get("QPSKIT_THREADS", "1")))
    except ValueError:
        return 1


# ---------------------------------------------------------------------------
# forward model


def _sensor_arrays(sensors: Sequence[NVSensor]):
    pos = np.array([s.position for s in sensors])
    rot = np.array([s.frame.matrix for s in sensors])  # (n, 3, 3), rows = local axes
    strain = np.array([s.strain_perp for s in sensors])
    d_par = np.array([s.d_par for s in sensors])
    d_perp = np.array([s.d_perp for s in sensors])
    return pos, rot, strain, d_par, d_perp


def _forward(r, sensors, charge, constants, jacobian=False, centered=False):
    """Unchecked vectorized forward model; r is (..., 3), charge broadcasts against r[..., 0].

    With ``centered`` the perpendicular shift is taken symmetrically about
    the sensor's static transverse field, d_perp * (|E0 + dE/2| - |E0 - dE/2|).
    That is the jump of a defect toggling around a time-averaged operating
    point, and it is exactly odd in the charge.
    """
    pos, rot, strain, d_par, d_perp = _sensor_arrays(sensors)
    r = np.asarray(r, dtype=float)
    lead = r.shape[:-1]
    kappa = constants.coulomb_k * np.asarray(charge, dtype=float) / constants.epsilon_r
    kappa = np.broadcast_to(kappa, lead)[..., None]  # (..., 1)
    d = pos - r[..., None, :]  # (..., n, 3), charge -> sensor
    rho2 = np.sum(d * d, axis=-1)
    rho = np.sqrt(rho2)
    inv3 = 1.0 / (rho2 * rho)
    E = kappa[..., None] * d * inv3[..., None]
    e_loc = np.einsum("nij,...nj->...ni", rot, E)
    f_par = d_par * e_loc[..., 2]
    if centered:
        u = strain + 0.5 * e_loc[..., :2]
        v = strain - 0.5 * e_loc[..., :2]
        un, vn = np.linalg.norm(u, axis=-1), np.linalg.norm(v, axis=-1)
        f_perp = d_perp * (un - vn)
    else:
        u = strain + e_loc[..., :2]
        un = np.linalg.norm(u, axis=-1)
        f_perp = d_perp * (un - np.linalg.norm(strain, axis=-1))
    F = np.stack([f_par, f_perp], axis=-1).reshape(lead + (2 * len(sensors),))
    if not jacobian:
        return F, rho
    # dE/dr = -kappa (I / rho^3 - 3 d d^T / rho^5)
    eye = np.eye(3)
    dEdr = -kappa[..., None, None] * (
        eye * inv3[..., None, None] - 3.0 * d[..., :, None] * d[..., None, :] * (inv3 / rho2)[..., None, None]
    )
    dloc = np.einsum("nij,...njk->...nik", rot, dEdr)  # (..., n, 3, 3)
    j_par = d_par[:, None] * dloc[..., 2, :]
    uhat = u / un[..., None]
    if centered:
        uhat = 0.5 * (uhat + v / vn[..., None])
    j_perp = d_perp[:, None] * np.einsum("...ni,...nik->...nk", uhat, dloc[..., :2, :])
    J = np.stack([j_par, j_perp], axis=-2).reshape(lead + (2 * len(sensors), 3))
    return F, rho, J


def _check(rho):
    if np.any(rho <= CC_BOND_NM):
        raise DegenerateGeometry(f"position within {CC_BOND_NM} nm of a sensor")


def forward_observables(r, sensors: Sequence[NVSensor], charge: float = 1.0,
                        constants: PhysicsConstants = DEFAULT_CONSTANTS, centered: bool = False) -> np.ndarray:
    """(..., 2n) shifts [f_par_0, f_perp_0, f_par_1, ...] for a charge ``charge`` at ``r``."""
    F, rho = _forward(r, sensors, charge, constants, centered=centered)
    _check(rho)
    return F


def forward_jacobian(r, sensors: Sequence[NVSensor], charge: float = 1.0,
                     constants: PhysicsConstants = DEFAULT_CONSTANTS, centered: bool = False):
    """Forward values and analytic Jacobian d F / d r, shapes (..., 2n) and (..., 2n, 3)."""
    F, rho, J = _forward(r, sensors, charge, constants, jacobian=True, centered=centered)
    _check(rho)
    return F, J


def numeric_jacobian(r, sensors, charge=1.0, constants=DEFAULT_CONSTANTS, step=1e-3, centered=False):
    """Central-difference Jacobian with a fixed step in nm."""
    r = np.asarray(r, dtype=float)
    cols = []
    for k in range(3):
        h = np.zeros(3)
        h[k] = step
        cols.append((forward_observables(r + h, sensors, charge, constants, centered)
                     - forward_observables(r - h, sensors, charge, constants, centered)) / (2 * step))
    return np.stack(cols, axis=-1)


# ---------------------------------------------------------------------------
# localization


@dataclass(frozen=True)
class SolverConfig:
    charges: tuple = (1.0, -1.0)
    alpha: float = 0.05
    shell_points: int = 13  # per shell
    shell_factors: tuple = (0.5, 2.0)
    grid_directions: int = 256
    grid_radii: tuple = (5.0, 5000.0, 30)  # geometric (min nm, max nm, count) about the centroid
    grid_starts: int = 3
    max_iter: int = 400
    cond_max: float = 1e12
    tie_rtol: float = 1e-9
    centered: bool = False  # see _forward; use with sensors calibrated to the mean field

    def __post_init__(self):
        if not 0 < self.alpha < 1:
            raise ValueError("alpha must lie in (0, 1)")
        if not self.charges:
            raise ValueError("at least one charge polarity is required")


@dataclass
class LocalizationResult:
    position: np.ndarray
    objective_min: float
    dof: int
    p_value: float
    covariance: np.ndarray
    sigma_principal: np.ndarray
    principal_axes: np.ndarray  # columns, matching sigma_principal
    sigma_3d_bar: float
    fwhm: float
    charge_polarity_assumed: float
    event_sign: int
    n_valid: int
    spherical: np.ndarray  # (r, theta, phi) in the array frame, radians
    fwhm_best: float  # along the best-localized principal axis
    fwhm_r_phi: float  # covariance projected on the radial/azimuthal plane
    flags: tuple = ()
    alternatives: dict = field(default_factory=dict)  # charge -> objective

    def passes(self, alpha: float = 0.05) -> bool:
        return self.p_value >= alpha


def fibonacci_sphere(n: int) -> np.ndarray:
    i = np.arange(n) + 0.5
    z = 1 - 2 * i / n
    phi = np.pi * (1 + 5**0.5) * i
    s = np.sqrt(1 - z * z)
    return np.stack([s * np.cos(phi), s * np.sin(phi), z], axis=1)


def array_frame(sensors: Sequence[NVSensor]):
    """(origin, 3x3 rows x,y,z) of the array-centred frame.

    z is normal to the plane of the first three sensors, x points to sensor 0.
    """
    c = sensor_centroid(sensors)
    pos = np.array([s.position for s in sensors])
    z = np.array([0.0, 0.0, 1.0])
    if len(pos) >= 3:
        nrm = np.cross(pos[1] - pos[0], pos[2] - pos[0])
        if np.linalg.norm(nrm) > 1e-9:
            z = nrm / np.linalg.norm(nrm)
            if z[2] < 0:
                z = -z
    x = pos[0] - c
    x = x - (x @ z) * z
    if np.linalg.norm(x) < 1e-9:
        x = np.cross(z, [0.0, 1.0, 0.0]) if abs(z[0]) > 0.9 else np.cross([1.0, 0.0, 0.0], z)
        x = np.cross(z, x) if np.linalg.norm(x) < 1e-9 else x
    x = x / np.linalg.norm(x)
    return c, np.stack([x, np.cross(z, x), z])


def to_spherical(p, sensors) -> np.ndarray:
    c, R = array_frame(sensors)
    v = R @ (np.asarray(p, dtype=float) - c)
    r = float(np.linalg.norm(v))
    theta = float(np.arccos(np.clip(v[2] / r, -1, 1))) if r > 0 else 0.0
    return np.array([r, theta, float(np.arctan2(v[1], v[0]))])


def _starts(sensors, cfg: SolverConfig) -> np.ndarray:
    c = sensor_centroid(sensors)
    spacing = mean_spacing(sensors) or 100.0
    dirs = fibonacci_sphere(cfg.shell_points)
    shells = [c + f * spacing * dirs for f in cfg.shell_factors]
    return np.concatenate(shells)


def _grid_points(sensors, cfg: SolverConfig) -> np.ndarray:
    c = sensor_centroid(sensors)
    rmin, rmax, nr = cfg.grid_radii
    radii = np.geomspace(rmin, rmax, int(nr))
    dirs = fibonacci_sphere(cfg.grid_directions)
    pts = c + (radii[:, None, None] * dirs[None]).reshape(-1, 3)
    spos = np.array([s.position for s in sensors])
    dmin = np.min(np.linalg.norm(pts[:, None] - spos[None], axis=-1), axis=1)
    return pts[dmin > 2 * CC_BOND_NM]


def _weighted(F, target, W, valid):
    return np.where(valid, F - target, 0.0) @ W.T


def _whitener(target, sigmas):
    """Validity mask and whitening matrix W with W C W^T = I on valid entries.

    ``sigmas`` is either per-component standard errors (2n,) or a full
    (2n, 2n) covariance. Rows and columns of invalid components are zero.
    """
    target = np.asarray(target, dtype=float)
    sig = np.asarray(sigmas, dtype=float)
    k = target.shape[-1]
    if sig.shape == (k,):
        valid = np.isfinite(target) & np.isfinite(sig) & (sig > 0)
        return valid, np.diag(np.where(valid, 1.0 / np.where(valid, sig, 1.0), 0.0))
    if sig.shape != (k, k):
        raise ValueError(f"sigmas must have shape ({k},) or ({k}, {k}), got {sig.shape}")
    d = np.diagonal(sig)
    valid = np.isfinite(target) & np.isfinite(d) & (d > 0)
    idx = np.flatnonzero(valid)
    sub = sig[np.ix_(idx, idx)]
    if not np.all(np.isfinite(sub)):
        raise ValueError("covariance has non-finite entries between valid components")
    try:
        L = np.linalg.cholesky(sub)
    except np.linalg.LinAlgError as exc:
        raise ValueError("covariance is not positive definite") from exc
    W = np.zeros((k, k))
    W[np.ix_(idx, idx)] = np.linalg.inv(L)
    return valid, W


def _batched_lm(P, q, s, target, W, valid, sensors, constants, max_iter, centered=False):
    """Levenberg-Marquardt on a batch of independent starts.

    P (B, 3) start positions, q and s (B,) charge and event sign per run.
    Returns final positions and costs; runs never increase their cost.
    """
    B = len(P)
    P = P.copy()

    def evaluate(P):
        F, rho, J = _forward(P, sensors, q, constants, jacobian=True, centered=centered)
        res = _weighted(s[:, None] * F, target, W, valid)
        Jw = np.einsum("kl,blj->bkj", W, np.where(valid[:, None], s[:, None, None] * J, 0.0))
        cost = np.sum(res * res, axis=1)
        cost = np.where(np.min(rho, axis=1) > 2 * CC_BOND_NM, cost, np.inf)
        return res, Jw, cost

    res, Jw, cost = evaluate(P)
    lam = np.full(B, 1e-3)
    active = np.isfinite(cost)
    eye = np.eye(3)
    for _ in range(max_iter):
        if not np.any(active):
            break
        g = np.einsum("bki,bk->bi", Jw, res)
        H = np.einsum("bki,bkj->bij", Jw, Jw)
        diag = np.einsum("bii->bi", H)
        A = H + (lam[:, None] * np.maximum(diag, 1e-12))[:, :, None] * eye
        try:
            step = -np.linalg.solve(A, g[..., None])[..., 0]
        except np.linalg.LinAlgError:
            step = -np.stack([np.linalg.lstsq(a, b, rcond=None)[0] for a, b in zip(A, g)])
        step = np.where(active[:, None], step, 0.0)
        Pn = P + step
        rn, Jn, cn = evaluate(Pn)
        better = active & np.isfinite(cn) & (cn <= cost)
        gain = np.where(better, cost - cn, 0.0)
        P = np.where(better[:, None], Pn, P)
        res = np.where(better[:, None], rn, res)
        Jw = np.where(better[:, None, None], Jn, Jw)
        cost_prev = cost
        cost = np.where(better, cn, cost)
        lam = np.where(better, np.maximum(lam / 3, 1e-12), lam * 4)
        small_step = np.linalg.norm(step, axis=1) <= 1e-10 * (1 + np.linalg.norm(P, axis=1))
        tiny_gain = better & (gain <= 1e-15 * np.maximum(cost_prev, 1e-300))
        done = (lam > 1e12) | (better & small_step) | tiny_gain | (cost <= 1e-28)
        active &= ~done
    return P, cost


def _covariance(J_w):
    H = J_w.T @ J_w
    w, U = np.linalg.eigh(H)
    flags = []
    if w[0] <= 0 or w[-1] / w[0] > 1e12:
        flags.append(NEAR_SINGULAR_JACOBIAN)
    with np.errstate(divide="ignore"):
        var = np.where(w > 0, 1.0 / np.where(w > 0, w, 1.0), np.inf)
    cov = (U * var) @ U.T if np.all(np.isfinite(var)) else np.full((3, 3), np.inf)
    # eigenvalues of H ascending -> variances descending; report sigma ascending
    order = np.argsort(var)
    return cov, np.sqrt(var[order]), U[:, order], flags


def localize(cluster_mean, sigmas, sensors: Sequence[NVSensor], cfg: SolverConfig = SolverConfig(),
             constants: PhysicsConstants = DEFAULT_CONSTANTS) -> LocalizationResult:
    """Fit a point charge to a jump amplitude vector.

    The folded mean does not reveal whether it was a charging or discharging
    jump, nor the sign of the charge, so the model ``s * F(r, q)`` is fitted
    for both event signs and every charge in ``cfg.charges``.
    """
    target = np.asarray(cluster_mean, dtype=float)
    valid, W = _whitener(target, sigmas)
    nv = int(np.count_nonzero(valid))
    if nv < 4:
        raise ValueError(f"need at least 4 valid components, got {nv}")
    target = np.where(valid, target, 0.0)

    shell = _starts(sensors, cfg)
    grid = _grid_points(sensors, cfg)
    # the centered model is odd in q, so the event sign is redundant there
    signs = (1,) if cfg.centered else (1, -1)
    combos = [(q, s) for q in cfg.charges for s in signs]
    starts, qs, ss = [], [], []
    for q, s in combos:
        Fg, _ = _forward(grid, sensors, q, constants, centered=cfg.centered)
        cg = np.sum(_weighted(s * Fg, target, W, valid) ** 2, axis=1)
        best = grid[np.argsort(cg, kind="stable")[: cfg.grid_starts]]
        pts = np.concatenate([shell, best])
        starts.append(pts)
        qs.append(np.full(len(pts), q))
        ss.append(np.full(len(pts), s))
    P0 = np.concatenate(starts)
    q = np.concatenate(qs)
    s = np.concatenate(ss).astype(float)
    P, cost = _batched_lm(P0, q, s, target, W, valid, sensors, constants, cfg.max_iter, cfg.centered)
    if not np.any(np.isfinite(cost)):
        raise NoConvergence("no localization start reached a finite objective")

    b = int(np.nanargmin(np.where(np.isfinite(cost), cost, np.nan)))
    per_charge = {}
    for qq in cfg.charges:
        sel = (q == qq) & np.isfinite(cost)
        per_charge[float(qq)] = float(cost[sel].min()) if np.any(sel) else float("inf")
    flags = []
    vals = sorted(per_charge.values())
    if len(vals) > 1 and abs(vals[1] - vals[0]) <= cfg.tie_rtol * max(abs(vals[0]), 1e-300):
        flags.append(POLARITY_AMBIGUOUS)

    r_best = P[b]
    F, J = forward_jacobian(r_best, sensors, q[b], constants, cfg.centered)
    Jw = (W @ np.where(valid[:, None], s[b] * J, 0.0))[valid]
    cov, sp, axes, cflags = _covariance(Jw)
    flags += cflags
    dof = nv - 3
    obj = float(cost[b])
    p = float(stats.chi2.sf(obj, dof)) if dof > 0 else 1.0
    sbar = float(np.prod(sp) ** (1.0 / 3.0))

    sph = to_spherical(r_best, sensors)
    c, R = array_frame(sensors)
    rhat = (r_best - c) / max(np.linalg.norm(r_best - c), 1e-300)
    phihat = np.cross(R[2], rhat)
    if np.linalg.norm(phihat) < 1e-12:
        phihat = R[0]
    phihat = phihat / np.linalg.norm(phihat)
    Q = np.stack([rhat, phihat])
    cov2 = Q @ cov @ Q.T if np.all(np.isfinite(cov)) else np.full((2, 2), np.inf)
    s2 = np.sqrt(np.clip(np.linalg.eigvalsh(cov2), 0, None)) if np.all(np.isfinite(cov2)) else np.array([np.inf, np.inf])

    return LocalizationResult(
        position=r_best,
        objective_min=obj,
        dof=dof,
        p_value=p,
        covariance=cov,
        sigma_principal=sp,
        principal_axes=axes,
        sigma_3d_bar=sbar,
        fwhm=FWHM_PER_SIGMA * sbar,
        charge_polarity_assumed=float(q[b]),
        event_sign=int(s[b]),
        n_valid=nv,
        spherical=sph,
        fwhm_best=FWHM_PER_SIGMA * float(sp[0]),
        fwhm_r_phi=FWHM_PER_SIGMA * float(np.sqrt(np.prod(s2))),
        flags=tuple(flags),
        alternatives=per_charge,
    )


# ---------------------------------------------------------------------------
# accuracy


def sigma_bar_field(points, sensors, sigma_f, charge=-1.0, constants=DEFAULT_CONSTANTS) -> np.ndarray:
    """Geometric-mean principal error (nm) at each point for uniform per-component error.

    NaN within one bond length of a sensor; inf where the information matrix
    has rank < 3.
    """
    pts = np.asarray(points, dtype=float)
    _, rho, J = _forward(pts, sensors, charge, constants, jacobian=True)
    H = np.einsum("...ki,...kj->...ij", J, J) / sigma_f**2
    w = np.linalg.eigvalsh(H)
    with np.errstate(divide="ignore", invalid="ignore"):
        singular = w[..., 0] <= 1e-12 * w[..., -1]
        sbar = np.where(singular, np.inf, np.prod(np.where(singular[..., None], 1.0, w), axis=-1) ** (-1.0 / 6.0))
    return np.where(np.min(rho, axis=-1) <= CC_BOND_NM, np.nan, sbar)


def localization_fwhm_at(r, sensors, sigma_f: float, charge: float = -1.0,
                         constants: PhysicsConstants = DEFAULT_CONSTANTS) -> float:
    """FWHM (nm) of the 3D error ellipsoid's geometric-mean axis at ``r``.

    Returns +inf when the information matrix is singular.
    """
    r = np.asarray(r, dtype=float)
    _, rho = _forward(r, sensors, charge, constants)
    _check(rho)
    return float(FWHM_PER_SIGMA * sigma_bar_field(r, sensors, sigma_f, charge, constants))


@dataclass(frozen=True)
class GridSpec:
    origin: tuple
    spacing: float
    dims: tuple

    def __post_init__(self):
        problems = []
        if len(self.origin) != 3 or not np.all(np.isfinite(self.origin)):
            problems.append(("grid.origin", "must be three finite numbers"))
        if not self.spacing > 0:
            problems.append(("grid.spacing", "must be positive"))
        if len(self.dims) != 3 or any(int(d) < 1 for d in self.dims):
            problems.append(("grid.dims", "must be three positive integers"))
        if problems:
            raise ConfigInvalid(problems)

    @classmethod
    def cube(cls, center, half_width: float, n: int) -> "GridSpec":
        spacing = 2 * half_width / (n - 1) if n > 1 else 1.0
        origin = tuple(float(c) - half_width for c in center)
        return cls(origin, float(spacing), (n, n, n))

    @property
    def voxel_volume(self) -> float:
        return self.spacing**3

    def axes(self):
        return [self.origin[k] + self.spacing * np.arange(self.dims[k]) for k in range(3)]

    def points(self) -> np.ndarray:
        x, y, z = self.axes()
        return np.stack(np.meshgrid(x, y, z, indexing="ij"), axis=-1)


ISO_LEVELS = (10.0, 1.0, 0.154)


@dataclass
class AccuracyMap:
    grid: GridSpec
    fwhm_values: np.ndarray  # dims, nm; NaN at invalid voxels

    def region(self, level: float) -> np.ndarray:
        with np.errstate(invalid="ignore"):
            return self.fwhm_values <= level

    def volume(self, level: float) -> float:
        return float(np.count_nonzero(self.region(level)) * self.grid.voxel_volume)

    def isoregion_volumes(self, levels=ISO_LEVELS) -> dict:
        return {float(lv): self.volume(lv) for lv in levels}


def accuracy_map(sensors, sigma_f: float, grid: GridSpec, charge: float = -1.0,
                 constants: PhysicsConstants = DEFAULT_CONSTANTS, chunk: int = 32768) -> AccuracyMap:
    if not sigma_f > 0:
        raise ConfigInvalid([("sigma_f", "must be positive")])
    pts = grid.points().reshape(-1, 3)
    out = np.empty(len(pts))
    slices = [slice(a, min(a + chunk, len(pts))) for a in range(0, len(pts), chunk)]

    def work(sl):
        out[sl] = FWHM_PER_SIGMA * sigma_bar_field(pts[sl], sensors, sigma_f, charge, constants)

    workers = n_threads()
    if workers > 1:
        with ThreadPoolExecutor(workers) as ex:
            list(ex.map(work, slices))
    else:
        for sl in slices:
            work(sl)
    return AccuracyMap(grid, out.reshape(tuple(int(d) for d in grid.dims)))
