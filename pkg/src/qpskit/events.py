"""Correlated jump detection, folding, clustering and flip assignment.

A jump vector stacks (df_par, df_perp) for every sensor, so with n sensors
it has 2n components. Components from sensors that were missing at either
end of a difference are NaN and are excluded from every statistic.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from functools import lru_cache
from typing import Sequence

import numpy as np
from scipy import stats
from scipy.special import logsumexp

from .errors import AMBIGUOUS_ASSIGNMENT, NoValidPivot
from .telegraph import NoiseModel, SpectralSample, stack_samples


@dataclass(frozen=True)
class DiffEvent:
    epoch: int
    vector: np.ndarray  # (2n,) MHz, NaN where invalid
    valid_mask: np.ndarray  # (n,) per sensor
    folded: bool = False
    fold_sign: int = 1
    pivot: int | None = None

    @property
    def component_mask(self) -> np.ndarray:
        return np.repeat(self.valid_mask, 2)

    @property
    def n_valid(self) -> int:
        return 2 * int(np.count_nonzero(self.valid_mask))

    @property
    def raw_vector(self) -> np.ndarray:
        """The measured (unfolded) jump."""
        return self.fold_sign * self.vector


@dataclass(frozen=True)
class DetectorConfig:
    jump_threshold_sigma: float = 4.0
    cluster_radius_sigma: float = 3.0
    min_repeats: int = 3
    fold_pivot: tuple | None = None  # component ranking; None picks by data
    min_valid_components: int = 4
    split_bandwidth_sigma: float = 1.0  # kernel width for density-peak splitting
    split_separation_sigma: float | None = 3.0  # None disables splitting
    merge_gate: float = 0.5  # relative mean distance for merging by flip alternation
    fixed_strength: float = 3.0  # clusters this many detector radii strong skip mixture refinement

    def __post_init__(self):
        if not self.jump_threshold_sigma > 0 or not self.cluster_radius_sigma > 0:
            raise ValueError("thresholds must be positive")
        if self.min_repeats < 2:
            raise ValueError("min_repeats must be at least 2")


@dataclass
class DefectCluster:
    id: int
    member_events: list
    mean_vector: np.ndarray
    vector_std: np.ndarray
    count_plus: int
    count_minus: int
    n_valid: np.ndarray  # per-component (possibly fractional) sample count behind the mean
    pivot: int = 0

    @property
    def size(self) -> int:
        return len(self.member_events)

    def standard_error(self, noise: NoiseModel) -> np.ndarray:
        """Per-component standard error of ``mean_vector`` under the noise model."""
        with np.errstate(divide="ignore"):
            return np.where(self.n_valid > 0, noise.diff_sigma / np.sqrt(self.n_valid), np.inf)

    def scatter_covariance(self, noise: NoiseModel) -> np.ndarray:
        """Empirical (2n, 2n) covariance of single member jumps.

        Coincident flips of other defects, and the dependence of a strong
        defect's jump on the other defects' states, spread members well
        beyond the instrument noise and correlate the components. Variances
        are floored at the differential noise level, entries use
        pairwise-complete members, and the result is projected to positive
        definite. Components no member observed get NaN rows.
        """
        X = np.array([m.vector for m in self.member_events], dtype=float)
        V = np.isfinite(X)
        n = V.sum(axis=0).astype(float)
        nij = V.T.astype(float) @ V
        mu = np.where(V, X, 0.0).sum(axis=0) / np.maximum(n, 1)
        D = np.where(V, X - mu, 0.0)
        S = (D.T @ D) / np.maximum(nij - 1, 1)
        var = np.diag(S).copy()
        scale = np.sqrt(np.maximum(var, noise.diff_sigma**2) / np.maximum(var, 1e-300))
        S = S * scale[:, None] * scale[None, :]
        ok = n > 0
        if np.any(ok):
            w, U = np.linalg.eigh(S[np.ix_(ok, ok)])
            S[np.ix_(ok, ok)] = (U * np.maximum(w, 1e-9 * w.max())) @ U.T
        S[~ok, :] = np.nan
        S[:, ~ok] = np.nan
        return S

    def mean_covariance(self, noise: NoiseModel) -> np.ndarray:
        """Empirical (2n, 2n) covariance of ``mean_vector`` (see scatter_covariance)."""
        V = np.isfinite(np.array([m.vector for m in self.member_events], dtype=float))
        n = V.sum(axis=0).astype(float)
        nij = V.T.astype(float) @ V
        return self.scatter_covariance(noise) * nij / np.maximum(np.outer(n, n), 1.0)


@dataclass(frozen=True)
class Assignment:
    epoch: int
    cluster_id: int
    direction: int  # +1 charging, -1 discharging (relative to the cluster mean)
    distance: float  # whitened distance to the matched mean (units of sqrt(2) sigma_f)
    ambiguous: bool = False
    paired: bool = False

    @property
    def flags(self) -> tuple:
        return (AMBIGUOUS_ASSIGNMENT,) if self.ambiguous else ()


# ---------------------------------------------------------------------------
# detection


def _as_values(samples) -> np.ndarray:
    if isinstance(samples, np.ndarray):
        return np.asarray(samples, dtype=float)
    return stack_samples(list(samples))


def differentiate(samples: Sequence[SpectralSample] | np.ndarray) -> list[DiffEvent]:
    """Consecutive-epoch differences; a sensor missing at either end is invalid."""
    values = _as_values(samples)
    if len(values) < 2:
        return []
    present = np.all(np.isfinite(values), axis=-1)
    valid = present[1:] & present[:-1]
    d = values[1:] - values[:-1]
    d[~valid] = np.nan
    T, n = valid.shape
    flat = d.reshape(T, 2 * n)
    return [DiffEvent(t + 1, flat[t].copy(), valid[t].copy()) for t in range(T)]


@lru_cache(maxsize=None)
def chi_threshold(n_components: int, threshold_sigma: float) -> float:
    """Whitened-norm threshold with the false-alarm rate of a two-sided ``threshold_sigma`` test."""
    tail = 2.0 * stats.norm.sf(threshold_sigma)
    return float(np.sqrt(stats.chi2.isf(tail, n_components)))


def jump_statistic(event: DiffEvent, noise: NoiseModel) -> float:
    v = event.vector[event.component_mask]
    return float(np.sqrt(np.sum((v / noise.diff_sigma) ** 2)))


def detect_jumps(candidates: Sequence[DiffEvent], noise: NoiseModel, cfg: DetectorConfig = DetectorConfig()):
    out = []
    for ev in candidates:
        m = ev.n_valid
        if m == 0:
            continue
        if jump_statistic(ev, noise) > chi_threshold(m, cfg.jump_threshold_sigma):
            out.append(ev)
    return out


# ---------------------------------------------------------------------------
# folding


def pivot_order(events: Sequence[DiffEvent]) -> tuple:
    """Rank components for folding: df_par by RMS over valid entries, then df_perp."""
    if not events:
        return ()
    X = np.array([e.raw_vector for e in events])
    with np.errstate(invalid="ignore"):
        rms = np.sqrt(np.nanmean(X**2, axis=0))
    rms = np.nan_to_num(rms, nan=-1.0)
    par = sorted(range(0, X.shape[1], 2), key=lambda k: (-rms[k], k))
    perp = sorted(range(1, X.shape[1], 2), key=lambda k: (-rms[k], k))
    return tuple(par + perp)


def fold(event: DiffEvent, cfg: DetectorConfig = DetectorConfig(), order: Sequence[int] | None = None) -> DiffEvent:
    """Flip the jump so that its pivot component is non-negative."""
    order = cfg.fold_pivot if order is None else order
    if order is None:
        order = tuple(range(event.vector.size))
    raw = event.raw_vector
    mask = event.component_mask
    for k in order:
        if mask[k]:
            s = -1 if raw[k] < 0 else 1
            return replace(event, vector=s * raw, folded=True, fold_sign=s, pivot=int(k))
    raise NoValidPivot(f"epoch {event.epoch}: no valid pivot component")


def fold_events(events: Sequence[DiffEvent], cfg: DetectorConfig = DetectorConfig()) -> list[DiffEvent]:
    order = cfg.fold_pivot if cfg.fold_pivot is not None else pivot_order(events)
    out = []
    for e in events:
        try:
            out.append(fold(e, cfg, order))
        except NoValidPivot:
            continue
    return out


# ---------------------------------------------------------------------------
# clustering


def _pair_distances(X: np.ndarray, V: np.ndarray, min_common: int, chunk: int = 256):
    """Sign-invariant Chebyshev distances over commonly valid components.

    Returns (distance, sign) matrices; sign is +1 when x_i ~ x_j and -1 when x_i ~ -x_j.
    Pairs sharing fewer than ``min_common`` valid components get distance inf.
    """
    N = len(X)
    Z = np.nan_to_num(X)
    dist = np.full((N, N), np.inf)
    sign = np.ones((N, N), dtype=np.int8)
    for a in range(0, N, chunk):
        b = min(N, a + chunk)
        common = V[a:b, None, :] & V[None, :, :]
        dp = np.where(common, np.abs(Z[a:b, None, :] - Z[None, :, :]), 0.0).max(axis=-1)
        dm = np.where(common, np.abs(Z[a:b, None, :] + Z[None, :, :]), 0.0).max(axis=-1)
        ok = common.sum(axis=-1) >= min_common
        dist[a:b] = np.where(ok, np.minimum(dp, dm), np.inf)
        sign[a:b] = np.where(dm < dp, -1, 1)
    return dist, sign


def _pair_sqdist(X: np.ndarray, V: np.ndarray, min_common: int, chunk: int = 256):
    """Sign-invariant squared Euclidean distances over commonly valid components."""
    N = len(X)
    Z = np.nan_to_num(X)
    d2 = np.full((N, N), np.inf)
    sign = np.ones((N, N), dtype=np.int8)
    for a in range(0, N, chunk):
        b = min(N, a + chunk)
        common = V[a:b, None, :] & V[None, :, :]
        dp = np.where(common, (Z[a:b, None, :] - Z[None, :, :]) ** 2, 0.0).sum(axis=-1)
        dm = np.where(common, (Z[a:b, None, :] + Z[None, :, :]) ** 2, 0.0).sum(axis=-1)
        ok = common.sum(axis=-1) >= min_common
        d2[a:b] = np.where(ok, np.minimum(dp, dm), np.inf)
        sign[a:b] = np.where(dm < dp, -1, 1)
    return d2, sign


def _alternation_breaks(signs: np.ndarray) -> float:
    """Fraction of consecutive flips with the same direction (0 for a clean two-state trace)."""
    return float(np.mean(signs[1:] == signs[:-1])) if len(signs) > 1 else 0.0


def _density_peaks(X: np.ndarray, V: np.ndarray, epochs: np.ndarray, bandwidth: float, separation: float,
                   min_common: int, relative_gate: float = 0.25, max_breaks: float = 0.15):
    """Split points at isolated maxima of a Gaussian kernel density.

    Every point links to its nearest neighbour of higher density; points
    further than ``separation`` from any denser point start a new group.
    Groups are then merged while their means are within ``separation`` or
    statistically indistinguishable. Groups within ``relative_gate`` of their
    magnitude are also merged when the combined flips still alternate in
    direction (at most ``max_breaks`` repeats), as a strong defect's jump
    shifts with the state of the others while a second defect's flips would
    interleave at random. Returns (labels, align) where align is the sign that
    maps each point onto its group's orientation, i.e. the flip direction.
    """
    N = len(X)
    d2, sign = _pair_sqdist(X, V, min_common)
    with np.errstate(over="ignore"):
        rho = np.exp(-d2 / (2.0 * bandwidth**2)).sum(axis=1)
    order = np.lexsort((np.arange(N), -rho))
    label = np.full(N, -1)
    align = np.ones(N, dtype=int)
    n_groups = 0
    for rank, i in enumerate(order):
        if rank:
            above = order[:rank]
            j = above[np.argmin(d2[i, above])]
            if d2[i, j] <= separation**2:
                label[i] = label[j]
                align[i] = align[j] * sign[i, j]
                continue
        label[i] = n_groups
        n_groups += 1

    m = X.shape[1]
    by_time = np.argsort(epochs, kind="stable")
    while n_groups > 1:
        means = np.array([np.nanmean(align[label == g, None] * X[label == g], axis=0) for g in range(n_groups)])
        sizes = np.bincount(label, minlength=n_groups).astype(float)
        gd, gs = _pair_sqdist(means, np.isfinite(means), min_common)
        np.fill_diagonal(gd, np.inf)
        limit = np.maximum(separation**2, (1 / sizes[:, None] + 1 / sizes[None, :]) * stats.chi2.ppf(0.999, m))
        excess = gd - limit
        a, b = np.unravel_index(np.argmin(excess), excess.shape)
        if excess[a, b] > 0:
            mag2 = np.nansum(means**2, axis=1)
            gate = gd <= relative_gate**2 * np.minimum.outer(mag2, mag2)
            a = None
            for flat in np.argsort(gd, axis=None, kind="stable"):
                i, j = np.unravel_index(flat, gd.shape)
                if not gate[i, j]:
                    break
                if i > j:
                    continue
                t = by_time[(label[by_time] == i) | (label[by_time] == j)]
                signs = np.where(label[t] == j, gs[i, j], 1) * align[t]
                if _alternation_breaks(signs) <= max_breaks:
                    a, b = i, j
                    break
            if a is None:
                break
        a, b = min(a, b), max(a, b)
        align[label == b] *= gs[a, b]
        label[label == b] = a
        label[label > b] -= 1
        n_groups -= 1
    return label, align


def _summarize(cid: int, members: list[DiffEvent], n_comp: int) -> DefectCluster:
    X = np.array([m.vector for m in members]).reshape(len(members), n_comp)
    valid = np.isfinite(X)
    n_valid = valid.sum(axis=0).astype(float)
    with np.errstate(invalid="ignore", divide="ignore"):
        mean = np.where(n_valid > 0, np.nansum(X, axis=0) / np.maximum(n_valid, 1), np.nan)
        dev = np.where(valid, X - mean, 0.0)
        std = np.where(n_valid > 1, np.sqrt((dev**2).sum(axis=0) / np.maximum(n_valid - 1, 1)), np.nan)
    plus = sum(1 for m in members if m.fold_sign > 0)
    pivot = members[0].pivot if members else 0
    return DefectCluster(cid, members, mean, std, plus, len(members) - plus, n_valid, pivot)


def _fold_members(events: list[DiffEvent], align: np.ndarray, n_comp: int):
    """Fold cluster members consistently; returns (kept, rejected).

    ``align`` gives the sign that brings each raw jump onto the cluster
    orientation. The pivot of each member is its valid component of largest
    |cluster mean|; members whose aligned pivot is negative disagree with the
    cluster and are rejected.
    """
    A = np.array([s * e.raw_vector for s, e in zip(align, events)])
    with np.errstate(invalid="ignore"):
        mean = np.nanmean(A, axis=0)
    order = np.argsort(-np.nan_to_num(np.abs(mean), nan=-1.0), kind="stable")
    if np.nan_to_num(mean[order[0]]) < 0:
        align = -align
    kept, rejected = [], []
    for s, e in zip(align, events):
        raw = e.raw_vector
        mask = e.component_mask
        piv = next((int(k) for k in order if mask[k]), None)
        if piv is None:
            rejected.append(e)
            continue
        v = s * raw
        if v[piv] < 0:
            rejected.append(e)
            continue
        kept.append(replace(e, vector=v, folded=True, fold_sign=int(s), pivot=piv))
    return kept, rejected


def cluster_events(events: Sequence[DiffEvent], noise: NoiseModel, cfg: DetectorConfig = DetectorConfig()):
    """Density-based clustering of folded jumps.

    Two jumps are neighbours when every commonly valid component differs by at
    most ``cluster_radius_sigma * sqrt(2) * sigma_f``, comparing against both
    the jump and its mirror image so that a pivot sitting near zero cannot
    split one defect into two clusters. Core points need ``min_repeats``
    neighbours (self included). Each density-connected group is then split
    at the peaks of a Gaussian kernel density (width
    ``split_bandwidth_sigma``), since noise crossings of many weak defects
    can connect clusters that are well separated relative to the noise.

    Returns ``(clusters, unassociated)``.
    """
    events = sorted(events, key=lambda e: e.epoch)
    if not events:
        return [], []
    n_comp = events[0].vector.size
    usable = [e for e in events if e.n_valid >= cfg.min_valid_components]
    unassociated = [e for e in events if e.n_valid < cfg.min_valid_components]
    if not usable:
        return [], unassociated

    X = np.array([e.raw_vector for e in usable])
    V = np.array([e.component_mask for e in usable])
    eps = cfg.cluster_radius_sigma * noise.diff_sigma
    dist, sign = _pair_distances(X, V, cfg.min_valid_components)
    nbrs = [np.flatnonzero(row <= eps) for row in dist]
    core = np.array([len(nb) >= cfg.min_repeats for nb in nbrs])

    N = len(usable)
    label = np.full(N, -1)
    align = np.zeros(N, dtype=int)
    k = 0
    for i in range(N):
        if label[i] != -1 or not core[i]:
            continue
        label[i], align[i] = k, 1
        queue = [i]
        while queue:
            p = queue.pop(0)
            if not core[p]:
                continue
            for q in nbrs[p]:
                if label[q] == -1:
                    label[q] = k
                    align[q] = align[p] * sign[p, q]
                    if core[q]:
                        queue.append(q)
        k += 1

    groups = []
    unassociated += [usable[i] for i in np.flatnonzero(label == -1)]
    for c in range(k):
        idx = np.flatnonzero(label == c)
        if cfg.split_separation_sigma is None or len(idx) < 2 * cfg.min_repeats:
            groups.append((idx, align[idx]))
            continue
        # chains of neighbours can bridge several weak defects; split at density peaks
        sub, sub_align = _density_peaks(X[idx] / noise.diff_sigma, V[idx], np.array([usable[i].epoch for i in idx]),
                                        cfg.split_bandwidth_sigma, cfg.split_separation_sigma,
                                        cfg.min_valid_components)
        groups += [(idx[sub == g], sub_align[sub == g]) for g in range(sub.max() + 1)]

    clusters = []
    for idx, al in groups:
        kept, rejected = _fold_members([usable[i] for i in idx], al, n_comp)
        unassociated += rejected
        if len(kept) < cfg.min_repeats:
            unassociated += kept
            continue
        clusters.append(kept)
    clusters = _merge_alternating(clusters, n_comp, noise, cfg)
    clusters.sort(key=lambda ms: ms[0].epoch)
    unassociated.sort(key=lambda e: e.epoch)
    return [_summarize(i, ms, n_comp) for i, ms in enumerate(clusters)], unassociated


def _repeats(members) -> int:
    """Consecutive flips with the same direction in time order."""
    signs = np.array([m.fold_sign for m in sorted(members, key=lambda m: m.epoch)])
    return int(np.count_nonzero(signs[1:] == signs[:-1]))


def _alternates(first: list, second: list, sign: float, max_breaks: float) -> bool:
    """True when interleaving two pieces removes repeated flip directions."""
    if sign < 0:
        second = [replace(e, fold_sign=-e.fold_sign) for e in second]
    union = _repeats(first + second)
    gain = _repeats(first) + _repeats(second) - union
    return gain >= 1 and union <= max_breaks * (len(first) + len(second) - 1)


def _near(offset: np.ndarray, mean: np.ndarray, cfg: DetectorConfig) -> bool:
    """True when ``offset`` matches +/- ``mean`` within the merge gate (whitened units)."""
    mask = np.isfinite(offset) & np.isfinite(mean)
    if np.count_nonzero(mask) < cfg.min_valid_components:
        return False
    o, m = offset[mask], mean[mask]
    tol = max(cfg.merge_gate * np.linalg.norm(m), cfg.split_separation_sigma or 0.0)
    return min(np.linalg.norm(o - m), np.linalg.norm(o + m)) <= tol


def _merge_alternating(groups: list, n_comp: int, noise: NoiseModel, cfg: DetectorConfig,
                       max_breaks: float = 0.15) -> list:
    """Merge clusters that are pieces of one defect's alternating trace.

    A defect's flips alternate in direction, so the jumps missing from one
    piece leave repeated directions that the other piece fills in. Merging
    such pieces removes repeats, while interleaving the flips of an
    unrelated defect adds about one repeat per flip. Pairs whose means lie
    within ``merge_gate`` of their magnitude are merged, nearest first, when
    the union removes repeats and at most ``max_breaks`` of its consecutive
    flips share a direction. Pairs whose means differ by about the mean of
    a third cluster are left alone: those are coincident flips of two
    defects, which alternate with both.
    """
    groups = [list(g) for g in groups]
    sd = noise.diff_sigma
    while len(groups) > 1:
        means = np.array([_summarize(0, g, n_comp).mean_vector for g in groups]) / sd
        gd, gs = _pair_sqdist(means, np.isfinite(means), cfg.min_valid_components)
        mag2 = np.nansum(means**2, axis=1)
        gate = gd <= cfg.merge_gate**2 * np.minimum.outer(mag2, mag2)
        np.fill_diagonal(gate, False)
        merged = False
        for flat in np.argsort(np.where(gate, gd, np.inf), axis=None, kind="stable"):
            a, b = np.unravel_index(flat, gd.shape)
            if not gate[a, b]:
                break
            if a > b:
                continue
            flipped = [replace(e, vector=-e.vector, fold_sign=-e.fold_sign) for e in groups[b]] \
                if gs[a, b] < 0 else groups[b]
            # coincident flips with a third defect sit one of its jumps away
            offset = means[a] - gs[a, b] * means[b]
            combination = any(_near(offset, means[k], cfg) for k in range(len(groups)) if k not in (a, b))
            if not combination and _alternates(groups[a], groups[b], gs[a, b], max_breaks):
                union = sorted(groups[a] + flipped, key=lambda e: e.epoch)
                kept, _ = _fold_members(union, np.array([e.fold_sign for e in union]), n_comp)
                if len(kept) < len(union):
                    continue
                groups[a] = kept
                del groups[b]
                merged = True
                break
        if not merged:
            break
    return groups


def refine_clusters(candidates: Sequence[DiffEvent], clusters: Sequence[DefectCluster], noise: NoiseModel,
                    cfg: DetectorConfig = DetectorConfig(), max_iter: int = 200, tol: float = 1e-10):
    """Re-estimate cluster means from every candidate with a Gaussian mixture.

    Jumps that barely pass the detector are a biased sample of a weak
    defect's jumps. Fitting all candidates with a zero-mean noise class plus
    a +/- mean pair per cluster (fixed isotropic noise) removes that
    selection bias. A fixed outlier class, as likely as a class mean at the
    detector's radius, absorbs coincident flips of several defects so they
    do not pull any mean. Members become the candidates whose most likely
    class is the cluster; means are the mixture estimates. Components whose
    mean ends inside the cluster radius of zero are dropped.

    Clusters stronger than ``fixed_strength`` detector radii are always
    detected, so they have no selection bias; their jumps also spread with
    the state of the other defects, which an isotropic component would carve
    into pieces. They enter the mixture with fixed means and keep their
    members.
    """
    if not clusters or not candidates:
        return list(clusters)
    candidates = sorted(candidates, key=lambda e: e.epoch)
    n_comp = candidates[0].vector.size
    sd = noise.diff_sigma
    X = np.array([e.raw_vector for e in candidates]) / sd
    V = np.isfinite(X)
    Z = np.nan_to_num(X)
    M = np.array([np.nan_to_num(c.mean_vector) for c in clusters]) / sd
    K = len(M)
    fixed = np.array([np.linalg.norm(M[k]) >= cfg.fixed_strength
                      * chi_threshold(int(np.count_nonzero(np.isfinite(c.mean_vector))), cfg.jump_threshold_sigma)
                      for k, c in enumerate(clusters)])
    n_cls = 2 + 2 * K  # noise, +means, -means, outlier
    log_pi = np.log(np.full(n_cls, 1.0 / n_cls))
    m_valid = V.sum(axis=1)
    gate = np.array([-0.5 * chi_threshold(int(m), cfg.jump_threshold_sigma) ** 2 if m else 0.0 for m in m_valid])

    def loglik(M):
        ll = np.empty((len(Z), n_cls))
        ll[:, 0] = -0.5 * np.sum(np.where(V, Z, 0.0) ** 2, axis=1)
        for s, off in ((1.0, 1), (-1.0, 1 + K)):
            diff = Z[:, None, :] - s * M[None, :, :]
            ll[:, off:off + K] = -0.5 * np.sum(np.where(V[:, None, :], diff, 0.0) ** 2, axis=2)
        ll[:, -1] = gate
        return ll

    prev = -np.inf
    for _ in range(max_iter):
        ll = loglik(M) + log_pi
        norm = logsumexp(ll, axis=1, keepdims=True)
        R = np.exp(ll - norm)
        Rp, Rm = R[:, 1:1 + K], R[:, 1 + K:1 + 2 * K]
        w = Rp + Rm
        num = (Rp - Rm).T @ np.where(V, Z, 0.0)
        den = w.T @ V.astype(float)
        M = np.where((den > 0) & ~fixed[:, None], num / np.maximum(den, 1e-300), M)
        pi0 = R[:, 0].mean()
        pic = np.maximum(w.mean(axis=0) / 2, 1e-300)
        pio = R[:, -1].mean()
        log_pi = np.log(np.maximum(np.concatenate([[pi0], pic, pic, [pio]]), 1e-300))
        total = float(norm.sum())
        if total - prev < tol * max(1.0, abs(total)):
            break
        prev = total

    best = np.argmax(ll, axis=1)
    taken = {e.epoch for c, cl in zip(fixed, clusters) if c for e in cl.member_events}
    best[[e.epoch in taken for e in candidates]] = 0
    out = []
    for c in range(K):
        if fixed[c]:
            out.append(replace(clusters[c], id=len(out)))
            continue
        idx = np.flatnonzero((best == 1 + c) | (best == 1 + K + c))
        if len(idx) < cfg.min_repeats:
            continue
        members = [candidates[i] for i in idx]
        align = np.where(best[idx] == 1 + c, 1, -1)
        kept, _ = _fold_members(members, align, n_comp)
        # a mean inside the cluster radius of zero cannot be told from no jump
        if len(kept) < cfg.min_repeats or np.nanmax(np.abs(M[c])) < cfg.cluster_radius_sigma:
            continue
        cl = _summarize(len(out), kept, n_comp)
        mean = M[c] * sd
        # keep the orientation chosen by the folded members
        if np.nansum(mean * np.nan_to_num(cl.mean_vector)) < 0:
            mean = -mean
        cl.mean_vector = np.where(den[c] > 0, mean, np.nan)
        cl.n_valid = den[c].copy()
        out.append(cl)
    return out


# ---------------------------------------------------------------------------
# assignment


class _Metric:
    """Mahalanobis distances to a stack of +/- means, with Cholesky factors cached per validity mask."""

    def __init__(self, means, covs):
        self.means = means
        self.covs = covs
        self._cache = {}

    def factor(self, mask):
        key = mask.tobytes()
        L = self._cache.get(key)
        if L is None:
            L = np.linalg.cholesky(self.covs[:, mask][:, :, mask])
            self._cache[key] = L
        return L

    def logdet(self, mask):
        """log det of each covariance restricted to ``mask``."""
        return 2.0 * np.log(np.diagonal(self.factor(mask), axis1=1, axis2=2)).sum(axis=1)

    def __call__(self, x, mask):
        L = self.factor(mask)
        xm = x[mask]
        mm = self.means[:, mask]
        dp = np.linalg.norm(np.linalg.solve(L, (xm - mm)[..., None])[..., 0], axis=1)
        dm = np.linalg.norm(np.linalg.solve(L, (xm + mm)[..., None])[..., 0], axis=1)
        return dp, dm


def assign_events_to_clusters(jumps: Sequence[DiffEvent], clusters: Sequence[DefectCluster], noise: NoiseModel,
                              cfg: DetectorConfig = DetectorConfig(), allow_pairs: bool = True,
                              n_epochs: int | None = None):
    """Attribute each jump to the most likely cluster within the assignment radius.

    Distances are Mahalanobis under each cluster's member scatter (never
    tighter than the instrument noise), over the valid components; the
    radius is the chi quantile the detector uses, so a true flip escapes its
    cluster with about the detector's per-epoch tail probability. Candidates
    inside the radius are ranked by Gaussian log-likelihood with the
    cluster's flip rate (members per epoch) as prior. The sign of the match
    gives the flip direction. When ``allow_pairs``, two simultaneous flips
    compete on the same footing, with the product of the two rates as prior.
    ``n_epochs`` sets the rates; by default it is taken from the latest epoch
    seen. Returns ``(assignments, unassigned)`` sorted by epoch.
    """
    assignments, unassigned = [], []
    if not clusters:
        return assignments, sorted(jumps, key=lambda e: e.epoch)
    M = np.array([c.mean_vector for c in clusters])
    S = np.array([c.scatter_covariance(noise) for c in clusters])
    ids = [c.id for c in clusters]
    K = len(M)
    if n_epochs is None:
        n_epochs = 1 + max([e.epoch for e in jumps] + [m.epoch for c in clusters for m in c.member_events])
    log_rate = np.log(np.clip([c.size / max(n_epochs, 1) for c in clusters], 1e-12, 0.5))
    known = np.all(np.isfinite(M), axis=0)
    single_metric = _Metric(np.nan_to_num(M), np.nan_to_num(S))
    if allow_pairs and K > 1:
        ia, ib = np.triu_indices(K, 1)
        pair_metric = _Metric(np.nan_to_num(np.concatenate([M[ia] + M[ib], M[ia] - M[ib]])),
                              np.nan_to_num(np.concatenate([S[ia] + S[ib], S[ia] + S[ib]])))
        pair_index = [(a, b, 1) for a, b in zip(ia, ib)] + [(a, b, -1) for a, b in zip(ia, ib)]
        pair_log_rate = np.tile(log_rate[ia] + log_rate[ib], 2)

    for ev in sorted(jumps, key=lambda e: e.epoch):
        raw = ev.raw_vector
        mask = ev.component_mask & known
        m = int(np.count_nonzero(mask))
        if m < cfg.min_valid_components:
            unassigned.append(ev)
            continue
        radius = chi_threshold(m, cfg.jump_threshold_sigma)
        dp, dm = single_metric(raw, mask)
        d = np.minimum(dp, dm)
        within = np.flatnonzero(d <= radius)
        # -2 log posterior, up to a shared constant
        score = d**2 + single_metric.logdet(mask) - 2.0 * log_rate
        single = within[np.argmin(score[within])] if len(within) else None
        pair = None
        if allow_pairs and K > 1:
            pp, pm = pair_metric(raw, mask)
            dc = np.minimum(pp, pm)
            hits = np.flatnonzero(dc <= radius)
            if len(hits):
                pscore = dc**2 + pair_metric.logdet(mask) - 2.0 * pair_log_rate
                pair = hits[np.argmin(pscore[hits])]
                if single is not None and pscore[pair] >= score[single]:
                    pair = None
        if pair is not None:
            a, b, rel = pair_index[pair]
            sa = 1 if pp[pair] <= pm[pair] else -1
            amb = len(hits) > 1
            assignments.append(Assignment(ev.epoch, ids[a], sa, float(dc[pair]), amb, paired=True))
            assignments.append(Assignment(ev.epoch, ids[b], sa * rel, float(dc[pair]), amb, paired=True))
        elif single is not None:
            direction = 1 if dp[single] <= dm[single] else -1
            assignments.append(Assignment(ev.epoch, ids[single], direction, float(d[single]), len(within) > 1))
        else:
            unassigned.append(ev)
    return assignments, unassigned


def prune_combinations(clusters: Sequence[DefectCluster], noise: NoiseModel,
                       cfg: DetectorConfig = DetectorConfig(), max_size_ratio: float = 0.5,
                       level: float = 0.999) -> tuple[list, list]:
    """Drop clusters made of coincident flips of two larger clusters.

    Two defects flipping in the same epoch repeat often enough to form a
    small cluster of their own, but never more often than the rarer of the
    two flips. Clusters are visited from largest to smallest; one is dropped
    when its mean matches a signed sum of two already kept means, each from a
    cluster at least ``1 / max_size_ratio`` times its size, within the
    ``level`` quantile of the combined standard error.
    Returns ``(kept, dropped)``.
    """
    order = sorted(range(len(clusters)), key=lambda i: (-clusters[i].size, clusters[i].id))
    kept, dropped = [], []
    sd = noise.diff_sigma
    for i in order:
        c = clusters[i]
        big = [k for k in kept if c.size <= max_size_ratio * k.size]
        if len(big) < 2:
            kept.append(c)
            continue
        M = np.array([k.mean_vector for k in big]) / sd
        inv_n = 1.0 / np.maximum(np.array([k.n_valid for k in big]), 1e-300)
        ia, ib = np.triu_indices(len(big), 1)
        combos = np.concatenate([M[ia] + M[ib], M[ia] - M[ib]])
        var_ab = np.tile(inv_n[ia] + inv_n[ib], (2, 1))
        x = c.mean_vector / sd
        # coincident flips spread wider than single ones; use the observed scatter
        scatter = np.nan_to_num(c.vector_std / sd, nan=1.0) ** 2
        var = var_ab + np.maximum(scatter, 1.0) / np.maximum(c.n_valid, 1e-300)
        mask = np.isfinite(x) & np.all(np.isfinite(combos), axis=0)
        m = int(np.count_nonzero(mask))
        if m < cfg.min_valid_components:
            kept.append(c)
            continue
        dp = np.sum((x[mask] - combos[:, mask]) ** 2 / var[:, mask], axis=1)
        dm = np.sum((x[mask] + combos[:, mask]) ** 2 / var[:, mask], axis=1)
        match = np.min(np.minimum(dp, dm)) <= stats.chi2.ppf(level, m)
        (dropped if match else kept).append(c)
    kept.sort(key=lambda c: c.id)
    dropped.sort(key=lambda c: c.id)
    return kept, dropped
