"""Parameter estimation from angular power maps and link measurements.

The fitters here invert the generators in :mod:`mmwsim.channel_model`:
path-loss regression, link-state maximum likelihood, cluster detection by
power-weighted K-means, cluster power-fraction marginal likelihood and the
simple moment estimators for cluster counts and angular spreads.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from enum import IntEnum
from pathlib import Path

import numpy as np
from scipy import optimize, special

from .channel_model import BandParameters, LinkState

__all__ = [
    "CellStatus",
    "AngularPowerMap",
    "ClusterEstimate",
    "PathLossSample",
    "PathLossFit",
    "LinkStateFit",
    "ClusterPowerFit",
    "FitError",
    "OutageLocationError",
    "detect_clusters",
    "kmeans_weighted",
    "fit_path_loss",
    "link_state_log_likelihood",
    "fit_link_state",
    "weak_fraction_log_likelihood",
    "weak_fraction_cdf",
    "fit_cluster_power",
    "fit_angular_spread",
    "fit_cluster_count",
    "synthesize_power_map",
    "read_power_map_csv",
    "write_power_map_csv",
    "read_path_loss_csv",
    "write_path_loss_csv",
]

ANGLE_COLUMNS = ("tx_az_deg", "tx_el_deg", "rx_az_deg", "rx_el_deg")
# azimuth dimensions wrap at 360 degrees, elevations do not
_PERIODIC = np.array([True, False, True, False])


class FitError(RuntimeError):
    """A fitter failed to converge or the data cannot identify the model."""


class OutageLocationError(ValueError):
    """The power map holds no valid measurement (location in outage)."""


class CellStatus(IntEnum):
    NOT_MEASURED = 0
    BELOW_THRESHOLD = 1
    POWER = 2


_STATUS_CODES = {"M": CellStatus.NOT_MEASURED, "B": CellStatus.BELOW_THRESHOLD,
                 "P": CellStatus.POWER}
_STATUS_LETTERS = {v: k for k, v in _STATUS_CODES.items()}


@dataclass
class AngularPowerMap:
    """Sampled power over (tx_az, tx_el, rx_az, rx_el), angles in degrees.

    ``power_mw`` is only meaningful where ``status == POWER``.
    """

    angles: np.ndarray
    status: np.ndarray
    power_mw: np.ndarray

    def __post_init__(self):
        self.angles = np.asarray(self.angles, dtype=float).reshape(-1, 4)
        self.angles[:, [0, 2]] = np.mod(self.angles[:, [0, 2]], 360.0)
        self.status = np.asarray(self.status, dtype=np.int8)
        self.power_mw = np.asarray(self.power_mw, dtype=float)
        valid = self.status == CellStatus.POWER
        if np.any(self.power_mw[valid] <= 0):
            raise ValueError("measured power must be > 0")

    @property
    def valid(self) -> np.ndarray:
        return self.status == CellStatus.POWER


@dataclass(frozen=True)
class ClusterEstimate:
    """Detected cluster; angles and spreads in degrees, power in mW."""

    center: tuple[float, float, float, float]
    spread: tuple[float, float, float, float]
    power_mw: float
    power_fraction: float
    n_cells: int


@dataclass(frozen=True)
class PathLossSample:
    distance: float
    path_loss: float
    state: LinkState


@dataclass(frozen=True)
class PathLossFit:
    alpha: float
    beta: float
    sigma: float
    n: int


@dataclass(frozen=True)
class LinkStateFit:
    a_out: float
    b_out: float
    a_los: float
    log_likelihood: float
    at_boundary: tuple[str, ...] = ()


@dataclass(frozen=True)
class ClusterPowerFit:
    r_tau: float
    zeta: float
    log_likelihood: float
    at_boundary: tuple[str, ...] = ()


# ---------------------------------------------------------------------------
# cluster detection

def _diff(x: np.ndarray, c: np.ndarray) -> np.ndarray:
    """Per-dimension differences ``x - c``, wrapped to [-180, 180) on azimuths."""
    d = x - c
    d[..., _PERIODIC] = np.mod(d[..., _PERIODIC] + 180.0, 360.0) - 180.0
    return d


def _circular_center(x: np.ndarray, w: np.ndarray) -> float:
    """Weighted minimiser of the wrapped squared distance on a 360° circle.

    The optimum is the arithmetic mean of one of the ``n`` unwrappings
    obtained by cutting the circle between consecutive sorted points; all of
    them are scored at once with cumulative sums.
    """
    order = np.argsort(x)
    xs, ws = x[order], w[order]
    W = ws.sum()
    sx, sxx = np.dot(ws, xs), np.dot(ws, xs * xs)
    # cut before index i: points 0..i-1 are moved up by 360
    cw = np.concatenate(([0.0], np.cumsum(ws)[:-1]))
    cwx = np.concatenate(([0.0], np.cumsum(ws * xs)[:-1]))
    mean = (sx + 360.0 * cw) / W
    obj = sxx + 720.0 * cwx + 360.0 ** 2 * cw - W * mean ** 2
    return float(np.mod(mean[np.argmin(obj)], 360.0))


def _centroid(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    c = np.empty(4)
    for dim in range(4):
        if _PERIODIC[dim]:
            c[dim] = _circular_center(x[:, dim], w)
        else:
            c[dim] = np.dot(w, x[:, dim]) / w.sum()
    return c


def _sq_dist(x: np.ndarray, centers: np.ndarray) -> np.ndarray:
    return np.sum(_diff(x[:, None, :], centers[None, :, :]) ** 2, axis=2)


def _seed(x, w, k, rng):
    # power-weighted k-means++ style seeding
    idx = [rng.choice(len(x), p=w / w.sum())]
    d2 = _sq_dist(x, x[idx]).min(axis=1)
    for _ in range(1, k):
        p = w * d2
        if p.sum() <= 0:
            idx.append(int(rng.integers(len(x))))
        else:
            idx.append(int(rng.choice(len(x), p=p / p.sum())))
        d2 = np.minimum(d2, _sq_dist(x, x[idx[-1:]])[:, 0])
    return x[idx].copy()


@dataclass
class KMeansResult:
    labels: np.ndarray
    centers: np.ndarray
    objective: float
    history: list[float] = field(default_factory=list)
    empty: bool = False


def kmeans_weighted(x: np.ndarray, w: np.ndarray, k: int,
                    rng: np.random.Generator, max_iter: int = 100,
                    init: np.ndarray | None = None) -> KMeansResult:
    """One power-weighted K-means run with wrapped azimuth distances.

    ``history`` records the objective after every assignment step; it is
    nonincreasing. ``empty`` is set if a cluster lost all its points.
    """
    centers = _seed(x, w, k, rng) if init is None else np.array(init, dtype=float)
    labels = None
    history = []
    for _ in range(max_iter):
        d2 = _sq_dist(x, centers)
        new = np.argmin(d2, axis=1)
        history.append(float(np.dot(w, d2[np.arange(len(x)), new])))
        if labels is not None and np.array_equal(new, labels):
            break
        labels = new
        counts = np.bincount(labels, minlength=k)
        if np.any(counts == 0):
            return KMeansResult(labels, centers, history[-1], history, True)
        centers = np.array([_centroid(x[labels == j], w[labels == j]) for j in range(k)])
    return KMeansResult(labels, centers, history[-1], history, False)


def _spread(x, w, center):
    d = _diff(x, center)
    return np.sqrt(np.einsum("i,ij->j", w, d * d) / w.sum())


def _clipped_spread(x, w, center, clip=0.10):
    # drop the weakest cells while their cumulative power stays within `clip`
    order = np.argsort(w, kind="stable")
    keep = np.ones(len(w), dtype=bool)
    keep[order[np.cumsum(w[order]) <= clip * w.sum()]] = False
    if not keep.any():
        keep[order[-1]] = True
    return _spread(x[keep], w[keep], center)


def _overlapping(c1, s1, c2, s2) -> bool:
    # the two clusters' 2-sigma extents overlap in every dimension
    gap = np.abs(_diff(c1[None, :], c2[None, :])[0])
    return bool(np.all(gap <= 2.0 * (s1 + s2)))


def _grid_steps(angles: np.ndarray) -> np.ndarray:
    """Smallest spacing between distinct grid values per dimension (0 if one value)."""
    steps = np.zeros(4)
    for dim in range(4):
        u = np.unique(np.round(angles[:, dim], 9))
        if u.size < 2:
            continue
        gaps = np.diff(u)
        if _PERIODIC[dim]:
            gaps = np.append(gaps, u[0] + 360.0 - u[-1])
        steps[dim] = gaps.min()
    return steps


def _best_kmeans(x, w, k, restarts, rng):
    best = None
    for _ in range(restarts):
        res = kmeans_weighted(x, w, k, rng)
        if res.empty:
            return res
        if best is None or res.objective < best.objective:
            best = res
    return best


def detect_clusters(pmap: AngularPowerMap, max_clusters: int = 10,
                    restarts: int = 10, clip: float = 0.10,
                    seed: int = 0) -> list[ClusterEstimate]:
    """Find path clusters in a power map.

    K-means is run for K = 1, 2, ... and the clustering of the last K is
    returned before either (i) two clusters' 2-sigma extents overlap in all
    four angular dimensions or (ii) a cluster becomes empty. Reported
    spreads exclude the weakest cells holding ``clip`` of each cluster's
    power.

    The overlap test uses the unclipped rms spread with the grid's
    quantization variance (step^2 / 12) added, since a cluster a few cells
    wide otherwise looks far narrower than the grid can resolve and gets
    split into spurious pieces.
    """
    valid = pmap.valid
    if not valid.any():
        raise OutageLocationError("location in outage: no valid power cell")
    x = pmap.angles[valid]
    w = pmap.power_mw[valid]
    rng = np.random.default_rng(seed)
    quant_var = _grid_steps(pmap.angles) ** 2 / 12.0

    def summarize(labels, centers):
        out = []
        for j in range(len(centers)):
            m = labels == j
            out.append((centers[j], _clipped_spread(x[m], w[m], centers[j], clip),
                        float(w[m].sum()), int(m.sum()),
                        np.sqrt(_spread(x[m], w[m], centers[j]) ** 2 + quant_var)))
        return out

    accepted = summarize(np.zeros(len(x), dtype=int), _centroid(x, w)[None, :])
    for k in range(2, min(max_clusters, len(x)) + 1):
        res = _best_kmeans(x, w, k, restarts, rng)
        if res.empty:
            break
        cand = summarize(res.labels, res.centers)
        if any(_overlapping(a[0], a[4], b[0], b[4])
               for i, a in enumerate(cand) for b in cand[i + 1:]):
            break
        accepted = cand
    total = w.sum()
    accepted.sort(key=lambda c: -c[2])
    return [ClusterEstimate(tuple(map(float, c)), tuple(map(float, s)), p, float(p / total), n)
            for c, s, p, n, _ in accepted]


def synthesize_power_map(centers_deg, spreads_deg, powers_mw, *,
                         tx_az=None, rx_az=None, tx_el=(0.0,), rx_el=(0.0,),
                         threshold_mw: float | None = None,
                         measured: np.ndarray | None = None) -> AngularPowerMap:
    """Render Gaussian clusters onto a measurement grid.

    Each cluster contributes ``power * exp(-sum_d delta_d^2 / (2 s_d^2))``
    at a cell (zero-spread dimensions act as a 5° wide kernel so the grid
    still sees the cluster). Cells below ``threshold_mw`` are marked
    below-threshold; cells where ``measured`` is False are not measured.
    """
    tx_az = np.arange(0.0, 360.0, 10.0) if tx_az is None else np.asarray(tx_az, float)
    rx_az = np.arange(0.0, 360.0, 10.0) if rx_az is None else np.asarray(rx_az, float)
    grid = np.stack(np.meshgrid(tx_az, np.asarray(tx_el, float), rx_az,
                                np.asarray(rx_el, float), indexing="ij"), -1).reshape(-1, 4)
    power = np.zeros(len(grid))
    for c, s, p in zip(np.atleast_2d(centers_deg), np.atleast_2d(spreads_deg),
                       np.atleast_1d(powers_mw)):
        s = np.where(np.asarray(s, float) > 0, s, 5.0)
        d = _diff(grid.copy(), np.asarray(c, float)[None, :])
        power += p * np.exp(-0.5 * np.sum((d / s) ** 2, axis=1))
    if threshold_mw is None:
        threshold_mw = 1e-3 * power.max()
    status = np.where(power >= threshold_mw, CellStatus.POWER, CellStatus.BELOW_THRESHOLD)
    if measured is not None:
        status = np.where(np.asarray(measured, bool), status, CellStatus.NOT_MEASURED)
    return AngularPowerMap(grid, status, np.where(status == CellStatus.POWER, power, 0.0))


# ---------------------------------------------------------------------------
# path loss

def fit_path_loss(samples, state: LinkState | None = None) -> PathLossFit:
    """Least-squares ``PL = alpha + beta * 10 log10(d)``; sigma is the RMS residual.

    ``samples`` is a sequence of :class:`PathLossSample`; when ``state`` is
    given only samples in that state are used.
    """
    if state is not None:
        samples = [s for s in samples if s.state == state]
    d = np.array([s.distance for s in samples], dtype=float)
    pl = np.array([s.path_loss for s in samples], dtype=float)
    if len(d) < 2 or np.unique(d).size < 2:
        raise FitError("path-loss fit needs samples at two or more distinct distances")
    if np.any(d <= 0):
        raise ValueError("distances must be > 0")
    X = np.column_stack([np.ones_like(d), 10.0 * np.log10(d)])
    coef, *_ = np.linalg.lstsq(X, pl, rcond=None)
    resid = pl - X @ coef
    return PathLossFit(float(coef[0]), float(coef[1]),
                       float(np.sqrt(np.mean(resid ** 2))), len(d))


# ---------------------------------------------------------------------------
# link state

_PROB_FLOOR = 1e-300


def link_state_log_likelihood(params, d, states) -> float:
    """Categorical log-likelihood of observed states under the 3-state model."""
    a_out, b_out, a_los = params
    d = np.asarray(d, float)
    states = np.asarray(states)
    p_out = np.maximum(0.0, 1.0 - np.exp(-a_out * d + b_out))
    p_los = (1.0 - p_out) * np.exp(-a_los * d)
    p_nlos = 1.0 - p_out - p_los
    p = np.choose(states.astype(int), [p_out, p_los, p_nlos])
    return float(np.sum(np.log(np.maximum(p, _PROB_FLOOR))))


def fit_link_state(samples, max_iter: int = 4000) -> LinkStateFit:
    """Maximum-likelihood fit of ``(a_out, b_out, a_los)``.

    ``samples`` is a sequence of ``(distance, LinkState)`` pairs. Parameters
    are searched in log space with Nelder-Mead from a data-driven start.
    ``at_boundary`` names parameters that ran into the search box, which
    happens when the data cannot identify them (e.g. no outage observed).
    """
    if len(samples) < 3:
        raise FitError("need at least 3 link-state samples")
    d = np.array([s[0] for s in samples], float)
    st = np.array([int(s[1]) for s in samples])
    lo, hi = np.log([1e-6, 1e-6, 1e-7]), np.log([10.0, 200.0, 10.0])

    out = st == LinkState.OUTAGE
    non_out = ~out
    # starting point: onset just below the nearest outage, LOS decay from
    # the LOS fraction among non-outage links
    onset = d[out].min() * 0.9 if out.any() else d.max()
    a0 = 1.0 / max(np.median(d[out]) - onset, 1.0) if out.any() else 1e-3
    los_frac = np.mean(st[non_out] == LinkState.LOS) if non_out.any() else 0.5
    a_los0 = -np.log(np.clip(los_frac, 1e-3, 0.999)) / max(np.mean(d[non_out]) if non_out.any() else 1.0, 1.0)
    x0 = np.clip(np.log([a0, max(a0 * onset, 1e-3), a_los0]), lo, hi)

    def nll(theta):
        theta = np.clip(theta, lo, hi)
        return -link_state_log_likelihood(np.exp(theta), d, st)

    best = None
    for start in (x0, x0 + np.log([2.0, 2.0, 1.0]), x0 - np.log([2.0, 2.0, 1.0])):
        res = optimize.minimize(nll, start, method="Nelder-Mead",
                                options={"maxiter": max_iter, "xatol": 1e-8, "fatol": 1e-10})
        if best is None or res.fun < best.fun:
            best = res
    if not best.success and best.nit >= max_iter:
        raise FitError(f"link-state fit did not converge: {best.message} "
                       f"(nll={best.fun:.4g}, x={np.exp(best.x)})")
    theta = np.clip(best.x, lo, hi)
    names = ("a_out", "b_out", "a_los")
    edge = tuple(n for n, t, l, h in zip(names, theta, lo, hi)
                 if abs(t - l) < 1e-3 or abs(t - h) < 1e-3)
    a_out, b_out, a_los = np.exp(theta)
    return LinkStateFit(float(a_out), float(b_out), float(a_los), float(-best.fun), edge)


# ---------------------------------------------------------------------------
# cluster power fractions (K = 2)

_LN10_TENTH = 0.1 * math.log(10.0)
_GL_NODES, _GL_WEIGHTS = np.polynomial.legendre.leggauss(64)
# map [-1, 1] -> [0, 1]
_U = 0.5 * (_GL_NODES + 1.0)
_UW = 0.5 * _GL_WEIGHTS


def weak_fraction_log_likelihood(fractions, r_tau: float, zeta: float) -> np.ndarray:
    """Per-sample log density of the weaker-cluster fraction for K = 2.

    With ``g_k = U_k^(r-1) 10^(-0.1 Z_k)`` the weak fraction ``w`` fixes
    ``|ln(g_2/g_1)| = ln((1-w)/w)``. Given ``U_1, U_2`` this pins the
    Gaussian difference ``Z_2 - Z_1 ~ N(0, 2 zeta^2)``, so its density is
    evaluated by change of variables and ``U_1, U_2`` are integrated out
    with a 64 x 64 Gauss-Legendre product rule.
    """
    w = np.asarray(fractions, float)
    x = np.log((1.0 - w) / w)  # >= 0
    jac = 1.0 / (w * (1.0 - w))  # |dx/dw|
    lu = np.log(_U)
    a = (r_tau - 1.0) * (lu[:, None] - lu[None, :])  # (r-1) ln(U1/U2)
    weights = _UW[:, None] * _UW[None, :]
    s = _LN10_TENTH * zeta * math.sqrt(2.0)  # std of 0.1 ln10 (Z2 - Z1)
    # ln(g2/g1) = (r-1) ln(U2/U1) - 0.1 ln10 (Z2 - Z1); |.| = x gives two roots
    # ordered pairs (i, j) and (j, i) give mirrored roots, so keep i <= j
    iu, ju = np.triu_indices(len(_U))
    a = a[iu, ju]
    pw = np.where(iu == ju, 1.0, 2.0) * weights[iu, ju] / (s * math.sqrt(2 * math.pi))
    dens = np.empty_like(w)
    for lo in range(0, w.size, 256):
        xi = x[lo:lo + 256, None]
        z1 = (xi + a) / s
        z2 = (xi - a) / s
        dens[lo:lo + 256] = (np.exp(-0.5 * z1 * z1) + np.exp(-0.5 * z2 * z2)) @ pw
    return np.log(np.maximum(dens * jac, _PROB_FLOOR))


def weak_fraction_cdf(x, r_tau: float, zeta: float) -> np.ndarray:
    """``P(weak fraction <= x)`` for K = 2, by closed-form convolution.

    ``ln(g2/g1)`` is a Laplace(0, r-1) variable plus an independent
    ``N(0, s^2)``; the CDF of that sum has a closed form in terms of the
    normal CDF, evaluated here with log-space scaling for stability.
    """
    x = np.asarray(x, float)
    t = np.log((1.0 - x) / x)  # weak <= x  <=>  |X| >= t
    b = r_tau - 1.0
    s = _LN10_TENTH * zeta * math.sqrt(2.0)
    return 2.0 * _laplace_normal_sf(t, b, s)


def _laplace_normal_sf(t, b, s):
    t = np.asarray(t, float)
    if s == 0 and b == 0:
        return np.where(t < 0, 1.0, 0.0)
    if s == 0:
        return np.where(t >= 0, 0.5 * np.exp(-t / b), 1 - 0.5 * np.exp(t / b))
    if b == 0:
        return special.ndtr(-t / s)
    # P(L + N > t), L ~ Laplace(0, b), N ~ N(0, s^2)
    term_n = special.ndtr(-t / s)
    c = s * s / (2 * b * b)
    e1 = 0.5 * np.exp(c - t / b + special.log_ndtr(t / s - s / b))
    e2 = 0.5 * np.exp(c + t / b + special.log_ndtr(-t / s - s / b))
    return term_n + e1 - e2


def fit_cluster_power(fractions, bounds=((1.0 + 1e-3, 20.0), (1e-2, 30.0))) -> ClusterPowerFit:
    """Approximate ML fit of ``(r_tau, zeta)`` from K = 2 weak-cluster fractions.

    Fractions above 0.5 are folded (the likelihood is symmetric in the two
    clusters).
    """
    w = np.asarray(fractions, float)
    if w.size < 10:
        raise FitError("need at least 10 power-fraction observations")
    if np.any((w <= 0) | (w >= 1)):
        raise ValueError("fractions must lie in (0, 1)")
    w = np.minimum(w, 1.0 - w)
    w = np.minimum(w, 0.5 - 1e-12)
    lo = np.log([bounds[0][0] - 1.0, bounds[1][0]])
    hi = np.log([bounds[0][1] - 1.0, bounds[1][1]])

    def nll(theta):
        theta = np.clip(theta, lo, hi)
        rm1, zeta = np.exp(theta)
        return -float(np.sum(weak_fraction_log_likelihood(w, 1.0 + rm1, zeta)))

    # moment start: var(ln ratio) = 2 (r-1)^2 + s^2
    x = np.log((1 - w) / w)
    v = np.mean(x * x)
    x0 = np.clip(np.log([max(np.sqrt(v / 3.0), 1e-2), max(np.sqrt(v / 3.0) / (_LN10_TENTH * math.sqrt(2)), 0.1)]), lo, hi)
    res = optimize.minimize(nll, x0, method="Nelder-Mead",
                            options={"maxiter": 2000, "xatol": 1e-4, "fatol": 1e-4})
    if not res.success:
        raise FitError(f"cluster power fit did not converge: {res.message}")
    theta = np.clip(res.x, lo, hi)
    edge = tuple(n for n, t, l, h in zip(("r_tau", "zeta"), theta, lo, hi)
                 if abs(t - l) < 1e-3 or abs(t - h) < 1e-3)
    rm1, zeta = np.exp(theta)
    return ClusterPowerFit(float(1.0 + rm1), float(zeta), float(-res.fun), edge)


# ---------------------------------------------------------------------------
# moment estimators

def fit_angular_spread(spreads) -> float:
    """Exponential-distribution MLE of the mean rms spread (the sample mean)."""
    s = np.asarray(spreads, float)
    if s.size == 0:
        raise ValueError("no spreads given")
    if np.any(s < 0):
        raise ValueError("spreads must be >= 0")
    return float(s.mean())


def fit_cluster_count(counts) -> float:
    """Empirical mean of the cluster counts.

    This is not the MLE of the censored Poisson law: it estimates
    ``E[max(Poisson(lambda), 1)]``, which exceeds ``lambda``.
    """
    k = np.asarray(counts)
    if k.size == 0 or np.any(k < 1):
        raise ValueError("cluster counts must be >= 1")
    return float(k.mean())


def censored_poisson_mean(lam: float) -> float:
    """``E[max(Poisson(lam), 1)] = lam + exp(-lam)``."""
    return lam + math.exp(-lam)


def fit_band(base: BandParameters, *, path_loss=(), link_states=(),
             counts=(), fractions=(), spreads=None) -> BandParameters:
    """Assemble a parameter card from whatever data is available.

    Parameters without data keep ``base``'s values. ``spreads`` maps
    ``bs_az``/``bs_el``/``ue_az``/``ue_el`` to lists of degrees.
    """
    upd = {}
    for st, prefix in ((LinkState.NLOS, "nlos"), (LinkState.LOS, "los")):
        sub = [s for s in path_loss if s.state == st]
        if len({s.distance for s in sub}) >= 2:
            f = fit_path_loss(sub)
            upd.update({f"{prefix}_alpha": f.alpha, f"{prefix}_beta": f.beta,
                        f"{prefix}_sigma": f.sigma})
    if len(link_states) >= 3:
        f = fit_link_state(link_states)
        upd.update(a_out=f.a_out, b_out=f.b_out, a_los=f.a_los)
    if len(counts):
        upd["lambda_k"] = fit_cluster_count(counts)
    if len(fractions) >= 10:
        f = fit_cluster_power(fractions)
        upd.update(r_tau=f.r_tau, zeta=f.zeta)
    for key, vals in (spreads or {}).items():
        if len(vals):
            upd[f"{key}_spread_mean"] = fit_angular_spread(vals)
    return base.replace(**upd, name="fitted")


# ---------------------------------------------------------------------------
# CSV interfaces

class CSVFormatError(ValueError):
    pass


def _rows(path, required):
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise CSVFormatError(f"{path}:1: empty file, expected header {','.join(required)}")
        missing = [c for c in required if c not in reader.fieldnames]
        if missing:
            raise CSVFormatError(f"{path}:1: missing columns {missing}")
        for row in reader:
            yield reader.line_num, row


def read_power_map_csv(path) -> AngularPowerMap:
    cols = ANGLE_COLUMNS + ("status", "power_dbm")
    angles, status, power = [], [], []
    for line, row in _rows(path, cols):
        try:
            angles.append([float(row[c]) for c in ANGLE_COLUMNS])
            code = _STATUS_CODES[row["status"].strip().upper()]
            status.append(code)
            power.append(10.0 ** (float(row["power_dbm"]) / 10.0)
                         if code == CellStatus.POWER else 0.0)
        except (KeyError, ValueError, TypeError) as exc:
            raise CSVFormatError(f"{path}:{line}: bad row ({exc!r})") from None
    if not angles:
        raise CSVFormatError(f"{path}: no data rows")
    return AngularPowerMap(np.array(angles), np.array(status), np.array(power))


def write_power_map_csv(pmap: AngularPowerMap, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(ANGLE_COLUMNS + ("status", "power_dbm"))
        for a, s, p in zip(pmap.angles, pmap.status, pmap.power_mw):
            dbm = f"{10 * np.log10(p):.6f}" if s == CellStatus.POWER else ""
            wr.writerow([f"{v:g}" for v in a] + [_STATUS_LETTERS[CellStatus(s)], dbm])


_STATE_LETTERS = {"L": LinkState.LOS, "N": LinkState.NLOS, "O": LinkState.OUTAGE}


def read_path_loss_csv(path) -> list[PathLossSample]:
    """Read ``distance_m, pl_db, state{L,N,O}`` rows (outage rows may leave pl_db empty)."""
    out = []
    for line, row in _rows(path, ("distance_m", "pl_db", "state")):
        try:
            state = _STATE_LETTERS[row["state"].strip().upper()]
            d = float(row["distance_m"])
            pl = math.inf if state == LinkState.OUTAGE else float(row["pl_db"])
        except (KeyError, ValueError, TypeError) as exc:
            raise CSVFormatError(f"{path}:{line}: bad row ({exc!r})") from None
        if d <= 0:
            raise CSVFormatError(f"{path}:{line}: distance must be > 0")
        out.append(PathLossSample(d, pl, state))
    if not out:
        raise CSVFormatError(f"{path}: no data rows")
    return out


def write_path_loss_csv(samples, path) -> None:
    letters = {v: k for k, v in _STATE_LETTERS.items()}
    with open(path, "w", newline="", encoding="utf-8") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["distance_m", "pl_db", "state"])
        for s in samples:
            pl = "" if s.state == LinkState.OUTAGE else f"{s.path_loss:.6f}"
            wr.writerow([f"{s.distance:.6f}", pl, letters[s.state]])


def write_text(path, text: str) -> None:
    Path(path).write_text(text, encoding="utf-8")
