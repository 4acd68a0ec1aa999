"""Spatial channel synthesis and beamforming analysis.

Conventions
-----------
``array_response`` returns unit-norm steering vectors. The channel matrix
is built from element-level (unit-modulus) responses, i.e. each steering
vector is scaled by ``sqrt(n)``, so that the average per-element power
``E||H||_F^2 / (n_rx n_tx)`` equals the omnidirectional gain. With this
scaling ``trace(Q_rx) = trace(Q_tx) = n_rx * n_tx * 10**(-0.1 PL)`` and the
Kronecker-model link gain of eigen-beams equals the omni gain times the RX
and TX beamforming gains.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from .channel_model import LinkRealization, LinkState

__all__ = [
    "ArrayGeometry",
    "SubpathSet",
    "ChannelMatrix",
    "SpatialCovariancePair",
    "array_response",
    "synthesize_subpaths",
    "draw_small_scale_gains",
    "channel_matrix",
    "covariances",
    "bf_gain_long_term",
    "bf_gain_instantaneous",
    "beamforming_vectors",
    "expected_link_gain",
    "power_fraction",
    "dominant_eigvec",
    "save_complex_matrix",
    "load_complex_matrix",
]

TWO_PI = 2.0 * np.pi


@dataclass(frozen=True)
class ArrayGeometry:
    """Uniform planar array.

    ``boresight_elevation`` is the mechanical tilt of the array broadside
    (negative points it below the horizon); it is applied as an elevation
    offset, which is accurate for the few-degree tilts used here.
    """

    n_horizontal: int
    n_vertical: int
    element_spacing: float = 0.5
    boresight_azimuth: float = 0.0
    boresight_elevation: float = 0.0

    def __post_init__(self):
        if self.n_horizontal < 1 or self.n_vertical < 1:
            raise ValueError("array needs at least one element per axis")
        if self.element_spacing <= 0:
            raise ValueError("element spacing must be > 0")

    @property
    def n(self) -> int:
        return self.n_horizontal * self.n_vertical

    def rotated(self, azimuth: float) -> "ArrayGeometry":
        return ArrayGeometry(self.n_horizontal, self.n_vertical,
                             self.element_spacing, azimuth,
                             self.boresight_elevation)

    @classmethod
    def parse(cls, text: str, **kwargs) -> "ArrayGeometry":
        """Build from an ``"HxV"`` string such as ``"8x8"``."""
        try:
            h, v = (int(p) for p in text.lower().split("x"))
        except ValueError:
            raise ValueError(f"array size must look like 4x4, got {text!r}") from None
        return cls(h, v, **kwargs)


def array_response(geom: ArrayGeometry, az, el) -> np.ndarray:
    """Unit-norm UPA steering vector(s) for azimuth/elevation in radians.

    Element ``(p, q)`` (horizontal index ``p``, vertical index ``q``,
    flattened as ``q * n_horizontal + p``) has phase
    ``2 pi s (p sin(az - az0) cos(el - el0) + q sin(el - el0))``.
    Broadcasts over ``az``/``el``; the element axis is last.
    """
    az = np.asarray(az, dtype=float)
    el = np.asarray(el, dtype=float) - geom.boresight_elevation
    az, el = np.broadcast_arrays(az, el)
    k = TWO_PI * geom.element_spacing
    u = np.sin(az - geom.boresight_azimuth) * np.cos(el)
    w = np.sin(el)
    p = np.arange(geom.n_horizontal)
    q = np.arange(geom.n_vertical)
    ph = np.exp(1j * k * u[..., None] * p)
    pv = np.exp(1j * k * w[..., None] * q)
    a = (pv[..., :, None] * ph[..., None, :]).reshape(*az.shape, geom.n)
    return a / np.sqrt(geom.n)


@dataclass(frozen=True)
class SubpathSet:
    """Flattened subpaths of one link; every array has one entry per subpath."""

    cluster: np.ndarray
    aoa_az: np.ndarray
    aoa_el: np.ndarray
    aod_az: np.ndarray
    aod_el: np.ndarray
    power: np.ndarray
    doppler_angle: np.ndarray
    n_subpaths: int

    @property
    def total_power(self) -> float:
        return float(self.power.sum())

    def __len__(self):
        return len(self.power)


def _uniform_doppler(rng, aoa_az, aoa_el):
    return rng.uniform(0.0, TWO_PI, np.shape(aoa_az))


def synthesize_subpaths(link: LinkRealization, n_subpaths: int = 20,
                        rng: np.random.Generator | None = None,
                        doppler_policy: Callable | None = None) -> SubpathSet:
    """Spread each cluster into ``n_subpaths`` subpaths.

    Subpath angles are wrapped Gaussians around the cluster centres with the
    cluster rms spreads as deviations. Each subpath of cluster ``k`` carries
    power ``gamma_k * 10**(-0.1 PL) / n_subpaths``. ``doppler_policy(rng,
    aoa_az, aoa_el)`` returns the angle between each arrival and the
    direction of motion (uniform by default).
    """
    if link.state is LinkState.OUTAGE or not link.clusters:
        raise ValueError("cannot synthesise subpaths for a link in outage")
    if n_subpaths < 1:
        raise ValueError("need at least one subpath per cluster")
    rng = rng if rng is not None else np.random.default_rng()
    cl = link.clusters
    k = len(cl)
    L = n_subpaths

    def col(name):
        return np.repeat(np.array([getattr(c, name) for c in cl]), L)

    noise = rng.standard_normal((4, k * L))
    aoa_az = np.mod(col("aoa_az") + noise[0] * col("spread_aoa_az"), TWO_PI)
    aoa_el = col("aoa_el") + noise[1] * col("spread_aoa_el")
    aod_az = np.mod(col("aod_az") + noise[2] * col("spread_aod_az"), TWO_PI)
    aod_el = col("aod_el") + noise[3] * col("spread_aod_el")
    power = col("power_fraction") * link.omni_gain / L
    policy = doppler_policy or _uniform_doppler
    omega = np.asarray(policy(rng, aoa_az, aoa_el), dtype=float)
    return SubpathSet(np.repeat(np.arange(k), L), aoa_az, aoa_el, aod_az,
                      aod_el, power, omega, L)


@dataclass(frozen=True)
class ChannelMatrix:
    H: np.ndarray
    t: float
    max_doppler: float
    gains: np.ndarray

    @property
    def shape(self):
        return self.H.shape


def draw_small_scale_gains(sub: SubpathSet, rng: np.random.Generator) -> np.ndarray:
    """Complex Gaussian subpath gains with variance ``sub.power``."""
    z = np.array([1.0, 1j]) @ rng.standard_normal((2, len(sub)))
    return np.sqrt(sub.power / 2.0) * z


def channel_matrix(sub: SubpathSet, rx: ArrayGeometry, tx: ArrayGeometry,
                   t: float = 0.0, f_dmax: float = 0.0,
                   rng: np.random.Generator | None = None,
                   gains: np.ndarray | None = None) -> ChannelMatrix:
    """Narrowband MIMO channel at time ``t``.

    Either pass the static gains from :func:`draw_small_scale_gains` (to
    evaluate one small-scale realisation at several times) or an ``rng`` to
    draw fresh ones.
    """
    if gains is None:
        if rng is None:
            raise ValueError("need either rng or gains")
        gains = draw_small_scale_gains(sub, rng)
    g = gains * np.exp(2j * np.pi * t * f_dmax * np.cos(sub.doppler_angle))
    u_rx = array_response(rx, sub.aoa_az, sub.aoa_el) * np.sqrt(rx.n)
    u_tx = array_response(tx, sub.aod_az, sub.aod_el) * np.sqrt(tx.n)
    H = (u_rx.T * g) @ u_tx.conj()
    return ChannelMatrix(H, float(t), float(f_dmax), gains)


@dataclass(frozen=True)
class SpatialCovariancePair:
    q_rx: np.ndarray
    q_tx: np.ndarray

    @property
    def n_rx(self) -> int:
        return self.q_rx.shape[0]

    @property
    def n_tx(self) -> int:
        return self.q_tx.shape[0]


def _weighted_outer(a: np.ndarray, w: np.ndarray) -> np.ndarray:
    # sum_s w_s a_s a_s^*  with a of shape (S, n)
    return (a.T * w) @ a.conj()


def covariances(sub: SubpathSet, rx: ArrayGeometry,
                tx: ArrayGeometry) -> SpatialCovariancePair:
    """Closed-form ``E[H H^*]`` and ``E[H^* H]`` over the subpath gains."""
    scale = rx.n * tx.n
    u_rx = array_response(rx, sub.aoa_az, sub.aoa_el)
    u_tx = array_response(tx, sub.aod_az, sub.aod_el)
    q_rx = _weighted_outer(u_rx, scale * sub.power)
    q_tx = _weighted_outer(u_tx, scale * sub.power)
    return SpatialCovariancePair(q_rx, q_tx)


def _eigvalsh(q: np.ndarray) -> np.ndarray:
    return np.linalg.eigvalsh(q)


def _gain_db(q: np.ndarray) -> float:
    lam = _eigvalsh(q)
    tr = lam.sum()
    if not tr > 0:
        raise ValueError("degenerate covariance")
    return float(10.0 * np.log10(lam[-1] / (tr / q.shape[0])))


def bf_gain_long_term(cov: SpatialCovariancePair) -> tuple[float, float, float]:
    """Long-term (eigen-beam) RX, TX and total gains in dB over omni."""
    g_rx = _gain_db(cov.q_rx)
    g_tx = _gain_db(cov.q_tx)
    return g_rx, g_tx, g_rx + g_tx


def bf_gain_instantaneous(H) -> float:
    """Gain of the dominant singular pair against the per-element average, dB."""
    H = H.H if isinstance(H, ChannelMatrix) else np.asarray(H)
    fro2 = float(np.sum(np.abs(H) ** 2))
    if not fro2 > 0:
        raise ValueError("zero channel matrix")
    s_max = np.linalg.norm(H, 2)
    return float(10.0 * np.log10(s_max ** 2 / (fro2 / H.size)))


def _normalize_phase(v: np.ndarray) -> np.ndarray:
    nz = np.flatnonzero(np.abs(v) > 1e-12)
    if nz.size:
        ref = v[nz[0]]
        v = v * (abs(ref) / ref)
    return v / np.linalg.norm(v)


def dominant_eigvec(q: np.ndarray) -> tuple[float, np.ndarray]:
    """Largest eigenvalue and its unit eigenvector (phase-normalised).

    When the top eigenvalue is degenerate the vector LAPACK returns last is
    used; the phase rule makes the output reproducible.
    """
    lam, vec = np.linalg.eigh(q)
    if not lam[-1] > 0:
        raise ValueError("degenerate covariance")
    return float(lam[-1]), _normalize_phase(vec[:, -1])


def beamforming_vectors(cov: SpatialCovariancePair) -> tuple[np.ndarray, np.ndarray]:
    return dominant_eigvec(cov.q_rx)[1], dominant_eigvec(cov.q_tx)[1]


def _quad(v, q):
    return float(np.real(np.vdot(v, q @ v)))


def expected_link_gain(v_rx: np.ndarray, v_tx: np.ndarray,
                       cov: SpatialCovariancePair) -> float:
    """Average beamformed power gain under the Kronecker approximation.

    ``(v_rx^* Q_rx v_rx) (v_tx^* Q_tx v_tx) / trace(Q_rx)``.
    """
    if v_rx.shape != (cov.n_rx,) or v_tx.shape != (cov.n_tx,):
        raise ValueError("beam vector dimensions do not match the covariances")
    tr = float(np.real(np.trace(cov.q_rx)))
    if not tr > 0:
        raise ValueError("degenerate covariance")
    return _quad(v_rx, cov.q_rx) * _quad(v_tx, cov.q_tx) / tr


def power_fraction(cov: SpatialCovariancePair, r: int) -> float:
    """Fraction of channel energy captured by optimal rank-``r`` subspaces."""
    if not 1 <= r <= min(cov.n_rx, cov.n_tx):
        raise ValueError(f"r must be in [1, {min(cov.n_rx, cov.n_tx)}]")
    out = 1.0
    for q in (cov.q_rx, cov.q_tx):
        lam = np.clip(_eigvalsh(q)[::-1], 0.0, None)
        out *= lam[:r].sum() / lam.sum()
    return float(min(out, 1.0))


# Binary dump layout: two little-endian uint64 (rows, cols) followed by the
# row-major entries as little-endian float64 pairs (re, im).
_HEADER = struct.Struct("<QQ")


def save_complex_matrix(path, m: np.ndarray) -> None:
    """Write a complex matrix as ``.bin`` (see layout above) or ``.csv``.

    The CSV form has one matrix row per line with interleaved ``re,im``
    columns and no header.
    """
    m = np.atleast_2d(np.asarray(m, dtype=np.complex128))
    path = Path(path)
    inter = np.empty((m.shape[0], 2 * m.shape[1]), dtype="<f8")
    inter[:, 0::2] = m.real
    inter[:, 1::2] = m.imag
    if path.suffix == ".csv":
        np.savetxt(path, inter, delimiter=",", fmt="%.17g")
    else:
        with open(path, "wb") as fh:
            fh.write(_HEADER.pack(*m.shape))
            fh.write(inter.tobytes(order="C"))


def load_complex_matrix(path) -> np.ndarray:
    path = Path(path)
    if path.suffix == ".csv":
        inter = np.atleast_2d(np.loadtxt(path, delimiter=",", dtype=float))
    else:
        raw = path.read_bytes()
        rows, cols = _HEADER.unpack_from(raw)
        inter = np.frombuffer(raw, dtype="<f8", offset=_HEADER.size)
        inter = inter.reshape(rows, 2 * cols)
    return inter[:, 0::2] + 1j * inter[:, 1::2]
