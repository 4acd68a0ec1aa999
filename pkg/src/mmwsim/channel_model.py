"""Large-scale statistical channel model for 28 / 73 GHz urban links.

A link between a base station (BS) and a user equipment (UE) is first put
into one of three states (LOS, NLOS or outage) with distance dependent
probabilities. Non-outage links then receive an omnidirectional path loss
with lognormal shadowing and a random set of path clusters, each with a
power fraction, central angles and rms angular spreads.

All samplers take an explicit :class:`numpy.random.Generator`; nothing in
this module holds random state.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from enum import IntEnum

import numpy as np

__all__ = [
    "BandParameters",
    "LinkState",
    "PathCluster",
    "LinkRealization",
    "LinkOverrides",
    "PRESETS",
    "get_preset",
    "link_state_probabilities",
    "outage_onset_distance",
    "sample_link_state",
    "draw_link_states",
    "median_path_loss",
    "sample_path_loss",
    "num_clusters_pmf",
    "sample_num_clusters",
    "sample_cluster_power_fractions",
    "sample_cluster_geometry",
    "sample_link",
    "los_elevation",
    "umi_path_loss",
    "VALID_DISTANCE_RANGE",
]

#: Distance range (m) covered by the measurements behind the presets.
VALID_DISTANCE_RANGE = (30.0, 200.0)


@dataclass(frozen=True)
class BandParameters:
    """Parameter card of the large-scale model for one carrier frequency.

    Path-loss intercepts and shadowing deviations are in dB, angular spread
    means in degrees, ``a_out`` and ``a_los`` in 1/m.
    """

    carrier_freq: float
    nlos_alpha: float
    nlos_beta: float
    nlos_sigma: float
    los_alpha: float
    los_beta: float
    los_sigma: float
    lambda_k: float
    r_tau: float
    zeta: float
    bs_az_spread_mean: float
    bs_el_spread_mean: float
    ue_az_spread_mean: float
    ue_el_spread_mean: float
    a_out: float
    b_out: float
    a_los: float
    name: str = field(default="custom", compare=False)

    def __post_init__(self):
        spreads = (self.bs_az_spread_mean, self.bs_el_spread_mean,
                   self.ue_az_spread_mean, self.ue_el_spread_mean)
        if any(s < 0 for s in spreads):
            raise ValueError("angular spread means must be >= 0")
        # sigma == 0 and zeta == 0 are allowed so the generator can be made
        # deterministic in tests.
        if self.nlos_sigma < 0 or self.los_sigma < 0 or self.zeta < 0:
            raise ValueError("shadowing deviations must be >= 0")
        if self.lambda_k <= 0:
            raise ValueError("lambda_k must be > 0")
        if self.r_tau < 1:
            raise ValueError("r_tau must be >= 1")
        if self.a_out <= 0 or self.a_los <= 0:
            raise ValueError("a_out and a_los must be > 0")

    def replace(self, **changes) -> "BandParameters":
        return dataclasses.replace(self, **changes)

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in dataclasses.fields(cls) if f.name != "name"]


PRESETS: dict[str, BandParameters] = {
    "28ghz-nyc": BandParameters(
        carrier_freq=28.0,
        nlos_alpha=72.0, nlos_beta=2.92, nlos_sigma=8.7,
        los_alpha=61.4, los_beta=2.0, los_sigma=5.8,
        lambda_k=1.8, r_tau=2.8, zeta=4.0,
        bs_az_spread_mean=10.2, bs_el_spread_mean=0.0,
        ue_az_spread_mean=15.5, ue_el_spread_mean=6.0,
        a_out=0.0334, b_out=5.2, a_los=0.0149,
        name="28ghz-nyc",
    ),
    # NLOS row uses the 2 m UE-height fit; link-state fit shared with 28 GHz.
    "73ghz-nyc": BandParameters(
        carrier_freq=73.0,
        nlos_alpha=82.7, nlos_beta=2.69, nlos_sigma=7.7,
        los_alpha=69.8, los_beta=2.0, los_sigma=5.8,
        lambda_k=1.9, r_tau=3.0, zeta=4.0,
        bs_az_spread_mean=10.5, bs_el_spread_mean=0.0,
        ue_az_spread_mean=15.4, ue_el_spread_mean=3.5,
        a_out=0.0334, b_out=5.2, a_los=0.0149,
        name="73ghz-nyc",
    ),
}

# Single-cluster, zero-spread variant of the 28 GHz card. Every channel it
# produces is rank one, which makes the beamforming outputs degenerate.
PRESETS["rank-one-smoke"] = PRESETS["28ghz-nyc"].replace(
    lambda_k=1e-12, bs_az_spread_mean=0.0, bs_el_spread_mean=0.0,
    ue_az_spread_mean=0.0, ue_el_spread_mean=0.0, name="rank-one-smoke")


def get_preset(name: str) -> BandParameters:
    try:
        return PRESETS[name]
    except KeyError:
        raise KeyError(f"unknown band preset {name!r}; "
                       f"known: {', '.join(sorted(PRESETS))}") from None


class LinkState(IntEnum):
    OUTAGE = 0
    LOS = 1
    NLOS = 2


@dataclass(frozen=True)
class PathCluster:
    """One path cluster. Angles and spreads are in radians."""

    power_fraction: float
    aod_az: float
    aod_el: float
    aoa_az: float
    aoa_el: float
    spread_aod_az: float
    spread_aod_el: float
    spread_aoa_az: float
    spread_aoa_el: float


@dataclass(frozen=True)
class LinkRealization:
    distance: float
    state: LinkState
    omni_path_loss: float
    clusters: tuple[PathCluster, ...] = ()

    @property
    def omni_gain(self) -> float:
        """Linear omnidirectional gain ``10**(-0.1 PL)``; 0 in outage."""
        if self.state is LinkState.OUTAGE:
            return 0.0
        return 10.0 ** (-0.1 * self.omni_path_loss)


@dataclass(frozen=True)
class LinkOverrides:
    """Perturbations applied by :func:`sample_link`.

    ``d_shift`` moves the outage curve to the left by that many metres and
    ``suppress_los`` hands the LOS probability mass to NLOS.
    """

    state: LinkState | None = None
    d_shift: float = 0.0
    suppress_los: bool = False


def link_state_probabilities(d, band: BandParameters, d_shift=0.0,
                             suppress_los=False):
    """Return ``(p_out, p_los, p_nlos)`` at distance(s) ``d`` in metres.

    Works elementwise on arrays. ``p_nlos`` is computed as the complement so
    the three always sum to one.
    """
    d = np.asarray(d, dtype=float)
    if np.any(d < 0):
        raise ValueError("distance must be >= 0")
    p_out = np.maximum(0.0, 1.0 - np.exp(-band.a_out * (d + d_shift) + band.b_out))
    p_los = (1.0 - p_out) * np.exp(-band.a_los * d)
    if suppress_los:
        p_los = np.zeros_like(p_los)
    p_nlos = 1.0 - p_out - p_los
    if d.ndim == 0:
        return float(p_out), float(p_los), float(p_nlos)
    return p_out, p_los, p_nlos


def outage_onset_distance(band: BandParameters) -> float:
    """Distance beyond which the outage probability becomes positive."""
    return band.b_out / band.a_out


def draw_link_states(d, band: BandParameters, rng: np.random.Generator,
                     d_shift=0.0, suppress_los=False) -> np.ndarray:
    """Vectorised state draw; returns an int array of :class:`LinkState` codes."""
    p_out, p_los, _ = link_state_probabilities(
        np.atleast_1d(d), band, d_shift, suppress_los)
    u = rng.random(p_out.shape)
    codes = np.full(p_out.shape, int(LinkState.NLOS), dtype=np.int8)
    codes[u < p_out + p_los] = int(LinkState.LOS)
    codes[u < p_out] = int(LinkState.OUTAGE)
    return codes


def sample_link_state(d: float, band: BandParameters, rng: np.random.Generator,
                      d_shift=0.0, suppress_los=False) -> LinkState:
    return LinkState(int(draw_link_states(d, band, rng, d_shift, suppress_los)[0]))


def _pl_row(state, band):
    if state == LinkState.LOS:
        return band.los_alpha, band.los_beta, band.los_sigma
    if state == LinkState.NLOS:
        return band.nlos_alpha, band.nlos_beta, band.nlos_sigma
    raise ValueError("no finite path loss in outage")


def median_path_loss(d, state: LinkState, band: BandParameters):
    """Median omnidirectional path loss in dB (no shadowing)."""
    alpha, beta, _ = _pl_row(state, band)
    d = np.asarray(d, dtype=float)
    if np.any(d <= 0):
        raise ValueError("distance must be > 0")
    pl = alpha + 10.0 * beta * np.log10(d)
    return float(pl) if pl.ndim == 0 else pl


def sample_path_loss(d, state: LinkState, band: BandParameters,
                     rng: np.random.Generator):
    """Median path loss plus an independent Gaussian shadowing draw (dB)."""
    median = median_path_loss(d, state, band)
    sigma = _pl_row(state, band)[2]
    xi = rng.normal(0.0, 1.0, np.shape(median)) * sigma
    out = median + xi
    return float(out) if np.ndim(out) == 0 else out


def num_clusters_pmf(k, lam: float):
    """pmf of ``K = max(Poisson(lam), 1)``."""
    from scipy.stats import poisson

    k = np.asarray(k)
    pmf = np.where(k == 1, poisson.cdf(1, lam), poisson.pmf(k, lam))
    pmf = np.where(k < 1, 0.0, pmf)
    return float(pmf) if pmf.ndim == 0 else pmf


def sample_num_clusters(band: BandParameters, rng: np.random.Generator) -> int:
    return max(int(rng.poisson(band.lambda_k)), 1)


def sample_cluster_power_fractions(k: int, band: BandParameters,
                                   rng: np.random.Generator) -> np.ndarray:
    """Draw ``k`` cluster power fractions summing to one.

    Unnormalised powers are ``U**(r_tau - 1) * 10**(-0.1 Z)`` with ``U``
    uniform on (0, 1] and ``Z ~ N(0, zeta**2)`` in dB.
    """
    if k < 1:
        raise ValueError("need at least one cluster")
    u = 1.0 - rng.random(k)  # (0, 1] keeps every fraction strictly positive
    z = rng.normal(0.0, 1.0, k) * band.zeta
    g = u ** (band.r_tau - 1.0) * 10.0 ** (-0.1 * z)
    return g / g.sum()


def _exp_spread(mean_deg: float, size: int, rng: np.random.Generator) -> np.ndarray:
    if mean_deg == 0:
        return np.zeros(size)
    return np.deg2rad(rng.exponential(mean_deg, size))


def sample_cluster_geometry(k: int, state: LinkState, los_elev: float,
                            band: BandParameters, rng: np.random.Generator) -> dict:
    """Draw central angles and rms spreads for ``k`` clusters.

    Azimuths are uniform on [0, 2*pi) independently at the BS and UE. The
    central elevations are the geometric LOS elevation: ``+los_elev`` seen
    from the UE, ``-los_elev`` seen from the BS. ``state`` does not change
    the law; it is accepted so callers need not special-case it.
    Returns a dict of arrays keyed like the :class:`PathCluster` fields.
    """
    del state
    return {
        "aod_az": rng.uniform(0.0, 2 * np.pi, k),
        "aoa_az": rng.uniform(0.0, 2 * np.pi, k),
        "aod_el": np.full(k, -los_elev),
        "aoa_el": np.full(k, los_elev),
        "spread_aod_az": _exp_spread(band.bs_az_spread_mean, k, rng),
        "spread_aod_el": _exp_spread(band.bs_el_spread_mean, k, rng),
        "spread_aoa_az": _exp_spread(band.ue_az_spread_mean, k, rng),
        "spread_aoa_el": _exp_spread(band.ue_el_spread_mean, k, rng),
    }


def sample_link(d: float, los_elev: float, band: BandParameters,
                rng: np.random.Generator,
                overrides: LinkOverrides | None = None) -> LinkRealization:
    """Draw one complete large-scale link realisation."""
    if d <= 0:
        raise ValueError("distance must be > 0")
    ov = overrides or LinkOverrides()
    if ov.state is not None:
        state = LinkState(ov.state)
    else:
        state = sample_link_state(d, band, rng, ov.d_shift, ov.suppress_los)
    if state is LinkState.OUTAGE:
        return LinkRealization(d, state, math.inf, ())
    pl = sample_path_loss(d, state, band, rng)
    k = sample_num_clusters(band, rng)
    gamma = sample_cluster_power_fractions(k, band, rng)
    geo = sample_cluster_geometry(k, state, los_elev, band, rng)
    clusters = tuple(
        PathCluster(power_fraction=float(gamma[i]),
                    **{key: float(val[i]) for key, val in geo.items()})
        for i in range(k))
    return LinkRealization(float(d), state, float(pl), clusters)


def los_elevation(d, bs_height=10.0, ue_height=2.0):
    """Elevation (rad) of the BS seen from the UE at horizontal distance ``d``."""
    return np.arctan2(bs_height - ue_height, d)


def umi_path_loss(d, fc):
    """3GPP UMi path loss in dB at distance ``d`` (m) and carrier ``fc`` (GHz)."""
    return 22.7 + 36.7 * np.log10(d) + 26.0 * np.log10(fc)
