"""Drop-based downlink/uplink capacity simulation on a hexagonal layout.

Every UE-site pair gets one link realisation. By default a sector sees
only its own 120 degree wedge, so each realisation belongs to exactly one
cell and a UE blocked to a site is blocked to all of its sectors. Beams are long-term eigenbeams computed from the
link covariances, and each UE attaches to the visible cell with the largest
expected beamformed gain. Interference is evaluated over a few random
scheduling slots in which every cell serves one of its UEs.

Per-drop arrays are kept flat and grouped (pairs, cell links, subpaths) so
a full 2 km x 2 km drop takes a few seconds.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .channel_model import (VALID_DISTANCE_RANGE, BandParameters, LinkState, draw_link_states,
                            get_preset)
from .mimo import ArrayGeometry, array_response

__all__ = [
    "NetworkConfig",
    "Deployment",
    "LinkTable",
    "DropResult",
    "RateReport",
    "hex_sites",
    "drop_network",
    "realize_links",
    "compute_sinr",
    "sinr_to_rate",
    "simulate_drop",
    "schedule_and_report",
    "run_drops",
    "drop_rng",
    "THERMAL_NOISE_DBM_HZ",
]

THERMAL_NOISE_DBM_HZ = -174.0
SECTOR_AZIMUTHS = (0.0, 2 * math.pi / 3, 4 * math.pi / 3)


@dataclass(frozen=True)
class NetworkConfig:
    """Deployment, radio and reporting parameters (powers in dBm, figures in dB)."""

    band: BandParameters = field(default_factory=lambda: get_preset("28ghz-nyc"))
    bs_array: ArrayGeometry = ArrayGeometry(8, 8)
    ue_array: ArrayGeometry = ArrayGeometry(4, 4)
    area: float = 2000.0
    isd: float = 200.0
    sectors_per_site: int = 3
    ues_per_cell: int = 10
    dl_tx_power: float = 30.0
    ul_tx_power: float = 20.0
    bs_noise_figure: float = 5.0
    ue_noise_figure: float = 7.0
    bandwidth: float = 1e9
    overhead: float = 0.2
    duplex_split: float = 0.5
    delta: float = 3.0
    rho_max: float = 4.8
    d_shift: float = 0.0
    suppress_los: bool = False
    bs_height: float = 10.0
    ue_height: float = 2.0
    bs_downtilt: float = 10.0  # degrees below the horizon
    n_subpaths: int = 20
    n_slots: int = 10
    interior_margin: float | None = None  # m; None means 2 ISD
    ul_noise_per_share: bool = True
    prune_association: bool = True
    shared_site_links: bool = True
    sector_half_width: float = 60.0  # degrees of azimuth a sector sees either side of boresight

    def __post_init__(self):
        for name in ("dl_tx_power", "ul_tx_power", "bs_noise_figure", "ue_noise_figure",
                     "delta", "rho_max", "d_shift", "bandwidth"):
            if not math.isfinite(getattr(self, name)):
                raise ValueError(f"{name} must be finite")
        for name in ("overhead", "duplex_split"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if self.sectors_per_site != 3:
            raise ValueError("only 3-sector sites are supported")
        if self.area <= 0 or self.isd <= 0:
            raise ValueError("area and isd must be > 0")
        if self.ues_per_cell < 0 or self.n_slots < 1 or self.n_subpaths < 1:
            raise ValueError("ues_per_cell >= 0, n_slots >= 1 and n_subpaths >= 1 required")
        if self.bs_height <= self.ue_height:
            raise ValueError("BS must be higher than the UE")

    @property
    def margin(self) -> float:
        return 2.0 * self.isd if self.interior_margin is None else self.interior_margin

    def replace(self, **changes) -> "NetworkConfig":
        return replace(self, **changes)


@dataclass
class Deployment:
    sites: np.ndarray          # (S, 2) m
    cell_site: np.ndarray      # (C,)
    cell_azimuth: np.ndarray   # (C,) rad
    ues: np.ndarray            # (U, 2) m
    ue_orientation: np.ndarray  # (U,) rad, UE array boresight
    interior_site: np.ndarray  # (S,) bool

    @property
    def n_sites(self) -> int:
        return len(self.sites)

    @property
    def n_cells(self) -> int:
        return len(self.cell_site)

    @property
    def n_ues(self) -> int:
        return len(self.ues)

    def nearest_site(self) -> tuple[np.ndarray, np.ndarray]:
        d = np.linalg.norm(self.ues[:, None, :] - self.sites[None, :, :], axis=2)
        idx = np.argmin(d, axis=1)
        return idx, d[np.arange(len(idx)), idx]


def hex_sites(area: float, isd: float) -> np.ndarray:
    """Hexagonal lattice clipped to ``[0, area]^2``.

    Rows are ``isd * sqrt(3) / 2`` apart and centred vertically; even rows
    start at x = 0, odd rows at x = isd / 2.
    """
    if area < isd:
        raise ValueError(f"area {area} m is too small for a site lattice with ISD {isd} m")
    dy = isd * math.sqrt(3.0) / 2.0
    n_rows = int(math.floor(area / dy + 1e-9)) + 1
    y0 = 0.5 * (area - (n_rows - 1) * dy)
    pts = []
    for r in range(n_rows):
        x0 = 0.0 if r % 2 == 0 else isd / 2.0
        xs = np.arange(x0, area + 1e-9, isd)
        pts.append(np.column_stack([xs, np.full(len(xs), y0 + r * dy)]))
    return np.vstack(pts)


def drop_network(cfg: NetworkConfig, rng: np.random.Generator) -> Deployment:
    sites = hex_sites(cfg.area, cfg.isd)
    n_s = len(sites)
    cell_site = np.repeat(np.arange(n_s), cfg.sectors_per_site)
    cell_az = np.tile(np.array(SECTOR_AZIMUTHS), n_s)
    n_ue = len(cell_site) * cfg.ues_per_cell
    ues = rng.uniform(0.0, cfg.area, (n_ue, 2))
    orient = rng.uniform(0.0, 2 * math.pi, n_ue)
    m = cfg.margin
    interior = np.all((sites >= m - 1e-9) & (sites <= cfg.area - m + 1e-9), axis=1)
    return Deployment(sites, cell_site, cell_az, ues, orient, interior)


# ---------------------------------------------------------------------------
# link realisation

@dataclass
class LinkTable:
    """Per-drop link data.

    *Pairs* are non-outage (UE, site) links; *cell links* are (pair, cell)
    combinations where the UE lies in the sector's front half-plane.
    Subpaths are stored contiguously per pair.
    """

    pair_ue: np.ndarray
    pair_site: np.ndarray
    pair_distance: np.ndarray   # 3-D, m
    pair_state: np.ndarray
    pair_path_loss: np.ndarray  # dB
    sub_start: np.ndarray       # (P + 1,) offsets into the subpath arrays
    aoa_az: np.ndarray          # local to the UE array
    aoa_el: np.ndarray
    aod_az: np.ndarray          # global
    aod_el: np.ndarray
    sub_power: np.ndarray
    link_pair: np.ndarray
    link_cell: np.ndarray
    lam_rx: np.ndarray
    v_rx: np.ndarray
    trace: np.ndarray           # trace of either covariance, n_rx n_tx omni
    # association
    serving_link: np.ndarray    # (U,) cell-link index or -1
    serving_cell: np.ndarray    # (U,) or -1
    gain: np.ndarray            # (U,) expected effective gain (linear)
    v_bs: np.ndarray            # (U, n_bs)
    n_candidates_evaluated: int = 0

    @property
    def n_pairs(self) -> int:
        return len(self.pair_ue)

    @property
    def served(self) -> np.ndarray:
        return self.serving_cell >= 0


def _wrap(a):
    return np.mod(a + math.pi, 2 * math.pi) - math.pi


def _bs_geom(cfg: NetworkConfig) -> ArrayGeometry:
    return replace(cfg.bs_array, boresight_azimuth=0.0,
                   boresight_elevation=-math.radians(cfg.bs_downtilt))


def _ue_geom(cfg: NetworkConfig) -> ArrayGeometry:
    return replace(cfg.ue_array, boresight_azimuth=0.0, boresight_elevation=0.0)


def _draw_pairs(dep: Deployment, cfg: NetworkConfig, rng, forced_state=None):
    band = cfg.band
    delta = dep.ues[:, None, :] - dep.sites[None, :, :]
    dh = np.hypot(delta[..., 0], delta[..., 1])
    dz = cfg.bs_height - cfg.ue_height
    d3 = np.hypot(dh, dz)
    az = np.arctan2(delta[..., 1], delta[..., 0])
    if cfg.shared_site_links:
        ue, site = np.nonzero(np.ones(d3.shape, dtype=bool))
        cell = np.full(len(ue), -1)
    else:
        # one independent link per visible (UE, cell)
        sec_az = np.array(SECTOR_AZIMUTHS)
        vis = np.abs(_wrap(az[..., None] - sec_az)) <= math.radians(cfg.sector_half_width) + 1e-12
        ue, site, sec = np.nonzero(vis)
        cell = site * len(sec_az) + sec
    d = d3[ue, site]
    if forced_state is None:
        st = draw_link_states(d, band, rng, cfg.d_shift, cfg.suppress_los)
    else:
        st = np.full(len(d), int(forced_state), dtype=np.int8)
    keep = st != LinkState.OUTAGE
    ue, site, cell, st, d = ue[keep], site[keep], cell[keep], st[keep], d[keep]
    alpha = np.where(st == LinkState.LOS, band.los_alpha, band.nlos_alpha)
    beta = np.where(st == LinkState.LOS, band.los_beta, band.nlos_beta)
    sigma = np.where(st == LinkState.LOS, band.los_sigma, band.nlos_sigma)
    pl = alpha + 10.0 * beta * np.log10(d) + sigma * rng.standard_normal(len(d))
    los_el = np.arctan2(dz, dh[ue, site])
    return ue, site, cell, d, st, pl, az[ue, site], los_el


def _draw_subpaths(n_pairs, los_el, omni, cfg: NetworkConfig, rng):
    # cluster and subpath laws as in channel_model / mimo, vectorised over pairs
    band = cfg.band
    k = np.maximum(rng.poisson(band.lambda_k, n_pairs), 1)
    cp = np.repeat(np.arange(n_pairs), k)
    n_cl = len(cp)
    u = 1.0 - rng.random(n_cl)
    z = rng.standard_normal(n_cl) * band.zeta
    g = u ** (band.r_tau - 1.0) * 10.0 ** (-0.1 * z)
    gamma = g / np.bincount(cp, weights=g, minlength=n_pairs)[cp]

    def spread(mean):
        return np.deg2rad(rng.exponential(mean, n_cl)) if mean > 0 else np.zeros(n_cl)

    c_aod_az = rng.uniform(0.0, 2 * math.pi, n_cl)
    c_aoa_az = rng.uniform(0.0, 2 * math.pi, n_cl)
    s_aod_az, s_aod_el = spread(band.bs_az_spread_mean), spread(band.bs_el_spread_mean)
    s_aoa_az, s_aoa_el = spread(band.ue_az_spread_mean), spread(band.ue_el_spread_mean)
    L = cfg.n_subpaths
    rep = np.repeat(np.arange(n_cl), L)
    noise = rng.standard_normal((4, n_cl * L))
    el = los_el[cp][rep]
    sub = {
        "aoa_az": np.mod(c_aoa_az[rep] + noise[0] * s_aoa_az[rep], 2 * math.pi),
        "aoa_el": el + noise[1] * s_aoa_el[rep],
        "aod_az": np.mod(c_aod_az[rep] + noise[2] * s_aod_az[rep], 2 * math.pi),
        "aod_el": -el + noise[3] * s_aod_el[rep],
        "power": (gamma * omni[cp])[rep] / L,
    }
    start = np.concatenate(([0], np.cumsum(k * L)))
    return start, sub


def _grouped_top_eig(geom: ArrayGeometry, az, el, power, start, idx, scale):
    """Top eigenpairs of ``scale * sum_s p_s a_s a_s^*`` for the pairs in ``idx``.

    Pairs are batched by subpath count so every batch is a dense stack.
    """
    counts = start[idx + 1] - start[idx]
    lam = np.empty(len(idx))
    vec = np.empty((len(idx), geom.n), dtype=complex)
    for c in np.unique(counts):
        sel = np.flatnonzero(counts == c)
        for lo in range(0, len(sel), 256):
            chunk = sel[lo:lo + 256]
            rows = start[idx[chunk]][:, None] + np.arange(c)
            a = array_response(geom, az[rows], el[rows])  # (n, c, N)
            w = np.sqrt(power[rows] * scale)
            lam[chunk], vec[chunk] = _top_eig_factor(a * w[..., None])
    return lam, vec


def _quadratic_form(geom: ArrayGeometry, az, el, power, start, pairs, v, scale):
    """``v_k^* Q(pair_k) v_k`` from the subpaths, without forming ``Q``."""
    counts = start[pairs + 1] - start[pairs]
    owner = np.repeat(np.arange(len(pairs)), counts)
    rows = np.repeat(start[pairs] - np.concatenate(([0], np.cumsum(counts)[:-1])),
                     counts) + np.arange(counts.sum())
    out = np.zeros(len(pairs))
    for lo in range(0, len(rows), 65536):
        r, o = rows[lo:lo + 65536], owner[lo:lo + 65536]
        a = array_response(geom, az[r], el[r])
        proj = np.abs(np.einsum("si,si->s", a.conj(), v[o])) ** 2
        out += np.bincount(o, weights=proj * power[r] * scale, minlength=len(pairs))
    return out


def _top_eig(q):
    lam, vec = np.linalg.eigh(q)
    v = vec[..., -1]
    # deterministic phase: first clearly nonzero entry real-positive
    ref_idx = np.argmax(np.abs(v) > 1e-12, axis=-1)
    ref = np.take_along_axis(v, ref_idx[..., None], -1)
    v = v * (np.abs(ref) / np.where(ref == 0, 1.0, ref))
    return lam[..., -1], v


def _top_eig_factor(b):
    """Top eigenpair of ``Q = B^T conj(B)`` for a stack ``b`` of shape (n, S, N).

    With fewer rows than columns the S x S Gram matrix is decomposed
    instead: if ``conj(B) B^T y = lam y`` then ``B^T y`` is an
    eigenvector of ``Q`` with the same eigenvalue.
    """
    s, n = b.shape[1], b.shape[2]
    if s >= n:
        return _top_eig(np.swapaxes(b, 1, 2) @ b.conj())
    lam, vec = np.linalg.eigh(b.conj() @ np.swapaxes(b, 1, 2))
    v = np.einsum("nsi,ns->ni", b, vec[..., -1])
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    ref_idx = np.argmax(np.abs(v) > 1e-12, axis=-1)
    ref = np.take_along_axis(v, ref_idx[..., None], -1)
    v = v * (np.abs(ref) / np.where(ref == 0, 1.0, ref))
    return lam[..., -1], v


def realize_links(dep: Deployment, cfg: NetworkConfig, rng: np.random.Generator,
                  forced_state: LinkState | None = None) -> LinkTable:
    """Draw every UE-site link, compute beams and associate UEs.

    ``forced_state`` pins every link to one state (testing aid).
    """
    n_rx, n_tx = cfg.ue_array.n, cfg.bs_array.n
    scale = float(n_rx * n_tx)
    ue, site, pcell, d, st, pl, az_site, los_el = _draw_pairs(dep, cfg, rng, forced_state)
    n_pairs = len(ue)
    omni = 10.0 ** (-0.1 * pl)
    start, sub = _draw_subpaths(n_pairs, los_el, omni, cfg, rng)
    # UE arrays are rotated per UE; store AoAs relative to the UE boresight
    sub_pair = np.repeat(np.arange(n_pairs), np.diff(start))
    aoa_local = sub["aoa_az"] - dep.ue_orientation[ue][sub_pair]

    bs_geom = _bs_geom(cfg)
    # RX eigenpairs are filled in lazily by the association search
    lam_rx = np.full(n_pairs, np.nan)
    v_rx = np.zeros((n_pairs, n_rx), dtype=complex)
    trace = scale * omni

    if cfg.shared_site_links:
        # visible sectors of each pair
        cells_of_site = np.arange(dep.n_cells).reshape(dep.n_sites, -1)
        sec_az = np.array(SECTOR_AZIMUTHS)
        vis = np.abs(_wrap(az_site[:, None] - sec_az[None, :])) <= math.radians(cfg.sector_half_width) + 1e-12
        lp, ls = np.nonzero(vis)
        link_pair, link_cell = lp, cells_of_site[site[lp], ls]
    else:
        link_pair, link_cell = np.arange(n_pairs), pcell
    order = np.lexsort((link_pair, link_cell))
    link_pair, link_cell = link_pair[order], link_cell[order]

    tbl = LinkTable(ue, site, d, st, pl, start, aoa_local, sub["aoa_el"], sub["aod_az"],
                    sub["aod_el"], sub["power"], link_pair, link_cell, lam_rx, v_rx,
                    trace, np.full(dep.n_ues, -1), np.full(dep.n_ues, -1),
                    np.zeros(dep.n_ues), np.zeros((dep.n_ues, n_tx), dtype=complex))
    _associate(tbl, dep, cfg, bs_geom, _ue_geom(cfg), scale)
    return tbl


def _ensure_rx_eig(tbl: LinkTable, pairs, ue_geom: ArrayGeometry, scale: float):
    todo = np.unique(pairs[np.isnan(tbl.lam_rx[pairs])])
    if todo.size:
        tbl.lam_rx[todo], tbl.v_rx[todo] = _grouped_top_eig(
            ue_geom, tbl.aoa_az, tbl.aoa_el, tbl.sub_power, tbl.sub_start, todo, scale)


def _associate(tbl: LinkTable, dep: Deployment, cfg: NetworkConfig,
               bs_geom: ArrayGeometry, ue_geom: ArrayGeometry, scale: float) -> None:
    """Pick the serving cell link of each UE by maximal expected gain.

    The gain of a cell link is ``lam_rx * lam_tx / trace`` and is bounded by
    ``lam_rx``, which is itself bounded by ``trace``. Candidates are visited
    in decreasing ``trace``; the search stops once the trace drops below the
    best gain found, and ``lam_tx`` is skipped when ``lam_rx`` already rules
    a candidate out. The choice equals that of exhaustive evaluation.
    """
    n_links = len(tbl.link_pair)
    if n_links == 0:
        return
    tr = tbl.trace[tbl.link_pair]
    lue = tbl.pair_ue[tbl.link_pair]
    # per UE, candidates by decreasing trace (cell index breaks ties)
    order = np.lexsort((tbl.link_cell, -tr, lue))
    ue_sorted = lue[order]
    first = np.searchsorted(ue_sorted, np.arange(dep.n_ues))
    last = np.searchsorted(ue_sorted, np.arange(dep.n_ues), side="right")
    best = np.zeros(dep.n_ues)
    active = np.flatnonzero(last > first)
    rank = 0
    evaluated = 0
    prune = cfg.prune_association
    while active.size:
        cand = order[first[active] + rank]
        pairs = tbl.link_pair[cand]
        _ensure_rx_eig(tbl, pairs, ue_geom, scale)
        lam_rx = tbl.lam_rx[pairs]
        ok = lam_rx >= best[active] if prune else np.ones(len(cand), dtype=bool)
        if ok.any():
            c_ok, a_ok = cand[ok], active[ok]
            lam_tx, v_tx = _link_top_eig(tbl, c_ok, dep, bs_geom, scale)
            evaluated += len(c_ok)
            g = lam_rx[ok] * lam_tx / tr[c_ok]
            better = g > best[a_ok]
            upd = a_ok[better]
            best[upd] = g[better]
            tbl.serving_link[upd] = c_ok[better]
            tbl.v_bs[upd] = v_tx[better]
        rank += 1
        active = active[first[active] + rank < last[active]]
        if prune and active.size:
            nxt = tr[order[first[active] + rank]]
            active = active[nxt >= best[active]]
    served = tbl.serving_link >= 0
    tbl.serving_cell[served] = tbl.link_cell[tbl.serving_link[served]]
    tbl.gain[:] = best
    tbl.n_candidates_evaluated = evaluated


def _bs_steering(tbl: LinkTable, rows, cells, dep: Deployment, bs_geom: ArrayGeometry):
    az = tbl.aod_az[rows] - dep.cell_azimuth[cells]
    return array_response(bs_geom, az, tbl.aod_el[rows])


def _link_top_eig(tbl, links, dep, bs_geom, scale):
    pairs = tbl.link_pair[links]
    counts = tbl.sub_start[pairs + 1] - tbl.sub_start[pairs]
    lam = np.empty(len(links))
    vec = np.empty((len(links), bs_geom.n), dtype=complex)
    for c in np.unique(counts):
        sel = np.flatnonzero(counts == c)
        for lo in range(0, len(sel), 256):
            chunk = sel[lo:lo + 256]
            rows = tbl.sub_start[pairs[chunk]][:, None] + np.arange(c)
            cells = np.broadcast_to(tbl.link_cell[links[chunk]][:, None], rows.shape)
            a = _bs_steering(tbl, rows, cells, dep, bs_geom)
            w = np.sqrt(tbl.sub_power[rows] * scale)
            lam[chunk], vec[chunk] = _top_eig_factor(a * w[..., None])
    return lam, vec


# ---------------------------------------------------------------------------
# SINR

@dataclass
class DropResult:
    """Per-UE and per-cell outcome of one drop."""

    drop: int
    ue_interior: np.ndarray
    served: np.ndarray
    serving_cell: np.ndarray
    dl_sinr_db: np.ndarray
    ul_sinr_db: np.ndarray
    dl_snr_db: np.ndarray
    ul_snr_db: np.ndarray
    dl_rate: np.ndarray
    ul_rate: np.ndarray
    dl_noise_dominated: np.ndarray  # bool, meaningful for served UEs
    cell_interior: np.ndarray
    cell_n_served: np.ndarray
    cell_dl_throughput: np.ndarray
    cell_ul_throughput: np.ndarray
    nearest_site_distance: np.ndarray
    serving_distance: np.ndarray    # 3-D, m; NaN when unserved


def _noise_mw(nf_db, bandwidth):
    return 10.0 ** (0.1 * (THERMAL_NOISE_DBM_HZ + nf_db)) * bandwidth


def _schedule(tbl: LinkTable, n_cells: int, n_slots: int, rng):
    """Slot schedule: ``sched[c, s]`` is the UE cell ``c`` serves in slot ``s`` (-1 if none)."""
    served_ues = np.flatnonzero(tbl.served)
    cells = tbl.serving_cell[served_ues]
    order = np.lexsort((served_ues, cells))
    served_ues, cells = served_ues[order], cells[order]
    start = np.searchsorted(cells, np.arange(n_cells + 1))
    counts = np.diff(start)
    pick = np.floor(rng.random((n_cells, n_slots)) * np.maximum(counts, 1)[:, None]).astype(int)
    if not len(served_ues):
        return np.full((n_cells, n_slots), -1), served_ues, start
    sched = np.where(counts[:, None] > 0,
                     served_ues[np.minimum(start[:-1, None] + pick, len(served_ues) - 1)], -1)
    return sched, served_ues, start


def compute_sinr(dep: Deployment, tbl: LinkTable, cfg: NetworkConfig,
                 rng: np.random.Generator, interference: bool = True):
    """DL and UL SINR (dB) of every UE, plus SNRs and the DL interference level.

    Returns ``(dl_sinr, ul_sinr, dl_snr, ul_snr, dl_interference_mw,
    dl_noise_mw)``;
    unserved UEs get ``-inf``. SINRs are linear averages over
    ``cfg.n_slots`` random schedules.
    """
    n_ue, n_cells = dep.n_ues, dep.n_cells
    served = tbl.served
    bs_geom = _bs_geom(cfg)
    sched, served_sorted, cstart = _schedule(tbl, n_cells, cfg.n_slots, rng)
    n_per_cell = np.diff(cstart)
    p_dl = 10.0 ** (0.1 * cfg.dl_tx_power)
    p_ul = 10.0 ** (0.1 * cfg.ul_tx_power)

    # R[l] = v_ue^* Q_rx(pair) v_ue for the pair's UE beam; zero for unserved UEs
    lpair = tbl.link_pair
    lue = tbl.pair_ue[lpair]
    vr = np.zeros((n_ue, cfg.ue_array.n), dtype=complex)
    vr[served] = tbl.v_rx[tbl.link_pair[tbl.serving_link[served]]]
    # links sharing a pair share R, so evaluate it once per pair
    ue_geom = _ue_geom(cfg)
    scale = float(cfg.ue_array.n * cfg.bs_array.n)
    pq = np.zeros(tbl.n_pairs)
    need = np.flatnonzero(served[tbl.pair_ue])
    if need.size:
        pq[need] = _quadratic_form(ue_geom, tbl.aoa_az, tbl.aoa_el, tbl.sub_power,
                                   tbl.sub_start, need, vr[tbl.pair_ue[need]], scale)
    rq = pq[lpair] / tbl.trace[lpair]

    dl_int = np.zeros((n_ue, cfg.n_slots))
    ul_int = np.zeros((n_ue, cfg.n_slots))
    sched_flag = np.zeros((n_ue, cfg.n_slots), dtype=bool)
    for s in range(cfg.n_slots):
        j = sched[:, s]
        sched_flag[j[j >= 0], s] = True

    lstart = np.searchsorted(tbl.link_cell, np.arange(n_cells + 1))
    if interference:
        for c in range(n_cells):
            lo, hi = lstart[c], lstart[c + 1]
            if hi == lo or n_per_cell[c] == 0:
                continue
            links = np.arange(lo, hi)
            ues_c = served_sorted[cstart[c]:cstart[c + 1]]
            pairs = lpair[links]
            counts = tbl.sub_start[pairs + 1] - tbl.sub_start[pairs]
            rows = np.concatenate([np.arange(tbl.sub_start[p], tbl.sub_start[p + 1])
                                   for p in pairs])
            a = _bs_steering(tbl, rows, np.full(len(rows), c), dep, bs_geom)
            b = np.abs(a.conj() @ tbl.v_bs[ues_c].T) ** 2  # (rows, n_served)
            b *= (tbl.sub_power[rows] * scale)[:, None]
            seg = np.concatenate(([0], np.cumsum(counts)[:-1]))
            t = np.add.reduceat(b, seg, axis=0)  # (links, n_served)
            # scheduled UE column per slot
            col = np.searchsorted(ues_c, sched[c])
            other = tbl.serving_cell[lue[links]] != c
            w = rq[links] * other
            # DL: this cell interferes with UEs it does not serve
            np.add.at(dl_int, lue[links], p_dl * w[:, None] * t[:, col])
            # UL: UEs scheduled elsewhere in the slot interfere with this cell's UEs
            m = sched_flag[lue[links]] & other[:, None]
            ul_int[ues_c] += p_ul * (t * w[:, None]).T @ m

    dl_noise = _noise_mw(cfg.ue_noise_figure, cfg.bandwidth)
    n_cell_of_ue = np.where(served, n_per_cell[np.maximum(tbl.serving_cell, 0)], 1)
    ul_bw = cfg.bandwidth / n_cell_of_ue if cfg.ul_noise_per_share else cfg.bandwidth
    ul_noise = _noise_mw(cfg.bs_noise_figure, ul_bw) * np.ones(n_ue)
    dl_sig = p_dl * tbl.gain
    ul_sig = p_ul * tbl.gain
    with np.errstate(divide="ignore"):
        dl_sinr = 10 * np.log10(np.mean(dl_sig[:, None] / (dl_int + dl_noise), axis=1))
        ul_sinr = 10 * np.log10(np.mean(ul_sig[:, None] / (ul_int + ul_noise[:, None]), axis=1))
        dl_snr = 10 * np.log10(dl_sig / dl_noise)
        ul_snr = 10 * np.log10(ul_sig / ul_noise)
    neg = -np.inf
    return (np.where(served, dl_sinr, neg), np.where(served, ul_sinr, neg),
            np.where(served, dl_snr, neg), np.where(served, ul_snr, neg),
            dl_int.mean(axis=1), dl_noise)


def sinr_to_rate(sinr_db, delta: float = 3.0, rho_max: float = 4.8):
    """Spectral efficiency ``min(log2(1 + 10^(0.1 (SINR - delta))), rho_max)``; -inf maps to 0."""
    s = np.asarray(sinr_db, float)
    with np.errstate(over="ignore"):
        rho = np.minimum(np.log2(1.0 + 10.0 ** (0.1 * (s - delta))), rho_max)
    rho = np.where(np.isneginf(s), 0.0, rho)
    return float(rho) if rho.ndim == 0 else rho


def simulate_drop(cfg: NetworkConfig, drop: int, seed: int,
                  forced_state: LinkState | None = None) -> DropResult:
    rng = drop_rng(seed, drop)
    dep = drop_network(cfg, rng)
    tbl = realize_links(dep, cfg, rng, forced_state)
    dl, ul, dl_snr, ul_snr, dl_i, dl_n = compute_sinr(dep, tbl, cfg, rng)
    served = tbl.served
    n_cell = np.bincount(tbl.serving_cell[served], minlength=dep.n_cells)
    share = cfg.bandwidth / np.where(served, n_cell[np.maximum(tbl.serving_cell, 0)], 1)
    k = (1.0 - cfg.overhead) * cfg.duplex_split * share
    dl_rate = np.where(served, k * sinr_to_rate(dl, cfg.delta, cfg.rho_max), 0.0)
    ul_rate = np.where(served, k * sinr_to_rate(ul, cfg.delta, cfg.rho_max), 0.0)
    cell_dl = np.bincount(tbl.serving_cell[served], weights=dl_rate[served],
                          minlength=dep.n_cells)
    cell_ul = np.bincount(tbl.serving_cell[served], weights=ul_rate[served],
                          minlength=dep.n_cells)
    near, near_d = dep.nearest_site()
    serv_d = np.full(dep.n_ues, np.nan)
    serv_d[served] = tbl.pair_distance[tbl.link_pair[tbl.serving_link[served]]]
    return DropResult(drop, dep.interior_site[near], served, tbl.serving_cell, dl, ul,
                      dl_snr, ul_snr, dl_rate, ul_rate, served & (dl_i < dl_n),
                      dep.interior_site[dep.cell_site], n_cell, cell_dl, cell_ul, near_d,
                      serv_d)


def drop_rng(seed: int, drop: int) -> np.random.Generator:
    """Independent stream for drop ``drop`` of a run seeded with ``seed``."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, drop])))


def _drop_task(args):
    return simulate_drop(*args)


def run_drops(cfg: NetworkConfig, n_drops: int, seed: int,
              workers: int = 1) -> list[DropResult]:
    """Evaluate ``n_drops`` drops; the result does not depend on ``workers``."""
    if n_drops < 1:
        raise ValueError("need at least one drop")
    tasks = [(cfg, i, seed) for i in range(n_drops)]
    if workers <= 1:
        results = [_drop_task(t) for t in tasks]
    else:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            results = list(ex.map(_drop_task, tasks))
    return sorted(results, key=lambda r: r.drop)


# ---------------------------------------------------------------------------
# reporting

@dataclass
class RateReport:
    """Aggregates over the interior of all drops (rates in bps)."""

    n_drops: int
    n_ues: int
    n_cells: int
    dl_sinr_db: np.ndarray
    ul_sinr_db: np.ndarray
    dl_rate: np.ndarray
    ul_rate: np.ndarray
    served: np.ndarray
    cell_dl_throughput: np.ndarray
    cell_ul_throughput: np.ndarray
    dl_spectral_efficiency: float
    ul_spectral_efficiency: float
    dl_cell_throughput: float
    ul_cell_throughput: float
    dl_edge_rate: float
    ul_edge_rate: float
    inr_noise_dominated_fraction: float
    dl_sinr_below_0db_fraction: float
    # served links whose length lies outside the distances the laws were fitted on
    outside_fit_range_fraction: float = 0.0

    def summary(self) -> dict:
        return {
            "drops": self.n_drops,
            "ues": self.n_ues,
            "cells": self.n_cells,
            "served_fraction": float(self.served.mean()) if self.n_ues else 0.0,
            "dl_spectral_efficiency_bps_hz": self.dl_spectral_efficiency,
            "ul_spectral_efficiency_bps_hz": self.ul_spectral_efficiency,
            "dl_cell_throughput_mbps": self.dl_cell_throughput / 1e6,
            "ul_cell_throughput_mbps": self.ul_cell_throughput / 1e6,
            "dl_edge_rate_mbps": self.dl_edge_rate / 1e6,
            "ul_edge_rate_mbps": self.ul_edge_rate / 1e6,
            "dl_sinr_below_0db_fraction": self.dl_sinr_below_0db_fraction,
            "noise_dominated_fraction": self.inr_noise_dominated_fraction,
            "outside_fit_range_fraction": self.outside_fit_range_fraction,
        }


def _pct(x, q):
    return float(np.percentile(np.sort(x), q)) if len(x) else 0.0


def schedule_and_report(results: Sequence[DropResult], cfg: NetworkConfig) -> RateReport:
    """Pool interior UEs and cells over drops.

    Spectral efficiency is the mean cell throughput divided by
    ``duplex_split * bandwidth``: it includes the overhead but not the
    duplex split.
    """
    if not results:
        raise ValueError("need at least one drop")
    results = sorted(results, key=lambda r: r.drop)

    def pool(name, mask_name):
        return np.concatenate([getattr(r, name)[getattr(r, mask_name)] for r in results])

    dl_rate = pool("dl_rate", "ue_interior")
    ul_rate = pool("ul_rate", "ue_interior")
    served = pool("served", "ue_interior")
    dl_sinr = pool("dl_sinr_db", "ue_interior")
    ul_sinr = pool("ul_sinr_db", "ue_interior")
    nd = pool("dl_noise_dominated", "ue_interior")
    sd = pool("serving_distance", "ue_interior")
    cdl = pool("cell_dl_throughput", "cell_interior")
    cul = pool("cell_ul_throughput", "cell_interior")
    denom = cfg.duplex_split * cfg.bandwidth
    mean_dl = float(cdl.mean()) if len(cdl) else 0.0
    mean_ul = float(cul.mean()) if len(cul) else 0.0
    n_served = int(served.sum())
    return RateReport(
        n_drops=len(results), n_ues=len(dl_rate), n_cells=len(cdl),
        dl_sinr_db=dl_sinr, ul_sinr_db=ul_sinr, dl_rate=dl_rate, ul_rate=ul_rate,
        served=served, cell_dl_throughput=cdl, cell_ul_throughput=cul,
        dl_spectral_efficiency=mean_dl / denom if denom else 0.0,
        ul_spectral_efficiency=mean_ul / denom if denom else 0.0,
        dl_cell_throughput=mean_dl, ul_cell_throughput=mean_ul,
        dl_edge_rate=_pct(dl_rate, 5), ul_edge_rate=_pct(ul_rate, 5),
        inr_noise_dominated_fraction=float(nd[served].mean()) if n_served else 0.0,
        dl_sinr_below_0db_fraction=float(np.mean(dl_sinr[served] < 0.0)) if n_served else 0.0,
        outside_fit_range_fraction=float(np.mean(
            (sd[served] < VALID_DISTANCE_RANGE[0]) | (sd[served] > VALID_DISTANCE_RANGE[1])))
        if n_served else 0.0,
    )
