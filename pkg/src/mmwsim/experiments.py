"""Batch experiments behind the command line.

Each ``run_*`` function takes an :class:`ExperimentSpec`, writes its files
into ``spec.out_dir`` and returns a small dict of headline numbers. Every
output is a deterministic function of the experiment settings.
"""

from __future__ import annotations

import csv
import dataclasses
import io
import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np
from scipy import stats

from . import channel_model as cm
from . import estimation as est
from . import mimo
from . import netsim
from .config import BAND_SECTION, format_band_card, load_band, read_card

NETWORK_SECTION = "NetworkConfig"

# published reference rate table, (DL, UL) pairs:
# spectral efficiency bps/Hz, cell throughput Mbps, 5% edge rate Mbps
RATE_TABLE_REFERENCE = {
    "28 GHz 8x8": ((3.34, 3.16), (1668, 1580), (52.28, 34.78)),
    "28 GHz 4x4": ((3.03, 2.94), (1514, 1468), (28.47, 19.90)),
    "28 GHz 4x4, d_shift=50 m": ((2.90, 2.91), (1450, 1454), (17.62, 17.49)),
    "28 GHz 4x4, d_shift=75 m": ((2.58, 2.60), (1289, 1298), (0.54, 0.09)),
    "28 GHz 4x4, no LOS, d_shift=50 m": ((2.16, 2.34), (1081, 1168), (11.14, 15.19)),
    "73 GHz 4x4": ((2.58, 2.58), (1288, 1291), (10.02, 8.92)),
    "73 GHz 8x8": ((2.93, 2.88), (1465, 1439), (24.08, 19.76)),
}
# cited LTE baseline (not simulated)
LTE_CONSTANTS = ((2.69, 2.36), (53.8, 47.2), (1.80, 1.94))

TABLE3_CONFIGS = {
    "28 GHz 8x8": dict(band="28ghz-nyc", ue_array="8x8"),
    "28 GHz 4x4": dict(band="28ghz-nyc", ue_array="4x4"),
    "28 GHz 4x4, d_shift=50 m": dict(band="28ghz-nyc", ue_array="4x4", d_shift=50.0),
    "28 GHz 4x4, d_shift=75 m": dict(band="28ghz-nyc", ue_array="4x4", d_shift=75.0),
    "28 GHz 4x4, no LOS, d_shift=50 m": dict(band="28ghz-nyc", ue_array="4x4",
                                             d_shift=50.0, suppress_los=True),
    "73 GHz 4x4": dict(band="73ghz-nyc", ue_array="4x4"),
    "73 GHz 8x8": dict(band="73ghz-nyc", ue_array="8x8"),
}


@dataclass
class ExperimentSpec:
    subcommand: str
    seed: int
    out_dir: Path
    config: Path | None = None
    band: str = "28ghz-nyc"
    n_drops: int = 20
    n_samples: int | None = None
    ue_array: str | None = None
    bs_array: str | None = None
    d_shift: float | None = None
    no_los: bool = False
    area: float | None = None
    table3: bool = False
    self_test: bool = False
    formats: tuple[str, ...] = ("csv", "txt")
    workers: int = 1
    path_loss_csv: Path | None = None
    map_csvs: tuple[Path, ...] = ()

    def __post_init__(self):
        if not isinstance(self.seed, (int, np.integer)) or isinstance(self.seed, bool):
            raise TypeError("seed must be an integer")
        if not 0 <= int(self.seed) < 2 ** 64:
            raise ValueError("seed must fit in 64 unsigned bits")
        self.out_dir = Path(self.out_dir)
        bad = set(self.formats) - {"csv", "txt"}
        if bad:
            raise ValueError(f"unknown output formats {sorted(bad)}")


# ---------------------------------------------------------------------------
# helpers

def _fmt(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return "1" if x else "0"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, str):
        return x
    x = float(x)
    if math.isnan(x):
        return "nan"
    if math.isinf(x):
        return "inf" if x > 0 else "-inf"
    return f"{x:.10g}"


def write_csv(path: Path, header, rows) -> Path:
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(header)
    for row in rows:
        wr.writerow([_fmt(v) for v in row])
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(buf.getvalue().encode("utf-8"))
    return path


def write_text(path: Path, text: str) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(text.encode("utf-8"))
    return path


def _ecdf(samples, grid):
    s = np.sort(np.asarray(samples, float))
    return np.searchsorted(s, grid, side="right") / max(len(s), 1)


def _rng(spec: ExperimentSpec, stream: int = 0) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(spec.seed), stream])))


def resolve_band(spec: ExperimentSpec) -> cm.BandParameters:
    """Band from the config card if it has one, else the ``--band`` preset or path."""
    if spec.config is not None:
        cp = read_card(spec.config)
        if BAND_SECTION in cp:
            return load_band(str(spec.config))
    return load_band(spec.band)


def _network_overrides(spec: ExperimentSpec) -> dict:
    if spec.config is None:
        return {}
    cp = read_card(spec.config)
    if NETWORK_SECTION not in cp:
        return {}
    types = {f.name: f.type for f in dataclasses.fields(netsim.NetworkConfig)}
    out = {}
    for key, raw in cp[NETWORK_SECTION].items():
        if key not in types or key == "band":
            raise ValueError(f"unknown {NETWORK_SECTION} field {key!r}")
        if key in ("bs_array", "ue_array"):
            out[key] = mimo.ArrayGeometry.parse(raw)
        elif key in ("suppress_los", "ul_noise_per_share", "prune_association",
                     "shared_site_links"):
            out[key] = cp[NETWORK_SECTION].getboolean(key)
        elif key in ("sectors_per_site", "ues_per_cell", "n_subpaths", "n_slots"):
            out[key] = int(raw)
        else:
            out[key] = float(raw)
    return out


def network_config(spec: ExperimentSpec, **extra) -> netsim.NetworkConfig:
    """Config card first, then command-line flags, then ``extra``."""
    kw = _network_overrides(spec)
    kw["band"] = resolve_band(spec)
    if spec.ue_array:
        kw["ue_array"] = mimo.ArrayGeometry.parse(spec.ue_array)
    if spec.bs_array:
        kw["bs_array"] = mimo.ArrayGeometry.parse(spec.bs_array)
    if spec.d_shift is not None:
        kw["d_shift"] = spec.d_shift
    if spec.no_los:
        kw["suppress_los"] = True
    if spec.area is not None:
        kw["area"] = spec.area
    kw.update(extra)
    if isinstance(kw.get("band"), str):
        kw["band"] = load_band(kw["band"])
    for key in ("ue_array", "bs_array"):
        if isinstance(kw.get(key), str):
            kw[key] = mimo.ArrayGeometry.parse(kw[key])
    return netsim.NetworkConfig(**kw)


# ---------------------------------------------------------------------------
# channel statistics

def run_channel_stats(spec: ExperimentSpec) -> dict:
    """Empirical-vs-model grids for path loss, K, power fractions, spreads and link state."""
    band = resolve_band(spec)
    n = spec.n_samples or 100_000
    rng = _rng(spec)
    out = spec.out_dir
    lo, hi = cm.VALID_DISTANCE_RANGE

    # path-loss shadowing residuals per state
    rows = []
    for state, sigma in ((cm.LinkState.LOS, band.los_sigma), (cm.LinkState.NLOS, band.nlos_sigma)):
        d = rng.uniform(lo, hi, n)
        resid = cm.sample_path_loss(d, state, band, rng) - cm.median_path_loss(d, state, band)
        grid = np.linspace(-4 * max(sigma, 1e-3), 4 * max(sigma, 1e-3), 161)
        model = stats.norm.cdf(grid, scale=sigma) if sigma > 0 else (grid >= 0).astype(float)
        rows += [(state.name, g, m, e) for g, m, e in zip(grid, model, _ecdf(resid, grid))]
    write_csv(out / "path_loss.csv", ["state", "shadowing_db", "model_cdf", "empirical_cdf"], rows)

    # cluster count
    k = np.maximum(rng.poisson(band.lambda_k, n), 1)
    kk = np.arange(1, max(int(k.max()), 10) + 1)
    emp = np.bincount(k, minlength=kk[-1] + 1)[1:] / n
    write_csv(out / "num_clusters.csv", ["k", "model_pmf", "empirical_pmf"],
              zip(kk, cm.num_clusters_pmf(kk, band.lambda_k), emp))

    # weaker-cluster fraction for K = 2
    weak = np.array([cm.sample_cluster_power_fractions(2, band, rng).min() for _ in range(n)])
    grid = np.linspace(0.0, 0.5, 101)
    model = np.concatenate(([0.0], est.weak_fraction_cdf(grid[1:], band.r_tau, band.zeta)))
    model[-1] = 1.0
    write_csv(out / "power_fractions.csv", ["weak_fraction", "model_cdf", "empirical_cdf"],
              zip(grid, model, _ecdf(weak, grid)))

    # angular spreads, degrees
    rows = []
    for name in ("bs_az", "bs_el", "ue_az", "ue_el"):
        mean = getattr(band, f"{name}_spread_mean")
        draws = rng.exponential(mean, n) if mean > 0 else np.zeros(n)
        grid = np.linspace(0.0, 6 * mean if mean > 0 else 1.0, 121)
        model = stats.expon.cdf(grid, scale=mean) if mean > 0 else np.ones_like(grid)
        rows += [(name, g, m, e) for g, m, e in zip(grid, model, _ecdf(draws, grid))]
    write_csv(out / "angular_spreads.csv", ["dimension", "spread_deg", "model_cdf", "empirical_cdf"],
              rows)

    # link-state probabilities
    grid = np.arange(0.0, 401.0, 5.0)
    per_d = max(n // len(grid), 1)
    p_out, p_los, p_nlos = cm.link_state_probabilities(grid, band)
    rows = []
    for i, d in enumerate(grid):
        st = cm.draw_link_states(np.full(per_d, d), band, rng)
        f = np.bincount(st, minlength=3) / per_d
        rows.append((d, p_out[i], p_los[i], p_nlos[i], f[cm.LinkState.OUTAGE],
                     f[cm.LinkState.LOS], f[cm.LinkState.NLOS]))
    write_csv(out / "link_state.csv",
              ["distance_m", "p_out", "p_los", "p_nlos", "emp_out", "emp_los", "emp_nlos"], rows)

    summary = {
        "samples": n,
        "mean_k": float(k.mean()),
        "outage_onset_m": cm.outage_onset_distance(band),
        "umi_gap_db_at_100m": cm.median_path_loss(100.0, cm.LinkState.NLOS, band)
        - cm.umi_path_loss(100.0, 2.5),
    }
    if "txt" in spec.formats:
        write_text(out / "channel_stats.txt", _kv_text(f"channel statistics, band {band.name}", summary))
    return summary


def _kv_text(title, d) -> str:
    lines = [title]
    lines += [f"{k:<32s} {_fmt(v)}" for k, v in d.items()]
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# beamforming analysis

def _draw_non_outage_link(band, rng, lo, hi):
    d = rng.uniform(lo, hi)
    p_out, p_los, p_nlos = cm.link_state_probabilities(d, band)
    state = cm.LinkState.LOS if rng.random() * (p_los + p_nlos) < p_los else cm.LinkState.NLOS
    return d, cm.sample_link(d, cm.los_elevation(d), band, rng, cm.LinkOverrides(state=state))


def bf_samples(band: cm.BandParameters, n: int, rng: np.random.Generator,
               ue: mimo.ArrayGeometry, bs: mimo.ArrayGeometry,
               distance_range=cm.VALID_DISTANCE_RANGE, instantaneous: bool = True) -> dict:
    """Serving and interfering beamforming gains plus phi(1..4) for ``n`` links.

    Each serving link is paired with an independent interfering link drawn
    at the same distance, so both share the same central elevations. The
    serving eigenbeams are applied to the interfering link's covariances.
    """
    lo, hi = distance_range
    out = {k: np.empty(n) for k in ("serv_rx", "serv_tx", "serv_total", "intf_rx", "intf_tx",
                                     "inst_total")}
    phi = np.empty((n, 4))
    n_rx, n_tx = ue.n, bs.n
    r_max = min(4, n_rx, n_tx)
    for i in range(n):
        d, a = _draw_non_outage_link(band, rng, lo, hi)
        p_out, p_los, p_nlos = cm.link_state_probabilities(d, band)
        st = cm.LinkState.LOS if rng.random() * (p_los + p_nlos) < p_los else cm.LinkState.NLOS
        b = cm.sample_link(d, cm.los_elevation(d), band, rng, cm.LinkOverrides(state=st))
        sa = mimo.synthesize_subpaths(a, rng=rng)
        ca = mimo.covariances(sa, ue, bs)
        cb = mimo.covariances(mimo.synthesize_subpaths(b, rng=rng), ue, bs)
        lam_rx, vec_rx = np.linalg.eigh(ca.q_rx)
        lam_tx, vec_tx = np.linalg.eigh(ca.q_tx)
        tr = lam_rx.sum()
        out["serv_rx"][i] = 10 * np.log10(lam_rx[-1] / (tr / n_rx))
        out["serv_tx"][i] = 10 * np.log10(lam_tx[-1] / (lam_tx.sum() / n_tx))
        vr, vt = vec_rx[:, -1], vec_tx[:, -1]
        out["intf_rx"][i] = 10 * np.log10(np.real(np.vdot(vr, cb.q_rx @ vr))
                                          / (np.real(np.trace(cb.q_rx)) / n_rx))
        out["intf_tx"][i] = 10 * np.log10(np.real(np.vdot(vt, cb.q_tx @ vt))
                                          / (np.real(np.trace(cb.q_tx)) / n_tx))
        for r in range(1, 5):
            if r <= r_max:
                phi[i, r - 1] = min(1.0, lam_rx[::-1][:r].sum() / tr
                                    * lam_tx[::-1][:r].sum() / lam_tx.sum())
            else:
                phi[i, r - 1] = 1.0
        out["inst_total"][i] = (mimo.bf_gain_instantaneous(mimo.channel_matrix(sa, ue, bs, rng=rng))
                                if instantaneous else np.nan)
    out["serv_total"] = out["serv_rx"] + out["serv_tx"]
    out["phi"] = phi
    return out


def run_bf_analysis(spec: ExperimentSpec) -> dict:
    band = resolve_band(spec)
    n = spec.n_samples or 10_000
    ue = mimo.ArrayGeometry.parse(spec.ue_array or "4x4")
    bs = mimo.ArrayGeometry.parse(spec.bs_array or "8x8", boresight_elevation=-math.radians(10.0))
    s = bf_samples(band, n, _rng(spec), ue, bs)
    grid = np.round(np.arange(-20.0, 40.0001, 0.1), 10)
    cols = ["serv_rx", "serv_tx", "serv_total", "intf_rx", "intf_tx", "inst_total"]
    write_csv(spec.out_dir / "bf_gain_cdf.csv", ["gain_db"] + [c + "_cdf" for c in cols],
              zip(grid, *[_ecdf(s[c], grid) for c in cols]))
    pg = np.round(np.arange(0.0, 1.0001, 0.01), 10)
    write_csv(spec.out_dir / "power_fraction_cdf.csv", ["phi", "r1_cdf", "r2_cdf", "r3_cdf", "r4_cdf"],
              zip(pg, *[_ecdf(s["phi"][:, r], pg) for r in range(4)]))
    med = {f"median_{c}_db": float(np.median(s[c])) for c in cols}
    med["median_gap_rx_db"] = med["median_serv_rx_db"] - med["median_intf_rx_db"]
    med["median_gap_tx_db"] = med["median_serv_tx_db"] - med["median_intf_tx_db"]
    for r in range(4):
        med[f"median_phi{r + 1}"] = float(np.median(s["phi"][:, r]))
    med["max_serv_tx_db"] = float(s["serv_tx"].max())
    med["bound_tx_db"] = 10 * math.log10(bs.n)
    med["links"] = n
    if "txt" in spec.formats:
        write_text(spec.out_dir / "bf_summary.txt",
                   _kv_text(f"beamforming analysis, band {band.name}, UE {ue.n_horizontal}x"
                            f"{ue.n_vertical}, BS {bs.n_horizontal}x{bs.n_vertical}", med))
    if "csv" in spec.formats:
        write_csv(spec.out_dir / "bf_summary.csv", ["statistic", "value"], med.items())
    return med


# ---------------------------------------------------------------------------
# network simulation

def _ue_rows(results):
    for r in results:
        for i in range(len(r.served)):
            yield (i, r.drop, r.dl_sinr_db[i], r.ul_sinr_db[i], r.dl_rate[i], r.ul_rate[i],
                   r.served[i], r.ue_interior[i])


def _cdf_rows(rep: netsim.RateReport):
    q = np.arange(0, 101)

    def pct(x):
        x = np.asarray(x, float)
        if not len(x):
            return np.full(len(q), np.nan)
        # -inf - -inf is nan; a percentile wholly inside the unserved mass is -inf
        with np.errstate(invalid="ignore"):
            v = np.percentile(np.sort(x), q)
        return np.where(np.isnan(v), -np.inf, v)

    return zip(q, pct(rep.dl_sinr_db), pct(rep.ul_sinr_db), pct(rep.dl_rate), pct(rep.ul_rate))


CDF_HEADER = ["percentile", "dl_sinr_db", "ul_sinr_db", "dl_rate_bps", "ul_rate_bps"]
UE_HEADER = ["ue_id", "drop", "dl_sinr_db", "ul_sinr_db", "dl_rate_bps", "ul_rate_bps",
             "served_flag", "interior"]


def simulate(cfg: netsim.NetworkConfig, spec: ExperimentSpec):
    results = netsim.run_drops(cfg, spec.n_drops, int(spec.seed), spec.workers)
    return results, netsim.schedule_and_report(results, cfg)


def _report_text(title, rep: netsim.RateReport) -> str:
    s = rep.summary()
    lines = [title,
             f"{'':28s} {'DL':>10s} {'UL':>10s}",
             f"{'spectral efficiency bps/Hz':28s} {s['dl_spectral_efficiency_bps_hz']:10.3f} "
             f"{s['ul_spectral_efficiency_bps_hz']:10.3f}",
             f"{'cell throughput Mbps':28s} {s['dl_cell_throughput_mbps']:10.1f} "
             f"{s['ul_cell_throughput_mbps']:10.1f}",
             f"{'5% edge rate Mbps':28s} {s['dl_edge_rate_mbps']:10.2f} {s['ul_edge_rate_mbps']:10.2f}",
             f"drops {s['drops']}, interior UEs {s['ues']}, interior cells {s['cells']}, "
             f"served fraction {s['served_fraction']:.4f}",
             f"DL SINR < 0 dB fraction {s['dl_sinr_below_0db_fraction']:.4f}",
             f"noise-dominated fraction {s['noise_dominated_fraction']:.4f}",
             f"served links outside the fitted 30-200 m range {s['outside_fit_range_fraction']:.4f}"]
    return "\n".join(lines) + "\n"


def run_netsim(spec: ExperimentSpec) -> dict:
    if spec.table3:
        return run_table3(spec)
    cfg = network_config(spec)
    results, rep = simulate(cfg, spec)
    out = spec.out_dir
    if "csv" in spec.formats:
        write_csv(out / "ue_samples.csv", UE_HEADER, _ue_rows(results))
        write_csv(out / "rate_cdf.csv", CDF_HEADER, _cdf_rows(rep))
        write_csv(out / "summary.csv", ["metric", "value"], rep.summary().items())
    if "txt" in spec.formats:
        write_text(out / "summary.txt", _report_text(
            f"network simulation: band {cfg.band.name}, UE {cfg.ue_array.n_horizontal}x"
            f"{cfg.ue_array.n_vertical}, d_shift {cfg.d_shift:g} m, "
            f"LOS {'off' if cfg.suppress_los else 'on'}", rep))
    return rep.summary()


def table3_reports(spec: ExperimentSpec, names=None) -> dict[str, netsim.RateReport]:
    reps = {}
    for name in names or TABLE3_CONFIGS:
        cfg = network_config(spec, **TABLE3_CONFIGS[name])
        reps[name] = simulate(cfg, spec)[1]
    return reps


def format_table3(reps: dict[str, netsim.RateReport]) -> str:
    head = (f"{'configuration':34s} {'spec. eff DL/UL':>17s} {'reference':>11s} "
            f"{'cell Mbps DL/UL':>17s} {'reference':>11s} {'5% edge Mbps DL/UL':>20s} {'reference':>13s}")
    lines = [head, "-" * len(head)]
    for name, rep in reps.items():
        s = rep.summary()
        p = RATE_TABLE_REFERENCE[name]
        lines.append(
            f"{name:34s} {s['dl_spectral_efficiency_bps_hz']:8.2f}/{s['ul_spectral_efficiency_bps_hz']:<8.2f}"
            f" {p[0][0]:5.2f}/{p[0][1]:<5.2f}"
            f" {s['dl_cell_throughput_mbps']:8.0f}/{s['ul_cell_throughput_mbps']:<8.0f}"
            f" {p[1][0]:5.0f}/{p[1][1]:<5.0f}"
            f" {s['dl_edge_rate_mbps']:9.2f}/{s['ul_edge_rate_mbps']:<10.2f}"
            f" {p[2][0]:6.2f}/{p[2][1]:<6.2f}")
    lte = LTE_CONSTANTS
    lines.append(f"{'LTE (cited, not simulated)':34s} {'':17s} {lte[0][0]:5.2f}/{lte[0][1]:<5.2f}"
                 f" {'':17s} {lte[1][0]:5.1f}/{lte[1][1]:<5.1f} {'':20s} {lte[2][0]:6.2f}/{lte[2][1]:<6.2f}")
    return "\n".join(lines) + "\n"


def run_table3(spec: ExperimentSpec) -> dict:
    reps = table3_reports(spec)
    out = spec.out_dir
    text = format_table3(reps)
    if "txt" in spec.formats:
        write_text(out / "table3.txt", text)
    if "csv" in spec.formats:
        rows = []
        for name, rep in reps.items():
            s = rep.summary()
            p = RATE_TABLE_REFERENCE[name]
            rows.append((name, s["dl_spectral_efficiency_bps_hz"], s["ul_spectral_efficiency_bps_hz"],
                         s["dl_cell_throughput_mbps"], s["ul_cell_throughput_mbps"],
                         s["dl_edge_rate_mbps"], s["ul_edge_rate_mbps"],
                         p[0][0], p[0][1], p[1][0], p[1][1], p[2][0], p[2][1]))
        rows.append(("LTE (cited)", "", "", "", "", "", "", *LTE_CONSTANTS[0], *LTE_CONSTANTS[1],
                     *LTE_CONSTANTS[2]))
        write_csv(out / "table3.csv",
                  ["configuration", "dl_se", "ul_se", "dl_cell_mbps", "ul_cell_mbps",
                   "dl_edge_mbps", "ul_edge_mbps", "ref_dl_se", "ref_ul_se",
                   "ref_dl_cell_mbps", "ref_ul_cell_mbps", "ref_dl_edge_mbps",
                   "ref_ul_edge_mbps"], rows)
        for i, (name, rep) in enumerate(reps.items()):
            write_csv(out / f"rate_cdf_{i}.csv", CDF_HEADER, _cdf_rows(rep))
    return {"table": text, "reports": reps}


# ---------------------------------------------------------------------------
# estimation

BUNDLED_MAP = "four_cluster_map.csv"

# four clusters in (tx_az, tx_el, rx_az, rx_el) degrees, with rms spreads
# and powers in mW; the layout of a typical NLOS location
FOUR_CLUSTERS = (
    ((40.0, 0.0, 200.0, 0.0), (8.0, 3.0, 12.0, 6.0), 4.0e-7),
    ((130.0, 0.0, 320.0, 20.0), (10.0, 3.0, 15.0, 6.0), 1.5e-7),
    ((250.0, 0.0, 80.0, 0.0), (6.0, 3.0, 10.0, 6.0), 8.0e-8),
    ((310.0, 0.0, 150.0, -20.0), (8.0, 3.0, 12.0, 6.0), 3.0e-8),
)


def make_bundled_map() -> est.AngularPowerMap:
    """Regenerate the bundled map: 10° azimuth steps, 3 UE elevations, 2% cells skipped."""
    rng = np.random.Generator(np.random.PCG64(3))
    n = 36 * 36 * 3
    measured = rng.random(n) >= 0.02
    c, s, p = (np.array(v) for v in zip(*FOUR_CLUSTERS))
    return est.synthesize_power_map(c, s, p, rx_el=(-20.0, 0.0, 20.0),
                                    threshold_mw=1e-3 * p.max(), measured=measured)


def bundled_map() -> est.AngularPowerMap:
    """The bundled four-cluster synthetic power map."""
    with resources.as_file(resources.files("mmwsim") / "data" / BUNDLED_MAP) as p:
        return est.read_power_map_csv(p)


@dataclass
class SelfTestRow:
    parameter: str
    truth: float
    fitted: float
    tolerance: float
    relative: bool = False

    @property
    def error(self) -> float:
        e = self.fitted - self.truth
        return abs(e / self.truth) if self.relative else abs(e)

    @property
    def ok(self) -> bool:
        return bool(self.error <= self.tolerance)


def synthetic_campaign(band: cm.BandParameters, n: int, rng: np.random.Generator) -> dict:
    """Measurement-like data drawn from the generator."""
    lo, hi = cm.VALID_DISTANCE_RANGE
    pl = []
    for state in (cm.LinkState.LOS, cm.LinkState.NLOS):
        d = rng.uniform(lo, hi, n)
        loss = cm.sample_path_loss(d, state, band, rng)
        pl += [est.PathLossSample(float(a), float(b), state) for a, b in zip(d, loss)]
    d = rng.uniform(30.0, 420.0, n)
    states = cm.draw_link_states(d, band, rng)
    k = np.maximum(rng.poisson(band.lambda_k, n), 1)
    fr = np.array([cm.sample_cluster_power_fractions(2, band, rng).min() for _ in range(n)])
    spreads = {name: (rng.exponential(getattr(band, f"{name}_spread_mean"), n)
                      if getattr(band, f"{name}_spread_mean") > 0 else np.zeros(n))
               for name in ("bs_az", "bs_el", "ue_az", "ue_el")}
    return {"path_loss": pl, "link_states": [(float(a), cm.LinkState(int(b)))
                                             for a, b in zip(d, states)],
            "counts": k, "fractions": fr, "spreads": spreads}


def self_test_rows(band: cm.BandParameters, fitted: cm.BandParameters) -> list[SelfTestRow]:
    rows = []
    for p in ("nlos", "los"):
        rows += [SelfTestRow(f"{p}_alpha", getattr(band, f"{p}_alpha"), getattr(fitted, f"{p}_alpha"), 2.0),
                 SelfTestRow(f"{p}_beta", getattr(band, f"{p}_beta"), getattr(fitted, f"{p}_beta"), 0.15),
                 SelfTestRow(f"{p}_sigma", getattr(band, f"{p}_sigma"), getattr(fitted, f"{p}_sigma"), 1.0)]
    for p in ("a_out", "b_out", "a_los"):
        rows.append(SelfTestRow(p, getattr(band, p), getattr(fitted, p), 0.10, relative=True))
    rows.append(SelfTestRow("r_tau", band.r_tau, fitted.r_tau, 0.3))
    rows.append(SelfTestRow("zeta", band.zeta, fitted.zeta, 0.5))
    # the empirical mean of K estimates E[max(Poisson, 1)], not lambda
    rows.append(SelfTestRow("lambda_k (vs censored mean)", est.censored_poisson_mean(band.lambda_k),
                            fitted.lambda_k, 0.05))
    for name in ("bs_az", "bs_el", "ue_az", "ue_el"):
        t = getattr(band, f"{name}_spread_mean")
        rows.append(SelfTestRow(f"{name}_spread_mean", t, getattr(fitted, f"{name}_spread_mean"),
                                max(0.05 * t, 1e-9)))
    return rows


def run_estimation(spec: ExperimentSpec) -> dict:
    out = spec.out_dir
    band = resolve_band(spec)
    if spec.self_test:
        n = spec.n_samples or 10_000
        data = synthetic_campaign(band, n, _rng(spec))
        fitted = est.fit_band(band, **data)
        rows = self_test_rows(band, fitted)
        clusters = est.detect_clusters(bundled_map(), seed=int(spec.seed))
        rows.append(SelfTestRow("bundled map clusters", 4, len(clusters), 0))
        write_csv(out / "self_test.csv", ["parameter", "truth", "fitted", "error", "tolerance", "ok"],
                  [(r.parameter, r.truth, r.fitted, r.error, r.tolerance, r.ok) for r in rows])
        write_text(out / "fitted_card.txt", format_band_card(fitted))
        ok = all(r.ok for r in rows)
        if "txt" in spec.formats:
            lines = [f"estimation self-test, band {band.name}, {n} locations"]
            lines += [f"{'PASS' if r.ok else 'FAIL'} {r.parameter:28s} truth {_fmt(r.truth):>12s} "
                      f"fitted {_fmt(r.fitted):>12s} tol {_fmt(r.tolerance)}" for r in rows]
            write_text(out / "self_test.txt", "\n".join(lines) + "\n")
        return {"ok": ok, "rows": rows, "fitted": fitted}

    if spec.path_loss_csv is None and not spec.map_csvs:
        raise ValueError("estimation needs --path-loss and/or --maps inputs, or --self-test")
    kwargs = {}
    if spec.path_loss_csv is not None:
        samples = est.read_path_loss_csv(spec.path_loss_csv)
        kwargs["path_loss"] = [s for s in samples if s.state != cm.LinkState.OUTAGE]
        kwargs["link_states"] = [(s.distance, s.state) for s in samples]
    cluster_rows = []
    if spec.map_csvs:
        counts, fractions = [], []
        spreads = {k: [] for k in ("bs_az", "bs_el", "ue_az", "ue_el")}
        for i, path in enumerate(spec.map_csvs):
            try:
                cl = est.detect_clusters(est.read_power_map_csv(path), seed=int(spec.seed))
            except est.OutageLocationError:
                continue
            counts.append(len(cl))
            if len(cl) == 2:
                fractions.append(min(c.power_fraction for c in cl))
            for j, c in enumerate(cl):
                # map dimensions: tx_az, tx_el, rx_az, rx_el (BS transmits)
                for key, dim in (("bs_az", 0), ("bs_el", 1), ("ue_az", 2), ("ue_el", 3)):
                    spreads[key].append(c.spread[dim])
                cluster_rows.append((Path(path).name, j, *c.center, *c.spread, c.power_fraction))
        kwargs.update(counts=counts, fractions=fractions if len(fractions) >= 10 else [],
                      spreads=spreads)
        write_csv(out / "clusters.csv",
                  ["map", "cluster", "tx_az_deg", "tx_el_deg", "rx_az_deg", "rx_el_deg",
                   "spread_tx_az_deg", "spread_tx_el_deg", "spread_rx_az_deg",
                   "spread_rx_el_deg", "power_fraction"], cluster_rows)
    fitted = est.fit_band(band, **kwargs)
    write_text(out / "fitted_card.txt", format_band_card(fitted))
    return {"ok": True, "fitted": fitted}
