"""Acceptance suite: one PASS/FAIL line per criterion.

Lines are printed as each criterion runs and repeated in the pytest
terminal summary. ``MMWSIM_ACCEPT_DROPS`` overrides the number of network
drops (default 20).
"""

import math
import os
import time

import numpy as np
import pytest
from scipy import stats

from mmwsim import channel_model as cm
from mmwsim import estimation as est
from mmwsim import experiments as ex
from mmwsim import mimo, netsim
from mmwsim.channel_model import LinkOverrides, LinkState
from mmwsim.cli import build_parser, main

LINES: list[str] = []
B28 = cm.PRESETS["28ghz-nyc"]
B73 = cm.PRESETS["73ghz-nyc"]
DROPS = int(os.environ.get("MMWSIM_ACCEPT_DROPS", "20"))
SEED = 2014


class Checks:
    def __init__(self, number, title):
        self.number, self.title, self.items = number, title, []

    def add(self, name, ok, detail=""):
        self.items.append((name, bool(ok), detail))

    def finish(self):
        ok = all(i[1] for i in self.items)
        parts = "; ".join(f"{n} {d} {'ok' if o else 'FAILED'}".replace("  ", " ")
                          for n, o, d in self.items)
        line = f"[{'PASS' if ok else 'FAIL'}] criterion {self.number} ({self.title}): {parts}"
        LINES.append(line)
        print(line)
        bad = [n for n, o, _ in self.items if not o]
        assert not bad, f"criterion {self.number} failed: {bad}"


def _state_oracle(d, a_out=0.0334, b_out=5.2, a_los=0.0149):
    p_out = max(0.0, 1.0 - math.exp(-a_out * d + b_out))
    p_los = (1.0 - p_out) * math.exp(-a_los * d)
    return p_out, p_los, 1.0 - p_out - p_los


def test_criterion_1_link_state():
    c = Checks(1, "link-state model")
    worst = 0.0
    for d in (50.0, 100.0, 155.7, 200.0, 400.0):
        got = cm.link_state_probabilities(d, B28)
        worst = max(worst, max(abs(a - b) for a, b in zip(got, _state_oracle(d))))
    c.add("max |p - oracle|", worst <= 1e-12, f"{worst:.1e} (<= 1e-12)")
    onset = cm.outage_onset_distance(B28)
    c.add("outage onset", abs(onset - 155.7) <= 0.1, f"{onset:.3f} m (155.7 +- 0.1)")
    c.finish()


def test_criterion_2_path_loss():
    c = Checks(2, "path-loss golden numbers")
    for name, got, want in (
            ("28 GHz NLOS 100 m", cm.median_path_loss(100.0, LinkState.NLOS, B28), 130.4),
            ("28 GHz LOS 1 m", cm.median_path_loss(1.0, LinkState.LOS, B28), 61.4),
            ("73 GHz LOS 1 m", cm.median_path_loss(1.0, LinkState.LOS, B73), 69.8)):
        c.add(name, abs(got - want) <= 0.05, f"{got:.3f} dB ({want})")
    gap = cm.median_path_loss(100.0, LinkState.NLOS, B28) - cm.umi_path_loss(100.0, 2.5)
    c.add("UMi gap", 20.0 <= gap <= 25.0, f"{gap:.2f} dB (20-25)")
    c.finish()


def test_criterion_3_distribution_fits():
    c = Checks(3, "distribution goodness of fit")
    t0 = time.perf_counter()
    rng = np.random.default_rng(SEED)
    n = 100_000
    k = np.array([cm.sample_num_clusters(B28, rng) for _ in range(n)])
    obs = np.bincount(k, minlength=9)[1:9].astype(float)
    obs[-1] += np.sum(k > 8)
    exp = cm.num_clusters_pmf(np.arange(1, 9), 1.8) * n
    exp[-1] = n - exp[:-1].sum()
    p = stats.chisquare(obs, exp).pvalue
    c.add("K chi-square", p > 0.01, f"p={p:.3f}")
    for kk, want in ((1, 0.4628), (2, 0.2678)):
        pmf = cm.num_clusters_pmf(kk, 1.8)
        emp = np.mean(k == kk)
        band = 3 * math.sqrt(pmf * (1 - pmf) / n)
        c.add(f"P(K={kk})", abs(pmf - want) < 5e-5 and abs(emp - pmf) <= band,
              f"model {pmf:.4f} emp {emp:.4f} (+-{band:.4f})")
    geo = cm.sample_cluster_geometry(n, LinkState.NLOS, 0.05, B28, rng)
    for key, mean in (("spread_aod_az", 10.2), ("spread_aoa_az", 15.5), ("spread_aoa_el", 6.0)):
        p = stats.kstest(np.degrees(geo[key]), "expon", args=(0, mean)).pvalue
        c.add(f"{key} KS", p > 0.01, f"p={p:.3f}")
    c.add("BS elevation spread", np.all(geo["spread_aod_el"] == 0), "all zero")
    weak = np.array([cm.sample_cluster_power_fractions(2, B28, rng).min() for _ in range(n)])
    p = stats.kstest(weak, lambda x: est.weak_fraction_cdf(np.clip(x, 1e-12, 0.5), 2.8, 4.0)).pvalue
    c.add("K=2 weak fraction KS", p > 0.01, f"p={p:.3f}")
    dt = time.perf_counter() - t0
    c.add("runtime", dt < 10.0, f"{dt:.1f} s (< 10 s)")
    c.finish()


def _separated_map(rng, k):
    while True:
        tx, rx = rng.uniform(0, 360, k), rng.uniform(0, 360, k)
        gap = lambda a: np.abs((a[:, None] - a[None, :] + 180) % 360 - 180)
        if k == 1 or (np.maximum(gap(tx), gap(rx)) + np.eye(k) * 999).min() >= 60:
            break
    centers = np.round(np.column_stack([tx, np.zeros(k), rx, np.zeros(k)]) / 10) * 10
    powers = rng.uniform(0.2, 1.0, k) * 1e-6
    return centers, est.synthesize_power_map(centers, [(8.0, 0, 12.0, 0)] * k, powers)


def test_criterion_4_estimation_round_trip():
    c = Checks(4, "estimation round trips")
    t0 = time.perf_counter()
    data = ex.synthetic_campaign(B28, 10_000, np.random.default_rng(SEED))
    fit = est.fit_band(B28, **data)
    for p in ("nlos", "los"):
        for f, tol in (("alpha", 2.0), ("beta", 0.15), ("sigma", 1.0)):
            t, g = getattr(B28, f"{p}_{f}"), getattr(fit, f"{p}_{f}")
            c.add(f"{p}_{f}", abs(g - t) <= tol, f"{g:.3f} ({t} +- {tol})")
    for f in ("a_out", "b_out", "a_los"):
        t, g = getattr(B28, f), getattr(fit, f)
        c.add(f, abs(g / t - 1) <= 0.10, f"{g:.4g} ({t} +- 10%)")
    c.add("r_tau", abs(fit.r_tau - 2.8) <= 0.3, f"{fit.r_tau:.3f} (2.8 +- 0.3)")
    c.add("zeta", abs(fit.zeta - 4.0) <= 0.5, f"{fit.zeta:.3f} (4.0 +- 0.5)")
    rng = np.random.default_rng(SEED)
    maps = [(None, ex.bundled_map())] + [_separated_map(rng, k) for k in (1, 2, 3, 4, 2, 3)]
    truth = [np.array([cl[0] for cl in ex.FOUR_CLUSTERS])] + [m[0] for m in maps[1:]]
    ok_k = ok_c = True
    for (_, pmap), want in zip(maps, truth):
        got = est.detect_clusters(pmap)
        ok_k &= len(got) == len(want)
        if len(got) == len(want):
            for w in want:
                d = min(np.max(np.abs((np.array(g.center) - w + 180) % 360 - 180)) for g in got)
                ok_c &= d <= 10.0
    c.add("cluster K", ok_k, f"{len(maps)} maps")
    c.add("cluster centres within 10 deg", ok_c)
    dt = time.perf_counter() - t0
    c.add("runtime", dt < 120.0, f"{dt:.0f} s (< 120 s)")
    c.finish()


def test_criterion_5_beamforming_invariants():
    c = Checks(5, "beamforming invariants")
    rng = np.random.default_rng(SEED)
    ue, bs = mimo.ArrayGeometry(4, 4), mimo.ArrayGeometry(8, 8)
    bound = 10 * math.log10(16 * 64)
    worst = -np.inf
    for _ in range(10_000):
        d = rng.uniform(30, 200)
        link = cm.sample_link(d, cm.los_elevation(d), B28, rng, LinkOverrides(state=LinkState.NLOS))
        h = mimo.channel_matrix(mimo.synthesize_subpaths(link, 20, rng), ue, bs, rng=rng)
        worst = max(worst, mimo.bf_gain_instantaneous(h) - bound)
    c.add("instantaneous gain - bound", worst <= 1e-9, f"max {worst:.2e} dB (<= 1e-9)")
    err = 0.0
    for _ in range(100):
        a = mimo.array_response(ue, rng.uniform(0, 2 * np.pi), rng.uniform(-0.3, 0.3))
        b = mimo.array_response(bs, rng.uniform(0, 2 * np.pi), rng.uniform(-0.3, 0.3))
        g = rng.standard_normal() + 1j * rng.standard_normal()
        err = max(err, abs(mimo.bf_gain_instantaneous(g * np.outer(a, b.conj())) - bound))
    c.add("rank-one attains bound", err <= 1e-6, f"max |err| {err:.1e} dB")
    worst_cov = 0.0
    for _ in range(3):
        link = cm.sample_link(80.0, cm.los_elevation(80.0), B28, rng,
                              LinkOverrides(state=LinkState.NLOS))
        sub = mimo.synthesize_subpaths(link, 20, rng)
        cov = mimo.covariances(sub, ue, bs)
        acc_rx = np.zeros((16, 16), complex)
        acc_tx = np.zeros((64, 64), complex)
        for _ in range(10_000):
            h = mimo.channel_matrix(sub, ue, bs, rng=rng).H
            acc_rx += h @ h.conj().T
            acc_tx += h.conj().T @ h
        for mc, q in ((acc_rx / 1e4, cov.q_rx), (acc_tx / 1e4, cov.q_tx)):
            worst_cov = max(worst_cov, np.linalg.norm(mc - q) / np.linalg.norm(q))
    c.add("covariance vs Monte Carlo", worst_cov <= 0.03, f"max rel. Frobenius {worst_cov:.4f} (<= 0.03)")
    c.finish()


def test_criterion_6_beamforming_statistics():
    c = Checks(6, "long-term beamforming statistics")
    t0 = time.perf_counter()
    s = ex.bf_samples(B28, 10_000, np.random.default_rng(SEED), mimo.ArrayGeometry(4, 4),
                      mimo.ArrayGeometry(8, 8, boresight_elevation=-math.radians(10.0)),
                      instantaneous=False)
    dt = time.perf_counter() - t0
    med = lambda x: float(np.median(x))
    tot = med(s["serv_total"])
    c.add("median total gain", 25.0 <= tot <= 29.0, f"{tot:.2f} dB [25, 29]")
    gap_rx = med(s["serv_rx"]) - med(s["intf_rx"])
    gap_tx = med(s["serv_tx"]) - med(s["intf_tx"])
    c.add("RX gap", abs(gap_rx - 6.0) <= 2.0, f"{gap_rx:.2f} dB (6 +- 2)")
    c.add("TX gap", abs(gap_tx - 9.0) <= 2.0, f"{gap_tx:.2f} dB (9 +- 2)")
    for r, (lo, hi) in enumerate(((0.4, 0.6), (0.7, 0.9), (0.9, 1.0)), start=1):
        m = med(s["phi"][:, r - 1])
        c.add(f"phi({r})", lo <= m <= hi, f"{m:.3f} [{lo}, {hi}]")
    c.add("runtime", dt < 60.0, f"{dt:.0f} s (< 60 s)")
    c.finish()


# every row of the rate table, so the runtime check covers the full command
NET_CONFIGS = tuple(ex.TABLE3_CONFIGS)


@pytest.fixture(scope="module")
def net(tmp_path_factory):
    spec = ex.ExperimentSpec("netsim", SEED, tmp_path_factory.mktemp("net"), n_drops=DROPS)
    t0 = time.perf_counter()
    reps = ex.table3_reports(spec, NET_CONFIGS)
    return reps, time.perf_counter() - t0


def test_criterion_7_rate_table(net):
    reps, dt = net
    c = Checks(7, f"rate table at {DROPS} drops")
    within = lambda got, want, tol: abs(got / want - 1) <= tol
    s = reps["28 GHz 4x4"].summary()
    for key, want in (("dl_spectral_efficiency_bps_hz", 3.03), ("ul_spectral_efficiency_bps_hz", 2.94),
                      ("dl_cell_throughput_mbps", 1514), ("ul_cell_throughput_mbps", 1468)):
        c.add(f"28 GHz 4x4 {key}", within(s[key], want, 0.15), f"{s[key]:.3g} ({want} +- 15%)")
    s73 = reps["73 GHz 8x8"].summary()
    for key, want in (("dl_spectral_efficiency_bps_hz", 2.93), ("ul_spectral_efficiency_bps_hz", 2.88)):
        c.add(f"73 GHz 8x8 {key}", within(s73[key], want, 0.15), f"{s73[key]:.3g} ({want} +- 15%)")
    s50 = reps["28 GHz 4x4, d_shift=50 m"].summary()
    ch = abs(s50["dl_cell_throughput_mbps"] / s["dl_cell_throughput_mbps"] - 1)
    c.add("d_shift 50 DL throughput change", ch < 0.10, f"{100 * ch:.1f}% (< 10%)")
    s75 = reps["28 GHz 4x4, d_shift=75 m"].summary()
    c.add("d_shift 75 edge rates", s75["dl_edge_rate_mbps"] < 1 and s75["ul_edge_rate_mbps"] < 1,
          f"{s75['dl_edge_rate_mbps']:.2f}/{s75['ul_edge_rate_mbps']:.2f} Mbps (< 1)")
    snl = reps["28 GHz 4x4, no LOS, d_shift=50 m"].summary()
    c.add("no-LOS DL SE", within(snl["dl_spectral_efficiency_bps_hz"], 2.16, 0.15),
          f"{snl['dl_spectral_efficiency_bps_hz']:.3f} (2.16 +- 15%)")
    full = dt * 20 / DROPS
    c.add("runtime", full < 600.0, f"{dt:.0f} s for {len(NET_CONFIGS)} rows at {DROPS} drops (< 600 s at 20)")
    opts = build_parser()._subparsers._group_actions[0].choices["netsim"]._option_string_actions
    c.add("scaling knobs", "--drops" in opts and "--area" in opts, "--drops/--area")
    table = ex.format_table3(reps)
    lte = "2.69/2.36" in table and "53.8/47.2" in table and "1.80/1.94" in table
    c.add("LTE row constants", lte)
    c.finish()


def test_criterion_8_sinr_properties(net):
    reps, _ = net
    c = Checks(8, "SINR and interference")
    s = reps["28 GHz 4x4"].summary()
    f0 = s["dl_sinr_below_0db_fraction"]
    c.add("DL SINR < 0 dB fraction", 0.03 <= f0 <= 0.12, f"{f0:.3f} [0.03, 0.12]")
    nd = s["noise_dominated_fraction"]
    c.add("noise-dominated fraction", nd >= 0.8, f"{nd:.3f} (>= 0.8, target 0.9)")
    a, b = reps["28 GHz 4x4"], reps["73 GHz 8x8"]
    worst = 0.0
    for name in ("dl_rate", "ul_rate"):
        qa = np.percentile(getattr(a, name), np.arange(10, 100, 10))
        qb = np.percentile(getattr(b, name), np.arange(10, 100, 10))
        worst = max(worst, float(np.max(np.abs(qb / qa - 1))))
    c.add("28 GHz 4x4 vs 73 GHz 8x8 decile gaps", worst < 0.15, f"max {100 * worst:.1f}% (< 15%)")
    c.finish()


def test_criterion_9_determinism(tmp_path):
    c = Checks(9, "determinism")

    def tree(d):
        return {p.name: p.read_bytes() for p in sorted(d.iterdir()) if p.suffix == ".csv"}

    runs = {
        "netsim": ["netsim", "--seed", "77", "--drops", "3", "--area", "800"],
        "channel-stats": ["channel-stats", "--seed", "77", "--samples", "20000"],
        "bf-analysis": ["bf-analysis", "--seed", "77", "--samples", "300"],
    }
    for name, args in runs.items():
        outs = []
        for i, workers in enumerate((1, 2, 1)):
            extra = ["--workers", str(workers)] if name == "netsim" else []
            d = tmp_path / f"{name}{i}"
            assert main(args + extra + ["--out", str(d)]) == 0
            outs.append(tree(d))
        c.add(name, outs[0] == outs[1] == outs[2] and outs[0], f"{len(outs[0])} CSV files identical")
    c.finish()
