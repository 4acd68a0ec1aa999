import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import stats

from mmwsim import channel_model as cm
from mmwsim import mimo, netsim
from mmwsim.channel_model import LinkState
from mmwsim.netsim import Deployment, NetworkConfig

SMALL = NetworkConfig(area=800.0)


def test_default_lattice():
    sites = netsim.hex_sites(2000.0, 200.0)
    # 12 rows alternating 11 and 10 sites
    assert len(sites) == 126
    assert abs(len(sites) - 130) / 130 < 0.05
    dep = netsim.drop_network(NetworkConfig(), np.random.default_rng(0))
    assert (dep.n_sites, dep.n_cells, dep.n_ues) == (126, 378, 3780)
    assert dep.interior_site.sum() == 39


def test_lattice_geometry():
    sites = netsim.hex_sites(200.0, 200.0)
    assert len(sites) == 3
    d = np.linalg.norm(sites[:, None] - sites[None], axis=2)
    assert np.allclose(d[np.triu_indices(3, 1)], 200.0)
    with pytest.raises(ValueError):
        netsim.hex_sites(150.0, 200.0)


def test_ue_density_is_uniform():
    dep = netsim.drop_network(NetworkConfig(), np.random.default_rng(3))
    h, _, _ = np.histogram2d(dep.ues[:, 0], dep.ues[:, 1], bins=10, range=[[0, 2000], [0, 2000]])
    assert stats.chisquare(h.ravel()).pvalue > 0.01


def test_config_validation():
    with pytest.raises(ValueError):
        NetworkConfig(ues_per_cell=-1)
    with pytest.raises(ValueError):
        NetworkConfig(overhead=1.5)


def test_forced_outage_serves_nobody():
    r = netsim.simulate_drop(SMALL, 0, 11, forced_state=LinkState.OUTAGE)
    assert not r.served.any()
    assert np.all(r.dl_rate == 0) and np.all(r.ul_rate == 0)
    assert np.all(np.isneginf(r.dl_sinr_db))


def _one_ue_deployment(d=50.0):
    return Deployment(sites=np.array([[0.0, 0.0]]), cell_site=np.zeros(3, int),
                      cell_azimuth=np.array(netsim.SECTOR_AZIMUTHS),
                      ues=np.array([[d, 0.0]]), ue_orientation=np.array([0.3]),
                      interior_site=np.array([True]))


def test_single_link_gain_composition():
    cfg = NetworkConfig(band=cm.PRESETS["28ghz-nyc"].replace(los_sigma=0.0), area=200.0)
    dep = _one_ue_deployment()
    tbl = netsim.realize_links(dep, cfg, np.random.default_rng(8), forced_state=LinkState.LOS)
    again = netsim.realize_links(dep, cfg, np.random.default_rng(8), forced_state=LinkState.LOS)
    assert tbl.gain[0] == again.gain[0]
    assert tbl.serving_cell[0] == 0
    d3 = math.hypot(50.0, cfg.bs_height - cfg.ue_height)
    omni = 10 ** (-0.1 * (61.4 + 20 * math.log10(d3)))
    # independent beamforming gains from the stored subpaths
    ue = mimo.ArrayGeometry(4, 4)
    bs = mimo.ArrayGeometry(8, 8, boresight_azimuth=0.0, boresight_elevation=-math.radians(10))
    u_rx = mimo.array_response(ue, tbl.aoa_az, tbl.aoa_el)
    u_tx = mimo.array_response(bs, tbl.aod_az, tbl.aod_el)
    q_rx = (u_rx.T * tbl.sub_power) @ u_rx.conj()
    q_tx = (u_tx.T * tbl.sub_power) @ u_tx.conj()
    g_rx = np.linalg.eigvalsh(q_rx)[-1] / (np.trace(q_rx).real / 16)
    g_tx = np.linalg.eigvalsh(q_tx)[-1] / (np.trace(q_tx).real / 64)
    assert tbl.sub_power.sum() == pytest.approx(omni, rel=1e-12)
    assert tbl.gain[0] == pytest.approx(omni * g_rx * g_tx, rel=1e-9)


def test_pruned_association_equals_exhaustive():
    dep = netsim.drop_network(SMALL, np.random.default_rng(1))
    a = netsim.realize_links(dep, SMALL, np.random.default_rng(2))
    b = netsim.realize_links(dep, SMALL.replace(prune_association=False), np.random.default_rng(2))
    assert np.array_equal(a.serving_cell, b.serving_cell)
    assert np.allclose(a.gain, b.gain, rtol=1e-12)
    assert a.n_candidates_evaluated < b.n_candidates_evaluated


def test_per_cell_links_mode_runs():
    r = netsim.simulate_drop(SMALL.replace(shared_site_links=False), 0, 5)
    assert r.served.mean() > 0.9


def test_snr_formula_and_interference_free_sinr():
    dep = netsim.drop_network(SMALL, np.random.default_rng(1))
    tbl = netsim.realize_links(dep, SMALL, np.random.default_rng(2))
    dl, ul, dl_snr, ul_snr, dl_i, dl_n = netsim.compute_sinr(dep, tbl, SMALL, np.random.default_rng(3))
    s = tbl.served
    noise_dbm = -174 + 7 + 10 * math.log10(1e9)
    expect = 30 + 10 * np.log10(tbl.gain[s]) - noise_dbm
    assert np.allclose(dl_snr[s], expect, atol=1e-9)
    assert np.all(dl[s] <= dl_snr[s] + 1e-9) and np.all(ul[s] <= ul_snr[s] + 1e-9)
    dl0, ul0, *_ = netsim.compute_sinr(dep, tbl, SMALL, np.random.default_rng(3), interference=False)
    assert np.allclose(dl0[s], dl_snr[s]) and np.allclose(ul0[s], ul_snr[s])


def test_sinr_to_rate_examples():
    assert netsim.sinr_to_rate(3.0) == pytest.approx(1.0)
    assert netsim.sinr_to_rate(30.0) == 4.8
    assert netsim.sinr_to_rate(-np.inf) == 0.0
    peak = 0.8 * 0.5 * 1e9 * netsim.sinr_to_rate(np.inf)
    assert peak == pytest.approx(1.92e9)


@given(a=st.floats(-50, 60), b=st.floats(-50, 60))
def test_sinr_to_rate_monotone_and_capped(a, b):
    lo, hi = sorted((a, b))
    ra, rb = netsim.sinr_to_rate(lo), netsim.sinr_to_rate(hi)
    assert 0.0 <= ra <= rb <= 4.8


def test_cell_throughput_is_sum_of_rates():
    r = netsim.simulate_drop(SMALL, 0, 21)
    s = r.served
    assert np.allclose(np.bincount(r.serving_cell[s], weights=r.dl_rate[s], minlength=len(r.cell_dl_throughput)),
                       r.cell_dl_throughput)
    assert np.array_equal(np.bincount(r.serving_cell[s], minlength=len(r.cell_n_served)), r.cell_n_served)


def test_d_shift_puts_close_ues_in_outage():
    r = netsim.simulate_drop(NetworkConfig(area=1000.0, d_shift=75.0), 0, 4)
    close = r.nearest_site_distance < 100.0
    assert np.mean(~r.served[close]) > 0.0


def test_drops_are_independent_of_worker_count():
    a = netsim.run_drops(SMALL, 2, 9, workers=1)
    b = netsim.run_drops(SMALL, 2, 9, workers=2)
    for x, y in zip(a, b):
        assert np.array_equal(x.dl_sinr_db, y.dl_sinr_db) and np.array_equal(x.ul_rate, y.ul_rate)


def test_report_aggregates():
    res = netsim.run_drops(SMALL, 2, 9)
    rep = netsim.schedule_and_report(res, SMALL)
    cells = np.concatenate([r.cell_dl_throughput[r.cell_interior] for r in res])
    assert rep.dl_spectral_efficiency == pytest.approx(cells.mean() / (0.5 * 1e9))
    s = rep.summary()
    assert 0 <= s["served_fraction"] <= 1 and s["drops"] == 2
    with pytest.raises(ValueError):
        netsim.schedule_and_report([], SMALL)
