import csv

import numpy as np
import pytest

from chargeforecast.analysis import (ABLATION_HEADER, ImpulseSpec, ablate, average_rmse,
                                     detect_dynamic_zones, impulse_response, opposite_sign_rate,
                                     perturb, price_std, probe_windows, spillover_by_hop,
                                     write_ablation, write_responses)
from chargeforecast.data import FeaturePanel, NormalizationStats, ZoneGraph, build_windows
from chargeforecast.embedding import EmbeddingConfig
from chargeforecast.market import MarketSpec, generate
from chargeforecast.model import ModelConfig, init_params
from chargeforecast.pipeline import prepare
from chargeforecast.pretraining import DEFAULT_LAWS, MetaConfig
from chargeforecast.training import TrainConfig, fit

SMALL = ModelConfig(window=4, embedding=EmbeddingConfig(heads=2))


@pytest.fixture(scope="module")
def world():
    graph, panel, truth = generate(MarketSpec(num_zones=6, days=5, seed=3))
    prepared = prepare(graph, panel, SMALL.window, 2)
    raw = build_windows(prepared.test, SMALL.window, 2)
    return graph, panel, truth, prepared, raw


@pytest.fixture(scope="module")
def trained(world):
    graph, _, _, prepared, _ = world
    params = init_params(SMALL, np.random.default_rng(0))
    result = fit(params, SMALL, graph, prepared.train_windows, prepared.val_windows,
                 TrainConfig(batch_size=64, max_epochs=3, lr=0.01))
    return result.params


def test_spec_validation():
    with pytest.raises(ValueError):
        ImpulseSpec(magnitudes=(0.1, 0.0))
    with pytest.raises(ValueError):
        ImpulseSpec(kind="impulse")
    assert ImpulseSpec().magnitudes == (-0.3, -0.2, -0.1, 0.1, 0.2, 0.3)


def test_zero_magnitude_gives_zero_deltas(world, trained):
    graph, _, _, prepared, raw = world
    spec = ImpulseSpec(kind="std", magnitudes=(0.0,), zones=[0, 3])
    recs = impulse_response(trained, SMALL, graph, raw, prepared.stats, spec,
                            std=price_std(prepared.train))
    assert all(r.local == 0 and all(v == 0 for v in r.hops.values()) for r in recs)


def test_constant_model_gives_zero_deltas(world):
    graph, _, _, prepared, raw = world
    params = init_params(SMALL, np.random.default_rng(1))
    params["out_Wp"] = np.zeros_like(params["out_Wp"])
    recs = impulse_response(params, SMALL, graph, raw, prepared.stats, ImpulseSpec(zones=[1]))
    assert all(r.local == 0 and all(v == 0 for v in r.hops.values()) for r in recs)


def test_probing_does_not_mutate(world, trained):
    graph, panel, _, prepared, raw = world
    before_x, before_panel = raw.x.copy(), panel.values.copy()
    impulse_response(trained, SMALL, graph, raw, prepared.stats, ImpulseSpec(zones=[2]))
    assert np.array_equal(raw.x, before_x) and np.array_equal(panel.values, before_panel)


def test_records_are_prediction_differences(world, trained):
    graph, _, _, prepared, raw = world
    from chargeforecast.model import predict_array
    stats = prepared.stats
    rec = impulse_response(trained, SMALL, graph, raw, stats,
                           ImpulseSpec(magnitudes=(0.2,), zones=[4]))[0]

    def forecast(x):
        xn = (x - stats.mean[None, :, None, :]) / stats.std[None, :, None, :]
        return stats.denormalize(predict_array(trained, xn, graph, SMALL))

    x = raw.x.copy()
    x[:, 4, :, 1] *= 1.2
    delta = forecast(x) - forecast(raw.x)
    assert rec.local == pytest.approx(delta[:, 4].mean(), abs=1e-15)
    hop1 = graph.hop_distances(4) == 1
    assert rec.hops[1] == pytest.approx(delta[:, hop1].mean(), abs=1e-15)
    assert rec.price_change == pytest.approx(0.2)


def test_small_impulse_linearity(world, trained):
    graph, _, _, prepared, raw = world
    spec = ImpulseSpec(magnitudes=(0.01, 0.02), zones="all")
    recs = impulse_response(trained, SMALL, graph, raw, prepared.stats, spec)
    by = {(r.zone, r.magnitude): r.local for r in recs}
    for z in range(graph.num_nodes):
        one, two = by[(z, 0.01)], by[(z, 0.02)]
        assert two == pytest.approx(2 * one, rel=0.25)


def test_std_impulses_shift_by_std(world):
    _, _, _, prepared, raw = world
    std = price_std(prepared.train)
    x = perturb(raw, 2, -1.0, "std", std)
    assert np.allclose(x[:, 2, :, 1], raw.x[:, 2, :, 1] - std[2])
    with pytest.raises(ValueError):
        perturb(raw, 2, -1.5, "percentile")


def test_detect_dynamic_zones():
    _, panel, truth = generate(MarketSpec(num_zones=8, days=2, seed=4))
    assert detect_dynamic_zones(panel) == list(truth.dynamic_zones)
    _, fixed, _ = generate(MarketSpec(num_zones=8, days=2, pricing="fixed"))
    assert detect_dynamic_zones(fixed) == []


def test_single_node_graph_has_no_hops():
    g = ZoneGraph.from_edges(1, [])
    rng = np.random.default_rng(0)
    vals = np.stack([rng.uniform(0.2, 0.8, (1, 40)), rng.uniform(1, 2, (1, 40))], axis=1)
    panel = FeaturePanel(vals)
    stats = NormalizationStats.fit(panel)
    params = init_params(SMALL, rng)
    recs = impulse_response(params, SMALL, g, build_windows(panel, 4, 1), stats, ImpulseSpec())
    summary = spillover_by_hop(recs)
    assert all(set(v) == {0} for v in summary.values())


def test_summary_and_sign_rate():
    from chargeforecast.analysis import ResponseRecord
    recs = [ResponseRecord(0, 0.2, -0.01, {1: 0.004, 2: 0.001}, -0.1, 0.2, {1: 0.01, 2: 0.0}),
            ResponseRecord(1, 0.2, 0.02, {1: 0.002}, 0.1, 0.2, {1: 0.01}),
            ResponseRecord(0, -0.2, 0.03, {1: -0.004}, 0.1, -0.2, {1: 0.01})]
    assert opposite_sign_rate(recs, 0.2) == 0.5
    assert opposite_sign_rate(recs, -0.2) == 1.0
    s = spillover_by_hop(recs)
    assert s[0.2] == {0: pytest.approx(0.005), 1: pytest.approx(0.003), 2: pytest.approx(0.001)}
    assert s[-0.2] == {0: 0.03, 1: -0.004}
    assert recs[0].elasticity == pytest.approx(-0.5)


def test_write_responses(tmp_path, world, trained):
    graph, _, _, prepared, raw = world
    recs = impulse_response(trained, SMALL, graph, raw, prepared.stats,
                            ImpulseSpec(magnitudes=(0.1,), zones=[0]))
    write_responses(tmp_path / "r.csv", recs)
    rows = list(csv.reader((tmp_path / "r.csv").open()))
    assert rows[0] == ["zone", "hop", "magnitude", "delta", "relative", "elasticity"]
    assert [r[1] for r in rows[1:]] == ["0"] + [str(h) for h in sorted(recs[0].hops)]


def test_probe_windows_even_spacing(world):
    raw = world[4]
    sub = probe_windows(raw, 10)
    assert len(sub) == 10 and sub.origins[0] == raw.origins[0] and sub.origins[-1] == raw.origins[-1]
    assert probe_windows(raw, None) is raw


def test_ablation_table_shape(tmp_path, world):
    graph, panel, _, _, _ = world
    train = TrainConfig(batch_size=128, max_epochs=1, patience=1, window=SMALL.window)
    meta = MetaConfig(epochs=1, batch_size=8)
    rows = ablate(graph, panel, (3, 6, 9, 12), SMALL, train, meta, DEFAULT_LAWS)
    assert len(rows) == 16
    assert {(r.horizon, r.variant) for r in rows} == {(h, v) for h in (3, 6, 9, 12)
                                                     for v in ("full", "no_pretrain", "no_gat", "no_tpa")}
    cells = [getattr(r, m) for r in rows for m in ("rmse", "mape", "rae", "mae")]
    assert len(cells) == 64 and all(np.isfinite(cells))
    assert set(average_rmse(rows)) == {"full", "no_pretrain", "no_gat", "no_tpa"}
    write_ablation(tmp_path / "a.csv", rows)
    out = list(csv.reader((tmp_path / "a.csv").open()))
    assert out[0] == ABLATION_HEADER and len(out) == 17


def test_ablation_variants_share_initial_draw(world):
    from chargeforecast.pipeline import initial_params
    a = initial_params(SMALL.variant("full"), 2023)
    b = initial_params(SMALL.variant("no_gat"), 2023)
    assert all(np.array_equal(a[k], b[k]) for k in a)
