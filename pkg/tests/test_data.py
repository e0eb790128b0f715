import numpy as np
import pytest
from hypothesis import given, strategies as st

from chargeforecast.data import (DataError, FeaturePanel, NormalizationStats, ZoneGraph, build_windows,
                                 chronological_split, load_graph, load_panel, window_count,
                                 write_dataset)


def write(path, text):
    path.write_text(text, encoding="utf-8")
    return path


def panel_of(T, N=2, seed=0):
    rng = np.random.default_rng(seed)
    occ = rng.uniform(0.1, 0.9, size=(N, T))
    price = rng.uniform(0.8, 1.5, size=(N, T))
    return FeaturePanel(np.stack([occ, price], axis=1))


def test_path_graph_neighbor_sets(tmp_path):
    nodes = write(tmp_path / "nodes.csv", "zone_id\n0\n1\n2\n")
    edges = write(tmp_path / "edges.csv", "src,dst\n0,1\n1,2\n1,0\n")
    g = load_graph(nodes, edges)
    assert g.neighbors == (frozenset({0, 1}), frozenset({0, 1, 2}), frozenset({1, 2}))
    assert g.edges == ((0, 1), (1, 2))  # duplicate (1, 0) dropped


def test_unknown_node_in_edges(tmp_path):
    nodes = write(tmp_path / "nodes.csv", "zone_id\n0\n1\n2\n")
    edges = write(tmp_path / "edges.csv", "src,dst\n0,99\n")
    with pytest.raises(DataError, match="99"):
        load_graph(nodes, edges)


def test_empty_graph(tmp_path):
    nodes = write(tmp_path / "nodes.csv", "zone_id\n")
    edges = write(tmp_path / "edges.csv", "src,dst\n")
    with pytest.raises(DataError):
        load_graph(nodes, edges)


def test_missing_edges_file_names_path(tmp_path):
    nodes = write(tmp_path / "nodes.csv", "zone_id\n0\n")
    with pytest.raises(FileNotFoundError, match="edges.csv"):
        load_graph(nodes, tmp_path / "edges.csv")


def test_paper_scale_graph_accepted():
    # 247 zones and 1006 distinct undirected edges, as in the studied city
    rng = np.random.default_rng(0)
    pairs = set()
    while len(pairs) < 1006:
        a, b = sorted(rng.choice(247, size=2, replace=False))
        pairs.add((int(a), int(b)))
    g = ZoneGraph.from_edges(247, sorted(pairs))
    assert g.num_nodes == 247 and len(g.edges) == 1006


def test_graph_symmetry_and_no_self_loops():
    g = ZoneGraph.from_edges(4, [(0, 0), (0, 1), (2, 3), (3, 2)])
    assert all(a != b for a, b in g.edges)
    for i in range(4):
        for j in g.neighbors[i]:
            assert i in g.neighbors[j]


def test_panel_round_trip(tmp_path):
    g = ZoneGraph.from_edges(2, [(0, 1)])
    panel = panel_of(10)
    paths = write_dataset(tmp_path, g, panel)
    back = load_panel(paths["timeseries"], g)
    assert back.values.shape == (2, 2, 10)
    assert np.array_equal(back.values, panel.values)


def test_thirty_days_is_8640_steps():
    assert 30 * 24 * 60 // 5 == 8640


def _series_file(tmp_path, rows):
    lines = ["timestamp,zone_id,occupancy,price"] + [",".join(map(str, r)) for r in rows]
    return write(tmp_path / "ts.csv", "\n".join(lines) + "\n")


def test_missing_cell_rejected(tmp_path):
    g = ZoneGraph.from_edges(2, [(0, 1)])
    rows = [(t, z, 0.5, 1.0) for t in range(10) for z in range(2) if not (t == 5 and z == 1)]
    with pytest.raises(DataError, match="missing"):
        load_panel(_series_file(tmp_path, rows), g)


def test_non_monotone_timestamps_rejected(tmp_path):
    g = ZoneGraph.from_edges(2, [(0, 1)])
    rows = [(t, z, 0.5, 1.0) for t in range(4) for z in range(2)]
    rows[2], rows[4] = rows[4], rows[2]
    with pytest.raises(DataError, match="monotone"):
        load_panel(_series_file(tmp_path, rows), g)


def test_gap_rejected(tmp_path):
    g = ZoneGraph.from_edges(1, [])
    rows = [(t, 0, 0.5, 1.0) for t in (0, 1, 3)]
    with pytest.raises(DataError, match="gap"):
        load_panel(_series_file(tmp_path, rows), g)


def test_occupancy_out_of_range_rejected(tmp_path):
    g = ZoneGraph.from_edges(1, [])
    rows = [(0, 0, 0.5, 1.0), (1, 0, 1.2, 1.0)]
    with pytest.raises(DataError, match="occupancy"):
        load_panel(_series_file(tmp_path, rows), g)


def test_split_paper_lengths():
    train, val, test = chronological_split(panel_of(8640, N=1))
    assert (train.length, val.length, test.length) == (5184, 1728, 1728)
    assert (train.start, val.start, test.start) == (0, 5184, 6912)


def test_split_small():
    parts = chronological_split(panel_of(10))
    assert [p.length for p in parts] == [6, 2, 2]


def test_split_too_short_for_window():
    with pytest.raises(DataError):
        chronological_split(panel_of(10), min_length=12 + 3)


def test_window_examples():
    assert len(build_windows(panel_of(20), 12, 3)) == 6
    assert len(build_windows(panel_of(15), 12, 3)) == 1


def test_window_contents():
    panel = panel_of(20)
    ws = build_windows(panel, 12, 3)
    k = 2
    t = ws.origins[k]
    assert np.array_equal(ws.x[k], np.transpose(panel.values[:, :, t - 12:t], (0, 2, 1)))
    assert np.array_equal(ws.y[k], panel.occupancy[:, t - 1 + 3])
    sw = ws[k]
    assert sw.x.shape == (2, 2, 12) and sw.origin == t and sw.horizon == 3


@given(length=st.integers(1, 60), w=st.integers(1, 20), horizon=st.integers(1, 15))
def test_window_count_formula(length, w, horizon):
    ws = build_windows(panel_of(length), w, horizon)
    expected = length - w - horizon + 1 if length >= w + horizon else 0
    assert len(ws) == expected == window_count(length, w, horizon)
    if len(ws):
        # every window and its target stay inside the segment
        assert ws.origins.min() - w >= 0
        assert ws.origins.max() - 1 + horizon < length


@given(T=st.integers(60, 400), w=st.integers(1, 6), horizon=st.integers(1, 6))
def test_split_windows_never_cross(T, w, horizon):
    panel = panel_of(T)
    for seg in chronological_split(panel, min_length=w + horizon):
        ws = build_windows(seg, w, horizon)
        targets = ws.origins - 1 + horizon
        assert targets.max() < seg.start + seg.length
        assert (ws.origins - w).min() >= seg.start


def test_normalization_round_trip():
    rng = np.random.default_rng(4)
    occ = 0.4 + 1e-3 * rng.normal(size=(3, 50))
    price = 1.0 + 0.1 * rng.normal(size=(3, 50))
    panel = FeaturePanel(np.stack([occ, price], axis=1))
    stats = NormalizationStats.fit(panel)
    z = stats.normalize(panel)
    assert np.allclose(stats.denormalize(z.occupancy.T).T, occ, atol=1e-12, rtol=0)


def test_stats_come_from_training_split_only():
    panel = panel_of(100, N=3, seed=9)
    train, val, test = chronological_split(panel)
    stats = NormalizationStats.fit(train)
    recomputed_mean = panel.values[:, :, :train.length].mean(axis=2)
    recomputed_std = panel.values[:, :, :train.length].std(axis=2)
    assert np.allclose(stats.mean, recomputed_mean, rtol=0, atol=1e-15)
    assert np.allclose(stats.std, recomputed_std, rtol=0, atol=1e-15)
    z = stats.normalize(test)
    expected = (test.values - recomputed_mean[:, :, None]) / recomputed_std[:, :, None]
    assert np.allclose(z.values, expected, rtol=0, atol=1e-12)
    assert not np.allclose(stats.mean, panel.values.mean(axis=2))


def test_zero_variance_price_rejected():
    panel = panel_of(30)
    panel.values[1, 1, :] = 1.25
    with pytest.raises(DataError, match="price"):
        NormalizationStats.fit(panel)


def test_normalized_windows_match_normalized_panel():
    panel = panel_of(40, N=3, seed=2)
    stats = NormalizationStats.fit(panel)
    a = stats.normalize_windows(build_windows(panel, 5, 2))
    b = build_windows(stats.normalize(panel), 5, 2)
    assert np.allclose(a.x, b.x, atol=1e-14) and np.allclose(a.y, b.y, atol=1e-14)
