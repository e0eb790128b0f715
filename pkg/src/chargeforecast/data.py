"""Zone graphs, feature panels, sliding windows and normalization."""

from __future__ import annotations

import csv
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

OCCUPANCY, PRICE = 0, 1
FEATURES = ("occupancy", "price")


class DataError(ValueError):
    """Invalid or inconsistent input data."""


@dataclass(frozen=True)
class ZoneGraph:
    """Undirected zone adjacency. Neighbor sets include the zone itself."""

    num_nodes: int
    edges: tuple[tuple[int, int], ...]
    neighbors: tuple[frozenset, ...] = field(repr=False)

    @classmethod
    def from_edges(cls, num_nodes: int, edges) -> "ZoneGraph":
        if num_nodes <= 0:
            raise DataError("graph has no nodes")
        pairs = set()
        for a, b in edges:
            a, b = int(a), int(b)
            for v in (a, b):
                if not 0 <= v < num_nodes:
                    raise DataError(f"edge references unknown node {v}")
            if a == b:
                continue
            pairs.add((min(a, b), max(a, b)))
        nbrs = [{i} for i in range(num_nodes)]
        for a, b in pairs:
            nbrs[a].add(b)
            nbrs[b].add(a)
        return cls(num_nodes, tuple(sorted(pairs)), tuple(frozenset(s) for s in nbrs))

    @property
    def symmetric_edges(self) -> list[tuple[int, int]]:
        return [(a, b) for a, b in self.edges] + [(b, a) for a, b in self.edges]

    def adjacency_mask(self) -> np.ndarray:
        """Boolean N x N mask with self loops; row i marks the attention set of i."""
        mask = np.eye(self.num_nodes, dtype=bool)
        for a, b in self.edges:
            mask[a, b] = mask[b, a] = True
        return mask

    def degree(self, i: int) -> int:
        """Number of neighbors of ``i``, excluding itself."""
        return len(self.neighbors[i]) - 1

    def hop_distances(self, source: int) -> np.ndarray:
        """BFS hop counts from ``source``; unreachable nodes get -1."""
        dist = np.full(self.num_nodes, -1, dtype=int)
        dist[source] = 0
        queue = deque([source])
        while queue:
            u = queue.popleft()
            for v in self.neighbors[u]:
                if dist[v] < 0:
                    dist[v] = dist[u] + 1
                    queue.append(v)
        return dist

    def hop_distance(self, i: int, j: int) -> int:
        return int(self.hop_distances(i)[j])

    def permuted(self, perm) -> "ZoneGraph":
        """Relabel node ``perm[k]`` as node ``k``."""
        inv = np.argsort(perm)
        return ZoneGraph.from_edges(self.num_nodes, [(inv[a], inv[b]) for a, b in self.edges])


@dataclass(frozen=True)
class FeaturePanel:
    """Dense N x F x T tensor; feature 0 is occupancy, feature 1 is price."""

    values: np.ndarray
    start: int = 0

    def __post_init__(self):
        if self.values.ndim != 3 or self.values.shape[1] != len(FEATURES):
            raise DataError(f"panel must be N x {len(FEATURES)} x T, got {self.values.shape}")

    @property
    def num_nodes(self) -> int:
        return self.values.shape[0]

    @property
    def length(self) -> int:
        return self.values.shape[2]

    @property
    def occupancy(self) -> np.ndarray:
        return self.values[:, OCCUPANCY, :]

    @property
    def price(self) -> np.ndarray:
        return self.values[:, PRICE, :]

    def segment(self, lo: int, hi: int) -> "FeaturePanel":
        return FeaturePanel(self.values[:, :, lo:hi], start=self.start + lo)

    def validate(self) -> None:
        occ, price = self.occupancy, self.price
        if not np.all(np.isfinite(self.values)):
            raise DataError("panel contains non-finite values")
        if occ.min() < 0 or occ.max() > 1:
            raise DataError("occupancy outside [0, 1]")
        if price.min() <= 0:
            raise DataError("non-positive price")


def read_nodes(path) -> list[int]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"nodes file not found: {path}")
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or "zone_id" not in reader.fieldnames:
            raise DataError(f"{path}: expected header 'zone_id'")
        return [int(row["zone_id"]) for row in reader]


def load_graph(nodes_file, edges_file) -> ZoneGraph:
    ids = read_nodes(nodes_file)
    if not ids:
        raise DataError("empty graph")
    if sorted(ids) != list(range(len(ids))):
        raise DataError("zone_id values must be contiguous integers 0..N-1")
    edges_file = Path(edges_file)
    if not edges_file.exists():
        raise FileNotFoundError(f"edges file not found: {edges_file}")
    with edges_file.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"src", "dst"} <= set(reader.fieldnames):
            raise DataError(f"{edges_file}: expected header 'src,dst'")
        edges = [(int(r["src"]), int(r["dst"])) for r in reader]
    return ZoneGraph.from_edges(len(ids), edges)


def load_panel(timeseries_file, graph: ZoneGraph) -> FeaturePanel:
    path = Path(timeseries_file)
    if not path.exists():
        raise FileNotFoundError(f"timeseries file not found: {path}")
    rows = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    with path.open(encoding="utf-8") as fh:
        header = fh.readline().strip().split(",")
    if header != ["timestamp", "zone_id", "occupancy", "price"]:
        raise DataError(f"{path}: expected header 'timestamp,zone_id,occupancy,price'")
    if rows.size == 0:
        raise DataError(f"{path}: no rows")
    ts = rows[:, 0].astype(int)
    zone = rows[:, 1].astype(int)
    if zone.min() < 0 or zone.max() >= graph.num_nodes:
        raise DataError("timeseries references a zone outside the graph")
    times = np.unique(ts)
    if np.any(np.diff(times) != 1):
        raise DataError("timestamps are not a gap-free increasing sequence")
    # timestamps must be non-decreasing in file order
    if np.any(np.diff(ts) < 0):
        raise DataError("timestamps are not monotone")
    N, T = graph.num_nodes, len(times)
    values = np.full((N, 2, T), np.nan)
    seen = np.zeros((N, T), dtype=int)
    col = ts - times[0]
    np.add.at(seen, (zone, col), 1)
    if np.any(seen > 1):
        t, z = np.argwhere(seen.T > 1)[0]
        raise DataError(f"duplicate cell at t={times[t]}, zone {z}")
    if np.any(seen == 0):
        z, t = np.argwhere(seen == 0)[0]
        raise DataError(f"missing cell at t={times[t]}, zone {z}")
    values[zone, OCCUPANCY, col] = rows[:, 2]
    values[zone, PRICE, col] = rows[:, 3]
    panel = FeaturePanel(values, start=int(times[0]))
    panel.validate()
    return panel


def write_dataset(directory, graph: ZoneGraph, panel: FeaturePanel) -> dict[str, Path]:
    """Write nodes.csv, edges.csv and timeseries.csv into ``directory``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = {k: directory / f"{k}.csv" for k in ("nodes", "edges", "timeseries")}
    with paths["nodes"].open("w", newline="", encoding="utf-8") as fh:
        fh.write("zone_id\n")
        fh.writelines(f"{i}\n" for i in range(graph.num_nodes))
    with paths["edges"].open("w", newline="", encoding="utf-8") as fh:
        fh.write("src,dst\n")
        fh.writelines(f"{a},{b}\n" for a, b in graph.edges)
    N, _, T = panel.values.shape
    with paths["timeseries"].open("w", newline="", encoding="utf-8") as fh:
        fh.write("timestamp,zone_id,occupancy,price\n")
        occ, price = panel.values[:, 0, :].tolist(), panel.values[:, 1, :].tolist()
        for t in range(T):
            for i in range(N):
                fh.write(f"{panel.start + t},{i},{occ[i][t]!r},{price[i][t]!r}\n")
    return paths


def chronological_split(panel: FeaturePanel, ratios=(6, 2, 2), min_length: int = 1):
    """Contiguous train/validation/test segments in time order.

    Segment lengths are floor(T * r / sum(r)) with the remainder going to the
    training segment. Each segment must hold at least ``min_length`` steps
    (pass w + horizon to guarantee one window).
    """
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or min(ratios) <= 0:
        raise ValueError("ratios must be three positive numbers")
    T = panel.length
    total = sum(ratios)
    val_len = int(T * ratios[1] // total)
    test_len = int(T * ratios[2] // total)
    train_len = T - val_len - test_len
    bounds = [0, train_len, train_len + val_len, T]
    parts = []
    for name, lo, hi in zip(("train", "validation", "test"), bounds[:-1], bounds[1:]):
        if hi - lo < min_length:
            raise DataError(f"{name} segment has {hi - lo} steps, need at least {min_length}")
        parts.append(panel.segment(lo, hi))
    return tuple(parts)


@dataclass(frozen=True)
class SampleWindow:
    x: np.ndarray        # N x F x w
    y: np.ndarray        # N occupancy values at origin + horizon
    origin: int
    horizon: int


@dataclass
class WindowSet:
    """A stack of sample windows, laid out (S, N, w, F) for batching."""

    x: np.ndarray
    y: np.ndarray
    origins: np.ndarray
    horizon: int

    def __len__(self) -> int:
        return len(self.y)

    def __getitem__(self, k: int) -> SampleWindow:
        return SampleWindow(np.transpose(self.x[k], (0, 2, 1)), self.y[k],
                            int(self.origins[k]), self.horizon)

    def subset(self, idx) -> "WindowSet":
        idx = np.asarray(idx)
        return WindowSet(self.x[idx], self.y[idx], self.origins[idx], self.horizon)

    @property
    def window(self) -> int:
        return self.x.shape[2]


def window_count(length: int, w: int, horizon: int) -> int:
    return max(length - w - horizon + 1, 0)


def build_windows(panel: FeaturePanel, w: int, horizon: int) -> WindowSet:
    """All windows x[t-w .. t-1] with target occupancy at t + horizon - 1.

    Origin t is the first step after the input slice, so a window at origin t
    reads steps t-w..t-1 and the target index is t - 1 + horizon, keeping
    every index inside the segment.
    """
    if w < 1 or horizon < 1:
        raise ValueError("window and horizon must be at least 1")
    n = window_count(panel.length, w, horizon)
    vals = panel.values
    if n == 0:
        N = panel.num_nodes
        return WindowSet(np.zeros((0, N, w, 2)), np.zeros((0, N)), np.zeros(0, dtype=int), horizon)
    view = np.lib.stride_tricks.sliding_window_view(vals, w, axis=2)[:, :, :n, :]
    x = np.ascontiguousarray(np.transpose(view, (2, 0, 3, 1)))
    targets = np.arange(n) + w - 1 + horizon
    y = np.ascontiguousarray(vals[:, OCCUPANCY, targets].T)
    origins = panel.start + np.arange(n) + w
    return WindowSet(x, y, origins, horizon)


@dataclass(frozen=True)
class NormalizationStats:
    mean: np.ndarray  # N x F
    std: np.ndarray   # N x F

    @classmethod
    def fit(cls, panel: FeaturePanel, min_std: float = 1e-12) -> "NormalizationStats":
        mean = panel.values.mean(axis=2)
        std = panel.values.std(axis=2)
        bad = np.argwhere(std <= min_std)
        if len(bad):
            node, feat = bad[0]
            raise DataError(f"zero variance in {FEATURES[feat]} of zone {node}")
        return cls(mean, std)

    def normalize(self, panel: FeaturePanel) -> FeaturePanel:
        vals = (panel.values - self.mean[:, :, None]) / self.std[:, :, None]
        return FeaturePanel(vals, start=panel.start)

    def normalize_windows(self, ws: WindowSet) -> WindowSet:
        x = (ws.x - self.mean[None, :, None, :]) / self.std[None, :, None, :]
        y = (ws.y - self.mean[None, :, OCCUPANCY]) / self.std[None, :, OCCUPANCY]
        return WindowSet(x, y, ws.origins, ws.horizon)

    def denormalize(self, occupancy: np.ndarray) -> np.ndarray:
        """Map normalized occupancy (..., N) back to the [0, 1] scale."""
        return occupancy * self.std[:, OCCUPANCY] + self.mean[:, OCCUPANCY]
