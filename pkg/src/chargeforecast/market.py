"""Synthetic charging markets with a known price elasticity.

Latent demand follows a two-peak daily profile per zone. Dynamic-pricing
zones raise their price while latent demand sits above a quantile of its own
history, so observed occupancy and price move together even though the
true elasticity is negative. Occupancy is

    o_i = clip(d_i + local_i + sum_{j ~ i} -(share / deg_j) * local_j + noise, 0, 1)
    local_i = elasticity * dev_i * d_i,    dev_i = p_i / base_price_i - 1

With share = 1 the spillover matches the neighbor-sharing rule used for the
tuning samples; share = 0.5 gives a deliberately misspecified world.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import FeaturePanel, ZoneGraph, write_dataset

STEPS_PER_DAY = 288  # 5-minute resolution
BIAS_THRESHOLD = 0.2  # minimum occupancy/price correlation a peak-reactive world should show

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class MarketSpec:
    num_zones: int = 20
    days: int = 14
    topology: str = "geometric"      # geometric | grid | ring
    mean_degree: float = 4.0
    elasticity: float = -1.0
    pricing: str = "peak-reactive"   # peak-reactive | fixed
    dynamic_fraction: float = 0.5
    peak_quantile: float = 0.6
    peak_markup: float = 0.3
    price_lead: int = 6
    tariff_jitter: float = 0.03
    spillover_share: float = 1.0
    noise_std: float = 0.01
    seed: int = 2023

    def __post_init__(self):
        if self.num_zones < 1 or self.days < 1:
            raise ValueError("need at least one zone and one day")
        if self.topology not in ("geometric", "grid", "ring"):
            raise ValueError(f"unknown topology {self.topology!r}")
        if self.pricing not in ("peak-reactive", "fixed"):
            raise ValueError(f"unknown pricing policy {self.pricing!r}")
        if not 0.0 <= self.dynamic_fraction <= 1.0:
            raise ValueError("dynamic_fraction must lie in [0, 1]")


@dataclass
class GroundTruth:
    """Everything needed to re-run the occupancy equation counterfactually."""

    spec: MarketSpec
    graph: ZoneGraph
    latent_demand: np.ndarray     # N x T
    base_price: np.ndarray        # N
    price: np.ndarray             # N x T
    noise: np.ndarray             # N x T
    dynamic_zones: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))
    bias: float = 0.0             # mean occupancy/price correlation over dynamic zones

    @property
    def price_deviation(self) -> np.ndarray:
        return self.price / self.base_price[:, None] - 1.0

    def occupancy(self, price: np.ndarray | None = None, clamp: bool = True) -> np.ndarray:
        price = self.price if price is None else price
        dev = price / self.base_price[:, None] - 1.0
        local = self.spec.elasticity * dev * self.latent_demand
        occ = self.latent_demand + local + spillover_matrix(self.graph, self.spec.spillover_share) @ local
        occ = occ + self.noise
        return np.clip(occ, 0.0, 1.0) if clamp else occ

    def write_truth(self, path) -> None:
        dev = self.price_deviation
        with Path(path).open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["timestamp", "zone_id", "latent_demand", "price_deviation"])
            N, T = self.latent_demand.shape
            for t in range(T):
                for i in range(N):
                    w.writerow([t, i, repr(float(self.latent_demand[i, t])), repr(float(dev[i, t]))])


def spillover_matrix(graph: ZoneGraph, share: float = 1.0) -> np.ndarray:
    """S[i, j] = -share / deg(j) for neighbors i of j, so S @ local spreads each zone's change."""
    N = graph.num_nodes
    S = np.zeros((N, N))
    for a, b in graph.edges:
        S[b, a] = -share / graph.degree(a)
        S[a, b] = -share / graph.degree(b)
    return S


def make_graph(spec: MarketSpec, rng: np.random.Generator) -> ZoneGraph:
    N = spec.num_zones
    if N == 1:
        return ZoneGraph.from_edges(1, [])
    if spec.topology == "ring":
        edges = [(i, (i + 1) % N) for i in range(N)]
        if spec.mean_degree >= 4 and N > 4:
            edges += [(i, (i + 2) % N) for i in range(N)]
        return ZoneGraph.from_edges(N, edges)
    if spec.topology == "grid":
        cols = int(np.ceil(np.sqrt(N)))
        edges = []
        for i in range(N):
            r, c = divmod(i, cols)
            if c + 1 < cols and i + 1 < N:
                edges.append((i, i + 1))
            if i + cols < N:
                edges.append((i, i + cols))
        return ZoneGraph.from_edges(N, edges)
    pts = rng.uniform(size=(N, 2))
    dist = np.linalg.norm(pts[:, None] - pts[None], axis=-1)
    iu = np.triu_indices(N, 1)
    order = np.argsort(dist[iu], kind="stable")
    n_edges = max(int(round(N * spec.mean_degree / 2)), N - 1)
    chosen = [(int(iu[0][k]), int(iu[1][k])) for k in order[:n_edges]]
    # join components through their closest pair of points
    comp = _components(N, chosen)
    while comp.max() > 0:
        inside = comp == 0
        sub = np.where(inside[:, None] & ~inside[None, :], dist, np.inf)
        a, b = np.unravel_index(np.argmin(sub), sub.shape)
        chosen.append((int(a), int(b)))
        comp = _components(N, chosen)
    return ZoneGraph.from_edges(N, chosen)


def _components(n, edges) -> np.ndarray:
    parent = list(range(n))

    def find(u):
        while parent[u] != u:
            parent[u] = parent[parent[u]]
            u = parent[u]
        return u

    for a, b in edges:
        parent[find(a)] = find(b)
    roots = {}
    return np.array([roots.setdefault(find(i), len(roots)) for i in range(n)])


def daily_profile(steps: int, morning: float, evening: float, ratio: float) -> np.ndarray:
    """Two-peak demand shape in [0, 1] for one day (peak hours given in hours)."""
    hours = np.arange(steps) * 24.0 / steps

    def bump(center, width):
        d = (hours - center + 12.0) % 24.0 - 12.0
        return np.exp(-0.5 * (d / width) ** 2)

    shape = ratio * bump(morning, 1.8) + (1.0 - ratio) * bump(evening, 2.2)
    return shape / shape.max()


def generate(spec: MarketSpec) -> tuple[ZoneGraph, FeaturePanel, GroundTruth]:
    rng = np.random.default_rng(spec.seed)
    graph = make_graph(spec, rng)
    N, T = spec.num_zones, spec.days * STEPS_PER_DAY

    base = rng.uniform(0.15, 0.3, size=N)
    amp = rng.uniform(0.35, 0.55, size=N)
    profiles = np.stack([
        daily_profile(STEPS_PER_DAY, rng.uniform(8, 10), rng.uniform(18, 20), rng.uniform(0.35, 0.65))
        for _ in range(N)
    ])
    day_scale = 1.0 + 0.08 * rng.standard_normal((N, spec.days))
    periodic = np.tile(profiles, (1, spec.days)) * np.repeat(day_scale, STEPS_PER_DAY, axis=1)
    # slow AR(1) wobble, roughly a two-hour memory
    phi = np.exp(-1.0 / 24.0)
    shocks = 0.02 * rng.standard_normal((N, T))
    wobble = np.zeros((N, T))
    for t in range(1, T):
        wobble[:, t] = phi * wobble[:, t - 1] + shocks[:, t]
    latent = np.clip(base[:, None] + amp[:, None] * periodic + wobble, 0.02, 0.95)

    base_price = rng.uniform(1.0, 1.6, size=N)
    daily_jitter = 1.0 + spec.tariff_jitter * rng.standard_normal((N, spec.days))
    price = base_price[:, None] * np.repeat(daily_jitter, STEPS_PER_DAY, axis=1)
    dynamic = np.zeros(0, dtype=int)
    if spec.pricing == "peak-reactive":
        n_dyn = int(round(spec.dynamic_fraction * N))
        dynamic = np.sort(rng.choice(N, size=n_dyn, replace=False))
        for i in dynamic:
            # the operator prices on its own demand forecast, price_lead steps ahead
            ahead = np.roll(latent[i], -spec.price_lead)
            ahead[T - spec.price_lead:] = latent[i, T - spec.price_lead:]
            threshold = np.quantile(latent[i], spec.peak_quantile)
            price[i] = base_price[i] * (1.0 + spec.peak_markup * (ahead > threshold))
            price[i] *= np.repeat(daily_jitter[i], STEPS_PER_DAY)

    noise = spec.noise_std * rng.standard_normal((N, T))
    truth = GroundTruth(spec, graph, latent, base_price, price, noise, dynamic)
    occ = truth.occupancy()
    panel = FeaturePanel(np.stack([occ, price], axis=1))
    panel.validate()
    if len(dynamic):
        truth.bias = price_occupancy_correlation(panel, dynamic)
        if truth.bias <= BIAS_THRESHOLD:
            log.warning("dynamic zones show occupancy/price correlation %.3f, at or below %.1f",
                        truth.bias, BIAS_THRESHOLD)
    return graph, panel, truth


def probe_truth(truth: GroundTruth, zone: int, delta_price: float, t: int | None = None,
                clamp: bool = False) -> np.ndarray:
    """Exact occupancy change of every zone when ``zone``'s price moves by ``delta_price``.

    Evaluated at step ``t`` (all steps when None). With ``clamp`` off the
    linear response before clipping to [0, 1] is returned.
    """
    if not 0 <= zone < truth.graph.num_nodes:
        raise ValueError(f"zone {zone} not in graph")
    price = truth.price.copy()
    price[zone] += delta_price
    base = truth.occupancy(clamp=clamp)
    moved = truth.occupancy(price, clamp=clamp)
    diff = moved - base
    return diff if t is None else diff[:, t]


def price_occupancy_correlation(panel: FeaturePanel, zones=None) -> float:
    """Mean per-zone Pearson correlation between occupancy and price."""
    zones = range(panel.num_nodes) if zones is None else zones
    cors = []
    for i in zones:
        o, p = panel.occupancy[i], panel.price[i]
        if o.std() > 0 and p.std() > 0:
            cors.append(np.corrcoef(o, p)[0, 1])
    return float(np.mean(cors)) if cors else 0.0


def write_market(directory, graph: ZoneGraph, panel: FeaturePanel, truth: GroundTruth) -> dict:
    paths = write_dataset(directory, graph, panel)
    paths["truth"] = Path(directory) / "truth.csv"
    truth.write_truth(paths["truth"])
    return paths
