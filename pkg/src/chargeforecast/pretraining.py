"""Law-generated tuning samples and first-order meta-learning pre-training.

A tuning sample is an observed window in which the chosen zones each get
their own price scaling (1 + r_i) at every step, r_i ~ Normal(0, impulse_std),
and whose targets are shifted by the elasticity law: zone i by
elasticity * r_i * y_i, and each neighbor of i by minus that amount divided
by the neighbor count of i. Responses of different impulses add up.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .training import AdamState, adam_step
from .data import PRICE, FeaturePanel, NormalizationStats, WindowSet, ZoneGraph, build_windows

log = logging.getLogger(__name__)

MIN_RELATIVE_PRICE = 1e-3  # impulses never push a price below this fraction of itself


@dataclass(frozen=True)
class ElasticityLaw:
    label: str
    elasticity: float
    impulse_std: float = 0.1

    def __post_init__(self):
        if self.elasticity >= 0:
            raise ValueError(f"law {self.label!r}: demand elasticity must be negative")
        if self.impulse_std < 0:
            raise ValueError(f"law {self.label!r}: impulse_std must be non-negative")


DEFAULT_LAWS = (
    ElasticityLaw("ev-charging-beijing", -1.48),
    ElasticityLaw("household-electricity", -0.228),
)


@dataclass(frozen=True)
class MetaConfig:
    epochs: int = 200
    meta_lr: float = 0.005        # outer step size
    inner_lr: float = 0.001       # support-set step size
    mix_horizon: float = 1000.0   # gamma(e) = 1 - e / mix_horizon
    batch_size: int | None = None  # None: whole support/query sets every epoch
    max_samples: int | None = None  # cap on base windows per buffer
    zones_per_sample: int | None = None  # impulsed zones per tuning sample, None: all
    outer_optimizer: str = "sgd"   # sgd applies the averaged query gradient as is; adam rescales it

    def __post_init__(self):
        if self.outer_optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown outer optimizer {self.outer_optimizer!r}")
        if self.inner_lr <= 0:
            raise ValueError("inner learning rate must be positive")

    def gamma(self, epoch: int) -> float:
        return mixing_schedule(epoch, self.mix_horizon)


def mixing_schedule(epoch: int, horizon: float = 1000.0) -> float:
    """Share of tuning samples at a given pre-training epoch, clamped to [0, 1]."""
    return min(max(1.0 - epoch / horizon, 0.0), 1.0)


def generate_impulses(count: int, law: ElasticityLaw, rng: np.random.Generator) -> np.ndarray:
    """Relative price impulses r = dp / p, kept above -1 so prices stay positive."""
    r = law.impulse_std * rng.standard_normal(count)
    return np.maximum(r, MIN_RELATIVE_PRICE - 1.0)


def local_response(rel_impulse, y, elasticity: float):
    """Own-zone demand change: elasticity * (dp / p) * y."""
    return elasticity * np.asarray(rel_impulse) * np.asarray(y)


def spillover_response(local_change, neighbor_count: int):
    """Change handed to each neighbor; zero neighbors means no spillover."""
    if neighbor_count <= 0:
        return 0.0 * np.asarray(local_change)
    return -np.asarray(local_change) / neighbor_count


@dataclass
class TuningBuffer:
    """Observed and law-shifted windows for one law (raw, unnormalized units).

    ``local`` and ``change`` keep the unclamped responses so the law can be
    audited exactly; ``tuned_y`` holds the clamped training targets.
    """

    law: ElasticityLaw
    observed: WindowSet
    tuned_x: np.ndarray
    tuned_y: np.ndarray
    impulses: np.ndarray       # (S, N) relative price changes, zero where not impulsed
    local: np.ndarray          # (S, N) own-zone responses
    change: np.ndarray         # (S, N) total unclamped target shift
    support: np.ndarray
    query: np.ndarray
    normalized: dict = field(default_factory=dict, repr=False)

    def __len__(self) -> int:
        return len(self.observed)

    def normalize(self, stats: NormalizationStats) -> None:
        obs = stats.normalize_windows(self.observed)
        tuned = stats.normalize_windows(WindowSet(self.tuned_x, self.tuned_y, self.observed.origins,
                                                  self.observed.horizon))
        self.normalized = {"observed": obs, "tuned": tuned}


def apply_impulses(windows: WindowSet, graph: ZoneGraph, impulses, elasticity: float):
    """Scale prices by (1 + impulses) and propagate the law's responses to targets.

    ``impulses`` is (S, N) relative price changes; zero entries leave a zone
    untouched. Returns (tuned_x, tuned_y, local, change): ``local`` holds each
    impulse's own-zone response and ``change`` the total unclamped target
    shift per zone, local plus spillover received from impulsed neighbors.
    """
    impulses = np.asarray(impulses, dtype=float)
    if impulses.shape != windows.y.shape:
        raise ValueError(f"impulses {impulses.shape} do not match targets {windows.y.shape}")
    tuned_x = windows.x.copy()
    tuned_x[:, :, :, PRICE] *= (1.0 + impulses)[:, :, None]
    local = local_response(impulses, windows.y, elasticity)
    change = local.copy()
    for i in range(graph.num_nodes):
        nbrs = [j for j in graph.neighbors[i] if j != i]
        if nbrs:
            change[:, nbrs] += spillover_response(local[:, i], len(nbrs))[:, None]
    tuned_y = np.clip(windows.y + change, 0.0, 1.0)
    return tuned_x, tuned_y, local, change


def impulse_matrix(count: int, num_nodes: int, law: ElasticityLaw, rng: np.random.Generator,
                   zones_per_sample: int | None = None) -> np.ndarray:
    """(count, num_nodes) relative impulses; ``zones_per_sample`` random zones per row (None: all)."""
    k = num_nodes if zones_per_sample is None else zones_per_sample
    if not 1 <= k <= num_nodes:
        raise ValueError(f"zones_per_sample must lie in [1, {num_nodes}]")
    out = np.zeros((count, num_nodes))
    if k == num_nodes:
        out[:] = generate_impulses(count * num_nodes, law, rng).reshape(count, num_nodes)
        return out
    for row in range(count):
        zones = rng.choice(num_nodes, size=k, replace=False)
        out[row, zones] = generate_impulses(k, law, rng)
    return out


def build_buffers(train: FeaturePanel, graph: ZoneGraph, laws, window: int, horizon: int,
                  rng: np.random.Generator, stats: NormalizationStats | None = None,
                  max_samples: int | None = None,
                  zones_per_sample: int | None = None) -> list[TuningBuffer]:
    """One tuning buffer per law from the raw training segment.

    Every base window becomes one tuning sample per law. The earlier half of
    the windows (by origin) forms the support set and the later half the
    query set.
    """
    laws = list(laws)
    if not laws:
        raise ValueError("at least one law is required")
    base = build_windows(train, window, horizon)
    if len(base) < 2:
        raise ValueError("training segment too short to build tuning buffers")
    if max_samples is not None and len(base) > max_samples:
        keep = np.sort(rng.choice(len(base), size=max_samples, replace=False))
        base = base.subset(keep)
    half = len(base) // 2
    support, query = np.arange(half), np.arange(half, len(base))
    buffers = []
    for law in laws:
        impulses = impulse_matrix(len(base), graph.num_nodes, law, rng, zones_per_sample)
        tx, ty, local, change = apply_impulses(base, graph, impulses, law.elasticity)
        buf = TuningBuffer(law, base, tx, ty, impulses, local, change, support, query)
        if stats is not None:
            buf.normalize(stats)
        buffers.append(buf)
    return buffers


def mix_real_samples(buffer: TuningBuffer, part: np.ndarray, gamma: float,
                     rng: np.random.Generator, limit: int | None = None):
    """Normalized (x, y) for one support or query part with a ``gamma`` share of tuning samples.

    The count of tuning samples is round(gamma * n); the remaining slots use
    the observed version of the same windows.
    """
    if not 0.0 <= gamma <= 1.0:
        raise ValueError("gamma must lie in [0, 1]")
    if not buffer.normalized:
        raise ValueError("buffer has not been normalized")
    part = np.asarray(part)
    if limit is not None and len(part) > limit:
        part = np.sort(rng.choice(part, size=limit, replace=False))
    n = len(part)
    n_tuned = int(round(gamma * n))
    use_tuned = np.zeros(n, dtype=bool)
    use_tuned[rng.choice(n, size=n_tuned, replace=False)] = True
    obs, tuned = buffer.normalized["observed"], buffer.normalized["tuned"]
    x = np.where(use_tuned[:, None, None, None], tuned.x[part], obs.x[part])
    y = np.where(use_tuned[:, None], tuned.y[part], obs.y[part])
    return x, y


GradFn = Callable[[dict, np.ndarray, np.ndarray], tuple[float, dict]]


def meta_gradient(phi: dict, tasks, grad_fn: GradFn, inner_lr: float):
    """Average query gradient at the adapted parameters over ((x_s, y_s), (x_q, y_q)) tasks.

    For every task: adapt phi with one support-set gradient step, then take
    the query-set gradient at the adapted parameters. Second-order terms are
    dropped. Returns (gradient, per-task query losses).
    """
    total = {k: np.zeros_like(v) for k, v in phi.items()}
    losses = []
    for (xs, ys), (xq, yq) in tasks:
        _, g1 = grad_fn(phi, xs, ys)
        theta = {k: phi[k] - inner_lr * g1[k] for k in phi}
        loss, g2 = grad_fn(theta, xq, yq)
        if not math.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in g2.values()):
            raise FloatingPointError("non-finite gradient during meta-learning")
        losses.append(loss)
        for k in total:
            total[k] += g2[k]
    S = len(tasks)
    return {k: total[k] / S for k in total}, losses


def fomaml_step(phi: dict, tasks, grad_fn: GradFn, inner_lr: float, meta_lr: float):
    """One plain outer update phi - meta_lr * meta_gradient; returns (phi', losses)."""
    grad, losses = meta_gradient(phi, tasks, grad_fn, inner_lr)
    return {k: phi[k] - meta_lr * grad[k] for k in phi}, losses


def fomaml_pretrain(phi: dict, buffers, config: MetaConfig, grad_fn: GradFn,
                    rng: np.random.Generator, progress: bool = False):
    """Pre-train ``phi`` on the buffers; returns (phi', per-epoch mean query loss)."""
    if not buffers:
        raise ValueError("no tuning buffers")
    phi = {k: v.copy() for k, v in phi.items()}
    state = AdamState() if config.outer_optimizer == "adam" else None
    history = []
    for epoch in range(config.epochs):
        gamma = config.gamma(epoch)
        tasks = []
        for buf in buffers:
            support = mix_real_samples(buf, buf.support, gamma, rng, config.batch_size)
            query = mix_real_samples(buf, buf.query, gamma, rng, config.batch_size)
            tasks.append((support, query))
        if state is None:
            phi, losses = fomaml_step(phi, tasks, grad_fn, config.inner_lr, config.meta_lr)
        else:
            grad, losses = meta_gradient(phi, tasks, grad_fn, config.inner_lr)
            phi = adam_step(phi, grad, state, config.meta_lr)
        history.append(float(np.mean(losses)))
        if progress:
            log.info("pretrain epoch %d gamma %.3f query loss %.6f", epoch, gamma, history[-1])
    return phi, history
