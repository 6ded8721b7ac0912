"""Paired source/target graph-survival datasets with a controllable domain shift.

Every graph has a latent risk class.  Node features are Gaussian around a
class mean placed along a random "signal" direction; target graphs are
translated along an orthogonal "nuisance" direction and get inflated noise.
In the source, the class mean also moves along the nuisance direction
(``source_confound``), so a source-only model can lean on a cue whose
relation to risk breaks in the target.  Event times follow a constant per-class hazard over the time bins.
"""

from __future__ import annotations

import csv
import io
from dataclasses import asdict, dataclass, field

import numpy as np

from .graphs import WSIGraph, knn_graph


@dataclass
class ShiftConfig:
    graphs_per_domain: int = 400
    min_nodes: int = 8
    max_nodes: int = 16
    feature_dim: int = 16
    latent_classes: int = 4
    class_sep: float = 1.0
    node_noise: float = 1.0
    mu_shift: float = 2.0
    sigma_shift: float = 1.25
    shift_jitter: float = 0.0
    source_confound: float = 1.0
    source_prior: list[float] = field(default_factory=lambda: [0.25, 0.25, 0.25, 0.25])
    target_prior: list[float] = field(default_factory=lambda: [0.1, 0.2, 0.3, 0.4])
    class_hazards: list[float] = field(default_factory=lambda: [0.9, 0.5, 0.2, 0.05])
    censor_rate: float = 0.3
    k_bins: int = 4
    knn_k: int = 8
    seed: int = 0

    def validate(self) -> None:
        if self.latent_classes < 1:
            raise ValueError("latent_classes must be at least 1")
        if self.graphs_per_domain < 1:
            raise ValueError("graphs_per_domain must be positive")
        if not 1 <= self.min_nodes <= self.max_nodes:
            raise ValueError("need 1 <= min_nodes <= max_nodes")
        if self.feature_dim < 2:
            raise ValueError("feature_dim must be at least 2")
        if self.k_bins < 2:
            raise ValueError("k_bins must be at least 2")
        if not 0.0 <= self.censor_rate <= 1.0:
            raise ValueError("censor_rate must lie in [0, 1]")
        for name in ("source_prior", "target_prior", "class_hazards"):
            values = np.asarray(getattr(self, name), dtype=np.float64)
            if len(values) != self.latent_classes:
                raise ValueError(f"{name} needs {self.latent_classes} entries, got {len(values)}")
            if np.any(values < 0) or np.any(values > 1):
                raise ValueError(f"{name} entries must lie in [0, 1]")
        for name in ("source_prior", "target_prior"):
            if abs(sum(getattr(self, name)) - 1.0) > 1e-9:
                raise ValueError(f"{name} must sum to 1")
        if self.sigma_shift <= 0 or self.node_noise <= 0:
            raise ValueError("noise scales must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


def _directions(rng: np.random.Generator, d: int) -> tuple[np.ndarray, np.ndarray]:
    u = rng.standard_normal(d)
    u /= np.linalg.norm(u)
    v = rng.standard_normal(d)
    v -= (v @ u) * u
    v /= np.linalg.norm(v)
    return u, v


def _event(rng: np.random.Generator, hazard: float, cfg: ShiftConfig) -> tuple[int, int]:
    k = cfg.k_bins
    # the last bin is open-ended, so late events land in bin k
    t = min(int(rng.geometric(hazard)), k) if hazard > 0 else k
    censor = 1
    if rng.random() < cfg.censor_rate:
        c_time = int(rng.integers(1, k + 1))
        if c_time < t:
            t, censor = c_time, 0
    return t, censor


def _domain(cfg: ShiftConfig, domain: str, seeds, u: np.ndarray, v: np.ndarray) -> list[WSIGraph]:
    target = domain == "target"
    prior = np.asarray(cfg.target_prior if target else cfg.source_prior, dtype=np.float64)
    centre = (cfg.latent_classes - 1) / 2.0
    graphs = []
    for s in seeds:
        rng = np.random.default_rng(s)
        cls = int(rng.choice(cfg.latent_classes, p=prior))
        n = int(rng.integers(cfg.min_nodes, cfg.max_nodes + 1))
        mean = cfg.class_sep * (centre - cls) * u
        noise = cfg.node_noise * rng.standard_normal((n, cfg.feature_dim))
        if not target:
            mean = mean + cfg.source_confound * cfg.class_sep * (centre - cls) * v
        else:
            scale = 1.0 + cfg.shift_jitter * rng.uniform(-1.0, 1.0)
            mean = mean + cfg.mu_shift * scale * v
            noise = noise * cfg.sigma_shift
        x = mean + noise
        edges = knn_graph(x, min(cfg.knn_k, n - 1)) if n > 1 else []
        t, c = _event(rng, cfg.class_hazards[cls], cfg)
        graphs.append(WSIGraph(x, edges, t, c, domain))
    return graphs


def generate_domain_pair(cfg: ShiftConfig) -> tuple[list[WSIGraph], list[WSIGraph]]:
    """Labelled source and target graph lists (target labels are for scoring only).

    Class 0 carries the highest hazard; its mean sits furthest along the
    positive signal direction.
    """
    cfg.validate()
    root = np.random.SeedSequence(cfg.seed)
    dir_seed, src_seed, tgt_seed = root.spawn(3)
    u, v = _directions(np.random.default_rng(dir_seed), cfg.feature_dim)
    n = cfg.graphs_per_domain
    source = _domain(cfg, "source", src_seed.spawn(n), u, v)
    target = _domain(cfg, "target", tgt_seed.spawn(n), u, v)
    return source, target


def dataset_summary(graphs: list[WSIGraph], k_bins: int) -> dict:
    """Per-bin counts (all / events) and per-dimension node-feature mean and variance."""
    if not graphs:
        raise ValueError("summary of an empty dataset")
    if not all(g.labeled for g in graphs):
        raise ValueError("summary needs a labelled dataset")
    bins = np.array([g.time_bin for g in graphs])
    events = np.array([g.censor for g in graphs])
    counts = np.bincount(bins, minlength=k_bins + 1)[1:]
    event_counts = np.bincount(bins[events == 1], minlength=k_bins + 1)[1:]
    nodes = np.concatenate([g.features for g in graphs])
    return {
        "bin_counts": counts,
        "event_counts": event_counts,
        "feature_mean": nodes.mean(axis=0),
        "feature_var": nodes.var(axis=0),
    }


def summary_csv(summary: dict, domain: str) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["domain", "kind", "index", "value"])
    for j, (n, e) in enumerate(zip(summary["bin_counts"], summary["event_counts"]), start=1):
        w.writerow([domain, "bin_count", j, int(n)])
        w.writerow([domain, "event_count", j, int(e)])
    for i, (m, v) in enumerate(zip(summary["feature_mean"], summary["feature_var"])):
        w.writerow([domain, "feature_mean", i, repr(float(m))])
        w.writerow([domain, "feature_var", i, repr(float(v))])
    return buf.getvalue()
