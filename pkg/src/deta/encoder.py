"""Dual-branch graph encoder: message-passing (MP) and shortest-path (SP) branches.

Each branch owns its own hazard head, so the model exposes two category
distributions per graph.  A shared domain classifier scores (embedding,
distribution) pairs for the adversarial alignment stage.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .graphs import GraphBatch, GraphDataset, WSIGraph


@dataclass(frozen=True)
class EncoderConfig:
    in_dim: int
    hidden: int = 64
    mp_layers: int = 2
    sp_layers: int = 2
    k_sp: int = 3
    k_bins: int = 4
    head_hidden: int = 32
    dclf_hidden: int = 32

    def __post_init__(self):
        for name in ("in_dim", "hidden", "mp_layers", "sp_layers", "k_sp", "k_bins"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.k_bins < 2:
            raise ValueError("k_bins must be at least 2")
        if self.sp_layers and (self.in_dim % 2 or self.hidden % 2):
            raise ValueError("SP position encodings need even in_dim and hidden widths")


class DualEncoderParams:
    """Named parameter tensors for both branches, both heads and the domain classifier.

    Names are prefixed ``mp.``, ``sp.``, ``head_mp.``, ``head_sp.`` and ``dclf.``.
    """

    GROUPS = ("mp", "sp", "head_mp", "head_sp", "dclf")

    def __init__(self, config: EncoderConfig, tensors: dict[str, Tensor]):
        self.config = config
        self.tensors = tensors

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def group(self, *prefixes: str) -> list[Tensor]:
        return [t for n, t in self.tensors.items() if n.split(".")[0] in prefixes]

    def encoder_params(self) -> list[Tensor]:
        return self.group("mp", "sp", "head_mp", "head_sp")

    def dclf_params(self) -> list[Tensor]:
        return self.group("dclf")

    @classmethod
    def init(cls, config: EncoderConfig, rng: np.random.Generator) -> "DualEncoderParams":
        """Weights uniform in +-1/sqrt(fan_in); biases zero."""
        shapes: list[tuple[str, tuple[int, ...]]] = []
        width = config.in_dim
        for t in range(config.mp_layers):
            shapes.append((f"mp.W{t}", (width, config.hidden)))
            width = config.hidden
        width = config.in_dim
        for t in range(config.sp_layers):
            shapes.append((f"sp.C{t}", (width, config.hidden)))
            shapes.append((f"sp.A{t}", (width, config.hidden)))
            width = config.hidden
        for head in ("head_mp", "head_sp"):
            shapes += [
                (f"{head}.W0", (config.hidden, config.head_hidden)),
                (f"{head}.b0", (config.head_hidden,)),
                (f"{head}.W1", (config.head_hidden, config.k_bins)),
                (f"{head}.b1", (config.k_bins,)),
            ]
        shapes += [
            ("dclf.W0", (config.hidden + config.k_bins, config.dclf_hidden)),
            ("dclf.b0", (config.dclf_hidden,)),
            ("dclf.W1", (config.dclf_hidden, 1)),
            ("dclf.b1", (1,)),
        ]
        tensors = {}
        for name, shape in shapes:
            if len(shape) == 1:
                data = np.zeros(shape)
            else:
                bound = 1.0 / np.sqrt(shape[0])
                data = rng.uniform(-bound, bound, size=shape)
            tensors[name] = Tensor(data, requires_grad=True, name=name)
        return cls(config, tensors)

    def copy(self) -> "DualEncoderParams":
        return DualEncoderParams(
            self.config,
            {n: Tensor(t.data.copy(), requires_grad=True, name=n) for n, t in self.tensors.items()},
        )

    def to_dict(self) -> dict:
        return {
            "config": asdict(self.config),
            "params": {
                n: {"shape": list(t.shape), "data": t.data.reshape(-1).tolist()}
                for n, t in self.tensors.items()
            },
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "DualEncoderParams":
        config = EncoderConfig(**payload["config"])
        expected = cls.init(config, np.random.default_rng(0))
        tensors = {}
        for name, ref in expected.tensors.items():
            if name not in payload["params"]:
                raise ValueError(f"checkpoint is missing parameter {name}")
            entry = payload["params"][name]
            shape = tuple(entry["shape"])
            if shape != ref.shape:
                raise ValueError(f"parameter {name}: checkpoint shape {shape} vs config {ref.shape}")
            data = np.asarray(entry["data"], dtype=np.float64).reshape(shape)
            tensors[name] = Tensor(data, requires_grad=True, name=name)
        return cls(config, tensors)


def save_checkpoint(path: str | Path, params: DualEncoderParams, meta: dict | None = None) -> None:
    payload = params.to_dict()
    if meta:
        payload["meta"] = meta
    Path(path).write_text(json.dumps(payload, sort_keys=True) + "\n", encoding="utf-8")


def load_checkpoint(path: str | Path) -> DualEncoderParams:
    payload = json.loads(Path(path).read_text(encoding="utf-8"))
    return DualEncoderParams.from_dict(payload)


@dataclass
class BranchOutput:
    node_embeddings: Tensor
    graph_embedding: Tensor
    hazard: Tensor

    @property
    def category_dist(self) -> Tensor:
        return self.hazard


def _as_batch(graph, k_sp: int) -> GraphBatch:
    if isinstance(graph, GraphBatch):
        return graph
    if isinstance(graph, WSIGraph):
        return GraphDataset([graph], k_sp).batch()
    raise TypeError(f"expected WSIGraph or GraphBatch, got {type(graph).__name__}")


def _inputs(batch: GraphBatch, config: EncoderConfig, perturbation) -> Tensor:
    if batch.features.shape[1] != config.in_dim:
        raise ValueError(
            f"feature width {batch.features.shape[1]} does not match encoder in_dim {config.in_dim}"
        )
    x = Tensor(batch.features)
    if perturbation is None:
        return x
    if perturbation.shape != batch.features.shape:
        raise ValueError(
            f"perturbation shape {perturbation.shape} vs features {batch.features.shape}"
        )
    return ad.add(x, perturbation)


def position_encoding(k: int, d: int) -> np.ndarray:
    """Sinusoidal code for path length ``k``: sin on even slots, cos on odd slots."""
    if d % 2:
        raise ValueError(f"position encoding width must be even, got {d}")
    i = np.arange(d // 2)
    angle = k / np.power(10000.0, 2 * i / d)
    out = np.empty(d)
    out[0::2] = np.sin(angle)
    out[1::2] = np.cos(angle)
    return out


def readout(node_embeddings: Tensor) -> Tensor:
    """Mean over nodes (rows)."""
    if node_embeddings.shape[0] == 0:
        raise ValueError("readout of a graph with no nodes")
    return ad.mean(node_embeddings, axis=0)


def hazard_head(z: Tensor, params: DualEncoderParams, head: str) -> Tensor:
    h = ad.relu(ad.add(ad.matmul(z, params[f"{head}.W0"]), params[f"{head}.b0"]))
    logits = ad.add(ad.matmul(h, params[f"{head}.W1"]), params[f"{head}.b1"])
    return ad.softmax(logits)


def mp_forward(graph, params: DualEncoderParams, perturbation: Tensor | None = None) -> BranchOutput:
    """GCN stack ``H <- ReLU(Â H W)`` followed by mean readout and the MP hazard head."""
    cfg = params.config
    batch = _as_batch(graph, cfg.k_sp)
    h = _inputs(batch, cfg, perturbation)
    for t in range(cfg.mp_layers):
        h = ad.relu(ad.matmul(ad.spmm(batch.adj, h), params[f"mp.W{t}"]))
    z = ad.spmm(batch.pool, h)
    return BranchOutput(h, z, hazard_head(z, params, "head_mp"))


def sp_forward(graph, params: DualEncoderParams, perturbation: Tensor | None = None, sp_sets=None) -> BranchOutput:
    """Shortest-path branch.

    Per layer, node u receives ``sum_k sum_{v in N_k(u)} ReLU(m_v + TE(k))``
    which is mapped by the aggregate weight and added to u's own
    representation mapped by the combine weight, then rectified.
    """
    cfg = params.config
    if sp_sets is not None:
        if not isinstance(graph, WSIGraph):
            raise TypeError("sp_sets can only accompany a single WSIGraph")
        if sp_sets.num_nodes != graph.num_nodes or sp_sets.k_sp != cfg.k_sp:
            raise ValueError(
                f"sp_sets cover {sp_sets.num_nodes} nodes / K_sp={sp_sets.k_sp}, "
                f"graph has {graph.num_nodes} nodes / K_sp={cfg.k_sp}"
            )
    batch = _as_batch(graph, cfg.k_sp)
    m = _inputs(batch, cfg, perturbation)
    for t in range(cfg.sp_layers):
        width = m.shape[1]
        agg = None
        for k, op in enumerate(batch.sp_ops, start=1):
            if op.nnz == 0:
                continue
            msg = ad.relu(ad.add(m, Tensor(position_encoding(k, width))))
            part = ad.spmm(op, msg)
            agg = part if agg is None else ad.add(agg, part)
        out = ad.matmul(m, params[f"sp.C{t}"])
        if agg is not None:
            out = ad.add(out, ad.matmul(agg, params[f"sp.A{t}"]))
        m = ad.relu(out)
    z = ad.spmm(batch.pool, m)
    return BranchOutput(m, z, hazard_head(z, params, "head_sp"))


def domain_classifier(graph_embedding: Tensor, category_dist: Tensor, params: DualEncoderParams) -> Tensor:
    """Probability that each (embedding, distribution) row comes from the source domain."""
    cfg = params.config
    z, p = graph_embedding, category_dist
    if z.shape[-1] != cfg.hidden or p.shape[-1] != cfg.k_bins:
        raise ValueError(
            f"domain classifier expects widths ({cfg.hidden}, {cfg.k_bins}), "
            f"got ({z.shape[-1]}, {p.shape[-1]})"
        )
    if z.data.ndim != 2 or p.data.ndim != 2 or z.shape[0] != p.shape[0]:
        raise ValueError(f"domain classifier: shape mismatch {z.shape} vs {p.shape}")
    x = ad.concat([z, p], axis=1)
    h = ad.relu(ad.add(ad.matmul(x, params["dclf.W0"]), params["dclf.b0"]))
    return ad.sigmoid(ad.add(ad.matmul(h, params["dclf.W1"]), params["dclf.b1"]))


def fused_predict(graph, params: DualEncoderParams) -> np.ndarray:
    """Average of the two branch hazard vectors, renormalised; one row per graph."""
    a = mp_forward(graph, params).hazard.data
    b = sp_forward(graph, params).hazard.data
    avg = 0.5 * (a + b)
    return avg / avg.sum(axis=-1, keepdims=True)
