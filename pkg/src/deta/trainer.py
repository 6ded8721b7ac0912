"""Two-stage training: source-only pre-training, then adaptation to the target."""

from __future__ import annotations

import logging
import math
import warnings
from collections.abc import Callable
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import autodiff as ad
from .alignment import (
    Perturbations,
    adversarial_round,
    branch_outputs,
    coupled_loss_L1,
    coupled_loss_L2,
)
from .autodiff import Tape, make_optimizer
from .encoder import DualEncoderParams, EncoderConfig, mp_forward, sp_forward
from .graphs import GraphDataset, WSIGraph
from .survival import c_index, kaplan_meier, log_rank, risk_score, surv_nll_tensor

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    k_bins: int = 4
    knn_k: int = 8
    k_sp: int = 3
    hidden: int = 64
    mp_layers: int = 2
    sp_layers: int = 2
    head_hidden: int = 32
    dclf_hidden: int = 32
    optimizer: str = "adam"
    lr_encoder: float = 1e-3
    lr_dclf: float = 1e-3
    lr_delta: float = 1e-2
    zeta: float = 0.8
    epsilon: float = 0.5
    n_d: int = 1
    pretrain_epochs: int = 30
    adapt_epochs: int = 10
    batch_size: int = 32
    seed: int = 0
    lambda_surv: float = 1.0
    lambda_1: float = 1.0
    lambda_2: float = 1.0
    lambda_ap: float = 1.0
    augment_source: bool = True

    def validate(self) -> None:
        for f in fields(self):
            value = getattr(self, f.name)
            if f.name in ("optimizer", "augment_source"):
                continue
            if f.name.startswith("lambda_") or f.name in ("epsilon", "zeta", "seed") or f.name.endswith("_epochs"):
                if value < 0:
                    raise ValueError(f"{f.name} must be non-negative")
            elif value <= 0:
                raise ValueError(f"{f.name} must be positive")
        if not 0 <= self.zeta < 1:
            raise ValueError("zeta must lie in [0, 1)")

    def encoder_config(self, in_dim: int) -> EncoderConfig:
        return EncoderConfig(
            in_dim=in_dim, hidden=self.hidden, mp_layers=self.mp_layers, sp_layers=self.sp_layers,
            k_sp=self.k_sp, k_bins=self.k_bins, head_hidden=self.head_hidden,
            dclf_hidden=self.dclf_hidden,
        )

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainResult:
    params: DualEncoderParams
    trace: dict[str, list[float]] = field(default_factory=dict)
    perturbations: Perturbations | None = None


def _dataset(data, k_sp: int) -> GraphDataset:
    if isinstance(data, GraphDataset):
        if data.k_sp != k_sp:
            raise ValueError(f"dataset prepared with K_sp={data.k_sp}, config wants {k_sp}")
        return data
    return GraphDataset(list(data), k_sp)


def _batches(rng: np.random.Generator, n: int, size: int) -> list[np.ndarray]:
    order = rng.permutation(n)
    return [order[i : i + size] for i in range(0, n, size)]


def survival_loss(hazards: list, time_bins, censors) -> ad.Tensor:
    """Sum of the per-branch survival NLLs, each averaged over the batch."""
    total = None
    for h in hazards:
        term = surv_nll_tensor(h, time_bins, censors, reduction="mean")
        total = term if total is None else ad.add(total, term)
    return total


def pretrain(source_data, config: TrainConfig, params: DualEncoderParams | None = None) -> TrainResult:
    """Fit both branches and their heads to the labelled source graphs."""
    config.validate()
    ds = _dataset(source_data, config.k_sp)
    if not ds.labeled:
        raise ValueError("pre-training needs labelled source graphs")
    rng = np.random.default_rng(config.seed)
    if params is None:
        params = DualEncoderParams.init(config.encoder_config(ds.feature_dim), rng)
    opt = make_optimizer(config.optimizer, params.encoder_params(), config.lr_encoder)
    trace: dict[str, list[float]] = {"surv": []}
    for epoch in range(config.pretrain_epochs):
        losses = []
        for idx in _batches(rng, len(ds), config.batch_size):
            batch = ds.batch(idx)
            opt.zero_grad()
            with Tape() as tape:
                loss = survival_loss(
                    [mp_forward(batch, params).hazard, sp_forward(batch, params).hazard],
                    batch.time_bins, batch.censors,
                )
            tape.backward(loss)
            opt.step()
            losses.append(loss.item())
        trace["surv"].append(float(np.mean(losses)))
        log.info("pretrain epoch %d surv=%.4f", epoch, trace["surv"][-1])
    return TrainResult(params, trace)


def adapt(
    params: DualEncoderParams,
    source_data,
    target_data,
    config: TrainConfig,
    on_epoch: Callable[[int, DualEncoderParams], None] | None = None,
) -> TrainResult:
    """Adaptation stage.

    Each iteration draws a source and a target batch, runs one adversarial
    round, then takes a descent step on the survival loss plus one coupled
    loss: L1 on even iterations, L2 on odd ones.  ``on_epoch`` is called
    with the epoch index and the current parameters after every epoch.
    """
    config.validate()
    src = _dataset(source_data, config.k_sp)
    if not src.labeled:
        raise ValueError("adaptation needs labelled source graphs")
    tgt_graphs = target_data.graphs if isinstance(target_data, GraphDataset) else list(target_data)
    if any(g.labeled for g in tgt_graphs):
        warnings.warn("target labels are ignored during adaptation", stacklevel=2)
        tgt_graphs = [g.unlabeled() for g in tgt_graphs]
    tgt = GraphDataset(tgt_graphs, config.k_sp)
    if tgt.feature_dim != src.feature_dim:
        raise ValueError(f"feature width differs: source {src.feature_dim}, target {tgt.feature_dim}")

    params = params.copy()
    # offset the stream so adaptation does not replay the pre-training shuffles
    rng = np.random.default_rng([config.seed, 1])
    enc_opt = make_optimizer(config.optimizer, params.encoder_params(), config.lr_encoder)
    dclf_opt = make_optimizer(config.optimizer, params.dclf_params(), config.lr_dclf)
    perturb = Perturbations(src.total_nodes, src.feature_dim, config.epsilon)
    delta_opt = make_optimizer(config.optimizer, perturb.params(), config.lr_delta)

    keys = ("surv", "l1", "l2", "l_ap", "coupling_steps_l1", "coupling_steps_l2", "max_delta_norm")
    trace: dict[str, list[float]] = {k: [] for k in keys}
    iteration = 0
    n_iter = math.ceil(max(len(src), len(tgt)) / config.batch_size)
    for epoch in range(config.adapt_epochs):
        sums = {k: [] for k in ("surv", "l1", "l2", "l_ap")}
        steps = [0, 0]
        s_order = rng.permutation(len(src))
        t_order = rng.permutation(len(tgt))
        for i in range(n_iter):
            s_idx = np.take(s_order, range(i * config.batch_size, (i + 1) * config.batch_size), mode="wrap")
            t_idx = np.take(t_order, range(i * config.batch_size, (i + 1) * config.batch_size), mode="wrap")
            s_idx = np.unique(s_idx)[: len(src)]
            t_idx = np.unique(t_idx)[: len(tgt)]
            s_batch, t_batch = src.batch(s_idx), tgt.batch(t_idx)

            if config.lambda_ap > 0:
                stats = adversarial_round(
                    s_batch, t_batch, params, perturb, dclf_opt, enc_opt, delta_opt,
                    n_d=config.n_d, weight=config.lambda_ap,
                )
                sums["l_ap"].append(stats["l_ap"])

            use_l1 = iteration % 2 == 0
            enc_opt.zero_grad()
            with Tape() as tape:
                outputs = branch_outputs(
                    s_batch, t_batch, params, perturb if config.augment_source else None
                )
                l_surv = survival_loss(
                    [outputs["mp", "source"].hazard, outputs["sp", "source"].hazard],
                    s_batch.time_bins, s_batch.censors,
                )
                if use_l1:
                    coupled = coupled_loss_L1(s_batch, t_batch, params, config.zeta, outputs)
                    weight = config.lambda_1
                else:
                    coupled = coupled_loss_L2(s_batch, t_batch, params, config.zeta, outputs)
                    weight = config.lambda_2
                total = ad.add(ad.scale(l_surv, config.lambda_surv), ad.scale(coupled, weight))
            tape.backward(total)
            for p in perturb.params():
                p.grad = None
            enc_opt.step()
            sums["surv"].append(l_surv.item())
            sums["l1" if use_l1 else "l2"].append(coupled.item())
            steps[0 if use_l1 else 1] += 1
            iteration += 1

        for k, v in sums.items():
            trace[k].append(float(np.mean(v)) if v else 0.0)
        trace["coupling_steps_l1"].append(steps[0])
        trace["coupling_steps_l2"].append(steps[1])
        trace["max_delta_norm"].append(perturb.max_row_norm())
        log.info(
            "adapt epoch %d surv=%.4f l1=%.4f l2=%.4f l_ap=%.4f",
            epoch, trace["surv"][-1], trace["l1"][-1], trace["l2"][-1], trace["l_ap"][-1],
        )
        if on_epoch is not None:
            on_epoch(epoch, params)
    return TrainResult(params, trace, perturb)


def predict(params: DualEncoderParams, data, batch_size: int = 128) -> dict[str, np.ndarray]:
    """Fused hazards, risks and per-branch graph embeddings, without gradient tracking."""
    ds = _dataset(data, params.config.k_sp)
    hazards, emb_mp, emb_sp = [], [], []
    for start in range(0, len(ds), batch_size):
        batch = ds.batch(range(start, min(start + batch_size, len(ds))))
        mp = mp_forward(batch, params)
        spo = sp_forward(batch, params)
        avg = 0.5 * (mp.hazard.data + spo.hazard.data)
        hazards.append(avg / avg.sum(axis=1, keepdims=True))
        emb_mp.append(mp.graph_embedding.data)
        emb_sp.append(spo.graph_embedding.data)
    hazard = np.concatenate(hazards)
    return {
        "hazard": hazard,
        "risk": risk_score(hazard),
        "embedding_mp": np.concatenate(emb_mp),
        "embedding_sp": np.concatenate(emb_sp),
    }


@dataclass
class Metrics:
    c_index: float
    logrank_stat: float
    logrank_p: float
    km_low: tuple[np.ndarray, np.ndarray]
    km_high: tuple[np.ndarray, np.ndarray]
    risk: np.ndarray
    hazard: np.ndarray

    def rows(self) -> list[tuple[str, float]]:
        return [
            ("c_index", self.c_index),
            ("logrank_stat", self.logrank_stat),
            ("logrank_p", self.logrank_p),
        ]


def evaluate(params: DualEncoderParams, labeled_data, batch_size: int = 128) -> Metrics:
    """C-index of fused risks plus a median-risk split compared by KM curves and a log-rank test."""
    graphs = labeled_data.graphs if isinstance(labeled_data, GraphDataset) else list(labeled_data)
    if not all(g.labeled for g in graphs):
        raise ValueError("evaluation needs labelled graphs")
    pred = predict(params, labeled_data, batch_size)
    times = np.array([g.time_bin for g in graphs])
    events = np.array([g.censor for g in graphs])
    risk = pred["risk"]
    ci = c_index(risk, times, events)
    high = risk > np.median(risk)
    low = ~high
    if high.any() and low.any() and events.any():
        stat, p = log_rank(times[high], events[high], times[low], events[low])
    else:
        stat, p = float("nan"), float("nan")
    km_low = kaplan_meier(times[low], events[low]) if low.any() else (np.zeros(0), np.zeros(0))
    km_high = kaplan_meier(times[high], events[high]) if high.any() else (np.zeros(0), np.zeros(0))
    return Metrics(ci, stat, p, km_low, km_high, risk, pred["hazard"])


def load_split(graphs: list[WSIGraph], domain: str) -> list[WSIGraph]:
    return [g for g in graphs if g.domain == domain]
