"""Category-level (coupled pseudo-label) and feature-level (adversarial
perturbation) alignment between a labelled source and an unlabelled target."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Optimizer, Tape, Tensor
from .encoder import BranchOutput, DualEncoderParams, domain_classifier, mp_forward, sp_forward
from .graphs import GraphBatch
from .survival import PROB_FLOOR

BRANCHES = ("mp", "sp")


@dataclass
class PseudoLabelBatch:
    kept_indices: np.ndarray
    labels: np.ndarray  # 1-based bins
    source_confidences: np.ndarray

    def __len__(self) -> int:
        return len(self.kept_indices)


def filter_pseudo_labels(target_dists, zeta: float) -> PseudoLabelBatch:
    """Keep rows whose top probability exceeds ``zeta``; label = argmax bin (ties to the lower bin)."""
    if not 0.0 <= zeta < 1.0:
        raise ValueError(f"zeta must lie in [0, 1), got {zeta}")
    p = np.atleast_2d(np.asarray(target_dists, dtype=np.float64))
    conf = p.max(axis=1)
    keep = np.flatnonzero(conf > zeta)
    return PseudoLabelBatch(keep, p[keep].argmax(axis=1) + 1, conf[keep])


def label_log_likelihood(dist: Tensor, labels) -> Tensor:
    """Mean of log dist[i, label_i - 1] over rows (labels are 1-based)."""
    labels = np.asarray(labels, dtype=np.int64)
    pick = np.zeros(dist.shape)
    pick[np.arange(len(labels)), labels - 1] = 1.0 / len(labels)
    return ad.sum(ad.mul(ad.log(ad.clip(dist, PROB_FLOOR, 1.0)), Tensor(pick)))


def coupled_loss(
    producer_target: Tensor,
    learner_target: Tensor,
    supervised_source: Tensor,
    source_bins,
    zeta: float,
) -> Tensor:
    """``-mean log learner(ŷ | G^t) - mean log supervised(y^s | G^s)``.

    ``ŷ`` are the producer's confident argmax labels on the target rows; the
    producer's values are read without gradient.
    """
    if supervised_source.shape[0] == 0:
        raise ValueError("coupled loss needs a non-empty source batch")
    loss = ad.neg(label_log_likelihood(supervised_source, source_bins))
    pseudo = filter_pseudo_labels(producer_target.data, zeta)
    if len(pseudo):
        learner = ad.select_rows(learner_target, pseudo.kept_indices)
        loss = ad.add(loss, ad.neg(label_log_likelihood(learner, pseudo.labels)))
    return loss


def coupled_loss_L1(
    source: GraphBatch,
    target: GraphBatch,
    params: DualEncoderParams,
    zeta: float,
    outputs: dict | None = None,
) -> Tensor:
    """MP labels the target for SP; MP is fitted to the source labels."""
    out = outputs or branch_outputs(source, target, params)
    return coupled_loss(
        out["mp", "target"].hazard, out["sp", "target"].hazard, out["mp", "source"].hazard,
        source.time_bins, zeta,
    )


def coupled_loss_L2(
    source: GraphBatch,
    target: GraphBatch,
    params: DualEncoderParams,
    zeta: float,
    outputs: dict | None = None,
) -> Tensor:
    """SP labels the target for MP; SP is fitted to the source labels."""
    out = outputs or branch_outputs(source, target, params)
    return coupled_loss(
        out["sp", "target"].hazard, out["mp", "target"].hazard, out["sp", "source"].hazard,
        source.time_bins, zeta,
    )


def branch_outputs(
    source: GraphBatch,
    target: GraphBatch,
    params: DualEncoderParams,
    perturbations: "Perturbations | None" = None,
) -> dict[tuple[str, str], BranchOutput]:
    """Both branches on both domains; perturbations touch source inputs only."""
    if source.time_bins is None:
        raise ValueError("source batch must be labelled")
    out = {}
    for branch, forward in (("mp", mp_forward), ("sp", sp_forward)):
        delta = perturbations.rows(branch, source.rows) if perturbations is not None else None
        out[branch, "source"] = forward(source, params, delta)
        out[branch, "target"] = forward(target, params)
    return out


def adversarial_loss(
    source_embedding: Tensor,
    source_dist: Tensor,
    target_embedding: Tensor,
    target_dist: Tensor,
    params: DualEncoderParams,
) -> Tensor:
    """``mean log(1 - D(target)) + mean log D(source)``, probabilities clamped away from 0 and 1."""
    if source_embedding.shape[0] == 0 or target_embedding.shape[0] == 0:
        raise ValueError("adversarial loss needs both domains")
    d_s = ad.clip(domain_classifier(source_embedding, source_dist, params), PROB_FLOOR, 1 - PROB_FLOOR)
    d_t = ad.clip(domain_classifier(target_embedding, target_dist, params), PROB_FLOOR, 1 - PROB_FLOOR)
    one = Tensor(np.ones(d_t.shape))
    return ad.add(ad.mean(ad.log(ad.add(one, ad.neg(d_t)))), ad.mean(ad.log(d_s)))


def adversarial_loss_both(outputs: dict, params: DualEncoderParams) -> Tensor:
    """Average of the per-branch adversarial losses."""
    terms = [
        adversarial_loss(
            outputs[b, "source"].graph_embedding, outputs[b, "source"].hazard,
            outputs[b, "target"].graph_embedding, outputs[b, "target"].hazard, params,
        )
        for b in BRANCHES
    ]
    return ad.scale(ad.add(terms[0], terms[1]), 0.5)


def project_perturbation(delta: np.ndarray, epsilon: float) -> np.ndarray:
    """Rescale every row whose Euclidean norm exceeds ``epsilon`` onto the ball's surface."""
    d = np.asarray(delta, dtype=np.float64)
    if epsilon < 0:
        raise ValueError("epsilon must be non-negative")
    if epsilon == 0:
        return np.zeros_like(d)
    norms = np.linalg.norm(d, axis=1, keepdims=True)
    # a few ulps of slack so rows already on the surface are left alone
    outside = norms > epsilon * (1 + 8 * np.finfo(np.float64).eps)
    factor = np.where(outside, epsilon / np.where(norms > 0, norms, 1.0), 1.0)
    return d * factor


class Perturbations:
    """Per-node feature offsets for every source node, one table per branch."""

    def __init__(self, total_nodes: int, dim: int, epsilon: float):
        self.epsilon = epsilon
        self.delta_mp = Tensor(np.zeros((total_nodes, dim)), requires_grad=True, name="delta_mp")
        self.delta_sp = Tensor(np.zeros((total_nodes, dim)), requires_grad=True, name="delta_sp")

    def tensor(self, branch: str) -> Tensor:
        return self.delta_mp if branch == "mp" else self.delta_sp

    def rows(self, branch: str, rows) -> Tensor | None:
        if self.epsilon == 0:
            return None
        return ad.select_rows(self.tensor(branch), rows)

    def params(self) -> list[Tensor]:
        return [self.delta_mp, self.delta_sp]

    def project(self) -> None:
        for t in self.params():
            t.data = project_perturbation(t.data, self.epsilon)

    def max_row_norm(self) -> float:
        return max(float(np.linalg.norm(t.data, axis=1).max(initial=0.0)) for t in self.params())


def _frozen(outputs: dict) -> dict:
    return {
        key: BranchOutput(
            o.node_embeddings.detach(), o.graph_embedding.detach(), o.hazard.detach()
        )
        for key, o in outputs.items()
    }


def adversarial_round(
    source: GraphBatch,
    target: GraphBatch,
    params: DualEncoderParams,
    perturbations: Perturbations,
    dclf_opt: Optimizer,
    encoder_opt: Optimizer,
    delta_opt: Optimizer,
    n_d: int = 1,
    weight: float = 1.0,
) -> dict[str, float]:
    """One min-max round.

    (a) ``n_d`` ascent steps on the domain classifier with encoder and
    perturbations frozen; (b) one descent step on the perturbations and the
    encoder with the classifier frozen; (c) projection onto the epsilon-ball.
    """
    frozen = _frozen(branch_outputs(source, target, params, perturbations))
    dclf = params.dclf_params()
    for _ in range(n_d):
        for p in dclf:
            p.zero_grad()
        with Tape() as tape:
            l_ap = adversarial_loss_both(frozen, params)
            objective = ad.neg(l_ap)
        tape.backward(objective)
        dclf_opt.step()

    for p in params.encoder_params() + perturbations.params():
        p.zero_grad()
    with Tape() as tape:
        outputs = branch_outputs(source, target, params, perturbations)
        l_ap_enc = adversarial_loss_both(outputs, params)
        objective = ad.scale(l_ap_enc, weight)
    tape.backward(objective)
    for p in dclf:
        p.grad = None
    encoder_opt.step()
    if perturbations.epsilon > 0:
        delta_opt.step()
    else:
        for p in perturbations.params():
            p.grad = None
    perturbations.project()
    return {"l_ap_dclf": l_ap.item(), "l_ap": l_ap_enc.item()}
