import dataclasses
import warnings

import numpy as np
import pytest

from deta.encoder import DualEncoderParams
from deta.graphs import GraphDataset, WSIGraph
from deta.survival import c_index
from deta.synthdata import ShiftConfig, generate_domain_pair
from deta.trainer import TrainConfig, adapt, evaluate, predict, pretrain

FAST = TrainConfig(hidden=8, head_hidden=8, dclf_hidden=8, k_sp=2, pretrain_epochs=3, adapt_epochs=2, batch_size=8)


def pair(n=24, seed=0, **kw):
    cfg = ShiftConfig(graphs_per_domain=n, min_nodes=4, max_nodes=7, feature_dim=6, seed=seed, **kw)
    return generate_domain_pair(cfg)


def param_bytes(params: DualEncoderParams) -> bytes:
    return b"".join(params[n].data.tobytes() for n in sorted(params.tensors))


def deterministic_pair(n, seed):
    # two classes, event in bin 1 for one and in the open last bin for the other
    return pair(n, seed, latent_classes=2, k_bins=2, class_hazards=[1.0, 0.0], censor_rate=0.0,
                source_prior=[0.5, 0.5], target_prior=[0.5, 0.5], class_sep=2.0, mu_shift=0.0,
                sigma_shift=1.0)


def test_pretrain_reduces_loss():
    src, _ = pair(20)
    result = pretrain(src, dataclasses.replace(FAST, pretrain_epochs=50))
    assert result.trace["surv"][-1] < result.trace["surv"][0]
    # full batches, so each epoch average is the objective itself; allow 5% noise
    trace = pretrain(src, dataclasses.replace(FAST, pretrain_epochs=50, batch_size=20)).trace["surv"]
    assert trace[-1] < trace[0]
    assert all(b <= 1.05 * a for a, b in zip(trace, trace[1:]))


def test_zero_epochs_keep_initialisation():
    src, _ = pair(10)
    cfg = dataclasses.replace(FAST, pretrain_epochs=0)
    init = DualEncoderParams.init(cfg.encoder_config(6), np.random.default_rng(cfg.seed))
    assert param_bytes(pretrain(src, cfg).params) == param_bytes(init)


def test_zero_adapt_epochs_returns_copy():
    src, tgt = pair(10)
    base = pretrain(src, FAST).params
    out = adapt(base, src, [g.unlabeled() for g in tgt], dataclasses.replace(FAST, adapt_epochs=0)).params
    assert param_bytes(out) == param_bytes(base)
    assert out is not base


def test_same_seed_same_bytes():
    src, tgt = pair(16)
    runs = []
    for _ in range(2):
        p = pretrain(src, FAST).params
        a = adapt(p, src, [g.unlabeled() for g in tgt], FAST)
        runs.append((param_bytes(p), param_bytes(a.params), repr(a.trace)))
    assert runs[0] == runs[1]


def test_unlabelled_source_rejected():
    src, _ = pair(6)
    with pytest.raises(ValueError, match="labelled"):
        pretrain([g.unlabeled() for g in src], FAST)


def test_target_labels_do_not_leak():
    src, tgt = pair(16)
    base = pretrain(src, FAST).params
    rng = np.random.default_rng(0)
    mutated = [WSIGraph(g.features, g.edges, int(rng.integers(1, 5)), int(rng.integers(0, 2)), "target") for g in tgt]
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        a = adapt(base, src, tgt, FAST)
        b = adapt(base, src, mutated, FAST)
    assert any("ignored" in str(w.message) for w in caught)
    c = adapt(base, src, [g.unlabeled() for g in tgt], FAST)
    assert param_bytes(a.params) == param_bytes(b.params) == param_bytes(c.params)


def test_alternation_is_fair():
    src, tgt = pair(32)
    # 32 graphs / batch 8 = 4 iterations per epoch
    result = adapt(pretrain(src, FAST).params, src, [g.unlabeled() for g in tgt], FAST)
    assert result.trace["coupling_steps_l1"] == result.trace["coupling_steps_l2"] == [2, 2]


def test_odd_iterations_alternate_across_epochs():
    src, tgt = pair(24)
    # 3 iterations per epoch: L1 L2 L1 | L2 L1 L2
    cfg = dataclasses.replace(FAST, adapt_epochs=2)
    result = adapt(pretrain(src, cfg).params, src, [g.unlabeled() for g in tgt], cfg)
    assert result.trace["coupling_steps_l1"] == [2, 1]
    assert result.trace["coupling_steps_l2"] == [1, 2]
    assert sum(result.trace["coupling_steps_l1"]) == sum(result.trace["coupling_steps_l2"])


def test_traces_are_finite_and_bounded():
    src, tgt = pair(24)
    result = adapt(pretrain(src, FAST).params, src, [g.unlabeled() for g in tgt], FAST)
    for key, values in result.trace.items():
        assert len(values) == FAST.adapt_epochs, key
        assert np.all(np.isfinite(values)), key
    assert max(result.trace["max_delta_norm"]) <= FAST.epsilon + 1e-12
    assert all(v <= 0 for v in result.trace["l_ap"])


def test_plain_continuation_matches_pretraining_control():
    src, tgt = pair(80, seed=3)
    cfg = dataclasses.replace(FAST, pretrain_epochs=10, adapt_epochs=2)
    base = pretrain(src, cfg).params
    plain = dataclasses.replace(cfg, lambda_1=0.0, lambda_2=0.0, lambda_ap=0.0)
    adapted = adapt(base, src, [g.unlabeled() for g in tgt], plain).params
    assert abs(evaluate(adapted, tgt).c_index - evaluate(base, tgt).c_index) < 0.1


def test_identical_risks_give_half():
    assert c_index(np.zeros(10), np.arange(1, 11), np.ones(10)) == 0.5


def test_perfect_information_is_recovered():
    # one draw, split into train and held-out graphs so both share the signal direction
    graphs, _ = deterministic_pair(180, seed=0)
    cfg = dataclasses.replace(FAST, k_bins=2, pretrain_epochs=30, lr_encoder=1e-2)
    params = pretrain(graphs[:120], cfg).params
    assert evaluate(params, graphs[120:]).c_index > 0.9
    assert predict(params, graphs[120:])["hazard"].shape == (60, 2)


def test_shuffled_labels_give_chance():
    src, _ = pair(60, seed=0)
    params = pretrain(src, dataclasses.replace(FAST, pretrain_epochs=5)).params
    scores = []
    for seed in range(10):
        rng = np.random.default_rng(seed)
        data, _ = pair(100, seed=seed + 100)
        times = rng.permutation([g.time_bin for g in data])
        events = rng.permutation([g.censor for g in data])
        shuffled = [WSIGraph(g.features, g.edges, int(t), int(c)) for g, t, c in zip(data, times, events)]
        scores.append(evaluate(params, shuffled).c_index)
    assert 0.45 <= np.mean(scores) <= 0.55


def test_evaluate_reports_split():
    src, tgt = pair(40)
    m = evaluate(pretrain(src, FAST).params, tgt)
    assert 0 <= m.c_index <= 1
    assert 0 <= m.logrank_p <= 1
    assert len(m.risk) == 40
    assert m.km_low[1][0] <= 1 and m.km_high[1][0] <= 1


def test_evaluate_rejects_unlabelled():
    src, tgt = pair(8)
    with pytest.raises(ValueError, match="labelled"):
        evaluate(pretrain(src, FAST).params, [g.unlabeled() for g in tgt])


def test_config_validation():
    with pytest.raises(ValueError):
        dataclasses.replace(FAST, lr_encoder=0).validate()
    with pytest.raises(ValueError):
        dataclasses.replace(FAST, zeta=1.0).validate()
    dataclasses.replace(FAST, lambda_1=0.0, epsilon=0.0).validate()


def test_dataset_k_sp_must_match():
    src, _ = pair(6)
    with pytest.raises(ValueError, match="K_sp"):
        pretrain(GraphDataset(src, 3), FAST)
