"""Loss-term values, weight-family identities, and gradient routing."""

import logging

import numpy as np
import pytest

from ncdlab import autodiff as ad
from ncdlab import losses, model, transport
from ncdlab.autodiff import Tensor, backward
from ncdlab.config import RunConfig, apply_overrides
from ncdlab.data import Batch
from ncdlab.losses import (WeightMode, parse_weight_mode, relation_kd,
                           relation_strength, supervised_ce, weight)

from oracles import fd_gradient, max_rel_err


def row_probs(rng, n, width):
    return rng.dirichlet(np.ones(width), size=n)


def small_setup(rng, n_lab=3, n_unlab=5, n_known=4, n_novel=3, dim=6):
    params = model.init_params(rng, dim, n_known, n_novel, hidden=(5,),
                               embed_dim=4, projection_hidden=4)
    features = rng.normal(size=(n_lab + n_unlab, dim))
    labels = np.concatenate([rng.integers(0, n_known, size=n_lab),
                             np.full(n_unlab, -1)])
    mask = np.zeros(n_lab + n_unlab, dtype=bool)
    mask[:n_lab] = True
    batch = Batch(features, labels, mask, np.arange(n_lab + n_unlab))
    return params, batch


def test_supervised_ce_certain_prediction_is_zero():
    probs = np.full((2, 5), 1e-12)
    probs[0, 3] = 1.0
    probs[1, 0] = 1.0
    loss = supervised_ce(Tensor(probs), np.array([3, 0]))
    assert abs(loss.item()) < 1e-10


def test_supervised_ce_uniform_is_log_card():
    probs = np.full((4, 10), 0.1)
    loss = supervised_ce(Tensor(probs), np.array([0, 3, 7, 9]))
    assert abs(loss.item() - np.log(10.0)) < 1e-12


def test_supervised_ce_gradient_matches_fd():
    rng = np.random.default_rng(0)
    logits = rng.normal(size=(4, 6))
    labels = np.array([2, 0, 5, 1])

    def run():
        t = Tensor(logits, requires_grad=True)
        loss = supervised_ce(ad.softmax(t, 1.0), labels)
        return t, loss

    t, loss = run()
    backward(loss)
    numeric = fd_gradient(lambda: run()[1].item(), [logits])
    assert max_rel_err([t.grad], numeric) < 1e-5


def test_supervised_ce_rejects_bad_labels():
    probs = Tensor(np.full((2, 4), 0.25))
    with pytest.raises(ValueError):
        supervised_ce(probs, np.array([0, 4]))
    with pytest.raises(ValueError):
        supervised_ce(probs, np.array([-1, 0]))
    with pytest.raises(ValueError):
        supervised_ce(probs, np.array([0]))


def test_relation_strength_limits_and_ordering():
    rng = np.random.default_rng(1)
    concentrated = np.full((2, 8), 1e-13)
    concentrated[:, 4:] = 0.25
    eta = relation_strength(Tensor(concentrated), 4)
    assert eta.values.max() < 1e-9

    uniform = np.full((3, 8), 0.125)
    eta = relation_strength(Tensor(uniform), 4)
    np.testing.assert_allclose(eta.values, 0.5, atol=1e-15)

    probs = row_probs(rng, 10, 9)
    eta = relation_strength(Tensor(probs), 5)
    known_mass = probs[:, :5].sum(axis=1)
    assert np.array_equal(np.argsort(eta.values), np.argsort(known_mass))


def test_norm_eta_weights_sum_to_batch_size():
    rng = np.random.default_rng(2)
    for _ in range(20):
        eta = Tensor(rng.uniform(0.01, 0.99, size=rng.integers(2, 33)))
        g = weight(eta, WeightMode.NORM_ETA)
        assert abs(g.values.sum() - eta.shape[0]) < 1e-12
        assert g.values.min() > 0.0


def test_equal_eta_gives_unit_weights():
    eta = Tensor(np.full(6, 0.37))
    np.testing.assert_allclose(weight(eta, WeightMode.NORM_ETA).values, 1.0,
                               atol=1e-15)
    np.testing.assert_allclose(weight(eta, WeightMode.ONE).values, 1.0)


def test_sg_variants_match_forward_values_exactly():
    rng = np.random.default_rng(3)
    eta_values = rng.uniform(0.05, 0.95, size=12)
    for plain, stopped in ((WeightMode.ETA, WeightMode.SG_ETA),
                           (WeightMode.NORM_ETA, WeightMode.SG_NORM_ETA)):
        a = weight(Tensor(eta_values), plain).values
        b = weight(Tensor(eta_values), stopped).values
        assert np.array_equal(a, b)


def test_norm_eta_gradient_matches_hand_derivation():
    # L = sum_i g_i * eta_i; with S = sum(eta), the full gradient is
    # 2B eta_j / S - B sum(eta^2) / S^2 while the stop-gradient variant
    # keeps only the g_j = B eta_j / S term
    rng = np.random.default_rng(4)
    eta_values = rng.uniform(0.1, 0.9, size=8)
    B = eta_values.size
    S = eta_values.sum()

    def tape_grad(mode):
        eta = Tensor(eta_values, requires_grad=True)
        backward(ad.reduce_sum(weight(eta, mode) * eta))
        return eta.grad

    full = tape_grad(WeightMode.NORM_ETA)
    frozen = tape_grad(WeightMode.SG_NORM_ETA)
    expected_full = 2.0 * B * eta_values / S - B * (eta_values ** 2).sum() / S ** 2
    expected_frozen = B * eta_values / S
    np.testing.assert_allclose(full, expected_full, atol=1e-12)
    np.testing.assert_allclose(frozen, expected_frozen, atol=1e-12)
    assert np.abs(full - frozen).max() > 1e-6

    def value():
        eta = Tensor(eta_values, requires_grad=True)
        return ad.reduce_sum(weight(eta, WeightMode.NORM_ETA) * eta).item()

    numeric = fd_gradient(value, [eta_values])
    assert max_rel_err([full], numeric) < 1e-6


def test_weight_rejects_zero_eta_sum():
    with pytest.raises(ValueError):
        weight(Tensor(np.zeros(4)), WeightMode.NORM_ETA)
    with pytest.raises(ValueError):
        weight(Tensor(np.zeros(4)), WeightMode.SG_NORM_ETA)


def test_parse_weight_mode_accepts_compact_forms():
    assert parse_weight_mode("1") is WeightMode.ONE
    assert parse_weight_mode("eta") is WeightMode.ETA
    assert parse_weight_mode("SG(eta)") is WeightMode.SG_ETA
    assert parse_weight_mode("SG(Norm(eta))") is WeightMode.SG_NORM_ETA
    assert parse_weight_mode("Norm(eta)") is WeightMode.NORM_ETA
    assert parse_weight_mode("norm_eta") is WeightMode.NORM_ETA
    with pytest.raises(ValueError):
        parse_weight_mode("linear")


def test_relation_kd_zero_for_identical_rows():
    rng = np.random.default_rng(5)
    p = row_probs(rng, 6, 4)
    for g in (np.ones(6), rng.uniform(0.1, 3.0, size=6)):
        loss = relation_kd(p, Tensor(p.copy()), Tensor(g))
        assert abs(loss.item()) < 1e-12


def test_relation_kd_hand_value():
    p_teacher = np.array([[1.0, 0.0]])
    p_student = Tensor(np.array([[0.5, 0.5]]))
    loss = relation_kd(p_teacher, p_student, Tensor(np.ones(1)))
    assert abs(loss.item() - np.log(2.0)) < 1e-12


def test_relation_kd_is_linear_in_the_weights():
    rng = np.random.default_rng(6)
    pT = row_probs(rng, 4, 5)
    pS = Tensor(row_probs(rng, 4, 5))
    g = np.ones(4)
    base = relation_kd(pT, pS, Tensor(g)).item()
    g2 = g.copy()
    g2[1] = 2.0
    kl_rows = losses._kl_rows(pT, pS).values
    boosted = relation_kd(pT, pS, Tensor(g2)).item()
    assert abs(boosted - (base + kl_rows[1] / 4.0)) < 1e-12


def test_kl_nonnegative_and_zero_only_at_equality():
    rng = np.random.default_rng(7)
    for _ in range(50):
        pT = row_probs(rng, 3, 6)
        pS = row_probs(rng, 3, 6)
        kl = losses._kl_rows(pT, Tensor(pS)).values
        assert kl.min() >= -1e-12
        assert kl.max() > 1e-10  # random rows never coincide
    same = row_probs(rng, 2, 6)
    kl = losses._kl_rows(same, Tensor(same.copy())).values
    assert np.abs(kl).max() < 1e-10


def test_student_tail_clamp_warns(caplog):
    pT = np.array([[0.5, 0.5]])
    pS = Tensor(np.array([[1.0 - 1e-40, 1e-40]]))
    with caplog.at_level(logging.WARNING, logger="ncdlab.losses"):
        loss = relation_kd(pT, pS, Tensor(np.ones(1)))
    assert np.isfinite(loss.item())
    assert any("clamped" in r.message for r in caplog.records)


def test_one_mode_equals_unweighted_mean_bitwise():
    rng = np.random.default_rng(8)
    pT = row_probs(rng, 7, 4)
    pS = Tensor(row_probs(rng, 7, 4))
    weighted = relation_kd(pT, pS, weight(Tensor(np.zeros(7)), WeightMode.ONE))
    unweighted = ad.reduce_mean(losses._kl_rows(pT, pS))
    assert weighted.item() == unweighted.item()


def test_total_loss_breakdown_identity():
    rng = np.random.default_rng(9)
    params, batch = small_setup(rng)
    cfg = RunConfig()
    teacher = model.snapshot(params)
    out = losses.total_loss(batch, params, teacher, None, cfg)
    expected = out.l_sup + cfg.alpha * out.l_u + cfg.beta * out.l_rkd
    assert abs(out.total - expected) < 1e-12
    assert out.l_u >= 0.0
    assert out.l_rkd >= 0.0
    assert out.eta.shape == (5,)
    assert out.kl_per_sample.shape == (5,)


def test_total_loss_beta_zero_drops_relation_term():
    rng = np.random.default_rng(10)
    params, batch = small_setup(rng)
    cfg = apply_overrides(RunConfig(), ["beta=0.0"])
    out = losses.total_loss(batch, params, None, None, cfg)
    assert out.l_rkd == 0.0
    assert out.total == out.l_sup + cfg.alpha * out.l_u
    assert np.all(out.kl_per_sample == 0.0)


def test_total_loss_alpha_beta_zero_reduces_to_supervised():
    rng = np.random.default_rng(11)
    params, batch = small_setup(rng)
    cfg = apply_overrides(RunConfig(), ["alpha=0.0", "beta=0.0"])
    out = losses.total_loss(batch, params, None, None, cfg)
    fw = model.forward(params, batch.features, cfg.tau)
    direct = supervised_ce(ad.slice_rows(fw.full_probs, 0, 3),
                           batch.labels[:3]).item()
    assert out.total == pytest.approx(direct, abs=1e-15)


def test_total_loss_gradient_skips_teacher_and_plan():
    rng = np.random.default_rng(12)
    params, batch = small_setup(rng)
    cfg = RunConfig()
    teacher = model.snapshot(params)
    before = [p.values.copy() for p in teacher.parameters()]
    out = losses.total_loss(batch, params, teacher, None, cfg)
    q_before = out.plan.Q.copy()
    backward(out.loss)
    for p, prior in zip(teacher.parameters(), before):
        assert not p.requires_grad
        assert p.grad is None
        assert np.array_equal(p.values, prior)
    assert np.array_equal(out.plan.Q, q_before)
    assert any(p.grad is not None and np.abs(p.grad).max() > 0.0
               for p in params.parameters())


def test_total_loss_requires_labeled_first_ordering():
    rng = np.random.default_rng(13)
    params, batch = small_setup(rng)
    shuffled = Batch(batch.features, batch.labels,
                     batch.labeled_mask[::-1].copy(), batch.indices)
    with pytest.raises(ValueError):
        losses.total_loss(shuffled, params, None, None, RunConfig())


def test_total_loss_all_labeled_batch_has_no_unsupervised_terms():
    rng = np.random.default_rng(14)
    params, _ = small_setup(rng)
    features = rng.normal(size=(4, 6))
    batch = Batch(features, np.array([0, 1, 2, 3]),
                  np.ones(4, dtype=bool), np.arange(4))
    out = losses.total_loss(batch, params, None, None, RunConfig())
    assert out.l_u == 0.0 and out.l_rkd == 0.0
    assert out.total == out.l_sup
    assert out.eta.size == 0


def test_total_loss_all_unlabeled_batch_has_no_supervised_term():
    rng = np.random.default_rng(15)
    params, _ = small_setup(rng)
    features = rng.normal(size=(6, 6))
    batch = Batch(features, np.full(6, -1), np.zeros(6, dtype=bool),
                  np.arange(6))
    teacher = model.snapshot(params)
    out = losses.total_loss(batch, params, teacher, None, RunConfig())
    assert out.l_sup == 0.0
    assert out.l_u > 0.0


def test_total_loss_accepts_pinned_plan():
    rng = np.random.default_rng(16)
    params, batch = small_setup(rng)
    cfg = RunConfig()
    teacher = model.snapshot(params)
    first = losses.total_loss(batch, params, teacher, None, cfg)
    again = losses.total_loss(batch, params, teacher, first.plan, cfg)
    assert again.total == first.total
    assert again.plan is first.plan


def test_weight_override_replaces_g():
    rng = np.random.default_rng(17)
    params, batch = small_setup(rng)
    cfg = RunConfig()
    teacher = model.snapshot(params)
    out = losses.total_loss(batch, params, teacher, None, cfg)
    pinned = losses.total_loss(batch, params, teacher, out.plan, cfg,
                               weight_override=np.zeros(5))
    assert pinned.l_rkd == 0.0
