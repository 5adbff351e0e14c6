"""Forward semantics, relation representations, and checkpoint round trips."""

import numpy as np
import pytest

from ncdlab import autodiff as ad
from ncdlab import data as data_mod
from ncdlab import model, trainer
from ncdlab.autodiff import Tensor, backward
from ncdlab.config import RunConfig, apply_overrides

from oracles import fd_gradient, max_rel_err


def make_params(seed=0, **kwargs):
    rng = np.random.default_rng(seed)
    defaults = dict(in_dim=6, n_known=4, n_novel=3, hidden=(5,), embed_dim=4,
                    projection_hidden=4)
    defaults.update(kwargs)
    return model.init_params(rng, **defaults)


def test_full_probs_rows_sum_to_one():
    params = make_params()
    rng = np.random.default_rng(1)
    out = model.forward(params, rng.normal(size=(7, 6)), tau=0.1)
    np.testing.assert_allclose(out.full_probs.values.sum(axis=1), 1.0,
                               atol=1e-12)
    known = out.full_probs.values[:, :4].sum(axis=1)
    novel = out.full_probs.values[:, 4:].sum(axis=1)
    np.testing.assert_allclose(known + novel, 1.0, atol=1e-12)


def test_cosine_logits_bounded():
    params = make_params()
    rng = np.random.default_rng(2)
    out = model.forward(params, 100.0 * rng.normal(size=(20, 6)), tau=0.1)
    assert np.all(np.abs(out.known_logits.values) <= 1.0 + 1e-12)
    assert np.all(np.abs(out.novel_logits.values) <= 1.0 + 1e-12)


def test_duplicate_rows_get_identical_outputs():
    params = make_params()
    row = np.random.default_rng(3).normal(size=6)
    out = model.forward(params, np.stack([row, row]), tau=0.1)
    assert np.array_equal(out.full_probs.values[0], out.full_probs.values[1])
    assert np.array_equal(out.embedding.values[0], out.embedding.values[1])


def test_temperature_preserves_argmax():
    params = make_params()
    x = np.random.default_rng(4).normal(size=(30, 6))
    sharp = model.forward(params, x, tau=0.1).full_probs.values
    soft = model.forward(params, x, tau=1.0).full_probs.values
    assert np.array_equal(sharp.argmax(axis=1), soft.argmax(axis=1))


def test_prototype_scale_invariance():
    params = make_params()
    x = np.random.default_rng(5).normal(size=(8, 6))
    base = model.forward(params, x, tau=0.1).known_logits.values
    params.known_head.values[2] *= 7.5
    scaled = model.forward(params, x, tau=0.1).known_logits.values
    np.testing.assert_allclose(scaled, base, atol=1e-12)


def test_forward_validation():
    params = make_params()
    with pytest.raises(ValueError):
        model.forward(params, np.zeros((2, 6)), tau=0.0)
    with pytest.raises(ValueError):
        model.forward(params, np.zeros((2, 5)), tau=0.1)
    with pytest.raises(ValueError):
        model.forward(params, np.zeros(6), tau=0.1)


def test_teacher_relation_rows_and_limits():
    params = make_params()
    x = np.random.default_rng(6).normal(size=(9, 6))
    rel = model.teacher_relation(params, x, t=0.4)
    assert isinstance(rel, np.ndarray)
    np.testing.assert_allclose(rel.sum(axis=1), 1.0, atol=1e-12)
    soft = model.teacher_relation(params, x, t=1e6)
    np.testing.assert_allclose(soft, 0.25, atol=1e-6)
    with pytest.raises(ValueError):
        model.teacher_relation(params, x, t=0.0)


def test_student_relation_matches_teacher_at_init():
    params = make_params()
    frozen = model.snapshot(params)
    x = np.random.default_rng(7).normal(size=(5, 6))
    teacher = model.teacher_relation(frozen, x, t=0.4)
    student = model.student_relation(params, x, t=0.4)
    np.testing.assert_allclose(student.values, teacher, atol=1e-12)
    with pytest.raises(ValueError):
        model.student_relation(params, x, t=-1.0)


def test_relation_kl_gradient_reaches_known_head():
    params = make_params()
    x = np.random.default_rng(8).normal(size=(4, 6))
    target = model.teacher_relation(params, x, t=0.4)
    params.known_head.values[0] += 0.3  # make p_S differ from p_T

    def kl_value():
        pS = model.student_relation(params, x, t=0.4)
        ratio = Tensor(target) * (Tensor(np.log(target)) - ad.ln(pS))
        return ad.reduce_sum(ratio)

    loss = kl_value()
    backward(loss)
    analytic = params.known_head.grad.copy()
    assert np.abs(analytic).max() > 1e-6
    numeric = fd_gradient(lambda: kl_value().item(),
                          [params.known_head.values])
    assert max_rel_err([analytic], numeric) < 1e-4


def test_snapshot_is_frozen_and_independent():
    params = make_params()
    x = np.random.default_rng(9).normal(size=(3, 6))
    frozen = model.snapshot(params)
    assert all(not p.requires_grad for p in frozen.parameters())
    before = model.forward(frozen, x, tau=0.1).full_probs.values
    same = model.forward(params, x, tau=0.1).full_probs.values
    assert np.array_equal(before, same)
    params.encoder_layers[0][0].values += 1.0
    params.known_head.values += 1.0
    after = model.forward(frozen, x, tau=0.1).full_probs.values
    assert np.array_equal(before, after)


def test_clone_trainable_is_independent():
    params = make_params()
    clone = model.clone_trainable(params)
    assert all(p.requires_grad for p in clone.parameters())
    for a, b in zip(params.parameters(), clone.parameters()):
        assert np.array_equal(a.values, b.values)
        assert a.values is not b.values
    clone.novel_head.values += 2.0
    assert not np.array_equal(params.novel_head.values,
                              clone.novel_head.values)


def test_init_param_shapes_and_norms():
    params = make_params(in_dim=10, n_known=6, n_novel=4, hidden=(12, 8),
                         embed_dim=5, projection_hidden=7)
    assert params.in_dim == 10
    assert params.embed_dim == 5
    assert params.n_known == 6 and params.n_novel == 4
    widths = [(10, 12), (12, 8), (8, 5)]
    for (w, b), (fan_in, fan_out) in zip(params.encoder_layers, widths):
        assert w.shape == (fan_in, fan_out)
        assert b.shape == (fan_out,)
        assert np.all(b.values == 0.0)
    np.testing.assert_allclose(
        np.linalg.norm(params.known_head.values, axis=1), 1.0, atol=1e-12)
    no_proj = make_params(use_projection=False)
    assert no_proj.novel_projection is None
    names = [n for n, _ in params.named_parameters()]
    assert names[0] == "encoder.0.weight"
    assert "projection.1.bias" in names


def test_checkpoint_round_trip_is_bit_exact(tmp_path):
    params = make_params(seed=11)
    params.known_head.values[0, 0] = 1e-300  # exercise extreme exponents
    params.encoder_layers[0][0].values[0, 0] = -0.1 + 1e-17
    path = tmp_path / "model.ckpt"
    model.save_checkpoint(params, path)
    loaded = model.load_checkpoint(path)
    for (name_a, a), (name_b, b) in zip(params.named_parameters(),
                                        loaded.named_parameters()):
        assert name_a == name_b
        assert a.shape == b.shape
        assert np.array_equal(a.values, b.values)
        assert b.requires_grad
    model.save_checkpoint(loaded, tmp_path / "again.ckpt")
    assert (tmp_path / "model.ckpt").read_bytes() == (
        tmp_path / "again.ckpt").read_bytes()


def test_checkpoint_without_projection_round_trips(tmp_path):
    params = make_params(use_projection=False)
    path = tmp_path / "flat.ckpt"
    model.save_checkpoint(params, path)
    assert model.load_checkpoint(path).novel_projection is None


def test_checkpoint_rejects_foreign_files(tmp_path):
    bad = tmp_path / "bad.ckpt"
    bad.write_text("not a checkpoint\n")
    with pytest.raises(ValueError):
        model.load_checkpoint(bad)
    truncated = tmp_path / "trunc.ckpt"
    truncated.write_text(model.CHECKPOINT_MAGIC + "\ntensor known_head 2 2\n")
    with pytest.raises((ValueError, IndexError)):
        model.load_checkpoint(truncated)


def test_pretrained_midpoint_relation_ranks_parents():
    # after supervised pretraining, a probe placed between two known
    # centers should put its two largest relation entries on that pair
    spec = data_mod.SyntheticSpec(samples_per_class=50, test_per_class=10)
    dataset, _ = data_mod.generate(spec)
    cfg = apply_overrides(RunConfig(), ["epochs_pretrain=30"])
    params = trainer.pretrain(dataset, cfg)

    labeled = np.flatnonzero(dataset.split == data_mod.SplitFlag.LABELED_KNOWN)
    feats = dataset.features[labeled]
    labels = dataset.training_labels(labeled)
    centers = np.array([feats[labels == c].mean(axis=0)
                        for c in range(spec.n_known)])
    for a, b in ((0, 6), (2, 5), (3, 8)):
        probe = 0.5 * (centers[a] + centers[b])
        rel = model.teacher_relation(params, probe[None, :], t=cfg.t)[0]
        top2 = set(np.argsort(rel)[::-1][:2].tolist())
        assert top2 == {a, b}
