import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from stalab.attack import (AttackConfig, EotDistribution, GradientError, l2_term, load_config, loss_and_grad,
                           pgd_step, run_combined, run_sta, sample_score, sample_views, save_config,
                           sta_loss_rpn, sta_loss_symmetric, target_scores)
from stalab.autodiff import Tensor
from stalab.gradcheck import check_pipeline
from stalab.siamese import Embedder, RpnHead, Victim, VictimConfig, build_victim

SMALL = AttackConfig(iterations=3, samples=2, canvas=(96, 96))


def _zero_victim(head, bias=None):
    base = build_victim(VictimConfig(head=head))
    emb = Embedder([np.zeros(w.shape) for w in base.embedder.weights], base.embedder.strides, 32, 64)
    rpn = None
    if head == "rpn":
        r = base.rpn
        rpn = RpnHead(np.zeros(r.template_adjust.shape), np.zeros(r.search_adjust.shape), r.anchors, bias)
    return Victim(base.config, emb, rpn)


# ---------------------------------------------------------------- sampling

def test_degenerate_ranges_give_identical_views():
    d = EotDistribution(scale=(1, 1), rotation=(0, 0), shear=(0, 0), tx=(0, 0), ty=(0, 0), gain=(1, 1),
                        background_low=(0.3, 0.3, 0.3), background_high=(0.3, 0.3, 0.3), occluder_phase=(0.5, 0.5))
    views = sample_views(d, 5, np.random.default_rng(0))
    assert all(v == views[0] for v in views)


def test_same_seed_same_views():
    a = sample_views(EotDistribution(), 10, np.random.default_rng(7))
    b = sample_views(EotDistribution(), 10, np.random.default_rng(7))
    assert a == b


def test_uniform_mean():
    views = sample_views(EotDistribution(tx=(0.0, 1.0)), 10_000, np.random.default_rng(1))
    assert abs(np.mean([v.tx for v in views]) - 0.5) <= 0.02


def test_sampling_validation():
    with pytest.raises(ValueError):
        sample_views(EotDistribution(), 0, np.random.default_rng(0))
    with pytest.raises(ValueError):
        EotDistribution(scale=(1.2, 0.8))
    with pytest.raises(ValueError):
        EotDistribution(gain=(0.0, 1.0))
    with pytest.raises(ValueError):
        EotDistribution.from_dict({"fov": [0, 1]})


# ---------------------------------------------------------------- losses

def test_zero_network_without_penalty_has_zero_loss(target):
    v = _zero_victim("symmetric")
    views = sample_views(EotDistribution(), 2, np.random.default_rng(0))
    tex = target.texture.chw()
    assert sta_loss_symmetric(v, target, Tensor(tex), views, 0.0, tex, SMALL).item() == 0.0


def test_l2_term_vanishes_at_original(target):
    tex = target.texture.chw()
    assert l2_term(Tensor(tex), tex, 5.0).item() == 0.0


def test_l2_term_value(target, rng):
    tex = target.texture.chw()
    other = np.clip(tex + rng.uniform(-0.1, 0.1, tex.shape), 0, 1)
    assert l2_term(Tensor(other), tex, 0.5).item() == pytest.approx(0.5 * np.linalg.norm(other - tex), rel=1e-12)


def test_uniform_rpn_logits_give_ln2(target):
    v = _zero_victim("rpn")
    view = sample_views(EotDistribution(), 1, np.random.default_rng(0))[0]
    cfg = replace(SMALL, head="rpn")
    assert sample_score(v, target, Tensor(target.texture.chw()), view, cfg).item() == pytest.approx(math.log(2),
                                                                                                     abs=1e-15)


def test_confident_background_gives_near_zero_loss(target):
    v = _zero_victim("rpn", bias=np.tile([20.0, -20.0], 3))
    views = sample_views(EotDistribution(), 2, np.random.default_rng(0))
    tex = target.texture.chw()
    assert sta_loss_rpn(v, target, Tensor(tex), views, 0.0, tex, SMALL).item() < 1e-15


def test_pipeline_gradients_match_finite_differences():
    results = check_pipeline(seed=1, n_coords=25)
    assert all(r.passed for r in results), results


def test_loss_heads_are_checked(sym_victim, rpn_victim, target):
    tex = target.texture.chw()
    with pytest.raises(ValueError):
        sta_loss_rpn(sym_victim, target, Tensor(tex), [], 0.0, tex)
    with pytest.raises(ValueError):
        sta_loss_symmetric(rpn_victim, target, Tensor(tex), [], 0.0, tex)


# ---------------------------------------------------------------- PGD

def test_zero_gradient_leaves_texture():
    t = np.random.default_rng(0).uniform(size=(3, 4, 4))
    np.testing.assert_array_equal(pgd_step(t, np.zeros_like(t), 0.1), t)


def test_step_clamps_at_zero():
    assert pgd_step(np.array([0.05]), np.array([10.0]), 0.01)[0] == 0.0


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (3, 4, 5), elements=st.floats(0, 1)),
       arrays(np.float64, (3, 4, 5), elements=st.floats(-1e3, 1e3)), st.floats(0, 10))
def test_step_stays_in_unit_box(t, g, step):
    out = pgd_step(t, g, step)
    assert out.min() >= 0.0 and out.max() <= 1.0


def test_non_finite_gradient_aborts():
    with pytest.raises(GradientError):
        pgd_step(np.zeros(3), np.array([0.0, np.nan, 1.0]), 0.1)
    with pytest.raises(ValueError):
        pgd_step(np.zeros(3), np.zeros(4), 0.1)


# ---------------------------------------------------------------- optimisation

def test_zero_step_keeps_texture(sym_victim, target):
    res = run_sta(sym_victim, target, replace(SMALL, step=0.0))
    np.testing.assert_array_equal(res.texture.data, target.texture.data)
    assert res.l2 == 0.0


def test_run_is_deterministic(sym_victim, target):
    a = run_sta(sym_victim, target, SMALL)
    b = run_sta(sym_victim, target, SMALL)
    assert a.texture.data.tobytes() == b.texture.data.tobytes()
    assert a.loss_trace == b.loss_trace


def test_attack_lowers_the_loss(sym_victim, target):
    res = run_sta(sym_victim, target, replace(SMALL, iterations=20, samples=4))
    assert np.mean(res.loss_trace[-5:]) < np.mean(res.loss_trace[:5])


def test_strong_penalty_keeps_texture_close(sym_victim, target):
    free = run_sta(sym_victim, target, replace(SMALL, iterations=8, lam=0.0))
    tied = run_sta(sym_victim, target, replace(SMALL, iterations=8, lam=100.0))
    assert tied.l2 < free.l2


def test_single_victim_combined_is_decayed_run(sym_victim, target):
    cfg = replace(SMALL, decay=0.5)
    comb = run_combined([sym_victim], target, cfg, rounds=2)
    first = run_sta(sym_victim, target, cfg, stream=(0, 0), step=cfg.step)
    second = run_sta(sym_victim, target, cfg, init_texture=first.texture, stream=(1, 0), step=cfg.step * 0.5)
    assert comb.texture.data.tobytes() == second.texture.data.tobytes()


def test_undecayed_single_round_is_sequential(sym_victim, rpn_victim, target):
    cfg = replace(SMALL, decay=1.0)
    comb = run_combined([sym_victim, rpn_victim], target, cfg, rounds=1)
    a = run_sta(sym_victim, target, cfg, stream=(0, 0))
    b = run_sta(rpn_victim, target, replace(cfg, head="rpn"), init_texture=a.texture, stream=(0, 1))
    assert comb.texture.data.tobytes() == b.texture.data.tobytes()
    assert comb.loss_trace == a.loss_trace + b.loss_trace


def test_combined_needs_a_victim(target):
    with pytest.raises(ValueError):
        run_combined([], target, SMALL)


def test_loss_and_grad_shapes(rpn_victim, target):
    tex = target.texture.chw()
    views = sample_views(EotDistribution(), 2, np.random.default_rng(0))
    value, grad = loss_and_grad(rpn_victim, target, tex, views, 1e-4, tex, replace(SMALL, head="rpn"))
    assert math.isfinite(value) and grad.shape == tex.shape and np.any(grad != 0)


def test_target_scores_per_view(sym_victim, rpn_victim, target):
    views = sample_views(EotDistribution(), 3, np.random.default_rng(0))
    assert target_scores(sym_victim, target, target.texture, views).shape == (3,)
    p = target_scores(rpn_victim, target, target.texture, views)
    assert np.all((p > 0) & (p < 1))


def test_config_round_trip(tmp_path):
    cfg = AttackConfig(lam=0.01, canvas=(64, 80), head="rpn")
    save_config(tmp_path / "a.json", cfg)
    assert load_config(tmp_path / "a.json") == cfg
    with pytest.raises(ValueError):
        AttackConfig.from_dict({"lr": 0.1})
    with pytest.raises(ValueError):
        AttackConfig(objective="mean")
