"""Optimizer: reference Adam oracle, mask freezing, quantizer scalar updates,
prune scheduling and event bookkeeping."""

import numpy as np
import pytest

from g3dpack import optim
from g3dpack.graph import build_qadg
from g3dpack.optim import (
    ADAM_EPS,
    BETA1,
    BETA2,
    MEANS_LR_SCALE,
    OptimizerError,
    Q_M_FLOOR,
    init_optim_state,
    linear_prune_targets,
    masked_step,
    prune_event,
    schedule_prune_mask,
)
from g3dpack.quant import (
    bitwidth_raw,
    make_bank,
    observe_scene,
    quantizer_grads,
    t_for_bits,
)
from g3dpack.render import backward
from g3dpack.scene import ATTRIBUTE_ORDER, AttributeClass


class FakeGrads:
    """Hand-built gradient container matching SceneGradients' fields."""

    def __init__(self, scene, fill=0.0, rng=None):
        for name in ("means", "log_scales", "quats", "opacity_logits", "sh_coeffs"):
            arr = getattr(scene, name)
            if rng is None:
                setattr(self, name, np.full_like(arr, fill))
            else:
                setattr(self, name, rng.normal(size=arr.shape))


def reference_adam(param, grad_seq, lr):
    """Textbook Adam with bias correction, one scalar tensor."""
    m = np.zeros_like(param)
    v = np.zeros_like(param)
    p = param.copy()
    for t, g in enumerate(grad_seq, start=1):
        m = BETA1 * m + (1 - BETA1) * g
        v = BETA2 * v + (1 - BETA2) * g * g
        m_hat = m / (1 - BETA1**t)
        v_hat = v / (1 - BETA2**t)
        p = p - lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS)
    return p


def test_masked_step_matches_reference_adam(small_blob):
    scene, _, _ = small_blob
    work = scene.copy()
    state = init_optim_state(work, scene_lr=1e-2)
    rng = np.random.default_rng(0)
    grad_seqs = {name: [] for name in ("log_scales", "means")}
    for _ in range(5):
        grads = FakeGrads(work, rng=rng)
        grad_seqs["log_scales"].append(grads.log_scales.copy())
        grad_seqs["means"].append(grads.means.copy())
        masked_step(state, work, grads)
    want_scales = reference_adam(scene.log_scales, grad_seqs["log_scales"], 1e-2)
    np.testing.assert_allclose(work.log_scales, want_scales, atol=1e-15)
    want_means = reference_adam(
        scene.means, grad_seqs["means"], 1e-2 * MEANS_LR_SCALE
    )
    np.testing.assert_allclose(work.means, want_means, atol=1e-15)


def test_masked_rows_stay_bitwise_frozen(small_blob):
    scene, cameras, targets = small_blob
    work = scene.copy()
    state = init_optim_state(work)
    state.prune_mask = np.zeros(work.n_total, dtype=bool)
    state.prune_mask[[1, 7, 20]] = True
    before = {name: getattr(work, name).copy() for name in (
        "means", "log_scales", "quats", "opacity_logits", "sh_coeffs")}
    rng = np.random.default_rng(1)
    for _ in range(4):
        tgt = np.clip(targets[0] + rng.normal(scale=0.1, size=targets[0].shape), 0, 1)
        _, grads = backward(work, cameras[0], tgt)
        masked_step(state, work, grads)
    frozen = state.prune_mask
    for name, prior in before.items():
        arr = getattr(work, name)
        assert np.array_equal(arr[frozen], prior[frozen]), name
        assert not np.array_equal(arr[~frozen], prior[~frozen]), name


def test_masked_rows_do_not_feed_quantizer_grads(small_blob):
    """With every row masked, quantizer scalars receive zero gradient and a
    zero Adam step, so the widths stay put."""
    scene, _, _ = small_blob
    work = scene.copy()
    bank = make_bank("compressive")
    observe_scene(bank, work)
    for cls in bank:
        bank[cls].t = t_for_bits(bank[cls], (bank[cls].b_lo + bank[cls].b_hi) / 2)
    widths_before = {cls: bitwidth_raw(bank[cls]) for cls in bank}
    state = init_optim_state(work, bank)
    state.prune_mask = np.ones(work.n_total, dtype=bool)
    grads = FakeGrads(work, fill=0.5)
    masked_step(state, work, grads, quantizer_bank=bank)
    for cls in bank:
        assert bitwidth_raw(bank[cls]) == widths_before[cls]


def test_quantizer_scalars_move_and_respect_floor(small_blob):
    scene, cameras, targets = small_blob
    work = scene.copy()
    bank = make_bank("compressive")
    observe_scene(bank, work)
    # interior widths so the KKT gate passes gradients
    for cls, st in bank.items():
        if st.b_hi > st.b_lo:
            st.t = t_for_bits(st, (st.b_lo + st.b_hi) / 2)
    state = init_optim_state(work, bank, quant_lr=1e-3)
    rng = np.random.default_rng(2)
    tgt = np.clip(targets[0] + rng.normal(scale=0.1, size=targets[0].shape), 0, 1)
    _, grads = backward(work, cameras[0], tgt)
    means_state = bank[AttributeClass.MEANS]
    before = (means_state.q_m, means_state.t, means_state.d)
    g = quantizer_grads(work.get_block(AttributeClass.MEANS), grads.means, means_state)
    assert any(gi != 0.0 for gi in g)
    masked_step(state, work, grads, quantizer_bank=bank)
    after = (means_state.q_m, means_state.t, means_state.d)
    assert after != before
    assert means_state.q_m >= Q_M_FLOOR
    lo, hi = means_state.b_lo, means_state.b_hi
    assert lo - 1e-9 <= bitwidth_raw(means_state) <= hi + 1e-9


def test_non_finite_gradients_rejected(small_blob):
    scene, _, _ = small_blob
    work = scene.copy()
    state = init_optim_state(work)
    grads = FakeGrads(work, fill=0.0)
    grads.quats[0, 0] = np.nan
    with pytest.raises(OptimizerError):
        masked_step(state, work, grads)


def test_mask_shape_checked(small_blob):
    scene, _, _ = small_blob
    work = scene.copy()
    state = init_optim_state(work)
    state.prune_mask = np.zeros(3, dtype=bool)
    with pytest.raises(OptimizerError):
        masked_step(state, work, FakeGrads(work))


def test_schedule_prune_mask_picks_lowest_scores():
    saliency = np.array([0.5, 0.1, 0.9, 0.3, 0.7])
    mask = schedule_prune_mask(saliency, k_target=3)
    np.testing.assert_array_equal(mask, [False, True, False, True, False])


def test_schedule_prune_mask_breaks_ties_by_index():
    saliency = np.array([0.2, 0.2, 0.2, 0.2])
    mask = schedule_prune_mask(saliency, k_target=2)
    np.testing.assert_array_equal(mask, [True, True, False, False])


def test_schedule_prune_mask_skips_dead_rows():
    saliency = np.array([0.0, 0.1, 0.2, 0.3])
    alive = np.array([False, True, True, True])
    mask = schedule_prune_mask(saliency, k_target=2, alive=alive)
    np.testing.assert_array_equal(mask, [False, True, False, False])


def test_schedule_prune_mask_validates_target():
    s = np.ones(4)
    with pytest.raises(OptimizerError):
        schedule_prune_mask(s, k_target=0)
    with pytest.raises(OptimizerError):
        schedule_prune_mask(s, k_target=5)
    assert not schedule_prune_mask(s, k_target=4).any()


def test_prune_event_remaps_moments(small_blob):
    scene, cameras, _ = small_blob
    work = scene.copy()
    graph = build_qadg(work, cameras, k_views=2, seed=0)
    state = init_optim_state(work)
    rng = np.random.default_rng(3)
    for name in state.m:
        state.m[name] = rng.normal(size=state.m[name].shape)
        state.v[name] = rng.uniform(size=state.v[name].shape)
    mask = np.zeros(work.n_total, dtype=bool)
    mask[[0, 9]] = True
    before_m = {name: state.m[name].copy() for name in state.m}
    scene2, graph2 = prune_event(work, graph, mask, state)
    keep = ~mask
    assert scene2.n_total == work.n_total - 2
    assert graph2.n_alive == scene2.n_total
    for name in state.m:
        np.testing.assert_array_equal(state.m[name], before_m[name][keep])
    assert state.prune_mask.shape == (scene2.n_total,)
    assert not state.prune_mask.any()
    assert state.pending_target is None
    np.testing.assert_array_equal(scene2.means, work.means[keep])


def test_prune_event_noop_on_empty_mask(small_blob):
    scene, cameras, _ = small_blob
    graph = build_qadg(scene, cameras, k_views=2, seed=0)
    out_scene, out_graph = prune_event(scene, graph, np.zeros(scene.n_total, bool))
    assert out_scene is scene and out_graph is graph


def test_prune_event_checks_mask_shape(small_blob):
    scene, cameras, _ = small_blob
    graph = build_qadg(scene, cameras, k_views=2, seed=0)
    with pytest.raises(OptimizerError):
        prune_event(scene, graph, np.zeros(2, dtype=bool))


def test_linear_prune_targets_ladder():
    assert linear_prune_targets(100, 40, n_events=5) == [88, 76, 64, 52, 40]
    assert linear_prune_targets(64, 64, n_events=3) == [64, 64, 64]
    assert linear_prune_targets(10, 3, n_events=1) == [3]
    with pytest.raises(OptimizerError):
        linear_prune_targets(10, 11)
    with pytest.raises(OptimizerError):
        linear_prune_targets(10, 5, n_events=0)


def test_linear_prune_targets_monotone_and_terminal():
    for n, k, e in [(101, 7, 4), (64, 1, 6), (33, 32, 2)]:
        ladder = linear_prune_targets(n, k, n_events=e)
        assert ladder[-1] == k
        assert all(a >= b for a, b in zip(ladder, ladder[1:]))
        assert all(t <= n for t in ladder)
