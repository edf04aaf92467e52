import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from sklearn.base import clone

from probplan.exceptions import ConfigError, NonFiniteError, ShapeError, ValidationError
from probplan.geometry import DEFAULT_FOOTPRINT, Footprint, conflict_with_agent
from probplan.nn import ModelConfig
from probplan.planner import (
    ActionDistribution,
    MeanTrajectoryRegressor,
    ProbabilisticPlanner,
    TrainConfig,
    action_distribution,
    batch_indices,
    build_params,
    build_target_distribution,
    conflict_loss,
    conflict_mask,
    distribution_loss,
    prepare_frames,
    score_actions,
    select_action_argmax,
    select_topk_with_rules,
    train_step,
)
from probplan.scene import EgoObservation, SceneSnapshot, embed_scene
from probplan.vocabulary import PlanningVocabulary

from helpers import light, random_snapshot, snapshot, stationary_agent, straight

SPEEDS = np.linspace(0.0, 14.0, 8)


def speed_vocab(speeds=SPEEDS):
    return PlanningVocabulary(np.stack([straight(v) for v in speeds]))


def small_config(vocab, d=16):
    return ModelConfig(d=d, heads=2, depth=2, n_bands=vocab.n_bands, horizon=vocab.T, n_actions=vocab.N, ffn=2 * d)


def test_score_actions_shape_and_errors(rng):
    vocab = speed_vocab()
    cfg = small_config(vocab)
    p = build_params(cfg)
    env = embed_scene(random_snapshot(rng), p, 6)
    assert score_actions(vocab.encodings, env, p, cfg).shape == (1, 8)
    assert score_actions(vocab.encodings[:3], env, p, cfg).shape == (1, 3)
    with pytest.raises(ShapeError):
        score_actions(vocab.encodings[:, :100], env, p, cfg)


def test_zero_head_gives_uniform_distribution(rng):
    vocab = speed_vocab()
    cfg = small_config(vocab)
    p = build_params(cfg)
    p.zero_("head.")
    logits = score_actions(vocab.encodings, embed_scene(random_snapshot(rng), p, 6), p, cfg)[0]
    assert torch.all(logits == logits[0])
    assert np.allclose(action_distribution(logits).probs, 1 / 8)


def test_logits_are_permutation_equivariant(rng):
    vocab = speed_vocab()
    cfg = small_config(vocab)
    p = build_params(cfg, dtype=torch.float64)
    env = embed_scene(random_snapshot(rng), p, 6)
    perm = rng.permutation(8)
    a = score_actions(vocab.encodings, env, p, cfg)[0]
    b = score_actions(vocab.encodings[perm], env, p, cfg)[0]
    assert torch.allclose(a[perm], b, atol=1e-12)


def test_action_distribution_examples():
    d = action_distribution(torch.zeros(4096))
    assert np.allclose(d.probs, 1 / 4096)
    z = np.random.default_rng(0).normal(size=500) * 30
    d = action_distribution(z)
    assert abs(d.probs.sum() - 1) < 1e-6 and d.argmax() == int(np.argmax(z))
    assert np.all(d.probs > 0)
    with pytest.raises(NonFiniteError):
        action_distribution([0.0, float("nan")])
    with pytest.raises(ValidationError):
        ActionDistribution(np.array([0.5, 0.6]))


def test_target_distribution_examples():
    gt = straight(5.0)
    # ADE between straight(v) and straight(5) is |v - 5| * mean(t) = |v - 5| * 1.75
    vocab = PlanningVocabulary(np.stack([gt, straight(5.0 + 0.5 / 1.75)]))
    target = build_target_distribution(vocab, gt, tau=0.5)
    assert np.allclose(target, np.array([1.0, math.exp(-1.0), 1.0]) / (2 + math.exp(-1.0)))
    sharp = build_target_distribution(speed_vocab(), straight(3.3), tau=1e-3)
    assert sharp[-1] == pytest.approx(1.0) and sharp.sum() == pytest.approx(1.0)
    with pytest.raises(ConfigError):
        build_target_distribution(vocab, gt, tau=0.0)


def test_distribution_loss_examples():
    assert distribution_loss([0.5, 0.5], [0.5, 0.5]) == 0.0
    assert distribution_loss([0.9, 0.1], [0.5, 0.5]) == pytest.approx(0.5108, abs=1e-4)
    assert distribution_loss([0.2, 0.3, 0.5], [0.0, 1.0, 0.0]) == pytest.approx(-math.log(0.3))
    with pytest.raises(ShapeError):
        distribution_loss([0.5, 0.5], [1.0])


@settings(max_examples=1000)
@given(
    arrays(np.float64, 5, elements=st.floats(0.01, 1.0)),
    arrays(np.float64, 5, elements=st.floats(0.01, 1.0)),
)
def test_distribution_loss_is_nonnegative(a, b):
    p, q = a / a.sum(), b / b.sum()
    kl = distribution_loss(q, p)
    assert kl >= -1e-12
    if not np.allclose(p, q, rtol=0, atol=1e-9):
        assert kl > 0


def test_conflict_mask_examples():
    vocab = speed_vocab()
    assert not conflict_mask(vocab, snapshot(half_width=6.0)).any()
    agent = stationary_agent(8.0)
    mask = conflict_mask(vocab, snapshot([agent], half_width=6.0))
    oracle = [conflict_with_agent(a, DEFAULT_FOOTPRINT, agent.future, agent.footprint) for a in vocab.actions]
    assert mask.tolist() == oracle
    assert not mask[vocab.stop_index]
    assert mask[SPEEDS >= 4].all()


def test_conflict_mask_grows_with_agent_size():
    vocab = speed_vocab()
    small = conflict_mask(vocab, snapshot([stationary_agent(11.0, fp=Footprint(2.0, 1.0))], half_width=6.0))
    big = conflict_mask(vocab, snapshot([stationary_agent(11.0, fp=Footprint(6.0, 3.0))], half_width=6.0))
    assert np.all(big >= small) and big.sum() > small.sum()


def test_conflict_loss_examples():
    pred = ActionDistribution(np.full(4, 0.25))
    assert conflict_loss(pred, np.zeros(4, bool), 5.0) == 0.0
    assert conflict_loss(pred, [True, True, False, False], 5.0) == pytest.approx(2.5)
    moved = ActionDistribution(np.array([0.15, 0.25, 0.35, 0.25]))
    assert conflict_loss(moved, [True, True, False, False], 5.0) < 2.5
    with pytest.raises(ValidationError):
        conflict_loss(ActionDistribution(np.full(4, 0.25), index_of_gt=3), [False, False, False, True], 5.0)


def _frames(vocab, n=4, seed=0):
    rng = np.random.default_rng(seed)
    snaps = [snapshot([stationary_agent(rng.uniform(15, 30))], speed=rng.uniform(2, 8), frame_id=f"f/{i}") for i in range(n)]
    gts = [straight(rng.uniform(1, 6)) for _ in range(n)]
    return snaps, np.stack(gts)


def test_train_step_switching_off_conflict_term():
    vocab = speed_vocab()
    cfg = small_config(vocab)
    snaps, gts = _frames(vocab)
    store = build_params(cfg)
    _, report = train_step(list(zip(snaps, gts)), vocab, store, TrainConfig(lambda_conflict=0.0), cfg)
    assert report["loss_conflict"] == 0.0
    assert set(report) == {"step", "loss_total", "loss_dist", "loss_conflict", "grad_norm"}


def test_train_step_is_deterministic():
    vocab = speed_vocab()
    cfg = small_config(vocab)
    frames = prepare_frames(*_frames(vocab), vocab, tau=0.5)
    runs = []
    for _ in range(2):
        store = build_params(cfg, seed=3)
        losses = [train_step(frames, vocab, store, TrainConfig(lr=3e-3), cfg)[1]["loss_total"] for _ in range(5)]
        runs.append(losses)
    assert runs[0] == runs[1]


def test_single_frame_overfit():
    vocab = speed_vocab([0.0, 5.0, 10.0, 14.0])
    cfg = small_config(vocab)
    s = snapshot(speed=6.0)
    frames = prepare_frames([s], straight(7.5)[None], vocab, tau=0.5)
    assert frames.targets[0, -1] > 0.999  # every vocabulary action is far from the gt
    store = build_params(cfg)
    tc = TrainConfig(lr=3e-3, lambda_conflict=0.0)
    for _ in range(500):
        _, report = train_step(frames, vocab, store, tc, cfg)
    assert report["loss_dist"] < 0.05


def test_non_finite_loss_names_frame():
    vocab = speed_vocab()
    cfg = small_config(vocab)
    good = snapshot(frame_id="good/0")
    bad = SceneSnapshot(good.map, ego=EgoObservation(speed=float("nan")), navigation=good.navigation, frame_id="bad/7")
    with pytest.raises(NonFiniteError, match="bad/7"):
        train_step([(good, straight(3.0)), (bad, straight(3.0))], vocab, build_params(cfg), TrainConfig(), cfg)
    with pytest.raises(ValidationError):
        train_step([], vocab, build_params(cfg), TrainConfig(), cfg)


def test_train_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(tau=0.0)
    with pytest.raises(ConfigError):
        TrainConfig(lambda_conflict=-1.0)
    with pytest.raises(ConfigError):
        TrainConfig(ablate=("radar",))


def test_argmax_selection():
    vocab = speed_vocab()
    onehot = np.full(8, 1e-9)
    onehot[5] = 1 - 7e-9
    assert np.array_equal(select_action_argmax(ActionDistribution(onehot), vocab), vocab.actions[5])
    assert np.array_equal(select_action_argmax(action_distribution(np.zeros(8)), vocab), vocab.actions[0])
    z = np.random.default_rng(2).normal(size=8)
    assert action_distribution(z).argmax() == action_distribution(3.7 * z).argmax()
    with pytest.raises(ShapeError):
        select_action_argmax(action_distribution(np.zeros(9)), vocab)


def _three_action_case():
    # fast (hits an agent at 12 m), slow (stops short), stop
    vocab = PlanningVocabulary(np.stack([straight(10.0), straight(2.0), np.zeros((6, 2))]))
    return vocab, ActionDistribution(np.array([0.6, 0.3, 0.1]))


def test_topk_passes_through_without_rules():
    vocab, dist = _three_action_case()
    traj, idx, top = select_topk_with_rules(dist, vocab, snapshot(half_width=6.0), K=3)
    assert idx == 0 and top.tolist() == [0, 1, 2]
    assert np.array_equal(traj, select_action_argmax(dist, vocab))


def test_topk_skips_conflicting_proposal():
    vocab, dist = _three_action_case()
    s = snapshot([stationary_agent(12.0)], half_width=6.0)
    assert conflict_mask(vocab, s).tolist() == [True, False, False]
    _, idx, _ = select_topk_with_rules(dist, vocab, s, K=2)
    assert idx == 1


def test_topk_falls_back_to_stop():
    vocab, dist = _three_action_case()
    s = snapshot([stationary_agent(12.0)], half_width=6.0)
    traj, idx, _ = select_topk_with_rules(dist, vocab, s, K=1)
    assert idx == vocab.stop_index == 2
    assert np.array_equal(traj, np.zeros((6, 2)))
    with pytest.raises(ConfigError):
        select_topk_with_rules(dist, vocab, s, K=0)


def test_topk_respects_red_light_and_stop_sign():
    vocab, dist = _three_action_case()
    _, idx, _ = select_topk_with_rules(dist, vocab, snapshot([], [light(10.0, "red")], half_width=6.0), K=3)
    assert idx == 1
    _, idx, _ = select_topk_with_rules(dist, vocab, snapshot([], [light(10.0, "green")], half_width=6.0), K=3)
    assert idx == 0
    sign = light(10.0, kind="stop_sign", eid="S")
    _, idx, _ = select_topk_with_rules(dist, vocab, snapshot([], [sign], half_width=6.0), K=3)
    assert idx == 1
    _, idx, _ = select_topk_with_rules(dist, vocab, snapshot([], [sign], half_width=6.0), K=3, cleared_signs={"S"})
    assert idx == 0


@settings(max_examples=50)
@given(st.integers(0, 10_000))
def test_topk_never_returns_conflicting_action(seed):
    rng = np.random.default_rng(seed)
    vocab = speed_vocab(np.concatenate([[0.0], rng.uniform(0.5, 14, 11)]))
    s = random_snapshot(rng)
    dist = action_distribution(rng.normal(size=vocab.N) * 3)
    mask = conflict_mask(vocab, s)
    _, idx, _ = select_topk_with_rules(dist, vocab, s, K=int(rng.integers(1, 12)))
    assert not mask[idx] or idx == vocab.stop_index


@given(st.integers(1, 50), st.integers(1, 20), st.integers(0, 30), st.integers(0, 5))
def test_batch_indices_cover_each_epoch(n, batch, step, seed):
    idx = batch_indices(n, batch, step, seed)
    assert len(idx) == batch and idx.min() >= 0 and idx.max() < n
    # the first ceil(n / batch) steps walk through one whole permutation
    flat = np.concatenate([batch_indices(n, batch, k, seed) for k in range(-(-n // batch))])
    assert np.array_equal(np.sort(flat[:n]), np.arange(n))
    assert np.array_equal(batch_indices(n, batch, step, seed), idx)


def _planner(vocab, steps, **kw):
    return ProbabilisticPlanner(vocabulary=vocab, d=16, heads=2, depth=1, ffn=32, lr=3e-3, batch_size=3, steps=steps, **kw)


def test_estimator_api():
    vocab = speed_vocab()
    snaps, gts = _frames(vocab, 6)
    est = _planner(vocab, 5).fit(snaps, gts)
    proba = est.predict_proba(snaps)
    assert proba.shape == (6, 8) and np.allclose(proba.sum(1), 1)
    assert est.predict(snaps).shape == (6, 6, 2)
    assert est.predict_indices(snaps).tolist() == proba.argmax(1).tolist()
    assert isinstance(est.score(snaps, gts), float)
    assert clone(est).get_params()["steps"] == 5
    est.set_params(inference="topk", top_k=3)
    assert est.predict(snaps).shape == (6, 6, 2)
    with pytest.raises(ConfigError):
        est.set_params(inference="beam").predict_indices(snaps)


def test_warm_start_resume_matches_uninterrupted_run():
    vocab = speed_vocab()
    snaps, gts = _frames(vocab, 7)
    full = _planner(vocab, 10).fit(snaps, gts)
    part = _planner(vocab, 6, warm_start=True).fit(snaps, gts)
    part.set_params(steps=4).fit(snaps, gts)
    assert part.n_steps_ == full.n_steps_ == 10
    for k in full.params_:
        assert torch.equal(full.params_[k], part.params_[k])
    assert [r["loss_total"] for r in part.loss_history_] == [r["loss_total"] for r in full.loss_history_]


def test_mean_regressor_averages_identical_scenes():
    s = snapshot([stationary_agent(20.0)])
    other = snapshot([stationary_agent(40.0)], speed=9.0)
    reg = MeanTrajectoryRegressor().fit([s, s, other], np.stack([straight(2.0), straight(4.0), straight(9.0)]))
    assert np.allclose(reg.predict([s])[0], straight(3.0))
    assert np.allclose(reg.predict([other])[0], straight(9.0))
    near = snapshot([stationary_agent(39.0)], speed=8.8)
    assert np.allclose(reg.predict([near])[0], straight(9.0))
