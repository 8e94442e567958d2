import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lapobench.audit import Sigma
from lapobench.envlib import make_builtin_env, sample_states, sample_transitions
from lapobench.numcore import one_hot
from lapobench.objective import FdmModel, TrainConfig
from lapobench.pipeline import (
    RESULT_COLUMNS, ContinuousConfig, ExactPushforwardPolicy, PipelineResult, PolicyConfig,
    behavior_cloning_baseline, composed_divergence, fit_classifier, latent_ablation_gap, linear_probe_r2,
    probe_r2, pushforward, run_counterexample, run_pipeline, stage2_train_policy, stage3_fit_head,
    subseed, total_variation, train_continuous, write_result_csv,
)


def held_out_tv(policy, target_fn, env, seed=5):
    xs = sample_states(env, 1000, np.random.default_rng(seed))
    return float(total_variation(policy.probs(xs), target_fn(xs)).mean())


def test_subseed_is_stable_and_distinct():
    assert subseed(3, 1) == subseed(3, 1)
    assert len({subseed(3, t) for t in range(20)}) == 20


@pytest.mark.parametrize("env_name,n_a", [("quadrant4", 40), ("affine8", 80)])
def test_oracle_everything_pipeline(env_name, n_a, q4_oracle, a8_oracle):
    env = make_builtin_env(env_name)
    idm = (q4_oracle if env_name == "quadrant4" else a8_oracle)[0]
    head = stage3_fit_head(ExactPushforwardPolicy(env, idm), idm, env, n_a, seed=0)
    assert head.divergence <= 0.02 and head.unmapped_mass == 0.0 and head.flags == []
    assert head.sigma.mapping == {a: a for a in range(env.k)}


def test_uniform_expert_policy_is_uniform(quadrant4, q4_oracle):
    policy = stage2_train_policy(quadrant4, q4_oracle[0], 10_000, PolicyConfig(seed=1))
    assert held_out_tv(policy, lambda xs: np.full((len(xs), 4), 0.25), quadrant4) <= 0.05


@pytest.mark.slow
def test_oracle_labels_recover_smooth_expert(affine8, a8_oracle):
    idm = a8_oracle[0]
    policy = stage2_train_policy(affine8, idm, 20_000, PolicyConfig(seed=1))
    assert held_out_tv(policy, ExactPushforwardPolicy(affine8, idm).probs, affine8) <= 0.05


def test_size_errors(quadrant4, q4_oracle):
    with pytest.raises(ValueError):
        stage2_train_policy(quadrant4, q4_oracle[0], 0, PolicyConfig())
    with pytest.raises(ValueError):
        behavior_cloning_baseline(quadrant4, 0, PolicyConfig())
    with pytest.raises(ValueError):
        stage3_fit_head(ExactPushforwardPolicy(quadrant4, q4_oracle[0]), q4_oracle[0], quadrant4, 0, 0)
    with pytest.raises(ValueError):
        fit_classifier(np.zeros((0, 2)), np.zeros(0, int), 4, PolicyConfig())


def test_partial_sigma_counts_unmapped_mass(quadrant4, q4_oracle):
    idm = q4_oracle[0]
    head = stage3_fit_head(ExactPushforwardPolicy(quadrant4, idm), idm, quadrant4, 1, seed=0)
    assert len(head.sigma.mapping) == 1
    assert head.unmapped_mass == pytest.approx(0.75)
    assert head.divergence == pytest.approx(0.75)
    assert any("unmapped" in f for f in head.flags) and any("every action" in f for f in head.flags)


def test_pushforward_through_partial_map():
    probs = np.array([[0.1, 0.2, 0.3, 0.4]])
    out, unmapped = pushforward(probs, Sigma({0: 1, 2: 1}), 2)
    assert np.allclose(out, [[0.0, 0.4]]) and np.allclose(unmapped, [0.6])


def test_deterministic_expert_divergence_is_error_rate():
    env = make_builtin_env("det-policy")
    xs = sample_states(env, 1000, np.random.default_rng(subseed(7, 30)))
    truth = env.policy_probs(xs).argmax(axis=1)
    wrong = np.arange(1000) % 5 == 0
    guess = np.where(wrong, (truth + 1) % 4, truth)
    table = dict(zip(map(tuple, xs), guess))
    fn = lambda s: (one_hot(np.array([table[tuple(r)] for r in s]), 4), np.zeros(len(s)))
    assert composed_divergence(env, fn, 7) == pytest.approx(wrong.mean(), abs=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 8))
def test_divergence_in_unit_interval(seed, k_hat):
    env = make_builtin_env("affine8")
    rng = np.random.default_rng(seed)
    mapping = {lat: int(rng.integers(0, 8)) for lat in range(k_hat) if rng.uniform() < 0.7}

    def fn(xs):
        logits = rng.normal(size=(len(xs), k_hat)) * 3
        p = np.exp(logits) / np.exp(logits).sum(axis=1, keepdims=True)
        return pushforward(p, Sigma(mapping), 8)

    assert 0.0 <= composed_divergence(env, fn, seed, n_test=50) <= 1.0


def test_behavior_cloning_converges_with_many_labels(affine8):
    assert behavior_cloning_baseline(affine8, 10_000, PolicyConfig(), seed=3) <= 0.05


def test_fit_classifier_is_deterministic(rng):
    xs = rng.uniform(size=(200, 2))
    ys = (xs[:, 0] > 0.5).astype(int)
    a = fit_classifier(xs, ys, 2, PolicyConfig(seed=4, max_iter=50))
    b = fit_classifier(xs, ys, 2, PolicyConfig(seed=4, max_iter=50))
    assert np.array_equal(a.probs(xs), b.probs(xs))
    assert np.mean(a.probs(xs).argmax(axis=1) == ys) >= 0.95


def test_small_pipeline_roundtrip_and_determinism(tmp_path, quadrant4):
    cfg = TrainConfig(k_hat=4, steps=300, eval_every=100)
    pcfg = PolicyConfig(max_iter=50)
    a = run_pipeline(quadrant4, 2000, [4, 40], cfg, pcfg, seed=3, audit_samples=500)
    b = run_pipeline(quadrant4, 2000, [4, 40], cfg, pcfg, seed=3, audit_samples=500)
    assert a.to_json() == b.to_json()
    assert PipelineResult.from_dict(json.loads(a.to_json())) == a
    for value in list(a.divergence.values()) + list(a.baseline_divergence.values()):
        assert 0.0 <= value <= 1.0
    rows = a.csv_rows()
    assert [(r["N_a"], r["method"]) for r in rows] == [(4, "lapo"), (4, "bc"), (40, "lapo"), (40, "bc")]
    write_result_csv(tmp_path / "r.csv", rows)
    assert (tmp_path / "r.csv").read_text().splitlines()[0] == ",".join(RESULT_COLUMNS)


def test_ablation_gap(quadrant4, q4_oracle):
    data = sample_transitions(quadrant4, 1000, 2, labeled=False)
    idm, fdm = q4_oracle
    assert latent_ablation_gap(idm, fdm, data, 0) > 0.1
    blind = FdmModel.init(2, 2, 4, seed=0)
    blind.net.layers[0].weight[2:] = 0.0  # rows fed by the latent one-hot
    assert latent_ablation_gap(idm, blind, data, 0) == 0.0


def test_probes_on_copied_targets(rng):
    targets = rng.uniform(size=(2000, 2))
    assert probe_r2(targets, targets, 0) >= 0.99
    assert linear_probe_r2(targets, targets, 0) == pytest.approx(1.0)
    assert probe_r2(rng.uniform(size=(2000, 2)), targets, 0) < 0.2


def test_continuous_training_is_deterministic(quadrant4):
    data = sample_transitions(quadrant4, 1000, 0, labeled=False)
    cfg = ContinuousConfig(steps=100, hidden=(16,), seed=2)
    (i1, _, r1), (i2, _, r2) = train_continuous(data, cfg), train_continuous(data, cfg)
    assert r1 == r2 and np.array_equal(i1.encode(data.xs, data.xs_next), i2.encode(data.xs, data.xs_next))


def test_small_counterexample_reports():
    ce = run_counterexample("continuous-latent", 0, n=2000, continuous_cfg=ContinuousConfig(steps=300),
                            audit_samples=1000)
    assert set(ce.details) == {"probe_r2", "linear_probe_r2"} and json.loads(ce.to_json())["name"] == ce.name
    det = run_counterexample("deterministic-policy", 0, n=2000,
                             train_cfg=TrainConfig(k_hat=4, steps=200, eval_every=100), audit_samples=500)
    assert det.env == "det-policy" and "ablation_gap" in det.details
    with pytest.raises(ValueError):
        run_counterexample("vq", 0)
