import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lapobench.envlib import TransitionSet, sample_transitions
from lapobench.numcore import finite_difference_gradient, relative_error
from lapobench.objective import (
    FdmModel, IdmModel, TrainConfig, TrainingDiverged, encode, hard_label, init_models, load_models,
    loss_rows, loss_terms, objective_gradients, save_models, total_objective, train, write_trace_csv,
)

from _runs import quadrant4_data, quadrant4_run


def dirac_idm(k_hat, atom, d=2):
    idm = IdmModel.init(d, d, k_hat, seed=0)
    for layer in idm.net.layers:
        layer.weight[:] = 0.0
    idm.net.layers[-1].bias[:] = 0.0
    idm.net.layers[-1].bias[atom] = 1e3
    return idm


def test_uniform_idm_has_entropy_log4(quadrant4):
    idm, fdm = init_models(2, 2, TrainConfig(k_hat=4))
    idm.net.layers[-1].weight[:] = 0.0
    batch = sample_transitions(quadrant4, 200, 0, labeled=False)
    _, ent = loss_terms(idm, fdm, batch)
    assert abs(ent - np.log(4)) <= 1e-12


def test_oracle_pair_has_zero_loss(quadrant4, q4_oracle):
    idm, fdm = q4_oracle
    batch = sample_transitions(quadrant4, 300, 1, labeled=False)
    recon, ent = loss_terms(idm, fdm, batch)
    assert recon <= 1e-6 and ent <= 1e-6


def test_constant_decoder_reconstruction(quadrant4):
    idm = dirac_idm(4, atom=2)
    fdm = FdmModel.init(2, 2, 4, seed=0)
    for layer in fdm.net.layers:
        layer.weight[:] = 0.0
        layer.bias[:] = 0.0
    batch = sample_transitions(quadrant4, 500, 2, labeled=False)
    recon, ent = loss_terms(idm, fdm, batch)
    assert abs(recon - np.mean(((batch.xs_next - 0.5) ** 2).sum(axis=1))) <= 1e-12
    assert ent == 0.0


def test_total_objective_combines_terms(quadrant4):
    idm, fdm = init_models(2, 2, TrainConfig(k_hat=4, seed=3))
    batch = sample_transitions(quadrant4, 100, 0, labeled=False)
    r, e = loss_terms(idm, fdm, batch)
    assert total_objective(idm, fdm, batch, 0.3) == pytest.approx(r + 0.3 * e, abs=1e-15)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from([1, 3, 4, 8]))
def test_loss_terms_nonnegative(seed, k_hat):
    from lapobench.envlib import make_builtin_env
    env = make_builtin_env("affine8")
    idm, fdm = init_models(2, 2, TrainConfig(k_hat=k_hat, seed=seed, hidden=(8,)))
    batch = sample_transitions(env, 64, seed)
    recon, ent = loss_rows(idm, fdm, batch.xs, batch.xs_next)
    assert np.all(recon >= 0) and np.all(ent >= 0)


def test_dimension_mismatch_rejected(quadrant4):
    idm = IdmModel.init(2, 2, 4)
    fdm = FdmModel.init(2, 2, 5)
    batch = sample_transitions(quadrant4, 10, 0)
    with pytest.raises(ValueError):
        loss_terms(idm, fdm, batch)


def _flat_objective_check(mode, seed):
    rng0 = np.random.default_rng(seed)
    idm, fdm = init_models(2, 2, TrainConfig(k_hat=4, seed=seed, hidden=(6,)))
    xs, xs_next = rng0.uniform(size=(5, 2)), rng0.uniform(size=(5, 2))
    beta = 0.07

    def loss(_net=None):
        r, e, _, _ = objective_gradients(idm, fdm, xs, xs_next, beta, mode,
                                         np.random.default_rng(seed + 1), temperature=0.7)
        return r + beta * e

    _, _, g_idm, g_fdm = objective_gradients(idm, fdm, xs, xs_next, beta, mode,
                                             np.random.default_rng(seed + 1), temperature=0.7)
    worst = 0.0
    for net, grad in ((idm.net, g_idm), (fdm.net, g_fdm)):
        numeric = finite_difference_gradient(net, loss)
        worst = max(worst, max(relative_error(a, b).max() for a, b in zip(grad.arrays(), numeric)))
    return worst


@pytest.mark.parametrize("mode", ["exact-marginal", "relaxed-sample"])
def test_objective_gradient_matches_differences(mode):
    for seed in range(3):
        assert _flat_objective_check(mode, seed) <= 1e-4


def test_zero_steps_returns_initialisation(quadrant4):
    cfg = TrainConfig(k_hat=4, steps=0, seed=5)
    result = train(quadrant4_data(0), cfg)
    idm0, fdm0 = init_models(2, 2, cfg)
    for a, b in zip(result.idm.net.parameters() + result.fdm.net.parameters(),
                    idm0.net.parameters() + fdm0.net.parameters()):
        assert np.array_equal(a, b)
    assert [row["step"] for row in result.trace] == [0]


def test_training_is_seed_deterministic():
    cfg = TrainConfig(k_hat=4, steps=150, eval_every=50, seed=8)
    a, b = train(quadrant4_data(0), cfg), train(quadrant4_data(0), cfg)
    for p, q in zip(a.idm.net.parameters() + a.fdm.net.parameters(),
                    b.idm.net.parameters() + b.fdm.net.parameters()):
        assert np.array_equal(p, q)
    strip = lambda tr: [{k: v for k, v in r.items() if k != "wallclock_ms"} for r in tr]
    assert strip(a.trace) == strip(b.trace)


@pytest.mark.parametrize("mode", ["relaxed-sample", "hard-argmax-ablation"])
def test_sampled_modes_reduce_loss(mode):
    cfg = TrainConfig(k_hat=4, steps=600, eval_every=300, mode=mode, seed=1)
    result = train(quadrant4_data(0), cfg)
    assert result.trace[-1]["reconstruction"] < result.trace[0]["reconstruction"]


def test_nonfinite_data_aborts_with_trace(quadrant4):
    data = sample_transitions(quadrant4, 300, 0, labeled=False)
    bad = TransitionSet(data.xs, data.xs_next.copy(), None, 0)
    bad.xs_next[5] = np.nan
    with pytest.raises(TrainingDiverged) as err:
        train(bad, TrainConfig(k_hat=4, steps=20, batch=300, eval_every=10))
    assert err.value.trace


def test_config_validation():
    for bad in ({"beta": -1.0}, {"k_hat": 0}, {"mode": "vq"}, {"lr": 0.0}, {"steps": -1}):
        with pytest.raises(ValueError):
            TrainConfig(**bad)


def test_beta_schedule_ramps_to_target():
    cfg = TrainConfig(beta=0.05, beta_start=-0.05, beta_warmup=0.3, steps=1000)
    assert cfg.beta_at(0) == -0.05
    assert cfg.beta_at(150) == pytest.approx(0.0)
    assert cfg.beta_at(300) == cfg.beta_at(999) == 0.05


def test_encode_is_a_distribution(quadrant4):
    idm = IdmModel.init(2, 2, 6, seed=2)
    batch = sample_transitions(quadrant4, 100, 0)
    p = encode(idm, batch.xs, batch.xs_next)
    assert np.all(np.abs(p.sum(axis=1) - 1.0) <= 1e-9)
    assert np.array_equal(p, encode(IdmModel.init(2, 2, 6, seed=2), batch.xs, batch.xs_next))
    assert encode(idm, batch.xs[0], batch.xs_next[0]).shape == (6,)


def test_hard_label_rules(quadrant4, q4_oracle):
    batch = sample_transitions(quadrant4, 50, 0)
    assert np.all(hard_label(dirac_idm(4, 3), batch) == 3)
    tie = dirac_idm(4, 1)
    tie.net.layers[-1].bias[2] = 1e3
    assert np.all(hard_label(tie, batch) == 1)
    assert np.array_equal(hard_label(q4_oracle[0], batch), batch.actions)


@pytest.mark.slow
def test_default_training_reaches_near_zero_and_decreases(quadrant4):
    result = quadrant4_run(4, 0)
    assert result.final["total"] <= 1e-3
    totals = np.array([r["total"] for r in result.trace])
    smooth = np.empty_like(totals)
    smooth[0] = totals[0]
    for i in range(1, len(totals)):
        smooth[i] = 0.7 * smooth[i - 1] + 0.3 * totals[i]
    steps = [r["step"] for r in result.trace]
    assert smooth[steps.index(20_000)] < smooth[steps.index(1000)]
    held = sample_transitions(quadrant4, 2000, 77)
    assert np.mean(encode(result.idm, held.xs, held.xs_next).max(axis=1) >= 0.99) >= 0.99


def test_checkpoint_and_trace_roundtrip(tmp_path):
    result = train(quadrant4_data(0), TrainConfig(k_hat=4, steps=20, eval_every=10, seed=4))
    save_models(tmp_path, result)
    idm, fdm = load_models(tmp_path)
    x = np.random.default_rng(0).uniform(size=(5, 2))
    assert np.array_equal(idm.probs(x, x), result.idm.probs(x, x))
    assert np.array_equal(fdm.predict_all(x), result.fdm.predict_all(x))
    write_trace_csv(tmp_path / "trace.csv", result.trace)
    lines = (tmp_path / "trace.csv").read_text().splitlines()
    assert lines[0] == "step,reconstruction,entropy,total,wallclock_ms" and len(lines) == 3
