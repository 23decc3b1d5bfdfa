import math

import numpy as np
import pytest

from laplass.dynamics import ControlBounds, InitialDistribution
from laplass.engine import LATENT, PlanProblem
from laplass.geometry import EnvBounds, Hyperrectangle
from laplass.learning import (
    LearnedDynamics,
    LearnedModel,
    LinearLatentModel,
    TrainConfig,
    TrajectoryDataset,
    VaeModel,
    decode,
    decode_controls,
    encode,
    encode_problem,
    excitation_controls,
    load_model,
    read_csv,
    save_model,
    train_linear_latent,
    train_vae,
    vae_loss,
    write_csv,
)
from laplass.learning import mlp as nn
from laplass.learning.train import IllConditionedWarning, init_models
from laplass.learning.vae import decode_jacobian, encode_jacobian, model_params
from oracles import loss_gradient_errors


def linear_dataset(rng, A, B, n_traj=20, length=15, noise=0.0):
    n, m = B.shape
    states = np.empty((n_traj, length, n))
    controls = rng.uniform(-1, 1, size=(n_traj, length, m))
    for k in range(n_traj):
        x = rng.uniform(-1, 1, size=n)
        for t in range(length):
            states[k, t] = x
            x = A @ x + B @ controls[k, t] + noise * rng.standard_normal(n)
    return TrajectoryDataset(states, controls)


def identity_model(n, m, A=None, B=None):
    A = np.eye(n) if A is None else A
    B = np.zeros((n, m)) if B is None else B
    return LearnedModel(VaeModel.identity(n), VaeModel.identity(m), LinearLatentModel(A, B))


# networks and VAEs


def test_mlp_forward_example():
    net = nn.Mlp([np.array([[1.0, 2.0]]), np.array([[1.0], [-1.0]])], [np.zeros(2), np.array([0.5])], ("tanh", "linear"))
    out = nn.apply(net, np.array([[0.5]]))
    assert out[0, 0] == pytest.approx(math.tanh(0.5) - math.tanh(1.0) + 0.5, abs=1e-15)


def test_mlp_rejects_bad_shapes():
    with pytest.raises(ValueError):
        nn.Mlp([np.ones((2, 3))], [np.ones(2)], ("linear",))
    with pytest.raises(ValueError):
        nn.Mlp([np.ones((2, 3))], [np.ones(3)], ("relu",))


def test_identity_vae_round_trip():
    vae = VaeModel.identity(3)
    x = np.array([0.3, -1.2, 4.0])
    np.testing.assert_allclose(encode(vae, x), x, atol=1e-15)
    np.testing.assert_allclose(decode(vae, x), x, atol=1e-15)
    np.testing.assert_allclose(encode_jacobian(vae, x), np.eye(3), atol=1e-15)
    np.testing.assert_allclose(decode_jacobian(vae, x), np.eye(3), atol=1e-15)


def test_normalization_applies_before_encoder():
    enc = nn.linear_mlp(np.array([[1.0, 0.0]]), np.array([0.0, math.log(0.25)]))
    dec = nn.linear_mlp(np.array([[1.0]]), np.zeros(1))
    vae = VaeModel(enc, dec, 1, 1, [1.0], [2.0])
    assert encode(vae, np.array([3.0]))[0] == pytest.approx(1.0)  # (3 - 1) / 2
    assert decode(vae, np.array([1.0]))[0] == pytest.approx(3.0)
    assert encode_jacobian(vae, np.array([3.0]))[0, 0] == pytest.approx(0.5)
    assert decode_jacobian(vae, np.array([1.0]))[0, 0] == pytest.approx(2.0)


def test_sampled_encoding_has_posterior_spread(rng):
    enc = nn.linear_mlp(np.array([[1.0, 0.0]]), np.array([0.0, math.log(0.25)]))
    vae = VaeModel(enc, nn.linear_mlp(np.eye(1), np.zeros(1)), 1, 1, [0.0], [1.0])
    z = encode(vae, np.full((100_000, 1), 0.7), "sample", rng)
    assert z.mean() == pytest.approx(0.7, abs=0.01)
    assert z.std() == pytest.approx(0.5, abs=0.01)
    with pytest.raises(ValueError):
        encode(vae, np.array([0.7]), "sample")


def test_jacobians_match_finite_differences(rng):
    cfg = TrainConfig(latent_x=2, latent_u=2, hidden=(6,))
    ds = linear_dataset(rng, 0.9 * np.eye(3), rng.normal(size=(3, 2)))
    vae_x, _, _ = init_models(ds, cfg, rng)
    x = rng.normal(size=3)
    z = rng.normal(size=2)
    h = 1e-6
    fd_enc = np.column_stack([(encode(vae_x, x + h * e) - encode(vae_x, x - h * e)) / (2 * h) for e in np.eye(3)])
    fd_dec = np.column_stack([(decode(vae_x, z + h * e) - decode(vae_x, z - h * e)) / (2 * h) for e in np.eye(2)])
    np.testing.assert_allclose(encode_jacobian(vae_x, x), fd_enc, rtol=1e-6, atol=1e-8)
    np.testing.assert_allclose(decode_jacobian(vae_x, z), fd_dec, rtol=1e-6, atol=1e-8)


def gradient_problem(rng):
    cfg = TrainConfig(latent_x=2, latent_u=2, hidden=(5,), m_pred=3, w_kl=0.1, w_pred=0.7)
    ds = linear_dataset(rng, 0.9 * np.eye(2), rng.normal(size=(2, 2)), n_traj=3, length=6)
    vae_x, vae_u, latent = init_models(ds, cfg, rng)
    latent.A[...] = 0.9 * np.eye(2) + 0.05 * rng.normal(size=(2, 2))
    latent.B[...] = 0.3 * rng.normal(size=(2, 2))
    xs, us = ds.windows(cfg.m_pred)
    return vae_x, vae_u, latent, xs, us, cfg


@pytest.mark.parametrize("stochastic", [False, True])
def test_loss_gradients_match_finite_differences(rng, stochastic):
    errors = loss_gradient_errors(*gradient_problem(rng), noise_seed=99 if stochastic else None, rng=rng, n_checks=60)
    assert errors.max() < 1e-4


def test_loss_of_identity_model_on_static_data_is_kl_only():
    # x' = x with identity VAEs: reconstruction and prediction are exact
    states = np.repeat(np.linspace(-1, 1, 5)[:, None, None], 6, axis=1)
    ds = TrajectoryDataset(states, np.zeros((5, 6, 1)))
    cfg = TrainConfig(m_pred=2, w_kl=0.0)
    model = identity_model(1, 1)
    xs, us = ds.windows(2)
    loss, grads = vae_loss(xs, us, model.vae_x, model.vae_u, model.latent, cfg)
    assert loss == pytest.approx(0.0, abs=1e-20)
    assert np.abs(grads.A).max() == pytest.approx(0.0, abs=1e-20)


# training


def test_training_is_deterministic_and_reduces_loss(rng):
    ds = linear_dataset(rng, 0.95 * np.eye(2), np.array([[0.1, 0.0], [0.0, 0.1]]), n_traj=8, length=10)
    cfg = TrainConfig(epochs=30, batch_size=32, learning_rate=3e-3, hidden=(8,), latent_x=2, latent_u=2)
    a = train_vae(ds, cfg)
    b = train_vae(ds, cfg)
    assert a.loss_curve == b.loss_curve
    for pa, pb in zip(model_params(a.vae_x, a.vae_u, a.latent), model_params(b.vae_x, b.vae_u, b.latent)):
        np.testing.assert_array_equal(pa, pb)
    assert a.loss_curve[-1] < 0.5 * a.loss_curve[0]
    c = train_vae(ds, TrainConfig(**{**cfg.to_dict(), "seed": 1}))
    assert c.loss_curve != a.loss_curve


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(epochs=0)
    with pytest.raises(ValueError):
        TrainConfig(learning_rate=0.0)
    with pytest.raises(ValueError):
        TrainConfig(w_kl=-1.0)
    assert TrainConfig(hidden=[3, 4]).to_dict()["hidden"] == [3, 4]


@pytest.mark.parametrize("m_pred", [1, 3])
def test_linear_latent_recovers_planted_dynamics(rng, m_pred):
    A = np.array([[0.9, 0.1, 0.0], [-0.1, 0.8, 0.05], [0.0, 0.2, 0.7]])
    B = np.array([[0.5, 0.0], [0.1, 0.3], [0.0, -0.4]])
    ds = linear_dataset(rng, A, B)
    fit = train_linear_latent(ds, VaeModel.identity(3), VaeModel.identity(2), TrainConfig(m_pred=m_pred))
    np.testing.assert_allclose(fit.A, A, atol=1e-4)
    np.testing.assert_allclose(fit.B, B, atol=1e-4)


def test_linear_latent_one_step_solves_ridge_normal_equations(rng):
    ds = linear_dataset(rng, 0.8 * np.eye(2), np.eye(2), noise=0.05)
    lv = math.log(0.01)
    enc_x = nn.linear_mlp(np.hstack([np.eye(2), np.zeros((2, 2))]), np.r_[0.0, 0.0, lv, lv])
    vae_x = VaeModel(enc_x, nn.linear_mlp(np.eye(2), np.zeros(2)), 2, 2, np.zeros(2), np.ones(2))
    vae_u = VaeModel.identity(2)
    fit = train_linear_latent(ds, vae_x, vae_u, TrainConfig(m_pred=1))
    xs, us = ds.windows(1)
    reg = np.hstack([xs[:, 0], us[:, 0]])
    penalty = np.r_[np.full(2, 0.01 * len(xs)), np.full(2, math.exp(-40.0) * len(xs))]
    K = np.linalg.solve(reg.T @ reg + np.diag(penalty), reg.T @ xs[:, 1]).T
    np.testing.assert_allclose(fit.K, K, rtol=1e-10, atol=1e-12)


def test_linear_latent_warns_on_unexcited_controls(rng):
    ds = linear_dataset(rng, 0.9 * np.eye(2), np.eye(2))
    ds = TrajectoryDataset(ds.states, np.zeros_like(ds.controls))
    with pytest.warns(IllConditionedWarning):
        train_linear_latent(ds, VaeModel.identity(2), VaeModel.identity(2), TrainConfig(m_pred=1))


def test_excitation_controls_stay_in_bounds(rng):
    bounds = ControlBounds([0.0, -1.0], [3.0, 1.0])
    u = excitation_controls(bounds, 200, rng)
    assert u.shape == (200, 2)
    assert np.all(u >= bounds.lower) and np.all(u <= bounds.upper)
    with pytest.raises(ValueError):
        excitation_controls(bounds, 5, rng, smoothing=1.0)


# data files


def test_dataset_windows_and_counts():
    states = np.arange(2 * 4 * 1, dtype=float).reshape(2, 4, 1)
    ds = TrajectoryDataset(states, np.zeros((2, 4, 1)))
    assert ds.n_transitions == 6
    xs, us = ds.windows(2)
    assert xs.shape == (4, 3, 1) and us.shape == (4, 2, 1)
    np.testing.assert_array_equal(xs[:, :, 0], [[0, 1, 2], [1, 2, 3], [4, 5, 6], [5, 6, 7]])
    with pytest.raises(ValueError):
        ds.windows(4)


def test_csv_round_trip_is_exact(tmp_path, rng):
    ds = TrajectoryDataset(rng.normal(size=(3, 5, 2)), rng.normal(size=(3, 5, 2)))
    path = tmp_path / "d.csv"
    write_csv(ds, path)
    back = read_csv(path)
    np.testing.assert_array_equal(back.states, ds.states)
    np.testing.assert_array_equal(back.controls, ds.controls)


def test_csv_skips_comments_and_accepts_any_row_order(tmp_path):
    path = tmp_path / "d.csv"
    path.write_text("# generated\ntraj_id,t,x0,u0\n0,1,2.0,0.5\n# note\n0,0,1.0,0.25\n")
    ds = read_csv(path)
    np.testing.assert_array_equal(ds.states[0, :, 0], [1.0, 2.0])
    np.testing.assert_array_equal(ds.controls[0, :, 0], [0.25, 0.5])


@pytest.mark.parametrize(
    "text, fragment",
    [
        ("", "empty"),
        ("id,t,x0,u0\n", "header"),
        ("traj_id,t,u0,x0\n0,0,1,1\n", "columns"),
        ("traj_id,t,x0,u0\n# c\n0,0,1\n", ":3: expected 4 fields"),
        ("traj_id,t,x0,u0\n0,0,1,1\n0,0,1,1\n", "duplicate"),
        ("traj_id,t,x0,u0\n0,0,1,1\n0,2,1,1\n", "steps"),
    ],
)
def test_csv_errors(tmp_path, text, fragment):
    path = tmp_path / "bad.csv"
    path.write_text(text)
    with pytest.raises(ValueError, match=fragment):
        read_csv(path)


def test_model_round_trip(tmp_path, rng):
    ds = linear_dataset(rng, 0.9 * np.eye(2), np.eye(2), n_traj=3, length=5)
    cfg = TrainConfig(latent_x=2, latent_u=2, hidden=(4,), epochs=2)
    res = train_vae(ds, cfg)
    model = LearnedModel(res.vae_x, res.vae_u, res.latent, cfg.to_dict(), res.loss_curve)
    save_model(model, tmp_path / "m")
    back = load_model(tmp_path / "m")
    for pa, pb in zip(model_params(model.vae_x, model.vae_u, model.latent), model_params(back.vae_x, back.vae_u, back.latent)):
        np.testing.assert_array_equal(pa, pb)  # training leaves float32-representable values
    assert back.config == cfg.to_dict()
    assert back.loss_curve == res.loss_curve
    save_model(back, tmp_path / "m2")
    assert (tmp_path / "m" / "params.bin").read_bytes() == (tmp_path / "m2" / "params.bin").read_bytes()


def test_load_model_rejects_truncated_blob(tmp_path):
    save_model(identity_model(2, 1), tmp_path / "m")
    blob = tmp_path / "m" / "params.bin"
    blob.write_bytes(blob.read_bytes()[:-4])
    with pytest.raises(ValueError, match="truncated"):
        load_model(tmp_path / "m")


# latent planning helpers


def small_problem():
    return PlanProblem(
        initial=InitialDistribution.uniform_box([-0.1, -0.1], [0.1, 0.1]),
        goal=Hyperrectangle([0.9, 0.4], [1.1, 0.6]).to_polytope(),
        obstacles=(),
        env=EnvBounds(Hyperrectangle([-0.5, -0.5], [1.5, 1.5])),
        control_bounds=ControlBounds([0.0, -1.0], [3.0, 1.0]),
        horizon=5,
        delta=0.1,
        mode=LATENT,
    )


def test_encode_problem_with_identity_model_is_the_real_problem():
    problem = small_problem()
    lp = encode_problem(problem, identity_model(2, 2, B=np.eye(2)))
    np.testing.assert_allclose(lp.x0, [0.0, 0.0], atol=1e-15)
    np.testing.assert_allclose(lp.goal.lower, [0.9, 0.4])
    np.testing.assert_allclose(lp.goal.upper, [1.1, 0.6])
    np.testing.assert_allclose(lp.control_bounds.lower, [0.0, -1.0])
    np.testing.assert_allclose(lp.control_bounds.upper, [3.0, 1.0])
    env_box, steps = lp.state_boxes[0]
    np.testing.assert_allclose(env_box.lower, [-0.5, -0.5])
    assert steps == (1, 2, 3, 4, 5)
    with pytest.raises(ValueError):
        encode_problem(problem, identity_model(2, 2), constraint_mode="other")


def test_decode_controls_clamps_and_counts():
    bounds = ControlBounds([0.0, -1.0], [3.0, 1.0])
    out = decode_controls([[1.0, 0.5], [4.0, -2.0], [-1.0, 0.0]], VaeModel.identity(2), bounds)
    np.testing.assert_array_equal(out.controls, [[1.0, 0.5], [3.0, -1.0], [0.0, 0.0]])
    np.testing.assert_array_equal(out.clamp_counts, [0, 2, 1])
    with pytest.raises(ValueError):
        decode_controls([[1.0, 2.0, 3.0]], VaeModel.identity(2), bounds)


def test_learned_dynamics_with_identity_vaes_is_the_linear_map(rng):
    A = np.array([[1.0, 0.1], [0.0, 1.0]])
    B = np.array([[0.0], [0.1]])
    sim = LearnedDynamics(identity_model(2, 1, A, B))
    x = np.array([1.0, 2.0])
    np.testing.assert_allclose(sim.step(x, [3.0], rng), A @ x + B @ [3.0], atol=1e-8)
    paths = sim.sample_trajectories(np.zeros((4, 2)), np.ones((3, 1)), rng)
    assert paths.shape == (4, 4, 2)
    np.testing.assert_allclose(paths[-1, 0], [0.03, 0.3], atol=1e-8)  # (0, .1), (.01, .2), (.03, .3)
