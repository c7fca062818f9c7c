import math

import numpy as np
import pytest

from contraction_ac import envs
from contraction_ac.numerics import NullSpaceError, fd_jacobian, make_rng, null_space
from contraction_ac.sysid import (
    Dataset,
    DynModel,
    KnownModel,
    b_perp,
    collect_data,
    load_dataset,
    predict,
    pretrain,
    save_dataset,
)


def test_collect_noise_free_follows_reference_controls():
    spec = envs.make_env("car")
    data = collect_data(spec, np.random.default_rng(0), episodes=3, noise_std=np.zeros(2))
    assert np.all(np.abs(data.u) <= 0.75 * spec.u_max + 1e-15)
    # every sample is an exact Euler step under its recorded control
    np.testing.assert_allclose(data.xdot, spec.error(envs.euler_step(spec, data.x, data.u), data.x) / spec.dt,
                               atol=1e-12)


def test_collect_turtlebot_xdot_is_bu():
    spec = envs.make_env("turtlebot")
    data = collect_data(spec, np.random.default_rng(1), episodes=5)
    pred = np.einsum("bij,bj->bi", spec.actuation(data.x), data.u)
    np.testing.assert_allclose(data.xdot, pred, atol=1e-10)


def test_collect_sample_count_bound():
    spec = envs.make_env("car")
    data = collect_data(spec, np.random.default_rng(2), episodes=10)
    assert 0 < len(data) <= 10 * spec.horizon
    assert np.all(np.isfinite(data.x)) and np.all((data.u >= spec.u_min) & (data.u <= spec.u_max))


def test_collect_independent_of_threads():
    spec = envs.make_env("turtlebot")
    a = collect_data(spec, np.random.default_rng(3), episodes=6, threads=1)
    b = collect_data(spec, np.random.default_rng(3), episodes=6, threads=3)
    np.testing.assert_array_equal(a.x, b.x)
    np.testing.assert_array_equal(a.xdot, b.xdot)


def test_collect_rejects_bad_noise():
    spec = envs.make_env("car")
    with pytest.raises(ValueError):
        collect_data(spec, np.random.default_rng(0), episodes=1, noise_std=np.array([-1.0, 0.1]))


def test_dataset_roundtrip(tmp_path):
    spec = envs.make_env("car")
    data = collect_data(spec, np.random.default_rng(4), episodes=2)
    save_dataset(tmp_path / "d.csv", data, {"env": "car", "seed": 4})
    loaded, side = load_dataset(tmp_path / "d.csv")
    np.testing.assert_array_equal(loaded.x, data.x)
    np.testing.assert_array_equal(loaded.u, data.u)
    np.testing.assert_array_equal(loaded.xdot, data.xdot)
    assert side == {"env": "car", "seed": 4}


def test_zero_model_predicts_zero():
    model = DynModel(4, 2)
    f, b = predict(model, np.ones((3, 4)))
    np.testing.assert_array_equal(f, 0.0)
    assert b.shape == (3, 4, 2) and np.all(b == 0.0)


def test_predict_row_major_reshape():
    model = DynModel(3, 2, np.random.default_rng(0), widths=(8,))
    x = np.array([0.1, -0.4, 0.7])
    _, b = model.predict(x)
    np.testing.assert_array_equal(b, model.bnet(x).reshape(3, 2))
    np.testing.assert_array_equal(model.f(x), model.fnet(x))


def test_pretrain_linear_system_realizable():
    rng = np.random.default_rng(5)
    a = rng.standard_normal((3, 3)) * 0.5
    bmat = rng.standard_normal((3, 2))
    x = rng.uniform(-1, 1, (4000, 3))
    u = rng.uniform(-1, 1, (4000, 2))
    data = Dataset(x, u, x @ a.T + u @ bmat.T)
    model = DynModel(3, 2, np.random.default_rng(6), widths=())
    res = pretrain(model, data, rng, batch=256, epochs=200, lr=1e-2, patience=200)
    assert res.val_loss[res.best_epoch] <= 1e-3
    _, b_hat = model.predict(np.zeros(3))
    np.testing.assert_allclose(b_hat, bmat, atol=0.05)


def test_pretrain_rejects_small_data():
    data = Dataset(np.zeros((10, 2)), np.zeros((10, 1)), np.zeros((10, 2)))
    with pytest.raises(ValueError):
        pretrain(DynModel(2, 1), data, np.random.default_rng(0), batch=1024)
    with pytest.raises(ValueError):
        pretrain(DynModel(2, 1), data, np.random.default_rng(0), batch=0)


def test_pretrain_improves_held_out_loss():
    spec = envs.make_env("turtlebot")
    data = collect_data(spec, np.random.default_rng(7), episodes=30)
    model = DynModel(3, 2, np.random.default_rng(8), widths=(32, 32))
    res = pretrain(model, data, np.random.default_rng(9), batch=256, epochs=15)
    assert min(res.val_loss) < res.val_loss[0]
    assert np.median(res.train_loss[len(res.train_loss) // 2 :]) < np.median(res.train_loss[: len(res.train_loss) // 2])


def test_model_save_load(tmp_path):
    model = DynModel(3, 2, np.random.default_rng(1), widths=(8, 8))
    model.save(tmp_path / "dyn", seed=1, step=3)
    assert (tmp_path / "dyn_f.ckpt").exists() and (tmp_path / "dyn_B.ckpt").exists()
    other = DynModel.load(tmp_path / "dyn")
    x = np.random.default_rng(2).standard_normal((5, 3))
    np.testing.assert_array_equal(other.xdot(x, np.ones((5, 2))), model.xdot(x, np.ones((5, 2))))


def test_b_perp_known_models():
    car = KnownModel(envs.make_env("car"))
    bp = b_perp(car, np.array([0.3, -1.0, 0.5, 1.2]))
    np.testing.assert_allclose(bp @ bp.T, np.diag([1.0, 1.0, 0.0, 0.0]), atol=1e-12)
    tb = KnownModel(envs.make_env("turtlebot"))
    np.testing.assert_allclose(np.abs(b_perp(tb, np.array([-1.0, 0.0, 0.0]))[:, 0]), [0, 1, 0], atol=1e-12)


def test_b_perp_full_rank_error():
    model = DynModel(2, 2, np.random.default_rng(0), widths=(4,))
    model.bnet.biases[-1][...] = [1.0, 0.0, 0.0, 1.0]
    with pytest.raises(NullSpaceError):
        b_perp(model, np.zeros(2))


def test_car_model_quality(car_pretrained):
    model, spec, data = car_pretrained["model"], car_pretrained["spec"], car_pretrained["data"]
    x = data.x[np.random.default_rng(0).choice(len(data), 100, replace=False)]
    err = np.linalg.norm(model.f(x) - spec.drift(x), axis=-1)
    assert err.max() <= 0.5
    bp = b_perp(model, x[:1])
    np.testing.assert_allclose(model.b(x[:1])[0].T @ bp[0], 0.0, atol=1e-8)
    np.testing.assert_allclose(bp[0].T @ bp[0], np.eye(spec.n - spec.m), atol=1e-8)
    jac = fd_jacobian(model.f, x[:5])
    assert np.all(np.isfinite(jac))
