import dataclasses
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from contraction_ac import envs


@pytest.fixture(params=["car", "turtlebot"])
def spec(request):
    return envs.make_env(request.param)


def test_unknown_env_lists_valid_names():
    with pytest.raises(ValueError, match="car, turtlebot"):
        envs.make_env("quadrotor")


def test_boxes_consistent(spec):
    assert np.all(spec.x_min < spec.x_max) and np.all(spec.u_min < spec.u_max)
    assert np.all(spec.x0_min >= spec.x_min) and np.all(spec.x0_max <= spec.x_max)


def test_car_drift_example():
    spec = envs.make_env("car")
    np.testing.assert_allclose(spec.drift(np.array([0.0, 0.0, 0.0, 1.5])), [1.5, 0, 0, 0])
    np.testing.assert_array_equal(spec.actuation(np.zeros(4)), [[0, 0], [0, 0], [1, 0], [0, 1]])


def test_turtlebot_drift_zero_and_actuation():
    spec = envs.make_env("turtlebot")
    x = np.random.default_rng(0).uniform(spec.x_min, spec.x_max, (10, 3))
    np.testing.assert_array_equal(spec.drift(x), np.zeros((10, 3)))
    b = spec.actuation(np.array([0.0, 0.0, math.pi / 2]))
    np.testing.assert_allclose(b, [[0, 0], [0, 0.8831], [0.8548, 0]], atol=1e-15)


def test_euler_step_examples():
    car = envs.make_env("car")
    x = np.array([0.0, 0.0, 0.0, 1.5])
    np.testing.assert_allclose(envs.euler_step(car, x, np.zeros(2)), [0.075, 0, 0, 1.5])
    np.testing.assert_allclose(envs.euler_step(car, x, np.array([1.0, 0.0])), [0.075, 0, 0.05, 1.5])
    tb = envs.make_env("turtlebot")
    xt = np.array([-1.0, 0.5, 3.0])
    np.testing.assert_array_equal(envs.euler_step(tb, xt, np.zeros(2)), xt)


def test_angle_wrap_touches_only_heading():
    car = envs.make_env("car")
    x = np.array([0.3, -0.2, math.pi - 0.01, 1.5])
    # turning left across +pi lands near -pi; x-y move identically to the unwrapped step
    nxt = envs.euler_step(car, x, np.array([1.0, 0.0]))
    raw = x + car.dt * car.xdot(x, np.array([1.0, 0.0]))
    np.testing.assert_allclose(nxt[[0, 1, 3]], raw[[0, 1, 3]])
    assert nxt[2] == pytest.approx(raw[2] - 2 * math.pi)
    tb = envs.make_env("turtlebot")
    w = tb.wrap(np.array([-1.0, 0.0, -0.1]))
    assert w[2] == pytest.approx(2 * math.pi - 0.1)


def test_error_wraps_angles():
    car = envs.make_env("car")
    d = car.error(np.array([0, 0, math.pi - 0.1, 1]), np.array([0, 0, -math.pi + 0.1, 1]))
    assert d[2] == pytest.approx(-0.2)


def test_reference_zero_weights_is_drift_only():
    car = envs.make_env("car")
    # short horizon: a 10 s straight line at speed 1.5 would leave the box
    ref = envs.generate_reference(car, np.random.default_rng(0), weight_bound=np.zeros((4, 2)), horizon=20)
    np.testing.assert_array_equal(ref.controls, 0.0)
    # constant heading and speed: straight line at the initial speed
    x0 = ref.states[0]
    np.testing.assert_allclose(ref.states[:, 2:], np.broadcast_to(x0[2:], (ref.horizon + 1, 2)))
    np.testing.assert_allclose(ref.states[-1, 0], x0[0] + ref.horizon * car.dt * x0[3] * math.cos(x0[2]))


def test_reference_controls_within_clip(spec):
    rng = np.random.default_rng(1)
    for _ in range(10):
        ref = envs.generate_reference(spec, rng)
        assert np.all(ref.controls >= 0.75 * spec.u_min - 1e-15)
        assert np.all(ref.controls <= 0.75 * spec.u_max + 1e-15)
        assert np.all(spec.in_box(ref.states))
        assert ref.states.shape == (spec.horizon + 1, spec.n)


def test_reference_deterministic(spec):
    a = envs.generate_reference(spec, np.random.default_rng(5))
    b = envs.generate_reference(spec, np.random.default_rng(5))
    np.testing.assert_array_equal(a.states, b.states)
    np.testing.assert_array_equal(a.controls, b.controls)


def test_reference_self_consistent(spec):
    ref = envs.generate_reference(spec, np.random.default_rng(2))
    np.testing.assert_array_equal(envs.rollout(spec, ref.states[0], ref.controls), ref.states)


def test_reference_retry_exhaustion_names_seed():
    car = envs.make_env("car")
    huge = np.full((4, 2), 1e3)
    with pytest.raises(envs.ReferenceError, match="seed 42"):
        envs.generate_reference(car, np.random.default_rng(0), weight_bound=huge, max_retries=3, seed_hint=42)


def test_reset_degenerate_offset(spec):
    ref = envs.generate_reference(spec, np.random.default_rng(3))
    zero = dataclasses.replace(spec, xe_min=np.zeros(spec.n), xe_max=np.zeros(spec.n))
    np.testing.assert_allclose(envs.reset(zero, ref, np.random.default_rng(0)), ref.states[0])


def test_reset_offset_bounds():
    rng = np.random.default_rng(4)
    car, tb = envs.make_env("car"), envs.make_env("turtlebot")
    for _ in range(50):
        ref = envs.generate_reference(car, rng)
        x0 = envs.reset(car, ref, rng)
        assert np.max(np.abs(car.error(x0, ref.states[0]))) <= 1.0 + 1e-12
        assert car.in_box(x0)
        ref = envs.generate_reference(tb, rng)
        x0 = envs.reset(tb, ref, rng)
        assert abs(tb.error(x0, ref.states[0])[2]) <= 0.25 * math.pi + 1e-12


def test_step_zero_correction_follows_reference(spec):
    ref = envs.generate_reference(spec, np.random.default_rng(6))
    x = ref.states[0]
    for k in range(ref.horizon):
        tr = envs.step(spec, ref, k, x, np.zeros(spec.m))
        np.testing.assert_array_equal(tr.x_next, ref.states[k + 1])
        assert tr.done == (k + 1 == ref.horizon)
        x = tr.x_next
    assert tr.truncated


def test_step_clips_huge_correction(spec):
    ref = envs.generate_reference(spec, np.random.default_rng(7))
    tr = envs.step(spec, ref, 0, ref.states[0], np.full(spec.m, 1e6))
    np.testing.assert_array_equal(tr.u, spec.u_max)


def test_step_leaving_box_terminates():
    car = envs.make_env("car")
    ref = envs.generate_reference(car, np.random.default_rng(8))
    x = np.array([4.99, 0.0, 0.0, 2.0])
    tr = envs.step(car, ref, 0, x, np.zeros(2))
    assert tr.done and not tr.truncated


def test_step_index_range():
    car = envs.make_env("car")
    ref = envs.generate_reference(car, np.random.default_rng(9))
    with pytest.raises(IndexError):
        envs.step(car, ref, ref.horizon, ref.states[0], np.zeros(2))


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**32 - 1), st.sampled_from(["car", "turtlebot"]))
def test_random_rollouts_respect_boxes(seed, name):
    spec = envs.make_env(name)
    rng = np.random.default_rng(seed)
    ref = envs.generate_reference(spec, rng)
    x = envs.reset(spec, ref, rng)
    for k in range(ref.horizon):
        tr = envs.step(spec, ref, k, x, rng.normal(0, 2, spec.m))
        assert np.all(tr.u >= spec.u_min) and np.all(tr.u <= spec.u_max)
        if tr.done:
            break
        assert spec.in_box(tr.x_next)
        x = tr.x_next


def test_episode_csv(tmp_path):
    car = envs.make_env("car")
    ref = envs.generate_reference(car, np.random.default_rng(10))
    trs = [envs.step(car, ref, k, ref.states[k], np.zeros(2)) for k in range(3)]
    path = tmp_path / "ep.csv"
    envs.write_episode_csv(path, car, trs)
    lines = path.read_text().splitlines()
    assert lines[0] == "k,t,x0,x1,x2,x3,xd0,xd1,xd2,xd3,ud0,ud1,u0,u1,r,done"
    assert len(lines) == 4
