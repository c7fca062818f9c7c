"""Control-affine tracking environments (4D car, 3D TurtleBot).

States and controls are plain float arrays. ``drift`` and ``actuation`` accept
a single state ``(n,)`` or a batch ``(B, n)``.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

DEFAULT_DT = 0.05
DEFAULT_HORIZON = 200
DEFAULT_FREQS = (0.5, 1.0, 2.0, 3.0)
REF_CLIP = 0.75
MAX_REF_RETRIES = 20


class ReferenceError(RuntimeError):
    pass


@dataclass(frozen=True)
class EnvSpec:
    name: str
    n: int
    m: int
    drift: Callable[[np.ndarray], np.ndarray]
    actuation: Callable[[np.ndarray], np.ndarray]
    x_min: np.ndarray
    x_max: np.ndarray
    u_min: np.ndarray
    u_max: np.ndarray
    x0_min: np.ndarray
    x0_max: np.ndarray
    xe_min: np.ndarray
    xe_max: np.ndarray
    # state index -> lower end of its 2*pi wrapping interval
    angles: dict[int, float] = field(default_factory=dict)
    # per-channel sinusoid weight half-range and whether it scales with f_i / f_max
    ref_amplitude: np.ndarray | None = None
    ref_freq_scaled: tuple[bool, ...] = ()
    dt: float = DEFAULT_DT
    horizon: int = DEFAULT_HORIZON

    def wrap(self, x: np.ndarray) -> np.ndarray:
        x = np.array(x, dtype=float)
        for i, lo in self.angles.items():
            x[..., i] = lo + np.mod(x[..., i] - lo, 2.0 * math.pi)
        return x

    def error(self, x: np.ndarray, x_d: np.ndarray) -> np.ndarray:
        """``x - x_d`` with angular coordinates wrapped into [-pi, pi)."""
        d = np.asarray(x, dtype=float) - np.asarray(x_d, dtype=float)
        for i in self.angles:
            d[..., i] = np.mod(d[..., i] + math.pi, 2.0 * math.pi) - math.pi
        return d

    def in_box(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x)
        return np.all((x >= self.x_min) & (x <= self.x_max), axis=-1)

    def clip_u(self, u: np.ndarray) -> np.ndarray:
        return np.clip(u, self.u_min, self.u_max)

    @property
    def u_halfwidth(self) -> np.ndarray:
        return 0.5 * (self.u_max - self.u_min)

    def xdot(self, x: np.ndarray, u: np.ndarray) -> np.ndarray:
        return self.drift(x) + np.einsum("...ij,...j->...i", self.actuation(x), u)


def _car_drift(x):
    x = np.asarray(x, dtype=float)
    th, v = x[..., 2], x[..., 3]
    z = np.zeros_like(th)
    return np.stack([v * np.cos(th), v * np.sin(th), z, z], axis=-1)


_CAR_B = np.array([[0.0, 0.0], [0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])


def _car_actuation(x):
    x = np.asarray(x, dtype=float)
    return np.broadcast_to(_CAR_B, x.shape[:-1] + _CAR_B.shape).copy()


TB_C1, TB_C2, TB_C3 = 0.9061, 0.8831, 0.8548


def _tb_drift(x):
    return np.zeros_like(np.asarray(x, dtype=float))


def _tb_actuation(x):
    x = np.asarray(x, dtype=float)
    th = x[..., 2]
    b = np.zeros(x.shape[:-1] + (3, 2))
    b[..., 0, 1] = TB_C1 * np.cos(th)
    b[..., 1, 1] = TB_C2 * np.sin(th)
    b[..., 2, 0] = TB_C3
    return b


ENV_NAMES = ("car", "turtlebot")


def make_env(name: str, dt: float = DEFAULT_DT, horizon: int = DEFAULT_HORIZON) -> EnvSpec:
    a = np.array
    if name == "car":
        return EnvSpec(
            name="car", n=4, m=2, drift=_car_drift, actuation=_car_actuation,
            x_min=a([-5.0, -5.0, -math.pi, 1.0]), x_max=a([5.0, 5.0, math.pi, 2.0]),
            u_min=a([-3.0, -3.0]), u_max=a([3.0, 3.0]),
            x0_min=a([-2.0, -2.0, -1.0, 1.5]), x0_max=a([2.0, 2.0, 1.0, 1.5]),
            xe_min=-np.ones(4), xe_max=np.ones(4),
            angles={2: -math.pi}, dt=dt, horizon=horizon,
            ref_amplitude=a([6.0, 0.3]), ref_freq_scaled=(False, True),
        )
    if name == "turtlebot":
        return EnvSpec(
            name="turtlebot", n=3, m=2, drift=_tb_drift, actuation=_tb_actuation,
            x_min=a([-5.0, -2.0, 0.0]), x_max=a([0.0, 2.0, 2.0 * math.pi]),
            u_min=a([0.0, -1.82]), u_max=a([0.22, 1.82]),
            x0_min=a([-1.7, 0.75, math.pi]), x0_max=a([-1.3, 1.15, 1.5 * math.pi]),
            xe_min=a([-0.1, -0.1, -0.25 * math.pi]), xe_max=a([0.1, 0.1, 0.25 * math.pi]),
            angles={2: 0.0}, dt=dt, horizon=horizon,
            ref_amplitude=a([0.11, 0.91]), ref_freq_scaled=(False, True),
        )
    raise ValueError(f"unknown environment {name!r}; valid: {', '.join(ENV_NAMES)}")


def euler_step(spec: EnvSpec, x: np.ndarray, u: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    nxt = spec.wrap(x + spec.dt * spec.xdot(x, u))
    if not np.all(np.isfinite(nxt)):
        raise FloatingPointError(f"{spec.name}: non-finite state after Euler step")
    return nxt


# ---------------------------------------------------------------------------
# Reference trajectories


@dataclass(frozen=True)
class ReferenceTrajectory:
    states: np.ndarray  # (L + 1, n)
    controls: np.ndarray  # (L, m)
    dt: float

    @property
    def horizon(self) -> int:
        return self.controls.shape[0]


def sinusoid_controls(
    weights: np.ndarray, freqs: Sequence[float], horizon: int, dt: float
) -> np.ndarray:
    """``u_j(t_k) = sum_i w_ij sin(2 pi f_i t_k / T)`` with ``T = horizon * dt``; weights ``(n_f, m)``."""
    t = np.arange(horizon) * dt
    period = horizon * dt
    basis = np.sin(2.0 * math.pi * np.outer(t, np.asarray(freqs, dtype=float)) / period)
    return basis @ weights


def rollout(spec: EnvSpec, x0: np.ndarray, controls: np.ndarray) -> np.ndarray:
    states = np.empty((controls.shape[0] + 1, spec.n))
    states[0] = x0
    for k in range(controls.shape[0]):
        states[k + 1] = euler_step(spec, states[k], controls[k])
    return states


def generate_reference(
    spec: EnvSpec,
    rng: np.random.Generator,
    freqs: Sequence[float] = DEFAULT_FREQS,
    weight_bound: np.ndarray | None = None,
    horizon: int | None = None,
    max_retries: int = MAX_REF_RETRIES,
    seed_hint: int | None = None,
) -> ReferenceTrajectory:
    """Random sinusoidal reference, regenerated until it stays inside the state box.

    ``weight_bound`` is the per-channel half-range of the uniform weight law;
    see :func:`default_weight_bound`.
    """
    horizon = spec.horizon if horizon is None else horizon
    wb = default_weight_bound(spec, freqs) if weight_bound is None else np.asarray(weight_bound, dtype=float)
    lo, hi = REF_CLIP * spec.u_min, REF_CLIP * spec.u_max
    for _ in range(max_retries):
        x0 = rng.uniform(spec.x0_min, spec.x0_max)
        w = rng.uniform(-1.0, 1.0, size=(len(freqs), spec.m)) * wb
        u = np.clip(sinusoid_controls(w, freqs, horizon, spec.dt), lo, hi)
        states = rollout(spec, x0, u)
        if np.all(spec.in_box(states)):
            return ReferenceTrajectory(states=states, controls=u, dt=spec.dt)
    raise ReferenceError(
        f"{spec.name}: no in-bounds reference after {max_retries} attempts (seed {seed_hint})"
    )


def default_weight_bound(spec: EnvSpec, freqs: Sequence[float] = DEFAULT_FREQS) -> np.ndarray:
    """Half-range of the sinusoid weights per (frequency, channel), shape ``(n_f, m)``.

    Channels whose integral is bounded by the state box (car speed, robot
    travel) get weights proportional to ``f_i / f_max``, which caps the
    integrated excursion; with the flat law ``0.5 * (u_max - u_min)`` the car's
    speed leaves [1, 2] on essentially every draw.
    """
    f = np.asarray(freqs, dtype=float)
    amp = 0.5 * (spec.u_max - spec.u_min) if spec.ref_amplitude is None else spec.ref_amplitude
    scaled = spec.ref_freq_scaled or (False,) * spec.m
    cols = [amp[j] * (f / f.max() if scaled[j] else np.ones_like(f)) for j in range(spec.m)]
    return np.stack(cols, axis=1)


# ---------------------------------------------------------------------------
# MDP wrapper


@dataclass
class Transition:
    k: int
    x: np.ndarray
    x_d: np.ndarray
    u_d: np.ndarray
    du: np.ndarray
    u: np.ndarray
    x_next: np.ndarray
    reward: float
    done: bool
    truncated: bool


def reset(spec: EnvSpec, ref: ReferenceTrajectory, rng: np.random.Generator) -> np.ndarray:
    xe = rng.uniform(spec.xe_min, spec.xe_max)
    x0 = ref.states[0] + xe
    return np.clip(spec.wrap(x0), spec.x_min, spec.x_max)


def step(spec: EnvSpec, ref: ReferenceTrajectory, k: int, x: np.ndarray, du: np.ndarray) -> Transition:
    if not 0 <= k < ref.horizon:
        raise IndexError(f"step index {k} outside [0, {ref.horizon})")
    u_d = ref.controls[k]
    u = spec.clip_u(u_d + np.asarray(du, dtype=float))
    x_next = euler_step(spec, x, u)
    out = not bool(spec.in_box(x_next))
    last = k + 1 == ref.horizon
    return Transition(
        k=k, x=np.asarray(x, dtype=float), x_d=ref.states[k], u_d=u_d, du=np.asarray(du, dtype=float),
        u=u, x_next=x_next, reward=0.0, done=out or last, truncated=last and not out,
    )


def write_episode_csv(path: str | Path, spec: EnvSpec, transitions: Sequence[Transition]) -> None:
    header = ["k", "t"]
    header += [f"x{i}" for i in range(spec.n)]
    header += [f"xd{i}" for i in range(spec.n)]
    header += [f"ud{j}" for j in range(spec.m)]
    header += [f"u{j}" for j in range(spec.m)]
    header += ["r", "done"]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for tr in transitions:
            row = [tr.k, repr(tr.k * spec.dt)]
            row += [repr(float(v)) for v in (*tr.x, *tr.x_d, *tr.u_d, *tr.u)]
            row += [repr(float(tr.reward)), int(tr.done)]
            w.writerow(row)
