"""Offline identification of a control-affine model ``xdot ~ f(x) + B(x) u``."""

from __future__ import annotations

import csv
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import envs
from .autodiff_net import AdamState, Mlp, adam_step, load_checkpoint, save_checkpoint
from .numerics import null_space

log = logging.getLogger(__name__)

DYN_WIDTHS = (256, 256)


@dataclass
class Dataset:
    """Rows of ``(x, u, xdot)``; ``xdot`` is the Euler increment divided by dt."""

    x: np.ndarray
    u: np.ndarray
    xdot: np.ndarray

    def __len__(self) -> int:
        return self.x.shape[0]

    def subset(self, idx: np.ndarray) -> "Dataset":
        return Dataset(self.x[idx], self.u[idx], self.xdot[idx])


def _collect_episode(spec: envs.EnvSpec, rng: np.random.Generator, noise_std: np.ndarray):
    xs, us, xdots = [], [], []
    ref = envs.generate_reference(spec, rng)
    x = envs.reset(spec, ref, rng)
    for k in range(ref.horizon):
        u = spec.clip_u(ref.controls[k] + noise_std * rng.standard_normal(spec.m))
        x_next = envs.euler_step(spec, x, u)
        xs.append(x)
        us.append(u)
        xdots.append(spec.error(x_next, x) / spec.dt)
        if not spec.in_box(x_next):
            break
        x = x_next
    return xs, us, xdots


def collect_data(
    spec: envs.EnvSpec,
    rng: np.random.Generator,
    episodes: int = 200,
    noise_std: np.ndarray | None = None,
    threads: int = 1,
) -> Dataset:
    """Roll out reference controls plus Gaussian noise from perturbed initial states.

    Each episode draws from its own child stream, so the result does not depend
    on ``threads``.
    """
    noise_std = 0.1 * (spec.u_max - spec.u_min) if noise_std is None else np.asarray(noise_std, dtype=float)
    if noise_std.shape not in ((), (spec.m,)) or np.any(noise_std < 0) or not np.all(np.isfinite(noise_std)):
        raise ValueError("noise_std must be finite, nonnegative and have one entry per control")
    children = rng.spawn(episodes)
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            parts = list(pool.map(lambda r: _collect_episode(spec, r, noise_std), children))
    else:
        parts = [_collect_episode(spec, r, noise_std) for r in children]
    xs = [v for p in parts for v in p[0]]
    us = [v for p in parts for v in p[1]]
    xdots = [v for p in parts for v in p[2]]
    return Dataset(np.array(xs).reshape(-1, spec.n), np.array(us).reshape(-1, spec.m), np.array(xdots).reshape(-1, spec.n))


def save_dataset(path: str | Path, data: Dataset, sidecar: dict) -> None:
    path = Path(path)
    n, m = data.x.shape[1], data.u.shape[1]
    header = [f"x{i}" for i in range(n)] + [f"u{j}" for j in range(m)] + [f"xdot{i}" for i in range(n)]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in np.hstack([data.x, data.u, data.xdot]):
            w.writerow([repr(float(v)) for v in row])
    with open(path.with_suffix(".json"), "w") as fh:
        json.dump(sidecar, fh, indent=2, sort_keys=True)


def load_dataset(path: str | Path) -> tuple[Dataset, dict]:
    path = Path(path)
    with open(path.with_suffix(".json")) as fh:
        sidecar = json.load(fh)
    with open(path, newline="") as fh:
        header = next(csv.reader(fh))
    arr = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    n = sum(h.startswith("x") and not h.startswith("xdot") for h in header)
    m = sum(h.startswith("u") for h in header)
    return Dataset(arr[:, :n], arr[:, n : n + m], arr[:, n + m :]), sidecar


class DynModel:
    """``f_hat`` and ``B_hat`` as two tanh MLPs; ``B_hat`` is the row-major reshape of an ``n*m`` output."""

    def __init__(self, n: int, m: int, rng: np.random.Generator | None = None, widths=DYN_WIDTHS):
        self.n, self.m = n, m
        self.fnet = Mlp([n, *widths, n], rng)
        self.bnet = Mlp([n, *widths, n * m], rng)

    def predict(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        x = np.asarray(x, dtype=float)
        f = self.fnet(x)
        b = self.bnet(x).reshape(x.shape[:-1] + (self.n, self.m))
        return f, b

    def f(self, x: np.ndarray) -> np.ndarray:
        return self.fnet(x)

    def b(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return self.bnet(x).reshape(x.shape[:-1] + (self.n, self.m))

    def xdot(self, x: np.ndarray, u: np.ndarray) -> np.ndarray:
        f, b = self.predict(x)
        return f + np.einsum("...ij,...j->...i", b, u)

    def loss(self, data: Dataset) -> float:
        r = data.xdot - self.xdot(data.x, data.u)
        return float(np.mean(np.sum(r**2, axis=-1)))

    def save(self, prefix: str | Path, seed: int, step: int, meta: dict | None = None) -> None:
        prefix = Path(prefix)
        save_checkpoint(prefix.with_name(prefix.name + "_f.ckpt"), self.fnet, "dynamics_f", seed, step, meta=meta)
        save_checkpoint(prefix.with_name(prefix.name + "_B.ckpt"), self.bnet, "dynamics_B", seed, step, meta=meta)

    @classmethod
    def load(cls, prefix: str | Path) -> "DynModel":
        prefix = Path(prefix)
        fnet, _, _ = load_checkpoint(prefix.with_name(prefix.name + "_f.ckpt"))
        bnet, _, _ = load_checkpoint(prefix.with_name(prefix.name + "_B.ckpt"))
        n = fnet.n_in
        model = cls.__new__(cls)
        model.n, model.m = n, bnet.n_out // n
        model.fnet, model.bnet = fnet, bnet
        return model


def predict(model: DynModel, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    return model.predict(x)


def b_perp(model: DynModel, x: np.ndarray) -> np.ndarray:
    return null_space(model.b(x))


@dataclass
class PretrainResult:
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    best_epoch: int = -1
    stopped_early: bool = False


class DivergenceError(RuntimeError):
    def __init__(self, msg: str, trace: PretrainResult):
        super().__init__(msg)
        self.trace = trace


def pretrain(
    model: DynModel,
    data: Dataset,
    rng: np.random.Generator,
    batch: int = 1024,
    epochs: int = 100,
    lr: float = 1e-3,
    val_frac: float = 0.1,
    patience: int = 10,
) -> PretrainResult:
    """Minibatch Adam on the mean squared derivative error, with early stopping on a held-out split.

    The model is left at the parameters with the best validation loss.
    """
    if batch < 1:
        raise ValueError("batch size must be positive")
    n_val = int(round(val_frac * len(data)))
    perm = rng.permutation(len(data))
    val, train = data.subset(perm[:n_val]), data.subset(perm[n_val:])
    if len(train) < batch:
        raise ValueError(f"training split has {len(train)} samples, fewer than batch size {batch}")
    opt_f = AdamState(model.fnet.n_params, lr)
    opt_b = AdamState(model.bnet.n_params, lr)
    res = PretrainResult()
    best = (np.inf, model.fnet.params.copy(), model.bnet.params.copy())
    since_best = 0
    n, m = model.n, model.m
    for epoch in range(epochs):
        order = rng.permutation(len(train))
        losses = []
        for start in range(0, len(train) - batch + 1, batch):
            idx = order[start : start + batch]
            x, u, y = train.x[idx], train.u[idx], train.xdot[idx]
            f = model.fnet(x)
            b = model.bnet(x).reshape(-1, n, m)
            resid = f + np.einsum("bij,bj->bi", b, u) - y
            loss = float(np.mean(np.sum(resid**2, axis=-1)))
            if not np.isfinite(loss):
                raise DivergenceError(f"dynamics loss diverged at epoch {epoch}", res)
            g = 2.0 * resid / len(idx)
            adam_step(opt_f, model.fnet.params, model.fnet.backward(x, g))
            gb = (g[:, :, None] * u[:, None, :]).reshape(-1, n * m)
            adam_step(opt_b, model.bnet.params, model.bnet.backward(x, gb))
            losses.append(loss)
        res.train_loss.append(float(np.mean(losses)))
        v = model.loss(val) if n_val else res.train_loss[-1]
        res.val_loss.append(v)
        log.info("pretrain epoch %d train %.5f val %.5f", epoch, res.train_loss[-1], v)
        if v < best[0]:
            best = (v, model.fnet.params.copy(), model.bnet.params.copy())
            res.best_epoch = epoch
            since_best = 0
        else:
            since_best += 1
            if since_best >= patience:
                res.stopped_early = True
                break
    model.fnet.params[:] = best[1]
    model.bnet.params[:] = best[2]
    return res


class KnownModel:
    """Adapter exposing an environment's true ``f`` and ``B`` through the model interface."""

    def __init__(self, spec: envs.EnvSpec):
        self.spec = spec
        self.n, self.m = spec.n, spec.m

    def f(self, x: np.ndarray) -> np.ndarray:
        return self.spec.drift(x)

    def b(self, x: np.ndarray) -> np.ndarray:
        return self.spec.actuation(x)

    def predict(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return self.f(x), self.b(x)
