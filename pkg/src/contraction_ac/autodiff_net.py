"""Small numpy MLP engine: forward, reverse-mode parameter gradients,
analytic input Jacobians, diagonal Gaussians, Adam, and checkpoints.

Parameters of a network live in one flat float64 vector; per-layer weights and
biases are views into it, so optimizers and checkpoints work on the flat array.
Layer ``l`` computes ``h @ W_l + b_l`` with ``W_l`` of shape ``(in, out)``.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

log = logging.getLogger(__name__)

LOG_STD_MIN = math.log(1e-3)
LOG_STD_MAX = math.log(10.0)
_HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)


def _orthogonal(rng: np.random.Generator, n_in: int, n_out: int, gain: float) -> np.ndarray:
    a = rng.standard_normal((max(n_in, n_out), min(n_in, n_out)))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))
    if n_in < n_out:
        q = q.T
    return gain * q[:n_in, :n_out]


class Mlp:
    """Fully connected tanh network with a linear output layer."""

    def __init__(
        self,
        sizes: Sequence[int],
        rng: np.random.Generator | None = None,
        hidden_gain: float = math.sqrt(2.0),
        out_gain: float = 1.0,
    ):
        self.sizes = [int(s) for s in sizes]
        if len(self.sizes) < 2 or min(self.sizes) < 1:
            raise ValueError(f"invalid layer sizes {sizes}")
        shapes = list(zip(self.sizes[:-1], self.sizes[1:]))
        self.n_params = sum(i * o + o for i, o in shapes)
        self.params = np.zeros(self.n_params)
        self.weights: list[np.ndarray] = []
        self.biases: list[np.ndarray] = []
        self._bind(self.params)
        if rng is not None:
            last = len(shapes) - 1
            for k, (i, o) in enumerate(shapes):
                gain = out_gain if k == last else hidden_gain
                self.weights[k][...] = _orthogonal(rng, i, o, gain)

    def _bind(self, flat: np.ndarray) -> None:
        self.weights, self.biases = [], []
        off = 0
        for i, o in zip(self.sizes[:-1], self.sizes[1:]):
            self.weights.append(flat[off : off + i * o].reshape(i, o))
            off += i * o
            self.biases.append(flat[off : off + o])
            off += o

    @property
    def n_in(self) -> int:
        return self.sizes[0]

    @property
    def n_out(self) -> int:
        return self.sizes[-1]

    def copy(self) -> "Mlp":
        other = Mlp(self.sizes)
        other.params[:] = self.params
        return other

    def set_params(self, flat: np.ndarray) -> None:
        self.params[:] = flat

    def _check(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != self.n_in:
            raise ValueError(f"input width {x.shape[-1]} != network input {self.n_in}")
        return x

    def forward(self, x: np.ndarray) -> np.ndarray:
        h = self._check(x)
        last = len(self.weights) - 1
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ w + b
            if k < last:
                h = np.tanh(h)
        return h

    __call__ = forward

    def _activations(self, x: np.ndarray) -> list[np.ndarray]:
        acts = [x]
        h = x
        last = len(self.weights) - 1
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ w + b
            if k < last:
                h = np.tanh(h)
            acts.append(h)
        return acts

    def backward(
        self, x: np.ndarray, upstream: np.ndarray, return_input_grad: bool = False
    ) -> np.ndarray | tuple[np.ndarray, np.ndarray]:
        """Gradient of ``sum(upstream * forward(x))`` w.r.t. the flat parameters.

        Batched inputs are summed over every leading axis.
        """
        x = self._check(x)
        upstream = np.asarray(upstream, dtype=float)
        if upstream.shape[-1] != self.n_out:
            raise ValueError(f"upstream width {upstream.shape[-1]} != network output {self.n_out}")
        lead = np.broadcast_shapes(x.shape[:-1], upstream.shape[:-1])
        x2 = np.broadcast_to(x, lead + (self.n_in,)).reshape(-1, self.n_in)
        g = np.broadcast_to(upstream, lead + (self.n_out,)).reshape(-1, self.n_out)
        acts = self._activations(x2)
        grad = np.zeros(self.n_params)
        gw, gb = [], []
        off = 0
        for i, o in zip(self.sizes[:-1], self.sizes[1:]):
            gw.append(grad[off : off + i * o].reshape(i, o))
            off += i * o
            gb.append(grad[off : off + o])
            off += o
        for k in range(len(self.weights) - 1, -1, -1):
            gw[k][...] = acts[k].T @ g
            gb[k][...] = g.sum(axis=0)
            g = g @ self.weights[k].T
            if k > 0:
                g = g * (1.0 - acts[k] ** 2)
        if return_input_grad:
            return grad, g.reshape(lead + (self.n_in,))
        return grad

    def input_jacobian(self, x: np.ndarray) -> np.ndarray:
        """Analytic ``d forward / d x``, shape ``(..., out, in)``."""
        x = self._check(x)
        h = x
        jac = None
        last = len(self.weights) - 1
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            pre = h @ w + b
            # (..., out_k, in)
            step = np.broadcast_to(w.T, pre.shape[:-1] + w.T.shape)
            jac = step if jac is None else step @ jac
            if k < last:
                h = np.tanh(pre)
                jac = (1.0 - h**2)[..., :, None] * jac
            else:
                h = pre
        return np.array(jac)


# ---------------------------------------------------------------------------
# Diagonal Gaussian


@dataclass
class DiagGaussian:
    mean: np.ndarray
    log_std: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=float)
        raw = np.asarray(self.log_std, dtype=float)
        if not (np.all(np.isfinite(self.mean)) and np.all(np.isfinite(raw))):
            raise FloatingPointError("Gaussian parameters must be finite")
        self.log_std = np.clip(raw, LOG_STD_MIN, LOG_STD_MAX)

    @property
    def std(self) -> np.ndarray:
        return np.exp(self.log_std)

    @property
    def dim(self) -> int:
        return self.mean.shape[-1]

    def sample(self, rng: np.random.Generator) -> np.ndarray:
        eps = rng.standard_normal(np.broadcast_shapes(self.mean.shape, self.log_std.shape))
        return self.mean + self.std * eps

    def log_prob(self, a: np.ndarray) -> np.ndarray:
        z = (np.asarray(a, dtype=float) - self.mean) / self.std
        return np.sum(-0.5 * z**2 - self.log_std - _HALF_LOG_2PI, axis=-1)

    def entropy(self) -> np.ndarray:
        return np.sum(self.log_std + 0.5 + _HALF_LOG_2PI, axis=-1)


def gaussian_sample(dist: DiagGaussian, rng: np.random.Generator) -> np.ndarray:
    return dist.sample(rng)


def log_prob(dist: DiagGaussian, a: np.ndarray) -> np.ndarray:
    return dist.log_prob(a)


def entropy(dist: DiagGaussian) -> np.ndarray:
    return dist.entropy()


def log_std_active(raw_log_std: np.ndarray) -> np.ndarray:
    """1 where the std clamp is inactive (gradient passes), else 0."""
    raw = np.asarray(raw_log_std, dtype=float)
    return ((raw >= LOG_STD_MIN) & (raw <= LOG_STD_MAX)).astype(float)


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    n_params: int
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    skipped: int = 0
    m: np.ndarray = field(init=False)
    v: np.ndarray = field(init=False)

    def __post_init__(self):
        self.m = np.zeros(self.n_params)
        self.v = np.zeros(self.n_params)


def adam_step(state: AdamState, params: np.ndarray, grads: np.ndarray) -> bool:
    """In-place bias-corrected Adam update. Returns False when the step is skipped."""
    grads = np.asarray(grads, dtype=float)
    if grads.shape != params.shape or params.shape != state.m.shape:
        raise ValueError(f"shape mismatch: params {params.shape}, grads {grads.shape}")
    if not np.all(np.isfinite(grads)):
        state.skipped += 1
        log.warning("non-finite gradient; Adam step skipped (total skipped %d)", state.skipped)
        return False
    state.step_count += 1
    t = state.step_count
    state.m = state.beta1 * state.m + (1.0 - state.beta1) * grads
    state.v = state.beta2 * state.v + (1.0 - state.beta2) * grads**2
    m_hat = state.m / (1.0 - state.beta1**t)
    v_hat = state.v / (1.0 - state.beta2**t)
    params -= state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return True


def clip_grad_norm(grads: np.ndarray, max_norm: float | None) -> np.ndarray:
    if max_norm is None:
        return grads
    norm = float(np.linalg.norm(grads))
    if norm > max_norm:
        return grads * (max_norm / (norm + 1e-12))
    return grads


# ---------------------------------------------------------------------------
# Checkpoints: one JSON header line, then the flat little-endian float64 block.


def save_checkpoint(
    path: str | Path,
    net: Mlp,
    role: str,
    seed: int,
    step: int,
    extras: dict[str, np.ndarray] | None = None,
    meta: dict | None = None,
) -> None:
    extras = extras or {}
    header = {
        "format": "contraction_ac.ckpt/1",
        "role": role,
        "widths": net.sizes,
        "seed": int(seed),
        "step": int(step),
        "n_params": net.n_params,
        "extras": [{"name": k, "size": int(np.size(v))} for k, v in extras.items()],
        "meta": meta or {},
    }
    blocks = [net.params] + [np.ravel(np.asarray(v, dtype=float)) for v in extras.values()]
    payload = np.concatenate(blocks).astype("<f8").tobytes()
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
        fh.write(payload)


def load_checkpoint(path: str | Path) -> tuple[Mlp, dict, dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        header = json.loads(fh.readline().decode("utf-8"))
        data = np.frombuffer(fh.read(), dtype="<f8").astype(float)
    net = Mlp(header["widths"])
    expected = net.n_params + sum(e["size"] for e in header["extras"])
    if data.size != expected:
        raise ValueError(f"{path}: parameter block has {data.size} values, header implies {expected}")
    net.params[:] = data[: net.n_params]
    extras, off = {}, net.n_params
    for e in header["extras"]:
        extras[e["name"]] = data[off : off + e["size"]].copy()
        off += e["size"]
    return net, header, extras
