"""Contraction-metric generator (CMG) and the contraction / CCM condition matrices.

Conventions
-----------
* ``sym(X) = X + X^T`` inside the condition matrices; the resulting matrices
  are then symmetrised once more as ``(C + C^T) / 2`` to remove round-off.
* The generator outputs the *dual* metric ``W``; ``M = W^{-1}``.
* ``W = w_lb I + s L L^T`` with ``L`` lower triangular and
  ``s = min(1, (w_ub - w_lb) / lambda_max(L L^T))``, so the spectrum of ``W``
  lies in ``[w_lb, w_ub]`` by construction.
* Spatial derivatives of ``W``/``M`` are central differences with the
  per-coordinate step of :func:`numerics.default_step`; every stencil point is
  a network forward pass, so the loss gradient w.r.t. generator parameters is
  obtained by ordinary reverse mode through those passes.

Model objects are duck-typed: anything with ``f(x) -> (..., n)`` and
``b(x) -> (..., n, m)`` works. Metric arguments accept a :class:`CmgNet` (its
deterministic mean metric is used) or any callable ``x -> W(x)``.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from .autodiff_net import (
    AdamState,
    DiagGaussian,
    Mlp,
    adam_step,
    load_checkpoint,
    log_std_active,
    save_checkpoint,
)
from .numerics import default_step, fd_jacobian, lie_derivative_matrix, min_eig_sym, null_space, sym

W_LB = 0.1
W_UB = 10.0
CMG_WIDTHS = (128, 128)


class CmgLossError(FloatingPointError):
    pass


class CmgNet:
    """State -> Gaussian over the lower-triangular factor of the dual metric."""

    def __init__(
        self,
        n: int,
        rng: np.random.Generator | None = None,
        widths=CMG_WIDTHS,
        w_lb: float = W_LB,
        w_ub: float = W_UB,
        init_log_std: float = math.log(0.1),
        out_gain: float = 1e-2,
    ):
        if not 0 < w_lb < w_ub:
            raise ValueError("need 0 < w_lb < w_ub")
        self.n = n
        self.p = n * (n + 1) // 2
        self.trunk = Mlp([n, *widths, self.p], rng, out_gain=out_gain)
        self.log_std = np.full(self.p, float(init_log_std))
        self.w_lb, self.w_ub = float(w_lb), float(w_ub)
        self.tril = np.tril_indices(n)

    def dist(self, x: np.ndarray) -> DiagGaussian:
        return DiagGaussian(self.trunk(x), self.log_std)

    def entropy(self) -> float:
        return float(DiagGaussian(np.zeros(self.p), self.log_std).entropy())

    def to_tril(self, vec: np.ndarray) -> np.ndarray:
        out = np.zeros(vec.shape[:-1] + (self.n, self.n))
        out[..., self.tril[0], self.tril[1]] = vec
        return out

    def dual_from_vec(self, vec: np.ndarray) -> np.ndarray:
        return dual_from_factor(self.to_tril(vec), self.w_lb, self.w_ub)[0]

    def mean_dual(self, x: np.ndarray) -> np.ndarray:
        return self.dual_from_vec(self.trunk(x))

    def dual_with_noise(self, x: np.ndarray, eps: np.ndarray) -> np.ndarray:
        """Reparameterised dual metric ``W(mean(x) + std * eps)``."""
        std = np.exp(np.clip(self.log_std, math.log(1e-3), math.log(10.0)))
        return self.dual_from_vec(self.trunk(x) + std * eps)

    def params_hash(self) -> str:
        import hashlib

        h = hashlib.sha256(self.trunk.params.tobytes())
        h.update(self.log_std.tobytes())
        return h.hexdigest()

    def copy(self) -> "CmgNet":
        other = CmgNet.__new__(CmgNet)
        other.__dict__.update(self.__dict__)
        other.trunk = self.trunk.copy()
        other.log_std = self.log_std.copy()
        return other

    def save(self, path: str | Path, seed: int, step: int) -> None:
        save_checkpoint(
            path, self.trunk, "cmg", seed, step,
            extras={"log_std": self.log_std},
            meta={"w_lb": self.w_lb, "w_ub": self.w_ub},
        )

    @classmethod
    def load(cls, path: str | Path) -> "CmgNet":
        trunk, header, extras = load_checkpoint(path)
        n = trunk.n_in
        cmg = cls(n, widths=tuple(header["widths"][1:-1]), w_lb=header["meta"]["w_lb"], w_ub=header["meta"]["w_ub"])
        cmg.trunk = trunk
        cmg.log_std = extras["log_std"]
        return cmg


def dual_from_factor(l: np.ndarray, w_lb: float, w_ub: float):
    """``W = w_lb I + s L L^T`` with the spectral scale ``s``; returns ``(W, cache)``."""
    n = l.shape[-1]
    p = l @ np.swapaxes(l, -1, -2)
    evals, evecs = np.linalg.eigh(p)
    lam = evals[..., -1]
    span = w_ub - w_lb
    clamp = lam > span
    s = np.where(clamp, span / np.where(clamp, lam, 1.0), 1.0)
    w = w_lb * np.eye(n) + s[..., None, None] * p
    w = sym(w)
    cache = (l, p, lam, evecs[..., :, -1], clamp, s, span)
    return w, cache


def dual_backward(g_w: np.ndarray, cache) -> np.ndarray:
    """Gradient w.r.t. ``L`` (full matrix) given ``dLoss/dW``."""
    l, p, lam, top, clamp, s, span = cache
    g = sym(g_w)
    safe_lam = np.where(clamp, lam, 1.0)
    tr_gp = np.einsum("...ij,...ij->...", g, p)
    vvT = top[..., :, None] * top[..., None, :]
    g_p_clamped = span * (g / safe_lam[..., None, None] - (tr_gp / safe_lam**2)[..., None, None] * vvT)
    g_p = np.where(clamp[..., None, None], g_p_clamped, g)
    return 2.0 * sym(g_p) @ l


@dataclass
class MetricSample:
    W: np.ndarray
    M: np.ndarray
    log_prob: float
    entropy: float


def sample_metric(cmg: CmgNet, x: np.ndarray, rng: np.random.Generator) -> MetricSample:
    dist = cmg.dist(x)
    vec = dist.sample(rng)
    w = cmg.dual_from_vec(vec)
    m = sym(np.linalg.inv(w))
    assert np.all(np.isfinite(m)), "dual metric inversion failed"
    return MetricSample(W=w, M=m, log_prob=float(dist.log_prob(vec)), entropy=float(dist.entropy()))


def l_pd(a: np.ndarray, rng: np.random.Generator | None = None, n_z: int = 32, z: np.ndarray | None = None):
    """Mean hinge ``max(0, -z^T A z)`` over ``z ~ U(-1, 1)^n``; zero iff no sampled direction is negative."""
    a = np.asarray(a, dtype=float)
    n = a.shape[-1]
    if z is None:
        z = rng.uniform(-1.0, 1.0, size=a.shape[:-2] + (n_z, n))
    q = np.einsum("...ki,...ij,...kj->...k", z, a, z)
    val = np.maximum(0.0, -q).mean(axis=-1)
    return float(val) if val.ndim == 0 else val


def _as_wfun(metric) -> Callable[[np.ndarray], np.ndarray]:
    return metric.mean_dual if isinstance(metric, CmgNet) else metric


def _b_jacobians(model, x: np.ndarray) -> np.ndarray:
    """``d b_j / d x`` stacked as ``(..., m, n, n)``."""
    bx = model.b(x)
    n, m = bx.shape[-2], bx.shape[-1]
    jac = fd_jacobian(lambda z: model.b(z).reshape(z.shape[:-1] + (n * m,)), x)
    jac = jac.reshape(x.shape[:-1] + (n, m, n))
    return np.moveaxis(jac, -2, -3)


def drift_jacobian(model, x: np.ndarray, u: np.ndarray) -> np.ndarray:
    """``A(x, u) = df/dx + sum_j u_j db_j/dx``."""
    jb = _b_jacobians(model, x)
    return fd_jacobian(model.f, x) + np.einsum("...j,...jab->...ab", np.asarray(u, dtype=float), jb)


def contraction_matrix(model, gain: np.ndarray, metric, x: np.ndarray, u: np.ndarray, lam: float = 0.5):
    """``C_M = Mdot + sym(M (A + B K)) + 2 lam M`` for feedback gain ``K = du/dx``.

    ``Mdot`` is the derivative of ``M`` along the closed-loop field ``f + B u``.
    """
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    wfun = _as_wfun(metric)

    def mfun(z):
        return sym(np.linalg.inv(wfun(z)))

    b = model.b(x)
    a_cl = drift_jacobian(model, x, u) + b @ np.asarray(gain, dtype=float)
    v = model.f(x) + np.einsum("...ij,...j->...i", b, u)
    m = mfun(x)
    ma = m @ a_cl
    c = lie_derivative_matrix(mfun, x, v) + ma + np.swapaxes(ma, -1, -2) + 2.0 * lam * m
    return sym(c)


def ccm_inequality(model, metric, x: np.ndarray, lam: float = 0.5) -> np.ndarray:
    """``B_perp^T (-d_f W + sym(df/dx W) + 2 lam W) B_perp``."""
    x = np.asarray(x, dtype=float)
    wfun = _as_wfun(metric)
    bp = null_space(model.b(x))
    w = wfun(x)
    jw = fd_jacobian(model.f, x) @ w
    inner = -lie_derivative_matrix(wfun, x, model.f(x)) + jw + np.swapaxes(jw, -1, -2) + 2.0 * lam * w
    return sym(np.swapaxes(bp, -1, -2) @ inner @ bp)


def ccm_equalities(model, metric, x: np.ndarray) -> list[np.ndarray]:
    """Per actuation column: ``B_perp^T (d_{b_j} W - sym(db_j/dx W)) B_perp``."""
    x = np.asarray(x, dtype=float)
    wfun = _as_wfun(metric)
    b = model.b(x)
    bp = null_space(b)
    bpt = np.swapaxes(bp, -1, -2)
    w = wfun(x)
    jb = _b_jacobians(model, x)
    out = []
    for j in range(b.shape[-1]):
        jw = jb[..., j, :, :] @ w
        inner = lie_derivative_matrix(wfun, x, b[..., :, j]) - (jw + np.swapaxes(jw, -1, -2))
        out.append(sym(bpt @ inner @ bp))
    return out


def entropy_weight(r: np.ndarray | float, beta: float = 1e-2):
    """Reward-conditioned entropy scale ``beta * exp(-r)``."""
    return beta * np.exp(-np.asarray(r, dtype=float))


@dataclass
class CmgLossResult:
    loss: float
    grad_trunk: np.ndarray | None
    grad_log_std: np.ndarray | None
    pd_contraction: float
    pd_ccm: float
    frobenius: float
    entropy: float
    alpha: float


def cmg_loss(
    model,
    cmg: CmgNet,
    x: np.ndarray,
    u: np.ndarray,
    gain: np.ndarray,
    r: np.ndarray,
    rng: np.random.Generator,
    lam: float = 0.5,
    beta: float = 1e-2,
    n_z: int = 32,
    with_grad: bool = True,
) -> CmgLossResult:
    """Batch-mean generator loss and its gradient w.r.t. the generator only.

    loss = mean_b[ l_pd(-C_M) + l_pd(-C_W1) + sum_j ||C_W2^j||_F ] - mean_b[alpha(r_b)] * H

    ``gain`` is the policy feedback gain ``du/dx`` at each sample; the
    dynamics model and the policy are treated as constants.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    u = np.atleast_2d(np.asarray(u, dtype=float))
    gain = np.asarray(gain, dtype=float).reshape(x.shape[0], u.shape[1], x.shape[1])
    r = np.asarray(r, dtype=float).reshape(-1)
    nb, n = x.shape
    eye = np.eye(n)

    # stencil: centre, then +h e_i / -h e_i pairs
    h = default_step(x)
    pts = [x]
    for i in range(n):
        pts.append(x + h[:, i : i + 1] * eye[i])
        pts.append(x - h[:, i : i + 1] * eye[i])
    stencil = np.stack(pts)  # (S, B, n)
    vec = cmg.trunk(stencil)
    w_all, cache = dual_from_factor(cmg.to_tril(vec), cmg.w_lb, cmg.w_ub)
    m_all = sym(np.linalg.inv(w_all))
    w0, m0 = w_all[0], m_all[0]
    inv2h = 1.0 / (2.0 * h)  # (B, n)
    d_w = np.stack([(w_all[1 + 2 * i] - w_all[2 + 2 * i]) * inv2h[:, i, None, None] for i in range(n)], 1)
    d_m = np.stack([(m_all[1 + 2 * i] - m_all[2 + 2 * i]) * inv2h[:, i, None, None] for i in range(n)], 1)

    f = model.f(x)
    b = model.b(x)
    jf = fd_jacobian(model.f, x)
    jb = _b_jacobians(model, x)  # (B, m, n, n)
    a_cl = jf + np.einsum("bj,bjxy->bxy", u, jb) + b @ gain
    v = f + np.einsum("bij,bj->bi", b, u)
    bp = null_space(b)  # (B, n, q)
    bpt = np.swapaxes(bp, -1, -2)

    ma = m0 @ a_cl
    c_m = sym(np.einsum("bi,bixy->bxy", v, d_m) + ma + np.swapaxes(ma, -1, -2) + 2.0 * lam * m0)
    jw = jf @ w0
    x1 = -np.einsum("bi,bixy->bxy", f, d_w) + jw + np.swapaxes(jw, -1, -2) + 2.0 * lam * w0
    c_w1 = sym(bpt @ x1 @ bp)
    jbw = jb @ w0[:, None]
    ys = np.einsum("bij,bixy->bjxy", b, d_w) - (jbw + np.swapaxes(jbw, -1, -2))  # (B, m, n, n)
    c_w2 = sym(bpt[:, None] @ ys @ bp[:, None])

    q = bp.shape[-1]
    z1 = rng.uniform(-1.0, 1.0, size=(nb, n_z, n))
    z2 = rng.uniform(-1.0, 1.0, size=(nb, n_z, q))
    q1 = np.einsum("bki,bij,bkj->bk", z1, c_m, z1)
    q2 = np.einsum("bki,bij,bkj->bk", z2, c_w1, z2)
    pd1 = np.maximum(0.0, q1).mean(axis=1)  # l_pd(-C_M)
    pd2 = np.maximum(0.0, q2).mean(axis=1)  # l_pd(-C_W1)
    fro = np.sqrt(np.sum(c_w2**2, axis=(-1, -2)))  # (B, m)
    alpha = entropy_weight(r, beta)
    ent = cmg.entropy()
    loss = float(np.mean(pd1 + pd2 + fro.sum(axis=1)) - np.mean(alpha) * ent)
    if not np.isfinite(loss):
        bad = int(np.argmax(~np.isfinite(pd1 + pd2 + fro.sum(axis=1))))
        raise CmgLossError(f"non-finite generator loss at state {x[bad].tolist()}")
    res = CmgLossResult(
        loss=loss, grad_trunk=None, grad_log_std=None,
        pd_contraction=float(pd1.mean()), pd_ccm=float(pd2.mean()), frobenius=float(fro.sum(1).mean()),
        entropy=ent, alpha=float(np.mean(alpha)),
    )
    if not with_grad:
        return res

    g_cm = np.einsum("bk,bki,bkj->bij", (q1 > 0).astype(float), z1, z1) / (n_z * nb)
    g_cw1 = np.einsum("bk,bki,bkj->bij", (q2 > 0).astype(float), z2, z2) / (n_z * nb)
    safe = np.where(fro > 0, fro, 1.0)
    g_cw2 = np.where((fro > 0)[..., None, None], c_w2 / safe[..., None, None], 0.0) / nb
    g_x1 = bp @ g_cw1 @ bpt
    g_y = bp[:, None] @ g_cw2 @ bpt[:, None]  # (B, m, n, n)

    jbt = np.swapaxes(jb, -1, -2)
    g_w0 = (
        np.swapaxes(jf, -1, -2) @ g_x1 + g_x1 @ jf + 2.0 * lam * g_x1
        - np.sum(jbt @ g_y + g_y @ jb, axis=1)
    )
    g_dw = -f[:, :, None, None] * g_x1[:, None] + np.einsum("bij,bjxy->bixy", b, g_y)
    g_m0 = g_cm @ np.swapaxes(a_cl, -1, -2) + a_cl @ g_cm + 2.0 * lam * g_cm
    g_dm = v[:, :, None, None] * g_cm[:, None]

    g_w_all = np.zeros_like(w_all)
    g_m_all = np.zeros_like(m_all)
    g_w_all[0] = g_w0
    g_m_all[0] = g_m0
    for i in range(n):
        s_i = inv2h[:, i, None, None]
        g_w_all[1 + 2 * i] += g_dw[:, i] * s_i
        g_w_all[2 + 2 * i] -= g_dw[:, i] * s_i
        g_m_all[1 + 2 * i] += g_dm[:, i] * s_i
        g_m_all[2 + 2 * i] -= g_dm[:, i] * s_i
    g_w_all -= m_all @ sym(g_m_all) @ m_all
    g_l = dual_backward(g_w_all, cache)
    g_vec = g_l[..., cmg.tril[0], cmg.tril[1]]
    res.grad_trunk = cmg.trunk.backward(stencil, g_vec)
    res.grad_log_std = -np.mean(alpha) * log_std_active(cmg.log_std)
    return res


class CmgTrainer:
    """Adam state for the generator trunk and its log-std vector."""

    def __init__(self, cmg: CmgNet, lr: float = 1e-3):
        self.cmg = cmg
        self.opt_trunk = AdamState(cmg.trunk.n_params, lr)
        self.opt_log_std = AdamState(cmg.p, lr)

    def apply(self, res: CmgLossResult) -> None:
        adam_step(self.opt_trunk, self.cmg.trunk.params, res.grad_trunk)
        adam_step(self.opt_log_std, self.cmg.log_std, res.grad_log_std)


def write_ccm_audit(
    path: str | Path, model, cmg: CmgNet, x: np.ndarray, u: np.ndarray, gain: np.ndarray, lam: float = 0.5
) -> None:
    """Per state: smallest eigenvalues of ``C_M`` and ``C_W1`` and the summed equality residual.

    A certified state has both eigenvalue columns negative and a zero residual.
    """
    x = np.atleast_2d(x)
    c_m = contraction_matrix(model, gain, cmg, x, u, lam)
    c_w1 = ccm_inequality(model, cmg, x, lam)
    c_w2 = ccm_equalities(model, cmg, x)
    fro = sum(np.sqrt(np.sum(c**2, axis=(-1, -2))) for c in c_w2)
    e_m = np.atleast_1d(min_eig_sym(c_m))
    e_w = np.atleast_1d(min_eig_sym(c_w1))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"x{i}" for i in range(x.shape[1])] + ["min_eig_CM", "min_eig_CW1", "sum_fro_CW2"])
        for k in range(x.shape[0]):
            w.writerow([repr(float(v)) for v in x[k]] + [repr(float(e_m[k])), repr(float(e_w[k])), repr(float(fro[k]))])
