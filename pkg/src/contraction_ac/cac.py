"""Contraction actor-critic training: metric-shaped reward, PPO with GAE, and the
freeze-and-learn generator schedule. ``train_ppo_baseline`` is the same loop
with the identity metric and no generator.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import envs
from .autodiff_net import (
    AdamState,
    DiagGaussian,
    Mlp,
    adam_step,
    clip_grad_norm,
    load_checkpoint,
    log_std_active,
    save_checkpoint,
)
from .ccm import CmgNet, CmgTrainer, cmg_loss
from .eval_report import RunReport, build_report, make_eval_set, run_episodes
from .numerics import make_rng, sym

log = logging.getLogger(__name__)

ACTOR_WIDTHS = (64, 64)
CRITIC_WIDTHS = (128, 128)
# initial exploration std as a fraction of the control half-width
INIT_STD_FRAC = 1.0 / 6.0


class TrainingAbort(RuntimeError):
    pass


@dataclass
class TrainConfig:
    gamma: float = 0.99
    gae_lambda: float = 0.95
    clip: float = 0.2
    k_epochs: int = 10
    target_kl: float = 0.03
    beta_pi: float = 1e-2
    beta_cmg: float = 1e-2
    lam: float = 0.5
    # policy iterations per generator update; None never updates the generator
    cmg_every: int | None = 10
    cmg_minibatches: int = 4
    n_z: int = 32
    w_lb: float = 0.1
    w_ub: float = 10.0
    total_steps: int = 300_000
    n_envs: int = 4
    n_steps: int = 256
    n_minibatches: int = 4
    lr_actor: float = 3e-4
    lr_critic: float = 1e-3
    lr_cmg: float = 1e-3
    max_grad_norm: float | None = 0.5
    eval_every: int = 10
    eval_episodes: int = 20
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.gamma < 1.0:
            raise ValueError("gamma must lie in (0, 1)")
        if self.cmg_every is not None and self.cmg_every < 1:
            raise ValueError("cmg_every must be >= 1 or None")

    @property
    def batch_size(self) -> int:
        return self.n_envs * self.n_steps


# ---------------------------------------------------------------------------
# Actor-critic


class ActorCritic:
    """Actor input is ``[x, x_d - x, u_d, k / L]``; it outputs the mean control correction."""

    def __init__(self, spec: envs.EnvSpec, rng: np.random.Generator | None = None):
        self.spec = spec
        n, m = spec.n, spec.m
        self.obs_dim = 2 * n + m + 1
        self.actor = Mlp([self.obs_dim, *ACTOR_WIDTHS, m], rng, out_gain=1e-2)
        self.critic = Mlp([self.obs_dim, *CRITIC_WIDTHS, 1], rng, out_gain=1.0)
        self.log_std = np.log(INIT_STD_FRAC * spec.u_halfwidth)

    def obs(self, x, x_d, u_d, k) -> np.ndarray:
        spec = self.spec
        err = -spec.error(x, x_d)
        t = np.asarray(k, dtype=float)[..., None] / spec.horizon
        return np.concatenate([np.asarray(x, float), err, np.asarray(u_d, float), t], axis=-1)

    def dist(self, obs: np.ndarray) -> DiagGaussian:
        return DiagGaussian(self.actor(obs), self.log_std)

    def entropy(self) -> float:
        return float(DiagGaussian(np.zeros_like(self.log_std), self.log_std).entropy())

    def value(self, obs: np.ndarray) -> np.ndarray:
        return self.critic(obs)[..., 0]

    def act_deterministic(self, x, x_d, u_d, k) -> np.ndarray:
        return self.actor(self.obs(x, x_d, u_d, k))

    def gain(self, x, x_d, u_d, k) -> np.ndarray:
        """``d mean / d x`` with the reference held fixed, shape ``(..., m, n)``."""
        n = self.spec.n
        jac = self.actor.input_jacobian(self.obs(x, x_d, u_d, k))
        return jac[..., :, :n] - jac[..., :, n : 2 * n]

    def snapshot(self) -> dict[str, np.ndarray]:
        return {"actor": self.actor.params.copy(), "critic": self.critic.params.copy(),
                "log_std": self.log_std.copy()}

    def restore(self, snap: dict[str, np.ndarray]) -> None:
        self.actor.params[:] = snap["actor"]
        self.critic.params[:] = snap["critic"]
        self.log_std = snap["log_std"].copy()

    def save(self, prefix: str | Path, seed: int, step: int) -> None:
        prefix = Path(prefix)
        meta = {"env": self.spec.name, "dt": self.spec.dt, "horizon": self.spec.horizon}
        save_checkpoint(prefix.with_name(prefix.name + "_actor.ckpt"), self.actor, "actor", seed, step,
                        extras={"log_std": self.log_std}, meta=meta)
        save_checkpoint(prefix.with_name(prefix.name + "_critic.ckpt"), self.critic, "critic", seed, step, meta=meta)

    @classmethod
    def load(cls, prefix: str | Path, spec: envs.EnvSpec) -> "ActorCritic":
        prefix = Path(prefix)
        ac = cls(spec)
        actor, _, extras = load_checkpoint(prefix.with_name(prefix.name + "_actor.ckpt"))
        critic, _, _ = load_checkpoint(prefix.with_name(prefix.name + "_critic.ckpt"))
        ac.actor, ac.critic, ac.log_std = actor, critic, extras["log_std"]
        return ac


# ---------------------------------------------------------------------------
# Reward and advantages


def tracking_term(m: np.ndarray, dx: np.ndarray) -> np.ndarray:
    """``1 / (1 + dx^T M dx)``, in (0, 1] for positive-definite ``M``."""
    q = np.einsum("...i,...ij,...j->...", dx, m, dx)
    return 1.0 / (1.0 + q)


def reward(m: np.ndarray, x: np.ndarray, x_d: np.ndarray, policy_entropy: float, beta_pi: float = 1e-2,
           spec: envs.EnvSpec | None = None) -> np.ndarray:
    dx = spec.error(x, x_d) if spec is not None else np.asarray(x, float) - np.asarray(x_d, float)
    return tracking_term(m, dx) + beta_pi * policy_entropy


def gae_returns(
    rewards: np.ndarray,
    values: np.ndarray,
    dones: np.ndarray,
    gamma: float,
    gae_lambda: float,
    bootstrap: np.ndarray | None = None,
    last_value: np.ndarray | float = 0.0,
) -> tuple[np.ndarray, np.ndarray]:
    """GAE over time-major arrays ``(T, ...)``.

    ``dones[t]`` ends the episode after step ``t``; the value used beyond it is
    ``bootstrap[t]`` (0 on termination, the critic's value of the final state
    on truncation). ``last_value`` bootstraps the unfinished tail of the buffer.
    """
    rewards = np.asarray(rewards, dtype=float)
    if rewards.shape[0] == 0:
        raise ValueError("empty buffer")
    values = np.asarray(values, dtype=float)
    dones = np.asarray(dones, dtype=bool)
    bootstrap = np.zeros_like(rewards) if bootstrap is None else np.asarray(bootstrap, dtype=float)
    adv = np.zeros_like(rewards)
    next_adv = np.zeros_like(rewards[0])
    next_value = np.broadcast_to(np.asarray(last_value, dtype=float), rewards[0].shape)
    for t in range(rewards.shape[0] - 1, -1, -1):
        nv = np.where(dones[t], bootstrap[t], next_value)
        na = np.where(dones[t], 0.0, next_adv)
        delta = rewards[t] + gamma * nv - values[t]
        adv[t] = delta + gamma * gae_lambda * na
        next_adv, next_value = adv[t], values[t]
    return adv, adv + values


# ---------------------------------------------------------------------------
# Rollout buffer


@dataclass
class RolloutBuffer:
    obs: np.ndarray
    x: np.ndarray
    x_d: np.ndarray
    u_d: np.ndarray
    k: np.ndarray
    du: np.ndarray
    u: np.ndarray
    log_prob: np.ndarray
    reward: np.ndarray
    tracking: np.ndarray
    value: np.ndarray
    done: np.ndarray
    truncated: np.ndarray
    bootstrap: np.ndarray
    last_value: np.ndarray
    advantage: np.ndarray | None = None
    returns: np.ndarray | None = None

    @property
    def size(self) -> int:
        return self.reward.size

    def flat(self, name: str) -> np.ndarray:
        a = getattr(self, name)
        return a.reshape((-1,) + a.shape[2:])

    def digest(self) -> str:
        h = hashlib.sha256()
        for name in ("x", "du", "u", "reward"):
            h.update(np.ascontiguousarray(getattr(self, name)).tobytes())
        return h.hexdigest()


MetricFn = Callable[[np.ndarray, np.ndarray], np.ndarray]


class VecTracker:
    """``n_envs`` tracking episodes advanced in lock-step; finished slots restart on a fresh reference."""

    def __init__(self, spec: envs.EnvSpec, n_envs: int, rng: np.random.Generator,
                 noise_rng: np.random.Generator, noise_dim: int):
        self.spec = spec
        self.n_envs = n_envs
        self.rng = rng
        self.noise_rng = noise_rng
        self.noise_dim = noise_dim
        self.refs: list[envs.ReferenceTrajectory] = [None] * n_envs  # type: ignore[list-item]
        self.k = np.zeros(n_envs, dtype=int)
        self.x = np.zeros((n_envs, spec.n))
        self.eps = np.zeros((n_envs, noise_dim))
        self.episode_returns: list[float] = []
        self._ret = np.zeros(n_envs)
        for i in range(n_envs):
            self._restart(i)

    def _restart(self, i: int) -> None:
        ref = envs.generate_reference(self.spec, self.rng)
        self.refs[i] = ref
        self.x[i] = envs.reset(self.spec, ref, self.rng)
        self.k[i] = 0
        self.eps[i] = self.noise_rng.standard_normal(self.noise_dim)
        self._ret[i] = 0.0

    def reference(self, offset: int = 0) -> tuple[np.ndarray, np.ndarray]:
        xd = np.stack([r.states[min(k + offset, r.horizon)] for r, k in zip(self.refs, self.k)])
        ud = np.stack([r.controls[min(k + offset, r.horizon - 1)] for r, k in zip(self.refs, self.k)])
        return xd, ud


def collect_rollout(
    ac: ActorCritic, vec: VecTracker, cfg: TrainConfig, act_rng: np.random.Generator, metric_fn: MetricFn
) -> RolloutBuffer:
    spec = vec.spec
    t_n, e_n, n, m = cfg.n_steps, vec.n_envs, spec.n, spec.m
    z = lambda *s: np.zeros((t_n, e_n) + s)  # noqa: E731
    buf = RolloutBuffer(
        obs=z(ac.obs_dim), x=z(n), x_d=z(n), u_d=z(m), k=np.zeros((t_n, e_n), dtype=int), du=z(m), u=z(m),
        log_prob=z(), reward=z(), tracking=z(), value=z(), done=np.zeros((t_n, e_n), bool),
        truncated=np.zeros((t_n, e_n), bool), bootstrap=z(), last_value=np.zeros(e_n),
    )
    ent = ac.entropy()
    for t in range(t_n):
        xd, ud = vec.reference()
        obs = ac.obs(vec.x, xd, ud, vec.k)
        dist = ac.dist(obs)
        du = dist.sample(act_rng)
        u = spec.clip_u(ud + du)
        x_next = envs.euler_step(spec, vec.x, u)
        xd_next, ud_next = vec.reference(1)
        track = tracking_term(metric_fn(x_next, vec.eps), spec.error(x_next, xd_next))
        out = ~spec.in_box(x_next)
        last = vec.k + 1 >= spec.horizon
        done = out | last
        trunc = last & ~out
        buf.obs[t], buf.x[t], buf.x_d[t], buf.u_d[t], buf.k[t] = obs, vec.x, xd, ud, vec.k
        buf.du[t], buf.u[t], buf.log_prob[t] = du, u, dist.log_prob(du)
        buf.tracking[t] = track
        buf.reward[t] = track + cfg.beta_pi * ent
        buf.value[t] = ac.value(obs)
        buf.done[t], buf.truncated[t] = done, trunc
        if trunc.any():
            buf.bootstrap[t] = np.where(trunc, ac.value(ac.obs(x_next, xd_next, ud_next, vec.k + 1)), 0.0)
        vec._ret += buf.reward[t]
        vec.x = x_next
        vec.k = vec.k + 1
        for i in np.flatnonzero(done):
            vec.episode_returns.append(float(vec._ret[i]))
            vec._restart(i)
    xd, ud = vec.reference()
    buf.last_value = ac.value(ac.obs(vec.x, xd, ud, vec.k))
    if not np.all(np.isfinite(buf.reward)):
        raise TrainingAbort("non-finite reward in rollout")
    return buf


# ---------------------------------------------------------------------------
# PPO


@dataclass
class PpoStats:
    actor_loss: float
    critic_loss: float
    approx_kl: float
    epochs: int
    early_stop: bool
    clip_frac: float
    updates: int
    adv_mean: float
    adv_std: float
    kl_trace: list[float] = field(default_factory=list)


class PpoOptim:
    def __init__(self, ac: ActorCritic, cfg: TrainConfig):
        self.actor = AdamState(ac.actor.n_params + ac.log_std.size, cfg.lr_actor)
        self.critic = AdamState(ac.critic.n_params, cfg.lr_critic)


def actor_loss_grad(
    ac: ActorCritic, obs: np.ndarray, acts: np.ndarray, old_logp: np.ndarray, adv: np.ndarray,
    clip: float, beta_pi: float, mean: np.ndarray | None = None,
) -> tuple[float, np.ndarray, float]:
    """Clipped surrogate minus entropy bonus; gradient over ``[actor params, log_std]``."""
    mean = ac.actor(obs) if mean is None else mean
    dist = DiagGaussian(mean, ac.log_std)
    ratio = np.exp(dist.log_prob(acts) - old_logp)
    clipped = np.clip(ratio, 1.0 - clip, 1.0 + clip)
    surr = np.minimum(ratio * adv, clipped * adv)
    in_range = (ratio > 1.0 - clip) & (ratio < 1.0 + clip)
    # the min picks the unclipped branch, or the clip is inactive
    ds_dr = np.where((ratio * adv <= clipped * adv) | in_range, adv, 0.0)
    loss = float(-surr.mean() - beta_pi * float(dist.entropy()))
    coef = -ds_dr * ratio / obs.shape[0]  # dL/dlogp
    std = dist.std
    g_mean = coef[:, None] * (acts - mean) / std**2
    g_log_std = np.sum(coef[:, None] * ((acts - mean) ** 2 / std**2 - 1.0), axis=0)
    g_log_std = (g_log_std - beta_pi) * log_std_active(ac.log_std)
    grad = np.concatenate([ac.actor.backward(obs, g_mean), g_log_std])
    return loss, grad, float(np.mean(~in_range))


def ppo_update(
    ac: ActorCritic, buf: RolloutBuffer, cfg: TrainConfig, opt: PpoOptim, rng: np.random.Generator
) -> PpoStats:
    """Clipped-surrogate PPO with an entropy bonus, critic regression, and approximate-KL early stop.

    The KL check runs before every minibatch step; once the mean approximate
    KL on a minibatch exceeds ``target_kl`` the update stops.
    """
    if buf.advantage is None:
        raise ValueError("advantages must be computed before the update")
    obs = buf.flat("obs")
    acts = buf.flat("du")
    old_logp = buf.flat("log_prob")
    ret = buf.flat("returns")
    adv = buf.flat("advantage")
    adv = (adv - adv.mean()) / (adv.std() + 1e-12)
    n_total = obs.shape[0]
    mb = n_total // cfg.n_minibatches
    n_actor = ac.actor.n_params
    actor_losses, critic_losses, kls, clipfracs = [], [], [], []
    early, epochs = False, 0
    for _ in range(cfg.k_epochs):
        epochs += 1
        order = rng.permutation(n_total)
        for s in range(cfg.n_minibatches):
            idx = order[s * mb : (s + 1) * mb]
            o, a, a_old, A, R = obs[idx], acts[idx], old_logp[idx], adv[idx], ret[idx]
            mean = ac.actor(o)
            dist = DiagGaussian(mean, ac.log_std)
            logp = dist.log_prob(a)
            log_ratio = logp - a_old
            ratio = np.exp(log_ratio)
            kl = float(np.mean((ratio - 1.0) - log_ratio))
            kls.append(kl)
            if kl > cfg.target_kl:
                early = True
                break
            loss, g_actor, clip_frac = actor_loss_grad(ac, o, a, a_old, A, cfg.clip, cfg.beta_pi, mean=mean)
            actor_losses.append(loss)
            clipfracs.append(clip_frac)
            g_actor = clip_grad_norm(g_actor, cfg.max_grad_norm)
            flat = np.concatenate([ac.actor.params, ac.log_std])
            adam_step(opt.actor, flat, g_actor)
            ac.actor.params[:] = flat[:n_actor]
            ac.log_std = flat[n_actor:].copy()

            v = ac.value(o)
            critic_losses.append(float(np.mean((v - R) ** 2)))
            g_v = (2.0 * (v - R) / len(idx))[:, None]
            g_c = clip_grad_norm(ac.critic.backward(o, g_v), cfg.max_grad_norm)
            adam_step(opt.critic, ac.critic.params, g_c)
            if not (np.isfinite(actor_losses[-1]) and np.isfinite(critic_losses[-1])):
                raise TrainingAbort(f"non-finite PPO loss (actor {actor_losses[-1]}, critic {critic_losses[-1]})")
        if early:
            break
    return PpoStats(
        actor_loss=float(np.mean(actor_losses)) if actor_losses else float("nan"),
        critic_loss=float(np.mean(critic_losses)) if critic_losses else float("nan"),
        approx_kl=float(np.mean(kls)) if kls else 0.0,
        epochs=epochs, early_stop=early,
        clip_frac=float(np.mean(clipfracs)) if clipfracs else 0.0,
        updates=len(actor_losses), adv_mean=float(adv.mean()), adv_std=float(adv.std()), kl_trace=kls,
    )


# ---------------------------------------------------------------------------
# Training loop


@dataclass
class TrainResult:
    ac: ActorCritic
    cmg: CmgNet | None
    log: list[dict]
    best_mauc: float
    initial_mauc: float
    best_iteration: int
    digests: list[str]
    cmg_hashes: list[str | None]
    eval_report: RunReport
    initial_report: RunReport


def identity_metric(spec: envs.EnvSpec) -> MetricFn:
    eye = np.eye(spec.n)
    return lambda x, eps: np.broadcast_to(eye, x.shape[:-1] + eye.shape)


def cmg_metric(cmg: CmgNet) -> MetricFn:
    def fn(x, eps):
        return sym(np.linalg.inv(cmg.dual_with_noise(x, eps)))

    return fn


def evaluate(ac: ActorCritic, spec: envs.EnvSpec, refs, x0s) -> RunReport:
    eps, _ = run_episodes(spec, ac.act_deterministic, refs, x0s)
    return build_report(eps)


def _train(
    spec: envs.EnvSpec,
    cfg: TrainConfig,
    model=None,
    with_cmg: bool = True,
    pin_identity: bool = False,
    log_path: str | Path | None = None,
) -> TrainResult:
    seed = cfg.seed
    ac = ActorCritic(spec, make_rng(seed, "init"))
    cmg = CmgNet(spec.n, make_rng(seed, "cmg-init"), w_lb=cfg.w_lb, w_ub=cfg.w_ub) if with_cmg else None
    trainer = CmgTrainer(cmg, cfg.lr_cmg) if cmg is not None else None
    metric_fn = cmg_metric(cmg) if cmg is not None and not pin_identity else identity_metric(spec)
    noise_dim = spec.n * (spec.n + 1) // 2
    vec = VecTracker(spec, cfg.n_envs, make_rng(seed, "env"), make_rng(seed, "cmg-noise"), noise_dim)
    act_rng, ppo_rng, z_rng = make_rng(seed, "actor"), make_rng(seed, "ppo"), make_rng(seed, "z")
    cmg_rng = make_rng(seed, "cmg-batch")
    opt = PpoOptim(ac, cfg)
    eval_refs, eval_x0 = make_eval_set(spec, make_rng(seed, "eval"), cfg.eval_episodes)
    initial = evaluate(ac, spec, eval_refs, eval_x0)
    best = (initial.mean_mauc, ac.snapshot(), cmg.copy() if cmg else None, -1, initial)
    n_iter = max(1, cfg.total_steps // cfg.batch_size)
    records, digests, hashes = [], [], []
    logfh = open(log_path, "w") if log_path else None
    try:
        for it in range(n_iter):
            buf = collect_rollout(ac, vec, cfg, act_rng, metric_fn)
            buf.advantage, buf.returns = gae_returns(
                buf.reward, buf.value, buf.done, cfg.gamma, cfg.gae_lambda, buf.bootstrap, buf.last_value
            )
            digests.append(buf.digest())
            rec: dict = {"iteration": it, "step": (it + 1) * cfg.batch_size,
                         "mean_reward": float(buf.reward.mean()), "mean_tracking": float(buf.tracking.mean())}
            if trainer is not None and cfg.cmg_every is not None and it % cfg.cmg_every == 0:
                rec.update(_cmg_update(model, ac, cmg, trainer, buf, cfg, cmg_rng, z_rng))
            hashes.append(cmg.params_hash() if cmg is not None else None)
            st = ppo_update(ac, buf, cfg, opt, ppo_rng)
            rec.update(actor_loss=st.actor_loss, critic_loss=st.critic_loss, kl=st.approx_kl,
                       ppo_epochs=st.epochs, early_stop=st.early_stop, entropy=ac.entropy(),
                       adv_mean=st.adv_mean, adv_std=st.adv_std)
            if (it + 1) % cfg.eval_every == 0 or it == n_iter - 1:
                rep = evaluate(ac, spec, eval_refs, eval_x0)
                rec["eval_mauc"] = rep.mean_mauc
                if rep.mean_mauc < best[0]:
                    best = (rep.mean_mauc, ac.snapshot(), cmg.copy() if cmg else None, it, rep)
            records.append(rec)
            if logfh:
                logfh.write(json.dumps(rec, sort_keys=True) + "\n")
            log.info("iter %d %s", it, {k: v for k, v in rec.items() if k in ("mean_tracking", "eval_mauc", "kl")})
    finally:
        if logfh:
            logfh.close()
    ac.restore(best[1])
    return TrainResult(
        ac=ac, cmg=best[2] if best[2] is not None else cmg, log=records, best_mauc=best[0],
        initial_mauc=initial.mean_mauc, best_iteration=best[3], digests=digests, cmg_hashes=hashes,
        eval_report=best[4], initial_report=initial,
    )


def _cmg_update(model, ac, cmg, trainer, buf, cfg, batch_rng, z_rng) -> dict:
    x, u = buf.flat("x"), buf.flat("u")
    gain = ac.gain(x, buf.flat("x_d"), buf.flat("u_d"), buf.flat("k"))
    r = buf.flat("tracking")
    order = batch_rng.permutation(x.shape[0])
    mb = x.shape[0] // cfg.cmg_minibatches
    losses = []
    for s in range(cfg.cmg_minibatches):
        idx = order[s * mb : (s + 1) * mb]
        res = cmg_loss(model, cmg, x[idx], u[idx], gain[idx], r[idx], z_rng,
                       lam=cfg.lam, beta=cfg.beta_cmg, n_z=cfg.n_z)
        trainer.apply(res)
        losses.append(res)
    return {
        "cmg_loss": float(np.mean([l.loss for l in losses])),
        "cmg_pd_contraction": float(np.mean([l.pd_contraction for l in losses])),
        "cmg_pd_ccm": float(np.mean([l.pd_ccm for l in losses])),
        "cmg_frobenius": float(np.mean([l.frobenius for l in losses])),
        "cmg_entropy": float(losses[-1].entropy),
    }


def train_cac(spec: envs.EnvSpec, model, cfg: TrainConfig, pin_identity: bool = False,
              log_path: str | Path | None = None) -> TrainResult:
    """Joint generator/policy training on a pretrained dynamics model.

    ``pin_identity`` shapes the reward with ``M = I`` instead of the generator's
    metric; with ``cmg_every=None`` this reproduces the PPO baseline exactly.
    """
    if model is None and cfg.cmg_every is not None:
        raise ValueError("train_cac needs a pretrained dynamics model")
    return _train(spec, cfg, model, with_cmg=True, pin_identity=pin_identity, log_path=log_path)


def train_ppo_baseline(spec: envs.EnvSpec, cfg: TrainConfig, log_path: str | Path | None = None) -> TrainResult:
    return _train(spec, cfg, None, with_cmg=False, log_path=log_path)


def config_dict(cfg: TrainConfig) -> dict:
    return asdict(cfg)
