"""Tracking metrics, numerical checks of the convergence argument, and report files."""

from __future__ import annotations

import csv
import itertools
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy import optimize, stats

from . import envs


@dataclass
class EpisodeResult:
    errors: np.ndarray  # ||x_k - x_d(k)||, k = 0 .. T-1
    length: int  # executed steps T
    horizon: int  # L
    terminated: bool

    @property
    def normalized(self) -> np.ndarray | None:
        e0 = self.errors[0]
        return None if e0 <= 0 else self.errors / e0


@dataclass
class MaucResult:
    value: float | None
    excluded: bool


def mauc(curve: Sequence[float], horizon: int, length: int | None = None) -> float:
    """``(L / T) * sum_k e_k`` over the ``T`` executed steps of a normalised error curve."""
    curve = np.asarray(curve, dtype=float)
    length = curve.size if length is None else int(length)
    if length < 1:
        raise ValueError("executed length must be >= 1")
    return float(horizon / length * np.sum(curve[:length]))


def episode_mauc(ep: EpisodeResult) -> MaucResult:
    norm = ep.normalized
    if norm is None:
        return MaucResult(None, True)
    return MaucResult(mauc(norm, ep.horizon, ep.length), False)


Policy = Callable[[np.ndarray, np.ndarray, np.ndarray, np.ndarray], np.ndarray]


def run_episodes(
    spec: envs.EnvSpec,
    policy: Policy,
    refs: Sequence[envs.ReferenceTrajectory],
    x0s: np.ndarray,
    energy_metric: Callable[[np.ndarray], np.ndarray] | None = None,
) -> tuple[list[EpisodeResult], list[np.ndarray]]:
    """Run one episode per (reference, initial state) pair in lock-step.

    ``policy(x, x_d, u_d, k)`` maps batched inputs to corrections ``du``.
    Returns the per-episode error records and, when ``energy_metric`` is given,
    the metric energies ``dx^T M(x) dx`` per step.
    """
    n_ep = len(refs)
    horizon = refs[0].horizon
    x = np.array(x0s, dtype=float)
    xd_all = np.stack([r.states for r in refs])  # (E, L+1, n)
    ud_all = np.stack([r.controls for r in refs])
    alive = np.ones(n_ep, dtype=bool)
    lengths = np.zeros(n_ep, dtype=int)
    terminated = np.zeros(n_ep, dtype=bool)
    errs = np.zeros((n_ep, horizon))
    energies = np.zeros((n_ep, horizon))
    for k in range(horizon):
        xd, ud = xd_all[:, k], ud_all[:, k]
        dx = spec.error(x, xd)
        errs[alive, k] = np.linalg.norm(dx[alive], axis=-1)
        if energy_metric is not None:
            m = energy_metric(x)
            energies[alive, k] = np.einsum("bi,bij,bj->b", dx, m, dx)[alive]
        du = policy(x, xd, ud, np.full(n_ep, k))
        u = spec.clip_u(ud + du)
        x_next = envs.euler_step(spec, x, u)
        lengths[alive] += 1
        out = ~spec.in_box(x_next) & alive
        terminated |= out
        alive &= ~out
        x = np.where(alive[:, None], x_next, x)
        if not alive.any():
            break
    results = [
        EpisodeResult(errors=errs[i, : lengths[i]].copy(), length=int(lengths[i]), horizon=horizon,
                      terminated=bool(terminated[i]))
        for i in range(n_ep)
    ]
    return results, [energies[i, : lengths[i]].copy() for i in range(n_ep)]


def make_eval_set(
    spec: envs.EnvSpec, rng: np.random.Generator, n_refs: int, trials: int = 1
) -> tuple[list[envs.ReferenceTrajectory], np.ndarray]:
    """``n_refs`` references, each with ``trials`` independent initial offsets."""
    refs, x0s = [], []
    for _ in range(n_refs):
        ref = envs.generate_reference(spec, rng)
        for _ in range(trials):
            refs.append(ref)
            x0s.append(envs.reset(spec, ref, rng))
    return refs, np.array(x0s)


def zero_policy(x, xd, ud, k):
    return np.zeros_like(ud)


# ---------------------------------------------------------------------------
# Convergence checks


@dataclass
class CheckResult:
    name: str
    passed: bool
    details: dict = field(default_factory=dict)


def lemma1_check(lam: float, dt: float, c: float, steps: int = 1000) -> CheckResult:
    """Partial sums of ``C exp(-2 lam k dt)`` against ``C / (1 - exp(-2 lam dt))``."""
    if lam <= 0 or dt <= 0:
        raise ValueError("lam and dt must be positive")
    ratio = math.exp(-2.0 * lam * dt)
    bound = c / (1.0 - ratio)
    partial = np.cumsum(c * ratio ** np.arange(steps + 1))
    margin = float(bound + 1e-9 - partial.max())
    return CheckResult("lemma1", margin >= 0.0, {
        "lam": lam, "dt": dt, "C": c, "steps": steps, "bound": bound,
        "final_partial_sum": float(partial[-1]), "margin": margin,
    })


def lemma1_sweep(rng: np.random.Generator, n: int = 100) -> CheckResult:
    results = []
    for _ in range(n):
        lam = float(rng.uniform(0.01, 5.0))
        dt = float(rng.uniform(1e-3, 0.5))
        c = float(rng.uniform(0.0, 100.0))
        results.append(lemma1_check(lam, dt, c))
    margins = [r.details["margin"] for r in results]
    return CheckResult("lemma1", all(r.passed for r in results), {"trials": n, "min_margin": float(min(margins))})


def _policy_values(p: np.ndarray, reward: np.ndarray, gamma: float, policy: Sequence[int]) -> np.ndarray:
    s = np.arange(p.shape[0])
    p_pi = p[s, policy]
    r_pi = reward[s, policy]
    return np.linalg.solve(np.eye(p.shape[0]) - gamma * p_pi, r_pi)


def lemma2_check(
    rng: np.random.Generator,
    n_states: int = 5,
    n_actions: int = 3,
    gamma: float = 0.9,
    reward: np.ndarray | None = None,
    tol: float = 1e-9,
) -> CheckResult:
    """Exhaustively compare the reward-maximising and cost-minimising policy sets.

    Each deterministic stationary policy is scored by its discounted value
    averaged over a uniform initial-state distribution, once with reward
    ``R`` and once with cost ``1 - R``; both solved exactly.
    """
    p = rng.dirichlet(np.ones(n_states), size=(n_states, n_actions))
    reward = rng.uniform(0.0, 1.0, size=(n_states, n_actions)) if reward is None else np.asarray(reward, float)
    cost = 1.0 - reward
    policies = list(itertools.product(range(n_actions), repeat=n_states))
    j_r = np.array([_policy_values(p, reward, gamma, pi).mean() for pi in policies])
    j_c = np.array([_policy_values(p, cost, gamma, pi).mean() for pi in policies])
    best_r = {i for i, v in enumerate(j_r) if v >= j_r.max() - tol}
    best_c = {i for i, v in enumerate(j_c) if v <= j_c.min() + tol}
    return CheckResult("lemma2", best_r == best_c, {
        "n_policies": len(policies), "argmax_reward": sorted(best_r), "argmin_cost": sorted(best_c),
    })


def lemma2_sweep(rng: np.random.Generator, n: int = 20) -> CheckResult:
    mismatches = sum(not lemma2_check(rng).passed for _ in range(n))
    return CheckResult("lemma2", mismatches == 0, {"instances": n, "mismatches": mismatches})


def fit_exponential_rate(curve: Sequence[float], dt: float = 1.0) -> float:
    """Decay rate of ``a * exp(-rate * t)`` fitted in linear space (robust to additive noise)."""
    y = np.asarray(curve, dtype=float)
    t = np.arange(y.size) * dt
    pos = y > 0
    if pos.sum() < 2:
        return 0.0
    slope, icpt = np.polyfit(t[pos], np.log(y[pos]), 1)
    try:
        (a, rate), _ = optimize.curve_fit(
            lambda tt, a, r: a * np.exp(-r * tt), t, y, p0=(math.exp(icpt), -slope), maxfev=10000
        )
    except RuntimeError:
        rate = -slope
    return float(rate)


def convergence_trend(curves: Sequence[Sequence[float]], dt: float = 1.0, energies=None) -> CheckResult:
    """Finite-horizon convergence statistics for a set of evaluation episodes.

    Reports the mean normalised error over the final 10% of steps and the
    fitted exponential decay rate of the (mean) energy curve; asymptotic
    convergence itself cannot be asserted from a finite rollout.
    """
    if len(curves) < 10:
        raise ValueError("need at least 10 episodes")
    length = max(len(c) for c in curves)
    # episodes that ended early keep their last value
    padded = np.array([np.pad(np.asarray(c, float), (0, length - len(c)), mode="edge") for c in curves])
    tail = max(1, int(math.ceil(0.1 * length)))
    final_mean = float(padded[:, -tail:].mean())
    series = padded if energies is None else np.array(
        [np.pad(np.asarray(e, float), (0, length - len(e)), mode="edge") for e in energies]
    )
    rate = fit_exponential_rate(series.mean(axis=0), dt)
    return CheckResult("convergence_trend", bool(rate > 0 and final_mean < 1.0), {
        "final_10pct_mean_error": final_mean, "fitted_rate": rate, "episodes": len(curves),
        "note": "finite-horizon trend only",
    })


def aggregate(values: Sequence[float], confidence: float = 0.95) -> dict:
    """Mean and normal-approximation CI half-width ``z * s / sqrt(n)``."""
    v = np.asarray(values, dtype=float)
    if v.size < 2:
        raise ValueError("aggregate needs at least two runs")
    z = float(stats.norm.ppf(0.5 + confidence / 2.0))
    s = float(np.std(v, ddof=1))
    return {"mean": float(v.mean()), "half_width": z * s / math.sqrt(v.size), "n": int(v.size),
            "confidence": confidence}


# ---------------------------------------------------------------------------
# Report bundle


@dataclass
class RunReport:
    episodes: list[EpisodeResult]
    maucs: list[MaucResult]
    checks: list[CheckResult] = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    @property
    def mauc_values(self) -> list[float]:
        return [m.value for m in self.maucs if not m.excluded]

    @property
    def mean_mauc(self) -> float:
        vals = self.mauc_values
        return float(np.mean(vals)) if vals else float("nan")

    def final_error(self, frac: float = 0.1) -> float:
        curves = [ep.normalized for ep in self.episodes if ep.normalized is not None]
        length = self.episodes[0].horizon
        padded = np.array([np.pad(c, (0, length - len(c)), mode="edge") for c in curves])
        tail = max(1, int(math.ceil(frac * length)))
        return float(padded[:, -tail:].mean())

    def summary(self, confidence: float = 0.95) -> dict:
        vals = self.mauc_values
        out = {
            "episodes": len(self.episodes),
            "excluded_zero_initial_error": sum(m.excluded for m in self.maucs),
            "terminated_early": sum(ep.terminated for ep in self.episodes),
            "mauc_mean": self.mean_mauc,
            "final_10pct_error": self.final_error(),
        }
        if len(vals) >= 2:
            out["mauc_ci"] = aggregate(vals, confidence)
        return out


def build_report(episodes: list[EpisodeResult], meta: dict | None = None) -> RunReport:
    return RunReport(episodes=episodes, maucs=[episode_mauc(ep) for ep in episodes], meta=meta or {})


def _num(v: float) -> str:
    return repr(float(v))


def write_report(outdir: str | Path, report: RunReport, confidence: float = 0.95) -> dict[str, Path]:
    """Write ``report.json``, ``curves.csv`` and ``mauc.csv``; returns their paths."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    paths = {"report": outdir / "report.json", "curves": outdir / "curves.csv", "mauc": outdir / "mauc.csv"}
    body = {
        "summary": report.summary(confidence),
        "checks": [asdict(c) for c in report.checks],
        "meta": report.meta,
    }
    with open(paths["report"], "w") as fh:
        json.dump(body, fh, indent=2, sort_keys=True, default=float)
    with open(paths["curves"], "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["episode", "k", "error", "normalized_error"])
        for i, ep in enumerate(report.episodes):
            norm = ep.normalized
            for k, e in enumerate(ep.errors):
                w.writerow([i, k, _num(e), "" if norm is None else _num(norm[k])])
    with open(paths["mauc"], "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["episode", "length", "terminated", "mauc", "excluded"])
        for i, (ep, m) in enumerate(zip(report.episodes, report.maucs)):
            w.writerow([i, ep.length, int(ep.terminated), "" if m.value is None else _num(m.value), int(m.excluded)])
    return paths
