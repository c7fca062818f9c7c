"""Command-line pipeline: collect -> pretrain -> train-cac / train-ppo -> eval, plus theory checks.

Every stage writes into ``<out>/<stage>/`` and leaves a ``manifest.json`` with
the config hash, seed, version string and the hashes of its upstream manifests.
Exit codes: 0 success, 1 training abort, 2 configuration or input error.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import subprocess
import sys
from pathlib import Path

import numpy as np

from . import __version__, envs
from .cac import ActorCritic, TrainingAbort, train_cac, train_ppo_baseline
from .ccm import CmgLossError, CmgNet, write_ccm_audit
from .config import ConfigError, RunConfig, load
from .eval_report import (
    CheckResult,
    build_report,
    convergence_trend,
    lemma1_sweep,
    lemma2_sweep,
    make_eval_set,
    run_episodes,
    write_report,
)
from .numerics import NonFiniteError, make_rng
from .sysid import DivergenceError, DynModel, collect_data, load_dataset, pretrain, save_dataset

log = logging.getLogger("contraction_ac")

STAGES = ("collect", "pretrain", "train-cac", "train-ppo", "eval", "theory")


class MissingInput(RuntimeError):
    pass


def version_string() -> str:
    here = Path(__file__).resolve().parent
    try:
        rev = subprocess.run(
            ["git", "rev-parse", "--short", "HEAD"], cwd=here, capture_output=True, text=True, timeout=5, check=True
        ).stdout.strip()
    except (OSError, subprocess.SubprocessError):
        rev = "unknown"
    return f"v{__version__}-g{rev}"


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_manifest(stage_dir: Path, stage: str, cfg: RunConfig, upstream: dict[str, str] | None = None) -> Path:
    files = sorted(p for p in stage_dir.iterdir() if p.is_file() and p.name != "manifest.json")
    body = {
        "stage": stage,
        "config_hash": cfg.hash(),
        "seed": cfg.seed,
        "env": cfg.env,
        "version": version_string(),
        "upstream": upstream or {},
        "files": {p.name: _sha256(p) for p in files},
        "config": cfg.to_dict(),
    }
    path = stage_dir / "manifest.json"
    path.write_text(json.dumps(body, indent=2, sort_keys=True) + "\n")
    return path


def _require(path: Path, what: str, stage: str) -> Path:
    if not path.exists():
        raise MissingInput(f"{what} not found at {path} (run `{stage}` first)")
    return path


def _upstream(root: Path, stage: str, cfg: RunConfig) -> dict[str, str]:
    mpath = root / stage / "manifest.json"
    if not mpath.exists():
        return {}
    h = json.loads(mpath.read_text())["config_hash"]
    if h != cfg.hash():
        log.warning("%s was produced under config %s, current config is %s", stage, h, cfg.hash())
    return {stage: h}


def _stage_dir(cfg: RunConfig, stage: str) -> Path:
    d = Path(cfg.output) / stage
    d.mkdir(parents=True, exist_ok=True)
    return d


def _threads() -> int:
    raw = os.environ.get("CAC_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"CAC_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError(f"CAC_THREADS must be a positive integer, got {raw!r}")
    return n


def _spec(cfg: RunConfig) -> envs.EnvSpec:
    return envs.make_env(cfg.env, dt=cfg.dt, horizon=cfg.horizon)


# ---------------------------------------------------------------------------
# Stages


def cmd_collect(cfg: RunConfig) -> int:
    spec = _spec(cfg)
    d = cfg.dynamics
    noise = None if d.noise_std is None else np.asarray(d.noise_std, dtype=float)
    if noise is not None and noise.shape != (spec.m,):
        raise ConfigError(f"dynamics/noise_std needs {spec.m} entries for env {cfg.env!r}")
    data = collect_data(spec, make_rng(cfg.seed, "collect"), d.episodes, noise, threads=_threads())
    out = _stage_dir(cfg, "collect")
    noise_std = (0.1 * (spec.u_max - spec.u_min)) if noise is None else noise
    save_dataset(out / "dataset.csv", data, {
        "env": cfg.env, "dt": cfg.dt, "noise_std": [float(v) for v in noise_std], "seed": cfg.seed,
        "episodes": d.episodes, "samples": len(data),
    })
    write_manifest(out, "collect", cfg)
    print(f"collected {len(data)} samples from {d.episodes} episodes -> {out / 'dataset.csv'}")
    return 0


def cmd_pretrain(cfg: RunConfig) -> int:
    root = Path(cfg.output)
    data, sidecar = load_dataset(_require(root / "collect" / "dataset.csv", "dataset", "collect"))
    if sidecar.get("env") != cfg.env:
        raise ConfigError(f"dataset was collected on {sidecar.get('env')!r}, config env is {cfg.env!r}")
    spec = _spec(cfg)
    d = cfg.dynamics
    model = DynModel(spec.n, spec.m, make_rng(cfg.seed, "dyn-init"), widths=tuple(d.widths))
    res = pretrain(model, data, make_rng(cfg.seed, "dyn-train"), batch=d.batch, epochs=d.epochs, lr=d.lr,
                   val_frac=d.val_frac, patience=d.patience)
    out = _stage_dir(cfg, "pretrain")
    model.save(out / "dynamics", cfg.seed, len(res.train_loss), meta={"env": cfg.env})
    with open(out / "loss.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "train_loss", "val_loss"])
        for i, (a, b) in enumerate(zip(res.train_loss, res.val_loss)):
            w.writerow([i, repr(a), repr(b)])
    summary = {"best_epoch": res.best_epoch, "stopped_early": res.stopped_early,
               "best_val_loss": min(res.val_loss), "final_train_loss": res.train_loss[-1]}
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    write_manifest(out, "pretrain", cfg, _upstream(root, "collect", cfg))
    print(f"pretrained dynamics: best val loss {summary['best_val_loss']:.5f} at epoch {res.best_epoch}")
    return 0


def _write_train_outputs(out: Path, cfg: RunConfig, res, stage: str) -> None:
    res.ac.save(out / "policy", cfg.seed, len(res.log))
    summary = {"initial_mauc": res.initial_mauc, "best_mauc": res.best_mauc, "best_iteration": res.best_iteration,
               "iterations": len(res.log), "final_10pct_error": res.eval_report.final_error()}
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    print(f"{stage}: eval MAUC {res.initial_mauc:.2f} -> {res.best_mauc:.2f} (iteration {res.best_iteration})")


def cmd_train_cac(cfg: RunConfig) -> int:
    root = Path(cfg.output)
    _require(root / "pretrain" / "dynamics_f.ckpt", "dynamics checkpoint", "pretrain")
    _require(root / "pretrain" / "dynamics_B.ckpt", "dynamics checkpoint", "pretrain")
    model = DynModel.load(root / "pretrain" / "dynamics")
    spec = _spec(cfg)
    out = _stage_dir(cfg, "train-cac")
    res = train_cac(spec, model, cfg.train_config(), log_path=out / "train_log.jsonl")
    _write_train_outputs(out, cfg, res, "train-cac")
    res.cmg.save(out / "cmg.ckpt", cfg.seed, len(res.log))
    # certificate audit along one held-out reference
    ref = envs.generate_reference(spec, make_rng(cfg.seed, "audit"))
    x, ud = ref.states[:-1], ref.controls
    k = np.arange(ref.horizon)
    gain = res.ac.gain(x, x, ud, k)
    write_ccm_audit(out / "ccm_audit.csv", model, res.cmg, x, ud, gain, cfg.cmg.lam)
    write_manifest(out, "train-cac", cfg, _upstream(root, "pretrain", cfg))
    return 0


def cmd_train_ppo(cfg: RunConfig) -> int:
    out = _stage_dir(cfg, "train-ppo")
    res = train_ppo_baseline(_spec(cfg), cfg.train_config(), log_path=out / "train_log.jsonl")
    _write_train_outputs(out, cfg, res, "train-ppo")
    write_manifest(out, "train-ppo", cfg)
    return 0


def cmd_eval(cfg: RunConfig, policy: str = "cac") -> int:
    root = Path(cfg.output)
    spec = _spec(cfg)
    energy = None
    upstream: dict[str, str] = {}
    if policy == "untrained":
        ac = ActorCritic(spec, make_rng(cfg.seed, "init"))
    else:
        stage = f"train-{policy}"
        prefix = root / stage / "policy"
        _require(prefix.with_name("policy_actor.ckpt"), f"{policy} policy checkpoint", stage)
        _require(prefix.with_name("policy_critic.ckpt"), f"{policy} critic checkpoint", stage)
        ac = ActorCritic.load(prefix, spec)
        upstream = _upstream(root, stage, cfg)
        if policy == "cac" and (root / stage / "cmg.ckpt").exists():
            cmg = CmgNet.load(root / stage / "cmg.ckpt")
            energy = lambda x: np.linalg.inv(cmg.mean_dual(x))  # noqa: E731
    e = cfg.eval
    refs, x0s = make_eval_set(spec, make_rng(cfg.seed, "eval-grid"), e.trajectories, e.trials)
    episodes, energies = run_episodes(spec, ac.act_deterministic, refs, x0s, energy)
    report = build_report(episodes, {"env": cfg.env, "policy": policy, "trajectories": e.trajectories,
                                     "trials": e.trials, "seed": cfg.seed})
    curves = [ep.normalized for ep in episodes if ep.normalized is not None]
    if len(curves) >= 10:
        report.checks.append(convergence_trend(curves, spec.dt, energies if energy is not None else None))
    out = _stage_dir(cfg, "eval")
    write_report(out, report, e.confidence)
    write_manifest(out, "eval", cfg, upstream)
    print(f"eval ({policy}): mean MAUC {report.mean_mauc:.3f} over {len(episodes)} episodes")
    return 0


def _synthetic_trend(rng: np.random.Generator, rate: float = 0.5, dt: float = 0.05) -> CheckResult:
    """Recover a known decay rate from noisy exponential curves (self-check of the trend fit)."""
    t = np.arange(200) * dt
    curves = [np.exp(-rate * t) + 0.01 * rng.standard_normal(t.size) for _ in range(10)]
    res = convergence_trend(curves, dt)
    fitted = res.details["fitted_rate"]
    ok = abs(fitted - rate) <= 0.05 * rate
    return CheckResult("convergence_fit", bool(ok), {"true_rate": rate, **res.details})


def cmd_theory(cfg: RunConfig) -> int:
    checks = [
        lemma1_sweep(make_rng(cfg.seed, "lemma1"), 100),
        lemma2_sweep(make_rng(cfg.seed, "lemma2"), 20),
        _synthetic_trend(make_rng(cfg.seed, "trend")),
    ]
    out = _stage_dir(cfg, "theory")
    body = {c.name: {"passed": c.passed, "details": c.details} for c in checks}
    (out / "report.json").write_text(json.dumps(body, indent=2, sort_keys=True, default=float) + "\n")
    write_manifest(out, "theory", cfg)
    for c in checks:
        print(f"{c.name}: {'pass' if c.passed else 'FAIL'}")
    return 0 if all(c.passed for c in checks) else 1


# ---------------------------------------------------------------------------
# Entry point


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="contraction-ac", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=version_string())
    sub = p.add_subparsers(dest="command", required=True)
    for name in STAGES + ("show-config",):
        s = sub.add_parser(name)
        s.add_argument("--config", type=Path, help="JSON run configuration (defaults if omitted)")
        s.add_argument("--out", type=Path, help="output root; overrides the config's `output`")
        s.add_argument("--seed", type=int, help="seed override (unsigned 64-bit)")
        s.add_argument("-v", "--verbose", action="store_true")
        if name == "eval":
            s.add_argument("--policy", choices=("cac", "ppo", "untrained"), default="cac")
    return p


def resolve_config(args) -> RunConfig:
    cfg = load(args.config) if args.config else RunConfig()
    if args.seed is not None:
        if not 0 <= args.seed < 2**64:
            raise ConfigError(f"--seed must be an unsigned 64-bit integer, got {args.seed}")
        cfg.seed = args.seed
    if args.out is not None:
        cfg.output = str(args.out)
    return cfg


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = resolve_config(args)
        if args.command == "show-config":
            print(cfg.dumps())
            return 0
        handler = {
            "collect": cmd_collect, "pretrain": cmd_pretrain, "train-cac": cmd_train_cac,
            "train-ppo": cmd_train_ppo, "theory": cmd_theory,
        }.get(args.command)
        return handler(cfg) if handler else cmd_eval(cfg, args.policy)
    except (ConfigError, MissingInput) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (TrainingAbort, DivergenceError, CmgLossError, NonFiniteError, envs.ReferenceError) as exc:
        print(f"training aborted: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
