"""Run configuration: one JSON document with per-stage sections.

Defaults follow the hyperparameter table where it gives a value. Unknown keys
are rejected by the published JSON schema (:data:`SCHEMA`).
"""

from __future__ import annotations

import hashlib
import json
import re
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import jsonschema

from .envs import ENV_NAMES


class ConfigError(ValueError):
    pass


@dataclass
class DynamicsConfig:
    widths: list[int] = field(default_factory=lambda: [256, 256])
    batch: int = 1024
    epochs: int = 100
    episodes: int = 200
    # None -> 0.1 * (u_max - u_min)
    noise_std: list[float] | None = None
    lr: float = 1e-3
    val_frac: float = 0.1
    patience: int = 10


@dataclass
class CmgConfig:
    lam: float = 0.5
    w_lb: float = 0.1
    w_ub: float = 10.0
    beta: float = 1e-2
    # policy iterations per generator update; None = never
    every: int | None = 10
    lr: float = 1e-3
    minibatches: int = 4
    n_z: int = 32


@dataclass
class PpoConfig:
    gamma: float = 0.99
    clip: float = 0.2
    k_epochs: int = 10
    target_kl: float = 0.03
    gae_lambda: float = 0.95
    beta_pi: float = 1e-2
    lr_actor: float = 3e-4
    lr_critic: float = 1e-3
    total_steps: int = 300_000
    n_envs: int = 4
    n_steps: int = 256
    n_minibatches: int = 4
    max_grad_norm: float | None = 0.5
    eval_every: int = 10
    eval_episodes: int = 20


@dataclass
class EvalConfig:
    trajectories: int = 10
    trials: int = 10
    confidence: float = 0.95


@dataclass
class RunConfig:
    env: str = "car"
    seed: int = 0
    dt: float = 0.05
    horizon: int = 200
    output: str = "runs/default"
    dynamics: DynamicsConfig = field(default_factory=DynamicsConfig)
    cmg: CmgConfig = field(default_factory=CmgConfig)
    ppo: PpoConfig = field(default_factory=PpoConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def to_dict(self) -> dict:
        return asdict(self)

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def hash(self) -> str:
        # where the run is written does not change what it computes
        body = self.to_dict()
        body.pop("output")
        canon = json.dumps(body, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode("utf-8")).hexdigest()[:16]

    def train_config(self):
        from .cac import TrainConfig

        p, c = self.ppo, self.cmg
        return TrainConfig(
            gamma=p.gamma, gae_lambda=p.gae_lambda, clip=p.clip, k_epochs=p.k_epochs, target_kl=p.target_kl,
            beta_pi=p.beta_pi, beta_cmg=c.beta, lam=c.lam, cmg_every=c.every, cmg_minibatches=c.minibatches,
            n_z=c.n_z, w_lb=c.w_lb, w_ub=c.w_ub, total_steps=p.total_steps, n_envs=p.n_envs, n_steps=p.n_steps,
            n_minibatches=p.n_minibatches, lr_actor=p.lr_actor, lr_critic=p.lr_critic, lr_cmg=c.lr,
            max_grad_norm=p.max_grad_norm, eval_every=p.eval_every, eval_episodes=p.eval_episodes, seed=self.seed,
        )


_SECTIONS = {"dynamics": DynamicsConfig, "cmg": CmgConfig, "ppo": PpoConfig, "eval": EvalConfig}

_NUM = {"type": "number"}
_POS = {"type": "number", "exclusiveMinimum": 0}
_INT1 = {"type": "integer", "minimum": 1}

SCHEMA: dict = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "contraction_ac run configuration",
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "env": {"enum": list(ENV_NAMES)},
        "seed": {"type": "integer", "minimum": 0, "maximum": 2**64 - 1},
        "dt": _POS,
        "horizon": _INT1,
        "output": {"type": "string"},
        "dynamics": {
            "type": "object", "additionalProperties": False,
            "properties": {
                "widths": {"type": "array", "items": _INT1, "minItems": 1},
                "batch": _INT1, "epochs": _INT1, "episodes": _INT1,
                "noise_std": {"oneOf": [{"type": "null"}, {"type": "array", "items": {"type": "number", "minimum": 0}}]},
                "lr": _POS, "val_frac": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
                "patience": _INT1,
            },
        },
        "cmg": {
            "type": "object", "additionalProperties": False,
            "properties": {
                "lam": _POS, "w_lb": _POS, "w_ub": _POS, "beta": _POS,
                "every": {"oneOf": [{"type": "null"}, _INT1]},
                "lr": _POS, "minibatches": _INT1, "n_z": _INT1,
            },
        },
        "ppo": {
            "type": "object", "additionalProperties": False,
            "properties": {
                "gamma": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
                "clip": _POS, "k_epochs": _INT1, "target_kl": _POS,
                "gae_lambda": {"type": "number", "minimum": 0, "maximum": 1},
                "beta_pi": {"type": "number", "minimum": 0},
                "lr_actor": _POS, "lr_critic": _POS, "total_steps": _INT1, "n_envs": _INT1,
                "n_steps": _INT1, "n_minibatches": _INT1,
                "max_grad_norm": {"oneOf": [{"type": "null"}, _POS]},
                "eval_every": _INT1, "eval_episodes": _INT1,
            },
        },
        "eval": {
            "type": "object", "additionalProperties": False,
            "properties": {
                "trajectories": _INT1, "trials": _INT1,
                "confidence": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
            },
        },
    },
}


def _line_of(text: str, key: str | int | None) -> int | None:
    if key is None or not isinstance(key, str):
        return None
    m = re.search(r'"' + re.escape(key) + r'"\s*:', text)
    return text.count("\n", 0, m.start()) + 1 if m else None


def from_dict(data: dict, text: str | None = None) -> RunConfig:
    validator = jsonschema.Draft202012Validator(SCHEMA)
    errors = sorted(validator.iter_errors(data), key=lambda e: list(e.absolute_path))
    if errors:
        err = errors[0]
        path = "/".join(str(p) for p in err.absolute_path) or "<root>"
        key = err.absolute_path[-1] if err.absolute_path else None
        if err.validator == "additionalProperties":
            extra = sorted(set(err.instance) - set(err.schema.get("properties", {})))
            key = extra[0] if extra else key
            msg = f"unknown key(s) {extra} in {path}"
        elif path == "env":
            msg = f"unknown env {err.instance!r}; valid envs: {', '.join(ENV_NAMES)}"
        else:
            msg = f"{path}: {err.message}"
        line = _line_of(text, key) if text else None
        raise ConfigError(f"line {line}: {msg}" if line else msg)
    top = {k: v for k, v in data.items() if k not in _SECTIONS}
    sections = {k: cls(**data.get(k, {})) for k, cls in _SECTIONS.items()}
    cfg = RunConfig(**top, **sections)
    if cfg.cmg.w_lb >= cfg.cmg.w_ub:
        raise ConfigError("cmg: w_lb must be smaller than w_ub")
    return cfg


def loads(text: str) -> RunConfig:
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"line {exc.lineno}, column {exc.colno}: {exc.msg}") from None
    if not isinstance(data, dict):
        raise ConfigError("line 1: configuration must be a JSON object")
    return from_dict(data, text)


def load(path: str | Path) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return loads(text)


def field_names(cls) -> list[str]:
    return [f.name for f in fields(cls)]
