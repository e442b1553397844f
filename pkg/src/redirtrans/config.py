"""Run configuration: a flat ``key = value`` file with dotted keys.

Precedence, lowest first: built-in defaults, the config file, the
``REDIRTRANS_SEED`` environment variable (seed only), command-line flags.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable

SEED_ENV = "REDIRTRANS_SEED"


class ConfigError(ValueError):
    """Malformed config text, unknown key or unparseable value."""


def _bool(text: str) -> bool:
    low = text.lower()
    if low in ("true", "yes", "1", "on"):
        return True
    if low in ("false", "no", "0", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(t) for t in text.replace(" ", "").split(",") if t)


def _int(text: str) -> int:
    value = float(text)
    if value != int(value):
        raise ValueError(f"not an integer: {text!r}")
    return int(value)


@dataclass(frozen=True)
class Key:
    parse: Callable[[str], Any]
    default: Any
    help: str = ""


SCHEMA: dict[str, Key] = {
    "seed": Key(_int, 0, "master seed for every derived stream"),
    "world.K": Key(_int, 6, "latent layers"),
    "world.D": Key(_int, 64, "per-layer latent width"),
    "world.image_side": Key(_int, 32, "rendered image side in pixels"),
    "world.planted_gaze": Key(_ints, (0, 1), "layers carrying gaze"),
    "world.planted_head": Key(_ints, (2, 3), "layers carrying head pose"),
    "world.condition_range": Key(float, 0.4, "conditions drawn from U(-r, r) radians"),
    "world.plant_gain": Key(float, 12.0, "scale of the planted injection maps"),
    "data.n_identities": Key(_int, 2000, "training identities"),
    "data.samples_per_identity": Key(_int, 4, "samples per identity"),
    "data.holdout_identities": Key(_int, 500, "identities held out for estimator scoring"),
    "data.test_identities": Key(_int, 250, "identities in the redirection test set"),
    "estimator.epochs": Key(_int, 30, "estimator pretraining epochs"),
    "estimator.batch_size": Key(_int, 64, "estimator minibatch"),
    "estimator.lr": Key(float, 1e-3, "estimator learning rate"),
    "train.mode": Key(str, "layerwise", "flat or layerwise"),
    "train.label_source": Key(str, "pseudo", "truth or pseudo"),
    "train.batch_size": Key(_int, 2, "redirector minibatch"),
    "train.epochs": Key(_int, 3, "passes over the training set"),
    "train.lr0": Key(float, 1e-4, "initial learning rate"),
    "train.decay": Key(float, 0.8, "learning-rate decay factor"),
    "train.decay_every": Key(_int, 3000, "iterations between decays"),
    "train.grad_clip": Key(float, 10.0, "global gradient-norm clip, 0 disables"),
    "train.eval_every": Key(_int, 1000, "iterations between probe evaluations"),
    "train.eval_pairs": Key(_int, 200, "probe pairs per evaluation"),
    "train.max_iterations": Key(_int, 0, "stop early after this many iterations, 0 runs all"),
    "loss.rec": Key(float, 8.0),
    "loss.perc": Key(float, 8.0),
    "loss.id": Key(float, 5.0),
    "loss.att": Key(float, 1.0),
    "loss.lab": Key(float, 5.0),
    "loss.emb": Key(float, 2.0),
    "loss.prob": Key(float, 10.0),
    "eval.pairs": Key(_int, 500, "test pairs for redirection and disentanglement"),
    "correct.trials": Key(_int, 200, "perturb-and-correct trials"),
    "augment.n_images": Key(_int, 2000, "labeled pool size"),
    "augment.n_holdout": Key(_int, 2000, "downstream scoring set size"),
    "augment.quantiles": Key(_ints, (25, 50, 75), "labeled percentages"),
    "augment.redirector_iterations": Key(_int, 6000, "redirector iterations per percentage"),
    "augment.estimator_epochs": Key(_int, 30, "supervising estimator epochs"),
    "augment.downstream_epochs": Key(_int, 40, "downstream estimator epochs"),
    "paths.world": Key(str, "", "world checkpoint; empty rebuilds it from the seed"),
    "paths.estimator": Key(str, "", "training estimator checkpoint"),
    "paths.eval_estimator": Key(str, "", "evaluation estimator checkpoint"),
    "paths.checkpoint": Key(str, "", "redirector checkpoint"),
}


def parse_text(text: str, source: str = "<config>") -> dict[str, str]:
    """Raw ``key -> value`` strings from config text; later lines win."""
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        if not sep or not key:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        out[key] = value.strip()
    return out


class Config:
    """Typed, validated view over the schema with provenance per key."""

    def __init__(self):
        self.values = {k: spec.default for k, spec in SCHEMA.items()}
        self.sources = {k: "default" for k in SCHEMA}

    def set(self, key: str, text: str, source: str) -> None:
        if key not in SCHEMA:
            raise ConfigError(f"{source}: unknown config key {key!r}")
        try:
            self.values[key] = SCHEMA[key].parse(text)
        except ValueError as exc:
            raise ConfigError(f"{source}: bad value for {key}: {exc}") from None
        self.sources[key] = source

    def update(self, raw: dict[str, str], source: str) -> None:
        for key, text in raw.items():
            self.set(key, text, source)

    def __getitem__(self, key: str):
        return self.values[key]

    def section(self, prefix: str) -> dict[str, Any]:
        return {k[len(prefix) + 1:]: v for k, v in self.values.items() if k.startswith(prefix + ".")}

    def render(self) -> str:
        lines = []
        for key in SCHEMA:
            value = self.values[key]
            if isinstance(value, tuple):
                value = ",".join(str(v) for v in value)
            lines.append(f"{key} = {value}  # {self.sources[key]}")
        return "\n".join(lines) + "\n"


def load(path: str | os.PathLike | None = None, overrides: dict[str, str] | None = None,
         environ: dict[str, str] | None = None) -> Config:
    cfg = Config()
    if path:
        text = Path(path).read_text(encoding="utf-8")
        cfg.update(parse_text(text, str(path)), str(path))
    env = os.environ if environ is None else environ
    if env.get(SEED_ENV, "").strip():
        cfg.set("seed", env[SEED_ENV].strip(), SEED_ENV)
    for key, text in (overrides or {}).items():
        cfg.set(key, text, "flag")
    return cfg
