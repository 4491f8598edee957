"""Flat key=value run settings shared by the CLI and training.

Resolution order, later wins: built-in defaults, the config file,
``HMILNET_*`` environment variables, explicit overrides. In environment
variable names dots become double underscores, so ``train.epochs`` is
``HMILNET_TRAIN__EPOCHS``.
"""

from __future__ import annotations

import os
from pathlib import Path
from typing import Mapping

ENV_PREFIX = "HMILNET_"

DEFAULTS: dict[str, object] = {
    "seed": 0,
    "train.minibatch_size": 256,
    "train.minibatches_per_graph": 1000,
    "train.epochs": 5,
    "train.omega0": 0.9,
    "train.omega1": 0.1,
    "train.lr": 1e-3,
    "sampling.k_minus": 100,
    "sampling.entity_degree_cap": 0,
    "model.arch": "Mb",
    "model.steps": 1,
    "eval.k": 5,
    "ptp.iterations": 20,
    "ptp.weighting": "shared",
    "synth.n_domains": 5000,
    "synth.relations": "ip:m2m:4000:2.5,email:m2o:3000:2.5,cert:m2m:3000:2.5",
    "synth.n_campaigns": 10,
    "synth.campaign_size": 50,
    "synth.campaign_entities": 3,
    "synth.p_in": 0.6,
    "synth.p_bg": 0.002,
    "synth.coverage": 0.8,
    "synth.n_weeks": 2,
}


class ConfigError(ValueError):
    pass


def _coerce(key: str, raw: str):
    if key not in DEFAULTS:
        raise ConfigError(f"unknown config key {key!r}")
    kind = type(DEFAULTS[key])
    try:
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
    except ValueError:
        raise ConfigError(f"{key}: expected {kind.__name__}, got {raw!r}") from None
    return raw


def parse_lines(lines, source: str = "<config>") -> dict:
    out = {}
    for lineno, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key=value")
        k, v = (x.strip() for x in line.split("=", 1))
        try:
            out[k] = _coerce(k, v)
        except ConfigError as exc:
            raise ConfigError(f"{source}:{lineno}: {exc}") from None
    return out


def load_file(path: str | Path) -> dict:
    path = Path(path)
    return parse_lines(path.read_text(encoding="utf-8").splitlines(), str(path))


def from_env(environ: Mapping[str, str] | None = None) -> dict:
    environ = os.environ if environ is None else environ
    out = {}
    for name, val in environ.items():
        if name.startswith(ENV_PREFIX):
            key = name[len(ENV_PREFIX):].lower().replace("__", ".")
            out[key] = _coerce(key, val)
    return out


def resolve(path: str | Path | None = None, overrides: Mapping[str, object] | None = None,
            environ: Mapping[str, str] | None = None) -> dict:
    settings = dict(DEFAULTS)
    if path is not None:
        settings.update(load_file(path))
    settings.update(from_env(environ))
    for k, v in (overrides or {}).items():
        if v is not None:
            settings[k] = _coerce(k, str(v))
    return settings


def dump(settings: Mapping[str, object]) -> str:
    return "".join(f"{k} = {settings[k]}\n" for k in sorted(settings))
