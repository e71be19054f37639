"""Layered run configuration: defaults < config file < environment < flags.

The config file is plain ``key=value`` text (``#`` comments allowed).
Environment overrides use the ``DAGQUERY_`` prefix with the upper-cased
field name (``DAGQUERY_EPOCHS=10``).  Unknown keys in a config file are
rejected; unrelated ``DAGQUERY_*`` environment variables (for example the
kernel-backend selector) are ignored.  Every run echoes its fully resolved
config into the output directory for auditability.
"""

from __future__ import annotations

import dataclasses
import hashlib
import os
from dataclasses import dataclass
from pathlib import Path

ENV_PREFIX = "DAGQUERY_"


@dataclass
class RunConfig:
    # run plumbing
    model: str = "biqe"  # "biqe" | "gqe-mp"
    seed: int = 0
    data: str = ""
    out: str = ""
    checkpoint: str = ""
    eval_split: str = "test"
    ablation: bool = False
    oracle: bool = False
    # model shape
    layers: int = 2
    heads: int = 4
    hidden: int = 64
    ffn_hidden: int = 256
    max_len: int = 64
    dropout: float = 0.1
    dtype: str = "float32"
    # optimization
    epochs: int = 50
    batch_size: int = 128
    lr: float = 1e-3
    # generation
    path_limit: int = 1000
    max_branches: int = 3
    min_branch_depth: int = 1
    min_depth: int = 2
    max_depth: int = 5
    split_train: float = 0.7
    split_dev: float = 0.15
    split_test: float = 0.15

    def validate(self) -> None:
        if self.model not in ("biqe", "gqe-mp"):
            raise ValueError(f"unknown model {self.model!r}; use biqe or gqe-mp")
        if self.eval_split not in ("train", "dev", "test"):
            raise ValueError(f"unknown split {self.eval_split!r}")
        fractions = (self.split_train, self.split_dev, self.split_test)
        if abs(sum(fractions) - 1.0) > 1e-6 or any(f < 0 for f in fractions):
            raise ValueError("split fractions must be non-negative and sum to 1")
        for name in ("epochs", "batch_size", "layers", "heads", "hidden",
                     "ffn_hidden", "max_len", "path_limit", "max_branches",
                     "min_branch_depth"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")
        if self.lr <= 0:
            raise ValueError("lr must be positive")


_FIELDS = {f.name: f for f in dataclasses.fields(RunConfig)}


def _coerce(key: str, text: str):
    kind = _FIELDS[key].type
    default = getattr(RunConfig(), key)
    if isinstance(default, bool):
        lowered = text.strip().lower()
        if lowered in ("1", "true", "yes", "on"):
            return True
        if lowered in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"config key {key}: expected a boolean, got {text!r}")
    if isinstance(default, int):
        return int(text)
    if isinstance(default, float):
        return float(text)
    del kind
    return text.strip()


def read_config_file(path: str | Path) -> dict:
    """Parse ``key=value`` lines; unknown keys are an error."""
    values: dict = {}
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected key=value, got {raw!r}")
        key, text = (part.strip() for part in line.split("=", 1))
        if key not in _FIELDS:
            raise ValueError(f"{path}:{lineno}: unknown config key {key!r}")
        values[key] = _coerce(key, text)
    return values


def env_overrides(environ=None) -> dict:
    environ = os.environ if environ is None else environ
    values: dict = {}
    for key, text in environ.items():
        if not key.startswith(ENV_PREFIX):
            continue
        field = key[len(ENV_PREFIX):].lower()
        if field in _FIELDS:
            values[field] = _coerce(field, text)
    return values


def resolve_config(
    file_values: dict | None = None,
    env_values: dict | None = None,
    flag_values: dict | None = None,
) -> RunConfig:
    merged: dict = {}
    for layer in (file_values, env_values, flag_values):
        if layer:
            merged.update(layer)
    config = RunConfig(**merged)
    config.validate()
    return config


def config_text(config: RunConfig) -> str:
    lines = [
        f"{name}={getattr(config, name)}"
        for name in sorted(_FIELDS)
    ]
    return "\n".join(lines) + "\n"


def config_hash(config: RunConfig) -> str:
    return hashlib.sha256(config_text(config).encode("utf-8")).hexdigest()


def write_resolved_config(config: RunConfig, out_dir: str | Path) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "config.txt"
    path.write_text(config_text(config), encoding="utf-8")
    return path
