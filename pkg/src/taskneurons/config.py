"""Run configuration: a flat ``key = value`` text file.

Grammar::

    # comment (whole line)
    key = value        # whitespace around '=' is ignored
    tasks = marker_detect, keyword_sentiment    # lists are comma-separated

Booleans are ``true``/``false``. Unknown keys are an error, so typos do not
silently fall back to defaults. ``emit`` writes every key in sorted order and
``parse(emit(c)) == c``.
"""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Any, Mapping

from .errors import ConfigError
from .tasks.generators import FAMILIES

SOURCES = ("trained", "planted")


@dataclass(frozen=True)
class RunConfig:
    out: str = "run"
    seed: int = 0
    source: str = "trained"
    tasks: tuple[str, ...] = ("marker_detect",)
    # attribution
    scorer: str = "ace"
    mode: str = "enabled"
    m: int = 16
    z: int = 5000
    K: int = 100
    tr: int = 5
    # intervention / evaluation
    budget: int = 100
    step: float = 0.1
    n_comprehended: int = 50
    n_missed: int = 50
    # data
    n_train: int = 2000
    n_eval: int = 800
    demonstration: bool = False
    n_keywords: int = 3
    template: str = ""  # empty: the packaged default
    # trained model
    n_layers: int = 4
    d_model: int = 128
    n_heads: int = 4
    d_ffn: int = 512
    max_seq: int = 160
    steps: int = 2000
    lr: float = 2e-3
    batch_size: int = 32
    loss: str = "all"
    # planted model
    n_good: int = 8
    n_bad: int = 8
    planted_d_ffn: int = 1024
    delta: float = 0.2
    exhaustive_check: bool = False
    workers: int = 1

    def __post_init__(self):
        from .attribution import MODES, SCORERS

        object.__setattr__(self, "tasks", tuple(self.tasks))
        if self.source not in SOURCES:
            raise ConfigError(f"source must be one of {SOURCES}")
        if not self.tasks:
            raise ConfigError("at least one task is required")
        for t in self.tasks:
            if t not in FAMILIES:
                raise ConfigError(f"unknown task {t!r}")
        if self.source == "planted" and not set(self.tasks) <= {"marker_detect", "keyword_sentiment"}:
            raise ConfigError("the planted model only serves marker_detect and keyword_sentiment")
        if self.scorer not in SCORERS:
            raise ConfigError(f"scorer must be one of {SCORERS}")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}")
        for name in ("m", "z", "K", "tr", "budget", "n_train", "n_eval", "steps", "batch_size", "workers"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.K > self.z:
            raise ConfigError("K must not exceed z")
        if not 0 < self.step <= 1:
            raise ConfigError("step must lie in (0, 1]")
        if self.loss not in ("answer", "all"):
            raise ConfigError("loss must be 'answer' or 'all'")

    def with_overrides(self, overrides: Mapping[str, Any]) -> "RunConfig":
        return dataclasses.replace(self, **dict(overrides))

    def emit(self) -> str:
        lines = []
        for f in sorted(fields(self), key=lambda f: f.name):
            lines.append(f"{f.name} = {_format(getattr(self, f.name))}")
        return "\n".join(lines) + "\n"

    def hash(self) -> str:
        """Digest of every key except ``out``, so a rerun elsewhere hashes the same."""
        body = "".join(l for l in self.emit().splitlines(True) if not l.startswith("out ="))
        return hashlib.sha256(body.encode()).hexdigest()

    def path(self, *parts: str) -> Path:
        return Path(self.out, *parts)


def _format(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ", ".join(v)
    return str(v) if not isinstance(v, float) else repr(v)


_TYPES = {f.name: f.type for f in fields(RunConfig)}


def coerce(key: str, raw: str):
    if key not in _TYPES:
        raise ConfigError(f"unknown config key {key!r}")
    kind = _TYPES[key]
    raw = raw.strip()
    try:
        if kind == "bool":
            if raw.lower() not in ("true", "false"):
                raise ValueError(raw)
            return raw.lower() == "true"
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        if kind.startswith("tuple"):
            return tuple(x.strip() for x in raw.split(",") if x.strip())
        return raw
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None


def parse(text: str, source: str = "<config>") -> dict[str, Any]:
    values: dict[str, Any] = {}
    for n, line in enumerate(text.splitlines(), 1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"{source}:{n}: expected 'key = value'")
        key, raw = stripped.split("=", 1)
        key = key.strip()
        if key in values:
            raise ConfigError(f"{source}:{n}: duplicate key {key!r}")
        values[key] = coerce(key, raw.split(" #", 1)[0])
    return values


def load(path: str | Path | None, overrides: Mapping[str, Any] | None = None) -> RunConfig:
    """File values first, then ``overrides`` on top."""
    values = {}
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file {p} not found")
        values = parse(p.read_text(), str(p))
    values.update(overrides or {})
    try:
        return RunConfig(**values)
    except TypeError as e:
        raise ConfigError(str(e)) from None
