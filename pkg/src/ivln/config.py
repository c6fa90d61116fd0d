"""Layered runtime configuration shared by the command-line tools.

Precedence, lowest to highest: dataclass defaults, a key=value config
file (explicit path or the IVLN_CONFIG environment variable), then
command-line flags.  Validation runs before any work starts and the
resolved config is embedded in every report so results are
self-describing.
"""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass

_SOLVERS = ("nn", "nn+3opt", "exact")
_MAP_MODES = ("none", "episodic", "iterative", "known")


@dataclass
class Config:
    seed: int = 0
    d_th: float = 3.0
    success_radius: float = 3.0
    oracle_correction_radius: float = 0.5
    geodesic: bool = False
    solver: str = "nn+3opt"
    instructions_per_path: int = 1
    map_mode: str = "none"
    policy: str = "oracle"
    max_steps: int | None = None
    forward_step: float = 0.25
    turn_deg: float = 15.0
    crop_size: int = 64
    step_timeout: float = 10.0
    radius: float = 3.0
    occlusion: bool = True

    def validate(self) -> None:
        if self.d_th <= 0 or self.success_radius <= 0 or self.radius <= 0:
            raise ValueError("distance thresholds must be positive")
        if self.oracle_correction_radius <= 0:
            raise ValueError("oracle_correction_radius must be positive")
        if self.solver not in _SOLVERS:
            raise ValueError(f"unknown solver {self.solver!r}, expected one of {_SOLVERS}")
        if self.map_mode not in _MAP_MODES:
            raise ValueError(f"unknown map mode {self.map_mode!r}, expected one of {_MAP_MODES}")
        if self.instructions_per_path < 1:
            raise ValueError("instructions_per_path must be at least 1")
        if self.max_steps is not None and self.max_steps < 1:
            raise ValueError("max_steps must be at least 1")
        if self.forward_step <= 0 or self.turn_deg <= 0:
            raise ValueError("motion increments must be positive")
        if self.crop_size < 1:
            raise ValueError("crop_size must be at least 1")
        if self.step_timeout <= 0:
            raise ValueError("step_timeout must be positive")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _coerce(name: str, kind, raw: str):
    raw = raw.strip()
    if kind is bool or raw.lower() in ("true", "false") and kind is not str:
        if raw.lower() in ("true", "1", "yes", "on"):
            return True
        if raw.lower() in ("false", "0", "no", "off"):
            return False
        raise ValueError(f"config key {name}: expected a boolean, got {raw!r}")
    if raw.lower() in ("none", "null"):
        return None
    try:
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
    except ValueError:
        raise ValueError(f"config key {name}: cannot parse {raw!r}") from None
    return raw


def parse_config_file(path: str) -> dict:
    """Read key=value lines; '#' starts a comment, blank lines are skipped."""
    fields = {f.name: f for f in dataclasses.fields(Config)}
    out = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected key=value, got {line!r}")
            key, _, raw = line.partition("=")
            key = key.strip()
            if key not in fields:
                raise ValueError(f"{path}:{lineno}: unknown config key {key!r}")
            default = fields[key].default
            kind = type(default) if default is not None else int
            out[key] = _coerce(key, kind, raw)
    return out


def resolve_config(config_file: str | None = None, overrides: dict | None = None) -> Config:
    """Defaults <- config file (or IVLN_CONFIG) <- explicit overrides."""
    values = {}
    path = config_file or os.environ.get("IVLN_CONFIG")
    if path:
        values.update(parse_config_file(path))
    for key, val in (overrides or {}).items():
        if val is not None:
            values[key] = val
    cfg = Config(**values)
    cfg.validate()
    return cfg
