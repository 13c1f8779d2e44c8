"""Run configuration and input file loading.

A run is described by a flat JSON object; command-line flags override file
values field by field. Graph definitions are JSON too: layers of agent names,
name-pair edges, and optional per-layer mandatory flags.
"""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path

from .graph import WorkflowGraph, build_graph

ENGINES = ("exact", "dag", "both")
REGIMES = ("bull", "bear", "sideways")


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    seed: int = 42
    out_dir: str | None = None
    parallel: int = 1
    engine: str = "dag"
    graph_file: str | None = None
    market_csv: str | None = None
    features_csv: str | None = None
    prompts_dir: str | None = None
    symbol: str = "SYNTH"
    days: int = 60
    regime: str = "bull"
    signal_strength: float = 0.6
    window_len: int = 5
    threshold: float = 0.0
    lesson_cap: int | None = 5
    rf_daily: float = 0.0

    def validate(self) -> "RunConfig":
        if self.engine not in ENGINES:
            raise ConfigError(f"engine must be one of {ENGINES}, got {self.engine!r}")
        if self.regime not in REGIMES:
            raise ConfigError(f"regime must be one of {REGIMES}, got {self.regime!r}")
        if self.window_len < 2:
            raise ConfigError("window_len must be at least 2")
        if self.parallel < 1:
            raise ConfigError("parallel must be at least 1")
        if self.days < 2:
            raise ConfigError("days must be at least 2")
        if not 0.0 <= self.signal_strength <= 1.0:
            raise ConfigError("signal_strength must be in [0, 1]")
        if self.lesson_cap is not None and self.lesson_cap < 1:
            raise ConfigError("lesson_cap must be at least 1 (or null for unbounded)")
        if bool(self.market_csv) != bool(self.features_csv):
            raise ConfigError("market_csv and features_csv must be given together")
        return self


_FIELDS = {f.name for f in dataclasses.fields(RunConfig)}


def load_config(path: str | Path) -> RunConfig:
    """Read a JSON config file; unknown keys are an error, not a surprise."""
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: config must be a JSON object")
    unknown = sorted(set(raw) - _FIELDS)
    if unknown:
        raise ConfigError(f"{path}: unknown config keys {unknown}")
    try:
        return RunConfig(**raw).validate()
    except TypeError as exc:
        raise ConfigError(f"{path}: {exc}") from None


def merge_flags(config: RunConfig, **overrides) -> RunConfig:
    """Apply non-None flag values over a config, then re-validate."""
    changes = {k: v for k, v in overrides.items() if v is not None}
    bad = sorted(set(changes) - _FIELDS)
    if bad:
        raise ConfigError(f"unknown config fields {bad}")
    return dataclasses.replace(config, **changes).validate()


def load_graph_file(path: str | Path) -> WorkflowGraph:
    """Build a workflow graph from its JSON description.

    Expected keys: ``layers`` (list of lists of agent names), ``edges``
    (list of [from, to] name pairs), optional ``mandatory`` (list of bool
    per layer) and optional ``agents`` roster to check the partition against.
    """
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: graph definition must be a JSON object")
    unknown = sorted(set(raw) - {"layers", "edges", "mandatory", "agents"})
    if unknown:
        raise ConfigError(f"{path}: unknown graph keys {unknown}")
    if "layers" not in raw or "edges" not in raw:
        raise ConfigError(f"{path}: graph definition needs 'layers' and 'edges'")
    edges = [tuple(e) for e in raw["edges"]]
    if any(len(e) != 2 for e in edges):
        raise ConfigError(f"{path}: edges must be [from, to] pairs")
    return build_graph(
        raw["layers"], edges, raw.get("mandatory"), agents=raw.get("agents")
    )


def load_prompts_dir(path: str | Path) -> dict[str, str]:
    """Read per-agent base prompts: one ``<NAME>.txt`` file per agent."""
    directory = Path(path)
    if not directory.is_dir():
        raise ConfigError(f"{path}: not a directory")
    return {
        p.stem: p.read_text(encoding="utf-8").strip()
        for p in sorted(directory.glob("*.txt"))
    }
