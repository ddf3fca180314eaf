"""Run configuration: nested dataclasses <-> JSON, with dotted ``key=value`` overrides."""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .cfgb import DccfgConfig
from .losses import LossConfig
from .model import TrackerConfig


@dataclass
class RunConfig:
    tracker: TrackerConfig = field(default_factory=TrackerConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    suite_seed: int = 0
    seed: int = 0
    steps: int = 2000
    batch_size: int = 8
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-4
    grad_clip: float = 10.0
    eval_every: int = 500
    max_gap: int = 20
    search_shift: int = 12
    precision_threshold: float = 20.0
    probe_groups: int = 8
    out_dir: str = "runs/default"

    def __post_init__(self):
        if isinstance(self.tracker, dict):
            self.tracker = TrackerConfig(**self.tracker)
        if isinstance(self.loss, dict):
            self.loss = LossConfig(**self.loss)
        if self.steps < 0 or self.batch_size < 1:
            raise ValueError("steps must be >= 0 and batch_size >= 1")


def to_dict(cfg: RunConfig) -> dict:
    def conv(v):
        if dataclasses.is_dataclass(v):
            return {f.name: conv(getattr(v, f.name)) for f in dataclasses.fields(v)}
        if isinstance(v, (list, tuple)):
            return [conv(x) for x in v]
        return v

    return conv(cfg)


def from_dict(d: dict) -> RunConfig:
    d = json.loads(json.dumps(d))
    tr = d.get("tracker", {})
    if isinstance(tr.get("dccfg"), dict):
        tr["dccfg"] = DccfgConfig(**tr["dccfg"])
    return RunConfig(**d)


def dumps(cfg: RunConfig) -> str:
    return json.dumps(to_dict(cfg), indent=2, sort_keys=True) + "\n"


def load(path) -> RunConfig:
    return from_dict(json.loads(Path(path).read_text()))


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(cfg: RunConfig, items: list[str]) -> RunConfig:
    """Apply ``a.b.c=value`` overrides; values are parsed as JSON when possible."""
    d = to_dict(cfg)
    for item in items:
        if "=" not in item:
            raise ValueError(f"override {item!r} is not key=value")
        key, raw = item.split("=", 1)
        parts = key.strip().split(".")
        node = d
        for p in parts[:-1]:
            if not isinstance(node, dict) or p not in node:
                raise ValueError(f"unknown config key {key!r}")
            node = node[p]
        if not isinstance(node, dict) or parts[-1] not in node:
            raise ValueError(f"unknown config key {key!r}")
        node[parts[-1]] = _parse_value(raw)
    return from_dict(d)
