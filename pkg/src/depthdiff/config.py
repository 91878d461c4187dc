"""Flat ``key = value`` run configuration.

Blank lines and ``#`` comments are ignored. Every key must name a
:class:`RunConfig` field; values are parsed by the field's type, with
booleans spelled ``true``/``false``.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    # schedule
    schedule_steps: int = 1000
    beta_start: float = 0.00085
    beta_end: float = 0.012
    schedule_kind: str = "scaled_linear"
    zero_snr: bool = True
    # sampling
    seed: int = 0
    steps: int = 1
    spacing: str = "trailing"
    # ensembling
    ensemble: int = 10
    ensemble_lambda: float = 0.02
    ensemble_max_iters: int = 50
    ensemble_tol: float = 1e-3
    # tiling / high resolution
    target_scale: int = 1
    tile_size: int = 0  # 0: tile = native resolution
    overlap: float = 0.5
    native_size: int = 0  # 0: native = input resolution
    denoiser: str = "point-mass"  # point-mass | pointwise | path to a denoiser file
    refiner: str = "passthrough"  # passthrough | path to a denoiser file
    # evaluation
    modality: str = "depth"  # depth | normals | image | shading | edges
    peak: float = 1.0
    edge_threshold: float = 0.1
    dbe_trunc_px: float = 10.0
    edge_match_px: int = 1
    # scenes
    scene_height: int = 32
    scene_width: int = 32
    # training and distillation
    teacher: str = ""  # empty: train a teacher first
    teacher_iterations: int = 2000
    teacher_learning_rate: float = 2e-3
    distill_iterations: int = 1000
    distill_learning_rate: float = 2e-3
    batch_size: int = 4
    skip_k: int = 200
    huber_c: float = 0.001
    ema_mu: float = 0.95
    sigma_data: float = 0.5
    epsilon_boundary: float = 0.0

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **{k: v for k, v in changes.items() if v is not None})


_FIELD_TYPES = {f.name: type(f.default) for f in fields(RunConfig)}


def _parse_value(key: str, raw: str):
    kind = _FIELD_TYPES[key]
    if kind is bool:
        low = raw.lower()
        if low not in ("true", "false"):
            raise ConfigError(f"{key}: expected true or false, got {raw!r}")
        return low == "true"
    try:
        return kind(raw)
    except ValueError as exc:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {kind.__name__}") from exc


def parse_config(text: str) -> RunConfig:
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in _FIELD_TYPES:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        values[key] = _parse_value(key, raw)
    return RunConfig(**values)


def load_config(path) -> RunConfig:
    return parse_config(Path(path).read_text())


def format_config(cfg: RunConfig) -> str:
    lines = []
    for f in fields(cfg):
        v = getattr(cfg, f.name)
        lines.append(f"{f.name} = {str(v).lower() if isinstance(v, bool) else v}")
    return "\n".join(lines) + "\n"
