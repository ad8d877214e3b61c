"""Flat ``key = value`` run configuration.

Blank lines and ``#`` comments are ignored. Unknown keys and malformed
values are errors that name the offending key. Command-line overrides are
applied on top of the file with the same parsing rules.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import typing
from dataclasses import dataclass, fields

from .dataset import GenericRecipe, NetworkRecipe
from .models import TrainConfig
from .otdr_sim import BranchSpec, PonTopology, SimConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    seed: int = 7
    # topology
    feeder_length_m: float = 1000.0
    split_ratio: int = 128
    branch_lengths_m: tuple[float, ...] = (3.0, 5.0, 10.0, 12.0, 18.0, 21.0, 26.0, 30.0)
    # simulation
    trace_len: int = 5200
    dynamic_range_db: float = 40.0
    attenuation_db_per_km: float = 0.3
    reflector_return_db: float = 25.0
    # datasets
    per_class: int = 1000
    target_count: int = 28000
    fault_branches: tuple[int, ...] = (1, 2, 3, 4, 5, 6, 7, 8)
    generic_break_probability: float = 0.0
    pnr_min: float = 5.0
    pnr_max: float = 30.0
    robust_per_class: int = 200
    robust_pnr_min: float = 5.0
    robust_pnr_max: float = 15.0
    robust_loss_min_db: float = 2.0
    robust_loss_max_db: float = 16.0
    # training
    learning_rate: float = 3e-3
    batch_size: int = 64
    branch_max_epochs: int = 24
    generic_max_epochs: int = 60
    patience: int = 10
    weights_generic_a: tuple[float, ...] = (1.0, 30.0, 30.0)
    weights_generic_b: tuple[float, ...] = (1.0, 30.0)
    hidden: tuple[int, ...] = ()
    # monitoring
    threshold: float = 0.2
    monitor_pnr: float = 25.0

    def topology(self) -> PonTopology:
        branches = tuple(BranchSpec(i + 1, L) for i, L in enumerate(self.branch_lengths_m))
        return PonTopology(self.feeder_length_m, self.split_ratio, branches)

    def sim_config(self) -> SimConfig:
        return SimConfig(trace_len=self.trace_len, dynamic_range_db=self.dynamic_range_db,
                         attenuation_db_per_km=self.attenuation_db_per_km,
                         reflector_return_db=self.reflector_return_db)

    def network_recipe(self) -> NetworkRecipe:
        return NetworkRecipe(per_class_count=self.per_class, pnr_range=(self.pnr_min, self.pnr_max), seed=self.seed)

    def robustness_recipe(self) -> NetworkRecipe:
        """Fiber breaks behind a lossy feeder at low PNR."""
        return NetworkRecipe(per_class_count=self.robust_per_class,
                             pnr_range=(self.robust_pnr_min, self.robust_pnr_max), break_fraction=1.0,
                             seed=self.seed, feeder_loss_range_db=(self.robust_loss_min_db, self.robust_loss_max_db))

    def generic_recipe(self) -> GenericRecipe:
        return GenericRecipe(target_count=self.target_count, fault_branches=self.fault_branches,
                             break_probability=self.generic_break_probability,
                             pnr_range=(self.pnr_min, self.pnr_max), seed=self.seed)

    def train_config(self, kind: str) -> TrainConfig:
        if kind == "branch":
            epochs, weights = self.branch_max_epochs, ()
        else:
            epochs, weights = self.generic_max_epochs, getattr(self, f"weights_{kind}")
        return TrainConfig(learning_rate=self.learning_rate, batch_size=self.batch_size, max_epochs=epochs,
                           patience=self.patience, task_weights=weights, seed=self.seed)

    def digest(self) -> str:
        text = json.dumps(dataclasses.asdict(self), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode()).hexdigest()[:16]


_TYPES = {f.name: f for f in fields(RunConfig)}


def _convert(key: str, raw: str):
    field = _TYPES.get(key)
    if field is None:
        raise ConfigError(f"unknown config key {key!r}")
    tp = typing.get_type_hints(RunConfig)[key]
    raw = raw.strip()
    try:
        if typing.get_origin(tp) is tuple:
            item = typing.get_args(tp)[0]
            return tuple(item(x) for x in raw.split(",") if x.strip())
        return tp(raw)
    except ValueError:
        raise ConfigError(f"malformed value {raw!r} for key {key!r}") from None


def parse_config_text(text: str) -> dict:
    values = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, raw = line.partition("=")
        if not sep:
            raise ConfigError(f"line {n}: expected key = value")
        key = key.strip()
        values[key] = _convert(key, raw)
    return values


def load_config(path=None, overrides: dict | None = None) -> RunConfig:
    values = {}
    if path is not None:
        try:
            with open(path) as fh:
                values.update(parse_config_text(fh.read()))
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e.strerror}") from None
    for k, v in (overrides or {}).items():
        if v is None:
            continue
        values[k] = _convert(k, v) if isinstance(v, str) else v
    try:
        return RunConfig(**values)
    except TypeError as e:
        raise ConfigError(str(e)) from None


def format_config(cfg: RunConfig) -> str:
    lines = []
    for f in fields(cfg):
        v = getattr(cfg, f.name)
        lines.append(f"{f.name} = {','.join(str(x) for x in v) if isinstance(v, tuple) else v}")
    return "\n".join(lines) + "\n"
