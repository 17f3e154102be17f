"""Experiment configuration: an INI file, CLI overrides, and the environment.

Every option has a default, so an empty file is a valid configuration. The
resolved form (every default filled in) is what goes into the manifest.
"""
from __future__ import annotations

import configparser
import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Optional

from ..attack import AttackConfig
from ..defense import RATIO_LEVELS, DefenseError, DefenseSpec
from ..model import ModelConfig
from .corpus import bundled_corpus_path

SEED_ENV = "SPLITLEAK_SEED"


class ConfigError(ValueError):
    pass


def _ints(text: str) -> tuple:
    return tuple(int(t) for t in _items(text))


def _floats(text: str) -> tuple:
    return tuple(float(t) for t in _items(text))


def _items(text: str) -> list:
    return [t.strip() for t in str(text).replace(";", ",").split(",") if t.strip()]


def parse_defense(text: str, base: Optional[dict] = None) -> DefenseSpec:
    """``kind`` or ``kind@strength``; strength is a variance, ratio or budget."""
    kind, _, value = text.strip().partition("@")
    kw = dict(base or {})
    kw["kind"] = kind
    if value:
        v = float(value)
        key = {"gaussian": "variance", "pripert-l2": "budget"}.get(kind, "ratio")
        kw[key] = v
    return DefenseSpec(**kw)


@dataclass
class ExperimentConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    checkpoint: Optional[str] = None
    train_steps: int = 0
    corpus: str = field(default_factory=lambda: str(bundled_corpus_path()))
    prompts: int = 50
    max_len: int = 16
    attack: AttackConfig = field(default_factory=AttackConfig)
    defenses: tuple = ("none",)
    grid_kinds: tuple = ("gaussian", "element-sparsify", "token-sparsify", "pripert-l0")
    levels: tuple = (1, 2, 3, 4, 5)
    pripert_steps: int = 2
    pripert_epsilon: float = 1.0
    l0_rank_order: str = "max-impact-zeroed"
    q1_list: tuple = (1, 2, 3, 4, 5)
    q1_defense: str = "element-sparsify@0.5"
    bypass_defense: str = "element-sparsify@0.5"
    paf_draws: int = 64
    paf_inputs: int = 100
    timing_trials: int = 30
    timing_ratios: tuple = (0.05, 0.25, 1.0)
    timing_kinds: tuple = ("none", "gaussian", "element-sparsify", "token-sparsify",
                           "pripert-l0", "pripert-l2")
    seed: int = 0
    seed_from_env: bool = False
    output_dir: str = "results"
    workers: int = 1

    def __post_init__(self):
        if self.prompts < 1:
            raise ConfigError("prompts must be >= 1")
        if not 1 <= self.max_len <= self.model.max_seq_len:
            raise ConfigError(f"max_len must be in [1, {self.model.max_seq_len}]")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        if any(not 1 <= lv <= 5 for lv in self.levels):
            raise ConfigError("defense levels run from 1 to 5")
        if any(not 0 <= q < self.model.num_blocks for q in self.q1_list):
            raise ConfigError(f"q1 values must lie in [0, {self.model.num_blocks})")
        if self.paf_draws < 1 or self.paf_inputs < 1 or self.timing_trials < 1:
            raise ConfigError("sample counts must be >= 1")
        try:
            for d in self.defenses + (self.q1_defense, self.bypass_defense):
                self.defense(d)
        except DefenseError as exc:
            raise ConfigError(str(exc)) from exc

    def defense(self, text: str) -> DefenseSpec:
        return parse_defense(text, {"steps": self.pripert_steps, "epsilon": self.pripert_epsilon,
                                    "l0_rank_order": self.l0_rank_order})

    def level_spec(self, kind: str, level: int) -> DefenseSpec:
        if kind == "pripert-l2":
            # budgets follow the ratio ladder, scaled to unit-rms activations
            return self.defense(f"pripert-l2@{RATIO_LEVELS[level - 1]}")
        return DefenseSpec.at_level(kind, level, steps=self.pripert_steps,
                                    epsilon=self.pripert_epsilon,
                                    l0_rank_order=self.l0_rank_order)

    def resolved(self) -> dict:
        d = asdict(self)
        d["model"] = self.model.as_dict()
        d["attack"] = asdict(self.attack)
        d["attack"]["projection"] = self.attack.projection_kind
        d["defense_specs"] = {t: self.defense(t).as_dict()
                              for t in self.defenses + (self.q1_defense, self.bypass_defense)}
        d["metrics"] = {"precision_recall": "bag", "rouge_l": "f1"}
        return d


# ------------------------------------------------------------------- loading

_SECTIONS = {
    "model": {f.name for f in fields(ModelConfig)} | {"checkpoint", "train_steps"},
    "corpus": {"path", "prompts", "max_len"},
    "attack": {f.name for f in fields(AttackConfig)},
    "defense": {"defenses", "grid_kinds", "levels", "pripert_steps", "pripert_epsilon",
                "l0_rank_order", "q1_defense", "bypass_defense"},
    "experiment": {"seed", "q1_list", "output_dir", "workers"},
    "sensitivity": {"paf_draws", "paf_inputs"},
    "timing": {"timing_trials", "timing_ratios", "timing_kinds"},
}

_TUPLE_INT = {"levels", "q1_list"}
_TUPLE_FLOAT = {"timing_ratios"}
_TUPLE_STR = {"defenses", "grid_kinds", "timing_kinds"}


def _coerce(key: str, raw: str, target_type):
    if key in _TUPLE_INT:
        return _ints(raw)
    if key in _TUPLE_FLOAT:
        return _floats(raw)
    if key in _TUPLE_STR:
        return tuple(_items(raw))
    if target_type in (int, "int"):
        return int(raw)
    if target_type in (float, "float"):
        return float(raw)
    if target_type in ("Optional[str]", "str", str):
        return str(raw)
    return raw


def _flatten_ini(path) -> dict:
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    try:
        read = cp.read(path, encoding="utf-8")
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    if not read:
        raise ConfigError(f"config file not found: {path}")
    flat = {}
    for section in cp.sections():
        allowed = _SECTIONS.get(section)
        if allowed is None:
            raise ConfigError(f"{path}: unknown section [{section}]")
        for key, value in cp.items(section):
            key = key.replace("-", "_")
            if key not in allowed:
                raise ConfigError(f"{path}: unknown key {key!r} in [{section}]")
            flat[(section, key)] = value
    return flat


def load_config(path=None, overrides: Optional[dict] = None, env=None) -> ExperimentConfig:
    """Build a config from an optional INI file, then ``overrides`` (section, key) -> str.

    ``SPLITLEAK_SEED`` in the environment replaces the experiment seed last.
    """
    env = os.environ if env is None else env
    flat = _flatten_ini(path) if path else {}
    flat.update(overrides or {})
    model_kw, attack_kw, top = {}, {}, {}
    mtypes = {f.name: f.type for f in fields(ModelConfig)}
    atypes = {f.name: f.type for f in fields(AttackConfig)}
    etypes = {f.name: f.type for f in fields(ExperimentConfig)}
    try:
        for (section, key), raw in flat.items():
            if section == "model" and key in mtypes:
                model_kw[key] = int(raw)
            elif section == "attack":
                attack_kw[key] = None if (key == "projection" and raw in ("", "none")) \
                    else _coerce(key, raw, atypes[key])
            elif section == "corpus" and key == "path":
                top["corpus"] = raw
            else:
                top[key] = _coerce(key, raw, etypes[key])
        if SEED_ENV in env and env[SEED_ENV].strip():
            top["seed"] = int(env[SEED_ENV])
            top["seed_from_env"] = True
        cfg = ExperimentConfig(model=ModelConfig(**model_kw), attack=AttackConfig(**attack_kw),
                               **top)
    except ConfigError:
        raise
    except (TypeError, ValueError, KeyError) as exc:
        raise ConfigError(str(exc)) from exc
    if cfg.checkpoint and not Path(cfg.checkpoint).is_file():
        raise ConfigError(f"checkpoint not found: {cfg.checkpoint}")
    if not Path(cfg.corpus).is_file():
        raise ConfigError(f"corpus not found: {cfg.corpus}")
    return cfg


def with_overrides(cfg: ExperimentConfig, **kw) -> ExperimentConfig:
    return replace(cfg, **kw)
