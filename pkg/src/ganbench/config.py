"""Declarative run configuration: JSON documents with a strict schema.

Unknown keys are errors, not warnings, and every violation is collected
before raising, so a bad config reports all of its problems at once. A
canonical serialization is written alongside every run output, which makes
any output reproducible from its own directory.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

from .models import VARIANTS, ModelConfig

__all__ = ["ConfigError", "TrainParams", "EvalParams", "RunConfig", "AblateConfig",
           "resolve_out_dir", "OUT_ROOT_ENV"]

OUT_ROOT_ENV = "GANBENCH_OUT_ROOT"


class ConfigError(ValueError):
    def __init__(self, problems: list[str]):
        self.problems = problems
        super().__init__("invalid config:\n  " + "\n  ".join(problems))


def resolve_out_dir(out_dir: str | Path) -> Path:
    """Relative output paths land under $GANBENCH_OUT_ROOT when it is set."""
    out_dir = Path(out_dir)
    root = os.environ.get(OUT_ROOT_ENV)
    if root and not out_dir.is_absolute():
        return Path(root) / out_dir
    return out_dir


class _Section:
    """Schema-checked view of one nested dict; collects problems."""

    def __init__(self, raw: dict, name: str, problems: list[str]):
        self.raw = dict(raw)
        self.name = name
        self.problems = problems

    def take(self, key: str, kind, default=..., required: bool = False):
        label = f"{self.name}.{key}" if self.name else key
        if key not in self.raw:
            if required:
                self.problems.append(f"missing required key {label!r}")
                return None
            return default
        value = self.raw.pop(key)
        if value is None and default is None:
            return None
        if kind is float and isinstance(value, int) and not isinstance(value, bool):
            value = float(value)
        if kind is int and isinstance(value, bool):
            self.problems.append(f"{label!r} must be an integer, got a boolean")
            return default if default is not ... else None
        if not isinstance(value, kind):
            kind_name = kind.__name__ if isinstance(kind, type) else str(kind)
            self.problems.append(f"{label!r} must be {kind_name}, "
                                 f"got {type(value).__name__}")
            return default if default is not ... else None
        return value

    def subsection(self, key: str) -> "_Section":
        raw = self.take(key, dict, default={})
        return _Section(raw or {}, f"{self.name}.{key}" if self.name else key,
                        self.problems)

    def finish(self) -> None:
        for key in self.raw:
            label = f"{self.name}.{key}" if self.name else key
            self.problems.append(f"unknown key {label!r}")


@dataclass
class TrainParams:
    steps: int = 2000
    batch_size: int = 32
    lr: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    sample_interval: int = 500
    checkpoint_interval: int = 500
    sample_count: int = 64

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in
                ("steps", "batch_size", "lr", "beta1", "beta2",
                 "sample_interval", "checkpoint_interval", "sample_count")}


@dataclass
class EvalParams:
    extractor: str = "toy"
    n_samples: int = 256
    splits: int = 10
    split: str = "test"
    batch_size: int = 64
    extractor_steps: int = 300

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in
                ("extractor", "n_samples", "splits", "split", "batch_size",
                 "extractor_steps")}


@dataclass
class RunConfig:
    seed: int
    out_dir: Path
    manifest: Path
    model: ModelConfig
    train: TrainParams = field(default_factory=TrainParams)
    eval: EvalParams = field(default_factory=EvalParams)

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "out_dir": str(self.out_dir),
            "manifest": str(self.manifest),
            "model": self.model.to_dict(),
            "train": self.train.to_dict(),
            "eval": self.eval.to_dict(),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"

    @classmethod
    def from_dict(cls, raw: dict, base_dir: Path | str = ".") -> "RunConfig":
        problems: list[str] = []
        top = _Section(raw, "", problems)
        seed = top.take("seed", int, default=0)
        out_dir = top.take("out_dir", str, required=True)
        manifest = top.take("manifest", str, required=True)
        model = _model_from_section(top.subsection("model"), seed, problems)
        train = _train_from_section(top.subsection("train"), problems)
        eval_params = _eval_from_section(top.subsection("eval"), problems)
        top.finish()
        if problems:
            raise ConfigError(problems)
        base = Path(base_dir)
        manifest_path = Path(manifest)
        if not manifest_path.is_absolute():
            manifest_path = base / manifest_path
        return cls(seed=seed, out_dir=resolve_out_dir(out_dir),
                   manifest=manifest_path, model=model, train=train,
                   eval=eval_params)

    @classmethod
    def from_file(cls, path: Path | str) -> "RunConfig":
        path = Path(path)
        if not path.exists():
            raise ConfigError([f"config file not found: {path}"])
        try:
            raw = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError([f"config is not valid JSON: {exc}"]) from exc
        if not isinstance(raw, dict):
            raise ConfigError(["config root must be a JSON object"])
        return cls.from_dict(raw, base_dir=path.parent)


def _model_from_section(sec: _Section, default_seed: int,
                        problems: list[str]) -> ModelConfig:
    cfg = ModelConfig(
        variant=sec.take("variant", str, default="DCGAN"),
        latent_dim=sec.take("latent_dim", int, default=100),
        base_width=sec.take("base_width", int, default=64),
        img_channels=sec.take("img_channels", int, default=3),
        img_size=sec.take("img_size", int, default=64),
        num_heads=sec.take("num_heads", int, default=4),
        dropout=sec.take("dropout", float, default=0.1),
        seed=sec.take("seed", int, default=default_seed),
        dtype=sec.take("dtype", str, default="float32"),
        use_position=sec.take("use_position", int, default=None),
        cmhsa_position=sec.take("cmhsa_position", int, default=None),
    )
    sec.finish()
    problems.extend(f"model: {p}" for p in cfg.problems())
    return cfg


def _train_from_section(sec: _Section, problems: list[str]) -> TrainParams:
    params = TrainParams(
        steps=sec.take("steps", int, default=2000),
        batch_size=sec.take("batch_size", int, default=32),
        lr=sec.take("lr", float, default=2e-4),
        beta1=sec.take("beta1", float, default=0.5),
        beta2=sec.take("beta2", float, default=0.999),
        sample_interval=sec.take("sample_interval", int, default=500),
        checkpoint_interval=sec.take("checkpoint_interval", int, default=500),
        sample_count=sec.take("sample_count", int, default=64),
    )
    sec.finish()
    if params.steps < 1:
        problems.append(f"train.steps must be >= 1, got {params.steps}")
    if params.batch_size < 1:
        problems.append(f"train.batch_size must be >= 1, got {params.batch_size}")
    if params.lr < 0:
        problems.append(f"train.lr must be >= 0, got {params.lr}")
    for name in ("beta1", "beta2"):
        v = getattr(params, name)
        if not 0.0 <= v < 1.0:
            problems.append(f"train.{name} must lie in [0, 1), got {v}")
    for name in ("sample_interval", "checkpoint_interval"):
        if getattr(params, name) < 0:
            problems.append(f"train.{name} must be >= 0 (0 disables)")
    if params.sample_count < 1:
        problems.append(f"train.sample_count must be >= 1, got {params.sample_count}")
    return params


def _eval_from_section(sec: _Section, problems: list[str]) -> EvalParams:
    params = EvalParams(
        extractor=sec.take("extractor", str, default="toy"),
        n_samples=sec.take("n_samples", int, default=256),
        splits=sec.take("splits", int, default=10),
        split=sec.take("split", str, default="test"),
        batch_size=sec.take("batch_size", int, default=64),
        extractor_steps=sec.take("extractor_steps", int, default=300),
    )
    sec.finish()
    if params.n_samples < 64:
        problems.append(f"eval.n_samples must be >= 64, got {params.n_samples}")
    if params.splits < 1:
        problems.append(f"eval.splits must be >= 1, got {params.splits}")
    if params.split not in ("train", "val", "test", "all"):
        problems.append(f"eval.split must be train/val/test/all, got {params.split!r}")
    if params.batch_size < 1:
        problems.append(f"eval.batch_size must be >= 1, got {params.batch_size}")
    if params.extractor_steps < 1:
        problems.append(f"eval.extractor_steps must be >= 1, got {params.extractor_steps}")
    return params


@dataclass
class AblateConfig:
    """One training/eval recipe applied to every variant, over shared seeds."""

    seeds: list[int]
    out_dir: Path
    manifest: Path
    model: ModelConfig          # variant field ignored; all four are run
    train: TrainParams
    eval: EvalParams

    def run_config(self, variant: str, seed: int) -> RunConfig:
        if variant not in VARIANTS:
            raise ConfigError([f"unknown variant {variant!r}"])
        model = ModelConfig.from_dict({**self.model.to_dict(),
                                       "variant": variant, "seed": seed})
        return RunConfig(
            seed=seed,
            out_dir=self.out_dir / variant.lower().replace("-", "_") / f"seed_{seed}",
            manifest=self.manifest,
            model=model,
            train=self.train,
            eval=self.eval,
        )

    def to_dict(self) -> dict:
        return {
            "seeds": list(self.seeds),
            "out_dir": str(self.out_dir),
            "manifest": str(self.manifest),
            "model": self.model.to_dict(),
            "train": self.train.to_dict(),
            "eval": self.eval.to_dict(),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"

    @classmethod
    def from_file(cls, path: Path | str) -> "AblateConfig":
        path = Path(path)
        if not path.exists():
            raise ConfigError([f"config file not found: {path}"])
        try:
            raw = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError([f"config is not valid JSON: {exc}"]) from exc
        if not isinstance(raw, dict):
            raise ConfigError(["config root must be a JSON object"])
        problems: list[str] = []
        top = _Section(raw, "", problems)
        seeds = top.take("seeds", list, required=True)
        out_dir = top.take("out_dir", str, required=True)
        manifest = top.take("manifest", str, required=True)
        model = _model_from_section(top.subsection("model"), 0, problems)
        train = _train_from_section(top.subsection("train"), problems)
        eval_params = _eval_from_section(top.subsection("eval"), problems)
        top.finish()
        if seeds is not None:
            if not seeds or not all(isinstance(s, int) and not isinstance(s, bool)
                                    for s in seeds):
                problems.append("'seeds' must be a non-empty list of integers")
        if problems:
            raise ConfigError(problems)
        manifest_path = Path(manifest)
        if not manifest_path.is_absolute():
            manifest_path = path.parent / manifest_path
        return cls(seeds=list(seeds), out_dir=resolve_out_dir(out_dir),
                   manifest=manifest_path, model=model, train=train,
                   eval=eval_params)
