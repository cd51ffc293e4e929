"""Experiment configuration: one JSON document with ``dataset`` and ``run`` sections.

The dataset section is either a preset (``{"preset": "shifted-mixture-2d", ...}``)
or a complete dataset spec.  Parsing is strict: unknown keys are rejected.
``to_dict`` writes every field out explicitly so artifacts are self-describing.
"""

from __future__ import annotations

import inspect
import json
from dataclasses import dataclass, field
from pathlib import Path

from .pipeline import ConfigError, RunConfig
from .synthdata import DatasetSpec, SpecError, shifted_mixture_2d

PRESETS = {"shifted-mixture-2d": shifted_mixture_2d}


def _preset_defaults(name: str) -> dict:
    sig = inspect.signature(PRESETS[name])
    return {k: p.default for k, p in sig.parameters.items()}


def _same_kind(default, value) -> bool:
    if isinstance(default, bool) or isinstance(value, bool):
        return isinstance(default, bool) and isinstance(value, bool)
    if isinstance(default, float):
        return isinstance(value, (int, float))
    return isinstance(value, type(default))


@dataclass
class ExperimentConfig:
    run: RunConfig = field(default_factory=RunConfig)
    preset: str | None = "shifted-mixture-2d"
    preset_args: dict = field(default_factory=dict)
    dataset_doc: dict | None = None  # full spec when no preset is used

    def dataset_spec(self) -> DatasetSpec:
        if self.preset is not None:
            return PRESETS[self.preset](**self.preset_args)
        return DatasetSpec.from_dict(self.dataset_doc)

    def to_dict(self) -> dict:
        if self.preset is not None:
            ds = {"preset": self.preset, **_preset_defaults(self.preset), **self.preset_args}
        else:
            ds = self.dataset_spec().to_dict()
        return {"dataset": ds, "run": self.run.to_dict()}

    @classmethod
    def from_dict(cls, doc: dict) -> "ExperimentConfig":
        if not isinstance(doc, dict):
            raise ConfigError("config must be a JSON object")
        unknown = set(doc) - {"dataset", "run"}
        if unknown:
            raise ConfigError(f"unknown top-level keys: {sorted(unknown)}")
        run = RunConfig.from_dict(doc.get("run", {}))
        ds = dict(doc.get("dataset", {"preset": "shifted-mixture-2d"}))
        if "preset" in ds:
            name = ds.pop("preset")
            if name not in PRESETS:
                raise ConfigError(f"unknown dataset preset {name!r}; known: {sorted(PRESETS)}")
            allowed = _preset_defaults(name)
            bad = set(ds) - set(allowed)
            if bad:
                raise ConfigError(f"unknown keys for preset {name}: {sorted(bad)}")
            for k, v in ds.items():
                if not _same_kind(allowed[k], v):
                    raise ConfigError(f"dataset.{k} has the wrong type")
                if isinstance(allowed[k], float):
                    ds[k] = float(v)
            cfg = cls(run, name, ds, None)
        else:
            cfg = cls(run, None, {}, ds)
        try:
            spec = cfg.dataset_spec()
        except (SpecError, TypeError) as exc:
            raise ConfigError(f"invalid dataset: {exc}") from exc
        if spec.task != run.task:
            raise ConfigError(f"dataset task {spec.task!r} does not match run task {run.task!r}")
        return cfg

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def load_config(path: Path | None) -> ExperimentConfig:
    if path is None:
        return ExperimentConfig()
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return ExperimentConfig.from_dict(doc)
