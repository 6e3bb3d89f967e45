"""Run configuration: one JSON document per run, schema-checked before any work starts.

    {
      "model": {"kind": "thama", "d_f": 96, "core": "full", "ranks": [32, 32, 32], "dropout": 0.3},
      "data":  {"synth": {"d1": 64, "d2": 64, "sigma": 0.5, "theta_deg": 30, "seed": 42}},
      "train": {"lr": 0.001, "batch_size": 32, "epochs": 100, "seed": 0},
      "output": "runs/thama"
    }

``data`` holds either a ``synth`` block or ``paths``: per domain tag, per
split, a list of one (single-view) or two (fusion) EMB1 files.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import jsonschema

from thama.data import SPLITS, SynthConfig
from thama.errors import ConfigError
from thama.models import KINDS, ModelSpec
from thama.training import TrainConfig

_POS_INT = {"type": "integer", "minimum": 1}
_NUM = {"type": "number"}

SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["model"],
    "properties": {
        "model": {
            "type": "object",
            "additionalProperties": False,
            "required": ["kind"],
            "properties": {
                "kind": {"enum": list(KINDS)},
                "d1": _POS_INT,
                "d2": _POS_INT,
                "d_f": _POS_INT,
                "core": {"enum": ["full", "factored"]},
                "ranks": {"type": "array", "items": _POS_INT, "minItems": 3, "maxItems": 3},
                "dropout": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
                "seed": {"type": "integer", "minimum": 0},
            },
        },
        "data": {
            "type": "object",
            "additionalProperties": False,
            "maxProperties": 1,
            "minProperties": 1,
            "properties": {
                "synth": {
                    "type": "object",
                    "additionalProperties": False,
                    "properties": {
                        "d1": {"type": "integer", "minimum": 2},
                        "d2": {"type": "integer", "minimum": 2},
                        "n_train": _POS_INT,
                        "n_dev": _POS_INT,
                        "n_test": _POS_INT,
                        "sigma": {"type": "number", "minimum": 0},
                        "theta_deg": _NUM,
                        "seed": {"type": "integer", "minimum": 0},
                    },
                },
                "paths": {
                    "type": "object",
                    "minProperties": 1,
                    "propertyNames": {"enum": ["E", "C"]},
                    "additionalProperties": {
                        "type": "object",
                        "additionalProperties": False,
                        "required": ["train", "dev"],
                        "properties": {
                            s: {"type": "array", "items": {"type": "string"}, "minItems": 1, "maxItems": 2}
                            for s in SPLITS
                        },
                    },
                },
            },
        },
        "train": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "lr": {"type": "number", "exclusiveMinimum": 0},
                "batch_size": _POS_INT,
                "epochs": _POS_INT,
                "early_stop_patience": _POS_INT,
                "lr_patience": _POS_INT,
                "lr_factor": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
                "min_lr": {"type": "number", "minimum": 0},
                "min_delta": {"type": "number", "minimum": 0},
                "monitor": {"enum": ["loss", "eer"]},
                "seed": {"type": "integer", "minimum": 0},
                "domain": {"enum": ["E", "C"]},
            },
        },
        "gradcheck": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "epsilon": {"type": "number", "exclusiveMinimum": 0},
                "threshold": {"type": "number", "exclusiveMinimum": 0},
                "records": _POS_INT,
                "seed": {"type": "integer", "minimum": 0},
            },
        },
        "output": {"type": "string", "minLength": 1},
    },
}


@dataclass(frozen=True)
class GradCheckConfig:
    epsilon: float = 1e-5
    threshold: float = 1e-5
    records: int = 2
    seed: int = 0


@dataclass(frozen=True)
class RunConfig:
    model: dict
    data: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    gradcheck: dict = field(default_factory=dict)
    output: str | None = None

    @classmethod
    def from_dict(cls, doc) -> "RunConfig":
        try:
            jsonschema.validate(doc, SCHEMA)
        except jsonschema.ValidationError as exc:
            where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
            raise ConfigError(f"config {where}: {exc.message}") from None
        cfg = cls(**doc)
        # build every typed view once so bad combinations fail up front
        cfg.train_config()
        cfg.synth_config()
        cfg.gradcheck_config()
        synth = cfg.synth_config()
        if "d1" in cfg.model or synth is not None:
            cfg.model_spec(*(synth.d1, synth.d2) if synth else (None, None))
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            doc = json.loads(Path(path).read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise ConfigError(f"config file {path} not found") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from None
        return cls.from_dict(doc)

    def to_dict(self):
        d = {"model": self.model, "data": self.data, "train": self.train, "gradcheck": self.gradcheck}
        if self.output is not None:
            d["output"] = self.output
        return d

    def with_seed(self, seed: int) -> "RunConfig":
        """Override the run seed: model init, training order/dropout and synthetic draw."""
        data = self.data
        if "synth" in data:
            data = {"synth": {**data["synth"], "seed": seed}}
        return replace(
            self,
            model={**self.model, "seed": seed},
            train={**self.train, "seed": seed},
            gradcheck={**self.gradcheck, "seed": seed},
            data=data,
        )

    def synth_config(self) -> SynthConfig | None:
        if "synth" not in self.data:
            return None
        try:
            return SynthConfig(**self.data["synth"])
        except ValueError as exc:
            raise ConfigError(f"data.synth: {exc}") from None

    def train_config(self) -> TrainConfig:
        t = dict(self.train)
        t.pop("domain", None)
        if "epochs" in t:
            t["max_epochs"] = t.pop("epochs")
        return TrainConfig(**t)

    def gradcheck_config(self) -> GradCheckConfig:
        return GradCheckConfig(**self.gradcheck)

    @property
    def train_domain(self) -> str:
        return self.train.get("domain", "E")

    def model_spec(self, d1: int | None = None, d2: int | None = None) -> ModelSpec:
        """Spec with input dims from the model block, else from the data."""
        m = dict(self.model)
        m.setdefault("d1", d1)
        if m["kind"] in ("concat", "thama"):
            m.setdefault("d2", d2)
        if m.get("d1") is None:
            raise ConfigError("model input dims unknown: set model.d1/d2 or provide data")
        if "ranks" in m:
            m["ranks"] = tuple(m["ranks"])
        return ModelSpec(**m)
