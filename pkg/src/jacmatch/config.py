"""Experiment configuration: JSON schema, defaults, validation and hashing."""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import jsonschema

from . import data, losses, nn
from .optim import OptimizerConfig


class ConfigError(ValueError):
    """Invalid experiment configuration (CLI exit code 2)."""


_POS_INT = {"type": "integer", "minimum": 1}
_NONNEG = {"type": "number", "minimum": 0}


def _obj(props: dict, required=()) -> dict:
    return {"type": "object", "properties": props, "required": list(required),
            "additionalProperties": False}


_SYNTH = _obj({
    "kind": {"enum": list(data.TASK_KINDS)},
    "n_classes": {"type": "integer", "minimum": 2},
    "noise": _NONNEG,
    "n_train_per_class": _POS_INT,
    "n_test_per_class": _POS_INT,
    "dim": _POS_INT,
    "image_side": {"type": ["integer", "null"], "minimum": 2},
    "template_seed": {"type": "integer"},
    "spread": _NONNEG,
    "centre_seed": {"type": ["integer", "null"]},
    "seed": {"type": "integer"},
}, ["kind"])

_BINARY = _obj({
    "train": {"type": "string"},
    "test": {"type": "string"},
    "channels": _POS_INT,
    "height": _POS_INT,
    "width": _POS_INT,
    "n_classes": {"type": "integer", "minimum": 2},
}, ["train", "test", "channels", "height", "width", "n_classes"])

_NET = {
    "arch": {"enum": sorted(nn.ARCHITECTURES) + ["mlp"]},
    "width": _POS_INT,
    "hidden": {"type": ["array", "null"], "items": _POS_INT},
    "activation": {"enum": ["relu", "sigmoid"]},
}

SCHEMA = _obj({
    "name": {"type": "string"},
    "task": {"oneOf": [_SYNTH, _obj({"binary": _BINARY}, ["binary"])]},
    "subset_per_class": {"type": ["integer", "null"], "minimum": 1},
    "teacher": {"type": ["object", "null"], "properties": {
        "checkpoint": {"type": ["string", "null"]},
        "head": {"type": ["string", "null"]},
        "task": _SYNTH,
        "epochs": _POS_INT,
        "seed": {"type": "integer"},
        **_NET,
    }, "additionalProperties": False},
    "student": _obj({
        **_NET,
        "heads": {"type": ["object", "null"], "additionalProperties": _POS_INT},
        "init_checkpoint": {"type": ["string", "null"]},
    }),
    "loss": _obj({
        "alpha": _NONNEG, "beta": _NONNEG, "gamma": _NONNEG, "sigma": _NONNEG,
        "family": {"enum": list(losses.FAMILIES)},
        "temperature": {"type": "number", "exclusiveMinimum": 0},
        "jac_mode": {"enum": list(losses.MODES)},
        "pool_window": {"type": ["integer", "string", "null"]},
        "tap_pairs": {"type": "array", "items": {"type": "array", "items": {"type": "integer"},
                                                 "minItems": 2, "maxItems": 2}},
        "attention_weight": _NONNEG,
        "penalty": _NONNEG,
        "ce_head": {"type": ["string", "null"]},
        "match_head": {"type": ["string", "null"]},
        "teacher_head": {"type": ["string", "null"]},
    }),
    "optimizer": _obj({
        "kind": {"enum": ["sgd-momentum", "adam"]},
        "lr": {"type": "number", "exclusiveMinimum": 0},
        "milestones": {"type": "array", "items": {"type": "integer", "minimum": 0}},
        "factor": {"type": "number", "exclusiveMinimum": 0},
        "momentum": _NONNEG, "beta1": _NONNEG, "beta2": _NONNEG,
        "eps": {"type": "number", "exclusiveMinimum": 0},
    }),
    "epochs": _POS_INT,
    "batch_size": _POS_INT,
    "seeds": {"type": "array", "items": {"type": "integer"}, "minItems": 1},
    "out_dir": {"type": "string"},
    "test_sigmas": {"type": "array", "items": _NONNEG},
    "reduction_examples": _POS_INT,
})

DEFAULTS = {
    "name": "run",
    "subset_per_class": None,
    "teacher": None,
    "student": {"arch": "vgg-1s", "width": 8, "hidden": None, "activation": "relu", "heads": None,
                "init_checkpoint": None},
    "loss": {"alpha": 1.0, "beta": 0.0, "gamma": 0.0, "sigma": 1.0, "family": "squared-error",
             "temperature": 1.0, "jac_mode": "full", "pool_window": None, "tap_pairs": [],
             "attention_weight": 0.0, "penalty": 0.0, "ce_head": None, "match_head": None,
             "teacher_head": None},
    "optimizer": {"kind": "adam", "lr": 1e-3, "milestones": None, "factor": 0.1},
    "epochs": 20,
    "batch_size": 32,
    "seeds": [0],
    "out_dir": "runs",
    "test_sigmas": [0.0],
    "reduction_examples": 128,
}

TEACHER_DEFAULTS = {"checkpoint": None, "head": None, "arch": "vgg-2t", "width": 8, "hidden": None,
                    "activation": "relu", "epochs": 30, "seed": 0}

# excluded from the hash: they select which cells run and where results land
UNHASHED = ("seeds", "out_dir")


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


@dataclass(frozen=True)
class ExperimentConfig:
    raw: dict

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        try:
            jsonschema.validate(d, SCHEMA)
        except jsonschema.ValidationError as exc:
            where = "/".join(map(str, exc.absolute_path)) or "<root>"
            raise ConfigError(f"config error at {where}: {exc.message}") from None
        if "task" not in d:
            raise ConfigError("config error at <root>: 'task' is a required property")
        merged = _merge(DEFAULTS, d)
        if merged["optimizer"].get("milestones") is None:
            # one 10x drop at 80% of the epochs
            merged["optimizer"]["milestones"] = [max(1, int(0.8 * merged["epochs"]))]
        if merged["teacher"] is not None:
            merged["teacher"] = _merge(TEACHER_DEFAULTS, merged["teacher"])
        cfg = cls(merged)
        cfg._semantic_checks()
        return cfg

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            d = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        return cls.from_dict(d)

    def _semantic_checks(self) -> None:
        try:
            spec = self.loss_spec()
            self.optimizer_config()
            if "binary" not in self.raw["task"]:
                self.task()
        except ValueError as exc:
            raise ConfigError(f"config error: {exc}") from None
        needs_teacher = spec.beta > 0 or spec.gamma > 0 or spec.attention_weight > 0
        if needs_teacher and self.raw["teacher"] is None:
            raise ConfigError("config error: activation, Jacobian or attention terms need a teacher")

    def __getitem__(self, key):
        return self.raw[key]

    def with_overrides(self, **sections) -> "ExperimentConfig":
        return ExperimentConfig.from_dict(_merge(self.to_dict(), sections))

    def to_dict(self) -> dict:
        return copy.deepcopy(self.raw)

    def task(self) -> data.SyntheticTask:
        t = {k: v for k, v in self.raw["task"].items() if k != "seed"}
        return data.SyntheticTask(**t)

    @property
    def data_seed(self) -> int:
        return int(self.raw["task"].get("seed", 0))

    def loss_spec(self) -> losses.LossSpec:
        l = self.raw["loss"]
        strategy = losses.JacobianStrategy(l["jac_mode"], l["pool_window"])
        return losses.LossSpec(
            alpha=l["alpha"], beta=l["beta"], gamma=l["gamma"], sigma=l["sigma"], family=l["family"],
            temperature=l["temperature"], jac_strategy=strategy,
            tap_pairs=tuple(tuple(p) for p in l["tap_pairs"]), attention_weight=l["attention_weight"],
            penalty=l["penalty"], ce_head=l["ce_head"], match_head=l["match_head"],
            teacher_head=l["teacher_head"])

    def optimizer_config(self) -> OptimizerConfig:
        return OptimizerConfig.from_dict(self.raw["optimizer"])

    def hash(self) -> str:
        hashed = {k: v for k, v in self.raw.items() if k not in UNHASHED}
        blob = json.dumps(hashed, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]
