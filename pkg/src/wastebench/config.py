"""Run configuration: packaged YAML defaults, user overrides, env overrides for paths."""

from __future__ import annotations

import copy
import os
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import yaml

from .errors import ConfigError, MissingFile
from .manifest import Label
from .models import ModelSpec, ParallelEnsembleSpec
from .pipeline import AugmentationRanges, NormalizationStats
from .trainer import OptimizerSpec, TrainConfig

ENV_PREFIX = "WASTEBENCH_"
PATH_KEYS = ("manifest", "corrections", "image_root", "output_root", "baselines", "weights_registry")
# free-form mappings whose contents are validated elsewhere
_OPEN_KEYS = {("train", "optimizer", "hyperparams")}


def default_config() -> dict:
    text = resources.files("wastebench.data").joinpath("default_config.yaml").read_text(encoding="utf-8")
    return yaml.safe_load(text)


def _merge(base, override, trail=()):
    for key, val in override.items():
        here = trail + (key,)
        if key not in base:
            raise ConfigError(f"unknown config key {'.'.join(here)!r}")
        if here in _OPEN_KEYS:
            if not isinstance(val, dict):
                raise ConfigError(f"{'.'.join(here)} must be a mapping")
            base[key] = dict(val)
        elif isinstance(base[key], dict):
            if not isinstance(val, dict):
                raise ConfigError(f"{'.'.join(here)} must be a mapping")
            _merge(base[key], val, here)
        else:
            base[key] = val
    return base


@dataclass
class RunConfig:
    data: dict
    origin: Path | None = None

    @classmethod
    def load(cls, path=None, overrides=None, env=None):
        """Defaults <- config file <- WASTEBENCH_* path variables <- explicit overrides."""
        data = default_config()
        origin = None
        if path is not None:
            origin = Path(path)
            if not origin.is_file():
                raise MissingFile(f"no such config file: {origin}")
            try:
                user = yaml.safe_load(origin.read_text(encoding="utf-8")) or {}
            except yaml.YAMLError as exc:
                raise ConfigError(f"{origin}: invalid YAML ({exc})") from None
            if not isinstance(user, dict):
                raise ConfigError(f"{origin}: top level must be a mapping")
            _merge(data, user)
        env = os.environ if env is None else env
        for key in PATH_KEYS:
            val = env.get(ENV_PREFIX + key.upper())
            if val:
                data["paths"][key] = val
        if overrides:
            _merge(data, overrides)
        cfg = cls(data, origin)
        cfg._resolve_paths()
        cfg.validate()
        return cfg

    def _resolve_paths(self):
        base = self.origin.parent if self.origin is not None else Path.cwd()
        paths = self.data["paths"]
        for key in PATH_KEYS:
            val = paths.get(key)
            if val is None or (key == "weights_registry" and val == "hub"):
                continue
            p = Path(os.path.expanduser(str(val)))
            paths[key] = str((base / p).resolve() if not p.is_absolute() else p)
        if paths["image_root"] is None and paths["manifest"] is not None:
            paths["image_root"] = str(Path(paths["manifest"]).parent)

    def validate(self):
        # building each typed view raises on bad values
        self.train_config()
        self.normalization()
        self.augmentation()
        self.model_spec()
        if self.data["pipeline"]["online_augment"] not in ("positive", "all", "none"):
            raise ConfigError("pipeline.online_augment must be positive, all or none")
        if self.data["pipeline"]["materialize_mode"] not in ("copy", "link"):
            raise ConfigError("pipeline.materialize_mode must be copy or link")
        if self.data["report"]["tie_break"] not in ("negative", "positive"):
            raise ConfigError("report.tie_break must be negative or positive")

    def with_overrides(self, overrides):
        data = _merge(copy.deepcopy(self.data), overrides)
        cfg = RunConfig(data, self.origin)
        cfg.validate()
        return cfg

    # --- typed views ---

    def path(self, key, required=False):
        val = self.data["paths"][key]
        if val is None and required:
            raise ConfigError(f"config key paths.{key} is required for this command")
        return None if val is None else (val if key == "weights_registry" and val == "hub" else Path(val))

    @property
    def output_root(self):
        return self.path("output_root", required=True)

    @property
    def dataset_root(self):
        return self.output_root / "dataset"

    def normalization(self) -> NormalizationStats:
        n = self.data["pipeline"]["normalization"]
        try:
            return NormalizationStats(n["mean"], n["std"])
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"pipeline.normalization: {exc}") from None

    def augmentation(self) -> AugmentationRanges:
        a = self.data["pipeline"]["augmentation"]
        return AugmentationRanges(
            float(a["rotation_degrees"]), float(a["hflip_p"]), float(a["vflip_p"]),
            tuple(a["brightness"]), tuple(a["contrast"]), tuple(a["saturation"]), tuple(a["crop_area"]),
        )

    def augment_labels(self):
        mode = self.data["pipeline"]["online_augment"]
        return {"positive": (Label.POSITIVE,), "all": tuple(Label), "none": ()}[mode]

    def train_config(self) -> TrainConfig:
        t = dict(self.data["train"])
        opt = t.pop("optimizer")
        try:
            return TrainConfig(optimizer=OptimizerSpec(str(opt["kind"]), dict(opt.get("hyperparams") or {})), **t)
        except TypeError as exc:
            raise ConfigError(f"train: {exc}") from None

    def model_spec(self):
        m = self.data["model"]
        if m["architecture"] == "parallel_ensemble":
            e = m["ensemble"]
            return ParallelEnsembleSpec(
                ModelSpec(e["backbone_a"], bool(m["pretrained"]), toy_width=int(m["toy_width"])),
                ModelSpec(e["backbone_b"], bool(m["pretrained"]), toy_width=int(m["toy_width"])),
                e["fusion_mode"],
            )
        return ModelSpec(m["architecture"], bool(m["pretrained"]), int(m["frozen_prefix"]),
                         toy_width=int(m["toy_width"]))

    def tie_break(self):
        return Label.NEGATIVE if self.data["report"]["tie_break"] == "negative" else Label.POSITIVE

    def dumps(self):
        return yaml.safe_dump(self.data, sort_keys=True, default_flow_style=False)

    def dump(self, path):
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(self.dumps(), encoding="utf-8")
