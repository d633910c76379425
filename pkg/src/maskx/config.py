"""Flat ``section.key = value`` run configuration.

Sections: ``gen.`` (synthetic data), ``split.`` (A/B partition), ``model.``
(architecture), ``train.`` (optimisation and head mode), ``eval.``,
``ablate.`` (experiment grid) and ``viz.``.  Unknown keys are rejected.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable

from .heads import BackboneConfig
from .model import ModelConfig
from .shapes import GenConfig, SplitConfig, split_classes
from .train import TrainConfig
from .transfer import TransferSpec


class ConfigError(ValueError):
    pass


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(v) for v in text.split(",") if v.strip())


def _words(text: str) -> tuple[str, ...]:
    return tuple(v.strip() for v in text.split(",") if v.strip())


def _bools(text: str) -> tuple[bool, ...]:
    return tuple(_bool(v) for v in text.split(",") if v.strip())


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(_fmt(v) for v in value)
    return str(value)


# key -> (parser, default)
SCHEMA: dict[str, tuple[Callable[[str], Any], Any]] = {
    "gen.seed": (int, 0),
    "gen.train_images": (int, 2000),
    "gen.eval_images": (int, 200),
    "gen.height": (int, 128),
    "gen.width": (int, 128),
    "gen.min_instances": (int, 1),
    "gen.max_instances": (int, 4),
    "gen.min_size": (float, 0.15),
    "gen.max_size": (float, 0.45),
    "gen.max_overlap": (float, 0.2),
    "gen.noise": (float, 0.05),
    "split.size_a": (int, 5),
    "split.mode": (str, "fixed"),
    "split.seed": (int, 0),
    "model.backbone": (str, "16x3s2,32x3s1,64x3s2,64x3s1"),
    "model.roi_dim": (int, 128),
    "model.mask_dim": (int, 32),
    "model.mask_size": (int, 14),
    "model.box_crop": (int, 7),
    "model.mask_convs": (int, 2),
    "model.mlp_hidden": (int, 128),
    "train.mode": (str, "e2e"),
    "train.head_mode": (str, "transfer"),
    "train.mlp_fusion": (_bool, False),
    "train.steps": (int, 1000),
    "train.lr": (float, 0.02),
    "train.decay_steps": (_ints, (600, 800)),
    "train.decay_factor": (float, 0.1),
    "train.momentum": (float, 0.9),
    "train.weight_decay": (float, 1e-4),
    "train.images_per_step": (int, 4),
    "train.rois_per_image": (int, 8),
    "train.seed": (int, 0),
    "train.jitter": (float, 0.1),
    "train.full_k_mask_loss": (_bool, False),
    "train.transfer.source": (str, "cls+box"),
    "train.transfer.layers": (int, 2),
    "train.transfer.activation": (str, "leaky_relu"),
    "train.transfer.leaky_slope": (float, 0.01),
    "train.transfer.hidden": (int, 0),
    "train.transfer.stop_grad": (_bool, True),
    "train.transfer.randn_seed": (int, 0),
    "train.transfer.randn_dim": (int, 0),
    "train.transfer.embedding_file": (str, ""),
    "eval.seed": (int, 0),
    "eval.jitter": (float, 0.1),
    "eval.batch_size": (int, 8),
    "eval.ap_breakout": (_bool, False),
    "ablate.baseline": (str, "class-agnostic"),
    "ablate.head_modes": (_words, ("class-agnostic", "transfer")),
    "ablate.sources": (_words, ("cls+box",)),
    "ablate.layers": (_ints, (2,)),
    "ablate.activations": (_words, ("leaky_relu",)),
    "ablate.mlp_fusion": (_bools, (False,)),
    "ablate.modes": (_words, ("e2e",)),
    "ablate.stop_grad": (_bools, (True,)),
    "ablate.trials": (int, 3),
    "ablate.split_sizes": (_ints, ()),
    "ablate.workers": (int, 1),
    "viz.images": (int, 8),
}


def parse_backbone(text: str) -> BackboneConfig:
    """``16x3s2,32x3s1`` -> stages of (channels, kernel, stride)."""
    stages = []
    try:
        for part in _words(text):
            ch, rest = part.split("x")
            k, s = rest.split("s")
            stages.append((int(ch), int(k), int(s)))
    except ValueError as exc:
        raise ValueError(f"bad backbone spec {text!r}; expected e.g. 16x3s2,32x3s1") from exc
    if not stages:
        raise ValueError("backbone needs at least one stage")
    return BackboneConfig(tuple(stages))


@dataclass
class RunConfig:
    values: dict[str, Any]

    def __getitem__(self, key: str):
        return self.values[key]

    def section(self, prefix: str) -> dict[str, Any]:
        return {k[len(prefix) + 1:]: v for k, v in self.values.items() if k.startswith(prefix + ".")}

    def with_overrides(self, overrides: dict[str, Any]) -> "RunConfig":
        unknown = sorted(set(overrides) - set(SCHEMA))
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        out = RunConfig({**self.values, **overrides})
        out.validate()
        return out

    def dumps(self) -> str:
        return "".join(f"{k} = {_fmt(v)}\n" for k, v in sorted(self.values.items()))

    def digest(self) -> str:
        return hashlib.sha256(self.dumps().encode()).hexdigest()[:16]

    # -- typed views ---------------------------------------------------------

    def gen_config(self) -> GenConfig:
        g = self.section("gen")
        return GenConfig(height=g["height"], width=g["width"], min_instances=g["min_instances"],
                         max_instances=g["max_instances"], min_size=g["min_size"], max_size=g["max_size"],
                         max_overlap=g["max_overlap"], noise=g["noise"])

    def split_config(self, size_a: int | None = None, seed: int | None = None) -> SplitConfig:
        s = self.section("split")
        return split_classes(self.gen_config().num_classes, size_a or s["size_a"], s["mode"],
                             s["seed"] if seed is None else seed)

    def transfer_spec(self) -> TransferSpec:
        t = self.section("train.transfer")
        return TransferSpec(**t)

    def model_config(self) -> ModelConfig:
        m = self.section("model")
        return ModelConfig(num_classes=self.gen_config().num_classes, backbone=parse_backbone(m["backbone"]),
                           roi_dim=m["roi_dim"], mask_dim=m["mask_dim"], mask_size=m["mask_size"],
                           box_crop=m["box_crop"], mask_convs=m["mask_convs"], mlp_hidden=m["mlp_hidden"],
                           mlp_fusion=self["train.mlp_fusion"], head_mode=self["train.head_mode"],
                           transfer=self.transfer_spec())

    def train_config(self) -> TrainConfig:
        t = self.section("train")
        return TrainConfig(mode=t["mode"], steps=t["steps"], lr=t["lr"], decay_steps=t["decay_steps"],
                           decay_factor=t["decay_factor"], momentum=t["momentum"],
                           weight_decay=t["weight_decay"], images_per_step=t["images_per_step"],
                           rois_per_image=t["rois_per_image"], seed=t["seed"], jitter=t["jitter"],
                           full_k_mask_loss=t["full_k_mask_loss"])

    def validate(self) -> None:
        """Build every typed view, reporting failures against the keys involved."""
        for prefix, build in (("gen", self.gen_config), ("split", self.split_config),
                              ("train.transfer", self.transfer_spec), ("model", self.model_config),
                              ("train", self.train_config)):
            try:
                build()
            except (ValueError, TypeError) as exc:
                keys = ", ".join(sorted(k for k in SCHEMA if k.startswith(prefix + ".")))
                raise ConfigError(f"invalid {prefix}.* settings ({keys}): {exc}") from exc
        if self["split.mode"] not in ("fixed", "random"):
            raise ConfigError("split.mode: expected fixed or random")
        if self["ablate.trials"] < 1 or self["ablate.workers"] < 1:
            raise ConfigError("ablate.trials and ablate.workers must be positive")
        for key in ("gen.train_images", "gen.eval_images", "eval.batch_size"):
            if self[key] < 1:
                raise ConfigError(f"{key}: must be positive")


def default_config() -> RunConfig:
    return RunConfig({k: default for k, (_, default) in SCHEMA.items()})


def parse_assignments(lines, origin: str = "<config>") -> dict[str, Any]:
    out = {}
    for n, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{origin}:{n}: expected key = value")
        key, value = (p.strip() for p in line.split("=", 1))
        if key not in SCHEMA:
            raise ConfigError(f"{origin}:{n}: unknown config key {key!r}")
        try:
            out[key] = SCHEMA[key][0](value)
        except ValueError as exc:
            raise ConfigError(f"{origin}:{n}: bad value for {key}: {exc}") from exc
    return out


def load_config(path=None, overrides=()) -> RunConfig:
    """Defaults, then the file (if any), then ``key=value`` overrides."""
    values = {}
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        values.update(parse_assignments(path.read_text(encoding="utf-8").splitlines(), str(path)))
    values.update(parse_assignments(overrides, "--set"))
    return default_config().with_overrides(values)
