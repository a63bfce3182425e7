"""Configuration dataclasses and the JSON run-config loader.

Every dataclass validates itself on construction and raises
:class:`~ctxmim.errors.ConfigError` on the first violated invariant.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .errors import ConfigError

__all__ = [
    "BackboneConfig",
    "LossWeights",
    "OptimizerConfig",
    "TrainConfig",
    "SynthConfig",
    "ProbeConfig",
    "DatasetConfig",
    "RunConfig",
    "load_run_config",
]


def _require(cond: bool, msg: str) -> None:
    if not cond:
        raise ConfigError(msg)


@dataclass(frozen=True)
class BackboneConfig:
    image_size: tuple[int, int] = (32, 32)
    channels: int = 3
    patch_size: int = 4
    embed_dim: int = 64
    depth: int = 2
    heads: int = 4
    window: int | None = None
    mlp_ratio: float = 2.0

    def __post_init__(self):
        object.__setattr__(self, "image_size", tuple(int(v) for v in self.image_size))
        h, w = self.image_size
        _require(len(self.image_size) == 2, "image_size must be (H, W)")
        _require(min(h, w, self.channels, self.patch_size) >= 1, "image geometry must be positive")
        _require(h % self.patch_size == 0 and w % self.patch_size == 0,
                 f"image {h}x{w} not divisible by patch size {self.patch_size}")
        _require(self.embed_dim >= 1 and self.heads >= 1, "embed_dim and heads must be positive")
        _require(self.embed_dim % self.heads == 0,
                 f"embed_dim {self.embed_dim} not divisible by heads {self.heads}")
        _require(self.depth >= 0, "depth must be >= 0")
        _require(self.mlp_ratio > 0 and round(self.embed_dim * self.mlp_ratio) >= 1,
                 "mlp_ratio must give a positive hidden width")
        if self.window is not None:
            _require(self.window >= 1, "window must be positive")
            _require(self.n_rows % self.window == 0 and self.n_cols % self.window == 0,
                     f"window {self.window} does not tile the {self.n_rows}x{self.n_cols} grid")

    @property
    def height(self) -> int:
        return self.image_size[0]

    @property
    def width(self) -> int:
        return self.image_size[1]

    @property
    def n_rows(self) -> int:
        return self.image_size[0] // self.patch_size

    @property
    def n_cols(self) -> int:
        return self.image_size[1] // self.patch_size

    @property
    def n_patches(self) -> int:
        return self.n_rows * self.n_cols

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * self.channels

    @property
    def mlp_hidden(self) -> int:
        return int(round(self.embed_dim * self.mlp_ratio))


@dataclass(frozen=True)
class LossWeights:
    re: float = 1.0
    pr: float = 1.0
    cc: float = 1.0

    def __post_init__(self):
        for name in ("re", "pr", "cc"):
            v = getattr(self, name)
            _require(math.isfinite(v) and v >= 0, f"loss weight {name} must be finite and >= 0")


@dataclass(frozen=True)
class OptimizerConfig:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.05

    def __post_init__(self):
        _require(self.lr > 0, "lr must be > 0")
        _require(0 <= self.beta1 < 1 and 0 <= self.beta2 < 1, "betas must lie in [0, 1)")
        _require(self.eps > 0, "eps must be > 0")
        _require(self.weight_decay >= 0, "weight_decay must be >= 0")

    @classmethod
    def preset(cls, name: str) -> "OptimizerConfig":
        """``"desk"`` (the defaults) or ``"paper"`` (lr 1e-5, no stated weight decay)."""
        if name == "desk":
            return cls()
        if name == "paper":
            return cls(lr=1e-5, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.0)
        raise ConfigError(f"unknown optimizer preset {name!r}")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    batch_size: int = 32
    mask_ratio: float = 0.75
    seed: int = 0
    weights: LossWeights = field(default_factory=LossWeights)
    ablate_context: bool = False
    mask_unit: int = 1
    pr_support: str = "masked"

    def __post_init__(self):
        if isinstance(self.weights, dict):
            object.__setattr__(self, "weights", LossWeights(**self.weights))
        _require(self.epochs >= 0, "epochs must be >= 0")
        _require(self.batch_size >= 1, "batch_size must be >= 1")
        _require(0.0 <= self.mask_ratio <= 1.0, "mask_ratio must lie in [0, 1]")
        _require(self.mask_unit >= 1, "mask_unit must be >= 1")
        _require(self.pr_support in ("masked", "all"), "pr_support must be 'masked' or 'all'")

    @property
    def effective_weights(self) -> LossWeights:
        if self.ablate_context:
            return LossWeights(self.weights.re, 0.0, 0.0)
        return self.weights


LABEL_RULES = ("object-count-bucket", "dominant-shape", "background-level")
CONTRASTS = ("bright", "mixed")


@dataclass(frozen=True)
class SynthConfig:
    image_size: tuple[int, int] = (32, 32)
    channels: int = 3
    count_range: tuple[int, int] = (5, 15)
    size_range: tuple[int, int] = (3, 8)
    shapes: tuple[str, ...] = ("rectangle", "ellipse")
    texture_amplitude: float = 0.08
    label_rule: str = "object-count-bucket"
    num_classes: int = 3
    patch_size: int = 4
    contrast: str = "bright"

    def __post_init__(self):
        for name in ("image_size", "count_range", "size_range", "shapes"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        h, w = self.image_size
        k_min, k_max = self.count_range
        s_min, s_max = self.size_range
        _require(h >= 1 and w >= 1 and self.channels >= 1, "image geometry must be positive")
        _require(0 <= k_min <= k_max, "object count range must satisfy 0 <= k_min <= k_max")
        _require(1 <= s_min <= s_max, "object size range must satisfy 1 <= min <= max")
        _require(s_max < min(h, w), f"object max size {s_max} must be below min(H, W)={min(h, w)}")
        _require(len(self.shapes) >= 1 and set(self.shapes) <= {"rectangle", "ellipse"},
                 "shapes must be a nonempty subset of {rectangle, ellipse}")
        _require(0.0 <= self.texture_amplitude <= 0.5, "texture_amplitude must lie in [0, 0.5]")
        _require(self.label_rule in LABEL_RULES, f"label_rule must be one of {LABEL_RULES}")
        _require(self.num_classes >= 1, "num_classes must be >= 1")
        _require(self.contrast in CONTRASTS, f"contrast must be one of {CONTRASTS}")
        _require(h % self.patch_size == 0 and w % self.patch_size == 0,
                 "footprint patch size must divide the image")


@dataclass(frozen=True)
class DatasetConfig:
    kind: str = "synth"
    path: str | None = None
    count: int = 2000
    seed: int = 0
    synth: SynthConfig = field(default_factory=SynthConfig)

    def __post_init__(self):
        if isinstance(self.synth, dict):
            object.__setattr__(self, "synth", SynthConfig(**self.synth))
        _require(self.kind in ("synth", "folder"), "dataset kind must be 'synth' or 'folder'")
        _require(self.kind != "folder" or self.path, "folder dataset requires a path")
        _require(self.count >= 0, "dataset count must be >= 0")


@dataclass(frozen=True)
class ProbeConfig:
    epochs: int = 100
    batch_size: int = 64
    lr: float = 1e-2
    seed: int = 0
    test_fraction: float = 0.25
    mode: str = "linear"
    # frozen features: "lbfgs" solves the convex problem full-batch; "adam" uses
    # epochs/batch_size/lr. Fine-tuning always uses adam.
    solver: str = "lbfgs"
    max_iter: int = 500
    l2: float = 1e-4

    def __post_init__(self):
        _require(self.epochs >= 1 and self.batch_size >= 1 and self.lr > 0 and self.max_iter >= 1,
                 "probe hyperparameters must be positive")
        _require(self.l2 >= 0.0, "probe l2 must be >= 0")
        _require(0.0 < self.test_fraction < 1.0, "test_fraction must lie in (0, 1)")
        _require(self.mode in ("linear", "finetune"), "probe mode must be 'linear' or 'finetune'")
        _require(self.solver in ("lbfgs", "adam"), "probe solver must be 'lbfgs' or 'adam'")


_SECTIONS = {
    "backbone": BackboneConfig,
    "train": TrainConfig,
    "optimizer": OptimizerConfig,
    "dataset": DatasetConfig,
    "probe": ProbeConfig,
}


@dataclass(frozen=True)
class RunConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    probe: ProbeConfig = field(default_factory=ProbeConfig)

    def __post_init__(self):
        b, s = self.backbone, self.dataset.synth
        if self.dataset.kind == "synth":
            _require(tuple(s.image_size) == b.image_size and s.channels == b.channels,
                     "synthetic image geometry must match the backbone")

    @classmethod
    def from_dict(cls, raw: dict[str, Any]) -> "RunConfig":
        if not isinstance(raw, dict):
            raise ConfigError("run config must be a JSON object")
        raw = dict(raw)
        # a top-level "weights" section is accepted as shorthand for train.weights
        if "weights" in raw:
            train = dict(raw.get("train", {}))
            train["weights"] = raw.pop("weights")
            raw["train"] = train
        unknown = set(raw) - set(_SECTIONS)
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        raw["dataset"] = _synth_defaults_from_backbone(raw.get("backbone", {}),
                                                       raw.get("dataset", {}))
        kwargs = {}
        for name, typ in _SECTIONS.items():
            section = raw.get(name, {})
            if name == "optimizer" and isinstance(section, str):
                kwargs[name] = OptimizerConfig.preset(section)
                continue
            if not isinstance(section, dict):
                raise ConfigError(f"config section {name!r} must be an object")
            try:
                kwargs[name] = _build(typ, section)
            except TypeError as exc:
                raise ConfigError(f"bad field in section {name!r}: {exc}") from None
        return cls(**kwargs)

    def to_dict(self) -> dict[str, Any]:
        return json.loads(json.dumps(dataclasses.asdict(self)))


def _synth_defaults_from_backbone(backbone, dataset):
    """Unspecified synthetic geometry follows the backbone so partial configs stay consistent."""
    if not isinstance(backbone, dict) or not isinstance(dataset, dict):
        return dataset
    synth = dataset.get("synth", {})
    if not isinstance(synth, dict):
        return dataset
    ref = BackboneConfig()
    synth = dict(synth)
    size = tuple(backbone.get("image_size", ref.image_size))
    synth.setdefault("image_size", size)
    synth.setdefault("channels", backbone.get("channels", ref.channels))
    synth.setdefault("patch_size", backbone.get("patch_size", ref.patch_size))
    if "size_range" not in synth:
        lo, hi = SynthConfig.size_range
        cap = min(synth["image_size"]) - 1
        if hi > cap >= 1:
            synth["size_range"] = (min(lo, cap), cap)
    return {**dataset, "synth": synth}


def _build(typ, section: dict):
    known = {f.name for f in dataclasses.fields(typ)}
    unknown = set(section) - known
    if unknown:
        raise ConfigError(f"unknown fields for {typ.__name__}: {sorted(unknown)}")
    return typ(**section)


def load_run_config(path: str | Path) -> RunConfig:
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from None
    return RunConfig.from_dict(raw)
