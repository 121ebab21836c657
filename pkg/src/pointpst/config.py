"""Flat JSON run configuration shared by every CLI subcommand."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

from .attacks import ATTACKS
from .dataset import SHAPES
from .model import AugmentationSpec, ClassifierConfig
from .purify import PurifierKind
from .selftrain import PstConfig
from .stream import MIXED_DEFAULT, StreamSpec


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    seed: int = 0
    # dataset
    n_classes: int = 8
    train_per_class: int = 256
    test_per_class: int = 64
    n_points: int = 256
    # model and pretraining
    feature_dim: int = 64
    hidden: list[int] = field(default_factory=lambda: [64, 128])
    pretrain_epochs: int = 10
    pretrain_lr: float = 0.4
    pretrain_batch: int = 32
    # augmentation
    noise_std: float = 0.01
    scale_range: list[float] = field(default_factory=lambda: [0.6, 1.4])
    shear_angle_deg: float = 0.5
    rotation_deg_per_axis: float = 1.0
    translate_scale_range: list[float] = field(default_factory=lambda: [0.6, 1.4])
    translate_offset_range: list[float] = field(default_factory=lambda: [-0.2, 0.2])
    affine_noise_std: float = 0.1
    n_picked: int = 3
    # attacks
    attacks: list[str] = field(default_factory=lambda: list(MIXED_DEFAULT))
    attack_steps: int = 200
    # purification
    purifier: str = "sor"
    sor_k: int = 8
    sor_alpha: float = 1.1
    srs_keep_ratio: float = 0.875
    # self-training
    lam: float = 0.5
    learning_rate: float = 1e-3
    batch_size: int = 32
    queue_capacity: int = 512
    shrinkage: float = 1e-3
    fixed_threshold: float | None = None
    ablation_fixed_threshold: float = 0.9
    renormalize: bool = True
    # stream
    protocol: str = "single"
    single_attack: str = "pgd"
    mixed_attacks: list[str] = field(default_factory=lambda: list(MIXED_DEFAULT))
    split_seed: int = 0
    shuffle_seed: int = 1
    mode: str = "pst"

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if not 2 <= self.n_classes <= len(SHAPES):
            raise ConfigError(f"n_classes must be in [2, {len(SHAPES)}], got {self.n_classes}")
        if self.seed < 0 or self.split_seed < 0 or self.shuffle_seed < 0:
            raise ConfigError("seeds must be >= 0")
        for name in ("train_per_class", "test_per_class", "batch_size", "queue_capacity",
                     "pretrain_batch", "feature_dim"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.n_points < 8:
            raise ConfigError("n_points must be >= 8")
        for kind in [*self.attacks, self.single_attack, *self.mixed_attacks]:
            if kind not in ATTACKS:
                raise ConfigError(f"unknown attack kind {kind!r}")
        if self.purifier not in ("identity", "srs", "sor"):
            raise ConfigError(f"unknown purifier {self.purifier!r}")
        if self.mode not in ("frozen", "purify_only", "pst"):
            raise ConfigError(f"unknown mode {self.mode!r}")
        if self.attack_steps < 0 or self.pretrain_epochs < 0:
            raise ConfigError("step and epoch counts must be >= 0")
        try:
            self.classifier_config()
            self.aug_spec()
            self.purifier_kind()
            self.pst_config()
            self.stream_spec()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    @classmethod
    def from_dict(cls, raw: dict) -> "RunConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(raw) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {unknown}")
        try:
            return cls(**raw)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            raw = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None
        if not isinstance(raw, dict):
            raise ConfigError("config must be a JSON object")
        return cls.from_dict(raw)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def data_hash(self) -> str:
        """Hash of the fields that determine the generated datasets."""
        keys = ("seed", "n_classes", "train_per_class", "test_per_class", "n_points")
        blob = json.dumps({k: getattr(self, k) for k in keys}, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    # typed views -----------------------------------------------------------

    def classifier_config(self) -> ClassifierConfig:
        return ClassifierConfig(self.n_classes, self.feature_dim, tuple(self.hidden), self.seed)

    def aug_spec(self) -> AugmentationSpec:
        return AugmentationSpec(
            self.noise_std, tuple(self.scale_range), self.shear_angle_deg,
            self.rotation_deg_per_axis, tuple(self.translate_scale_range),
            tuple(self.translate_offset_range), self.affine_noise_std, self.n_picked,
        )

    def purifier_kind(self) -> PurifierKind:
        return PurifierKind(self.purifier, self.srs_keep_ratio, self.sor_k, self.sor_alpha)

    def pst_config(self) -> PstConfig:
        return PstConfig(
            lam=self.lam, learning_rate=self.learning_rate, batch_size=self.batch_size,
            queue_capacity=self.queue_capacity, shrinkage=self.shrinkage,
            fixed_threshold=self.fixed_threshold, renormalize=self.renormalize,
        )

    def stream_spec(self) -> StreamSpec:
        kinds = (self.single_attack,) if self.protocol == "single" else tuple(self.mixed_attacks)
        return StreamSpec(self.protocol, kinds, self.split_seed, self.shuffle_seed, self.batch_size)
