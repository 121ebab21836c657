"""PointNet-style classifier, augmentations, source pretraining and checkpoints."""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass
from hashlib import sha256
from pathlib import Path
from typing import Sequence

import numpy as np

from . import gradcore as gc
from .dataset import Dataset, FormatError, stack_clouds
from .stats import GaussianStats

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ClassifierConfig:
    n_classes: int = 8
    feature_dim: int = 64
    hidden: tuple[int, ...] = (64, 128)
    seed: int = 0

    def __post_init__(self):
        if self.n_classes < 2:
            raise ValueError("n_classes must be >= 2")
        if self.feature_dim < 2:
            raise ValueError("feature_dim must be >= 2")

    def layer_shapes(self) -> list[tuple[int, int]]:
        widths = (3, *self.hidden, self.feature_dim)
        shapes = list(zip(widths[:-1], widths[1:]))
        return shapes + [(self.feature_dim, self.n_classes)]


class ClassifierWeights:
    """Ordered weight/bias tensors plus an optional frozen snapshot of them."""

    def __init__(self, config: ClassifierConfig, params: Sequence[gc.Tensor]):
        self.config = config
        self.params = list(params)
        self._frozen: list[np.ndarray] | None = None
        expected = []
        for fan_in, fan_out in config.layer_shapes():
            expected += [(fan_in, fan_out), (fan_out,)]
        if [p.shape for p in self.params] != expected:
            raise gc.ShapeError("weight shapes do not match config")

    @classmethod
    def initialize(cls, config: ClassifierConfig) -> "ClassifierWeights":
        rng = np.random.default_rng(np.random.SeedSequence([config.seed, 0x57]))
        params = []
        for fan_in, fan_out in config.layer_shapes():
            bound = np.sqrt(1.0 / fan_in)
            params.append(gc.Tensor(rng.uniform(-bound, bound, (fan_in, fan_out)), True))
            params.append(gc.Tensor(rng.uniform(-bound, bound, fan_out), True))
        return cls(config, params)

    def snapshot(self) -> None:
        """Record the current values as the frozen copy (only the first call counts)."""
        if self._frozen is None:
            self._frozen = [p.data.copy() for p in self.params]

    @property
    def has_frozen(self) -> bool:
        return self._frozen is not None

    def frozen(self) -> "ClassifierWeights":
        """Independent weights holding the snapshot values."""
        if self._frozen is None:
            raise RuntimeError("no frozen snapshot taken")
        out = ClassifierWeights(self.config, [gc.Tensor(a, True) for a in self._frozen])
        out._frozen = [a.copy() for a in self._frozen]
        return out

    def copy(self) -> "ClassifierWeights":
        out = ClassifierWeights(self.config, [gc.Tensor(p.data, True) for p in self.params])
        if self._frozen is not None:
            out._frozen = [a.copy() for a in self._frozen]
        return out

    def checksum(self) -> str:
        h = sha256()
        for p in self.params:
            h.update(p.data.tobytes())
        return h.hexdigest()

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


# ---------------------------------------------------------------------------
# forward


def forward_points(points: gc.Tensor, offsets: np.ndarray, weights: ClassifierWeights):
    """Shared per-point MLP, max-pool per cloud, linear head.

    ``points`` holds all clouds stacked row-wise; ``offsets`` delimits them.
    Returns ``(features, logits)`` with shapes ``B x D`` and ``B x K``.
    """
    if points.shape[-1] != 3:
        raise gc.ShapeError(f"expected N x 3 points, got {points.shape}")
    p = weights.params
    h = points
    n_layers = len(p) // 2 - 1
    for i in range(n_layers):
        h = gc.relu(gc.add(gc.matmul(h, p[2 * i]), p[2 * i + 1]))
    features = gc.segment_max(h, offsets)
    logits = gc.add(gc.matmul(features, p[-2]), p[-1])
    return features, logits


def forward_clouds(clouds: Sequence[np.ndarray], weights: ClassifierWeights):
    pts, offsets = stack_clouds(clouds)
    return forward_points(gc.Tensor(pts), offsets, weights)


def forward(cloud: np.ndarray, weights: ClassifierWeights) -> tuple[np.ndarray, np.ndarray]:
    """Features and posterior for a single cloud (no recording)."""
    if len(cloud) == 0:
        raise gc.EmptyInputError("empty cloud")
    features, logits = forward_clouds([cloud], weights)
    return features.data[0], gc.softmax_logits(logits).data[0]


def predict(clouds: Sequence[np.ndarray], weights: ClassifierWeights, batch_size: int = 64):
    """Posteriors for many clouds, evaluated in chunks."""
    out = []
    for i in range(0, len(clouds), batch_size):
        _, logits = forward_clouds(clouds[i:i + batch_size], weights)
        out.append(gc.softmax_logits(logits).data)
    return np.concatenate(out) if out else np.zeros((0, weights.config.n_classes))


def accuracy(dataset: Dataset, weights: ClassifierWeights) -> float:
    probs = predict(dataset.clouds(), weights)
    return float(np.mean(probs.argmax(axis=1) == dataset.labels))


def cross_entropy(logits: gc.Tensor, labels) -> gc.Tensor:
    """Mean cross-entropy over the batch."""
    labels = np.asarray(labels)
    logp = gc.log_softmax(logits)
    picked = gc.take(logp, np.arange(len(labels)), labels)
    return gc.scale(gc.sum(picked), -1.0 / len(labels))


# ---------------------------------------------------------------------------
# augmentation


TRANSFORMS = ("perturb", "scale", "shear", "rotate", "translate", "affine")


@dataclass(frozen=True)
class AugmentationSpec:
    noise_std: float = 0.01
    scale_range: tuple[float, float] = (0.6, 1.4)
    shear_angle_deg: float = 0.5
    rotation_deg_per_axis: float = 1.0
    translate_scale_range: tuple[float, float] = (0.6, 1.4)
    translate_offset_range: tuple[float, float] = (-0.2, 0.2)
    affine_noise_std: float = 0.1
    n_picked: int = 3

    def __post_init__(self):
        for r in (self.scale_range, self.translate_scale_range, self.translate_offset_range):
            if r[0] > r[1]:
                raise ValueError(f"empty range {r}")
        if not 0 <= self.n_picked <= len(TRANSFORMS):
            raise ValueError("n_picked must be in [0, 6]")

    @classmethod
    def identity(cls, n_picked: int = 3) -> "AugmentationSpec":
        return cls(0.0, (1.0, 1.0), 0.0, 0.0, (1.0, 1.0), (0.0, 0.0), 0.0, n_picked)


def _rotation(axis: int, angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    i, j = [a for a in range(3) if a != axis]
    r = np.eye(3)
    r[i, i], r[i, j], r[j, i], r[j, j] = c, -s, s, c
    return r


def _apply(name: str, x: np.ndarray, spec: AugmentationSpec, rng) -> np.ndarray:
    if name == "perturb":
        return x + rng.normal(0.0, 1.0, x.shape) * spec.noise_std
    if name == "scale":
        return x * rng.uniform(*spec.scale_range, size=3)
    if name == "shear":
        src, dst = rng.choice(3, size=2, replace=False)
        m = np.eye(3)
        m[src, dst] = rng.choice((-1.0, 1.0)) * np.tan(np.deg2rad(spec.shear_angle_deg))
        return x @ m
    if name == "rotate":
        signs = rng.choice((-1.0, 1.0), size=3)
        angle = np.deg2rad(spec.rotation_deg_per_axis)
        for axis in range(3):
            x = x @ _rotation(axis, signs[axis] * angle).T
        return x
    if name == "translate":
        factors = rng.uniform(*spec.translate_scale_range, size=3)
        return x * factors + rng.uniform(*spec.translate_offset_range, size=3)
    if name == "affine":
        return x @ (np.eye(3) + rng.normal(0.0, 1.0, (3, 3)) * spec.affine_noise_std)
    raise ValueError(name)


def pick_transforms(spec: AugmentationSpec, rng) -> list[str]:
    chosen = rng.choice(len(TRANSFORMS), size=spec.n_picked, replace=False)
    return [TRANSFORMS[i] for i in sorted(chosen)]


def augment(cloud: np.ndarray, spec: AugmentationSpec, rng: np.random.Generator) -> np.ndarray:
    """Apply ``n_picked`` of the six transforms, chosen uniformly, in canonical order."""
    x = np.asarray(cloud, dtype=np.float64)
    for name in pick_transforms(spec, rng):
        x = _apply(name, x, spec, rng)
    return x


def _pretrain_augment(cloud: np.ndarray, spec: AugmentationSpec, rng) -> np.ndarray:
    # translation then point shuffle
    x = _apply("translate", cloud, spec, rng)
    return x[rng.permutation(len(x))]


# ---------------------------------------------------------------------------
# training and statistics


def pretrain_source(
    dataset: Dataset,
    config: ClassifierConfig,
    epochs: int = 12,
    lr: float = 0.1,
    batch_size: int = 32,
    seed: int = 0,
    aug_spec: AugmentationSpec | None = None,
    cosine: bool = True,
) -> ClassifierWeights:
    """Cross-entropy training with translation and shuffling; snapshots the result.

    With ``cosine`` the learning rate decays from ``lr`` towards 0 over the run.
    """
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    if dataset.n_classes != config.n_classes:
        raise gc.ShapeError("dataset and config disagree on the class count")
    aug_spec = aug_spec or AugmentationSpec()
    weights = ClassifierWeights.initialize(config)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x7E]))
    labels = dataset.labels
    n_batches = -(-len(dataset) // batch_size)
    total_steps, step = epochs * n_batches, 0
    for epoch in range(epochs):
        order = rng.permutation(len(dataset))
        total = 0.0
        for start in range(0, len(order), batch_size):
            idx = order[start:start + batch_size]
            clouds = [_pretrain_augment(dataset[i].points, aug_spec, rng) for i in idx]
            with gc.Tape() as tape:
                _, logits = forward_clouds(clouds, weights)
                loss = cross_entropy(logits, labels[idx])
                tape.backward(loss)
            rate = lr * 0.5 * (1 + np.cos(np.pi * step / total_steps)) if cosine else lr
            gc.sgd_step(weights.params, rate)
            step += 1
            total += loss.item() * len(idx)
        logger.info("epoch %d loss %.4f", epoch, total / len(dataset))
    weights.snapshot()
    return weights


def extract_features(clouds: Sequence[np.ndarray], weights: ClassifierWeights, batch_size: int = 64):
    out = []
    for i in range(0, len(clouds), batch_size):
        features, _ = forward_clouds(clouds[i:i + batch_size], weights)
        out.append(features.data)
    return np.concatenate(out) if out else np.zeros((0, weights.config.feature_dim))


def extract_source_stats(dataset: Dataset, weights: ClassifierWeights) -> GaussianStats:
    if len(dataset) < 2:
        raise ValueError("need at least two samples for source statistics")
    return GaussianStats.from_features(extract_features(dataset.clouds(), weights), frozen=True)


# ---------------------------------------------------------------------------
# PSTW checkpoints

_MAGIC = b"PSTW"
_VERSION = 1


def save_weights(weights: ClassifierWeights, path) -> None:
    cfg = weights.config
    header = struct.pack(
        f"<4sHHHqH{len(cfg.hidden)}HB",
        _MAGIC, _VERSION, cfg.n_classes, cfg.feature_dim, cfg.seed,
        len(cfg.hidden), *cfg.hidden, int(weights.has_frozen),
    )
    body = [np.ascontiguousarray(p.data, dtype="<f8").tobytes() for p in weights.params]
    if weights.has_frozen:
        body += [np.ascontiguousarray(a, dtype="<f8").tobytes() for a in weights._frozen]
    Path(path).write_bytes(header + b"".join(body))


def load_weights(path) -> ClassifierWeights:
    blob = Path(path).read_bytes()
    fixed = struct.Struct("<4sHHHqH")
    if len(blob) < fixed.size:
        raise FormatError("truncated checkpoint header")
    magic, version, k, d, seed, n_hidden = fixed.unpack_from(blob)
    if magic != _MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    if version != _VERSION:
        raise FormatError(f"unsupported PSTW version {version}")
    offset = fixed.size
    hidden = struct.unpack_from(f"<{n_hidden}H", blob, offset)
    offset += 2 * n_hidden
    (has_frozen,) = struct.unpack_from("<B", blob, offset)
    offset += 1
    config = ClassifierConfig(k, d, tuple(hidden), seed)

    def read_set():
        nonlocal offset
        arrays = []
        for fan_in, fan_out in config.layer_shapes():
            for shape in ((fan_in, fan_out), (fan_out,)):
                n = int(np.prod(shape))
                if offset + 8 * n > len(blob):
                    raise FormatError("truncated tensor payload")
                arrays.append(np.frombuffer(blob, "<f8", n, offset).reshape(shape).copy())
                offset += 8 * n
        return arrays

    weights = ClassifierWeights(config, [gc.Tensor(a, True) for a in read_set()])
    if has_frozen:
        weights._frozen = read_set()
    if offset != len(blob):
        raise FormatError("trailing bytes in checkpoint")
    return weights
