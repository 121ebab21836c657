"""Point-dropping purifiers: identity, simple random sampling and statistical outlier removal."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from . import kernels

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class PurifierKind:
    variant: str = "identity"
    keep_ratio: float = 0.875
    k_neighbors: int = 8
    alpha: float = 1.1

    def __post_init__(self):
        if self.variant not in ("identity", "srs", "sor"):
            raise ValueError(f"unknown purifier {self.variant!r}")
        if not 0 < self.keep_ratio <= 1:
            raise ValueError("keep_ratio must be in (0, 1]")
        if self.k_neighbors < 1:
            raise ValueError("k_neighbors must be >= 1")
        if self.alpha < 0:
            raise ValueError("alpha must be >= 0")

    @classmethod
    def identity(cls) -> "PurifierKind":
        return cls("identity")

    @classmethod
    def srs(cls, keep_ratio: float = 0.875) -> "PurifierKind":
        return cls("srs", keep_ratio=keep_ratio)

    @classmethod
    def sor(cls, k_neighbors: int = 8, alpha: float = 1.1) -> "PurifierKind":
        return cls("sor", k_neighbors=k_neighbors, alpha=alpha)


def sor_keep_mask(points: np.ndarray, k: int, alpha: float) -> np.ndarray:
    """Keep points whose mean kNN distance is at most ``mean + alpha * std`` over the cloud."""
    k = min(k, len(points) - 1)
    if k < 1:
        return np.ones(len(points), dtype=bool)
    d = kernels.knn_mean_distance(np.ascontiguousarray(points, dtype=np.float64), k)
    keep = d <= d.mean() + alpha * d.std()
    if not keep.any():
        logger.warning("SOR removed every point; keeping the closest half instead")
        keep = np.zeros(len(points), dtype=bool)
        keep[np.argsort(d, kind="stable")[: math.ceil(len(points) / 2)]] = True
    return keep


def purify(cloud: np.ndarray, kind: PurifierKind, rng: np.random.Generator | None = None) -> np.ndarray:
    """Return a subset of the input points; coordinates are never modified."""
    cloud = np.asarray(cloud, dtype=np.float64)
    if len(cloud) == 0:
        raise ValueError("empty cloud")
    if kind.variant == "identity":
        return cloud
    if kind.variant == "srs":
        if rng is None:
            raise ValueError("srs needs a random generator")
        n_keep = math.ceil(kind.keep_ratio * len(cloud))
        return cloud[rng.choice(len(cloud), size=n_keep, replace=False)]
    return cloud[sor_keep_mask(cloud, kind.k_neighbors, kind.alpha)]
