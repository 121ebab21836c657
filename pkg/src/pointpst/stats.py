"""Gaussian summaries of penultimate features."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class FrozenStatsError(RuntimeError):
    pass


@dataclass
class GaussianStats:
    """Mean, biased covariance (divide by ``count``) and sample count."""

    mean: np.ndarray
    cov: np.ndarray
    count: int = 0
    frozen: bool = False

    @classmethod
    def empty(cls, dim: int) -> "GaussianStats":
        return cls(np.zeros(dim), np.zeros((dim, dim)), 0)

    @classmethod
    def from_features(cls, features: np.ndarray, frozen: bool = False) -> "GaussianStats":
        features = np.asarray(features, dtype=np.float64)
        mu = features.mean(axis=0)
        centred = features - mu
        return cls(mu, centred.T @ centred / len(features), len(features), frozen)

    @property
    def dim(self) -> int:
        return len(self.mean)

    def copy(self) -> "GaussianStats":
        return GaussianStats(self.mean.copy(), self.cov.copy(), self.count, self.frozen)

    def save(self, path) -> None:
        np.savez(path, mean=self.mean, cov=self.cov, count=self.count, frozen=self.frozen)

    @classmethod
    def load(cls, path) -> "GaussianStats":
        with np.load(path) as z:
            return cls(z["mean"], z["cov"], int(z["count"]), bool(z["frozen"]))
