"""Purified self-training: adaptive-threshold pseudo-labels plus feature alignment.

One call to :func:`pst_step` processes a batch in this order:

1. purify every sample;
2. forward the purified clouds under the current weights, renormalise the
   posteriors with the queue marginal and pseudo-label against the current
   global confidence;
3. forward augmented views for the masked cross-entropy;
4. reuse the purified-cloud features for the Gaussian KL regulariser;
5. one SGD step on ``ce + lambda * reg``;
6. push the purified posteriors into the queue and refresh the global confidence;
7. fold the features into the running target statistics.
"""

from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import gradcore as gc
from .dataset import stack_clouds
from .model import AugmentationSpec, ClassifierWeights, augment, forward_points
from .purify import PurifierKind, purify
from .stats import FrozenStatsError, GaussianStats

logger = logging.getLogger(__name__)


class PredictionQueue:
    """Bounded FIFO of posterior vectors; the oldest entries are evicted first."""

    def __init__(self, capacity: int = 512, n_classes: int | None = None):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self.n_classes = n_classes
        self._items: deque[np.ndarray] = deque(maxlen=capacity)

    def __len__(self) -> int:
        return len(self._items)

    def push(self, posteriors: np.ndarray) -> None:
        for h in np.atleast_2d(np.asarray(posteriors, dtype=np.float64)):
            if abs(h.sum() - 1.0) > 1e-9:
                raise ValueError("queued posterior does not sum to 1")
            if self.n_classes is None:
                self.n_classes = len(h)
            self._items.append(h.copy())

    def array(self) -> np.ndarray:
        return np.array(self._items)


def global_confidence(queue: PredictionQueue, n_classes: int | None = None) -> float:
    """Mean over the queue of each posterior's largest entry; ``1/K`` when empty."""
    if len(queue) == 0:
        k = n_classes or queue.n_classes
        if k is None:
            raise ValueError("empty queue with unknown class count")
        return 1.0 / k
    return float(queue.array().max(axis=1).mean())


def estimate_marginal(queue: PredictionQueue, n_classes: int | None = None) -> np.ndarray:
    """Average queued posterior; uniform when the queue is empty."""
    if len(queue) == 0:
        k = n_classes or queue.n_classes
        if k is None:
            raise ValueError("empty queue with unknown class count")
        return np.full(k, 1.0 / k)
    return queue.array().mean(axis=0)


def renormalize_posterior(h, prior, marginal, floor: float = 1e-8) -> np.ndarray:
    """``Normalize(h * prior / marginal)`` with L1 normalisation over the last axis."""
    h = np.asarray(h, dtype=np.float64)
    ratio = np.asarray(prior, dtype=np.float64) / np.maximum(marginal, floor)
    scaled = h * ratio
    return scaled / scaled.sum(axis=-1, keepdims=True)


def pseudo_label(q, tau: float) -> tuple[np.ndarray, np.ndarray]:
    """Arg-max labels (lowest index on ties) and the strict ``max q > tau`` mask."""
    q = np.atleast_2d(np.asarray(q, dtype=np.float64))
    return q.argmax(axis=1), q.max(axis=1) > tau


def self_training_loss(logits_augmented: gc.Tensor, labels, masks) -> gc.Tensor:
    """Summed cross-entropy of the augmented views over masked samples."""
    labels = np.asarray(labels, dtype=np.int64)
    masks = np.asarray(masks, dtype=np.float64)
    logp = gc.log_softmax(logits_augmented)
    picked = gc.take(logp, np.arange(len(labels)), labels)
    return gc.scale(gc.sum(gc.mul(picked, masks)), -1.0)


# ---------------------------------------------------------------------------
# running target statistics


def _fold(mean, cov, count, features):
    """Exact running mean and biased covariance after appending ``features``.

    Works on numpy arrays and on tensors (``mean``/``cov`` as constants).
    """
    n_new = count + features.shape[0]
    if isinstance(features, gc.Tensor):
        delta = gc.sub(features, mean)
        shift = gc.scale(gc.sum(delta, axis=0), 1.0 / n_new)
        new_mean = gc.add(shift, mean)
        outer = gc.matmul(gc.transpose(delta), delta)
        spread = gc.scale(gc.sub(outer, cov * features.shape[0]), 1.0 / n_new)
        shift_col = gc.reshape(shift, (-1, 1))
        new_cov = gc.sub(gc.add(spread, cov), gc.matmul(shift_col, gc.transpose(shift_col)))
        return new_mean, new_cov, n_new
    delta = features - mean
    shift = delta.sum(axis=0) / n_new
    new_cov = cov + (delta.T @ delta - features.shape[0] * cov) / n_new - np.outer(shift, shift)
    return mean + shift, new_cov, n_new


def update_target_stats(stats: GaussianStats, features) -> GaussianStats:
    """Fold a batch of features into running statistics (returns a new object)."""
    if stats.frozen:
        raise FrozenStatsError("cannot update frozen statistics")
    features = np.atleast_2d(np.asarray(features, dtype=np.float64))
    if features.shape[0] == 0:
        return stats.copy()
    mean, cov, count = _fold(stats.mean, stats.cov, stats.count, features)
    return GaussianStats(mean, (cov + cov.T) / 2, count)


def _shrink(cov, eta: float):
    d = cov.shape[0]
    if isinstance(cov, gc.Tensor):
        return gc.add(gc.scale(cov, 1.0 - eta), eta * np.eye(d))
    return (1.0 - eta) * cov + eta * np.eye(d)


def kl_gaussian_terms(mu_s, cov_s, mu_t, cov_t, eta: float = 1e-3) -> gc.Tensor:
    """``KL(N(mu_s, cov_s) || N(mu_t, cov_t))`` after ridge shrinkage of both covariances.

    Target arguments may be tensors; gradient flows through them.
    """
    mu_t, cov_t = gc.as_tensor(mu_t), gc.as_tensor(cov_t)
    d = len(mu_s)
    src = _shrink(np.asarray(cov_s, dtype=np.float64), eta)
    try:
        _, logdet_s = gc.cholesky_inverse_logdet(src)
        tgt = _shrink(cov_t, eta)
        inv_t = gc.spd_inverse(tgt)
        logdet_t = gc.spd_logdet(tgt)
    except gc.NotPositiveDefiniteError as exc:
        raise gc.NotPositiveDefiniteError(
            f"covariance not positive definite after shrinkage eta={eta}; increase eta ({exc})"
        ) from None
    diff = gc.reshape(gc.sub(mu_t, mu_s), (-1, 1))
    trace_term = gc.trace(gc.matmul(inv_t, gc.Tensor(src)))
    maha = gc.reshape(gc.matmul(gc.transpose(diff), gc.matmul(inv_t, diff)), ())
    total = gc.add(gc.add(trace_term, maha), gc.sub(logdet_t, logdet_s + d))
    return gc.scale(total, 0.5)


def kl_gaussian(source: GaussianStats, target: GaussianStats, shrinkage: float = 1e-3) -> gc.Tensor:
    if source.count < 2 or target.count < 2:
        raise ValueError("both statistics need at least two samples")
    return kl_gaussian_terms(source.mean, source.cov, target.mean, target.cov, shrinkage)


def alignment_loss(
    source: GaussianStats, target: GaussianStats, features: gc.Tensor, shrinkage: float = 1e-3
) -> gc.Tensor:
    """KL against target statistics that include the current batch.

    Earlier batches enter as constants; only this batch's contribution carries gradient.
    """
    mean, cov, _ = _fold(target.mean, target.cov, target.count, features)
    return kl_gaussian_terms(source.mean, source.cov, mean, cov, shrinkage)


# ---------------------------------------------------------------------------
# the per-batch step


@dataclass(frozen=True)
class PstConfig:
    lam: float = 0.5
    learning_rate: float = 1e-3
    batch_size: int = 32
    queue_capacity: int = 512
    prior: tuple[float, ...] | None = None
    shrinkage: float = 1e-3
    fixed_threshold: float | None = None
    renormalize: bool = True

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")
        if self.prior is not None and abs(sum(self.prior) - 1) > 1e-9:
            raise ValueError("prior must sum to 1")

    def prior_for(self, k: int) -> np.ndarray:
        return np.full(k, 1.0 / k) if self.prior is None else np.asarray(self.prior, dtype=np.float64)


@dataclass
class PstState:
    weights: ClassifierWeights
    queue: PredictionQueue
    target_stats: GaussianStats
    source_stats: GaussianStats
    tau_g: float
    step: int = 0

    @classmethod
    def initial(cls, weights: ClassifierWeights, source_stats: GaussianStats, config: PstConfig):
        if not source_stats.frozen:
            raise ValueError("source statistics must be frozen")
        k = weights.config.n_classes
        return cls(
            weights=weights,
            queue=PredictionQueue(config.queue_capacity, k),
            target_stats=GaussianStats.empty(weights.config.feature_dim),
            source_stats=source_stats,
            tau_g=1.0 / k,
        )


@dataclass
class StepRecord:
    batch_index: int
    tau_g: float
    threshold: float
    n_masked: int
    loss_ce: float
    loss_reg: float
    predictions: np.ndarray
    posteriors: np.ndarray = field(repr=False)


def _batch_rngs(rng: np.random.Generator, n: int):
    seeds = rng.integers(0, 2**63, size=(n, 2))
    return (
        [np.random.default_rng(s) for s in seeds[:, 0]],
        [np.random.default_rng(s) for s in seeds[:, 1]],
    )


def purify_batch(clouds: Sequence[np.ndarray], purifier: PurifierKind, rngs) -> list[np.ndarray]:
    return [purify(c, purifier, r) for c, r in zip(clouds, rngs)]


def pst_step(
    clouds: Sequence[np.ndarray],
    state: PstState,
    purifier: PurifierKind,
    aug_spec: AugmentationSpec,
    config: PstConfig,
    rng: np.random.Generator,
) -> StepRecord:
    """Adapt ``state`` in place on one batch and report what happened."""
    weights = state.weights
    k = weights.config.n_classes
    purify_rngs, aug_rngs = _batch_rngs(rng, len(clouds))
    purified = purify_batch(clouds, purifier, purify_rngs)
    tau_g = tau = state.tau_g
    points, offsets = stack_clouds(purified)
    with gc.Tape() as tape:
        features, logits = forward_points(gc.Tensor(points), offsets, weights)
        posteriors = gc.softmax_logits(logits).data
        if config.fixed_threshold is not None:
            tau = config.fixed_threshold
            labels, masks = pseudo_label(posteriors, tau)
        else:
            q = posteriors
            if config.renormalize:
                q = renormalize_posterior(posteriors, config.prior_for(k), _marginal(state, config, k))
            labels, masks = pseudo_label(q, tau)
        aug_points, aug_offsets = stack_clouds(
            [augment(c, aug_spec, r) for c, r in zip(purified, aug_rngs)]
        )
        _, aug_logits = forward_points(gc.Tensor(aug_points), aug_offsets, weights)
        loss_ce = self_training_loss(aug_logits, labels, masks)
        loss = loss_ce
        loss_reg = 0.0
        if config.lam > 0:
            reg = alignment_loss(state.source_stats, state.target_stats, features, config.shrinkage)
            loss_reg = reg.item()
            loss = gc.add(loss, gc.scale(reg, config.lam))
        tape.backward(loss)
    gc.sgd_step(weights.params, config.learning_rate)

    state.queue.push(posteriors)
    state.tau_g = _tau(state, config, k)
    state.target_stats = update_target_stats(state.target_stats, features.data)
    record = StepRecord(
        batch_index=state.step,
        tau_g=tau_g,
        threshold=tau,
        n_masked=int(masks.sum()),
        loss_ce=loss_ce.item(),
        loss_reg=loss_reg,
        predictions=posteriors.argmax(axis=1),
        posteriors=posteriors,
    )
    state.step += 1
    return record


def _warm(state: PstState, config: PstConfig) -> bool:
    return len(state.queue) >= min(config.batch_size, state.queue.capacity)


def _marginal(state: PstState, config: PstConfig, k: int) -> np.ndarray:
    return estimate_marginal(state.queue, k) if _warm(state, config) else np.full(k, 1.0 / k)


def _tau(state: PstState, config: PstConfig, k: int) -> float:
    return global_confidence(state.queue, k) if _warm(state, config) else 1.0 / k
