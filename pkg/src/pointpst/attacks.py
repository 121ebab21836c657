"""White-box PGD and C&W-margin attacks against the frozen source weights.

Attacks run batched: each sample's loss only depends on its own cloud, so the
gradient of the summed loss is the per-sample gradient. Randomness is drawn
per sample from ``SeedSequence([seed, sample_index])`` so results do not depend
on how samples are batched.

PSTA cache layout (little endian)::

    b"PSTA" u16 version  u16 len(kind) kind-utf8  u8 norm(0=linf,1=l2)
    f64 epsilon  u32 n_steps  f64 step_size(0=default)  u8 random_start  u8 loss(0=ce,1=margin)
    f64 kappa  u32 n_samples
    per sample: u32 dataset_index  u16 label  u32 n_points  f64[n_points * 3]
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import gradcore as gc
from .dataset import Dataset, FormatError, LabeledSample, stack_clouds
from .model import ClassifierWeights, forward_points

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class AttackBudget:
    norm: str = "linf"
    epsilon: float = 0.05
    n_steps: int = 200
    step_size: float | None = None
    random_start: bool = True

    def __post_init__(self):
        if self.norm not in ("linf", "l2"):
            raise ValueError(f"norm must be 'linf' or 'l2', got {self.norm!r}")
        if self.epsilon < 0:
            raise ValueError("epsilon must be >= 0")
        if self.n_steps < 0:
            raise ValueError("n_steps must be >= 0")
        if self.step_size is not None and self.step_size <= 0:
            raise ValueError("step_size must be > 0")

    @property
    def step(self) -> float:
        if self.step_size is not None:
            return self.step_size
        if self.norm == "linf":
            return self.epsilon / 10
        return 2 * self.epsilon / max(self.n_steps, 1)


@dataclass(frozen=True)
class AttackSpec:
    """A named attack: budget plus objective (``ce`` for PGD, ``margin`` for C&W)."""

    kind: str
    budget: AttackBudget
    loss: str = "ce"
    kappa: float = 0.0


# SI-Adv, AdvPC and KNN are represented by PGD at their budgets.
ATTACKS = {
    "pgd": AttackSpec("pgd", AttackBudget("linf", 0.05)),
    "pgd_l2": AttackSpec("pgd_l2", AttackBudget("l2", 1.25)),
    "cw": AttackSpec("cw", AttackBudget("l2", 1.25, random_start=False), loss="margin"),
    "advpc_proxy": AttackSpec("advpc_proxy", AttackBudget("linf", 0.05)),
    "siadv_proxy": AttackSpec("siadv_proxy", AttackBudget("linf", 0.16)),
    "knn_proxy": AttackSpec("knn_proxy", AttackBudget("l2", 1.25)),
}


def attack_spec(kind: str, n_steps: int | None = None) -> AttackSpec:
    if kind not in ATTACKS:
        raise ValueError(f"unknown attack kind {kind!r}; choose from {sorted(ATTACKS)}")
    spec = ATTACKS[kind]
    if n_steps is not None:
        spec = replace(spec, budget=replace(spec.budget, n_steps=n_steps))
    return spec


@dataclass
class AdversarialBatch:
    kind: str
    spec: AttackSpec
    indices: np.ndarray
    labels: np.ndarray
    perturbed: list[np.ndarray] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.perturbed)

    def lookup(self) -> dict[int, np.ndarray]:
        return {int(i): c for i, c in zip(self.indices, self.perturbed)}


# ---------------------------------------------------------------------------
# objectives


def ce_losses(logits: gc.Tensor, labels: np.ndarray, kappa: float = 0.0) -> gc.Tensor:
    """Per-sample cross-entropy."""
    logp = gc.log_softmax(logits)
    return gc.scale(gc.take(logp, np.arange(len(labels)), labels), -1.0)


def margin_losses(logits: gc.Tensor, labels: np.ndarray, kappa: float = 0.0) -> gc.Tensor:
    """Per-sample ``min(max_{k != y} z_k - z_y, kappa)``."""
    rows = np.arange(len(labels))
    block = np.zeros(logits.shape)
    block[rows, labels] = -np.inf
    best_other = gc.row_max(gc.add(logits, block))
    true = gc.take(logits, rows, labels)
    return gc.minimum(gc.sub(best_other, true), kappa)


_OBJECTIVES = {"ce": ce_losses, "margin": margin_losses}

LogitsFn = Callable[[gc.Tensor, np.ndarray], gc.Tensor]


def classifier_logits(weights: ClassifierWeights) -> LogitsFn:
    # read-only view: the tape then records only input gradients
    view = ClassifierWeights(weights.config, [gc.Tensor(p.data) for p in weights.params])

    def fn(points, offsets):
        return forward_points(points, offsets, view)[1]

    return fn


# ---------------------------------------------------------------------------
# projected ascent


def _segment_norms(values: np.ndarray, offsets: np.ndarray) -> np.ndarray:
    return np.sqrt(np.add.reduceat((values**2).sum(axis=1), offsets[:-1]))


def _project(delta: np.ndarray, offsets: np.ndarray, budget: AttackBudget) -> np.ndarray:
    eps = budget.epsilon
    if budget.norm == "linf":
        return np.clip(delta, -eps, eps)
    norms = _segment_norms(delta, offsets)
    factor = np.where(norms > eps, eps / np.where(norms > 0, norms, 1.0), 1.0)
    return delta * np.repeat(factor, np.diff(offsets))[:, None]


def _inside_box(x0: np.ndarray, x: np.ndarray, budget: AttackBudget) -> np.ndarray:
    # x0 + delta can land one ulp outside the linf box; step those coordinates back
    if budget.norm != "linf":
        return x
    over = np.abs(x - x0) > budget.epsilon
    while np.any(over):
        x[over] = np.nextafter(x[over], x0[over])
        over = np.abs(x - x0) > budget.epsilon
    return x


def _random_start(n_points: int, budget: AttackBudget, rng) -> np.ndarray:
    eps = budget.epsilon
    if budget.norm == "linf":
        return rng.uniform(-eps, eps, (n_points, 3))
    direction = rng.standard_normal((n_points, 3))
    direction /= np.linalg.norm(direction)
    return direction * eps * rng.uniform() ** (1.0 / (3 * n_points))


def projected_ascent(
    clouds: Sequence[np.ndarray],
    labels: Sequence[int],
    logits_fn: LogitsFn,
    budget: AttackBudget,
    rngs: Sequence[np.random.Generator] | None = None,
    loss: str = "ce",
    kappa: float = 0.0,
) -> list[np.ndarray]:
    """Maximise a per-sample objective inside the budget; return each sample's best iterate.

    The returned iterate has the highest objective among all visited ones
    (earliest wins ties), including the starting point.
    """
    objective = _OBJECTIVES[loss]
    labels = np.asarray(labels, dtype=np.int64)
    x0, offsets = stack_clouds([np.asarray(c, dtype=np.float64) for c in clouds])
    lengths = np.diff(offsets)
    if budget.random_start and budget.epsilon > 0:
        if rngs is None:
            raise ValueError("random start needs per-sample generators")
        delta = np.concatenate([_random_start(n, budget, r) for n, r in zip(lengths, rngs)])
        delta = _project(delta, offsets, budget)
    else:
        delta = np.zeros_like(x0)
    best = delta.copy()
    best_loss = np.full(len(labels), -np.inf)
    moved = False
    for step in range(budget.n_steps + 1):
        x = gc.Tensor(x0 + delta, requires_grad=True)
        last = step == budget.n_steps
        if last:
            losses = objective(logits_fn(x, offsets), labels, kappa)
        else:
            with gc.Tape() as tape:
                losses = objective(logits_fn(x, offsets), labels, kappa)
                tape.backward(gc.sum(losses))
        improved = losses.data > best_loss
        best_loss = np.where(improved, losses.data, best_loss)
        rows = np.repeat(improved, lengths)
        best[rows] = delta[rows]
        if last:
            break
        grad = x.grad if x.grad is not None else np.zeros_like(x0)
        if budget.norm == "linf":
            update = np.sign(grad)
        else:
            norms = _segment_norms(grad, offsets)
            safe = np.where(norms > 0, norms, 1.0)
            update = grad / np.repeat(safe, lengths)[:, None]
        moved = moved or bool(np.any(update))
        delta = _project(delta + budget.step * update, offsets, budget)
    if budget.n_steps > 0 and not moved:
        logger.info("attack gradient was zero at every step; returning the start point")
    out = _inside_box(x0, x0 + best, budget)
    return [out[offsets[i]:offsets[i + 1]] for i in range(len(labels))]


def _rngs(seed: int, indices: Sequence[int]):
    return [np.random.default_rng(np.random.SeedSequence([seed, int(i)])) for i in indices]


def pgd(sample: LabeledSample, weights_frozen: ClassifierWeights, budget: AttackBudget, rng=None):
    """PGD on cross-entropy: sign steps + box clip (linf) or normalised steps + ball projection (l2)."""
    return projected_ascent(
        [sample.points], [sample.label], classifier_logits(weights_frozen), budget, [rng]
    )[0]


def cw_l2(
    sample: LabeledSample,
    weights_frozen: ClassifierWeights,
    budget: AttackBudget,
    kappa: float = 0.0,
    rng=None,
):
    """Margin-loss attack with normalised-gradient steps projected onto the l2 ball."""
    if budget.norm != "l2":
        raise ValueError("cw_l2 needs an l2 budget")
    return projected_ascent(
        [sample.points], [sample.label], classifier_logits(weights_frozen), budget, [rng],
        loss="margin", kappa=kappa,
    )[0]


def run_attack(
    dataset: Dataset,
    weights_frozen: ClassifierWeights,
    spec: AttackSpec,
    indices: Sequence[int] | None = None,
    seed: int = 0,
    batch_size: int = 64,
) -> AdversarialBatch:
    indices = np.arange(len(dataset)) if indices is None else np.asarray(indices, dtype=np.int64)
    logits_fn = classifier_logits(weights_frozen)
    perturbed = []
    for start in range(0, len(indices), batch_size):
        chunk = indices[start:start + batch_size]
        perturbed += projected_ascent(
            [dataset[i].points for i in chunk],
            [dataset[i].label for i in chunk],
            logits_fn,
            spec.budget,
            _rngs(seed, chunk),
            loss=spec.loss,
            kappa=spec.kappa,
        )
    labels = np.array([dataset[i].label for i in indices], dtype=np.int64)
    return AdversarialBatch(spec.kind, spec, indices, labels, perturbed)


def build_attack_cache(
    dataset: Dataset,
    weights_frozen: ClassifierWeights,
    attacks: Sequence[str | AttackSpec],
    indices: dict[str, Sequence[int]] | Sequence[int] | None = None,
    seed: int = 0,
    n_steps: int | None = None,
) -> dict[str, AdversarialBatch]:
    """One adversarial batch per attack kind.

    ``indices`` restricts which dataset samples are attacked, either for all
    kinds at once or per kind.
    """
    cache = {}
    for a in attacks:
        spec = a if isinstance(a, AttackSpec) else attack_spec(a, n_steps)
        idx = indices.get(spec.kind) if isinstance(indices, dict) else indices
        logger.info("attacking with %s (%s)", spec.kind, spec.budget)
        cache[spec.kind] = run_attack(dataset, weights_frozen, spec, idx, seed)
    return cache


def perturbation_norm(original: np.ndarray, perturbed: np.ndarray, norm: str) -> float:
    d = np.asarray(perturbed) - np.asarray(original)
    return float(np.abs(d).max()) if norm == "linf" else float(np.linalg.norm(d))


# ---------------------------------------------------------------------------
# PSTA files

_MAGIC = b"PSTA"
_VERSION = 1
_BUDGET = struct.Struct("<BdIdBBdI")
_ITEM = struct.Struct("<IHI")


def save_attack(batch: AdversarialBatch, path) -> None:
    b = batch.spec.budget
    kind = batch.kind.encode()
    parts = [
        struct.pack("<4sHH", _MAGIC, _VERSION, len(kind)),
        kind,
        _BUDGET.pack(
            0 if b.norm == "linf" else 1, b.epsilon, b.n_steps, b.step_size or 0.0,
            int(b.random_start), 0 if batch.spec.loss == "ce" else 1, batch.spec.kappa, len(batch),
        ),
    ]
    for i, label, cloud in zip(batch.indices, batch.labels, batch.perturbed):
        parts.append(_ITEM.pack(int(i), int(label), len(cloud)))
        parts.append(np.ascontiguousarray(cloud, dtype="<f8").tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_attack(path) -> AdversarialBatch:
    blob = Path(path).read_bytes()
    if len(blob) < 8:
        raise FormatError("truncated attack header")
    magic, version, klen = struct.unpack_from("<4sHH", blob)
    if magic != _MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    if version != _VERSION:
        raise FormatError(f"unsupported PSTA version {version}")
    offset = 8
    kind = blob[offset:offset + klen].decode()
    offset += klen
    if offset + _BUDGET.size > len(blob):
        raise FormatError("truncated budget block")
    norm, eps, n_steps, step, rstart, loss, kappa, count = _BUDGET.unpack_from(blob, offset)
    offset += _BUDGET.size
    # a stored step of 0 means "use the default for this budget"
    budget = AttackBudget("linf" if norm == 0 else "l2", eps, n_steps, step or None, bool(rstart))
    spec = AttackSpec(kind, budget, "ce" if loss == 0 else "margin", kappa)
    indices, labels, clouds = [], [], []
    for _ in range(count):
        if offset + _ITEM.size > len(blob):
            raise FormatError("truncated sample header")
        i, label, n = _ITEM.unpack_from(blob, offset)
        offset += _ITEM.size
        if offset + 24 * n > len(blob):
            raise FormatError("truncated point payload")
        clouds.append(np.frombuffer(blob, "<f8", 3 * n, offset).reshape(n, 3).copy())
        offset += 24 * n
        indices.append(i)
        labels.append(label)
    if offset != len(blob):
        raise FormatError("trailing bytes in attack file")
    return AdversarialBatch(kind, spec, np.array(indices, np.int64), np.array(labels, np.int64), clouds)
