"""Single- and Mixed-Attack test streams, stream evaluation and accuracy bookkeeping."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import gradcore as gc
from .attacks import AdversarialBatch
from .dataset import Dataset, stack_clouds
from .model import AugmentationSpec, ClassifierWeights, forward_points
from .purify import PurifierKind
from .selftrain import PstConfig, PstState, _batch_rngs, pst_step, purify_batch
from .stats import GaussianStats

logger = logging.getLogger(__name__)

CLEAN = "clean"
MIXED_DEFAULT = ("pgd", "cw", "advpc_proxy", "siadv_proxy")
MODES = ("frozen", "purify_only", "pst")


class MissingCacheError(KeyError):
    pass


@dataclass(frozen=True)
class StreamSample:
    points: np.ndarray
    label: int
    provenance: str
    index: int


@dataclass
class StreamBatch:
    index: int
    samples: list[StreamSample]

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def clouds(self) -> list[np.ndarray]:
        return [s.points for s in self.samples]

    @property
    def labels(self) -> np.ndarray:
        return np.array([s.label for s in self.samples], dtype=np.int64)

    @property
    def provenance(self) -> list[str]:
        return [s.provenance for s in self.samples]


@dataclass(frozen=True)
class StreamSpec:
    protocol: str = "single"
    attack_kinds: tuple[str, ...] = ("pgd",)
    split_seed: int = 0
    shuffle_seed: int = 1
    batch_size: int = 32

    def __post_init__(self):
        if self.protocol not in ("single", "mixed"):
            raise ValueError(f"protocol must be 'single' or 'mixed', got {self.protocol!r}")
        if self.protocol == "single" and len(self.attack_kinds) != 1:
            raise ValueError("single protocol takes exactly one attack kind")
        if self.protocol == "mixed" and not 1 <= len(self.attack_kinds) <= 4:
            raise ValueError("mixed protocol takes 1 to 4 attack kinds")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


# ---------------------------------------------------------------------------
# construction


def _chunks(seq: Sequence, size: int) -> list:
    return [seq[i:i + size] for i in range(0, len(seq), size)]


def single_attack_split(n: int, spec: StreamSpec) -> tuple[np.ndarray, np.ndarray]:
    """(clean indices, attacked indices): a seeded two-way split of ``range(n)``."""
    perm = np.random.default_rng(np.random.SeedSequence([spec.split_seed, 2])).permutation(n)
    n_clean = n - n // 2
    return perm[:n_clean], perm[n_clean:]


def mixed_attack_split(n: int, spec: StreamSpec) -> list[np.ndarray]:
    """Seeded split into ``1 + len(attack_kinds)`` subsets made of whole batches.

    Batch-sized chunks of a permutation are dealt round-robin, so subset sizes
    differ by at most one batch and only the last chunk may be short.
    """
    n_sources = 1 + len(spec.attack_kinds)
    perm = np.random.default_rng(np.random.SeedSequence([spec.split_seed, 5])).permutation(n)
    chunks = _chunks(perm, spec.batch_size)
    return [
        np.concatenate(chunks[s::n_sources]) if chunks[s::n_sources] else np.zeros(0, np.int64)
        for s in range(n_sources)
    ]


def designated_indices(n: int, spec: StreamSpec) -> dict[str, np.ndarray]:
    """Which test samples each attack kind must cover for this stream."""
    if spec.protocol == "single":
        return {spec.attack_kinds[0]: np.sort(single_attack_split(n, spec)[1])}
    subsets = mixed_attack_split(n, spec)
    return {k: np.sort(subsets[i + 1]) for i, k in enumerate(spec.attack_kinds)}


def _adversarial(cache: Mapping[str, AdversarialBatch], kind: str, indices) -> dict[int, np.ndarray]:
    if kind not in cache:
        raise MissingCacheError(f"attack cache has no {kind!r} entry")
    table = cache[kind].lookup()
    missing = [int(i) for i in indices if int(i) not in table]
    if missing:
        raise MissingCacheError(f"{kind!r} cache lacks samples {missing[:5]}")
    return table


def build_single_attack_stream(
    test: Dataset, cache: Mapping[str, AdversarialBatch], kind: str, spec: StreamSpec
) -> list[StreamBatch]:
    clean_idx, adv_idx = single_attack_split(len(test), spec)
    table = _adversarial(cache, kind, adv_idx)
    items = [StreamSample(test[i].points, test[i].label, CLEAN, int(i)) for i in clean_idx]
    items += [StreamSample(table[int(i)], test[i].label, kind, int(i)) for i in adv_idx]
    order = np.random.default_rng(np.random.SeedSequence([spec.shuffle_seed, 3])).permutation(len(items))
    shuffled = [items[i] for i in order]
    return [StreamBatch(b, chunk) for b, chunk in enumerate(_chunks(shuffled, spec.batch_size))]


def build_mixed_attack_stream(
    test: Dataset, cache: Mapping[str, AdversarialBatch], spec: StreamSpec
) -> list[StreamBatch]:
    """Batch ``b`` is drawn wholly from source ``b mod (1 + len(attack_kinds))``.

    Source 0 is clean; source ``s`` carries ``attack_kinds[s - 1]``.
    """
    subsets = mixed_attack_split(len(test), spec)
    sources = []
    for s, idx in enumerate(subsets):
        order = np.random.default_rng(np.random.SeedSequence([spec.shuffle_seed, 4, s])).permutation(len(idx))
        idx = idx[order]
        if s == 0:
            sources.append([StreamSample(test[i].points, test[i].label, CLEAN, int(i)) for i in idx])
        else:
            kind = spec.attack_kinds[s - 1]
            table = _adversarial(cache, kind, idx)
            sources.append([StreamSample(table[int(i)], test[i].label, kind, int(i)) for i in idx])
    per_source = [_chunks(src, spec.batch_size) for src in sources]
    batches = []
    for round_ in range(max(len(p) for p in per_source)):
        for chunks in per_source:
            # exhausted sources drop out of the rotation
            if round_ < len(chunks):
                batches.append(StreamBatch(len(batches), chunks[round_]))
    return batches


def build_stream(test: Dataset, cache: Mapping[str, AdversarialBatch], spec: StreamSpec):
    if spec.protocol == "single":
        return build_single_attack_stream(test, cache, spec.attack_kinds[0], spec)
    return build_mixed_attack_stream(test, cache, spec)


# ---------------------------------------------------------------------------
# metrics


@dataclass
class MetricsRecord:
    clean_acc: float
    adv_acc: float
    mixed_acc: float
    adv_acc_by_kind: dict[str, float]
    counts: dict[str, list[int]]
    time_series: list[dict] = field(default_factory=list)

    def summary(self) -> dict:
        return {
            "clean_acc": self.clean_acc,
            "adv_acc": self.adv_acc,
            "mixed_acc": self.mixed_acc,
            "adv_acc_by_kind": self.adv_acc_by_kind,
            "counts": self.counts,
        }


def _pct(correct: int, total: int) -> float:
    return 100.0 * correct / total if total else math.nan


def metrics_from_log(records: Iterable[dict]) -> MetricsRecord:
    """Accuracies and per-batch running curves from per-batch log records alone."""
    counts: dict[str, list[int]] = {}
    series = []
    for rec in records:
        for s in rec["samples"]:
            c = counts.setdefault(s["provenance"], [0, 0])
            c[0] += int(s["predicted_label"] == s["true_label"])
            c[1] += 1
        clean = counts.get(CLEAN, [0, 0])
        adv = [sum(v[i] for k, v in counts.items() if k != CLEAN) for i in (0, 1)]
        series.append({
            "batch_index": rec["batch_index"],
            "running_clean_acc": _pct(*clean),
            "running_adv_acc": _pct(*adv),
            "running_mixed_acc": _pct(clean[0] + adv[0], clean[1] + adv[1]),
            "tau_g": rec.get("tau_g"),
        })
    clean = counts.get(CLEAN, [0, 0])
    adv = [sum(v[i] for k, v in counts.items() if k != CLEAN) for i in (0, 1)]
    return MetricsRecord(
        clean_acc=_pct(*clean),
        adv_acc=_pct(*adv),
        mixed_acc=_pct(clean[0] + adv[0], clean[1] + adv[1]),
        adv_acc_by_kind={k: _pct(*v) for k, v in sorted(counts.items()) if k != CLEAN},
        counts={k: list(v) for k, v in sorted(counts.items())},
        time_series=series,
    )


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class EvalComponents:
    weights: ClassifierWeights
    purifier: PurifierKind = field(default_factory=PurifierKind.sor)
    aug_spec: AugmentationSpec = field(default_factory=AugmentationSpec)
    config: PstConfig = field(default_factory=PstConfig)
    source_stats: GaussianStats | None = None
    seed: int = 0


def _batch_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, 0xB7, index]))


def _predict_static(batch: StreamBatch, weights, purifier, rng) -> np.ndarray:
    purify_rngs, _ = _batch_rngs(rng, len(batch))
    purified = purify_batch(batch.clouds, purifier, purify_rngs)
    points, offsets = stack_clouds(purified)
    _, logits = forward_points(gc.Tensor(points), offsets, weights)
    return gc.softmax_logits(logits).data


def evaluate_stream(
    stream: Sequence[StreamBatch], mode: str, components: EvalComponents
) -> tuple[MetricsRecord, list[dict]]:
    """Run a stream in ``frozen``, ``purify_only`` or ``pst`` mode.

    Each sample is scored with the prediction made when its batch arrived,
    before any update that batch triggers. Returns metrics and per-batch log records.
    """
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    weights = components.weights
    if mode == "pst":
        if components.source_stats is None:
            raise ValueError("pst mode needs source statistics")
        weights = weights.copy()
        state = PstState.initial(weights, components.source_stats, components.config)
    purifier = PurifierKind.identity() if mode == "frozen" else components.purifier
    records = []
    for batch in stream:
        rng = _batch_rng(components.seed, batch.index)
        if mode == "pst":
            step = pst_step(batch.clouds, state, purifier, components.aug_spec, components.config, rng)
            preds = step.predictions
            extra = {"tau_g": step.tau_g, "threshold": step.threshold, "n_masked": step.n_masked,
                     "loss_ce": step.loss_ce, "loss_reg": step.loss_reg}
        else:
            preds = _predict_static(batch, weights, purifier, rng).argmax(axis=1)
            extra = {"tau_g": None, "threshold": None, "n_masked": 0, "loss_ce": 0.0, "loss_reg": 0.0}
        records.append({
            "batch_index": batch.index,
            **extra,
            "samples": [
                {"index": s.index, "provenance": s.provenance, "true_label": int(s.label),
                 "predicted_label": int(p)}
                for s, p in zip(batch.samples, preds)
            ],
        })
    metrics = metrics_from_log(records)
    return metrics, records


# ---------------------------------------------------------------------------
# output files

TIME_SERIES_COLUMNS = ("batch_index", "running_clean_acc", "running_adv_acc", "running_mixed_acc", "tau_g")


def write_jsonl(records: Sequence[dict], path) -> None:
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def read_jsonl(path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def write_time_series(metrics: MetricsRecord, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=TIME_SERIES_COLUMNS)
        writer.writeheader()
        for row in metrics.time_series:
            writer.writerow({k: ("" if row[k] is None else row[k]) for k in TIME_SERIES_COLUMNS})


def read_time_series(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))
