"""Synthetic labelled point clouds and the PCDS binary file format.

PCDS layout (little endian)::

    b"PCDS"  u16 version  u16 n_classes  u32 n_samples
    per sample: u16 label  u32 n_points  f32[n_points * 3]

Coordinates are stored as float32 and widened to float64 on load.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

SHAPES = ("sphere", "cube", "cylinder", "cone", "torus", "plane", "helix", "cross")

MAGIC = b"PCDS"
VERSION = 1
_HEADER = struct.Struct("<4sHHI")
_SAMPLE = struct.Struct("<HI")


class ConfigurationError(ValueError):
    pass


class DegenerateCloudError(ValueError):
    pass


class FormatError(ValueError):
    pass


@dataclass
class LabeledSample:
    points: np.ndarray
    label: int

    @property
    def n_points(self) -> int:
        return len(self.points)


@dataclass
class Dataset:
    samples: list[LabeledSample] = field(default_factory=list)
    n_classes: int = 2
    split: str = "source"

    def __post_init__(self):
        if self.n_classes < 2:
            raise ConfigurationError(f"need at least 2 classes, got {self.n_classes}")
        for s in self.samples:
            if not 0 <= s.label < self.n_classes:
                raise ConfigurationError(f"label {s.label} outside [0, {self.n_classes})")

    def __len__(self) -> int:
        return len(self.samples)

    def __getitem__(self, i):
        return self.samples[i]

    @property
    def labels(self) -> np.ndarray:
        return np.array([s.label for s in self.samples], dtype=np.int64)

    def clouds(self) -> list[np.ndarray]:
        return [s.points for s in self.samples]


# ---------------------------------------------------------------------------
# shapes


def _unit_sphere(rng, n):
    v = rng.standard_normal((n, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def _sphere(rng, n):
    return _unit_sphere(rng, n) * rng.uniform(0.8, 1.2)


def _cube(rng, n):
    half = rng.uniform(0.8, 1.2)
    face = rng.integers(0, 6, size=n)
    pts = rng.uniform(-1.0, 1.0, size=(n, 3))
    axis = face // 2
    pts[np.arange(n), axis] = np.where(face % 2 == 0, -1.0, 1.0)
    return pts * half


def _cylinder(rng, n):
    # lateral surface plus both caps, area-weighted
    r, h = rng.uniform(0.5, 0.8), rng.uniform(1.4, 2.2)
    side, cap = 2 * np.pi * r * h, np.pi * r * r
    part = rng.choice(3, size=n, p=np.array([side, cap, cap]) / (side + 2 * cap))
    theta = rng.uniform(0, 2 * np.pi, n)
    rad = np.where(part == 0, r, r * np.sqrt(rng.uniform(0, 1, n)))
    z = np.select([part == 0, part == 1], [rng.uniform(-h / 2, h / 2, n), -h / 2], h / 2)
    return np.stack([rad * np.cos(theta), rad * np.sin(theta), z], axis=1)


def _cone(rng, n):
    r, h = rng.uniform(0.6, 0.9), rng.uniform(1.3, 2.0)
    slant = np.hypot(r, h)
    side, base = np.pi * r * slant, np.pi * r * r
    on_side = rng.uniform(0, 1, n) < side / (side + base)
    theta = rng.uniform(0, 2 * np.pi, n)
    u = np.sqrt(rng.uniform(0, 1, n))
    rad = r * u
    z = np.where(on_side, h / 2 - h * u, -h / 2)
    return np.stack([rad * np.cos(theta), rad * np.sin(theta), z], axis=1)


def _torus(rng, n):
    big, small = rng.uniform(0.8, 1.0), rng.uniform(0.2, 0.35)
    out = np.empty((0, 3))
    # rejection sampling of the tube angle for uniform surface density
    while len(out) < n:
        m = 2 * (n - len(out)) + 16
        theta = rng.uniform(0, 2 * np.pi, m)
        phi = rng.uniform(0, 2 * np.pi, m)
        keep = rng.uniform(0, 1, m) < (big + small * np.cos(phi)) / (big + small)
        theta, phi = theta[keep], phi[keep]
        ring = big + small * np.cos(phi)
        pts = np.stack([ring * np.cos(theta), ring * np.sin(theta), small * np.sin(phi)], 1)
        out = np.concatenate([out, pts])
    return out[:n]


def _plane(rng, n):
    w, d = rng.uniform(0.8, 1.2), rng.uniform(0.5, 1.0)
    pts = rng.uniform(-1, 1, size=(n, 3)) * np.array([w, d, 0.0])
    return pts


def _helix(rng, n):
    turns, r, h = rng.uniform(2.0, 3.0), rng.uniform(0.5, 0.8), rng.uniform(1.5, 2.2)
    tube = 0.06
    t = rng.uniform(0, 1, n)
    ang = 2 * np.pi * turns * t
    centre = np.stack([r * np.cos(ang), r * np.sin(ang), h * (t - 0.5)], 1)
    return centre + tube * _unit_sphere(rng, n)


def _cross(rng, n):
    # two orthogonal boxes sharing a centre
    length, width = rng.uniform(1.6, 2.2), rng.uniform(0.25, 0.4)
    first = rng.uniform(0, 1, n) < 0.5
    pts = _cube(np.random.default_rng(rng.integers(2**63)), n)
    pts /= np.abs(pts).max(axis=0)
    dims_a = np.array([length, width, width]) / 2
    dims_b = np.array([width, length, width]) / 2
    return pts * np.where(first[:, None], dims_a, dims_b)


_GENERATORS = {
    "sphere": _sphere,
    "cube": _cube,
    "cylinder": _cylinder,
    "cone": _cone,
    "torus": _torus,
    "plane": _plane,
    "helix": _helix,
    "cross": _cross,
}


def generate_shape(kind: str, n_points: int, rng_seed) -> np.ndarray:
    """Sample ``n_points`` on the surface of a randomly proportioned ``kind``.

    Output is a pure function of the arguments; it is *not* normalized.
    """
    if kind not in _GENERATORS:
        raise ConfigurationError(f"unknown shape {kind!r}; choose from {SHAPES}")
    if n_points < 8:
        raise ConfigurationError(f"n_points must be >= 8, got {n_points}")
    rng = np.random.default_rng(rng_seed)
    return np.ascontiguousarray(_GENERATORS[kind](rng, n_points), dtype=np.float64)


def normalize_unit_cube(points: np.ndarray) -> np.ndarray:
    """Centre the bounding box on the origin and scale the largest axis extent to 1.

    Every coordinate of the result lies in ``[-0.5, 0.5]``.
    """
    points = np.asarray(points, dtype=np.float64)
    if len(points) == 0:
        raise DegenerateCloudError("empty cloud")
    lo, hi = points.min(axis=0), points.max(axis=0)
    centred = points - (lo + hi) / 2
    # second pass removes the rounding residue of subtracting a large offset
    centred -= (centred.min(axis=0) + centred.max(axis=0)) / 2
    # measure the extent after centring so the result has extent 1 to rounding
    extent = np.ptp(centred, axis=0).max()
    if extent == 0:
        raise DegenerateCloudError("all points identical")
    return centred / extent


def make_dataset(
    n_classes: int = 8,
    per_class: int = 256,
    n_points: int = 256,
    seed: int = 0,
    split: str = "source",
) -> Dataset:
    """Balanced dataset with classes taken from ``SHAPES`` in order.

    Sample ``i`` is seeded from ``(seed, split, i)`` and its coordinates are
    rounded to float32 so the dataset survives a PCDS round trip unchanged.
    """
    if not 2 <= n_classes <= len(SHAPES):
        raise ConfigurationError(f"n_classes must be in [2, {len(SHAPES)}], got {n_classes}")
    split_offset = {"source": 0, "test": 1}[split]
    samples = []
    for i in range(n_classes * per_class):
        label = i % n_classes
        ss = np.random.SeedSequence([seed, split_offset, i])
        pts = normalize_unit_cube(generate_shape(SHAPES[label], n_points, ss))
        samples.append(LabeledSample(_f32(pts), label))
    return Dataset(samples, n_classes, split)


# ---------------------------------------------------------------------------
# PCDS serialisation


def save_dataset(dataset: Dataset, path) -> None:
    chunks = [_HEADER.pack(MAGIC, VERSION, dataset.n_classes, len(dataset))]
    for s in dataset.samples:
        chunks.append(_SAMPLE.pack(s.label, s.n_points))
        chunks.append(np.asarray(s.points, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_dataset(path, split: str | None = None) -> Dataset:
    blob = Path(path).read_bytes()
    if len(blob) < _HEADER.size:
        raise FormatError("truncated header")
    magic, version, n_classes, count = _HEADER.unpack_from(blob, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    if version != VERSION:
        raise FormatError(f"unsupported PCDS version {version}")
    offset = _HEADER.size
    samples = []
    for _ in range(count):
        if offset + _SAMPLE.size > len(blob):
            raise FormatError("truncated sample header")
        label, n = _SAMPLE.unpack_from(blob, offset)
        offset += _SAMPLE.size
        nbytes = 12 * n
        if offset + nbytes > len(blob):
            raise FormatError("truncated point payload")
        pts = np.frombuffer(blob, dtype="<f4", count=3 * n, offset=offset)
        samples.append(LabeledSample(pts.reshape(n, 3).astype(np.float64), label))
        offset += nbytes
    if offset != len(blob):
        raise FormatError("trailing bytes after last sample")
    return Dataset(samples, n_classes, split or "source")


def _f32(points: np.ndarray) -> np.ndarray:
    return points.astype(np.float32).astype(np.float64)


def stack_clouds(clouds: Sequence[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    """Concatenate clouds into one ``P x 3`` array plus segment offsets."""
    lengths = [len(c) for c in clouds]
    offsets = np.zeros(len(clouds) + 1, dtype=np.int64)
    np.cumsum(lengths, out=offsets[1:])
    return np.ascontiguousarray(np.concatenate(clouds, axis=0)), offsets
