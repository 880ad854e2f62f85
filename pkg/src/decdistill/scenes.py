"""Deterministic synthetic detection scenes.

Each scene is a pure function of (dataset seed, scene index): the random
stream is numpy's Philox4x64-10 counter-based generator keyed with exactly
those two 64-bit words, so scenes can be regenerated on demand and only the
small `DatasetSpec` ever needs to be stored.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .boxes import iou

PRNG_NAME = "numpy.random.Philox(key=[seed, index]) (Philox4x64-10)"
MAX_PLACEMENT_ATTEMPTS = 100

# class k -> (shape, colour); colours are per-channel weights
_SHAPES = ("filled", "frame", "plus", "filled", "frame", "plus", "filled", "frame")
_COLOURS = (
    (1.0, 0.0, 0.0),
    (0.0, 1.0, 0.0),
    (0.0, 0.0, 1.0),
    (1.0, 1.0, 0.0),
    (0.0, 1.0, 1.0),
    (1.0, 0.0, 1.0),
    (1.0, 1.0, 1.0),
    (1.0, 0.5, 0.0),
)


@dataclass(frozen=True)
class DatasetSpec:
    seed: int = 0
    n_scenes: int = 2222
    grid_h: int = 16
    grid_w: int = 16
    c_in: int = 3
    n_classes: int = 5
    max_objects: int = 4
    min_size: int = 3
    max_size: int = 8
    intensity_min: float = 0.6
    intensity_max: float = 1.0
    noise_std: float = 0.1
    max_overlap_iou: float = 0.1

    def __post_init__(self):
        for f in ("n_scenes", "grid_h", "grid_w", "c_in", "n_classes", "min_size", "max_size"):
            if getattr(self, f) < 1:
                raise ValueError(f"{f} must be positive")
        if self.max_objects < 0:
            raise ValueError("max_objects must be >= 0")
        if self.n_classes > len(_COLOURS):
            raise ValueError(f"at most {len(_COLOURS)} classes supported")
        if self.max_size > min(self.grid_h, self.grid_w) or self.min_size > self.max_size:
            raise ValueError("object size range does not fit the grid")

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> DatasetSpec:
        d = json.loads(text)
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown dataset spec fields: {sorted(unknown)}")
        return cls(**d)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json() + "\n")

    @classmethod
    def load(cls, path: str | Path) -> DatasetSpec:
        return cls.from_json(Path(path).read_text())


@dataclass(frozen=True)
class SceneSample:
    grid: np.ndarray  # (H, W, C)
    classes: np.ndarray  # (G,)
    boxes: np.ndarray  # (G, 4) normalised cx, cy, w, h
    seed: int
    index: int

    @property
    def gts(self) -> tuple[np.ndarray, np.ndarray]:
        return self.classes, self.boxes


def scene_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=[seed & (2**64 - 1), index & (2**64 - 1)]))


def shape_mask(shape: str, h: int, w: int) -> np.ndarray:
    """Boolean footprint of a class shape filling an h x w cell box edge to edge."""
    m = np.zeros((h, w), dtype=bool)
    if shape == "filled":
        m[:] = True
    elif shape == "frame":
        m[0, :] = m[-1, :] = m[:, 0] = m[:, -1] = True
    elif shape == "plus":
        m[(h - 1) // 2 : h // 2 + 1, :] = True
        m[:, (w - 1) // 2 : w // 2 + 1] = True
    else:
        raise ValueError(f"unknown shape {shape!r}")
    return m


def _place(spec: DatasetSpec, rng: np.random.Generator, n: int):
    cells: list[tuple[int, int, int, int]] = []
    corners: list[np.ndarray] = []
    for _ in range(n):
        for _ in range(MAX_PLACEMENT_ATTEMPTS):
            h = int(rng.integers(spec.min_size, spec.max_size + 1))
            w = int(rng.integers(spec.min_size, spec.max_size + 1))
            y0 = int(rng.integers(0, spec.grid_h - h + 1))
            x0 = int(rng.integers(0, spec.grid_w - w + 1))
            c = np.array([x0 / spec.grid_w, y0 / spec.grid_h, (x0 + w) / spec.grid_w, (y0 + h) / spec.grid_h])
            if all(iou(c, o) <= spec.max_overlap_iou for o in corners):
                cells.append((y0, x0, h, w))
                corners.append(c)
                break
        else:
            return None
    return cells, corners


def generate_scene(spec: DatasetSpec, index: int) -> SceneSample:
    if not 0 <= index < spec.n_scenes:
        raise IndexError(f"scene index {index} outside [0, {spec.n_scenes})")
    rng = scene_rng(spec.seed, index)
    n = int(rng.integers(min(1, spec.max_objects), spec.max_objects + 1))
    placed = _place(spec, rng, n)
    while placed is None:
        # deterministic fallback: same stream, one object fewer
        n -= 1
        placed = _place(spec, rng, n)
    cells, corners = placed
    classes = rng.integers(0, spec.n_classes, size=n)
    grid = rng.normal(0.0, spec.noise_std, size=(spec.grid_h, spec.grid_w, spec.c_in))
    for (y0, x0, h, w), k in zip(cells, classes):
        amp = rng.uniform(spec.intensity_min, spec.intensity_max)
        colour = np.resize(np.asarray(_COLOURS[k]), spec.c_in) * amp
        m = shape_mask(_SHAPES[k], h, w)
        region = grid[y0 : y0 + h, x0 : x0 + w]
        noise = rng.normal(0.0, spec.noise_std, size=region.shape)
        region[m] = colour + noise[m]
    boxes = np.zeros((n, 4))
    for i, c in enumerate(corners):
        boxes[i] = [(c[0] + c[2]) / 2, (c[1] + c[3]) / 2, c[2] - c[0], c[3] - c[1]]
    return SceneSample(grid, classes.astype(np.int64), boxes, spec.seed, index)


def _index_hash(seed: int, index: int) -> bytes:
    return hashlib.blake2b(f"{seed}:{index}".encode(), digest_size=8).digest()


def split(spec: DatasetSpec, train_fraction: float = 0.9) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic train/val partition: indices ordered by hash, first 90% train."""
    if spec.n_scenes < 2:
        raise ValueError("need at least two scenes to split")
    order = sorted(range(spec.n_scenes), key=lambda i: _index_hash(spec.seed, i))
    n_train = min(max(int(round(train_fraction * spec.n_scenes)), 1), spec.n_scenes - 1)
    return np.sort(np.array(order[:n_train])), np.sort(np.array(order[n_train:]))


def batch_iter(
    spec: DatasetSpec, indices: Sequence[int], batch_size: int, epoch_seed: int, cache: dict | None = None
) -> Iterator[list[SceneSample]]:
    """Shuffled batches; the last partial batch is kept."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    order = np.asarray(indices)[np.random.Generator(np.random.Philox(key=[epoch_seed, 2**63])).permutation(len(indices))]
    for start in range(0, len(order), batch_size):
        yield [_get(spec, int(i), cache) for i in order[start : start + batch_size]]


def _get(spec: DatasetSpec, index: int, cache: dict | None) -> SceneSample:
    if cache is None:
        return generate_scene(spec, index)
    s = cache.get(index)
    if s is None:
        s = cache[index] = generate_scene(spec, index)
    return s


def stack_grids(scenes: Sequence[SceneSample]) -> np.ndarray:
    return np.stack([s.grid for s in scenes])
