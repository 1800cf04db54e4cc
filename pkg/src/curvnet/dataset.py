"""Stencil/target sample sets: circle training data, flower evaluation data,
z-score statistics, splits and CSV storage."""
from __future__ import annotations

import csv
import hashlib
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from . import fields
from .grid import STENCIL_OFFSETS, build_uniform, interface_adjacent_mask
from .numerics import LevelSetField, ReinitParams, reinitialize

# Column names follow the stencil layout: first letter is the row (m = top),
# second the column (m = left).
COLUMNS = ("phi_mm", "phi_m0", "phi_mp", "phi_0m", "phi_00", "phi_0p",
           "phi_pm", "phi_p0", "phi_pp", "hkappa")
TARGET_BOUND = 0.625  # h / (1.6 h)


@dataclass
class SampleSet:
    """``stencils`` is ``(n, 9)`` in stencil order, ``targets`` is ``(n,)`` hkappa."""

    stencils: np.ndarray
    targets: np.ndarray

    def __post_init__(self):
        self.stencils = np.asarray(self.stencils, dtype=float).reshape(-1, 9)
        self.targets = np.asarray(self.targets, dtype=float).reshape(-1)
        if len(self.stencils) != len(self.targets):
            raise ValueError("stencil and target counts differ")

    def __len__(self) -> int:
        return len(self.targets)

    def take(self, idx) -> "SampleSet":
        return SampleSet(self.stencils[idx], self.targets[idx])

    @classmethod
    def concat(cls, parts: Iterable["SampleSet"]) -> "SampleSet":
        parts = list(parts)
        if not parts:
            return cls(np.zeros((0, 9)), np.zeros(0))
        return cls(np.concatenate([p.stencils for p in parts]),
                   np.concatenate([p.targets for p in parts]))


@dataclass(frozen=True)
class DatasetSpec:
    rho: int = 256
    reinit_iterations_list: tuple[int, ...] = (5, 10, 15, 20)
    repeats_per_radius: int = 5
    seed: int = 0
    reinit: ReinitParams = field(default_factory=ReinitParams)

    def __post_init__(self):
        if self.rho < 64:
            raise ValueError("rho must be >= 64")
        if self.repeats_per_radius < 1:
            raise ValueError("repeats_per_radius must be >= 1")

    @property
    def h(self) -> float:
        return 1.0 / (self.rho - 1)


@dataclass(frozen=True)
class Normalization:
    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        if np.any(~(np.asarray(self.std) > 0)):
            raise ValueError("standard deviations must be positive")

    def apply(self, stencils: np.ndarray) -> np.ndarray:
        return (np.asarray(stencils, dtype=float) - self.mean) / self.std

    @classmethod
    def identity(cls, width: int = 9) -> "Normalization":
        return cls(np.zeros(width), np.ones(width))


@dataclass
class SplitSet:
    train: SampleSet
    validation: SampleSet
    test: SampleSet


def circle_count(rho: int) -> int:
    if rho < 9:
        raise ValueError("rho must be >= 9")
    return math.ceil((rho - 8.2) / 2) + 1


def circle_radii(rho: int) -> np.ndarray:
    h = 1.0 / (rho - 1)
    lo, hi = 1.6 * h, 0.5 - 2 * h
    if lo > hi:
        raise ValueError(f"empty radius range [{lo}, {hi}] for rho={rho}")
    return np.linspace(lo, hi, circle_count(rho))


def stencils_at(fld: LevelSetField, nodes_ij: Sequence[tuple[int, int]]) -> np.ndarray:
    """``(n, 9)`` stencil values for lattice nodes given as ``(i, j)``."""
    ij = np.asarray(nodes_ij, dtype=np.int64).reshape(-1, 2)
    out = np.empty((len(ij), 9))
    for k, (di, dj) in enumerate(STENCIL_OFFSETS):
        out[:, k] = fld.phi[ij[:, 1] + dj, ij[:, 0] + di]
    if not np.all(np.isfinite(out)):
        raise ValueError("stencil touches a node outside the field")
    return out


def _sample_nodes(phi: np.ndarray) -> np.ndarray:
    mask = interface_adjacent_mask(phi)
    mask[0, :] = mask[-1, :] = False
    mask[:, 0] = mask[:, -1] = False
    j, i = np.nonzero(mask)  # row-major
    return np.stack([i, j], axis=1)


def _with_negation(block: SampleSet) -> list[SampleSet]:
    return [block, SampleSet(-block.stencils, -block.targets)]


def circle_tasks(spec: DatasetSpec) -> list[tuple[float, tuple[float, float]]]:
    """(radius, center) for every circle, in canonical order."""
    rng = np.random.default_rng(spec.seed)
    h = spec.h
    tasks = []
    for r in circle_radii(spec.rho):
        for _ in range(spec.repeats_per_radius):
            tasks.append((float(r), tuple(float(c) for c in 0.5 + h * (rng.random(2) - 0.5))))
    return tasks


def circle_block(spec: DatasetSpec, radius: float, center) -> SampleSet:
    """All samples contributed by one circle.

    The signed-distance circle comes first, then the quadratic circle after
    each reinitialization count; every block is followed by its negation.
    Nodes are row-major and are chosen from the signed-distance circle.
    """
    grid = build_uniform(((0.0, 1.0), (0.0, 1.0)), spec.rho)
    X, Y = grid.mesh()
    sdf = fields.eval_circle(fields.CircleSpec(center, radius, "sdf"), X, Y)
    nodes = _sample_nodes(sdf)
    target = np.full(len(nodes), grid.h / radius)
    parts = _with_negation(SampleSet(stencils_at(LevelSetField(grid, sdf), nodes), target))
    iters = tuple(sorted(set(spec.reinit_iterations_list)))
    if iters:
        quad = fields.eval_circle(fields.CircleSpec(center, radius, "quadratic"), X, Y)
        params = ReinitParams(iterations=0, cfl=spec.reinit.cfl, scheme=spec.reinit.scheme)
        snaps = reinitialize(LevelSetField(grid, quad), params, snapshots=iters)
        for k in iters:
            parts += _with_negation(SampleSet(stencils_at(snaps[k], nodes), target))
    return SampleSet.concat(parts)


def _circle_job(args):
    return circle_block(*args)


def generate_circle_samples(spec: DatasetSpec, jobs: int = 1, progress=None) -> SampleSet:
    """Circle stencils for one resolution, deterministic in ``spec``.

    Circles may be processed by ``jobs`` worker processes; blocks are always
    concatenated in circle order so the output does not depend on ``jobs``.
    """
    tasks = [(spec, r, c) for r, c in circle_tasks(spec)]
    if jobs > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=jobs) as pool:
            blocks = []
            for k, blk in enumerate(pool.map(_circle_job, tasks, chunksize=4)):
                blocks.append(blk)
                if progress is not None:
                    progress(k + 1, len(tasks))
    else:
        blocks = []
        for k, t in enumerate(tasks):
            blocks.append(_circle_job(t))
            if progress is not None:
                progress(k + 1, len(tasks))
    return SampleSet.concat(blocks)


def circle_sample_count(spec: DatasetSpec) -> int:
    """Size of ``generate_circle_samples(spec)`` without running reinitialization.

    Node sets depend only on the signed-distance circle, so the count is
    ``2 * (1 + len(iterations)) * nodes`` summed over circles.
    """
    grid = build_uniform(((0.0, 1.0), (0.0, 1.0)), spec.rho)
    X, Y = grid.mesh()
    per_node = 2 * (1 + len(set(spec.reinit_iterations_list)))
    total = 0
    for r, center in circle_tasks(spec):
        sdf = fields.eval_circle(fields.CircleSpec(center, r, "sdf"), X, Y)
        total += per_node * len(_sample_nodes(sdf))
    return total


def generate_flower_samples(fld: LevelSetField, flower: fields.FlowerSpec, h: Optional[float] = None,
                            nodes: Optional[Sequence[tuple[int, int]]] = None) -> SampleSet:
    """One sample per interface-adjacent node with a full stencil.

    ``nodes`` are ``(i, j)`` lattice indices; by default they are harvested
    from ``fld`` itself.  Targets are ``h * kappa`` at the exact projection
    of the node onto the flower.
    """
    h = fld.h if h is None else h
    if nodes is None:
        nodes = [tuple(n) for n in _sample_nodes(fld.phi)]
    nodes = [tuple(int(v) for v in n) for n in nodes]
    for i, j in nodes:
        if not fld.stencil_mask[j, i]:
            raise ValueError(f"interface node {(i, j)} has no full stencil")
    g = fld.grid
    targets = np.array([
        fields.flower_closest_point(flower, (g.origin[0] + i * g.h, g.origin[1] + j * g.h), h=h).hkappa
        for i, j in nodes])
    return SampleSet(stencils_at(fld, nodes), targets)


def fit_normalization(train: SampleSet) -> Normalization:
    if len(train) < 2:
        raise ValueError("need at least two samples to standardize")
    mean = train.stencils.mean(axis=0)
    std = train.stencils.std(axis=0)
    if np.any(std == 0):
        raise ValueError(f"constant input component(s): {np.flatnonzero(std == 0).tolist()}")
    return Normalization(mean, std)


def split(samples: SampleSet, seed: int) -> SplitSet:
    """Seeded shuffle, then a contiguous 70/15/15 cut."""
    n = len(samples)
    if n < 10:
        raise ValueError("need at least 10 samples to split")
    perm = np.random.default_rng(seed).permutation(n)
    n_train = round(0.70 * n)
    n_val = round(0.15 * n)
    return SplitSet(samples.take(perm[:n_train]),
                    samples.take(perm[n_train:n_train + n_val]),
                    samples.take(perm[n_train + n_val:]))


def subsample(samples: SampleSet, n: int, seed: int) -> SampleSet:
    if n >= len(samples):
        return samples
    idx = np.sort(np.random.default_rng(seed).choice(len(samples), size=n, replace=False))
    return samples.take(idx)


# --------------------------------------------------------------------------
# files


def write_csv(samples: SampleSet, path) -> str:
    """Write samples with 17 significant digits; returns the sha256 of the file."""
    path = Path(path)
    data = np.column_stack([samples.stencils, samples.targets])
    with open(path, "w", newline="") as fh:
        fh.write(",".join(COLUMNS) + "\n")
        if len(data):
            np.savetxt(fh, data, fmt="%.17g", delimiter=",")
    return file_digest(path)


def read_csv(path) -> SampleSet:
    path = Path(path)
    with open(path, newline="") as fh:
        header = next(csv.reader(fh), None)
        if header is None or tuple(header) != COLUMNS:
            raise ValueError(f"{path}: unexpected header {header!r}")
        data = np.loadtxt(fh, delimiter=",", ndmin=2)
    if data.size == 0:
        return SampleSet(np.zeros((0, 9)), np.zeros(0))
    if data.shape[1] != len(COLUMNS):
        raise ValueError(f"{path}: expected {len(COLUMNS)} columns, got {data.shape[1]}")
    return SampleSet(data[:, :9], data[:, 9])


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()
