"""Error statistics and the flower-interface experiment harness."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np

from . import fields
from .dataset import SampleSet, generate_flower_samples
from .grid import build_quadtree, build_uniform, interface_adjacent_mask, interface_adjacent_nodes
from .numerics import LevelSetField, ReinitParams, compound_numerical_hkappa_many, reinitialize

log = logging.getLogger(__name__)

ITERATIONS = (5, 10, 20)
METHODS = ("neural", "numerical")
TABLE_COLUMNS = ("experiment", "method", "iterations", "n", "mae", "max_ae", "mse", "pearson_r")
QUADTREE_COUNT_SLACK = 2


class HarnessError(RuntimeError):
    """The experiment setup does not reproduce the cataloged sample layout."""


@dataclass
class ErrorReport:
    mae: float
    mse: float
    max_ae: float
    pearson_r: float
    n: int
    pearson_defined: bool = True
    experiment: str = ""
    method: str = ""
    iterations: int = 0
    targets: Optional[np.ndarray] = field(default=None, repr=False)
    predictions: Optional[np.ndarray] = field(default=None, repr=False)

    @property
    def name(self) -> str:
        return f"{self.experiment}_{self.method}_it{self.iterations}"


def error_stats(predictions, targets) -> ErrorReport:
    """MAE, MSE, max absolute error and Pearson r.

    Pairs are sorted before any reduction so the result does not depend on
    input order.  For constant targets (or predictions) r is NaN and
    ``pearson_defined`` is False.
    """
    p = np.asarray(predictions, dtype=float).reshape(-1)
    t = np.asarray(targets, dtype=float).reshape(-1)
    if p.shape != t.shape:
        raise ValueError(f"length mismatch: {p.size} predictions vs {t.size} targets")
    if p.size == 0:
        raise ValueError("no samples")
    order = np.lexsort((p, t))
    p, t = p[order], t[order]
    err = p - t
    mae = float(np.sum(np.abs(err)) / err.size)
    mse = float(np.sum(err * err) / err.size)
    max_ae = float(np.max(np.abs(err)))
    dp = p - np.sum(p) / p.size
    dt = t - np.sum(t) / t.size
    den = math.sqrt(float(np.sum(dp * dp)) * float(np.sum(dt * dt)))
    if den > 0:
        r = float(np.clip(np.sum(dp * dt) / den, -1.0, 1.0))
        defined = True
    else:
        r, defined = float("nan"), False
    return ErrorReport(mae=mae, mse=mse, max_ae=max_ae, pearson_r=r, n=int(p.size),
                       pearson_defined=defined)


@dataclass(frozen=True)
class ExperimentSpec:
    name: str
    shape: str                      # "smooth" | "acute"
    grid_kind: str                  # "uniform" | "quadtree"
    half_width: float               # domain is [-w, w]^2
    resolution: int                 # nodes per side, or max level for quadtrees
    rho_tag: int
    expected_count: Optional[int] = None
    iterations: tuple[int, ...] = ITERATIONS

    def __post_init__(self):
        if self.shape not in ("smooth", "acute"):
            raise ValueError(f"unknown shape {self.shape!r}")
        if self.grid_kind not in ("uniform", "quadtree"):
            raise ValueError(f"unknown grid kind {self.grid_kind!r}")
        if not self.half_width > 0 or self.resolution < 1:
            raise ValueError("bad domain or resolution")

    @property
    def flower(self) -> fields.FlowerSpec:
        return fields.SMOOTH_FLOWER if self.shape == "smooth" else fields.ACUTE_FLOWER

    @property
    def domain(self):
        w = self.half_width
        return ((-w, w), (-w, w))

    @property
    def h(self) -> float:
        if self.grid_kind == "uniform":
            return 2 * self.half_width / (self.resolution - 1)
        return 2 * self.half_width / (1 << self.resolution)


def experiment_catalog() -> list[ExperimentSpec]:
    rows = [
        ("smooth_uniform_low", "smooth", "uniform", 0.207843, 107, 256, 528),
        ("smooth_uniform_medium", "smooth", "uniform", 0.207547, 111, 266, 552),
        ("smooth_uniform_high", "smooth", "uniform", 0.207339, 114, 276, 564),
        ("acute_uniform_low", "acute", "uniform", 0.232826, 120, 256, 624),
        ("acute_uniform_medium", "acute", "uniform", 0.232563, 124, 266, 648),
        ("acute_uniform_high", "acute", "uniform", 0.232258, 129, 276, 672),
        ("smooth_quadtree_L7", "smooth", "quadtree", 0.246154, 7, 266, 536),
        ("acute_quadtree_L7", "acute", "quadtree", 0.244068, 7, 266, 644),
    ]
    return [ExperimentSpec(*r) for r in rows]


def find_experiment(name: str) -> ExperimentSpec:
    for spec in experiment_catalog():
        if spec.name == name:
            return spec
    names = ", ".join(s.name for s in experiment_catalog())
    raise KeyError(f"unknown experiment {name!r}; known: {names}")


@dataclass
class ExperimentSetup:
    """Grid, initial field, sample nodes (lattice ``(i, j)``) and exact targets."""

    field: LevelSetField
    nodes: list[tuple[int, int]]
    targets: np.ndarray
    h: float


def build_setup(spec: ExperimentSpec) -> ExperimentSetup:
    """Sample the flower and pick the nodes next to its zero set.

    Nodes are chosen from the analytic level set, so the sample layout does
    not depend on the reinitialization count.
    """
    flower = spec.flower
    if spec.grid_kind == "uniform":
        grid = build_uniform(spec.domain, spec.resolution)
        fld = LevelSetField(grid, grid.sample(lambda X, Y: fields.flower_field(flower, X, Y)))
        mask = interface_adjacent_mask(fld.phi) & fld.stencil_mask
        j, i = np.nonzero(mask)
        nodes = list(zip(i.tolist(), j.tolist()))
        h = grid.h
        slack = 0
    else:
        tree = build_quadtree(spec.domain, spec.resolution,
                              lambda x, y: float(fields.flower_field(flower, x, y)))
        fld = LevelSetField.from_quadtree(tree)
        ids = interface_adjacent_nodes(tree, tree.phi)
        nodes = [tree.node_keys[v] for v in ids]
        nodes = [n for n in nodes if fld.stencil_mask[n[1], n[0]]]
        h = tree.h_min
        slack = QUADTREE_COUNT_SLACK
    if spec.expected_count is not None and abs(len(nodes) - spec.expected_count) > slack:
        raise HarnessError(f"{spec.name}: harvested {len(nodes)} samples, "
                           f"expected {spec.expected_count}")
    g = fld.grid
    targets = np.array([
        fields.flower_closest_point(flower, (g.origin[0] + i * g.h, g.origin[1] + j * g.h), h=h).hkappa
        for i, j in nodes])
    return ExperimentSetup(fld, nodes, targets, h)


@dataclass
class ExperimentResult:
    spec: ExperimentSpec
    reports: list[ErrorReport]
    numerical_only: bool = False


def run_experiment(spec: ExperimentSpec, model=None, reinit: ReinitParams = ReinitParams(),
                   iterations: Optional[Sequence[int]] = None) -> ExperimentResult:
    """Evaluate the compound numerical method and, given a model, the network.

    Reports come ordered by iteration count, neural before numerical.
    Without a model the experiment runs in numerical-only mode.
    """
    from .nnet import predict

    iters = tuple(sorted(set(iterations or spec.iterations)))
    setup = build_setup(spec)
    if model is None:
        log.warning("%s: no model for rho=%s, numerical-only", spec.name, spec.rho_tag)
    snaps = reinitialize(setup.field, reinit, snapshots=iters)
    reports = []
    for k in iters:
        fld = snaps[k]
        pairs = []
        if model is not None:
            samples = generate_flower_samples(fld, spec.flower, setup.h, setup.nodes)
            pairs.append(("neural", predict(model, samples.stencils)))
        pairs.append(("numerical", compound_numerical_hkappa_many(fld, setup.nodes)))
        for method, pred in pairs:
            rep = error_stats(pred, setup.targets)
            rep.experiment, rep.method, rep.iterations = spec.name, method, k
            rep.targets, rep.predictions = setup.targets, pred
            reports.append(rep)
    return ExperimentResult(spec, reports, numerical_only=model is None)


def evaluation_samples(spec: ExperimentSpec, iterations: int,
                       reinit: ReinitParams = ReinitParams()) -> SampleSet:
    """Flower stencils and targets for one catalog entry after ``iterations`` steps."""
    setup = build_setup(spec)
    params = ReinitParams(iterations=iterations, cfl=reinit.cfl,
                          band_only=reinit.band_only, scheme=reinit.scheme)
    fld = reinitialize(setup.field, params)
    return SampleSet(generate_flower_samples(fld, spec.flower, setup.h, setup.nodes).stencils,
                     setup.targets)


def _run_one(args):
    spec, model, reinit = args
    return run_experiment(spec, model, reinit)


def run_catalog(specs: Sequence[ExperimentSpec], models: Mapping[int, object],
                reinit: ReinitParams = ReinitParams(), jobs: int = 1) -> list[ExperimentResult]:
    """Run several experiments; results keep the order of ``specs``."""
    work = [(s, models.get(s.rho_tag), reinit) for s in specs]
    if jobs <= 1 or len(work) <= 1:
        return [_run_one(w) for w in work]
    from concurrent.futures import ProcessPoolExecutor

    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(_run_one, work))


# --------------------------------------------------------------------------
# reports


def _fmt(v) -> str:
    if isinstance(v, float):
        return "nan" if math.isnan(v) else "%.17g" % v
    return str(v)


def write_table(reports: Sequence[ErrorReport], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TABLE_COLUMNS)
        for r in reports:
            w.writerow([_fmt(getattr(r, c)) for c in TABLE_COLUMNS])


def scatter_svg(targets: np.ndarray, predictions: np.ndarray, title: str, size: int = 360) -> str:
    """Minimal SVG scatter of prediction against target with the y = x line."""
    t = np.asarray(targets, dtype=float)
    p = np.asarray(predictions, dtype=float)
    lo = float(min(t.min(), p.min())) if t.size else 0.0
    hi = float(max(t.max(), p.max())) if t.size else 1.0
    if hi <= lo:
        lo, hi = lo - 0.5, hi + 0.5
    pad = 40

    def sx(v):
        return pad + (v - lo) / (hi - lo) * (size - 2 * pad)

    def sy(v):
        return size - pad - (v - lo) / (hi - lo) * (size - 2 * pad)

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" '
        f'viewBox="0 0 {size} {size}">',
        f'<rect width="{size}" height="{size}" fill="white"/>',
        f'<text x="{size / 2:.1f}" y="20" text-anchor="middle" font-size="12">{title}</text>',
        f'<rect x="{pad}" y="{pad}" width="{size - 2 * pad}" height="{size - 2 * pad}" '
        'fill="none" stroke="black"/>',
        f'<line x1="{sx(lo):.2f}" y1="{sy(lo):.2f}" x2="{sx(hi):.2f}" y2="{sy(hi):.2f}" '
        'stroke="gray" stroke-dasharray="4 3"/>',
        f'<text x="{size / 2:.1f}" y="{size - 8}" text-anchor="middle" font-size="11">target hk</text>',
        f'<text x="12" y="{size / 2:.1f}" font-size="11" transform="rotate(-90 12 {size / 2:.1f})" '
        'text-anchor="middle">predicted hk</text>',
        f'<text x="{pad}" y="{size - pad + 14}" font-size="9">{lo:.4g}</text>',
        f'<text x="{size - pad}" y="{size - pad + 14}" font-size="9" text-anchor="end">{hi:.4g}</text>',
    ]
    out += [f'<circle cx="{sx(a):.2f}" cy="{sy(b):.2f}" r="1.5" fill="steelblue"/>'
            for a, b in zip(t, p)]
    out.append("</svg>")
    return "\n".join(out) + "\n"


def emit_report(reports: Sequence[ErrorReport], path, svg: bool = True,
                table_name: str = "report.csv") -> list[Path]:
    """Write the summary table plus per-report scatter CSV (and SVG) files.

    Returns the written paths, table first.
    """
    out_dir = Path(path)
    out_dir.mkdir(parents=True, exist_ok=True)
    table = out_dir / table_name
    write_table(reports, table)
    written = [table]
    for r in reports:
        if r.targets is None or r.predictions is None:
            continue
        scatter = out_dir / f"{r.name}.csv"
        with open(scatter, "w") as fh:
            fh.write("target,prediction\n")
            for a, b in zip(r.targets, r.predictions):
                fh.write(f"{a:.17g},{b:.17g}\n")
        written.append(scatter)
        if svg:
            img = out_dir / f"{r.name}.svg"
            title = f"{r.name}  MAE={r.mae:.3e}  r={_fmt(r.pearson_r)[:8]}"
            img.write_text(scatter_svg(r.targets, r.predictions, title))
            written.append(img)
    return written
