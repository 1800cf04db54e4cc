"""Acceptance gate: one test per criterion, each recording a PASS/FAIL line.

Reference values below are published results for the same experiments;
criterion 7 (full-scale training) only runs with
``CURVNET_FULL_SCALE=1`` and never fails the suite.
"""
import os
import time

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES
from curvnet import cli, nnet
from curvnet.dataset import (DatasetSpec, SplitSet, circle_sample_count, generate_circle_samples,
                             split, subsample)
from curvnet.evaluation import build_setup, error_stats, find_experiment, run_experiment
from curvnet.fields import CircleSpec, eval_circle
from curvnet.grid import interface_adjacent_mask
from curvnet.numerics import ReinitParams, reinitialize, uniform_field

pytestmark = pytest.mark.acceptance

UNIT = ((0.0, 1.0), (0.0, 1.0))


def record(number, ok, detail):
    ACCEPTANCE_LINES.append(f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}")
    return ok


def circle(rho, form="sdf"):
    return uniform_field(UNIT, rho, lambda X, Y: eval_circle(CircleSpec((0.5, 0.5), 0.25, form), X, Y))


def test_c1_curvature_convergence():
    t0 = time.perf_counter()
    hs, errs = [], []
    for rho in (64, 128, 256):
        f = circle(rho)
        band = interface_adjacent_mask(f.phi) & f.stencil_mask
        X, Y = f.grid.mesh()
        exact = 1.0 / np.hypot(X - 0.5, Y - 0.5)
        errs.append(float(np.max(np.abs(f.curvature - exact)[band])))
        hs.append(f.h)
    slope = float(np.polyfit(np.log(hs), np.log(errs), 1)[0])
    dt = time.perf_counter() - t0
    ok = slope >= 1.5 and dt < 5
    record(1, ok, f"slope {slope:.3f} (>= 1.5), band max errors {['%.3e' % e for e in errs]}, {dt:.1f} s")
    assert ok


def test_c2_reinitialization_efficacy():
    t0 = time.perf_counter()
    f = circle(256, "quadratic")
    band = interface_adjacent_mask(f.phi) & f.stencil_mask
    snaps = reinitialize(f, ReinitParams(), snapshots=(5, 20))

    def defect(fld):
        px, py, *_ = fld.derivatives
        return float(np.mean(np.abs(np.hypot(px, py) - 1.0)[band]))

    d5, d20 = defect(snaps[5]), defect(snaps[20])
    dt = time.perf_counter() - t0
    ok = d20 < 0.05 and d20 < d5 and dt < 30
    record(2, ok, f"band mean ||grad|-1| {d5:.3e} @5 -> {d20:.3e} @20 (< 0.05), {dt:.1f} s")
    assert ok


# (experiment, iterations, reference MAE, reference MaxAE)
GOLDEN = [
    ("smooth_uniform_low", 20, 3.166947e-4, 2.578525e-3),
    ("smooth_uniform_low", 5, 1.205349e-3, 6.373532e-3),
    ("acute_uniform_low", 20, 1.183391e-3, 4.001732e-2),
    ("smooth_uniform_high", 20, 2.748485e-4, 1.969042e-3),
    ("acute_uniform_high", 5, 2.281847e-3, 2.811109e-2),
    ("smooth_quadtree_L7", 10, 4.289887e-4, 2.802827e-3),
    ("acute_quadtree_L7", 20, 1.082114e-3, 2.778140e-2),
]


@pytest.mark.parametrize("name, iters, mae, max_ae", GOLDEN, ids=[f"{g[0]}-it{g[1]}" for g in GOLDEN])
def test_c3_numerical_golden_bands(name, iters, mae, max_ae):
    t0 = time.perf_counter()
    rep = run_experiment(find_experiment(name), iterations=(iters,)).reports[0]
    dt = time.perf_counter() - t0
    r_mae, r_max = rep.mae / mae, rep.max_ae / max_ae
    ok = 0.5 <= r_mae <= 2 and 0.5 <= r_max <= 2 and dt < 60
    record(3, ok, f"{name} it{iters}: MAE {rep.mae:.4e} (ref {mae:.4e}, x{r_mae:.2f}), "
                  f"MaxAE {rep.max_ae:.4e} (ref {max_ae:.4e}, x{r_max:.2f}), {dt:.1f} s")
    assert ok


COUNTS = {
    "smooth_uniform_low": 528, "smooth_uniform_medium": 552, "smooth_uniform_high": 564,
    "acute_uniform_low": 624, "acute_uniform_medium": 648, "acute_uniform_high": 672,
}
REFERENCE_CIRCLE_TOTAL_256 = 3_145_410 + 2 * 674_017


def test_c4_sample_count_parity():
    got = {name: len(build_setup(find_experiment(name)).nodes) for name in COUNTS}
    flowers_ok = got == COUNTS
    total = circle_sample_count(DatasetSpec(rho=256, seed=7))
    rel = total / REFERENCE_CIRCLE_TOTAL_256 - 1
    ok = flowers_ok and abs(rel) <= 0.10
    record(4, ok, f"flower counts {list(got.values())} (exact), circle total rho=256 {total} "
                  f"vs {REFERENCE_CIRCLE_TOTAL_256} ({rel:+.3%})")
    assert ok


def _fd_grad(model, x, y, eps=1e-4):
    g = np.empty_like(model.params)
    for k in range(model.n_params):
        keep = model.params[k]
        model.params[k] = keep + eps
        lp = np.mean((nnet.forward(model, x) - y) ** 2)
        model.params[k] = keep - eps
        lm = np.mean((nnet.forward(model, x) - y) ** 2)
        model.params[k] = keep
        g[k] = (lp - lm) / (2 * eps)
    return g


def _kink_margin(model, x):
    a, low = x, np.inf
    for w, b in model.views(model.params)[:-1]:
        z = a @ w + b
        low = min(low, float(np.min(np.abs(z))))
        a = np.maximum(z, 0)
    return low


def test_c5_gradient_check():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    worst, done = 0.0, 0
    while done < 20:
        hidden = [int(v) for v in rng.integers(1, 17, size=rng.integers(1, 3))]
        model = nnet.init_model([9, *hidden, 1], rng)
        model.params += rng.normal(scale=0.05, size=model.n_params)
        x = rng.normal(size=(int(rng.integers(1, 9)), 9))
        y = rng.normal(size=len(x))
        if _kink_margin(model, x) < 1e-2:  # finite differences straddle a ReLU kink
            continue
        _, g = nnet.backward(model, x, y)
        num = _fd_grad(model, x, y)
        scale = np.maximum(np.abs(g), np.abs(num))
        mask = scale > 1e-8
        if mask.any():
            worst = max(worst, float(np.max(np.abs(g - num)[mask] / scale[mask])))
        done += 1
    dt = time.perf_counter() - t0
    ok = worst < 1e-5 and dt < 10
    record(5, ok, f"max relative error {worst:.2e} over 20 networks (< 1e-5), {dt:.1f} s")
    assert ok


@pytest.mark.slow
def test_c6_desk_scale_training(tmp_path):
    t0 = time.perf_counter()
    spec = DatasetSpec(rho=256, seed=7)
    samples = generate_circle_samples(spec)
    t_gen = time.perf_counter() - t0
    assert len(samples) == circle_sample_count(spec)
    parts = split(samples, spec.seed)
    desk = SplitSet(subsample(parts.train, cli.DESK_TRAIN_SAMPLES, 7),
                    subsample(parts.validation, cli.DESK_VALIDATION_SAMPLES, 8), parts.test)
    del samples
    config = nnet.TrainConfig(max_epochs=cli.DESK_MAX_EPOCHS, seed=7)
    t1 = time.perf_counter()
    model, log = nnet.train(desk, nnet.parse_arch("128x4"), config, rho_tag=256)
    t_train = time.perf_counter() - t1
    test = error_stats(nnet.predict(model, parts.test.stencils), parts.test.targets)
    exp = run_experiment(find_experiment("smooth_uniform_low"), model, iterations=(5,))
    neural, numerical = exp.reports
    # The runtime bar applies to training; dataset generation is a separate
    # pipeline stage and is reported alongside.
    ok = test.mae <= 1.5e-3 and neural.mae <= 3 * numerical.mae and t_train < 1800
    record(6, ok, f"test MAE {test.mae:.4e} (<= 1.5e-3; reference full scale 2.91e-4), "
                  f"flower 107 it5 neural {neural.mae:.4e} vs numerical {numerical.mae:.4e} "
                  f"(x{neural.mae / numerical.mae:.2f} <= 3), best epoch {log.best_epoch}, "
                  f"training {t_train / 60:.1f} min (< 30), generation {t_gen / 60:.1f} min")
    assert ok


@pytest.mark.slow
def test_c7_full_scale_optional():
    if os.environ.get("CURVNET_FULL_SCALE") != "1":
        record(7, True, "optional full-scale run not requested (set CURVNET_FULL_SCALE=1); reported as skipped")
        pytest.skip("full-scale training is opt-in")
    spec = DatasetSpec(rho=256, seed=7)
    parts = split(generate_circle_samples(spec), spec.seed)
    model, log = nnet.train(parts, nnet.parse_arch("128x4"), nnet.TrainConfig(seed=7), rho_tag=256)
    test = error_stats(nnet.predict(model, parts.test.stencils), parts.test.targets)
    ok = test.mae <= 3 * 2.91e-4
    record(7, ok, f"full-scale test MAE {test.mae:.4e} vs reference 2.91e-4 (<= 3x); optional, not gating")


def test_c8_property_suite(tmp_path):
    from curvnet.dataset import TARGET_BOUND
    from curvnet.numerics import compound_numerical_hkappa_many

    checks = {}
    # odd symmetry of the curvature operators
    f = uniform_field(UNIT, 96, lambda X, Y: eval_circle(CircleSpec((0.503, 0.49), 0.21), X, Y))
    band = interface_adjacent_mask(f.phi) & f.stencil_mask
    j, i = np.nonzero(band)
    nodes = list(zip(i.tolist(), j.tolist()))
    neg = f.negated()
    checks["odd symmetry"] = (
        np.array_equal(neg.curvature[band], -f.curvature[band])
        and np.array_equal(compound_numerical_hkappa_many(neg, nodes), -compound_numerical_hkappa_many(f, nodes)))
    # dataset negation closure and target bound
    s = generate_circle_samples(DatasetSpec(rho=64, repeats_per_radius=1, reinit_iterations_list=(5,), seed=1))
    rows = np.column_stack([s.stencils, s.targets])
    checks["negation closure"] = {r.tobytes() for r in rows} == {(-r).tobytes() for r in rows}
    checks["target bound"] = bool(np.all(np.abs(s.targets) <= TARGET_BOUND + 1e-12))
    # model save/load round trip
    rng = np.random.default_rng(0)
    m = nnet.init_model([9, 12, 12, 1], rng, rho_tag=256)
    nnet.save_model(m, tmp_path / "m.json")
    back = nnet.load_model(tmp_path / "m.json")
    x = rng.normal(size=(100, 9))
    checks["model round trip"] = (np.array_equal(back.params, m.params)
                                  and np.array_equal(nnet.predict(back, x), nnet.predict(m, x)))
    # seeded end-to-end determinism of gen + numerical eval
    outputs = []
    for run in ("a", "b"):
        d, r = tmp_path / run / "data", tmp_path / run / "report"
        assert cli.main(["gen", "--rho", "64", "--seed", "5", "--out", str(d), "--repeats", "1"]) == 0
        assert cli.main(["eval", "--report", str(r), "--experiment", "smooth_uniform_low",
                         "--numerical-only"]) == 0
        outputs.append({p.relative_to(tmp_path / run): p.read_bytes()
                        for p in sorted((tmp_path / run).rglob("*")) if p.is_file()})
    checks["end-to-end determinism"] = outputs[0] == outputs[1]
    ok = all(checks.values())
    record(8, ok, ", ".join(f"{k}={'ok' if v else 'FAILED'}" for k, v in checks.items()))
    assert ok
