"""Acceptance suite: one test per criterion, each reporting a pass/fail line."""

import filecmp
import os
import time
from dataclasses import replace

import numpy as np

from astra_tda import cli
from astra_tda.attribution import SourcePlan, if_attribute, source_attribute
from astra_tda.ekfac import fit_ekfac, precondition
from astra_tda.evaluation import (
    BIN_THRESHOLDS, GroundTruth, curvature_scan, lds, null_lds_bound, plateau_index,
)
from astra_tda.ihvp import (
    LR_SWEEP, SolverConfig, SolverDivergence, astra_defaults, astra_solve, dense_solve,
    effective_damping, lr_sweep, quadratic_objective, sni_solve, truncated_neumann_apply,
    truncated_response,
)
from astra_tda.model import CLASSIFICATION, Example, MlpSpec, dense_ggn, ggn_vec, grad, measurement_grad, pseudo_grad_rows
from astra_tda.seeding import derive_seed
from astra_tda.trainer import init_params, segment_trajectory

from conftest import ACCEPTANCE_LINES
from oracles import fd_grad, pattern_margin, ref_ggn, ref_loss, ref_measurement, rel_err


def report(name, ok, detail):
    ACCEPTANCE_LINES.append(f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}")
    assert ok, f"{name}: {detail}"


def test_c01_astra_matches_exact_ihvp(tiny):
    lam = tiny.damping
    g = ref_ggn(tiny.spec.layer_dims, tiny.params, tiny.data.x)
    rng = np.random.default_rng(1)
    cfg = astra_defaults(lam, batch_size=None, iterations=200)
    t0 = time.perf_counter()
    errs = []
    for i in range(10):
        v = rng.normal(size=tiny.spec.n_params)
        x, _ = astra_solve(tiny.spec, tiny.params, tiny.data, tiny.state, v, replace(cfg, seed=i))
        errs.append(rel_err(x, np.linalg.solve(g + lam * np.eye(len(v)), v)))
    dt = time.perf_counter() - t0
    report("C1 oracle equivalence", max(errs) <= 1e-4 and dt < 10,
           f"max rel err {max(errs):.2e} (<= 1e-4), {dt:.2f}s (< 10s), D={tiny.spec.n_params}")


def test_c02_one_step_astra_is_ekfac(tiny):
    lam = tiny.damping
    cfg = SolverConfig(lr=1.0, damping=lam, precond_damping=lam, iterations=1, init="zero", batch_size=None)
    rng = np.random.default_rng(2)
    t0 = time.perf_counter()
    errs = []
    for _ in range(20):
        v = rng.normal(size=tiny.spec.n_params)
        x, _ = astra_solve(tiny.spec, tiny.params, tiny.data, tiny.state, v, cfg)
        errs.append(rel_err(x, precondition(tiny.state, lam, v)))
    dt = time.perf_counter() - t0
    report("C2 one-step EKFAC identity", max(errs) <= 1e-14 and dt < 1,
           f"max rel err {max(errs):.2e} (<= 1e-14), {dt:.3f}s (< 1s)")


def _iterations_to_target(solve, cfg, grid):
    """Fewest iterations over the lr grid to reach the target objective."""
    best = (np.inf, None)
    for lr in grid:
        try:
            _, trace = solve(replace(cfg, lr=lr))
        except SolverDivergence:
            continue
        if trace.objective[-1] <= cfg.target_objective:
            best = min(best, (trace.iterations[-1], lr), key=lambda p: p[0])
    return best


def test_c03_preconditioning_speedup(tiny):
    lam = tiny.damping
    spec, params, data = tiny.spec, tiny.params, tiny.data
    g = dense_ggn(spec, params, data.x)
    rng = np.random.default_rng(3)
    base = SolverConfig(damping=lam, precond_damping=lam, batch_size=None, iterations=4000,
                        momentum=0.0, lr_decay_every=0)
    t0 = time.perf_counter()
    rows = []
    for _ in range(3):
        v = rng.normal(size=spec.n_params)
        x_star = dense_solve(0.5 * (g + g.T), lam, v)
        h_star = quadratic_objective(spec, params, data, lam, v, x_star)
        cfg = replace(base, target_objective=h_star + 1e-6 * abs(h_star))
        a_its, a_lr = _iterations_to_target(lambda c: astra_solve(spec, params, data, tiny.state, v, c), cfg, LR_SWEEP)
        s_its, s_lr = _iterations_to_target(lambda c: sni_solve(spec, params, data, v, c), cfg, LR_SWEEP)
        rows.append((a_its, a_lr, s_its, s_lr))
    dt = time.perf_counter() - t0
    ok = all(a < s and s >= 2 * a for a, _, s, _ in rows) and dt < 120
    detail = "; ".join(f"astra {a} its (lr {al:g}) vs sni {s} its (lr {sl})" for a, al, s, sl in rows)
    report("C3 preconditioning speedup >= 2x", ok, f"{detail}; {dt:.1f}s (< 120s)")


def test_c04_truncated_series(rng):
    t0 = time.perf_counter()
    sig = np.abs(rng.normal(size=12)) + 1e-3
    lam, lr = 1e-2, 0.3
    v = rng.normal(size=12)
    errs = []
    for J in (1, 5, 50):
        got = truncated_neumann_apply(lambda x: sig * x, lr, lam, J, v)
        closed = (1 - (1 - lr * (sig + lam)) ** J) / (sig + lam) * v
        errs.append(rel_err(got, closed))
    band = 0.0
    for lam in (1e-4, 1e-2, 1e-1):
        for sigma in np.logspace(-4, 0, 41):
            for x in np.logspace(-1, 1, 41):
                lr_j = x / (sigma + lam)
                f = truncated_response(sigma, lr_j, lam, 1.0)
                approx = 1.0 / (sigma + effective_damping(lr_j, lam, 1.0))
                band = max(band, abs(f - approx) / approx)
    dt = time.perf_counter() - t0
    report("C4 truncated-series identity", max(errs) <= 1e-12 and band < 0.35 and dt < 1,
           f"closed-form rel err {max(errs):.1e} (<= 1e-12), band max rel err {band:.3f} (< 0.35), {dt:.2f}s")


def test_c05_gradient_correctness(tiny):
    t0 = time.perf_counter()
    nets = [((3, 5, 1), "regression"), ((2, 6, 4, 1), "regression"), ((4, 7, 3), CLASSIFICATION),
            ((3, 4, 4, 2), CLASSIFICATION), ((5, 6, 1), "regression")]
    worst = 0.0
    for seed, (dims, task) in enumerate(nets):
        spec = MlpSpec(dims, task)
        params = init_params(spec, seed)
        rng = np.random.default_rng(100 + seed)
        cls = task == CLASSIFICATION
        xs = [x for x in rng.normal(size=(12, dims[0])) if pattern_margin(dims, params, [x]) > 1e-3][:3]
        assert len(xs) == 3
        for x in xs:
            t = int(rng.integers(dims[-1])) if cls else float(rng.normal())
            ex = Example(x, t)
            fl = fd_grad(lambda p: ref_loss(dims, p, x, t, cls), params)
            fm = fd_grad(lambda p: ref_measurement(dims, p, x, t, cls), params)
            worst = max(worst, rel_err(grad(spec, params, ex), fl), rel_err(measurement_grad(spec, params, ex), fm))
    g_ref = ref_ggn(tiny.spec.layer_dims, tiny.params, tiny.data.x)
    eye = np.eye(tiny.spec.n_params)
    gv = np.stack([ggn_vec(tiny.spec, tiny.params, tiny.data.x, e) for e in eye], axis=1)
    ggn_err = rel_err(gv, g_ref)
    dense = dense_ggn(tiny.spec, tiny.params, tiny.data.x)
    min_eig = float(np.linalg.eigvalsh(0.5 * (dense + dense.T)).min())
    dt = time.perf_counter() - t0
    report("C5 gradient correctness", worst <= 1e-5 and ggn_err <= 1e-10 and min_eig >= -1e-9 and dt < 30,
           f"grad/measurement FD rel err {worst:.1e} (<= 1e-5), ggn_vec rel err {ggn_err:.1e} (<= 1e-10), "
           f"min eig {min_eig:.1e} (>= -1e-9), {dt:.1f}s")


def test_c06_fisher_matches_ggn(tiny_cls):
    spec, data, params = tiny_cls
    t0 = time.perf_counter()
    n = 200_000
    reps = n // len(data)
    x = np.tile(data.x, (reps, 1))
    rows = pseudo_grad_rows(spec, params, x, np.random.default_rng(6))
    fisher = rows.T @ rows / len(rows)
    g = ref_ggn(spec.layer_dims, params, data.x, classification=True)
    err = float(np.linalg.norm(fisher - g) / np.linalg.norm(g))
    dt = time.perf_counter() - t0
    report("C6 Fisher-GGN convergence", err <= 0.05 and dt < 120,
           f"{len(rows)} samples, Frobenius rel err {err:.4f} (<= 0.05), {dt:.1f}s (< 120s)")


def test_c07_lds_directional(lds_task):
    t0 = time.perf_counter()
    gt = lds_task.ground_truth()
    workers = min(8, os.cpu_count() or 1)
    cfg = astra_defaults(lds_task.damping)
    args = (lds_task.spec, lds_task.params, lds_task.train_set, lds_task.queries)
    astra = lds(if_attribute(*args, "astra", cfg, state=lds_task.state, workers=workers), lds_task.masks, gt)
    ekfac = lds(if_attribute(*args, "ekfac", cfg, state=lds_task.state), lds_task.masks, gt)
    bound = null_lds_bound(50, len(lds_task.queries))
    dt = time.perf_counter() - t0
    ok = astra.mean >= ekfac.mean - 0.02 and astra.mean > bound and dt < 1800
    report("C7 LDS directional", ok,
           f"astra-IF {astra.mean:.4f} vs ekfac-IF {ekfac.mean:.4f} (margin -0.02), null 3-sigma {bound:.4f}, "
           f"{dt:.0f}s with {workers} worker(s)")


def test_c08_source_single_segment_is_if(tiny):
    t0 = time.perf_counter()
    (seg,) = segment_trajectory(tiny.traj, 1)
    state = fit_ekfac(tiny.spec, seg.mean_params, tiny.data, seed=derive_seed(0, seg.index))
    plan = SourcePlan((seg,), (state,), tiny.params)
    lam = 1.0 / (seg.mean_lr * seg.steps)
    cfg = astra_defaults(lam, batch_size=None)
    queries = tiny.data.subset(np.arange(8))
    src = source_attribute(tiny.spec, plan, tiny.data, queries, "astra", cfg)
    ref = if_attribute(tiny.spec, seg.mean_params, tiny.data, queries, "astra", cfg, state=state,
                       query_params=tiny.params)
    rel = np.abs(src.scores - ref.scores) / np.maximum(np.abs(ref.scores), 1e-300)
    dt = time.perf_counter() - t0
    report("C8 SOURCE degeneracy (L=1)", float(rel.max()) <= 1e-6 and dt < 60,
           f"max per-score rel err {rel.max():.1e} (<= 1e-6), lambda {lam:.4f}, {dt:.1f}s")


def test_c09_curvature_scan_structure(lds_task):
    t0 = time.perf_counter()
    gt = lds_task.ground_truth()
    spec, params, data = lds_task.spec, lds_task.params, lds_task.train_set
    queries = lds_task.queries.subset(np.arange(8))
    gt = GroundTruth(gt.values[:, :, :8], list(gt.failed))
    base = SolverConfig(damping=1e-4, batch_size=None, iterations=1000, momentum=0.0, lr_decay_every=0,
                        snapshot_every=10)
    v0 = measurement_grad(spec, params, queries[0])
    best_lr, _ = lr_sweep(lambda c: sni_solve(spec, params, data, v0, c), replace(base, snapshot_every=0))
    sni_cfg = replace(base, lr=best_lr)
    rows = curvature_scan(spec, params, data, lds_task.state, queries, sni_cfg, masks=lds_task.masks,
                          ground_truth=gt, solvers=("sni",))
    hi, lo = BIN_THRESHOLDS[0], BIN_THRESHOLDS[-1]

    def series(thr):
        sel = [r for r in rows if r.bin_threshold == thr]
        return [r.iteration for r in sel], [r.objective for r in sel], sel[-1].lds

    it_hi, obj_hi, lds_hi = series(hi)
    it_lo, obj_lo, _ = series(lo)
    _, _, lds_full = series(0.0)
    p_hi, p_lo = plateau_index(it_hi, obj_hi), plateau_index(it_lo, obj_lo)
    plateau_ok = p_hi is not None and (p_lo is None or p_hi < p_lo)
    gap = lds_full - lds_hi
    dt = time.perf_counter() - t0
    report("C9 curvature-scan structure", plateau_ok and gap >= 0.05 and dt < 900,
           f"sni lr {best_lr:g}; plateau iteration bin {hi:g}: {p_hi}, bin {lo:g}: {p_lo}; "
           f"final LDS full {lds_full:.4f} vs bin {hi:g} {lds_hi:.4f} (gap {gap:.4f} >= 0.05); {dt:.0f}s")


PIPELINE = [
    ["gen-data"], ["train"], ["ekfac"],
    ["attribute", "--method", "astra"], ["attribute", "--method", "ekfac"],
    ["attribute", "--method", "identity"], ["attribute", "--method", "sni"],
    ["ihvp-solve", "--method", "astra"], ["ihvp-solve", "--method", "sni"],
    ["source-attribute", "--method", "astra"], ["source-attribute", "--method", "ekfac"],
    ["retrain-grid"], ["lds", "--method", "astra"], ["lds", "--method", "identity"],
    ["curvature-scan"], ["neumann-damping"],
]
BINARY = {".npy", ".astk", ".ekfc", ".attr"}


def _run_pipeline(config, run_dir):
    for cmd in PIPELINE:
        code = cli.main(cmd + ["--config", str(config), "--run-dir", str(run_dir)])
        assert code == 0, f"{cmd} exited {code}"


def test_c10_determinism(tmp_path):
    import json

    t0 = time.perf_counter()
    a, b = tmp_path / "a", tmp_path / "b"
    _run_pipeline(cli.bundled_config("tiny"), a)
    manifest = json.loads((a / "manifest.json").read_text())
    rebuilt = tmp_path / "from_manifest.ini"
    rebuilt.write_text(cli.render_config(manifest["config"]))
    _run_pipeline(rebuilt, b)
    files = sorted(p.relative_to(a) for p in a.rglob("*") if p.suffix in BINARY)
    diff = [str(f) for f in files if not (b / f).exists() or not filecmp.cmp(a / f, b / f, shallow=False)]
    dt = time.perf_counter() - t0
    report("C10 determinism", bool(files) and not diff and dt < 300,
           f"{len(files)} binary artifacts compared, {len(diff)} differ {diff[:3]}, {dt:.0f}s (< 300s)")
