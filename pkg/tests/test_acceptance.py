"""Acceptance checks, one test per criterion.

Each test prints a single ``[criterion N] PASS|FAIL ...`` line with the measured
numbers, then asserts. The solver and training runs are shared through
module-scoped fixtures; the whole file takes roughly half an hour on one core.
"""
import time
from dataclasses import replace

import numpy as np
import pytest

from warpgrid import autodiff, losses, warp
from warpgrid.cli import main as cli_main
from warpgrid.features import make_extractor
from warpgrid.imagery import KeypointSet, SamplingGrid, identity_grid, load_grid, save_grid
from warpgrid.losses import LossWeights
from warpgrid.metrics import calibration, end_point_error, pck, synthetic_dense
from warpgrid.predictor import (PredictorConfig, TinyPredictor, TrainConfig, evaluate_dense, load_checkpoint,
                                save_checkpoint, train_predictor)
from warpgrid.solver import DirectSolveConfig, direct_solve
from warpgrid.synth import (SynthConfig, generate_dataset, generate_texture, load_manifest, make_pair,
                            pair_from_record, regenerate, sample_warp_spec)
from warpgrid.synth import _record as synth_record

pytestmark = pytest.mark.slow

N_PAIRS = 20
SIZE = 64
AFFINE = SynthConfig(size=SIZE, rotation_max_deg=30, scale_range=(0.8, 1.25), translation_max=0.2)
IDENT = identity_grid(SIZE, SIZE).coords.astype(np.float64)


@pytest.fixture
def report(capsys):
    def emit(n, ok, detail):
        with capsys.disabled():
            print(f"\n[criterion {n}] {'PASS' if ok else 'FAIL'} {detail}", flush=True)
    return emit


def _affine_pair(i, occlusion=0.0, base=1000):
    seed = base + i
    tex = generate_texture(SIZE, SIZE, ("blobs", "value_noise")[i % 2], seed)
    return make_pair(tex, sample_warp_spec(AFFINE, seed), occlusion, seed)


def _solve_all(pairs, cfg):
    out = []
    t0 = time.perf_counter()
    for p in pairs:
        out.append(direct_solve(p.I_s, p.I_t, p.M_s, p.M_t, cfg))
    return out, time.perf_counter() - t0


def _pair_epe(p, r):
    return 0.5 * (end_point_error(r.G_st.coords, p.G_st.coords, p.V_t)
                  + end_point_error(r.G_ts.coords, p.G_ts.coords, p.V_s))


def _second_difference(g):
    d = np.asarray(g, np.float64) - IDENT
    return np.concatenate([
        np.abs(d[:, :, 2:] - 2 * d[:, :, 1:-1] + d[:, :, :-2]).ravel(),
        np.abs(d[:, 2:] - 2 * d[:, 1:-1] + d[:, :-2]).ravel(),
    ]).mean()


def _dense(p, r):
    return synthetic_dense(r.G_st, r.G_ts, p.G_st, p.G_ts, p.I_s, p.I_t, p.V_s, p.V_t)


@pytest.fixture(scope="module")
def affine_runs():
    pairs = [_affine_pair(i) for i in range(N_PAIRS)]
    results, seconds = _solve_all(pairs, DirectSolveConfig())
    return pairs, results, seconds


# ---------------------------------------------------------------------------
# 1. gradient suite


def _rel(a, b):
    scale = max(abs(a), abs(b))
    return 0.0 if scale < 1e-12 else abs(a - b) / scale


def _directional(f, grad, x, v, h):
    fd = (f(x + h * v) - f(x - h * v)) / (2 * h)
    return _rel(float(np.vdot(grad, v)), fd)


def _grid_step(w):
    # a unit direction entry moves a sample by at most 1e-4 px, far below the 1e-2 px margin
    return 1e-4 * 2 / (w - 1)


def _off_boundary(rng, h, w, margin=1e-2):
    px = rng.integers(0, w - 1, (h, w)) + rng.uniform(margin, 1 - margin, (h, w))
    py = rng.integers(0, h - 1, (h, w)) + rng.uniform(margin, 1 - margin, (h, w))
    return np.stack([2 * px / (w - 1) - 1, 2 * py / (h - 1) - 1])


def _unit(rng, shape):
    v = rng.standard_normal(shape)
    return v / np.abs(v).max()


def _gradient_instance(seed):
    """Relative errors of every analytic gradient on one random instance."""
    rng = np.random.default_rng([seed, 1])
    h, w = (int(v) for v in rng.integers(8, 17, 2))
    step = _grid_step(max(h, w))
    errs = {}
    I_s, I_t = rng.random((2, 3, h, w))
    g_st, g_ts = _off_boundary(rng, h, w), _off_boundary(rng, h, w)
    C_s, C_t = rng.uniform(0.1, 0.9, (2, h, w))
    M_s = (rng.random((h, w)) > 0.2).astype(float)
    M_t = (rng.random((h, w)) > 0.2).astype(float)
    ext = make_extractor("random_conv", seed=seed)

    # bilinear sampling
    up = rng.standard_normal((3, h, w))
    b = warp.bilinear_sample_backward(I_s, g_st, up)
    errs["warp/grid"] = _directional(lambda g: np.vdot(warp.bilinear_sample(I_s, g), up), b.d_grid, g_st,
                                     _unit(rng, g_st.shape), step)
    errs["warp/image"] = _directional(lambda im: np.vdot(warp.bilinear_sample(im, g_st), up), b.d_image, I_s,
                                      _unit(rng, I_s.shape), 1e-3)

    # confidence-weighted cycle terms
    for name, fn in (("matching", lambda a, c, d, e: losses.loss_matching(I_s, I_t, a, c, d, e, M_s, M_t, ext)),
                     ("reconstruction", lambda a, c, d, e: losses.loss_reconstruction(I_s, I_t, a, c, d, e, M_s,
                                                                                        M_t))):
        r = fn(g_st, g_ts, C_s, C_t)
        errs[f"{name}/grid_st"] = _directional(lambda x: fn(x, g_ts, C_s, C_t).total, r.grads["grid_st"], g_st,
                                               _unit(rng, g_st.shape), step)
        errs[f"{name}/grid_ts"] = _directional(lambda x: fn(g_st, x, C_s, C_t).total, r.grads["grid_ts"], g_ts,
                                               _unit(rng, g_ts.shape), step)
        errs[f"{name}/conf_s"] = _directional(lambda x: fn(g_st, g_ts, x, C_t).total, r.grads["conf_s"], C_s,
                                              _unit(rng, C_s.shape), 1e-3)
        errs[f"{name}/conf_t"] = _directional(lambda x: fn(g_st, g_ts, C_s, x).total, r.grads["conf_t"], C_t,
                                              _unit(rng, C_t.shape), 1e-3)

    # uncertainty: references kept 0.05 away from the estimate so the L1 kink is never crossed
    ref_s = np.clip(C_s + rng.choice([-1, 1], C_s.shape) * rng.uniform(0.05, 0.3, C_s.shape), 0, 1)
    ref_t = np.clip(C_t + rng.choice([-1, 1], C_t.shape) * rng.uniform(0.05, 0.3, C_t.shape), 0, 1)
    r = losses.loss_uncertainty(ref_s, ref_t, C_s, C_t, M_s, M_t, 0.1)
    errs["uncertainty/conf_s"] = _directional(
        lambda x: losses.loss_uncertainty(ref_s, ref_t, x, C_t, M_s, M_t, 0.1).total, r.grads["conf_s"], C_s,
        _unit(rng, C_s.shape), 1e-3)
    errs["uncertainty/conf_t"] = _directional(
        lambda x: losses.loss_uncertainty(ref_s, ref_t, C_s, x, M_s, M_t, 0.1).total, r.grads["conf_t"], C_t,
        _unit(rng, C_t.shape), 1e-3)

    for mode in ("displacement", "literal"):
        r = losses.loss_smoothness(g_st, mode)
        errs[f"smooth/{mode}"] = _directional(lambda x: losses.loss_smoothness(x, mode).total, r.grads["grid"],
                                              g_st, _unit(rng, g_st.shape), step)

    gt = _off_boundary(rng, h, w)
    vis = (rng.random((h, w)) > 0.3).astype(float)
    r = losses.loss_dense_supervised(g_st, gt, vis)
    errs["dense"] = _directional(lambda x: losses.loss_dense_supervised(x, gt, vis).total, r.grads["grid"], g_st,
                                 _unit(rng, g_st.shape), step)

    k = 6
    pts = np.stack([rng.uniform(0, w - 1, k), rng.uniform(0, h - 1, k),
                    rng.uniform(0, w - 1, k), rng.uniform(0, h - 1, k)], axis=1)
    kps = KeypointSet(pts, rng.random(k) > 0.2)
    r = losses.loss_sparse_keypoints(g_st, g_ts, kps)
    errs["sparse/grid_st"] = _directional(lambda x: losses.loss_sparse_keypoints(x, g_ts, kps).total,
                                          r.grads["grid_st"], g_st, _unit(rng, g_st.shape), step)
    errs["sparse/grid_ts"] = _directional(lambda x: losses.loss_sparse_keypoints(g_st, x, kps).total,
                                          r.grads["grid_ts"], g_ts, _unit(rng, g_ts.shape), step)

    # tape operators
    n = 8
    x = rng.standard_normal((1, 2, n, n))
    x = np.where(np.abs(x) < 0.05, 0.05 * np.sign(x + 1e-12), x)  # keep leaky_relu away from its kink
    wts = rng.standard_normal((3, 2, 3, 3))
    bias = rng.standard_normal(3)
    grid = _off_boundary(rng, n, n)[None]
    ops = {
        "tape/add": (lambda t, a: t.add(a, t.constant(x[:, :1])), x),
        "tape/sub": (lambda t, a: t.sub(t.constant(x), a), x),
        "tape/mul": (lambda t, a: t.mul(a, a), x),
        "tape/scale": (lambda t, a: t.scale(a, -1.7), x),
        "tape/concat": (lambda t, a: t.concat([a, t.tanh(a)]), x),
        "tape/slice": (lambda t, a: t.slice_channels(a, 1, 2), x),
        "tape/leaky_relu": (lambda t, a: t.leaky_relu(a, 0.1), x),
        "tape/tanh": (lambda t, a: t.tanh(a), x),
        "tape/sigmoid": (lambda t, a: t.sigmoid(a), x),
        "tape/upsample": (lambda t, a: t.upsample(a, 2), x),
        "tape/conv2d_input": (lambda t, a: t.conv2d(a, t.constant(wts), t.constant(bias), stride=2), x),
        "tape/conv2d_weight": (lambda t, a: t.conv2d(t.constant(x), a, t.constant(bias)), wts),
        "tape/conv2d_bias": (lambda t, a: t.conv2d(t.constant(x), t.constant(wts), a), bias),
        "tape/bilinear_grid": (lambda t, a: t.bilinear_sample(t.constant(x), a), grid),
        "tape/bilinear_image": (lambda t, a: t.bilinear_sample(a, t.constant(grid)), x),
    }
    for name, (build, x0) in ops.items():
        proj = None

        def f(val):
            t = autodiff.Tape()
            return float(np.vdot(build(t, t.constant(val)).value, proj))

        tape = autodiff.Tape()
        var = tape.variable(x0.copy())
        out = build(tape, var)
        proj = rng.standard_normal(out.shape)
        tape.backward(tape.sum(tape.mul(out, tape.constant(proj))))
        hstep = _grid_step(n) if name == "tape/bilinear_grid" else 1e-4
        errs[name] = _directional(f, var.grad, x0, _unit(rng, x0.shape), hstep)
    return errs


def test_criterion_1_gradient_suite(report):
    t0 = time.perf_counter()
    worst = {}
    n_instances = 0
    for seed in range(100):
        for name, e in _gradient_instance(seed).items():
            worst[name] = max(worst.get(name, 0.0), e)
            n_instances += 1
    seconds = time.perf_counter() - t0
    bad = {k: v for k, v in worst.items() if v > 1e-3}
    ok = not bad and seconds < 120
    report(1, ok, f"{n_instances} checks over 100 instances, {len(worst)} gradients, "
                  f"max rel err {max(worst.values()):.2e}, {seconds:.0f}s" + (f", failing {bad}" if bad else ""))
    assert ok


# ---------------------------------------------------------------------------
# 2. warp recovery


def test_criterion_2_warp_recovery(affine_runs, report):
    pairs, results, seconds = affine_runs
    epes = np.array([_pair_epe(p, r) for p, r in zip(pairs, results)])
    frac = float(np.mean(epes <= 1.5))
    ok = frac >= 0.9 and seconds < 600
    report(2, ok, f"{frac:.0%} of {N_PAIRS} pairs with EPE <= 1.5 px (median {np.median(epes):.3f}, "
                  f"max {epes.max():.3f}), {seconds:.0f}s")
    assert ok


# ---------------------------------------------------------------------------
# 3. cycle improvement


def _cycle_error(p, g_st, g_ts):
    one = np.ones(p.M_s.data.shape)
    return losses.loss_reconstruction(p.I_s, p.I_t, g_st, g_ts, one, one, p.M_s, p.M_t).total


def test_criterion_3_cycle_improvement(affine_runs, report):
    pairs, results, _ = affine_runs
    init = np.array([_cycle_error(p, IDENT, IDENT) for p in pairs])
    final = np.array([_cycle_error(p, r.G_st.coords, r.G_ts.coords) for p, r in zip(pairs, results)])
    passing = final <= 0.1 * init
    ok = bool(passing.all())
    report(3, ok, f"{passing.sum()}/{N_PAIRS} pairs reach <= 0.1x the identity value; identity-init cycle "
                  f"error max {init.max():.3g}, converged mean {final.mean():.4f}")
    assert ok


# ---------------------------------------------------------------------------
# 4. confidence calibration


@pytest.fixture(scope="module")
def occluded_runs():
    pairs = [_affine_pair(i, occlusion=0.25, base=2000) for i in range(N_PAIRS)]
    results, seconds = _solve_all(pairs, DirectSolveConfig())
    return pairs, results, seconds


def test_criterion_4_confidence_calibration(occluded_runs, report):
    pairs, results, _ = occluded_runs
    rhos, gaps = [], []
    for p, r in zip(pairs, results):
        one = np.ones(p.M_s.data.shape)
        rec = losses.loss_reconstruction(p.I_s, p.I_t, r.G_st.coords, r.G_ts.coords, one, one, p.M_s, p.M_t)
        C_s, C_t = np.asarray(r.C_s, np.float64), np.asarray(r.C_t, np.float64)
        M_s, M_t = np.asarray(p.M_s) > 0, np.asarray(p.M_t) > 0
        V_s, V_t = np.asarray(p.V_s) > 0, np.asarray(p.V_t) > 0
        occ_t = M_t & (np.asarray(p.occluder) > 0)
        occ_s = M_s & ~V_s  # source pixels whose counterpart is hidden or out of frame
        rhos.append(calibration(np.concatenate([C_s.ravel(), C_t.ravel()]),
                                np.concatenate([rec.maps["error_s"].ravel(), rec.maps["error_t"].ravel()]),
                                np.concatenate([M_s.ravel(), M_t.ravel()])))
        visible = np.concatenate([C_s[V_s], C_t[V_t]]).mean()
        hidden = np.concatenate([C_s[occ_s], C_t[occ_t]]).mean()
        gaps.append(visible - hidden)
    rho, gap = float(np.mean(rhos)), float(np.mean(gaps))
    ok = rho <= -0.5 and gap >= 0.15
    report(4, ok, f"mean Spearman rho {rho:.3f} (<= -0.5), mean confidence gap visible-occluded {gap:.3f} "
                  f"(>= 0.15); per-pair rho max {max(rhos):.2f}, gap min {min(gaps):.2f}")
    assert ok


# ---------------------------------------------------------------------------
# 5. smoothness


def test_criterion_5_smoothness(affine_runs, report):
    pairs, results, _ = affine_runs
    cfg0 = DirectSolveConfig(weights=replace(LossWeights(), smooth=0.0))
    rough, _ = _solve_all(pairs, cfg0)
    d2_on = np.mean([_second_difference(r.G_st.coords) + _second_difference(r.G_ts.coords) for r in results])
    d2_off = np.mean([_second_difference(r.G_st.coords) + _second_difference(r.G_ts.coords) for r in rough])
    sd_on = np.mean([_dense(p, r) for p, r in zip(pairs, results)])
    sd_off = np.mean([_dense(p, r) for p, r in zip(pairs, rough)])
    drop = 1 - d2_on / d2_off
    degrade = sd_on / sd_off - 1
    ok = drop >= 0.5 and degrade <= 0.2
    report(5, ok, f"second difference drops {drop:.0%} (>= 50%); Synthetic Dense {sd_off:.5f} -> {sd_on:.5f} "
                  f"({degrade:+.0%}, <= +20%)")
    assert ok


# ---------------------------------------------------------------------------
# 6. progressive recipe


def _train_pairs(base, n, size=32):
    cfg = SynthConfig(size=size, seed=base, rotation_max_deg=15, scale_range=(0.9, 1.1), translation_max=0.1)
    return [pair_from_record(synth_record(cfg, i), size) for i in range(n)]


def test_criterion_6_progressive_recipe(tmp_path, report):
    held = _train_pairs(300, 8)
    scores = {"i": [], "iii": [], "iv": []}
    for seed in range(3):
        cfg = TrainConfig(budgets={"i": 500, "ii": 200, "iii": 200, "iv": 200}, learning_rate=1e-3,
                          batch_size=4, eval_every=100, seed=seed)
        model = TinyPredictor(PredictorConfig(base_channels=8, seed=seed))
        res = train_predictor(_train_pairs(100 + seed, 48), _train_pairs(200 + seed, 48), cfg, model,
                              checkpoint_dir=tmp_path / f"seed{seed}")
        for stage in scores:
            scores[stage].append(evaluate_dense(load_checkpoint(res.checkpoints[stage])[0], held))
    med = {k: float(np.median(v)) for k, v in scores.items()}
    ok = med["iv"] < med["iii"] < med["i"]
    per_seed = "; ".join(f"{k}: " + ", ".join(f"{v:.5f}" for v in vals) for k, vals in scores.items())
    report(6, ok, f"median held-out Synthetic Dense i {med['i']:.5f} > iii {med['iii']:.5f} > iv {med['iv']:.5f} "
                  f"({per_seed})")
    assert ok


# ---------------------------------------------------------------------------
# 7. metric units


def test_criterion_7_metric_units(report):
    checks = {}
    pts = np.random.default_rng(0).uniform(0, 100, (5, 2))
    checks["pck perfect"] = pck(pts, pts, 0.1, 100, 100) == 1.0
    gt = np.zeros((4, 2))
    checks["pck 5/9/11/20"] = pck(np.array([[5.0, 0], [0, 9.0], [11.0, 0], [12.0, 16.0]]), gt, 0.1, 100, 100) == 0.5
    checks["pck at R"] = pck(np.array([[10.0, 0.0]]), gt[:1], 0.1, 100, 100) == 1.0
    checks["pck past R"] = pck(np.array([[10.0 + 1e-9, 0.0]]), gt[:1], 0.1, 100, 100) == 0.0
    p = _affine_pair(0)
    checks["dense gt-on-gt"] = synthetic_dense(p.G_st, p.G_ts, p.G_st, p.G_ts, p.I_s, p.I_t, p.V_s, p.V_t) <= 1e-6
    off = IDENT.copy()
    off[0] += 0.1
    checks["epe 3.15 px"] = abs(end_point_error(off, IDENT, np.ones((SIZE, SIZE)), SIZE, SIZE) - 3.15) <= 1e-3
    ok = all(checks.values())
    report(7, ok, ", ".join(f"{k}: {'ok' if v else 'FAIL'}" for k, v in checks.items()))
    assert ok


# ---------------------------------------------------------------------------
# 8. determinism and formats


def _tree_bytes(root):
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_criterion_8_determinism_and_formats(tmp_path, report):
    generate_dataset(3, SynthConfig(size=32, seed=5, occlusion_fraction=0.1), tmp_path / "origin")
    manifest = load_manifest(tmp_path / "origin")
    runs = []
    for name in ("a", "b"):
        root = tmp_path / name
        regenerate(manifest, root / "data")
        assert cli_main(["solve", "--data", str(root / "data"), "--out", str(root / "pred"), "--iterations", "20",
                         "--levels", "2"]) == 0
        assert cli_main(["eval", "--data", str(root / "data"), "--pred", str(root / "pred"),
                         "--out", str(root / "eval")]) == 0
        runs.append(_tree_bytes(root))
    pipeline = runs[0] == runs[1] and len(runs[0]) > 0

    rng = np.random.default_rng(8)
    grid = rng.standard_normal((2, 17, 23)).astype(np.float32)
    save_grid(SamplingGrid(grid), tmp_path / "g.wgrd")
    back = load_grid(tmp_path / "g.wgrd").coords
    save_grid(SamplingGrid(back), tmp_path / "g2.wgrd")
    wgrd = back.tobytes() == grid.tobytes() and (tmp_path / "g.wgrd").read_bytes() == (tmp_path / "g2.wgrd").read_bytes()

    model = TinyPredictor(PredictorConfig(base_channels=4, seed=3))
    model.params = {k: v + rng.standard_normal(v.shape).astype(np.float32) for k, v in model.params.items()}
    save_checkpoint(model, tmp_path / "m.wckp", {"stage": "iv"})
    loaded, _ = load_checkpoint(tmp_path / "m.wckp")
    save_checkpoint(loaded, tmp_path / "m2.wckp", {"stage": "iv"})
    wckp = all(loaded.params[k].tobytes() == model.params[k].tobytes() for k in model.params) and \
        (tmp_path / "m.wckp").read_bytes() == (tmp_path / "m2.wckp").read_bytes()

    ok = pipeline and wgrd and wckp
    report(8, ok, f"pipeline rerun byte-identical over {len(runs[0])} files: {pipeline}; "
                  f"WGRD bit-exact: {wgrd}; WCKP bit-exact: {wckp}")
    assert ok
