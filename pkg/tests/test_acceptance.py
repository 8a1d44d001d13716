"""End-to-end acceptance checks; each test records one PASS/FAIL line.

The lines are printed as each check runs (visible with ``-s``) and again in
the terminal summary at the end of the run.  Checks 7-9 share one trained
benchmark: a synthetic year (penetration 0.5, generator seed 7), test fold 4
of a purged 5-fold split, and training seeds 0, 1 and 2.
"""

import time

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from wavecast import tensor as tc
from wavecast import wlmc as wl
from wavecast.data import CurtailmentEvent, SynthConfig, kfold_split, make_windows, synthesize_grid
from wavecast.gradcam import aggregate_variable_importance, gradcam_map
from wavecast.metrics import evaluate, mae, metrics_from_dump, rmse, run_ablation, seasonal_naive, smape
from wavecast.model import (
    COMPLETE,
    VARIANTS,
    WITHOUT_CV,
    WITHOUT_LT,
    ModelConfig,
    TrainConfig,
    WavecastModel,
    load_checkpoint,
    save_checkpoint,
    train,
)
from wavecast.mwkc import mwkc_forward
from wavecast.wavelets import MotherWavelet, build_bank, default_scales

from conftest import ACCEPTANCE
from test_model import TINY, all_params_pass, batch, tiny_dataset, with_positive_biases
from test_wlmc import normal_equations_oracle

BENCH_FOLD = 4
BENCH_SEEDS = (0, 1, 2)
BENCH_EPOCHS = 20
EVENT_SEEDS = (1, 2, 3, 4, 5)


def record(number, ok, detail):
    line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE[number] = line
    print(line)
    assert ok, line


# -- 1. gradients ----------------------------------------------------------------

def _op_graphs(rng):
    def u(*shape):
        return rng.uniform(-1, 1, shape)

    def graph(build):
        g = tc.Graph()
        y = build(g)
        tc.mse_loss(y, g.const(u(*y.shape)))
        return g

    relu_in = u(20)
    relu_in[np.abs(relu_in) < 0.05] = 0.5
    return {
        "conv1d": graph(lambda g: tc.conv1d(g.param(u(2, 4, 11)), g.param(u(6, 2, 3)), stride=2, groups=2)),
        "conv2d": graph(lambda g: tc.conv2d(g.param(u(3, 2, 5, 6)), g.param(u(4, 2, 3, 2)))),
        "affine": graph(lambda g: tc.affine(g.param(u(4, 5)), g.param(u(3, 5)), g.param(u(3)))),
        "relu": graph(lambda g: tc.relu(g.param(relu_in))),
        "softmax": graph(lambda g: tc.softmax(g.param(u(3, 4)))),
        "concat/stack": graph(lambda g: tc.stack([tc.concat([g.param(u(2, 3)), g.param(u(2, 2))], axis=1)] * 2)),
        "add/mul": graph(lambda g: (lambda a, b: tc.mul(tc.add(a, b), b))(g.param(u(3, 4)), g.param(u(1, 4)))),
        "channel_bias": graph(lambda g: tc.channel_bias(g.param(u(2, 3, 4, 5)), g.param(u(3)), spatial=2)),
        "weighted_sum": graph(lambda g: tc.weighted_sum(g.param(u(3)), g.param(u(3, 2, 4)))),
        "bin_pool/reshape": graph(lambda g: tc.reshape(tc.bin_pool(g.param(u(2, 3, 10)), bins=3), (2, 9))),
        "mean/transpose": graph(lambda g: tc.mean(tc.transpose(g.param(u(2, 3, 4)), (2, 0, 1)), axis=1)),
    }


def test_criterion_01_gradients():
    start = time.perf_counter()
    worst = {}
    for name, g in _op_graphs(np.random.default_rng(11)).items():
        worst[name] = max(tc.finite_diff_check(g, g.nodes[pid], 1e-3) for pid in g.params)
    for overrides in ({}, {"variant": WITHOUT_LT}, {"variant": WITHOUT_CV}, {"fusion": "feature"}):
        cfg = ModelConfig(**{**TINY.to_dict(), **overrides})
        m = WavecastModel(cfg, seed=5)
        with_positive_biases(m)
        if "fusion.scores" in m.params:
            m.params["fusion.scores"] = np.random.default_rng(6).uniform(-1, 1, m.params["fusion.scores"].shape)
        errs = all_params_pass(m, batch(cfg, B=2, seed=7), np.random.default_rng(8).normal(size=(2, cfg.S)))
        worst[f"model[{overrides.get('variant', overrides.get('fusion', COMPLETE))}]"] = max(errs.values())
    seconds = time.perf_counter() - start
    top = max(worst.values())
    record(1, top < 1e-4 and seconds < 60,
           f"max relative FD error {top:.2e} over {len(worst)} checks (< 1e-4), {seconds:.1f}s (< 60s)")


# -- 2. width law ------------------------------------------------------------------

@settings(max_examples=60, deadline=None)
@given(T=st.integers(2, 64), k=st.integers(2, 6), n=st.integers(1, 5))
def _width_property(T, k, n):
    if k > T:
        return
    bank = build_bank([MotherWavelet("morlet"), MotherWavelet("mexican_hat")], k, n, 2)
    x = np.random.default_rng(T * 7 + k).normal(size=(n, T))
    g = tc.Graph()
    fused = mwkc_forward(g, x, bank, g.param([0.5, 0.5]), lengths=[k])
    assert fused[k].shape == (n * 2, T - k + 1)


def test_criterion_02_width_law():
    cfg = ModelConfig()
    bank = build_bank(cfg.mother_wavelets, 6, 5, cfg.filters_per_length)
    x = np.random.default_rng(0).normal(size=(5, 24))
    g = tc.Graph()
    fused = mwkc_forward(g, x, bank, g.param([0.5, 0.5]))
    widths = {k: fused[k].shape[-1] for k in range(2, 7)}
    exact = all(w == 24 - k + 1 for k, w in widths.items())
    _width_property()
    record(2, exact, f"N=5, T=24 widths {widths} equal T-k+1; random (T<=64, k) property held")


# -- 3. WLMC oracle ------------------------------------------------------------------

def test_criterion_03_wlmc_oracle():
    rng = np.random.default_rng(2024)
    worst = 0.0
    for _ in range(1000):
        p = int(rng.integers(1, 4))
        T = int(rng.integers(p + 3, 65))
        y = rng.normal(size=T)
        R = rng.normal(size=(p, T))
        w = wl.local_weight_window(int(rng.integers(0, T)), float(rng.uniform(1.0, 20.0)), T)
        fit = wl.local_multiple_regression(y, R, w)
        fitted, r2 = normal_equations_oracle(y, R, w)
        worst = max(worst, abs(fit.r2 - r2), float(np.max(np.abs(fit.fitted - fitted))))
    phi_gap = 0.0
    for _ in range(100):
        q = int(rng.integers(3, 5))
        T = int(rng.integers(16, 65))
        others = rng.normal(size=(q - 1, 2, T))
        coef = rng.uniform(0.5, 2.0, q - 1) * rng.choice([-1, 1], q - 1)
        member = np.tensordot(coef, others, axes=1) + rng.normal()
        coeffs = np.concatenate([others, member[None]])
        phi, _ = wl.wlmc(coeffs, int(rng.integers(0, T)), int(rng.integers(0, 2)), float(rng.uniform(2, 10)))
        phi_gap = max(phi_gap, abs(phi - 1.0))
    record(3, worst < 1e-8 and phi_gap < 1e-8,
           f"1000 instances max deviation {worst:.1e}; affine-member |phi-1| {phi_gap:.1e} (< 1e-8)")


# -- 4. affine invariance ----------------------------------------------------------

def test_criterion_04_affine_invariance():
    rng = np.random.default_rng(99)
    scales = default_scales(4)
    worst, flips = 0.0, 0
    for _ in range(100):
        x = rng.normal(size=(3, 32)).cumsum(axis=1)
        base = wl.build_wlmc_tensor(x, scales, h=6.0)
        y = x.copy()
        v = int(rng.integers(0, 3))
        y[v] = rng.uniform(0.1, 10.0) * y[v] + rng.uniform(-50, 50)
        again = wl.build_wlmc_tensor(y, scales, h=6.0)
        worst = max(worst, float(np.max(np.abs(again.C - base.C))))
        flips += int(np.sum(again.dominant_index() != base.dominant_index()))
    record(4, worst < 1e-8 and flips == 0,
           f"100 trials: max |d phi| {worst:.1e} (< 1e-8), dominant-index changes {flips}")


# -- 5. combination count ----------------------------------------------------------

def test_criterion_05_combinations():
    counts = {n: len(wl.combinations(n)) for n in range(2, 9)}
    ok = all(c == 2 ** n - n - 1 for n, c in counts.items()) and counts[5] == 26
    ok = ok and all(len(set(wl.combinations(n))) == counts[n] for n in counts)
    record(5, ok, f"counts {counts} equal 2^N-N-1 (26 for N=5)")


# -- 6. window count ----------------------------------------------------------------

def test_criterion_06_window_count():
    records = synthesize_grid(SynthConfig(days=4 * 365 + 1, seed=7))
    ds = make_windows(records, 24, 24, 1)
    record(6, len(records) == 35064 and len(ds) == 35017,
           f"{len(records)} hourly records -> {len(ds)} windows (expected 35017)")


# -- 7-9. trained benchmark --------------------------------------------------------

@pytest.fixture(scope="module")
def benchmark():
    ds = make_windows(synthesize_grid(SynthConfig(days=365, penetration=0.5, seed=7)))
    split = kfold_split(len(ds), 5, purge_gap=47)
    start = time.perf_counter()
    result = run_ablation(ds, split, ModelConfig(), TrainConfig(epochs=BENCH_EPOCHS), seeds=BENCH_SEEDS,
                          folds=[BENCH_FOLD], variants=VARIANTS)
    return ds, split, result, time.perf_counter() - start


def test_criterion_07_ablation(benchmark):
    _, _, result, seconds = benchmark
    means = {v: result.mean(v)["mae"] for v in VARIANTS}
    per_seed = {v: [round(r.mean["mae"], 2) for r in result.reports[v]] for v in VARIANTS}
    ok = means[COMPLETE] < means[WITHOUT_LT] and means[COMPLETE] < means[WITHOUT_CV] and seconds < 1800
    record(7, ok, "MAE " + ", ".join(f"{v} {means[v]:.2f} {per_seed[v]}" for v in VARIANTS)
           + f"; {seconds / 60:.1f} min (< 30)")


def test_criterion_08_skill_floor(benchmark):
    ds, split, result, _ = benchmark
    idx = split.test_indices(BENCH_FOLD)
    naive = mae(seasonal_naive(ds.subset(idx)), ds.e[idx])
    model_mae = result.reports[COMPLETE][0].mean["mae"]
    seconds = result.curves[(COMPLETE, 0, BENCH_FOLD)].seconds
    ratio = model_mae / naive
    record(8, ratio <= 0.75 and seconds < 600,
           f"complete MAE {model_mae:.2f} vs seasonal naive {naive:.2f} (ratio {ratio:.3f} <= 0.75), "
           f"trained in {seconds:.0f}s (< 600)")


def test_criterion_09_event_saliency(benchmark):
    _, _, result, _ = benchmark
    model = result.models[(COMPLETE, 0, BENCH_FOLD)]
    hits, details = 0, []
    for seed in EVENT_SEEDS:
        # REG curtailed from 10:00 on day 10; the window puts that hour at input step 16
        onset = 24 * 10 + 10
        records = synthesize_grid(SynthConfig(days=20, seed=seed, events=[CurtailmentEvent(onset, onset + 48, 0.8)]))
        window = make_windows(records).X[onset - 15]
        per_var, per_time = aggregate_variable_importance(gradcam_map(model, window, layer="lt"))
        late, early = per_time[15:].mean(), per_time[:15].mean()
        ok = late > early and per_var[3] > per_var[4]
        hits += ok
        details.append(f"seed {seed}: late {late:.2f}/early {early:.2f}, NEG {per_var[3]:.2f}/temp {per_var[4]:.2f}")
    record(9, hits >= 4, f"{hits}/5 seeds satisfy both ({'; '.join(details)})")


# -- 10. determinism and round trips --------------------------------------------

def test_criterion_10_determinism(tmp_path):
    ds = tiny_dataset(40)
    split = kfold_split(len(ds), 5, purge_gap=TINY.T + TINY.S - 1)
    tcfg = TrainConfig(epochs=4, batch_size=8, seed=3)
    runs = []
    for _ in range(2):
        m = WavecastModel(TINY, seed=3)
        runs.append((m, train(m, ds, split.train_indices(0), tcfg)))
    same_curve = (runs[0][1].train_loss == runs[1][1].train_loss and runs[0][1].val_loss == runs[1][1].val_loss)
    model = runs[0][0]
    save_checkpoint(tmp_path / "m.wvc", model)
    loaded = load_checkpoint(tmp_path / "m.wvc")
    same_pred = np.array_equal(model.predict_dataset(ds), loaded.predict_dataset(ds))
    models = {f: model for f in range(5)}
    report = evaluate(models, ds, split, dump_path=tmp_path / "dump.csv")
    dumped = metrics_from_dump(tmp_path / "dump.csv")
    gap = max(abs(dumped[r["fold"]][m] - r[m]) for r in report.folds for m in ("rmse", "mae", "smape"))
    record(10, same_curve and same_pred and gap <= 1e-9,
           f"curves bitwise equal: {same_curve}; checkpoint predictions bitwise equal: {same_pred}; "
           f"dump recompute gap {gap:.1e} (<= 1e-9)")


# -- 11. metric identities ---------------------------------------------------------

def test_criterion_11_metric_identities(benchmark):
    ds, split, result, _ = benchmark
    reports = [r for reps in result.reports.values() for r in reps]
    jensen = all(row["rmse"] >= row["mae"] for r in reports for row in r.rows())
    rng = np.random.default_rng(5)
    symmetric = True
    for _ in range(200):
        p, a = rng.uniform(0, 900, (2, int(rng.integers(1, 50))))
        symmetric &= abs(smape(p, a) - smape(a, p)) < 1e-12
    idx = split.test_indices(BENCH_FOLD)
    actual = ds.e[idx]
    zeros = rmse(actual, actual) == mae(actual, actual) == smape(actual, actual) == 0.0
    record(11, jensen and symmetric and zeros,
           f"RMSE >= MAE on all {sum(len(r.rows()) for r in reports)} report rows: {jensen}; "
           f"SMAPE symmetric: {symmetric}; perfect oracle all zero: {zeros}")
