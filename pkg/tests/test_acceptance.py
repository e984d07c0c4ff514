"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Criteria 4, 5, 7 and 8 train real models and take most of the run time
(about 30 minutes on one core).  Select them with ``-k`` or skip the module
for a quick run.
"""

import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest
from conftest import record
from test_gp import _problem, dense_nll_oracle, dense_predict_oracle
from test_model import TOY, loop_attention

from attentive_gp import autodiff as ad
from attentive_gp import cli
from attentive_gp.autodiff import Tape
from attentive_gp.config import load
from attentive_gp.data import gen_sin, normalize
from attentive_gp.evaluation import FeatureCache, evaluate
from attentive_gp.gp import (GPHyperparams, InducingGrid, gp_nll, gp_predict, gp_nll_value,
                             kernel_graph, kiss_nll, kiss_solve, kiss_weights, nll_graph)
from attentive_gp.model import (AttentiveGP, as_vars, attention, causal_mask, compute_features,
                                features, shifted_outputs)
from attentive_gp.trainer import (TrainConfig, blockwise_train, descent_monitor, epochs_to_reach,
                                  network_loss, write_trace_csv)

CONFIGS = Path(__file__).resolve().parent.parent / "configs"
FD_TOL = 1e-4


def _cfg(name):
    return load(CONFIGS / f"{name}.cfg")


# -- 1: gradient integrity ---------------------------------------------------


def _op_cases(rng):
    """(name, f(tape, x), x0) for every differentiable operation on the tape."""
    c = lambda *s: rng.standard_normal(s)
    w34, w33, b34, w423, w38, w3 = c(3, 4), c(3, 3), c(4, 3), c(4, 2, 3), c(3, 8), c(3)
    z54, w35, w42, w55, y6, w61 = c(5, 4), c(3, 5), c(4, 2), c(5, 5), c(6), c(6, 1)
    spd = c(4, 4)
    spd = spd @ spd.T + 4 * np.eye(4)
    Lfix = np.linalg.cholesky(spd)
    S = kiss_weights(rng.uniform(-1, 1, (6, 1)), InducingGrid([np.linspace(-1.1, 1.1, 5)])).toarray()
    Kuu = InducingGrid([np.linspace(-1.1, 1.1, 5)]).kuu(GPHyperparams.default(1, 0.6))
    sym = lambda t, x: ad.add(ad.matmul(x, ad.transpose(x)), t.constant(3 * np.eye(3)))
    tot = lambda v, w: ad.total(ad.mul(v, w))
    return [
        ("add", lambda t, x: tot(ad.add(x, t.constant(w34)), w34), c(3, 4)),
        ("sub", lambda t, x: tot(ad.sub(t.constant(w34), x), w34), c(3, 4)),
        ("mul", lambda t, x: tot(ad.mul(x, x), w34), c(3, 4)),
        ("scale", lambda t, x: tot(ad.scale(x, -1.7), w34), c(3, 4)),
        ("neg", lambda t, x: tot(ad.neg(x), w34), c(3, 4)),
        ("relu", lambda t, x: tot(ad.relu(x), w34), c(3, 4) + 0.05 * np.sign(c(3, 4))),
        ("exp", lambda t, x: tot(ad.exp(x), w34), c(3, 4)),
        ("log", lambda t, x: tot(ad.log(x), w34), rng.uniform(0.5, 2.0, (3, 4))),
        ("matmul", lambda t, x: tot(ad.matmul(x, t.constant(b34)), w33), c(3, 4)),
        ("transpose", lambda t, x: tot(ad.transpose(x), b34), c(3, 4)),
        ("permute", lambda t, x: tot(ad.permute(x, (2, 0, 1)), w423), c(2, 3, 4)),
        ("reshape", lambda t, x: tot(ad.reshape(x, (4, 3)), b34), c(3, 4)),
        ("concat", lambda t, x: tot(ad.concat([x, ad.exp(x)], axis=-1), w38), c(3, 4)),
        ("sum", lambda t, x: ad.total(ad.mul(x, x)), c(3, 4)),
        ("diag", lambda t, x: tot(ad.diag(ad.matmul(x, ad.transpose(x))), w3), c(3, 4)),
        ("softmax", lambda t, x: tot(ad.softmax_rows(x), w34), c(3, 4)),
        ("sqdist", lambda t, x: tot(ad.pairwise_sqdist(x, t.constant(z54)), w35), c(3, 4)),
        ("cholesky", lambda t, x: tot(ad.cholesky(sym(t, x)), np.tril(w33)), c(3, 3)),
        ("solve_triangular", lambda t, x: tot(ad.solve_triangular(t.constant(Lfix), x), w42), c(4, 2)),
        ("solve_triangular_T", lambda t, x: tot(ad.solve_triangular(t.constant(Lfix), x, trans=True), w42), c(4, 2)),
        ("kernel", lambda t, x: tot(kernel_graph(x, None, t.constant(np.log([0.7, 1.3]))), w55),
         c(5, 2)),
        ("exact_nll", lambda t, x: nll_graph(t, x, y6, t.constant(np.zeros(2)),
                                             t.constant(np.log(0.1))), c(6, 2)),
        ("kiss_solve", lambda t, x: tot(kiss_solve(t.constant(S), t.constant(Kuu), t.constant(0.3), x), w61), c(6, 1)),
    ]


def _e2e_check(seed):
    """End-to-end NLL (network through GP) on 3 windows of length 4 (N = 12)."""
    rng = np.random.default_rng(seed)
    model = AttentiveGP.init(TOY, seed=seed, noise=0.1)
    x = rng.standard_normal((3, 4, 1))
    y = np.sin(2 * x[..., 0]) + 0.1 * rng.standard_normal((3, 4))
    cfg = TrainConfig()
    loss, gW, gT = network_loss(model, x, y, cfg)
    names = list(model.params)

    def value(vec):
        params, i = {}, 0
        for k in names:
            n = model.params[k].size
            params[k] = vec[i:i + n].reshape(model.params[k].shape)
            i += n
        hyp = GPHyperparams(vec[i:i + TOY.F], float(vec[i + TOY.F]))
        return network_loss(AttentiveGP(TOY, params, hyp), x, y, cfg, want_theta=False)[0]

    vec = np.concatenate([model.params[k].ravel() for k in names]
                         + [np.ravel(model.hyp.log_lengthscales), [model.hyp.log_noise]])
    grad = np.concatenate([gW[k].ravel() for k in names]
                          + [np.ravel(gT["log_lengthscales"]), np.ravel(gT["log_noise"])])
    h = 1e-5
    worst = 0.0
    dirs = [rng.standard_normal(vec.size) for _ in range(3)]
    for i in rng.choice(vec.size, 24, replace=False).tolist() + list(range(vec.size - TOY.F - 1, vec.size)):
        e = np.zeros(vec.size)
        e[i] = 1.0
        dirs.append(e)
    for d in dirs:
        num = (value(vec + h * d) - value(vec - h * d)) / (2 * h)
        ana = float(grad @ d)
        # some derivatives are exactly zero (the kernel ignores a shared feature shift), where
        # central differences return pure roundoff; floor the denominator at that scale
        floor = 1e4 * np.finfo(float).eps * abs(loss) / h
        worst = max(worst, abs(ana - num) / max(abs(ana) + abs(num), floor))
    return worst


def test_criterion_01_gradient_integrity():
    t0 = time.time()
    worst_op, worst_name = 0.0, ""
    for seed in range(10):
        for name, f, x0 in _op_cases(np.random.default_rng(seed)):
            err = ad.finite_diff_check(f, x0)
            if err > worst_op:
                worst_op, worst_name = err, name
    worst_e2e = max(_e2e_check(seed) for seed in range(10))
    secs = time.time() - t0
    ok = worst_op < FD_TOL and worst_e2e < FD_TOL and secs < 60
    record(1, ok, f"ops max rel err {worst_op:.1e} ({worst_name}), end-to-end {worst_e2e:.1e}, "
                  f"{secs:.0f}s")
    assert ok


# -- 2: GP oracle equivalence ------------------------------------------------


def _rel(a, b):
    a, b = np.ravel(a), np.ravel(b)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-300))


def test_criterion_02_gp_oracle():
    worst = 0.0
    for seed in range(20):
        X, y, hyp = _problem(seed)
        ell, noise = np.exp(hyp.log_lengthscales), hyp.noise
        loss, tape, leaves = gp_nll(X, y, hyp)
        gX, gell, gn = tape.gradient(loss, [leaves["X"], leaves["log_lengthscales"], leaves["log_noise"]])
        ref, rX, rell, rn = dense_nll_oracle(X, y, ell, noise)
        Xq = np.random.default_rng(100 + seed).uniform(-2.5, 2.5, (7, X.shape[1]))
        pred = gp_predict(X, y, Xq, hyp)
        rm, rv = dense_predict_oracle(X, y, Xq, ell, noise)
        worst = max(worst, _rel(float(loss.value), ref), _rel(gX, rX), _rel(gell, rell), _rel(gn, rn),
                    _rel(pred.mean, rm), _rel(pred.variance, rv))
    ok = worst < 1e-8
    record(2, ok, f"20 problems, max rel err {worst:.1e}")
    assert ok


# -- 3: attention correctness ------------------------------------------------


def test_criterion_03_attention():
    worst = 0.0
    for seed in range(10):
        rng = np.random.default_rng(seed)
        Qs, Ks = rng.standard_normal((4, 8)), rng.standard_normal((4, 8))
        W = [rng.standard_normal((8, 4)) for _ in range(3)]
        for mask in (None, causal_mask(4)):
            t = Tape()
            out = attention(t.constant(Qs), t.constant(Ks), *map(t.constant, W), mask=mask).value
            ref, _ = loop_attention(Qs.tolist(), Ks.tolist(), *(w.tolist() for w in W),
                                    mask=None if mask is None else True)
            worst = max(worst, float(np.max(np.abs(out - ref))))
    causal_ok = True
    for seed in range(5):
        rng = np.random.default_rng(seed)
        model = AttentiveGP.init(TOY, seed=seed)
        x = rng.standard_normal((1, 4, 1))
        y = rng.standard_normal((1, 4))
        t = Tape()
        p = as_vars(t, model.params)
        ys = t.leaf(shifted_outputs(y))
        feats = features(t, p, TOY, x, ys)
        for i in range(4):
            sel = np.zeros((1, 4, TOY.F))
            sel[0, i] = 1.0
            (g,) = t.gradient(ad.total(ad.mul(feats, sel)), [ys])
            # slot k carries y_{k-1}, so step i may only depend on y_j for j < i
            causal_ok &= bool(np.all(g[0, i + 1:, 0] == 0.0))
        base = compute_features(model.params, TOY, x, y)
        for j in range(4):
            y2 = y.copy()
            y2[0, j] += 1.0
            moved = compute_features(model.params, TOY, x, y2)
            causal_ok &= bool(np.array_equal(moved[0, :j + 1], base[0, :j + 1]))
    ok = worst < 1e-12 and causal_ok
    record(3, ok, f"loop oracle max abs err {worst:.1e}, causal mask exact: {causal_ok}")
    assert ok


# -- 4: out-of-range uncertainty on sin --------------------------------------


def test_criterion_04_sin_extrapolation():
    t0 = time.time()
    cfg = _cfg("sincheck")
    ds, record_ = cli.sincheck_data(cfg)
    gp_model, baseline, _ = cli.sincheck_fit(cfg, ds)
    rows = cli.sincheck_report(gp_model, baseline, ds, record_)
    ratio = cli.sigma_ratio(rows)
    secs = time.time() - t0
    ok = ratio >= 2.0 and secs < 300
    record(4, ok, f"oos / in-sample mean sigma = {ratio:.2f} (need >= 2), {secs:.0f}s")
    assert ok


# -- 5: block-wise vs full-batch ---------------------------------------------


def _compare(name):
    results = cli.compare_trainers(_cfg(name))
    fin_b, fin_f, reach_b, reach_f = [], [], [], []
    for _, tb, tf in results:
        target = cli.final_loss(tf)
        fin_b.append(cli.final_loss(tb))
        fin_f.append(target)
        for trace, out in ((tb, reach_b), (tf, reach_f)):
            r = epochs_to_reach(trace, target)
            out.append(np.inf if r is None else r)
    mb, mf = np.median(fin_b), np.median(fin_f)
    gap = abs(mb - mf) / abs(mf)
    rb, rf = np.median(reach_b), np.median(reach_f)
    per_seed = " ".join(f"{abs(b - f) / abs(f):.2f}" for b, f in zip(fin_b, fin_f))
    return gap, rb, rf, f"{name}: median final {mb:.1f} vs {mf:.1f} (gap {gap:.1%}), " \
                        f"median epochs to reach {rb} vs {rf}; per-seed gaps {per_seed}"


def test_criterion_05_trainer_comparison():
    t0 = time.time()
    lines, ok = [], True
    for name in ("compare_sin", "compare_suspension"):
        gap, rb, rf, line = _compare(name)
        lines.append(line)
        ok &= gap <= 0.05 and rb < rf
    secs = time.time() - t0
    ok &= secs < 1200
    record(5, ok, " | ".join(lines) + f" | {secs:.0f}s")
    assert ok


# -- 6: sufficient-descent diagnostic ----------------------------------------


def test_criterion_06_descent_monitor():
    nds, _ = normalize(gen_sin(256, 0.05, seed=0, L=8))
    model = AttentiveGP.init(replace(_cfg("compare_sin").model), seed=0)
    _, trace = blockwise_train(model, nds.train, TrainConfig(epochs=100, optimizer="sgd", seed=0))
    rep = descent_monitor(trace)
    ok = rep.fraction_ok >= 0.9
    record(6, ok, f"{rep.fraction_ok:.0%} of {rep.window_ok.size} windows satisfy the bound"
                  + ("" if ok else f" (soft; failing windows {rep.failures})"))
    # soft criterion: reported, never fatal


# -- 7 and 8: prediction vs generation, coverage ------------------------------


TASKS = ("sin", "suspension", "load")


@pytest.fixture(scope="module")
def converged_runs():
    """Five seeds per synthetic task: (prediction nrmse, generation nrmse, prediction coverage)."""
    out = {}
    for task in TASKS:
        cfg = _cfg(task)
        ds, _ = cli.prepare_data(cfg)
        runs = []
        for i in range(5):
            seed = cfg.seed + i
            model, _ = blockwise_train(cli._init_model(cfg, seed=seed), ds.train,
                                       replace(cfg.train_config(), seed=seed))
            cache = FeatureCache(model, ds.train)
            _, pn, pc = evaluate(cache, ds.test, "prediction")
            _, gn, _ = evaluate(cache, ds.test, "generation")
            runs.append((pn, gn, pc))
        out[task] = np.array(runs)
    return out


def test_criterion_07_prediction_beats_generation(converged_runs):
    ok, parts = True, []
    for task, r in converged_runs.items():
        pn, gn = r[:, 0].mean(), r[:, 1].mean()
        ok &= pn <= 1.05 * gn
        parts.append(f"{task} {pn:.4f} <= 1.05 x {gn:.4f}")
    record(7, ok, "mean NRMSE over 5 seeds, prediction vs generation: " + "; ".join(parts))
    assert ok


def test_criterion_08_coverage(converged_runs):
    ok, parts = True, []
    for task, r in converged_runs.items():
        cov = r[:, 2].mean()
        ok &= 0.90 <= cov <= 0.99
        parts.append(f"{task} {cov:.3f}")
    record(8, ok, "prediction-mode 2-sigma coverage, mean over 5 seeds (need [0.90, 0.99]): "
                  + "; ".join(parts))
    assert ok


# -- 9: KISS-GP fidelity -----------------------------------------------------


def test_criterion_09_kiss_fidelity():
    worst_nll, worst_row = 0.0, 0.0
    for seed in range(5):
        rng = np.random.default_rng(seed)
        X = rng.uniform(-1, 1, (40, 1))
        y = np.sin(3 * X[:, 0]) + 0.1 * rng.standard_normal(40)
        hyp = GPHyperparams.default(1, lengthscale=0.5, noise=0.05)
        grid = InducingGrid.from_features(X, 160)
        k, _, _ = kiss_nll(X, y, hyp, grid)
        exact = gp_nll_value(X, y, hyp)
        worst_nll = max(worst_nll, abs(float(k.value) - exact) / abs(exact))
        S = kiss_weights(X, grid)
        worst_row = max(worst_row, float(np.max(np.abs(np.asarray(S.sum(axis=1)).ravel() - 1.0))))
    ok = worst_nll < 0.01 and worst_row <= 1e-12
    record(9, ok, f"kiss vs exact NLL max rel diff {worst_nll:.1e}, row-sum err {worst_row:.1e}")
    assert ok


# -- 10: determinism ---------------------------------------------------------


def test_criterion_10_determinism(tmp_path):
    cfg = _cfg("sin")
    cfg = replace(cfg, train=replace(cfg.train, epochs=5))
    ds, _ = cli.prepare_data(cfg)
    same = True
    for trainer in ("blockwise", "fullbatch"):
        blobs = []
        for run in range(2):
            model = cli._init_model(cfg)
            _, trace = cli._run_trainer(trainer, model, ds.train, cfg.train_config())
            path = tmp_path / f"{trainer}{run}.csv"
            write_trace_csv(trace, path)
            blobs.append(path.read_bytes())
        same &= blobs[0] == blobs[1]
    record(10, same, f"two runs per trainer give byte-identical trace CSVs: {same}")
    assert same
