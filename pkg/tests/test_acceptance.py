"""Acceptance gate: every criterion at its stated tolerance, one printed
pass/fail line per check (run with ``-s`` to see them on success).

The slow inverse-problem table reproduction carries the ``slow`` marker;
everything else runs in a few minutes. All checks are deterministic given
the seeds fixed here.
"""

import time

import numpy as np
import pytest

from sdore.autodiff import forward_jet, jet_arrays
from sdore.estimators import recover_source, rel_l2_error
from sdore.experiments import (_grid2d, rate_slope, ridge_oracle,
                               run_experiment, run_experiment_def)
from sdore.model import init_network, predict, predict_jet_arrays
from sdore.problems import (EvalConfig, NetworkConfig, build_experiment,
                            curve1d_problem, inverse_problem)
from sdore.training import (LabeledSet, LossSpec, TrainConfig, UnlabeledSet,
                            Variant, build_loss, train)

from conftest import rel_err, sample_clear_points


def _report(name, ok, detail=""):
    status = "PASS" if ok else "FAIL"
    print(f"ACCEPTANCE {name}: {status}  {detail}")
    return ok


# -------------------------------------------------------------------------
# 1. Autodiff correctness (property-based, runtime < 1 minute)
# -------------------------------------------------------------------------


def _plain_loss(weights, biases, X, y, P, lam):
    """Straight-line recomputation of the penalized loss, no tape."""

    def value(h):
        last = len(weights) - 1
        for l, (w, b) in enumerate(zip(weights, biases)):
            h = h @ w.T + b
            if l < last:
                h = np.square(np.maximum(h, 0.0))
        return h[:, 0]

    def gsq(h):
        n, d = h.shape
        J = None
        last = len(weights) - 1
        for l, (w, b) in enumerate(zip(weights, biases)):
            z = h @ w.T + b
            Jz = w.T[None] if J is None else J @ w.T
            if l == last:
                return np.sum(np.broadcast_to(Jz[:, :, 0], (n, d)) ** 2, axis=1)
            h = np.square(np.maximum(z, 0.0))
            J = (2.0 * np.maximum(z, 0.0))[:, None, :] * Jz

    return float(np.mean((value(X) - y) ** 2)) + lam * float(np.mean(gsq(P)))


def test_criterion_1_autodiff_property():
    started = time.time()
    rng = np.random.default_rng(20260810)
    h = 1e-4
    lam = 0.37
    worst_in, worst_par, worst_hes = 0.0, 0.0, 0.0
    checked = 0
    trials = 0
    while checked < 100 and trials < 200:
        trials += 1
        d = int(rng.integers(1, 6))
        widths = [int(rng.integers(2, 17)) for _ in range(int(rng.integers(2, 5)))]
        net = init_network([d] + widths + [1],
                           seed=int(rng.integers(2**31)), bias_scale=1.0)
        try:
            pts = sample_clear_points(net, rng, 7)
        except BaseException:
            continue
        x = pts[0]
        jet = forward_jet(net, x, order=2)
        fd_grad = np.empty(d)
        for k in range(d):
            e = np.zeros(d)
            e[k] = h
            fd_grad[k] = (predict(net, (x + e)[None])[0]
                          - predict(net, (x - e)[None])[0]) / (2 * h)
        worst_in = max(worst_in, rel_err(jet.grad, fd_grad))

        fd_div = 0.0
        for k in range(d):
            e = np.zeros(d)
            e[k] = h
            fd_div += (jet_arrays(net, (x + e)[None], 1)[1][0, k]
                       - jet_arrays(net, (x - e)[None], 1)[1][0, k]) / (2 * h)
        trace = float(np.trace(jet.hess))
        worst_hes = max(worst_hes, abs(trace - fd_div) / max(abs(trace), 1e-6))

        X, P = pts[1:6], pts[2:7]
        y = rng.standard_normal(5)
        bound = build_loss(net, X, y, P, lam)
        analytic = np.concatenate([g.ravel() for g in bound.parameter_gradients()])
        arrays = list(net.weights) + list(net.biases)
        fd = []
        for a in arrays:
            fa = a.ravel()
            out = np.empty_like(fa)
            for i in range(fa.size):
                keep = fa[i]
                fa[i] = keep + h
                up = _plain_loss(net.weights, net.biases, X, y, P, lam)
                fa[i] = keep - h
                dn = _plain_loss(net.weights, net.biases, X, y, P, lam)
                fa[i] = keep
                out[i] = (up - dn) / (2 * h)
            fd.append(out)
        worst_par = max(worst_par, rel_err(analytic, np.concatenate(fd)))
        checked += 1
    elapsed = time.time() - started
    ok = (checked == 100 and worst_in < 1e-5 and worst_par < 1e-4
          and worst_hes < 1e-4 and elapsed < 60)
    assert _report(
        "1 autodiff-gradients", ok,
        f"nets={checked} input={worst_in:.2e} param={worst_par:.2e} "
        f"hess={worst_hes:.2e} time={elapsed:.0f}s")


# -------------------------------------------------------------------------
# 2. Ridge-oracle equivalence (runtime < 1 minute)
# -------------------------------------------------------------------------


def test_criterion_2_ridge_equivalence():
    started = time.time()
    rng = np.random.default_rng(11)
    lams = [1e-3, 1e-1, 1.0]
    worst = 0.0
    n = 200
    for i in range(20):  # 20 instances, lambda set cycled across them
        d = 2 + i % 9
        lam = lams[i % 3]
        X = rng.standard_normal((n, d))
        theta0 = rng.standard_normal(d)
        y = X @ theta0 + 0.3 * rng.standard_normal(n)
        X = X - X.mean(axis=0)
        y = y - y.mean()
        target = ridge_oracle(X, y, lam)
        net = init_network([d, 1], seed=i)
        cfg = TrainConfig(learning_rate=0.05, batch_size=n, epochs=3000,
                          seed=i, lr_decay=np.exp(np.log(2e-6) / 3000))
        fitted, _ = train(net, LabeledSet(X, y), UnlabeledSet(X),
                          LossSpec(Variant.SDORE, lam), cfg)
        err = float(np.linalg.norm(fitted.weights[0][0] - target)
                    / np.linalg.norm(target))
        worst = max(worst, err)
    elapsed = time.time() - started
    ok = worst < 1e-4 and elapsed < 60
    assert _report("2 ridge-equivalence", ok,
                   f"20 instances, worst rel err {worst:.2e}, time={elapsed:.0f}s")


# -------------------------------------------------------------------------
# 3. 1-D curve reproduction: n=500, m=5000, lambda=1e-3
# -------------------------------------------------------------------------


def test_criterion_3_curve_reproduction():
    exp = build_experiment("example6_1")
    assert (exp.problem.n, exp.problem.m, exp.variants[0].lam) == (500, 5000, 1e-3)
    result = run_experiment_def(exp, seeds=[0, 1, 2, 3, 4])
    hits = sum(1 for r in result.report.rows
               if r["rel_l2_f"] < 0.05 and r["rel_l2_grad"] < 0.15)
    detail = "; ".join(f"seed{r['seed']}: f={r['rel_l2_f']:.3f} "
                       f"df={r['rel_l2_grad']:.3f}" for r in result.report.rows)
    assert _report("3 curve-1d", hits >= 4, f"{hits}/5 seeds pass ({detail})")


# -------------------------------------------------------------------------
# 4. Selection consistency: d=20, n=100, m=1000, lambda=1e-2
# -------------------------------------------------------------------------


def test_criterion_4_selection_consistency():
    exp = build_experiment("example6_2")
    assert exp.problem.d == 20 and exp.problem.n == 100 and exp.problem.m == 1000
    assert all(v.lam == 1e-2 for v in exp.variants)
    seeds = list(range(10))
    result = run_experiment_def(exp, seeds=seeds)
    sdore = [r for r in result.report.rows if r["variant"] == "SDORE"]
    dore = [r for r in result.report.rows if r["variant"] == "DORE"]
    exact = sum(1 for r in sdore if r["selection_error"] == 0.0)
    mean_sdore = np.mean([r["selection_error"] for r in sdore])
    mean_dore = np.mean([r["selection_error"] for r in dore])
    ok = exact >= 8 and mean_sdore <= mean_dore
    assert _report(
        "4 selection", ok,
        f"exact {exact}/10; mean sel err SDORE={mean_sdore:.4f} "
        f"DORE={mean_dore:.4f}")


# -------------------------------------------------------------------------
# 5. Inverse-problem error table (slow suite)
# -------------------------------------------------------------------------

_TABLE_SEED = 2  # fixed acceptance seed; results are deterministic in it
_PAPER_GRAD_ERR_1E8 = 3.10e-2


def _table_row(sigma, lams, seed):
    exp = build_experiment("example6_3", {"sigma": sigma, "lambdas": list(lams)})
    exp.eval.test_sets = 3
    result = run_experiment_def(exp, seeds=[seed])
    return {r["lambda"]: r["rel_l2_grad"] for r in result.report.rows}


@pytest.mark.slow
def test_criterion_5_inverse_table():
    lams = [1e-2, 1e-4, 1e-6, 1e-8, 0.0]
    row10 = _table_row(0.10, lams, _TABLE_SEED)
    detail10 = " ".join(f"lam={l:g}:{row10[l]:.4f}" for l in lams)
    print(f"ACCEPTANCE 5 table sigma=10%: {detail10}")

    within2 = _PAPER_GRAD_ERR_1E8 / 2 <= row10[1e-8] <= _PAPER_GRAD_ERR_1E8 * 2
    ordering = row10[1e-8] < row10[0.0]
    worst_row = row10[1e-2] == max(row10.values())
    _report("5a grad-err at lam=1e-8 within 2x of 3.10e-2", within2,
            f"got {row10[1e-8]:.4f}, band [{_PAPER_GRAD_ERR_1E8/2:.4f}, "
            f"{_PAPER_GRAD_ERR_1E8*2:.4f}]")
    _report("5b lam=1e-8 better than lam=0", ordering,
            f"{row10[1e-8]:.4f} vs {row10[0.0]:.4f}")
    _report("5c lam=1e-2 worst of row", worst_row, detail10)

    row20 = _table_row(0.20, lams, _TABLE_SEED)
    detail20 = " ".join(f"lam={l:g}:{row20[l]:.4f}" for l in lams)
    print(f"ACCEPTANCE 5 table sigma=20%: {detail20}")
    best_pen = min(v for l, v in row20.items() if l > 0)
    sigma20_ok = best_pen <= row20[0.0]
    _report("5d sigma=20% best penalized <= lam=0", sigma20_ok,
            f"best penalized {best_pen:.4f} vs lam=0 {row20[0.0]:.4f}")
    assert within2 and ordering and worst_row and sigma20_ok


# -------------------------------------------------------------------------
# 6. Source recovery against the symbolic truth (noiseless fit)
# -------------------------------------------------------------------------


def test_criterion_6_source_recovery_symbolic():
    prob = inverse_problem(n=10000, sigma=0.0, lam=1e-8)
    data = prob.generate(0)
    net = init_network([2, 64, 64, 1], seed=0, style="fan_in")
    cfg = TrainConfig(epochs=1500, batch_size=128, seed=0,
                      lr_decay=np.exp(np.log(1e-2) / 1500))
    fitted, _ = train(net, data.labeled, None, LossSpec(Variant.DORE, 1e-8), cfg)

    grid = _grid2d(((0.1, 0.9), (0.1, 0.9)), 64)
    rec = recover_source(fitted, prob.potential, grid)
    # symbolic oracle, written out independently of the generator:
    # u* = cos(2 pi x1) cos(3 pi x2); -lap(u*) = (4+9) pi^2 u*; w = 3 pi^2
    truth = 16.0 * np.pi**2 * np.cos(2 * np.pi * grid[:, 0]) \
        * np.cos(3 * np.pi * grid[:, 1])
    err = rel_l2_error(rec.f_hat_values, truth)
    assert _report("6 source-recovery", err < 0.10,
                   f"rel L2 err {err:.4f} on 64x64 interior grid")


# -------------------------------------------------------------------------
# 7. Error-vs-n rate trend
# -------------------------------------------------------------------------


def test_criterion_7_rate_trend():
    ns = [125, 250, 500, 1000, 2000]
    seeds = [0, 1]
    errors = []
    for n in ns:
        lam = 1e-3 * (n / 500.0) ** (-2.0 / 9.0)  # n^{-s/(d+4s)}, s=2, d=1
        prob = curve1d_problem(n=n, m=10 * n, lam=lam)
        result = run_experiment(
            prob, [LossSpec(Variant.SDORE, lam)], seeds,
            train_config=TrainConfig(epochs=800, batch_size=128),
            eval_config=EvalConfig(test_sets=3),
            network=NetworkConfig())
        errors.append(np.mean([r["rel_l2_f"] for r in result.report.rows]))
    slope = rate_slope(ns, errors)
    detail = " ".join(f"n={n}:{e:.4f}" for n, e in zip(ns, errors))
    assert _report("7 rate-trend", slope < -0.1,
                   f"slope {slope:.3f} ({detail})")


# -------------------------------------------------------------------------
# 8. Determinism of reports across reruns and thread counts
# -------------------------------------------------------------------------


def test_criterion_8_determinism(tmp_path):
    prob = curve1d_problem(n=40, m=60, lam=1e-3)
    variants = [LossSpec(Variant.SDORE, 1e-3), LossSpec(Variant.LS, 0.0)]
    tc = TrainConfig(epochs=12, batch_size=16)
    ev = EvalConfig(test_sets=3, test_size=20, grid_points=101, mc_eval_points=100)
    nc = NetworkConfig(hidden=[8, 8])
    paths = []
    for tag, threads in (("a", 1), ("b", 1), ("c", 4)):
        result = run_experiment(prob, variants, [0, 1], tc, ev, nc, threads=threads)
        path = tmp_path / f"report_{tag}.csv"
        result.report.to_csv(path)
        paths.append(path.read_bytes())
    ok = paths[0] == paths[1] == paths[2]
    assert _report("8 determinism", ok,
                   "rerun and threads=4 reports byte-identical")
