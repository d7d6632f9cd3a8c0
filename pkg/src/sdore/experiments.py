"""Experiment execution: per-(variant, seed) training cells, metric
evaluation against truth handles, report assembly, and the closed-form
ridge oracle used to validate training end to end.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from . import __version__
from .errors import ContractViolation
from .estimators import (ThresholdRule, derivative_norms, recover_source,
                         rel_l2_error, select_variables, selection_error)
from .model import Ensemble, init_network, predict, predict_jet_arrays
from .problems import (EvalConfig, ExperimentDef, GeneratedData, NetworkConfig,
                       ProblemSpec, _rng)
from .training import LossSpec, TrainConfig, train

Array = np.ndarray

_METRIC_KEYS = ("rmse", "rmse_std", "rel_l2_f", "rel_l2_grad", "rel_l2_source",
                "selection_error")


def _sub_seed(seed: int, tag: int) -> int:
    return int(np.random.SeedSequence([int(seed), tag]).generate_state(1)[0])


def ridge_oracle(X, y, lam) -> Array:
    """Closed-form minimizer of ``mean((X theta - y)^2) + lam ||theta||^2``:
    ``theta = (X^T X / n + lam I)^{-1} X^T y / n``."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    n, d = X.shape
    A = X.T @ X / n + lam * np.eye(d)
    b = X.T @ y / n
    try:
        return np.linalg.solve(A, b)
    except np.linalg.LinAlgError as exc:
        raise ContractViolation(f"singular ridge system (lam={lam})") from exc


def rate_slope(ns, errors) -> float:
    """Least-squares slope of log(error) against log(n)."""
    ns = np.asarray(ns, dtype=np.float64)
    errors = np.asarray(errors, dtype=np.float64)
    if ns.size < 3 or ns.size != errors.size:
        raise ContractViolation("need >= 3 matched (n, error) pairs")
    if np.any(ns <= 0) or np.any(errors <= 0):
        raise ContractViolation("rate slope needs positive sizes and errors")
    return float(np.polyfit(np.log(ns), np.log(errors), 1)[0])


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------


def _grid1d(lo, hi, k):
    return np.linspace(lo, hi, k)[:, None]


def _grid2d(bounds, k):
    gx = np.linspace(bounds[0][0], bounds[0][1], k)
    gy = np.linspace(bounds[1][0], bounds[1][1], k)
    X1, X2 = np.meshgrid(gx, gy, indexing="ij")
    return np.stack([X1.ravel(), X2.ravel()], axis=1)


def _grid2d_midpoint(bounds, k):
    """Cell-center grid: the midpoint quadrature for L2 norms under the
    uniform measure (an endpoint grid double-weights the domain boundary)."""
    axes = []
    for lo, hi in bounds:
        c = lo + (hi - lo) * (np.arange(k) + 0.5) / k
        axes.append(c)
    X1, X2 = np.meshgrid(axes[0], axes[1], indexing="ij")
    return np.stack([X1.ravel(), X2.ravel()], axis=1)


def _test_rmse(problem: ProblemSpec, model, ev: EvalConfig, seed: int):
    """Mean and stddev of per-set RMSE over fresh noisy test sets."""
    rng_x = _rng(seed, 31)
    rng_n = _rng(seed, 32)
    sigma = problem.resolve_sigma()
    vals = []
    for _ in range(ev.test_sets):
        X = problem.mu_sampler(rng_x, ev.test_size)
        y = problem.f0(X)
        if sigma > 0:
            y = y + sigma * rng_n.standard_normal(ev.test_size)
        pred = predict(model, X)
        vals.append(float(np.sqrt(np.mean((pred - y) ** 2))))
    vals = np.asarray(vals)
    return float(vals.mean()), float(vals.std(ddof=0))


def _evaluate(problem: ProblemSpec, model, data: GeneratedData,
              ev: EvalConfig, seed: int) -> dict:
    out = {k: None for k in _METRIC_KEYS}
    out["norms"] = None
    out["selected"] = None
    kind = problem.eval_kind

    if kind == "csv":
        pred = predict(model, data.holdout.X)
        out["rmse"] = float(np.sqrt(np.mean((pred - data.holdout.Y) ** 2)))
        out["rmse_std"] = 0.0
        norms = derivative_norms(model, data.labeled.X)
        sel = select_variables(norms, ThresholdRule(c=ev.selection_c))
        out["norms"] = norms
        out["selected"] = sorted(sel.relevant)
        return out

    out["rmse"], out["rmse_std"] = _test_rmse(problem, model, ev, seed)

    if kind == "curve1d":
        lo, hi = problem.domain[0]
        Xg = _grid1d(lo, hi, ev.grid_points)
        out["rel_l2_f"] = rel_l2_error(predict(model, Xg), problem.f0(Xg))
        span = hi - lo
        Xi = _grid1d(lo + ev.interior_margin * span, hi - ev.interior_margin * span,
                     int(ev.grid_points * (1 - 2 * ev.interior_margin)))
        _, grads, _ = predict_jet_arrays(model, Xi, order=1)
        out["rel_l2_grad"] = rel_l2_error(grads, problem.grad_f0(Xi))
        return out

    if kind == "inverse":
        Xg = _grid2d_midpoint(problem.domain, ev.grid_points_2d)
        values, grads, _ = predict_jet_arrays(model, Xg, order=1)
        out["rel_l2_f"] = rel_l2_error(values, problem.f0(Xg))
        out["rel_l2_grad"] = rel_l2_error(grads, problem.grad_f0(Xg))
        mrg = ev.source_margin
        bounds = tuple((lo + mrg * (hi - lo), hi - mrg * (hi - lo))
                       for lo, hi in problem.domain)
        Xs = _grid2d(bounds, ev.source_grid)
        rec = recover_source(model, problem.potential, Xs)
        out["rel_l2_source"] = rel_l2_error(rec.f_hat_values, problem.source(Xs))
        return out

    # selection problems
    sample = data.unlabeled.Z if data.unlabeled is not None else data.labeled.X
    norms = derivative_norms(model, sample)
    sel = select_variables(norms, ThresholdRule(c=ev.selection_c))
    out["norms"] = norms
    out["selected"] = sorted(sel.relevant)
    if problem.relevant is not None:
        out["selection_error"] = selection_error(sel.relevant, problem.relevant,
                                                 problem.d)
    if problem.f0 is not None:
        Xe = problem.mu_sampler(_rng(seed, 33), ev.mc_eval_points)
        values, grads, _ = predict_jet_arrays(model, Xe, order=1)
        out["rel_l2_f"] = rel_l2_error(values, problem.f0(Xe))
        if problem.grad_f0 is not None:
            out["rel_l2_grad"] = rel_l2_error(grads, problem.grad_f0(Xe))
    return out


# ---------------------------------------------------------------------------
# Runner
# ---------------------------------------------------------------------------


def variant_label(spec: LossSpec) -> str:
    return f"{spec.variant.value}_lam{spec.lam:g}"


@dataclass
class ExperimentReport:
    experiment: str
    rows: list[dict]
    aggregates: dict
    sigma: float
    config: dict
    norm_count: int = 0

    def validate_aggregates(self):
        if self.aggregates != aggregate_rows(self.rows):
            raise AssertionError("aggregates do not match their rows")
        return self

    def csv_header(self):
        head = ["variant", "lambda", "seed", *_METRIC_KEYS, "selected"]
        head += [f"norm_{k + 1}" for k in range(self.norm_count)]
        return head

    def to_csv(self, path):
        head = self.csv_header()
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(",".join(head) + "\n")
            for row in self.rows:
                cells = [row["variant"], repr(row["lambda"]), str(row["seed"])]
                for key in _METRIC_KEYS:
                    v = row.get(key)
                    cells.append("" if v is None else repr(v))
                sel = row.get("selected")
                cells.append("" if sel is None else ";".join(str(s) for s in sel))
                norms = row.get("norms")
                for k in range(self.norm_count):
                    cells.append("" if norms is None else repr(float(norms[k])))
                fh.write(",".join(cells) + "\n")

    def to_json_dict(self, extra=None):
        rows = []
        for row in self.rows:
            r = {k: row.get(k) for k in ("variant", "lambda", "seed", *_METRIC_KEYS)}
            r["selected"] = row.get("selected")
            norms = row.get("norms")
            r["norms"] = None if norms is None else [float(x) for x in norms]
            rows.append(r)
        doc = {
            "experiment": self.experiment,
            "package_version": __version__,
            "sigma": self.sigma,
            "config": self.config,
            "rows": rows,
            "aggregates": self.aggregates,
        }
        if extra:
            doc.update(extra)
        return doc

    def to_json(self, path, extra=None):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json_dict(extra), fh, indent=2, sort_keys=True)
            fh.write("\n")


def aggregate_rows(rows):
    """Per-variant mean/std of every scalar metric, recomputable from rows."""
    order = []
    for row in rows:
        label = row["variant_label"] if "variant_label" in row else row["variant"]
        if label not in order:
            order.append(label)
    out = {}
    for label in order:
        group = [r for r in rows if r.get("variant_label", r["variant"]) == label]
        agg = {}
        for key in _METRIC_KEYS:
            vals = [r[key] for r in group if r.get(key) is not None]
            if vals:
                arr = np.asarray(vals, dtype=np.float64)
                agg[key] = {"mean": float(arr.mean()), "std": float(arr.std(ddof=0))}
        out[label] = agg
    return out


@dataclass
class ExperimentResult:
    report: ExperimentReport
    fits: dict  # (variant_label, seed) -> (model, history)


def _init_model(problem: ProblemSpec, network: NetworkConfig, seed: int):
    dims = network.layer_dims(problem.d)
    if network.ensemble_size > 1:
        members = [init_network(dims, _sub_seed(seed, 210 + k),
                                network.bias_scale, network.init)
                   for k in range(network.ensemble_size)]
        return Ensemble(members)
    return init_network(dims, _sub_seed(seed, 21), network.bias_scale, network.init)


def _run_cell(problem, variant, seed, train_config, eval_config, network):
    data = problem.generate(seed)
    if network.ensemble_size > 1 and network.independent_members:
        # convex-combination estimator: equal-weight average of members
        # trained independently (own init and batching randomness)
        dims = network.layer_dims(problem.d)
        members = []
        history = None
        for k in range(network.ensemble_size):
            net = init_network(dims, _sub_seed(seed, 210 + k),
                               network.bias_scale, network.init)
            tc = replace(train_config, seed=_sub_seed(seed, 220 + k))
            member, hist = train(net, data.labeled, data.unlabeled, variant, tc)
            members.append(member)
            history = hist if history is None else history
        fitted = Ensemble(members)
    else:
        model0 = _init_model(problem, network, seed)
        tc = replace(train_config, seed=_sub_seed(seed, 22))
        fitted, history = train(model0, data.labeled, data.unlabeled, variant, tc)
    metrics = _evaluate(problem, fitted, data, eval_config, seed)
    row = {"variant": variant.variant.value, "variant_label": variant_label(variant),
           "lambda": variant.lam, "seed": seed, **metrics}
    return row, fitted, history, data.sigma


def run_experiment(problem: ProblemSpec, variants: list[LossSpec], seeds,
                   train_config: TrainConfig | None = None,
                   eval_config: EvalConfig | None = None,
                   network: NetworkConfig | None = None,
                   threads: int = 1,
                   config_echo: dict | None = None) -> ExperimentResult:
    """Train and evaluate every (variant, seed) cell.

    Cells are independent; with ``threads > 1`` they run on a thread pool,
    but rows are always assembled in the canonical (variant, seed) order and
    every cell derives its randomness from its own seed, so results do not
    depend on the thread count.
    """
    train_config = train_config or TrainConfig()
    eval_config = eval_config or EvalConfig()
    network = network or NetworkConfig()
    seeds = list(seeds)
    cells = [(v, s) for v in variants for s in seeds]

    def task(cell):
        v, s = cell
        return _run_cell(problem, v, s, train_config, eval_config, network)

    if threads > 1 and len(cells) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(task, cells))
    else:
        results = [task(c) for c in cells]

    rows = [r[0] for r in results]
    fits = {(r[0]["variant_label"], r[0]["seed"]): (r[1], r[2]) for r in results}
    sigma = results[0][3] if results else 0.0
    report = ExperimentReport(
        experiment=problem.name,
        rows=rows,
        aggregates=aggregate_rows(rows),
        sigma=sigma,
        config=config_echo or {},
        norm_count=(problem.d if any(r.get("norms") is not None for r in rows) else 0),
    )
    return ExperimentResult(report, fits)


def run_experiment_def(exp: ExperimentDef, seeds, threads: int = 1,
                       config_echo: dict | None = None) -> ExperimentResult:
    return run_experiment(exp.problem, exp.variants, seeds, exp.train, exp.eval,
                          exp.network, threads, config_echo)


# ---------------------------------------------------------------------------
# Plot-data emission (delimited files for external plotting)
# ---------------------------------------------------------------------------


def write_plot_data(problem: ProblemSpec, model, eval_config: EvalConfig, path):
    """Write per-point curve/field/norm data for one fitted model as CSV."""
    kind = problem.eval_kind
    with open(path, "w", encoding="utf-8") as fh:
        if kind == "curve1d":
            lo, hi = problem.domain[0]
            Xg = _grid1d(lo, hi, eval_config.grid_points)
            values, grads, _ = predict_jet_arrays(model, Xg, order=1)
            truth = problem.f0(Xg)
            dtruth = problem.grad_f0(Xg)[:, 0]
            fh.write("x,f_true,f_hat,df_true,df_hat\n")
            for i in range(Xg.shape[0]):
                cells = (Xg[i, 0], truth[i], values[i], dtruth[i], grads[i, 0])
                fh.write(",".join(repr(float(v)) for v in cells) + "\n")
        elif kind == "inverse":
            Xg = _grid2d(problem.domain, eval_config.source_grid)
            values, _, _ = predict_jet_arrays(model, Xg, order=2)
            rec = recover_source(model, problem.potential, Xg)
            u_true = problem.f0(Xg)
            f_true = problem.source(Xg)
            fh.write("x1,x2,u_true,u_hat,f_true,f_hat\n")
            for i in range(Xg.shape[0]):
                cells = (Xg[i, 0], Xg[i, 1], u_true[i], values[i], f_true[i],
                         rec.f_hat_values[i])
                fh.write(",".join(repr(float(v)) for v in cells) + "\n")
        else:  # selection / csv: per-variable derivative norms
            if problem.fixed_data is not None:
                sample = problem.fixed_data[0]
            else:
                sample = problem.mu_sampler(_rng(0, 34), eval_config.mc_eval_points)
            norms = derivative_norms(model, sample)
            names = problem.feature_names or [f"x{k + 1}" for k in range(problem.d)]
            fh.write("variable,name,derivative_norm\n")
            for k in range(problem.d):
                fh.write(f"{k + 1},{names[k]},{float(norms[k])!r}\n")
