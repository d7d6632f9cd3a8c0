"""Data generators for the built-in experiments, CSV ingestion, and the
experiment registry.

Every generator is a pure function of its sizes and seed.  Noise levels
given as a signal-to-noise ratio are resolved to an absolute sigma as
``stddev(f0 over 1e5 fresh draws) / snr``; the draw uses a fixed internal
seed so sigma is a property of the problem, not of the run seed.  The
resolved value is recorded in report metadata.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import ConfigError, ContractViolation
from .training import LabeledSet, LossSpec, TrainConfig, UnlabeledSet, Variant

Array = np.ndarray

_SNR_PROBE_SEED = 170081
_SNR_PROBE_SIZE = 100_000


def _rng(seed: int, tag: int):
    return np.random.default_rng(np.random.SeedSequence([int(seed), tag]))


@dataclass
class EvalConfig:
    """Evaluation protocol knobs (test-set counts per the selection
    experiments; grid sizes for the low-dimensional error metrics)."""

    test_sets: int = 100
    test_size: int = 100
    grid_points: int = 2001
    grid_points_2d: int = 128
    interior_margin: float = 0.05
    source_grid: int = 64
    source_margin: float = 0.1
    mc_eval_points: int = 10000
    holdout_frac: float = 0.25
    selection_c: float = 0.1  # relative threshold: tau = c * max norm


@dataclass
class NetworkConfig:
    """Architecture plus initialization for experiment cells.

    ``ensemble_size > 1`` with ``independent_members`` trains each member
    separately (own init and batching randomness) and averages them with
    equal weights, realizing the convex-combination estimator; without the
    flag, members are trained jointly through the combined prediction.
    """

    hidden: list[int] = field(default_factory=lambda: [64, 64])
    ensemble_size: int = 1
    bias_scale: float = 1.0
    init: str = "fan_sum"
    independent_members: bool = False

    def layer_dims(self, d: int) -> list[int]:
        return [d] + list(self.hidden) + [1]

    def __post_init__(self):
        if self.init not in ("fan_sum", "fan_in"):
            raise ContractViolation(f"unknown init style {self.init!r}")
        if self.ensemble_size < 1:
            raise ContractViolation("ensemble_size must be >= 1")


@dataclass
class GeneratedData:
    labeled: LabeledSet
    unlabeled: UnlabeledSet | None
    holdout: LabeledSet | None
    sigma: float


@dataclass
class ProblemSpec:
    """A fully specified estimation problem.

    ``f0``/``grad_f0`` are truth handles on (n, d) batches; ``source`` and
    ``potential`` are set for inverse-source problems, where ``f0`` plays
    the role of the true PDE solution.  Exactly one of ``sigma``/``snr``
    must be given.
    """

    name: str
    d: int
    n: int
    m: int
    lam: float
    eval_kind: str  # curve1d | selection | inverse | csv
    mu_sampler: Callable | None = None
    nu_sampler: Callable | None = None
    f0: Callable | None = None
    grad_f0: Callable | None = None
    sigma: float | None = None
    snr: float | None = None
    relevant: frozenset | None = None
    source: Callable | None = None
    potential: Callable | None = None
    domain: tuple = ((0.0, 1.0),)  # per-axis bounds for grid evaluation
    feature_names: list[str] | None = None
    fixed_data: tuple | None = None  # (X, Y) for dataset-backed problems

    def __post_init__(self):
        if (self.sigma is None) == (self.snr is None) and self.eval_kind != "csv":
            raise ContractViolation("exactly one of sigma/snr must be specified")
        if self.n < 1 or self.m < 0:
            raise ContractViolation(f"need n >= 1 and m >= 0, got n={self.n}, m={self.m}")

    def resolve_sigma(self) -> float:
        if self.sigma is not None:
            return float(self.sigma)
        if self.snr is None:
            return 0.0
        probe = self.mu_sampler(_rng(_SNR_PROBE_SEED, 0), _SNR_PROBE_SIZE)
        return float(np.std(self.f0(probe), ddof=1) / self.snr)

    def generate(self, seed: int) -> GeneratedData:
        if self.eval_kind == "csv":
            X, Y = self.fixed_data
            n_hold = int(round(len(Y) * 0.25))
            order = _rng(seed, 14).permutation(len(Y))
            hold, tr = order[:n_hold], order[n_hold:]
            return GeneratedData(LabeledSet(X[tr], Y[tr]), None,
                                 LabeledSet(X[hold], Y[hold]), 0.0)
        sigma = self.resolve_sigma()
        X = self.mu_sampler(_rng(seed, 11), self.n)
        noise = sigma * _rng(seed, 12).standard_normal(self.n) if sigma > 0 else 0.0
        Y = self.f0(X) + noise
        nu = self.nu_sampler or self.mu_sampler
        Z = UnlabeledSet(nu(_rng(seed, 13), self.m)) if self.m > 0 else None
        return GeneratedData(LabeledSet(X, Y), Z, None, sigma)

    def test_draw(self, seed: int, size: int) -> LabeledSet:
        """Fresh noisy test pairs for RMSE evaluation."""
        sigma = self.resolve_sigma()
        X = self.mu_sampler(_rng(seed, 15), size)
        noise = sigma * _rng(seed, 16).standard_normal(size) if sigma > 0 else 0.0
        return LabeledSet(X, self.f0(X) + noise)


# ---------------------------------------------------------------------------
# Built-in problems
# ---------------------------------------------------------------------------


def _uniform_box(lo, hi, d):
    def sampler(rng, size):
        return rng.uniform(lo, hi, size=(size, d))
    return sampler


def _f0_curve(x):
    return 1.0 + 36.0 * x**2 - 59.0 * x**3 + 21.0 * x**5 + 0.5 * np.cos(np.pi * x)


def _df0_curve(x):
    return 72.0 * x - 177.0 * x**2 + 105.0 * x**4 - 0.5 * np.pi * np.sin(np.pi * x)


def curve1d_problem(n=500, m=5000, lam=1e-3, snr=30.0, sigma=None) -> ProblemSpec:
    """Univariate quintic-plus-cosine regression on [0, 1]."""
    return ProblemSpec(
        name="example6_1", d=1, n=n, m=m, lam=lam, eval_kind="curve1d",
        mu_sampler=_uniform_box(0.0, 1.0, 1),
        f0=lambda X: _f0_curve(X[:, 0]),
        grad_f0=lambda X: _df0_curve(X[:, 0])[:, None],
        snr=None if sigma is not None else snr, sigma=sigma,
        domain=((0.0, 1.0),))


def gen_example_1d(n, m, seed):
    """Labeled/unlabeled draws plus truth handles for the 1-D example."""
    spec = curve1d_problem(n=n, m=m)
    data = spec.generate(seed)
    info = {"f0": spec.f0, "grad_f0": spec.grad_f0,
            "f0_scalar": _f0_curve, "df0_scalar": _df0_curve,
            "sigma": data.sigma, "lam": spec.lam}
    return data.labeled, data.unlabeled, info


_PAIRS = [(i, j) for i in range(3) for j in range(i + 1, 4)]


def _f0_pairs(X):
    return sum(X[:, i] * X[:, j] for i, j in _PAIRS)


def _grad_pairs(X):
    g = np.zeros_like(X)
    for i, j in _PAIRS:
        g[:, i] += X[:, j]
        g[:, j] += X[:, i]
    return g


def selection20_problem(n=100, m=1000, lam=1e-2, snr=25.0) -> ProblemSpec:
    """Sum of pairwise products of the first four of twenty uniform covariates."""
    return ProblemSpec(
        name="example6_2", d=20, n=n, m=m, lam=lam, eval_kind="selection",
        mu_sampler=_uniform_box(0.0, 1.0, 20),
        f0=_f0_pairs, grad_f0=_grad_pairs, snr=snr,
        relevant=frozenset({1, 2, 3, 4}),
        domain=tuple((0.0, 1.0) for _ in range(20)))


def gen_example_selection(n, m, seed):
    spec = selection20_problem(n=n, m=m)
    data = spec.generate(seed)
    info = {"f0": spec.f0, "grad_f0": spec.grad_f0, "relevant": spec.relevant,
            "sigma": data.sigma, "lam": spec.lam}
    return data.labeled, data.unlabeled, info


_W0 = 3.0 * np.pi**2


def _u_star(X):
    return np.cos(2.0 * np.pi * X[:, 0]) * np.cos(3.0 * np.pi * X[:, 1])


def _grad_u_star(X):
    c1, s1 = np.cos(2.0 * np.pi * X[:, 0]), np.sin(2.0 * np.pi * X[:, 0])
    c2, s2 = np.cos(3.0 * np.pi * X[:, 1]), np.sin(3.0 * np.pi * X[:, 1])
    return np.stack([-2.0 * np.pi * s1 * c2, -3.0 * np.pi * c1 * s2], axis=1)


def _source_star(X):
    # -laplacian(u*) + w u* = (4 pi^2 + 9 pi^2) u* + 3 pi^2 u* = 16 pi^2 u*
    return 16.0 * np.pi**2 * _u_star(X)


def _potential(X):
    return np.full(X.shape[0], _W0)


def inverse_problem(n=10000, sigma=0.10, lam=1e-8) -> ProblemSpec:
    """Elliptic source identification on [0, 1]^2 from noisy interior values."""
    if sigma < 0:
        raise ContractViolation("sigma must be nonnegative")
    return ProblemSpec(
        name="example6_3", d=2, n=n, m=0, lam=lam, eval_kind="inverse",
        mu_sampler=_uniform_box(0.0, 1.0, 2),
        f0=_u_star, grad_f0=_grad_u_star, sigma=sigma,
        source=_source_star, potential=_potential,
        domain=((0.0, 1.0), (0.0, 1.0)))


def gen_example_inverse(n, seed, sigma):
    spec = inverse_problem(n=n, sigma=sigma)
    data = spec.generate(seed)
    info = {"u_star": _u_star, "grad_u_star": _grad_u_star,
            "source_star": _source_star, "potential": _potential,
            "sigma": data.sigma}
    return data.labeled, data.unlabeled, info


def _toy_sampler(rng, size):
    x1 = rng.uniform(-1.0, 1.0, size=size)
    x2 = rng.normal(0.0, math.sqrt(0.05), size=size)
    return np.stack([x1, x2], axis=1)


def toy2d_problem(n=500, m=5000, lam=1e-4) -> ProblemSpec:
    """x1^2 target with a nearly degenerate second covariate; the noise
    variance 0.1 and covariate variance 0.05 are read as variances of the
    stated normal distributions."""
    return ProblemSpec(
        name="appendix_toy", d=2, n=n, m=m, lam=lam, eval_kind="selection",
        mu_sampler=_toy_sampler,
        f0=lambda X: X[:, 0] ** 2,
        grad_f0=lambda X: np.stack([2.0 * X[:, 0], np.zeros(X.shape[0])], axis=1),
        sigma=math.sqrt(0.1),
        relevant=frozenset({1}),
        domain=((-1.0, 1.0), (-1.0, 1.0)))


def gen_appendix_toy(n, m, seed):
    spec = toy2d_problem(n=n, m=m)
    data = spec.generate(seed)
    info = {"f0": spec.f0, "grad_f0": spec.grad_f0, "relevant": spec.relevant,
            "sigma": data.sigma, "lam": spec.lam}
    return data.labeled, data.unlabeled, info


def _sim_sampler(rng, size):
    head = rng.uniform(0.0, 1.0, size=(size, 4))
    tail = rng.uniform(0.0, 0.05, size=(size, 6))
    return np.hstack([head, tail])


def _f0_sim(X):
    return (2.0 * X[:, 0] ** 2 + np.exp(X[:, 1]) + 2.0 * np.sin(X[:, 2])
            + 2.0 * np.cos(X[:, 3] + 1.0))


def _grad_sim(X):
    g = np.zeros_like(X)
    g[:, 0] = 4.0 * X[:, 0]
    g[:, 1] = np.exp(X[:, 1])
    g[:, 2] = 2.0 * np.cos(X[:, 2])
    g[:, 3] = -2.0 * np.sin(X[:, 3] + 1.0)
    return g


def sim10_problem(n=500, m=5000, lam=1e-4, snr=25.0) -> ProblemSpec:
    """Ten covariates, four relevant through distinct nonlinearities."""
    return ProblemSpec(
        name="appendix_sim", d=10, n=n, m=m, lam=lam, eval_kind="selection",
        mu_sampler=_sim_sampler, f0=_f0_sim, grad_f0=_grad_sim, snr=snr,
        relevant=frozenset({1, 2, 3, 4}),
        domain=tuple((0.0, 1.0) for _ in range(10)))


def gen_appendix_sim(n, m, seed):
    spec = sim10_problem(n=n, m=m)
    data = spec.generate(seed)
    info = {"f0": spec.f0, "grad_f0": spec.grad_f0, "relevant": spec.relevant,
            "sigma": data.sigma, "lam": spec.lam}
    return data.labeled, data.unlabeled, info


# ---------------------------------------------------------------------------
# CSV ingestion
# ---------------------------------------------------------------------------


def load_csv_dataset(path, target_column, n_noise_features=0, noise_seed=0):
    """Read a numeric CSV with a header row into a :class:`LabeledSet`.

    Feature columns are standardized to zero mean and unit variance; target
    values are kept as-is.  Optionally appends uniform-[0, 1] noise columns
    (named ``noise_1..``), reproducible from ``noise_seed``.

    Returns ``(LabeledSet, feature_names)``.
    """
    try:
        with open(path, "r", encoding="utf-8", newline="") as fh:
            reader = csv.reader(fh)
            rows = list(reader)
    except OSError as exc:
        raise ConfigError(f"cannot read CSV {path}: {exc}") from exc
    if not rows:
        raise ConfigError(f"empty CSV {path}: no header row")
    header = [h.strip() for h in rows[0]]
    if target_column not in header:
        raise ConfigError(
            f"target column {target_column!r} not found; available: {header}")
    body = rows[1:]
    if not body:
        raise ConfigError(f"CSV {path} has a header but no data rows")
    tcol = header.index(target_column)
    data = np.empty((len(body), len(header)))
    for i, row in enumerate(body):
        if len(row) != len(header):
            raise ConfigError(
                f"row {i + 2}: expected {len(header)} fields, got {len(row)}")
        for j, cell in enumerate(row):
            try:
                data[i, j] = float(cell)
            except ValueError:
                raise ConfigError(
                    f"row {i + 2}, column {header[j]!r}: could not parse "
                    f"{cell!r} as a number") from None
    y = data[:, tcol]
    feat_idx = [j for j in range(len(header)) if j != tcol]
    X = data[:, feat_idx]
    names = [header[j] for j in feat_idx]
    mean = X.mean(axis=0)
    std = X.std(axis=0)
    zero = np.nonzero(std == 0)[0]
    if zero.size:
        raise ConfigError(
            f"column {names[zero[0]]!r} has zero variance; cannot standardize")
    X = (X - mean) / std
    if n_noise_features > 0:
        rng = np.random.default_rng(noise_seed)
        noise = rng.uniform(0.0, 1.0, size=(X.shape[0], n_noise_features))
        X = np.hstack([X, noise])
        names = names + [f"noise_{k + 1}" for k in range(n_noise_features)]
    return LabeledSet(X, y), names


def csv_problem(path, target_column="MedHouseVal", n_noise_features=7,
                noise_seed=0, lam=1e-2) -> ProblemSpec:
    labeled, names = load_csv_dataset(path, target_column, n_noise_features, noise_seed)
    return ProblemSpec(
        name="csv_selection", d=labeled.X.shape[1], n=len(labeled), m=0, lam=lam,
        eval_kind="csv", feature_names=names,
        fixed_data=(labeled.X, labeled.Y),
        domain=tuple((float(labeled.X[:, j].min()), float(labeled.X[:, j].max()))
                     for j in range(labeled.X.shape[1])))


# ---------------------------------------------------------------------------
# Registry
# ---------------------------------------------------------------------------


@dataclass
class ExperimentDef:
    problem: ProblemSpec
    variants: list[LossSpec]
    train: TrainConfig
    eval: EvalConfig
    network: NetworkConfig


def _build_example6_1(ov):
    lam = ov.get("lambda", 1e-3)
    problem = curve1d_problem(n=ov.get("n", 500), m=ov.get("m", 5000), lam=lam,
                              snr=ov.get("snr", 30.0), sigma=ov.get("sigma"))
    variants = [LossSpec(Variant.SDORE, lam)]
    return ExperimentDef(problem, variants, TrainConfig(), EvalConfig(), NetworkConfig())


def _build_example6_2(ov):
    lam = ov.get("lambda", 1e-2)
    problem = selection20_problem(n=ov.get("n", 100), m=ov.get("m", 1000), lam=lam,
                                  snr=ov.get("snr", 25.0))
    variants = [LossSpec(Variant.SDORE, lam), LossSpec(Variant.DORE, lam)]
    # selection works through the convex-combination estimator here: five
    # independently trained single-hidden-layer members, averaged; a single
    # wide net's spurious derivative norms sit near 0.2x the largest norm,
    # while the averaged members separate cleanly at c = 0.4
    return ExperimentDef(problem, variants,
                         TrainConfig(epochs=ov.get("epochs", 1000), batch_size=32),
                         EvalConfig(selection_c=0.4),
                         NetworkConfig(hidden=[16], ensemble_size=5,
                                       independent_members=True))


_TABLE_LAMBDAS = [1e-2, 1e-4, 1e-6, 1e-8, 0.0]


def _build_example6_3(ov):
    sigma = ov.get("sigma", 0.10)
    problem = inverse_problem(n=ov.get("n", 10000), sigma=sigma,
                              lam=ov.get("lambda", 1e-8))
    lams = ov.get("lambdas", _TABLE_LAMBDAS)
    variants = [LossSpec(Variant.DORE, lam) for lam in lams]
    # the reconstruction is defined over convex combinations of networks;
    # three independently trained members averaged with equal weights
    return ExperimentDef(problem, variants, TrainConfig(), EvalConfig(),
                         NetworkConfig(init="fan_in", ensemble_size=3,
                                       independent_members=True))


def _build_appendix_toy(ov):
    lam = ov.get("lambda", 1e-4)
    problem = toy2d_problem(n=ov.get("n", 500), m=ov.get("m", 5000), lam=lam)
    variants = [LossSpec(Variant.LS, 0.0), LossSpec(Variant.DORE, lam),
                LossSpec(Variant.SDORE, lam)]
    return ExperimentDef(problem, variants, TrainConfig(), EvalConfig(), NetworkConfig())


def _build_appendix_sim(ov):
    lam = ov.get("lambda", 1e-4)
    problem = sim10_problem(n=ov.get("n", 500), m=ov.get("m", 5000), lam=lam,
                            snr=ov.get("snr", 25.0))
    variants = [LossSpec(Variant.LS, 0.0), LossSpec(Variant.DORE, lam),
                LossSpec(Variant.SDORE, lam)]
    return ExperimentDef(problem, variants, TrainConfig(),
                         EvalConfig(test_size=500), NetworkConfig())


def _build_csv_selection(ov):
    path = ov.get("csv_path")
    if not path:
        raise ConfigError("csv_selection requires overrides.csv_path")
    lam = ov.get("lambda", 1e-2)
    problem = csv_problem(path, target_column=ov.get("target_column", "MedHouseVal"),
                          n_noise_features=ov.get("n_noise_features", 7),
                          noise_seed=ov.get("noise_seed", 0), lam=lam)
    variants = [LossSpec(Variant.DORE, lam)]
    return ExperimentDef(problem, variants, TrainConfig(), EvalConfig(), NetworkConfig())


REGISTRY = {
    "example6_1": ("1-D quintic+cosine curve; n=500, m=5000, lambda=1e-3, snr=30",
                   _build_example6_1),
    "example6_2": ("20-D pairwise-product selection; n=100, m=1000, lambda=1e-2, snr=25",
                   _build_example6_2),
    "example6_3": ("2-D elliptic source recovery; n=10000, sigma in {0.10, 0.20}, "
                   "lambda sweep {1e-2, 1e-4, 1e-6, 1e-8, 0}", _build_example6_3),
    "appendix_toy": ("2-D x1^2 toy with degenerate x2; n=500, m=5000, lambda=1e-4",
                     _build_appendix_toy),
    "appendix_sim": ("10-D four-relevant-variable simulation; n=500, m=5000, "
                     "lambda=1e-4, snr=25", _build_appendix_sim),
    "csv_selection": ("CSV dataset + 7 appended noise features; lambda=1e-2; "
                      "requires overrides.csv_path", _build_csv_selection),
}


def build_experiment(name: str, overrides: dict | None = None) -> ExperimentDef:
    if name not in REGISTRY:
        raise ConfigError(f"unknown experiment {name!r}; known: {sorted(REGISTRY)}")
    return REGISTRY[name][1](overrides or {})
