"""Self-check suite behind the ``gradcheck`` command.

Four checks, each against an implementation-independent oracle:

1. input gradients of random ReQU nets vs. central finite differences of
   the plain forward pass;
2. parameter gradients of the full penalized loss vs. central finite
   differences of a straight-line numpy recomputation of that loss
   (no tape involved);
3. Hessian traces vs. the finite-difference divergence of the analytic
   gradient;
4. full-batch training of an affine model vs. the closed-form ridge
   solution.

Random inputs are resampled until every pre-activation is at least 1e-3
away from the activation kink, so the finite-difference stencils never
straddle a kink.
"""

from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np

from . import autodiff
from .autodiff import forward_jet, jet_arrays
from .experiments import ridge_oracle
from .model import init_network, predict
from .training import (LabeledSet, LossSpec, TrainConfig, UnlabeledSet,
                       Variant, build_loss, train)

FD_STEP = 1e-4
KINK_CLEARANCE = 1e-3

TOL_INPUT_GRAD = 1e-5
TOL_PARAM_GRAD = 1e-4
TOL_HESSIAN = 1e-4
TOL_RIDGE = 1e-4


@contextmanager
def corrupted_requ_prime(factor=1.01):
    """Test hook: scales the activation derivative used in backward passes,
    which must make the parameter-gradient check fail."""
    previous = autodiff._requ_prime_override
    autodiff._requ_prime_override = lambda z: factor * 2.0 * np.maximum(z, 0.0)
    try:
        yield
    finally:
        autodiff._requ_prime_override = previous


def _rel_err(analytic, reference, floor=1e-6):
    # floor guards nearly-dead nets: central differences cannot resolve
    # gradients below ~1e-12 at h=1e-4, so tiny true gradients would
    # otherwise fail on oracle noise alone
    analytic = np.asarray(analytic, dtype=np.float64)
    reference = np.asarray(reference, dtype=np.float64)
    denom = max(float(np.linalg.norm(analytic.ravel())), floor)
    return float(np.linalg.norm((analytic - reference).ravel()) / denom)


def _min_preactivation(net, X):
    h = np.atleast_2d(X)
    worst = np.inf
    last = len(net.weights) - 1
    for l, (w, b) in enumerate(zip(net.weights, net.biases)):
        z = h @ w.T + b
        if l == last:
            break
        worst = min(worst, float(np.abs(z).min()))
        h = np.square(np.maximum(z, 0.0))
    return worst


def _sample_clear_points(net, rng, count, clearance=KINK_CLEARANCE, tries=500):
    """Points whose pre-activations all clear the kink by ``clearance``."""
    d = net.input_dim
    out = []
    for _ in range(tries):
        x = rng.uniform(-1.0, 1.0, size=d)
        if _min_preactivation(net, x) >= clearance:
            out.append(x)
            if len(out) == count:
                return np.asarray(out)
    return None


def _random_net(rng):
    d = int(rng.integers(1, 6))
    n_hidden = int(rng.integers(2, 5))
    widths = [int(rng.integers(2, 17)) for _ in range(n_hidden)]
    seed = int(rng.integers(0, 2**31 - 1))
    return init_network([d] + widths + [1], seed=seed, bias_scale=1.0)


def _plain_penalized_loss(weights, biases, X, y, P, lam):
    """Straight-line numpy recomputation of the penalized loss (no tape)."""

    def value(h):
        last = len(weights) - 1
        for l, (w, b) in enumerate(zip(weights, biases)):
            h = h @ w.T + b
            if l < last:
                h = np.square(np.maximum(h, 0.0))
        return h[:, 0]

    def grad_norms_sq(h):
        n, d = h.shape
        J = None
        last = len(weights) - 1
        for l, (w, b) in enumerate(zip(weights, biases)):
            z = h @ w.T + b
            Jz = w.T[None, :, :] if J is None else J @ w.T
            if l == last:
                return np.sum(np.broadcast_to(Jz[:, :, 0], (n, d)) ** 2, axis=1)
            h = np.square(np.maximum(z, 0.0))
            J = (2.0 * np.maximum(z, 0.0))[:, None, :] * Jz
        raise AssertionError("unreachable")

    fit = float(np.mean((value(X) - y) ** 2))
    return fit + lam * float(np.mean(grad_norms_sq(P)))


@dataclass
class GradcheckResult:
    nets: int
    max_input_grad_err: float = 0.0
    max_param_grad_err: float = 0.0
    max_hessian_err: float = 0.0
    ridge_err: float = 0.0
    skipped: int = 0
    failures: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.failures

    def lines(self):
        def mark(name, err, tol):
            status = "ok" if err < tol else "FAIL"
            return f"{name:<26s} max rel err {err:.3e}  (tol {tol:.0e})  {status}"

        return [
            mark("input gradients", self.max_input_grad_err, TOL_INPUT_GRAD),
            mark("parameter gradients", self.max_param_grad_err, TOL_PARAM_GRAD),
            mark("hessian traces", self.max_hessian_err, TOL_HESSIAN),
            mark("ridge training oracle", self.ridge_err, TOL_RIDGE),
        ]


def _check_one_net(net, rng, result: GradcheckResult):
    d = net.input_dim
    pts = _sample_clear_points(net, rng, 3)
    if pts is None:
        result.skipped += 1
        return
    h = FD_STEP

    for x in pts:
        jet = forward_jet(net, x, order=2)
        fd_grad = np.empty(d)
        for k in range(d):
            e = np.zeros(d)
            e[k] = h
            fd_grad[k] = (predict(net, (x + e)[None, :])[0]
                          - predict(net, (x - e)[None, :])[0]) / (2 * h)
        err = _rel_err(jet.grad, fd_grad)
        result.max_input_grad_err = max(result.max_input_grad_err, err)
        if err >= TOL_INPUT_GRAD:
            result.failures.append(f"input gradient: rel err {err:.3e}")

        fd_div = 0.0
        for k in range(d):
            e = np.zeros(d)
            e[k] = h
            gp = jet_arrays(net, (x + e)[None, :], order=1)[1][0, k]
            gm = jet_arrays(net, (x - e)[None, :], order=1)[1][0, k]
            fd_div += (gp - gm) / (2 * h)
        trace = float(np.trace(jet.hess))
        err = abs(trace - fd_div) / max(abs(trace), 1e-6)
        result.max_hessian_err = max(result.max_hessian_err, err)
        if err >= TOL_HESSIAN:
            result.failures.append(f"hessian trace: rel err {err:.3e}")

    # parameter gradients of the penalized loss on a small batch
    batch = _sample_clear_points(net, rng, 5)
    pen = _sample_clear_points(net, rng, 5)
    if batch is None or pen is None:
        result.skipped += 1
        return
    y = rng.standard_normal(5)
    lam = 0.37
    bound = build_loss(net, batch, y, pen, lam)
    analytic = bound.parameter_gradients()
    plain = _plain_penalized_loss(net.weights, net.biases, batch, y, pen, lam)
    if abs(plain - bound.value()) > 1e-10 * max(1.0, abs(plain)):
        result.failures.append(
            f"loss recomputation mismatch: {plain} vs {bound.value()}")
    arrays = list(net.weights) + list(net.biases)
    fd = [np.empty_like(a) for a in arrays]
    for a, out in zip(arrays, fd):
        flat_a = a.ravel()
        flat_out = out.ravel()
        for i in range(flat_a.size):
            keep = flat_a[i]
            flat_a[i] = keep + h
            up = _plain_penalized_loss(net.weights, net.biases, batch, y, pen, lam)
            flat_a[i] = keep - h
            dn = _plain_penalized_loss(net.weights, net.biases, batch, y, pen, lam)
            flat_a[i] = keep
            flat_out[i] = (up - dn) / (2 * h)
    an_flat = np.concatenate([g.ravel() for g in analytic])
    fd_flat = np.concatenate([g.ravel() for g in fd])
    err = _rel_err(an_flat, fd_flat)
    result.max_param_grad_err = max(result.max_param_grad_err, err)
    if err >= TOL_PARAM_GRAD:
        result.failures.append(f"parameter gradient: rel err {err:.3e}")


def _check_ridge(seed):
    rng = np.random.default_rng(seed)
    n, d, lam = 200, 5, 0.1
    X = rng.standard_normal((n, d))
    theta0 = rng.standard_normal(d)
    y = X @ theta0 + 0.1 * rng.standard_normal(n)
    X = X - X.mean(axis=0)
    y = y - y.mean()
    target = ridge_oracle(X, y, lam)
    net = init_network([d, 1], seed=seed)
    cfg = TrainConfig(learning_rate=0.05, batch_size=n, epochs=3000, seed=seed,
                      lr_decay=np.exp(np.log(2e-5) / 3000))
    fitted, _ = train(net, LabeledSet(X, y), UnlabeledSet(X),
                      LossSpec(Variant.SDORE, lam), cfg)
    theta = fitted.weights[0][0]
    return float(np.linalg.norm(theta - target) / np.linalg.norm(target))


def run_gradcheck(seed=0, nets=100) -> GradcheckResult:
    """Run the full check suite; deterministic in ``seed``."""
    rng = np.random.default_rng(seed)
    result = GradcheckResult(nets=nets)
    for _ in range(nets):
        net = _random_net(rng)
        _check_one_net(net, rng, result)
    result.ridge_err = _check_ridge(seed + 1)
    if result.ridge_err >= TOL_RIDGE:
        result.failures.append(f"ridge training: rel err {result.ridge_err:.3e}")
    return result
