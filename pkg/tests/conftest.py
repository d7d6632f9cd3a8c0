"""Shared test helpers: finite-difference oracles kept independent of the
library's autodiff path."""

import numpy as np
import pytest

from sdore.model import predict


def fd_gradient(f, x, h=1e-4):
    """Central finite-difference gradient of a scalar function of a vector."""
    x = np.asarray(x, dtype=np.float64)
    g = np.empty_like(x)
    for k in range(x.size):
        e = np.zeros_like(x)
        e[k] = h
        g[k] = (f(x + e) - f(x - e)) / (2 * h)
    return g


def fd_value_gradient(net, x, h=1e-4):
    """FD gradient of a network's scalar output at a point."""
    return fd_gradient(lambda p: float(predict(net, p[None, :])[0]), x, h)


def fd_jacobian(vec_f, x, h=1e-4):
    """FD Jacobian of a vector-valued function of a vector."""
    x = np.asarray(x, dtype=np.float64)
    cols = []
    for k in range(x.size):
        e = np.zeros_like(x)
        e[k] = h
        cols.append((vec_f(x + e) - vec_f(x - e)) / (2 * h))
    return np.stack(cols, axis=1)


def rel_err(analytic, reference, floor=1e-6):
    """Normwise relative error.  The floor guards nearly-dead nets whose
    true gradients are below what central differences can resolve
    (FD roundoff is ~1e-12 at h=1e-4, so a 1e-6 floor is conservative)."""
    analytic = np.asarray(analytic, dtype=np.float64).ravel()
    reference = np.asarray(reference, dtype=np.float64).ravel()
    return float(np.linalg.norm(analytic - reference)
                 / max(np.linalg.norm(analytic), floor))


def min_preactivation(net, X):
    """Smallest |pre-activation| over all ReQU units for a batch."""
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


def sample_clear_points(net, rng, count, clearance=1e-3, tries=1000):
    """Inputs whose pre-activations all clear the activation kink."""
    out = []
    for _ in range(tries):
        x = rng.uniform(-1.0, 1.0, size=net.input_dim)
        if min_preactivation(net, x) >= clearance:
            out.append(x)
            if len(out) == count:
                return np.asarray(out)
    pytest.skip("could not find kink-clear inputs for this net")
