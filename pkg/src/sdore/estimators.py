"""Post-training consumers of a fitted model: plug-in derivative norms,
variable selection, elliptic source recovery, and relative-error metrics.

Variables are indexed 1..d throughout (matching the x_1..x_d naming used in
reports); selection results are sets of these 1-based indices.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import CapabilityError, ContractViolation
from .model import Model, predict_jet_arrays

Array = np.ndarray


@dataclass
class SelectionResult:
    norms: Array  # estimated L2 norms of the d partial derivatives
    threshold: float
    relevant: frozenset  # 1-based variable indices with norm > threshold

    def to_json_dict(self) -> dict:
        return {"norms": [float(v) for v in self.norms],
                "threshold": float(self.threshold),
                "relevant": sorted(self.relevant)}


@dataclass
class SourceRecovery:
    """Recovered source values ``f_hat = -laplacian(u_hat) + w * u_hat`` on a
    query grid."""

    u_hat: Model
    w: Callable
    query_points: Array
    f_hat_values: Array
    u_values: Array

    def to_json_dict(self) -> dict:
        return {"query_points": self.query_points.tolist(),
                "f_hat": [float(v) for v in self.f_hat_values],
                "u_hat": [float(v) for v in self.u_values]}

    def to_csv(self, path):
        """Per-point recovery values: x coordinates, then value columns."""
        d = self.query_points.shape[1]
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(",".join(f"x{k + 1}" for k in range(d)) + ",u_hat,f_hat\n")
            for q, u, f in zip(self.query_points, self.u_values, self.f_hat_values):
                coords = ",".join(repr(float(c)) for c in q)
                fh.write(f"{coords},{float(u)!r},{float(f)!r}\n")


@dataclass
class ThresholdRule:
    """Selection rule: ``relative`` (tau = c * max norm), ``absolute``
    (tau fixed), or ``top_k`` (keep the k largest norms)."""

    kind: str = "relative"
    c: float = 0.1
    tau: float = 0.0
    k: int = 0

    def threshold(self, norms: Array) -> float:
        if self.kind == "relative":
            return self.c * float(norms.max()) if norms.size else 0.0
        if self.kind == "absolute":
            return float(self.tau)
        if self.kind == "top_k":
            if self.k <= 0:
                return float("inf")
            if self.k >= norms.size:
                return -1.0
            # threshold just below the k-th largest norm
            kth = np.sort(norms)[-self.k]
            return float(np.nextafter(kth, -np.inf))
        raise ContractViolation(f"unknown threshold rule {self.kind!r}")


def derivative_norms(model: Model, sample) -> Array:
    """Monte Carlo estimate of the L2 norm of each partial derivative:
    ``norms[k] = sqrt(mean_i D_k f(Z_i)^2)``."""
    Z = np.asarray(getattr(sample, "Z", sample), dtype=np.float64)
    if Z.ndim != 2 or Z.shape[0] == 0:
        raise ContractViolation(f"need a nonempty (m, d) sample, got shape {Z.shape}")
    _, grads, _ = predict_jet_arrays(model, Z, order=1)
    return np.sqrt(np.mean(grads ** 2, axis=0))


def select_variables(norms, rule: ThresholdRule | None = None) -> SelectionResult:
    """Apply a threshold rule to derivative norms; variables with norm
    strictly above the threshold form the relevant set."""
    norms = np.asarray(norms, dtype=np.float64)
    if not np.isfinite(norms).all():
        raise ContractViolation("derivative norms must be finite")
    rule = rule or ThresholdRule()
    tau = rule.threshold(norms)
    relevant = frozenset(int(k) + 1 for k in np.nonzero(norms > tau)[0])
    return SelectionResult(norms=norms, threshold=tau, relevant=relevant)


def selection_error(predicted, truth, d: int) -> float:
    """Mean of false positive and false negative rates over ``{1..d}``."""
    predicted = frozenset(int(k) for k in predicted)
    truth = frozenset(int(k) for k in truth)
    universe = frozenset(range(1, d + 1))
    if not predicted <= universe or not truth <= universe:
        raise ContractViolation(f"index sets must lie within 1..{d}")
    if not truth or truth == universe:
        raise ContractViolation(
            "selection error undefined: truth set must be nonempty and proper")
    fpr = len(predicted - truth) / len(universe - truth)
    fnr = len(truth - predicted) / len(truth)
    return 0.5 * (fpr + fnr)


def recover_source(model: Model, w: Callable, query_points, jets=None) -> SourceRecovery:
    """Pointwise source recovery ``f_hat(q) = -trace(hess u_hat(q)) + w(q) u_hat(q)``.

    ``jets`` may supply precomputed per-point jets; they must carry Hessians
    (order 2), otherwise a :class:`CapabilityError` is raised.
    """
    Q = np.asarray(query_points, dtype=np.float64)
    if Q.ndim != 2 or Q.shape[0] == 0:
        raise ContractViolation(f"query points must be (n, d), got shape {Q.shape}")
    if jets is not None:
        if any(j.hess is None for j in jets):
            raise CapabilityError(
                "source recovery needs order-2 jets (Hessian unavailable)")
        values = np.array([j.value for j in jets])
        lap = np.array([np.trace(j.hess) for j in jets])
    else:
        values, _, hess = predict_jet_arrays(model, Q, order=2)
        lap = np.trace(hess, axis1=1, axis2=2)
    wq = np.asarray(w(Q), dtype=np.float64).reshape(-1)
    if wq.shape[0] != Q.shape[0]:
        raise ContractViolation("potential evaluation size mismatch")
    f_hat = -lap + wq * values
    return SourceRecovery(u_hat=model, w=w, query_points=Q,
                          f_hat_values=f_hat, u_values=values)


def rel_l2_error(estimate, truth) -> float:
    """``sqrt(sum (e - t)^2) / sqrt(sum t^2)`` over all entries.

    Pass stacked gradient components to get the gradient-error variant.
    """
    e = np.asarray(estimate, dtype=np.float64).ravel()
    t = np.asarray(truth, dtype=np.float64).ravel()
    if e.shape != t.shape:
        raise ContractViolation(f"size mismatch: {e.shape} vs {t.shape}")
    denom = np.sqrt(np.sum(t ** 2))
    if denom == 0.0:
        raise ContractViolation("relative error undefined for identically-zero truth")
    return float(np.sqrt(np.sum((e - t) ** 2)) / denom)


def rmse(estimate, truth) -> float:
    e = np.asarray(estimate, dtype=np.float64).ravel()
    t = np.asarray(truth, dtype=np.float64).ravel()
    return float(np.sqrt(np.mean((e - t) ** 2)))
