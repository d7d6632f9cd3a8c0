"""Loss construction (least squares plus gradient-norm penalty), Adam, and
deterministic minibatch training.

Four loss variants:

* ``LS`` — mean squared residual only.
* ``DORE`` — LS plus ``lam * mean_i ||grad f(p_i)||^2`` over a user-supplied
  point set representing the penalty measure (defaults to the labeled
  covariates).
* ``SDORE`` — same penalty averaged over an unlabeled sample.
* ``SDORE_POOLED`` — penalty averaged over the pooled labeled + unlabeled
  covariates (sensible when both share one distribution).

With ``lam == 0`` every variant is *bit-identical* to LS: the penalty
branch is not even recorded on the tape.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from enum import Enum

import numpy as np

from .autodiff import Node, Tape, mlp_jet
from .errors import ContractViolation
from .model import Ensemble, Model, ReQUNetwork, clone_model

Array = np.ndarray


@dataclass
class LabeledSet:
    """Covariate matrix ``X`` of shape (n, d) with responses ``Y`` of shape (n,)."""

    X: Array
    Y: Array

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        self.Y = np.asarray(self.Y, dtype=np.float64).reshape(-1)
        if self.X.ndim != 2 or self.X.shape[0] != self.Y.shape[0]:
            raise ContractViolation(
                f"inconsistent labeled set: X {self.X.shape}, Y {self.Y.shape}")
        if not (np.isfinite(self.X).all() and np.isfinite(self.Y).all()):
            raise ContractViolation("labeled set contains non-finite entries")

    def __len__(self):
        return self.X.shape[0]


@dataclass
class UnlabeledSet:
    """Covariate-only sample ``Z`` of shape (m, d)."""

    Z: Array

    def __post_init__(self):
        self.Z = np.asarray(self.Z, dtype=np.float64)
        if self.Z.ndim != 2:
            raise ContractViolation(f"unlabeled set must be 2-D, got {self.Z.shape}")
        if not np.isfinite(self.Z).all():
            raise ContractViolation("unlabeled set contains non-finite entries")

    def __len__(self):
        return self.Z.shape[0]


class Variant(str, Enum):
    LS = "LS"
    DORE = "DORE"
    SDORE = "SDORE"
    SDORE_POOLED = "SDORE_POOLED"


@dataclass
class LossSpec:
    """Loss variant with regularization strength.

    ``penalty_points`` supplies the point set representing the penalty
    measure for DORE; when omitted, DORE falls back to the labeled
    covariates.
    """

    variant: Variant = Variant.SDORE
    lam: float = 0.0
    penalty_points: Array | None = None

    def __post_init__(self):
        self.variant = Variant(self.variant)
        if self.lam < 0:
            raise ContractViolation(f"lambda must be nonnegative, got {self.lam}")

    def label(self) -> str:
        return f"{self.variant.value}@{self.lam:g}"


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 128
    epochs: int = 1000
    seed: int = 0
    adam_betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    optimizer: str = "adam"  # "adam" | "gd"
    lr_decay: float = 1.0  # per-epoch multiplicative factor (1.0 = constant)
    train_ensemble_weights: bool = True

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ContractViolation("learning_rate must be positive")
        b1, b2 = self.adam_betas
        if not (0 <= b1 < 1 and 0 <= b2 < 1):
            raise ContractViolation("adam betas must lie in [0, 1)")
        if self.batch_size < 1:
            raise ContractViolation("batch_size must be >= 1")
        if self.epochs < 0:
            raise ContractViolation("epochs must be nonnegative")
        if self.optimizer not in ("adam", "gd"):
            raise ContractViolation(f"unknown optimizer {self.optimizer!r}")
        if not (0 < self.lr_decay <= 1.0):
            raise ContractViolation("lr_decay must lie in (0, 1]")


# ---------------------------------------------------------------------------
# Loss construction
# ---------------------------------------------------------------------------


class _Binding:
    """Parameter nodes of a model on one tape, plus jet builders."""

    def __init__(self, tape: Tape, model: Model, logits: Array | None = None):
        self.tape = tape
        self.model = model
        self.param_nodes: list[Node] = []
        if isinstance(model, Ensemble):
            self._members = []
            for member in model.members:
                wn = [tape.param(w) for w in member.weights]
                bn = [tape.param(b) for b in member.biases]
                self.param_nodes.extend(wn)
                self.param_nodes.extend(bn)
                self._members.append((wn, bn))
            if logits is not None:
                logit_nodes = [tape.param(np.asarray(v)) for v in logits]
                self.param_nodes.extend(logit_nodes)
                exps = [tape.exp(ln) for ln in logit_nodes]
                total = exps[0]
                for e in exps[1:]:
                    total = tape.add(total, e)
                self._alpha = [tape.div(e, total) for e in exps]
            else:
                self._alpha = [tape.leaf(np.asarray(a)) for a in model.alpha]
        else:
            self._weights = [tape.param(w) for w in model.weights]
            self._biases = [tape.param(b) for b in model.biases]
            self.param_nodes.extend(self._weights)
            self.param_nodes.extend(self._biases)

    def jet(self, x_node: Node, order: int):
        tape = self.tape
        if isinstance(self.model, Ensemble):
            value = grad = None
            for (wn, bn), a in zip(self._members, self._alpha):
                jn = mlp_jet(tape, wn, bn, x_node, order)
                v = tape.mul(a, jn.value)
                value = v if value is None else tape.add(value, v)
                if order >= 1:
                    g = tape.mul(a, jn.grad)
                    grad = g if grad is None else tape.add(grad, g)
            return value, grad
        jn = mlp_jet(tape, self._weights, self._biases, x_node, order)
        return jn.value, jn.grad


@dataclass
class BoundLoss:
    """A loss scalar bound to a tape, ready for value/backward queries."""

    tape: Tape
    node: Node
    fit_node: Node
    penalty_node: Node | None  # lam-weighted penalty term; None when lam == 0
    binding: _Binding

    def value(self) -> float:
        return self.node.item()

    def fit_value(self) -> float:
        return self.fit_node.item()

    def penalty_value(self) -> float:
        return 0.0 if self.penalty_node is None else self.penalty_node.item()

    def parameter_gradients(self) -> list[Array]:
        grads = self.tape.backward(self.node)
        return [grads[p] for p in self.binding.param_nodes]


def _mean_sq_residual(tape: Tape, value: Node, y: Array) -> Node:
    yn = tape.leaf(y.reshape(-1, 1))
    err = tape.sub(value, yn)
    return tape.scale(tape.sum(tape.mul(err, err)), 1.0 / y.shape[0])


def _mean_grad_norm_sq(tape: Tape, grad: Node) -> Node:
    # leading dim of grad is 1 when the gradient is input-independent
    # (pure affine model); the mean over any batch is then that single value.
    n_eff = grad.value.shape[0]
    return tape.scale(tape.sum(tape.mul(grad, grad)), 1.0 / n_eff)


def build_loss(model: Model, X: Array, Y: Array, penalty_points: Array | None,
               lam: float, logits: Array | None = None) -> BoundLoss:
    """Assemble ``mean((f(X)-Y)^2) + lam * mean_i ||grad f(p_i)||^2`` on a
    fresh tape.  With ``lam == 0`` the penalty branch is skipped entirely."""
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64).reshape(-1)
    if X.ndim != 2 or X.shape[0] == 0:
        raise ContractViolation(f"empty or malformed batch: X shape {X.shape}")
    if X.shape[0] != Y.shape[0]:
        raise ContractViolation(f"batch size mismatch: {X.shape} vs {Y.shape}")
    if lam < 0:
        raise ContractViolation(f"lambda must be nonnegative, got {lam}")
    if lam > 0 and (penalty_points is None or len(penalty_points) == 0):
        raise ContractViolation("positive lambda requires a nonempty penalty batch")
    tape = Tape()
    binding = _Binding(tape, model, logits)
    value, _ = binding.jet(tape.leaf(X), order=0)
    fit = _mean_sq_residual(tape, value, Y)
    if lam == 0:
        return BoundLoss(tape, fit, fit, None, binding)
    P = np.asarray(penalty_points, dtype=np.float64)
    _, grad = binding.jet(tape.leaf(P), order=1)
    penalty = tape.scale(_mean_grad_norm_sq(tape, grad), lam)
    total = tape.add(fit, penalty)
    return BoundLoss(tape, total, fit, penalty, binding)


def loss_ls(model: Model, batch: LabeledSet) -> BoundLoss:
    """Mean squared residual over a labeled batch."""
    return build_loss(model, batch.X, batch.Y, None, 0.0)


def loss_sdore(model: Model, batch: LabeledSet, penalty_batch: UnlabeledSet,
               lam: float) -> BoundLoss:
    """LS risk plus ``lam`` times the mean squared gradient norm over the
    unlabeled batch."""
    if lam > 0 and (penalty_batch is None or len(penalty_batch) == 0):
        raise ContractViolation("SDORE with positive lambda needs unlabeled points")
    pen = penalty_batch.Z if penalty_batch is not None else None
    return build_loss(model, batch.X, batch.Y, pen, lam)


def loss_dore(model: Model, batch: LabeledSet, nu_points: Array, lam: float) -> BoundLoss:
    """Same objective with the penalty averaged over a fixed point set
    representing the penalty measure."""
    if lam > 0 and (nu_points is None or len(nu_points) == 0):
        raise ContractViolation("DORE with positive lambda needs penalty points")
    return build_loss(model, batch.X, batch.Y, nu_points, lam)


# ---------------------------------------------------------------------------
# Optimizers
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    theta: Array
    m: Array
    v: Array
    t: int = 0

    @classmethod
    def init(cls, theta: Array) -> "AdamState":
        return cls(theta.copy(), np.zeros_like(theta), np.zeros_like(theta), 0)


def adam_step(state: AdamState, grad: Array, config: TrainConfig,
              lr: float | None = None) -> AdamState:
    """One bias-corrected Adam update; returns the advanced state."""
    if grad.shape != state.theta.shape:
        raise ContractViolation(
            f"gradient shape {grad.shape} does not match parameters {state.theta.shape}")
    b1, b2 = config.adam_betas
    t = state.t + 1
    m = b1 * state.m + (1.0 - b1) * grad
    v = b2 * state.v + (1.0 - b2) * grad * grad
    mhat = m / (1.0 - b1 ** t)
    vhat = v / (1.0 - b2 ** t)
    step = (config.learning_rate if lr is None else lr) * mhat / (np.sqrt(vhat) + config.adam_eps)
    return AdamState(state.theta - step, m, v, t)


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------


@dataclass
class TrainingHistory:
    """Per-epoch averages of the total loss and its two components."""

    epochs: list[int] = field(default_factory=list)
    total_loss: list[float] = field(default_factory=list)
    fit_term: list[float] = field(default_factory=list)
    penalty_term: list[float] = field(default_factory=list)

    def append(self, epoch, total, fit, penalty):
        self.epochs.append(epoch)
        self.total_loss.append(total)
        self.fit_term.append(fit)
        self.penalty_term.append(penalty)

    def to_csv(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("epoch,total_loss,fit_term,penalty_term\n")
            for row in zip(self.epochs, self.total_loss, self.fit_term, self.penalty_term):
                fh.write(f"{row[0]},{row[1]!r},{row[2]!r},{row[3]!r}\n")


class _CyclingBatcher:
    """Shuffled minibatch stream that reshuffles on exhaustion; owns its RNG
    so independent streams never interact."""

    def __init__(self, points: Array, batch_size: int, rng):
        self.points = points
        self.batch_size = min(batch_size, len(points))
        self.rng = rng
        self._order = rng.permutation(len(points))
        self._pos = 0

    def next(self) -> Array:
        if self._pos + self.batch_size > len(self.points):
            self._order = self.rng.permutation(len(self.points))
            self._pos = 0
        idx = self._order[self._pos:self._pos + self.batch_size]
        self._pos += self.batch_size
        return self.points[idx]


def _sub_rng(seed: int, tag: int):
    return np.random.default_rng(np.random.SeedSequence([int(seed), tag]))


def _flatten_spec(arrays: list[Array]):
    sizes = [a.size for a in arrays]
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    return offsets


def _write_back(arrays: list[Array], theta: Array, offsets):
    for i, a in enumerate(arrays):
        a[...] = theta[offsets[i]:offsets[i + 1]].reshape(a.shape)


def resolve_penalty_points(loss_spec: LossSpec, labeled: LabeledSet,
                           unlabeled: UnlabeledSet | None) -> Array | None:
    """Point set the penalty is averaged over, per variant semantics."""
    v = loss_spec.variant
    if v is Variant.LS or loss_spec.lam == 0:
        return None
    if v is Variant.DORE:
        return (np.asarray(loss_spec.penalty_points, dtype=np.float64)
                if loss_spec.penalty_points is not None else labeled.X)
    if unlabeled is None or len(unlabeled) == 0:
        raise ContractViolation(f"{v.value} requires an unlabeled set")
    if v is Variant.SDORE:
        return unlabeled.Z
    return np.vstack([labeled.X, unlabeled.Z])  # SDORE_POOLED


def train(model: Model, labeled: LabeledSet, unlabeled: UnlabeledSet | None,
          loss_spec: LossSpec, config: TrainConfig):
    """Minibatch training; returns ``(fitted model, history)``.

    The input model is left untouched.  Labeled batches are reshuffled each
    epoch; the penalty point stream cycles independently with its own RNG,
    using the same batch size.  Everything is a deterministic function of
    ``(model, data, loss_spec, config)``.
    """
    if labeled is None or len(labeled) == 0:
        raise ContractViolation("training requires a nonempty labeled set")
    if labeled.X.shape[1] != model.input_dim:
        raise ContractViolation(
            f"data width {labeled.X.shape[1]} does not match model input "
            f"width {model.input_dim}")
    penalty_points = resolve_penalty_points(loss_spec, labeled, unlabeled)
    lam = loss_spec.lam

    work = clone_model(model)
    if isinstance(work, Ensemble):
        arrays = []
        for member in work.members:
            arrays.extend(member.weights)
            arrays.extend(member.biases)
        train_alpha = config.train_ensemble_weights and len(work.members) > 1
        logits = np.log(np.maximum(work.alpha, 1e-300)) if train_alpha else None
    else:
        arrays = list(work.weights) + list(work.biases)
        train_alpha = False
        logits = None

    flat_arrays = arrays + ([logits] if train_alpha else [])
    offsets = _flatten_spec(flat_arrays)
    theta = np.concatenate([a.ravel() for a in flat_arrays])
    state = AdamState.init(theta)

    label_rng = _sub_rng(config.seed, 1)
    pen_stream = None
    if penalty_points is not None:
        pen_stream = _CyclingBatcher(penalty_points, config.batch_size,
                                     _sub_rng(config.seed, 2))

    n = len(labeled)
    bs = min(config.batch_size, n)
    history = TrainingHistory()
    lr = config.learning_rate
    for epoch in range(config.epochs):
        order = label_rng.permutation(n)
        tot = fit = pen = 0.0
        steps = 0
        for start in range(0, n, bs):
            idx = order[start:start + bs]
            pen_batch = pen_stream.next() if pen_stream is not None else None
            bound = build_loss(work, labeled.X[idx], labeled.Y[idx], pen_batch,
                               lam, logits=logits if train_alpha else None)
            grads = bound.parameter_gradients()
            flat_grad = (grads[0].ravel() if len(grads) == 1
                         else np.concatenate([g.ravel() for g in grads]))
            if config.optimizer == "adam":
                state = adam_step(state, flat_grad, config, lr=lr)
            else:
                state = AdamState(state.theta - lr * flat_grad, state.m, state.v,
                                  state.t + 1)
            _write_back(arrays, state.theta, offsets)
            if train_alpha:
                logits[...] = state.theta[offsets[-2]:offsets[-1]]
            tot += bound.value()
            fit += bound.fit_value()
            pen += bound.penalty_value()
            steps += 1
        history.append(epoch, tot / steps, fit / steps, pen / steps)
        lr *= config.lr_decay

    if train_alpha:
        e = np.exp(logits - logits.max())
        work.alpha = e / e.sum()
        work.validate()
    return work, history
