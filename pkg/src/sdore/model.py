"""ReQU multilayer networks, convex-combination ensembles, and checkpoints.

A network is a chain of affine maps with the squared-ReLU activation after
every map except the last.  An :class:`Ensemble` is a convex combination of
networks sharing an input width; with a single member and weight 1 it is
equivalent to the plain network.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from . import autodiff
from .autodiff import Jet, jet_arrays, requ
from .errors import CheckpointError, ContractViolation

Array = np.ndarray

_MAGIC = b"SDOREMDL"
_VERSION = 1


@dataclass
class ReQUNetwork:
    """Dense ReQU network: ``x -> A_L(ϱ(A_{L-1}(... ϱ(A_0 x + b_0) ...)))``.

    ``layer_dims = [N_0, ..., N_{L+1}]`` with ``N_0`` the input width and
    ``N_{L+1} = 1``; ``weights[l]`` has shape ``(N_{l+1}, N_l)``.
    """

    layer_dims: list[int]
    weights: list[Array]
    biases: list[Array]

    @property
    def input_dim(self) -> int:
        return self.layer_dims[0]

    @property
    def depth(self) -> int:
        """Number of hidden (ReQU-activated) layers."""
        return len(self.layer_dims) - 2

    def n_parameters(self) -> int:
        return sum(w.size for w in self.weights) + sum(b.size for b in self.biases)

    def n_nonzero_weights(self) -> int:
        """Count of non-zero entries across all weight matrices and biases."""
        return int(sum(np.count_nonzero(w) for w in self.weights)
                   + sum(np.count_nonzero(b) for b in self.biases))

    def validate(self):
        dims = self.layer_dims
        if len(dims) < 2 or any(int(x) <= 0 for x in dims):
            raise ContractViolation(f"invalid layer dims {dims}")
        if dims[-1] != 1:
            raise ContractViolation(f"output width must be 1, got {dims[-1]}")
        if len(self.weights) != len(dims) - 1 or len(self.biases) != len(dims) - 1:
            raise ContractViolation("weight/bias count does not match layer dims")
        for l, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape != (dims[l + 1], dims[l]):
                raise ContractViolation(
                    f"weight {l} has shape {w.shape}, expected {(dims[l + 1], dims[l])}")
            if b.shape != (dims[l + 1],):
                raise ContractViolation(
                    f"bias {l} has shape {b.shape}, expected {(dims[l + 1],)}")
        return self

    def clone(self) -> "ReQUNetwork":
        return ReQUNetwork(list(self.layer_dims),
                           [w.copy() for w in self.weights],
                           [b.copy() for b in self.biases])


@dataclass
class Ensemble:
    """Convex combination of networks: ``f(x) = Σ_k alpha_k f_k(x)``."""

    members: list[ReQUNetwork]
    alpha: Array = field(default=None)

    def __post_init__(self):
        if self.alpha is None:
            self.alpha = np.full(len(self.members), 1.0 / len(self.members))
        self.alpha = np.asarray(self.alpha, dtype=np.float64)
        self.validate()

    @property
    def input_dim(self) -> int:
        return self.members[0].input_dim

    def validate(self):
        if not self.members:
            raise ContractViolation("ensemble needs at least one member")
        d = self.members[0].input_dim
        if any(m.input_dim != d for m in self.members):
            raise ContractViolation("ensemble members disagree on input width")
        if self.alpha.shape != (len(self.members),):
            raise ContractViolation("alpha length does not match member count")
        if np.any(self.alpha < 0) or abs(self.alpha.sum() - 1.0) > 1e-12:
            raise ContractViolation(
                f"alpha must lie on the probability simplex, got {self.alpha}")
        return self

    def clone(self) -> "Ensemble":
        return Ensemble([m.clone() for m in self.members], self.alpha.copy())


Model = ReQUNetwork | Ensemble


def init_network(layer_dims, seed, bias_scale: float = 0.0,
                 style: str = "fan_sum") -> ReQUNetwork:
    """Initialize a network with uniform random weights.

    ``style="fan_sum"`` (default) draws weights i.i.d. uniform on
    ``[-sqrt(6/(N_l + N_{l+1})), +...]`` with zero biases; the scale keeps
    pre-activations O(1) at the depths used here.  ``bias_scale > 0`` draws
    biases uniformly from ``[-bias_scale/sqrt(N_l), +bias_scale/sqrt(N_l)]``
    instead, which diversifies activation kinks at initialization (ReQU
    units with zero bias on a nonnegative input domain start out as pure
    power functions of one feature).  ``style="fan_in"`` uses bound
    ``1/sqrt(N_l)`` for weights and biases alike.
    """
    dims = [int(x) for x in layer_dims]
    if len(dims) < 2 or any(x <= 0 for x in dims):
        raise ContractViolation(f"invalid layer dims {layer_dims}")
    if dims[-1] != 1:
        raise ContractViolation(f"output width must be 1, got {dims[-1]}")
    if style not in ("fan_sum", "fan_in"):
        raise ContractViolation(f"unknown init style {style!r}")
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for n_in, n_out in zip(dims[:-1], dims[1:]):
        if style == "fan_in":
            bound = 1.0 / np.sqrt(n_in)
        else:
            bound = np.sqrt(6.0 / (n_in + n_out))
        weights.append(rng.uniform(-bound, bound, size=(n_out, n_in)))
        if style == "fan_in":
            biases.append(rng.uniform(-1.0, 1.0, size=n_out) / np.sqrt(n_in))
        elif bias_scale > 0.0:
            biases.append(rng.uniform(-bias_scale, bias_scale, size=n_out) / np.sqrt(n_in))
        else:
            biases.append(np.zeros(n_out))
    return ReQUNetwork(dims, weights, biases).validate()


def clone_model(model: Model) -> Model:
    return model.clone()


def predict(model: Model, X) -> Array:
    """Per-point scalar outputs for a batch ``X`` of shape ``(n, d)``."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise ContractViolation(f"expected (n, d) batch, got shape {X.shape}")
    if isinstance(model, Ensemble):
        out = np.zeros(X.shape[0])
        for a, member in zip(model.alpha, model.members):
            out += a * predict(member, X)
        return out
    if X.shape[1] != model.input_dim:
        raise ContractViolation(
            f"batch width {X.shape[1]} does not match input width {model.input_dim}")
    h = X
    last = len(model.weights) - 1
    for l, (w, b) in enumerate(zip(model.weights, model.biases)):
        h = h @ w.T + b
        if l < last:
            h = requ(h)
    return h[:, 0]


def predict_jet_arrays(model: Model, X, order: int = 1):
    """Batched jets as arrays ``(values, grads, hess)``; ensemble jets are
    the alpha-weighted combination of member jets."""
    X = np.asarray(X, dtype=np.float64)
    if isinstance(model, Ensemble):
        values = np.zeros(X.shape[0])
        grads = np.zeros(X.shape) if order >= 1 else None
        hess = (np.zeros((X.shape[0], X.shape[1], X.shape[1]))
                if order >= 2 else None)
        for a, member in zip(model.alpha, model.members):
            v, g, h = jet_arrays(member, X, order)
            values += a * v
            if order >= 1:
                grads += a * g
            if order >= 2:
                hess += a * h
        return values, grads, hess
    if X.ndim != 2 or X.shape[1] != model.input_dim:
        raise ContractViolation(
            f"batch shape {X.shape} does not match input width {model.input_dim}")
    return jet_arrays(model, X, order)


def predict_jet(model: Model, X, order: int = 1) -> list[Jet]:
    """Per-point jets for a batch; see :func:`predict_jet_arrays`."""
    values, grads, hess = predict_jet_arrays(model, X, order)
    n = len(values)
    return [Jet(value=float(values[i]),
                grad=grads[i] if grads is not None else None,
                hess=hess[i] if hess is not None else None)
            for i in range(n)]


def forward_jet(model: Model, x, order: int = 1) -> Jet:
    """Jet at a single point; ensemble-aware variant of
    :func:`sdore.autodiff.forward_jet`."""
    if isinstance(model, Ensemble):
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 1:
            raise ContractViolation(f"expected 1-D point, got shape {x.shape}")
        return predict_jet(model, x[None, :], order)[0]
    return autodiff.forward_jet(model, x, order)


# ---------------------------------------------------------------------------
# Checkpoints: versioned little-endian binary, bit-exact round trip.
# Layout documented in docs/checkpoint_format.md.
# ---------------------------------------------------------------------------


def save_checkpoint(model: Model, path):
    members = model.members if isinstance(model, Ensemble) else [model]
    alpha = model.alpha if isinstance(model, Ensemble) else np.array([1.0])
    kind = 1 if isinstance(model, Ensemble) else 0
    blob = bytearray()
    blob += _MAGIC
    blob += struct.pack("<IBI", _VERSION, kind, len(members))
    blob += np.ascontiguousarray(alpha, dtype="<f8").tobytes()
    for member in members:
        dims = member.layer_dims
        blob += struct.pack("<I", len(dims))
        blob += struct.pack(f"<{len(dims)}I", *dims)
        for w, b in zip(member.weights, member.biases):
            blob += np.ascontiguousarray(w, dtype="<f8").tobytes()
            blob += np.ascontiguousarray(b, dtype="<f8").tobytes()
    with open(path, "wb") as fh:
        fh.write(bytes(blob))


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, nbytes: int, section: str) -> bytes:
        if self.pos + nbytes > len(self.data):
            raise CheckpointError(
                f"truncated checkpoint: expected {nbytes} bytes for {section}, "
                f"only {len(self.data) - self.pos} remain")
        out = self.data[self.pos:self.pos + nbytes]
        self.pos += nbytes
        return out

    def floats(self, count: int, section: str) -> Array:
        raw = self.take(8 * count, section)
        return np.frombuffer(raw, dtype="<f8").copy()


def load_checkpoint(path) -> Model:
    with open(path, "rb") as fh:
        data = fh.read()
    r = _Reader(data)
    if r.take(len(_MAGIC), "magic header") != _MAGIC:
        raise CheckpointError("bad magic header: not a model checkpoint")
    version, kind, k = struct.unpack("<IBI", r.take(9, "version/kind/member count"))
    if version != _VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    if kind not in (0, 1):
        raise CheckpointError(f"unknown model kind {kind}")
    if k < 1 or k > 10_000:
        raise CheckpointError(f"implausible member count {k}")
    alpha = r.floats(k, "ensemble weights")
    members = []
    for mi in range(k):
        (ndims,) = struct.unpack("<I", r.take(4, f"member {mi} dim count"))
        if ndims < 2 or ndims > 10_000:
            raise CheckpointError(f"member {mi}: implausible dim count {ndims}")
        dims = list(struct.unpack(f"<{ndims}I", r.take(4 * ndims, f"member {mi} dims")))
        if any(x <= 0 for x in dims) or dims[-1] != 1:
            raise CheckpointError(f"member {mi}: invalid shape chain {dims}")
        weights, biases = [], []
        for l, (n_in, n_out) in enumerate(zip(dims[:-1], dims[1:])):
            w = r.floats(n_out * n_in, f"weight matrix of layer {l} of member {mi}")
            weights.append(w.reshape(n_out, n_in))
            biases.append(r.floats(n_out, f"bias vector of layer {l} of member {mi}"))
        members.append(ReQUNetwork(dims, weights, biases).validate())
    if r.pos != len(data):
        raise CheckpointError(
            f"trailing garbage: {len(data) - r.pos} unread bytes after model data")
    if kind == 0:
        if k != 1:
            raise CheckpointError(f"plain network checkpoint with {k} members")
        return members[0]
    return Ensemble(members, alpha)
