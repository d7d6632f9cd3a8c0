"""Reverse-mode autodiff on a flat tape, with forward propagation of
input-Jacobians and input-Hessians through squared-ReLU (ReQU) networks.

The tape records dense-array primitives (matrix multiply, bias add,
elementwise ReQU/ReLU, elementwise product, reductions).  Input-derivative
propagation is expressed *with the same primitives*, so quantities such as
``‖∇_x f(x)‖²`` or ``Δ_x f(x)`` become ordinary tape nodes and remain
differentiable with respect to the network parameters.

Conventions
-----------
* All values are float64 ``numpy`` arrays.
* A batch of inputs is an ``(n, d)`` matrix; network outputs are ``(n, 1)``.
* Per-layer Jacobians are stored as ``(n, d, width)`` tensors
  (``J[s, k, j] = ∂h_j/∂x_k`` at sample ``s``); Hessians as
  ``(n, d, d, width)``.
* The activation derivative at the kink is zero: ``ϱ'(0) = 0`` and
  ``ϱ''(0) = 0``.  ReQU is C¹, so this is the two-sided limit for ϱ';
  ϱ'' is defined almost everywhere and the kink set has measure zero.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractViolation

Array = np.ndarray

# Test hook: when set, replaces the ϱ' used in backward passes.  Exists so
# the gradcheck command can demonstrate mutation sensitivity.
_requ_prime_override = None


def requ(z):
    """Squared ReLU activation: ``max(z, 0)**2``, elementwise."""
    return np.square(np.maximum(z, 0.0))


def requ_prime(z):
    """Derivative of :func:`requ`: ``2 * max(z, 0)``, elementwise.

    Continuous everywhere; equal to 0 at the kink.
    """
    if _requ_prime_override is not None:
        return _requ_prime_override(z)
    return 2.0 * np.maximum(z, 0.0)


def requ_second(z):
    """Second derivative of :func:`requ` (a.e.): ``2 * [z > 0]``."""
    return 2.0 * (np.asarray(z) > 0.0).astype(np.float64)


class Node:
    """One recorded primitive.  Operands always precede the node on the tape."""

    __slots__ = ("idx", "op", "args", "value", "aux")

    def __init__(self, idx, op, args, value, aux=None):
        self.idx = idx
        self.op = op
        self.args = args
        self.value = value
        self.aux = aux

    @property
    def shape(self):
        return self.value.shape

    def item(self):
        return float(self.value)

    def __repr__(self):  # pragma: no cover - debugging aid
        return f"Node({self.idx}, {self.op}, shape={self.value.shape})"


def _unbroadcast(grad, shape):
    """Reduce a broadcasted gradient back to ``shape``."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (g, s) in enumerate(zip(grad.shape, shape)) if s == 1 and g != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _swap(a):
    return np.swapaxes(a, -1, -2)


class Tape:
    """Append-only record of primitive operations.

    Single-owner: one thread builds the tape and runs :meth:`backward`.
    Backward over an unchanged tape is deterministic and bit-reproducible
    (the reverse sweep visits nodes in fixed reverse-creation order).
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self.params: list[Node] = []

    def _push(self, op, args, value, aux=None) -> Node:
        node = Node(len(self.nodes), op, args, np.asarray(value, dtype=np.float64), aux)
        self.nodes.append(node)
        return node

    # -- leaves ---------------------------------------------------------

    def leaf(self, value) -> Node:
        """Record a constant input (copied, so later mutation of the source
        array cannot invalidate the tape)."""
        return self._push("leaf", (), np.array(value, dtype=np.float64))

    def param(self, value) -> Node:
        """Record a trainable leaf; registered for gradient collection."""
        node = self.leaf(value)
        self.params.append(node)
        return node

    # -- primitives -----------------------------------------------------

    def matmul(self, a: Node, b: Node) -> Node:
        if a.value.ndim < 2 or b.value.ndim < 2:
            raise ContractViolation("matmul operands must have ndim >= 2")
        if a.value.shape[-1] != b.value.shape[-2]:
            raise ContractViolation(
                f"matmul inner dimensions differ: {a.value.shape} @ {b.value.shape}")
        return self._push("matmul", (a, b), a.value @ b.value)

    def transpose(self, a: Node) -> Node:
        return self._push("transpose", (a,), _swap(a.value))

    def reshape(self, a: Node, shape) -> Node:
        return self._push("reshape", (a,), a.value.reshape(shape))

    def add(self, a: Node, b: Node) -> Node:
        return self._push("add", (a, b), a.value + b.value)

    def sub(self, a: Node, b: Node) -> Node:
        return self._push("sub", (a, b), a.value - b.value)

    def mul(self, a: Node, b: Node) -> Node:
        return self._push("mul", (a, b), a.value * b.value)

    def div(self, a: Node, b: Node) -> Node:
        return self._push("div", (a, b), a.value / b.value)

    def scale(self, a: Node, c: float) -> Node:
        return self._push("scale", (a,), c * a.value, aux=float(c))

    def requ(self, a: Node) -> Node:
        return self._push("requ", (a,), requ(a.value))

    def relu(self, a: Node) -> Node:
        return self._push("relu", (a,), np.maximum(a.value, 0.0))

    def step(self, a: Node) -> Node:
        """Heaviside gate ``[z > 0]`` (zero at the kink); zero derivative."""
        return self._push("step", (a,), (a.value > 0.0).astype(np.float64))

    def exp(self, a: Node) -> Node:
        return self._push("exp", (a,), np.exp(a.value))

    def sum(self, a: Node) -> Node:
        """Full reduction to a scalar node."""
        return self._push("sum", (a,), a.value.sum())

    # -- reverse sweep ---------------------------------------------------

    def backward(self, loss: Node) -> dict[Node, Array]:
        """Accumulate ``∂loss/∂p`` for every registered param node.

        Returns a dict keyed by param node; parameters that did not
        participate in ``loss`` map to zero arrays.
        """
        if loss.value.size != 1:
            raise ContractViolation(
                f"backward target must be scalar, got shape {loss.value.shape}")
        adj: list[Array | None] = [None] * len(self.nodes)
        adj[loss.idx] = np.ones_like(loss.value)
        for node in reversed(self.nodes[: loss.idx + 1]):
            g = adj[node.idx]
            if g is None:
                continue
            op = node.op
            if op == "leaf":
                continue
            args = node.args
            if op == "matmul":
                a, b = args
                _accum(adj, a, _unbroadcast(g @ _swap(b.value), a.value.shape))
                _accum(adj, b, _unbroadcast(_swap(a.value) @ g, b.value.shape))
            elif op == "mul":
                a, b = args
                _accum(adj, a, _unbroadcast(g * b.value, a.value.shape))
                _accum(adj, b, _unbroadcast(g * a.value, b.value.shape))
            elif op == "add":
                a, b = args
                _accum(adj, a, _unbroadcast(g, a.value.shape))
                _accum(adj, b, _unbroadcast(g, b.value.shape))
            elif op == "sub":
                a, b = args
                _accum(adj, a, _unbroadcast(g, a.value.shape))
                _accum(adj, b, _unbroadcast(-g, b.value.shape))
            elif op == "reshape":
                (a,) = args
                _accum(adj, a, g.reshape(a.value.shape))
            elif op == "requ":
                (a,) = args
                _accum(adj, a, g * requ_prime(a.value))
            elif op == "relu":
                (a,) = args
                _accum(adj, a, g * (a.value > 0.0))
            elif op == "scale":
                (a,) = args
                _accum(adj, a, node.aux * g)
            elif op == "transpose":
                (a,) = args
                _accum(adj, a, _swap(g))
            elif op == "sum":
                (a,) = args
                _accum(adj, a, np.broadcast_to(g, a.value.shape))
            elif op == "div":
                a, b = args
                _accum(adj, a, _unbroadcast(g / b.value, a.value.shape))
                _accum(adj, b, _unbroadcast(-g * node.value / b.value, b.value.shape))
            elif op == "step":
                continue  # zero derivative a.e.
            elif op == "exp":
                (a,) = args
                _accum(adj, a, g * node.value)
            else:  # pragma: no cover - defensive
                raise AssertionError(f"unknown op {op}")
        out = {}
        for p in self.params:
            g = adj[p.idx]
            out[p] = np.zeros_like(p.value) if g is None else g
        return out


def _accum(adj, node, g):
    cur = adj[node.idx]
    if cur is None:
        adj[node.idx] = g if g.flags.owndata else g.copy()
    else:
        cur += g


def backward(tape: Tape, loss_node: Node) -> dict[Node, Array]:
    """Reverse sweep from a scalar node; see :meth:`Tape.backward`."""
    return tape.backward(loss_node)


# ---------------------------------------------------------------------------
# Network jet propagation
# ---------------------------------------------------------------------------


@dataclass
class JetNodes:
    """Tape nodes for (value, input-gradient, input-Hessian) of a network batch."""

    value: Node
    grad: Node | None
    hess: Node | None


@dataclass
class Jet:
    """Value, input-gradient and (optionally) input-Hessian at one point.

    ``hess`` is symmetrized after propagation; ``grad``/``hess`` are ``None``
    when the requested order did not cover them.
    """

    value: float
    grad: Array | None
    hess: Array | None = None


def mlp_jet(tape: Tape, weights: list[Node], biases: list[Node], x: Node,
            order: int = 1) -> JetNodes:
    """Forward pass of a ReQU MLP with joint input-jet propagation.

    ``weights[l]`` is the ``(N_{l+1}, N_l)`` matrix of the l-th affine map,
    ``biases[l]`` its offset; ReQU is applied after every affine map except
    the last.  ``x`` is an ``(n, d)`` batch node.

    Gradient recursion per layer: with pre-activations ``z = h A^T + b`` and
    batch Jacobian ``J`` of ``h``, the Jacobian of the activated layer is
    ``ϱ'(z) ⊙ (J A^T)``; the first-layer Jacobian is ``A^T`` itself (leading
    axis kept at 1 and broadcast against the batch).  The Hessian recursion
    adds the rank-one term ``ϱ''(z) ⊙ (J_z ⊗ J_z)``.

    Every intermediate is a tape node, so the returned nodes are
    differentiable with respect to the weight/bias params.
    """
    if x.value.ndim != 2:
        raise ContractViolation(f"input batch must be 2-D, got shape {x.value.shape}")
    n, d = x.value.shape
    if weights[0].value.shape[1] != d:
        raise ContractViolation(
            f"input width {d} does not match first layer {weights[0].value.shape}")
    n_affine = len(weights)
    h = x
    J = None  # (jn, d, width); jn == 1 until the first activation
    H = None  # (hn, d, d, width)
    for layer, (W, b) in enumerate(zip(weights, biases)):
        out_dim = W.value.shape[0]
        At = tape.transpose(W)
        z = tape.add(tape.matmul(h, At), b)
        Jz = Hz = None
        if order >= 1:
            if J is None:
                Jz = tape.reshape(At, (1, d, out_dim))
            else:
                jn, _, in_dim = J.value.shape
                flat = tape.matmul(tape.reshape(J, (jn * d, in_dim)), At)
                Jz = tape.reshape(flat, (jn, d, out_dim))
        if order >= 2 and H is not None:
            hn, _, _, in_dim = H.value.shape
            flat = tape.matmul(tape.reshape(H, (hn * d * d, in_dim)), At)
            Hz = tape.reshape(flat, (hn, d, d, out_dim))
        if layer == n_affine - 1:
            return JetNodes(z, Jz, Hz)
        h = tape.requ(z)
        if order >= 1:
            p = tape.scale(tape.relu(z), 2.0)  # ϱ'(z) = 2·ReLU(z)
            J = tape.mul(tape.reshape(p, (n, 1, out_dim)), Jz)
        if order >= 2:
            jn = Jz.value.shape[0]
            outer = tape.mul(tape.reshape(Jz, (jn, d, 1, out_dim)),
                             tape.reshape(Jz, (jn, 1, d, out_dim)))
            rank1 = tape.mul(tape.reshape(tape.scale(tape.step(z), 2.0),
                                          (n, 1, 1, out_dim)), outer)
            if Hz is None:
                H = rank1
            else:
                H = tape.add(rank1, tape.mul(tape.reshape(p, (n, 1, 1, out_dim)), Hz))
    raise AssertionError("unreachable")  # pragma: no cover


def mlp_value(tape: Tape, weights: list[Node], biases: list[Node], x: Node) -> Node:
    """Plain forward pass (no jets); ``(n, 1)`` output node."""
    return mlp_jet(tape, weights, biases, x, order=0).value


def jet_arrays(net, X: Array, order: int = 1):
    """Evaluate jets of a plain network on a batch, returning arrays.

    Returns ``(values (n,), grads (n, d) or None, hess (n, d, d) or None)``.
    ``net`` needs ``weights``/``biases`` attribute lists.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise ContractViolation(f"expected (n, d) batch, got shape {X.shape}")
    n, d = X.shape
    tape = Tape()
    wn = [tape.leaf(W) for W in net.weights]
    bn = [tape.leaf(b) for b in net.biases]
    jn = mlp_jet(tape, wn, bn, tape.leaf(X), order)
    values = jn.value.value[:, 0]
    grads = hess = None
    if order >= 1:
        g = jn.grad.value[:, :, 0]
        grads = np.ascontiguousarray(np.broadcast_to(g, (n, d)))
    if order >= 2:
        if jn.hess is None:
            hess = np.zeros((n, d, d))
        else:
            hv = jn.hess.value[:, :, :, 0]
            hv = 0.5 * (hv + hv.transpose(0, 2, 1))  # enforce exact symmetry
            hess = np.ascontiguousarray(np.broadcast_to(hv, (n, d, d)))
    return values, grads, hess


def forward_jet(net, x, order: int = 1) -> Jet:
    """Jet of a network at a single point ``x`` (1-D array of length d)."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ContractViolation(f"expected 1-D point, got shape {x.shape}")
    if order not in (0, 1, 2):
        raise ContractViolation(f"order must be 0, 1 or 2, got {order}")
    values, grads, hess = jet_arrays(net, x[None, :], order)
    return Jet(value=float(values[0]),
               grad=grads[0] if grads is not None else None,
               hess=hess[0] if hess is not None else None)
