"""Minimal reverse-mode automatic differentiation over float64 tensors.

Design: define-by-run. Ops execute eagerly on numpy arrays and, when a
Graph is active, append an op record to it. backward() replays the tape
in strict reverse append order, accumulating gradients additively, so a
tensor feeding several branches receives the sum of all branch
gradients. Graphs are rebuilt on every forward pass.

Everything is float64. The supported op set is exactly what small
fully-connected GANs and the latent search need; there is no
convolution, no GPU, no graph rewriting.
"""

from __future__ import annotations

import numpy as np

from .errors import (
    DomainError,
    MissingGradError,
    NonScalarRootError,
    ShapeMismatchError,
)

LOG_CLAMP = 1e-12
LEAKY_SLOPE = 0.2


class Graph:
    """Append-only tape of op records for one forward pass.

    Used as a context manager; ops executed inside the block are
    recorded. Nested graphs form a stack and the innermost one records.
    """

    _stack: list["Graph"] = []

    def __init__(self):
        self.nodes: list[_OpRecord] = []

    def __enter__(self):
        Graph._stack.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = Graph._stack.pop()
        assert popped is self
        return False

    @staticmethod
    def current():
        return Graph._stack[-1] if Graph._stack else None


class _OpRecord:
    __slots__ = ("kind", "inputs", "out", "vjp")

    def __init__(self, kind, inputs, out, vjp):
        self.kind = kind
        self.inputs = inputs
        self.out = out
        self.vjp = vjp


class Tensor:
    """n-dimensional float64 array that can participate in a Graph.

    grad is allocated (zeros) as soon as requires_grad is set, so after
    any backward pass every tracked tensor has a populated gradient,
    all-zero when the root did not depend on it.
    """

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad=False):
        arr = np.ascontiguousarray(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(arr) if requires_grad else None

    # ---- basics -------------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeMismatchError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self):
        if self.grad is not None:
            self.grad[...] = 0.0

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # ---- graph plumbing -----------------------------------------------

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    @staticmethod
    def _record(kind, inputs, out_data, vjp) -> "Tensor":
        out = Tensor(out_data)
        graph = Graph.current()
        if graph is not None and any(t.requires_grad for t in inputs):
            out.requires_grad = True
            out.grad = np.zeros_like(out.data)
            graph.nodes.append(_OpRecord(kind, inputs, out, vjp))
        return out

    @staticmethod
    def _lift(value, like) -> "Tensor":
        """Lift a python scalar to a constant tensor of a given shape."""
        if isinstance(value, Tensor):
            return value
        return Tensor(np.full(like.shape, float(value)))

    # ---- elementwise binary ops ---------------------------------------

    def add(self, other) -> "Tensor":
        other = Tensor._lift(other, self)
        if self.shape != other.shape:
            raise ShapeMismatchError(f"add: {self.shape} vs {other.shape}")
        a, b = self, other

        def vjp(g):
            if a.requires_grad:
                a._accumulate(g)
            if b.requires_grad:
                b._accumulate(g)

        return Tensor._record("add", (a, b), a.data + b.data, vjp)

    def sub(self, other) -> "Tensor":
        other = Tensor._lift(other, self)
        if self.shape != other.shape:
            raise ShapeMismatchError(f"sub: {self.shape} vs {other.shape}")
        a, b = self, other

        def vjp(g):
            if a.requires_grad:
                a._accumulate(g)
            if b.requires_grad:
                b._accumulate(-g)

        return Tensor._record("sub", (a, b), a.data - b.data, vjp)

    def mul(self, other) -> "Tensor":
        other = Tensor._lift(other, self)
        if self.shape != other.shape:
            raise ShapeMismatchError(f"mul: {self.shape} vs {other.shape}")
        a, b = self, other

        def vjp(g):
            if a.requires_grad:
                a._accumulate(g * b.data)
            if b.requires_grad:
                b._accumulate(g * a.data)

        return Tensor._record("mul", (a, b), a.data * b.data, vjp)

    def matmul(self, other: "Tensor") -> "Tensor":
        a, b = self, other
        if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
            raise ShapeMismatchError(f"matmul: {a.shape} @ {b.shape}")

        def vjp(g):
            if a.requires_grad:
                a._accumulate(g @ b.data.T)
            if b.requires_grad:
                b._accumulate(a.data.T @ g)

        return Tensor._record("matmul", (a, b), a.data @ b.data, vjp)

    def broadcast_add_row(self, row: "Tensor") -> "Tensor":
        """Add a row vector to every row of a matrix (the only broadcast)."""
        a, b = self, row
        if a.data.ndim != 2 or b.data.ndim != 1 or a.shape[1] != b.shape[0]:
            raise ShapeMismatchError(f"broadcast_add_row: {a.shape} + {b.shape}")

        def vjp(g):
            if a.requires_grad:
                a._accumulate(g)
            if b.requires_grad:
                b._accumulate(g.sum(axis=0))

        return Tensor._record("broadcast_add_row", (a, b), a.data + b.data, vjp)

    # ---- reductions ----------------------------------------------------

    def sum(self) -> "Tensor":
        a = self

        def vjp(g):
            if a.requires_grad:
                a._accumulate(np.full_like(a.data, g.flat[0]))

        return Tensor._record("sum", (a,), np.asarray(a.data.sum()), vjp)

    def mean(self) -> "Tensor":
        a = self
        n = a.data.size

        def vjp(g):
            if a.requires_grad:
                a._accumulate(np.full_like(a.data, g.flat[0] / n))

        return Tensor._record("mean", (a,), np.asarray(a.data.mean()), vjp)

    # ---- elementwise unary ops ----------------------------------------

    def abs(self) -> "Tensor":
        a = self

        def vjp(g):
            if a.requires_grad:
                a._accumulate(g * np.sign(a.data))

        return Tensor._record("abs", (a,), np.abs(a.data), vjp)

    def log(self, clamp: bool = True) -> "Tensor":
        """Natural log. Inputs below LOG_CLAMP are clamped up to it, which
        keeps log(D) / log(1 - D) terms finite when a sigmoid saturates to
        an exact 0.0 or 1.0 in float64. With clamp=False a non-positive
        input raises DomainError instead.
        """
        a = self
        if not clamp and np.any(a.data <= 0.0):
            raise DomainError("log of non-positive value with clamping disabled")
        clamped = np.maximum(a.data, LOG_CLAMP)

        def vjp(g):
            if a.requires_grad:
                deriv = np.where(a.data > LOG_CLAMP, 1.0 / clamped, 0.0)
                a._accumulate(g * deriv)

        return Tensor._record("log", (a,), np.log(clamped), vjp)

    def sigmoid(self) -> "Tensor":
        a = self
        x = a.data
        out = np.empty_like(x)
        pos = x >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
        ex = np.exp(x[~pos])
        out[~pos] = ex / (1.0 + ex)

        def vjp(g):
            if a.requires_grad:
                a._accumulate(g * out * (1.0 - out))

        return Tensor._record("sigmoid", (a,), out, vjp)

    def tanh(self) -> "Tensor":
        a = self
        out = np.tanh(a.data)

        def vjp(g):
            if a.requires_grad:
                a._accumulate(g * (1.0 - out * out))

        return Tensor._record("tanh", (a,), out, vjp)

    def leaky_relu(self) -> "Tensor":
        a = self

        def vjp(g):
            if a.requires_grad:
                a._accumulate(g * np.where(a.data > 0.0, 1.0, LEAKY_SLOPE))

        out = np.where(a.data > 0.0, a.data, LEAKY_SLOPE * a.data)
        return Tensor._record("leaky_relu", (a,), out, vjp)

    # ---- operator sugar -------------------------------------------------

    def __add__(self, other):
        return self.add(other)

    __radd__ = __add__

    def __sub__(self, other):
        return self.sub(other)

    def __rsub__(self, other):
        return Tensor._lift(other, self).sub(self)

    def __mul__(self, other):
        return self.mul(other)

    __rmul__ = __mul__

    def __neg__(self):
        return self.mul(-1.0)

    def __matmul__(self, other):
        return self.matmul(other)


_UNARY = {"sum", "mean", "abs", "log", "sigmoid", "tanh", "leaky_relu"}
_BINARY = {"add", "sub", "mul", "matmul", "broadcast_add_row"}


def op_forward(kind: str, inputs: list[Tensor]) -> Tensor:
    """Dispatch an op by name; uniform surface for the op-level test suite."""
    if kind in _UNARY:
        if len(inputs) != 1:
            raise ShapeMismatchError(f"{kind} takes one input, got {len(inputs)}")
        return getattr(inputs[0], kind)()
    if kind in _BINARY:
        if len(inputs) != 2:
            raise ShapeMismatchError(f"{kind} takes two inputs, got {len(inputs)}")
        return getattr(inputs[0], kind)(inputs[1])
    raise ValueError(f"unknown op kind: {kind}")


def backward(graph: Graph, root: Tensor) -> None:
    """Populate gradients of root w.r.t. every tracked tensor in the graph.

    Visits the tape in strict reverse append order; fan-out accumulates
    additively because every vjp adds into its inputs' grads.
    """
    if root.data.size != 1:
        raise NonScalarRootError(f"backward root has shape {root.shape}")
    if not root.requires_grad:
        raise ValueError("backward root does not require grad")
    root.grad[...] = 1.0
    for node in reversed(graph.nodes):
        node.vjp(node.out.grad)


class Adam:
    """Adam with bias correction; zeroes the grads it consumed after a step."""

    def __init__(self, params: list[Tensor], lr: float,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        for p in self.params:
            if p.grad is None:
                raise MissingGradError("parameter has no populated gradient")
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for i, p in enumerate(self.params):
            g = p.grad
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * g
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * g * g
            m_hat = self.m[i] / (1.0 - b1 ** self.t)
            v_hat = self.v[i] / (1.0 - b2 ** self.t)
            p.data -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
            p.grad[...] = 0.0


class GradientDescent:
    """Plain SGD step, kept for the latent-search step-rule switch."""

    def __init__(self, params: list[Tensor], lr: float):
        self.params = list(params)
        self.lr = lr

    def step(self):
        for p in self.params:
            if p.grad is None:
                raise MissingGradError("parameter has no populated gradient")
            p.data -= self.lr * p.grad
            p.grad[...] = 0.0


def finite_difference(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of a scalar function at x, the
    independent oracle used against analytic gradients."""
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def rel_error(a: float, f: float) -> float:
    """|a - f| / max(1e-8, |a| + |f|), the gradient-check metric."""
    return abs(a - f) / max(1e-8, abs(a) + abs(f))


def grads_match(analytic: np.ndarray, numeric: np.ndarray, tol: float) -> bool:
    a = np.asarray(analytic).reshape(-1)
    n = np.asarray(numeric).reshape(-1)
    if a.shape != n.shape:
        return False
    return all(rel_error(x, y) < tol for x, y in zip(a, n))


def uniform_latents(rng: np.random.Generator, batch: int, z_dim: int) -> np.ndarray:
    """Latent prior: uniform on [-1, 1]^z_dim."""
    return rng.uniform(-1.0, 1.0, size=(batch, z_dim))


def seeded_rng(*entropy) -> np.random.Generator:
    """Deterministic generator from a tuple of ints (platform-stable)."""
    flat = []
    for e in entropy:
        flat.append(int(e) & 0xFFFFFFFFFFFFFFFF)
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(flat)))


def derive_seed(*entropy) -> int:
    """Collapse a tuple of ints into one stable 63-bit seed."""
    ss = np.random.SeedSequence([int(e) & 0xFFFFFFFFFFFFFFFF for e in entropy])
    return int(ss.generate_state(1, dtype=np.uint64)[0] & 0x7FFFFFFFFFFFFFFF)
