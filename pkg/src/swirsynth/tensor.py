"""Dense tensors with reverse-mode gradients.

Implements exactly the operators the band-synthesis network needs:
same-padded 2D convolution, relu, elementwise add, scalar scale, and the
reductions used by the losses. Arithmetic defaults to float32; gradient
checks run in float64. There is deliberately no general autodiff engine
here - the small fixed operator set keeps every gradient rule verifiable
against finite differences.
"""

from __future__ import annotations

import contextlib

import numpy as np

__all__ = [
    "Tensor",
    "Parameter",
    "GraphError",
    "no_grad",
    "conv2d",
    "relu",
    "add",
    "scale",
    "tensor_sum",
    "tensor_mean",
    "mae_loss",
    "backward",
    "finite_diff_check",
]


class GraphError(RuntimeError):
    """Raised when backward is invoked without a recorded expression."""


_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording (inference / evaluation fast path)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """A dense array plus an optional link into the recorded expression.

    ``data`` is float32 by default (float64 is preserved when given, for
    gradient checking). Interior nodes carry ``_parents`` and a ``_vjp``
    closure mapping the incoming output gradient to per-parent gradients.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = None
        self._parents = ()
        self._vjp = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(()))

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype})"


class Parameter(Tensor):
    """Trainable tensor; ``grad`` accumulates across backward passes."""

    def __init__(self, data):
        super().__init__(data, requires_grad=True)
        self.grad = np.zeros_like(self.data)

    def zero_grad(self):
        self.grad[...] = 0


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data: np.ndarray, parents, vjp) -> Tensor:
    """Build a graph node, or a detached tensor when recording is off."""
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad or p._parents for p in parents):
        out._parents = tuple(parents)
        out._vjp = vjp
    return out


def _needs_grad(t: Tensor) -> bool:
    return t.requires_grad or bool(t._parents)


# ---------------------------------------------------------------------------
# operators


def conv2d(x, kernel: Parameter, bias: Parameter) -> Tensor:
    """Same-padded 2D convolution over channels-last input.

    ``x`` is (H, W, Cin) or batched (B, H, W, Cin); ``kernel`` is
    (kh, kw, Cin, Cout) with odd kh, kw; ``bias`` is (Cout,). Zero fill
    outside the input, so spatial extent is preserved. Evaluated as a
    shift-and-add over kernel taps: each tap is one GEMM on a strided
    view, which avoids materialising an im2col matrix.
    """
    x = _as_tensor(x)
    xd = x.data
    kd = kernel.data
    if kd.ndim != 4:
        raise ValueError(f"kernel must be 4-d (kh, kw, Cin, Cout), got {kd.shape}")
    kh, kw, cin, cout = kd.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValueError(f"kernel extents must be odd, got {kh}x{kw}")
    if bias.data.shape != (cout,):
        raise ValueError(f"bias shape {bias.data.shape} does not match Cout={cout}")

    batched = xd.ndim == 4
    if xd.ndim == 3:
        xd = xd[None]
    elif xd.ndim != 4:
        raise ValueError(f"input must be (H, W, C) or (B, H, W, C), got {x.shape}")
    b, h, w, cx = xd.shape
    if cx != cin:
        raise ValueError(f"channel mismatch: input has {cx}, kernel expects {cin}")
    if h < kh or w < kw:
        raise ValueError(f"input {h}x{w} smaller than kernel {kh}x{kw}")

    ph, pw = kh // 2, kw // 2
    xp = np.pad(xd, ((0, 0), (ph, ph), (pw, pw), (0, 0)))
    out = np.zeros((b, h, w, cout), dtype=np.result_type(xd.dtype, kd.dtype))
    for u in range(kh):
        for v in range(kw):
            out += xp[:, u : u + h, v : v + w, :] @ kd[u, v]
    out += bias.data
    if not batched:
        out = out[0]

    def vjp(g):
        g4 = g if g.ndim == 4 else g[None]
        gflat = g4.reshape(-1, cout)
        db = gflat.sum(axis=0)
        dk = np.empty_like(kd)
        for u in range(kh):
            for v in range(kw):
                taps = np.ascontiguousarray(xp[:, u : u + h, v : v + w, :])
                dk[u, v] = taps.reshape(-1, cin).T @ gflat
        dx = None
        if _needs_grad(x):
            gp = np.pad(g4, ((0, 0), (ph, ph), (pw, pw), (0, 0)))
            dx = np.zeros_like(xd)
            for u in range(kh):
                for v in range(kw):
                    dx += gp[:, u : u + h, v : v + w, :] @ kd[kh - 1 - u, kw - 1 - v].T
            if not batched:
                dx = dx[0]
        return dx, dk, db

    return _node(out, (x, kernel, bias), vjp)


def relu(x) -> Tensor:
    """Elementwise max(0, x); gradient at exactly 0 is defined as 0."""
    x = _as_tensor(x)
    out = np.maximum(x.data, 0)

    def vjp(g):
        return ((x.data > 0) * g,)

    return _node(out, (x,), vjp)


def add(a, b) -> Tensor:
    """Elementwise sum of two equal-shape tensors."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.shape != b.data.shape:
        raise ValueError(f"shape mismatch in add: {a.shape} vs {b.shape}")

    def vjp(g):
        return g, g

    return _node(a.data + b.data, (a, b), vjp)


def scale(x, s: float) -> Tensor:
    """Multiply every element by the scalar ``s``."""
    x = _as_tensor(x)
    s = float(s)

    def vjp(g):
        return (g * s,)

    return _node(x.data * s, (x,), vjp)


def tensor_sum(x) -> Tensor:
    """Sum of all elements, as a scalar tensor."""
    x = _as_tensor(x)
    out = np.asarray(x.data.sum(), dtype=x.data.dtype)

    def vjp(g):
        return (np.broadcast_to(g, x.data.shape),)

    return _node(out, (x,), vjp)


def tensor_mean(x) -> Tensor:
    """Mean of all elements, as a scalar tensor."""
    x = _as_tensor(x)
    n = x.data.size
    out = np.asarray(x.data.mean(), dtype=x.data.dtype)

    def vjp(g):
        return (np.broadcast_to(g / n, x.data.shape),)

    return _node(out, (x,), vjp)


def mae_loss(pred, target) -> Tensor:
    """Mean absolute error; subgradient at ties is 0.

    ``target`` is treated as a constant: no gradient flows into it.
    """
    pred = _as_tensor(pred)
    tgt = target.data if isinstance(target, Tensor) else np.asarray(target)
    if pred.data.shape != tgt.shape:
        raise ValueError(f"shape mismatch in mae_loss: {pred.shape} vs {tgt.shape}")
    diff = pred.data - tgt
    n = diff.size
    out = np.asarray(np.abs(diff).mean(), dtype=pred.data.dtype)

    def vjp(g):
        return (np.sign(diff) * (g / n),)

    return _node(out, (pred,), vjp)


# ---------------------------------------------------------------------------
# reverse pass


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(parameter) into every reachable ``grad``.

    Repeated calls without zeroing accumulate. Single-threaded and
    deterministic: the traversal order is a function of the graph alone.
    """
    if loss.data.size != 1:
        raise GraphError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._vjp is None and not loss.requires_grad:
        raise GraphError("backward called before any forward pass was recorded")

    # iterative post-order topological sort
    topo: list[Tensor] = []
    seen = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(topo):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.requires_grad:
            if node.grad is None:
                node.grad = np.zeros_like(node.data)
            node.grad += g
        if node._vjp is None:
            continue
        for parent, pg in zip(node._parents, node._vjp(g)):
            if pg is None:
                continue
            if id(parent) in grads:
                grads[id(parent)] = grads[id(parent)] + pg
            else:
                grads[id(parent)] = pg


# ---------------------------------------------------------------------------
# verification oracle


def finite_diff_check(f, params, eps: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` is a deterministic zero-argument callable returning a scalar
    Tensor built from ``params``. Every parameter entry is perturbed by
    +/- eps in turn. Requires float64 parameters; the relative error for
    entry i is |a_i - c_i| / max(|a_i|, |c_i|, 1e-12).
    """
    if eps <= 0:
        raise ValueError("finite_diff_check requires eps > 0")
    params = list(params)
    for p in params:
        if p.data.dtype != np.float64:
            raise ValueError("gradient checks require float64 parameters")
        p.zero_grad()

    out = f()
    backward(out)
    analytic = [p.grad.copy() for p in params]

    worst = 0.0
    for p, ana in zip(params, analytic):
        flat = p.data.reshape(-1)
        aflat = ana.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            f_plus = f().item()
            flat[i] = orig - eps
            f_minus = f().item()
            flat[i] = orig
            central = (f_plus - f_minus) / (2.0 * eps)
            if not (np.isfinite(central) and np.isfinite(aflat[i])):
                raise FloatingPointError("non-finite value during gradient check")
            rel = abs(aflat[i] - central) / max(abs(aflat[i]), abs(central), 1e-12)
            worst = max(worst, rel)
    return worst
