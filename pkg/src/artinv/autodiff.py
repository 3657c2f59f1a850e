"""Dense float64 tensors with reverse-mode automatic differentiation.

Every operation records its parent tensors and a vector-Jacobian-product
closure on the result tensor; ``backward`` linearizes the recorded graph
into reverse topological order and replays the adjoints, accumulating
gradients additively wherever a tensor is used more than once.  All
arithmetic is 64-bit and single-threaded, so identical inputs produce
bitwise identical outputs and gradients.
"""

from __future__ import annotations

from contextlib import contextmanager

import numpy as np

from .errors import NumericalError


class ShapeError(ValueError):
    """Operand shapes do not conform for the attempted operation."""


_grad_enabled = True


@contextmanager
def no_grad():
    """Suppress graph recording inside the block (forward-only evaluation)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """N-dimensional float64 array participating in the gradient tape."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_vjp", "_op")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._vjp = None
        self._op = None

    @property
    def shape(self):
        return self.data.shape

    def item(self) -> float:
        return float(self.data.reshape(()))

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    def __repr__(self):
        grad = ", grad" if self.grad is not None else ""
        return f"Tensor(shape={self.data.shape}, op={self._op}{grad})"

    # -- operator sugar -------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def transpose(self):
        return transpose(self)

    @property
    def T(self):
        return transpose(self)


def _as_tensor(value) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


def _make(data, op: str, parents, vjp) -> Tensor:
    """Wrap an op result; record parents + adjoint only when grads are live."""
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._vjp = vjp
        out._op = op
    return out


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    """Sum ``grad`` over the axes numpy broadcasting introduced."""
    if grad.shape == tuple(shape):
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _apply_elementwise(op: str, fn, a: Tensor, b: Tensor) -> np.ndarray:
    try:
        return fn(a.data, b.data)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.data.shape} and {b.data.shape} do not broadcast") from None


# -- elementwise primitives ---------------------------------------------

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = _apply_elementwise("add", np.add, a, b)

    def vjp(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _make(out, "add", (a, b), vjp)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = _apply_elementwise("sub", np.subtract, a, b)

    def vjp(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)

    return _make(out, "sub", (a, b), vjp)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = _apply_elementwise("mul", np.multiply, a, b)

    def vjp(g):
        return (_unbroadcast(g * b.data, a.data.shape),
                _unbroadcast(g * a.data, b.data.shape))

    return _make(out, "mul", (a, b), vjp)


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = _apply_elementwise("div", np.divide, a, b)

    def vjp(g):
        return (_unbroadcast(g / b.data, a.data.shape),
                _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return _make(out, "div", (a, b), vjp)


def square(x) -> Tensor:
    x = _as_tensor(x)

    def vjp(g):
        return (g * 2.0 * x.data,)

    return _make(x.data * x.data, "square", (x,), vjp)


def sqrt(x) -> Tensor:
    x = _as_tensor(x)
    y = np.sqrt(x.data)

    def vjp(g):
        return (g * 0.5 / y,)

    return _make(y, "sqrt", (x,), vjp)


def sigmoid(x) -> Tensor:
    x = _as_tensor(x)
    y = 1.0 / (1.0 + np.exp(-x.data))

    def vjp(g):
        return (g * y * (1.0 - y),)

    return _make(y, "sigmoid", (x,), vjp)


def tanh(x) -> Tensor:
    x = _as_tensor(x)
    y = np.tanh(x.data)

    def vjp(g):
        return (g * (1.0 - y * y),)

    return _make(y, "tanh", (x,), vjp)


def relu(x) -> Tensor:
    x = _as_tensor(x)
    mask = x.data > 0

    def vjp(g):
        return (g * mask,)

    return _make(np.where(mask, x.data, 0.0), "relu", (x,), vjp)


def softmax(x) -> Tensor:
    """Softmax over the last axis (numerically stabilized)."""
    x = _as_tensor(x)
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        dot = (g * y).sum(axis=-1, keepdims=True)
        return (y * (g - dot),)

    return _make(y, "softmax", (x,), vjp)


# -- linear algebra and structure ----------------------------------------

def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul: expects 2-D operands, got {a.data.shape} and {b.data.shape}")
    if a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul: inner dimensions differ, {a.data.shape} vs {b.data.shape}")

    def vjp(g):
        return g @ b.data.T, a.data.T @ g

    return _make(a.data @ b.data, "matmul", (a, b), vjp)


def transpose(x) -> Tensor:
    x = _as_tensor(x)
    if x.data.ndim != 2:
        raise ShapeError(f"transpose: expects a 2-D operand, got {x.data.shape}")

    def vjp(g):
        return (g.T,)

    return _make(x.data.T, "transpose", (x,), vjp)


def reshape(x, shape) -> Tensor:
    x = _as_tensor(x)

    def vjp(g):
        return (g.reshape(x.data.shape),)

    return _make(x.data.reshape(shape), "reshape", (x,), vjp)


def broadcast_to(x, shape) -> Tensor:
    """Materialize ``x`` broadcast to ``shape`` (e.g. a bias row over frames)."""
    x = _as_tensor(x)
    try:
        y = np.broadcast_to(x.data, shape).copy()
    except ValueError:
        raise ShapeError(f"broadcast_to: cannot broadcast {x.data.shape} to {tuple(shape)}") from None

    def vjp(g):
        return (_unbroadcast(g, x.data.shape),)

    return _make(y, "broadcast_to", (x,), vjp)


def concat(tensors, axis: int = -1) -> Tensor:
    """Concatenate along ``axis`` (feature axis by default)."""
    parts = [_as_tensor(t) for t in tensors]
    if not parts:
        raise ShapeError("concat: needs at least one tensor")
    try:
        data = np.concatenate([p.data for p in parts], axis=axis)
    except ValueError:
        raise ShapeError(
            f"concat: shapes {[p.data.shape for p in parts]} do not align on axis {axis}"
        ) from None
    sizes = [p.data.shape[axis] for p in parts]
    offsets = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, offsets, axis=axis))

    return _make(data, "concat", parts, vjp)


def narrow(x, axis: int, start: int, stop: int) -> Tensor:
    """Slice ``x`` along ``axis`` keeping rows/columns ``start:stop``."""
    x = _as_tensor(x)
    if axis not in (0, 1) or x.data.ndim != 2:
        raise ShapeError(f"narrow: expects a 2-D operand and axis 0/1, got {x.data.shape}, axis {axis}")
    extent = x.data.shape[axis]
    if not (0 <= start < stop <= extent):
        raise ShapeError(f"narrow: range [{start}, {stop}) invalid for axis {axis} of {x.data.shape}")
    index = (slice(start, stop), slice(None)) if axis == 0 else (slice(None), slice(start, stop))

    def vjp(g):
        full = np.zeros_like(x.data)
        full[index] = g
        return (full,)

    return _make(x.data[index].copy(), "narrow", (x,), vjp)


def flip(x, axis: int = 0) -> Tensor:
    """Reverse the order of entries along ``axis`` (time reversal)."""
    x = _as_tensor(x)

    def vjp(g):
        return (np.flip(g, axis=axis).copy(),)

    return _make(np.flip(x.data, axis=axis).copy(), "flip", (x,), vjp)


def tsum(x, axis=None, keepdims=False) -> Tensor:
    x = _as_tensor(x)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.data.shape).copy(),)

    return _make(x.data.sum(axis=axis, keepdims=keepdims), "sum", (x,), vjp)


def tmean(x, axis=None, keepdims=False) -> Tensor:
    x = _as_tensor(x)
    count = x.data.size if axis is None else x.data.shape[axis]

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.data.shape).copy() / count,)

    return _make(x.data.mean(axis=axis, keepdims=keepdims), "mean", (x,), vjp)


def conv1d(x, w, b=None, padding="same") -> Tensor:
    """1-D cross-correlation over the time axis.

    ``x`` is [T, C_in], ``w`` is [C_out, C_in, K], ``b`` is [C_out] or None.
    ``padding`` is "same" (requires odd K, preserves T) or an integer number
    of zero rows added at each end.  No kernel flip is applied: output
    ``y[t, o] = b[o] + sum_{c,k} w[o, c, k] * x_padded[t + k, c]``.
    """
    x, w = _as_tensor(x), _as_tensor(w)
    if x.data.ndim != 2 or w.data.ndim != 3:
        raise ShapeError(f"conv1d: expects x [T, C_in] and w [C_out, C_in, K], got {x.data.shape} and {w.data.shape}")
    t_in, c_in = x.data.shape
    c_out, c_in_w, k = w.data.shape
    if c_in != c_in_w:
        raise ShapeError(f"conv1d: input has {c_in} channels but kernel expects {c_in_w}")
    if t_in < 1:
        raise ShapeError("conv1d: input has no frames")
    if padding == "same":
        if k % 2 == 0:
            raise ShapeError(f"conv1d: 'same' padding requires an odd kernel size, got {k}")
        pad = (k - 1) // 2
    else:
        pad = int(padding)
        if pad < 0:
            raise ShapeError(f"conv1d: negative padding {pad}")
    t_out = t_in + 2 * pad - k + 1
    if t_out < 1:
        raise ShapeError(f"conv1d: kernel size {k} with padding {pad} exceeds input length {t_in}")

    parents = [x, w]
    if b is not None:
        b = _as_tensor(b)
        if b.data.shape != (c_out,):
            raise ShapeError(f"conv1d: bias shape {b.data.shape} does not match {c_out} output channels")
        parents.append(b)

    xp = np.pad(x.data, ((pad, pad), (0, 0)))
    windows = np.lib.stride_tricks.sliding_window_view(xp, k, axis=0)  # [T_out, C_in, K]
    y = np.tensordot(windows, w.data, axes=([1, 2], [1, 2]))
    if b is not None:
        y = y + b.data

    def vjp(g):
        gw = np.tensordot(g, windows, axes=(0, 0))  # [C_out, C_in, K]
        gp = np.pad(g, ((k - 1, k - 1), (0, 0)))
        gwin = np.lib.stride_tricks.sliding_window_view(gp, k, axis=0)  # [T_in + 2*pad, C_out, K]
        gx_padded = np.tensordot(gwin, w.data[:, :, ::-1], axes=([1, 2], [0, 2]))
        gx = gx_padded[pad:pad + t_in]
        if b is not None:
            return gx, gw, g.sum(axis=0)
        return gx, gw

    return _make(y, "conv1d", parents, vjp)


def lstm_sequence(x, wx, wh, b, hidden: int) -> Tensor:
    """Single-direction LSTM over a [T, D] sequence; returns the [T, H]
    hidden-state trajectory from zero initial state.

    Fused primitive: gates use the (input, forget, candidate, output) block
    order in the [D, 4H] / [H, 4H] matrices, sigmoid for i/f/o and tanh for
    the candidate.  The adjoint is backprop-through-time with the weight
    gradients formed as whole-sequence GEMMs, which is why this is one tape
    node instead of ~15 per step.
    """
    x, wx, wh, b = _as_tensor(x), _as_tensor(wx), _as_tensor(wh), _as_tensor(b)
    frames, in_dim = x.data.shape
    if frames < 1:
        raise ShapeError("lstm_sequence: input has no frames")
    if wx.data.shape != (in_dim, 4 * hidden):
        raise ShapeError(f"lstm_sequence: wx shape {wx.data.shape} != ({in_dim}, {4 * hidden})")
    if wh.data.shape != (hidden, 4 * hidden):
        raise ShapeError(f"lstm_sequence: wh shape {wh.data.shape} != ({hidden}, {4 * hidden})")
    if b.data.shape != (4 * hidden,):
        raise ShapeError(f"lstm_sequence: bias shape {b.data.shape} != ({4 * hidden},)")

    xw = x.data @ wx.data
    h_prev = np.zeros((frames, hidden))   # h_0 .. h_{T-1}
    gate_i = np.empty((frames, hidden))
    gate_f = np.empty((frames, hidden))
    cand = np.empty((frames, hidden))
    gate_o = np.empty((frames, hidden))
    cells = np.empty((frames, hidden))    # c_1 .. c_T
    tanh_c = np.empty((frames, hidden))
    states = np.empty((frames, hidden))   # h_1 .. h_T

    h = np.zeros(hidden)
    c = np.zeros(hidden)
    wh_data = wh.data
    b_data = b.data
    for t in range(frames):
        h_prev[t] = h
        z = xw[t] + h @ wh_data + b_data
        zi, zf, zg, zo = z[:hidden], z[hidden:2 * hidden], z[2 * hidden:3 * hidden], z[3 * hidden:]
        i_t = 1.0 / (1.0 + np.exp(-zi))
        f_t = 1.0 / (1.0 + np.exp(-zf))
        g_t = np.tanh(zg)
        o_t = 1.0 / (1.0 + np.exp(-zo))
        c = f_t * c + i_t * g_t
        tc = np.tanh(c)
        h = o_t * tc
        gate_i[t], gate_f[t], cand[t], gate_o[t] = i_t, f_t, g_t, o_t
        cells[t], tanh_c[t], states[t] = c, tc, h

    def vjp(g):
        dz = np.empty((frames, 4 * hidden))
        wh_t = wh_data.T
        dh_next = np.zeros(hidden)
        dc_next = np.zeros(hidden)
        for t in range(frames - 1, -1, -1):
            dh = g[t] + dh_next
            i_t, f_t, g_t, o_t = gate_i[t], gate_f[t], cand[t], gate_o[t]
            tc = tanh_c[t]
            dc = dh * o_t * (1.0 - tc * tc) + dc_next
            c_before = cells[t - 1] if t > 0 else np.zeros(hidden)
            dz_t = dz[t]
            dz_t[:hidden] = dc * g_t * i_t * (1.0 - i_t)
            dz_t[hidden:2 * hidden] = dc * c_before * f_t * (1.0 - f_t)
            dz_t[2 * hidden:3 * hidden] = dc * i_t * (1.0 - g_t * g_t)
            dz_t[3 * hidden:] = dh * tc * o_t * (1.0 - o_t)
            dh_next = dz_t @ wh_t
            dc_next = dc * f_t
        return (dz @ wx.data.T, x.data.T @ dz, h_prev.T @ dz, dz.sum(axis=0))

    return _make(states, "lstm_sequence", (x, wx, wh, b), vjp)


# -- backward pass --------------------------------------------------------

def _topo_order(loss: Tensor):
    """Iterative post-order over the recorded graph (graphs outgrow the
    recursion limit for long sequences)."""
    order = []
    visited = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in visited:
                stack.append((parent, False))
    return order


def backward(loss: Tensor):
    """Populate ``grad`` on every requires-grad tensor reachable from ``loss``."""
    if loss.data.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.data.shape}")
    if not loss.requires_grad:
        return
    order = _topo_order(loss)
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._vjp is None:
            continue
        grads = node._vjp(node.grad)
        for parent, g in zip(node._parents, grads):
            if not parent.requires_grad or g is None:
                continue
            # accumulation rebinds rather than mutating, so aliased arrays
            # coming out of a vjp are safe to hold
            if parent.grad is None:
                parent.grad = g
            else:
                parent.grad = parent.grad + g


def grad_check(function, point: Tensor, step: float = 1e-6) -> float:
    """Compare analytic gradients of a scalar-valued ``function`` against
    central finite differences at ``point``.

    Returns the maximum over coordinates of
    ``|analytic - numeric| / max(|analytic|, |numeric|, 1e-12)``.
    """
    if not (0.0 < step <= 1e-3):
        raise ValueError(f"grad_check: step {step} outside (0, 1e-3]")
    base = np.asarray(point.data, dtype=np.float64).copy()

    x = Tensor(base.copy(), requires_grad=True)
    out = function(x)
    if out.data.size != 1:
        raise ShapeError(f"grad_check: function must return a scalar, got shape {out.data.shape}")
    backward(out)
    analytic = np.zeros_like(base) if x.grad is None else x.grad.reshape(base.shape)

    worst = 0.0
    flat = base.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            hi = function(Tensor(base.copy())).item()
            flat[i] = orig - step
            lo = function(Tensor(base.copy())).item()
            flat[i] = orig
            numeric = (hi - lo) / (2.0 * step)
            a = analytic.reshape(-1)[i]
            if not (np.isfinite(numeric) and np.isfinite(a)):
                raise NumericalError(f"grad_check: non-finite value at coordinate {i} (analytic={a}, numeric={numeric})")
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-12)
            worst = max(worst, err)
    return worst


def check_gradients(build_loss, tensors, step: float = 1e-6, max_coords=None, rng=None,
                    coord_mode: str = "random") -> float:
    """Finite-difference check for gradients landing on existing tensors.

    ``build_loss`` reconstructs the scalar loss from current tensor contents
    each time it is called; ``tensors`` are the requires-grad leaves to check
    (layer parameters, inputs).  Coordinates are perturbed in place and
    restored.  When ``max_coords`` is set, that many coordinates per tensor
    are sampled with ``rng`` (coord_mode "random"), or the largest-gradient
    coordinates are taken (coord_mode "largest" - sidesteps the difference
    quotient's roundoff floor on near-zero coordinates).  Returns the max
    relative error seen.
    """
    tensors = list(tensors)
    for t in tensors:
        t.zero_grad()
    loss = build_loss()
    backward(loss)

    worst = 0.0
    with no_grad():
        for t in tensors:
            analytic = np.zeros_like(t.data) if t.grad is None else t.grad
            flat = t.data.reshape(-1)
            n = flat.size
            if max_coords is None or n <= max_coords:
                coords = range(n)
            elif coord_mode == "largest":
                coords = np.argsort(np.abs(analytic.reshape(-1)))[-max_coords:]
            else:
                coords = rng.choice(n, size=max_coords, replace=False)
            for i in coords:
                orig = flat[i]
                flat[i] = orig + step
                hi = build_loss().item()
                flat[i] = orig - step
                lo = build_loss().item()
                flat[i] = orig
                numeric = (hi - lo) / (2.0 * step)
                a = analytic.reshape(-1)[i]
                if not (np.isfinite(numeric) and np.isfinite(a)):
                    raise NumericalError(f"check_gradients: non-finite value at coordinate {i}")
                err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-12)
                worst = max(worst, err)
    return worst
