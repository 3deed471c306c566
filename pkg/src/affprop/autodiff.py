"""Dense float64 tensors with tape-based reverse-mode differentiation.

The operation set is deliberately small: exactly what the affinity /
diffusion / reconstruction pipeline and its losses need.  Forward values
are numpy arrays; every differentiable op records a node on an explicit
`Tape`, and `backward` walks the tape once in reverse append order.
There is no global state: independent tapes can live in independent
threads.
"""

from __future__ import annotations

from functools import lru_cache
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .errors import ConfigError, ContractError, DimensionError, UndefinedResultError

Array = np.ndarray


class Tensor:
    """A dense float64 array with an optional gradient slot.

    `tape` / `node_id` locate the tensor on the active tape; both are
    None for constants and for tensors outside any recorded graph.
    """

    __slots__ = ("data", "grad", "tape", "node_id")

    def __init__(self, data):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim and not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.grad: Optional[Array] = None
        self.tape: Optional[Tape] = None
        self.node_id: Optional[int] = None

    @property
    def shape(self):
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape})"

    # arithmetic sugar; the module-level functions do the real work
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


class Parameter:
    """Named trainable tensor.  `group` selects the learning-rate group."""

    GROUPS = ("fresh", "pretrained")

    def __init__(self, name: str, data, group: str = "fresh"):
        if group not in self.GROUPS:
            raise ContractError(f"unknown parameter group {group!r}")
        self.name = name
        self.tensor = Tensor(data)
        self.group = group

    @property
    def data(self) -> Array:
        return self.tensor.data

    @property
    def grad(self) -> Optional[Array]:
        return self.tensor.grad

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.tensor.shape}, group={self.group!r})"


class _Node:
    __slots__ = ("op", "input_ids", "out_data", "bw")

    def __init__(self, op, input_ids, out_data, bw):
        self.op = op
        self.input_ids = input_ids
        self.out_data = out_data
        self.bw = bw


class Tape:
    """Append-only operation record; topological order is append order."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self.leaves: dict[int, Tensor] = {}

    def watch(self, t: Tensor) -> Tensor:
        """Register `t` as a leaf so backward() will populate its grad."""
        if t.tape is self and t.node_id is not None:
            return t
        t.tape = self
        t.node_id = len(self.nodes)
        self.nodes.append(_Node("leaf", (), t.data, None))
        self.leaves[t.node_id] = t
        return t

    def release(self):
        """Detach all leaves so later forwards do not record here."""
        for t in self.leaves.values():
            t.tape = None
            t.node_id = None
        self.nodes.clear()
        self.leaves.clear()

    def first_nonfinite(self) -> Optional[str]:
        """Op name of the earliest node holding a NaN/Inf, if any."""
        for node in self.nodes:
            if not np.all(np.isfinite(node.out_data)):
                return node.op
        return None


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _active_tape(tensors: Iterable[Tensor]) -> Optional[Tape]:
    tape = None
    for t in tensors:
        if t.tape is None:
            continue
        if tape is None:
            tape = t.tape
        elif tape is not t.tape:
            raise ContractError("operation mixes tensors from different tapes")
    return tape


def _record(op: str, inputs: Sequence[Tensor], out_data: Array,
            bw: Callable[[Array], tuple]) -> Tensor:
    out = Tensor(out_data)
    tape = _active_tape(inputs)
    if tape is not None:
        ids = tuple(t.node_id if t.tape is tape else None for t in inputs)
        out.tape = tape
        out.node_id = len(tape.nodes)
        tape.nodes.append(_Node(op, ids, out.data, bw))
    return out


def backward(loss: Tensor):
    """Accumulate d(loss)/d(leaf) into every watched leaf's grad.

    Repeated calls without zeroing the grads accumulate.
    """
    if loss.tape is None:
        raise ContractError("loss is not recorded on any tape")
    if loss.data.shape != ():
        raise ContractError(f"loss must be scalar, got shape {loss.data.shape}")
    tape = loss.tape
    grads: list[Optional[Array]] = [None] * (loss.node_id + 1)
    grads[loss.node_id] = np.array(1.0)
    for nid in range(loss.node_id, -1, -1):
        g = grads[nid]
        grads[nid] = None
        if g is None:
            continue
        node = tape.nodes[nid]
        if node.bw is None:
            leaf = tape.leaves[nid]
            leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g
            continue
        for iid, ig in zip(node.input_ids, node.bw(g)):
            if iid is None or ig is None:
                continue
            grads[iid] = ig if grads[iid] is None else grads[iid] + ig


def _unbroadcast(grad: Array, shape: tuple) -> Array:
    """Sum `grad` down to `shape`, inverting numpy broadcasting."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise ops


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data
    ash, bsh = a.data.shape, b.data.shape
    return _record("add", (a, b), out,
                   lambda g: (_unbroadcast(g, ash), _unbroadcast(g, bsh)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data - b.data
    ash, bsh = a.data.shape, b.data.shape
    return _record("sub", (a, b), out,
                   lambda g: (_unbroadcast(g, ash), _unbroadcast(-g, bsh)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data
    ad, bd = a.data, b.data
    return _record("mul", (a, b), out,
                   lambda g: (_unbroadcast(g * bd, ad.shape),
                              _unbroadcast(g * ad, bd.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data
    ad, bd = a.data, b.data
    return _record("div", (a, b), out,
                   lambda g: (_unbroadcast(g / bd, ad.shape),
                              _unbroadcast(-g * ad / (bd * bd), bd.shape)))


def scale(x, c: float) -> Tensor:
    x = as_tensor(x)
    c = float(c)
    return _record("scale", (x,), x.data * c, lambda g: (g * c,))


def absolute(x) -> Tensor:
    """|x| elementwise; subgradient 0 at exactly 0."""
    x = as_tensor(x)
    s = np.sign(x.data)
    return _record("abs", (x,), np.abs(x.data), lambda g: (g * s,))


def sqrt(x) -> Tensor:
    x = as_tensor(x)
    out = np.sqrt(x.data)
    return _record("sqrt", (x,), out, lambda g: (g * (0.5 / out),))


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0.0
    return _record("relu", (x,), np.where(mask, x.data, 0.0),
                   lambda g: (g * mask,))


# ---------------------------------------------------------------------------
# shape ops


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    old = x.data.shape
    return _record("reshape", (x,), x.data.reshape(shape),
                   lambda g: (g.reshape(old),))


def transpose2d(x) -> Tensor:
    x = as_tensor(x)
    if x.data.ndim != 2:
        raise DimensionError(f"transpose2d expects a matrix, got shape {x.data.shape}")
    return _record("transpose", (x,), x.data.T.copy(), lambda g: (g.T,))


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    """Concatenate along `axis`; all other dims must agree."""
    ts = [as_tensor(t) for t in tensors]
    base = ts[0].data.shape
    for t in ts[1:]:
        other = t.data.shape
        if len(other) != len(base) or any(
                o != b for i, (o, b) in enumerate(zip(other, base)) if i != axis):
            raise DimensionError(
                f"concat along axis {axis}: shape {other} does not match {base}")
    sizes = [t.data.shape[axis] for t in ts]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=axis))

    return _record("concat", ts, np.concatenate([t.data for t in ts], axis=axis), bw)


def take_flat(x, indices) -> Tensor:
    """Gather elements of the flattened tensor; scatter-add on backward."""
    x = as_tensor(x)
    idx = np.asarray(indices, dtype=np.intp)
    if idx.size and (idx.min() < 0 or idx.max() >= x.data.size):
        raise ContractError(
            f"index out of bounds for tensor of size {x.data.size}")
    flat = x.data.reshape(-1)
    shape = x.data.shape

    def bw(g):
        acc = np.zeros(flat.size)
        np.add.at(acc, idx, g)
        return (acc.reshape(shape),)

    return _record("take_flat", (x,), flat[idx], bw)


def take_rows(x, indices) -> Tensor:
    """Gather rows of a matrix."""
    x = as_tensor(x)
    if x.data.ndim != 2:
        raise DimensionError(f"take_rows expects a matrix, got shape {x.data.shape}")
    idx = np.asarray(indices, dtype=np.intp)
    if idx.size and (idx.min() < 0 or idx.max() >= x.data.shape[0]):
        raise ContractError(
            f"row index out of bounds for {x.data.shape[0]} rows")
    n, c = x.data.shape

    def bw(g):
        acc = np.zeros((n, c))
        np.add.at(acc, idx, g)
        return (acc,)

    return _record("take_rows", (x,), x.data[idx], bw)


# ---------------------------------------------------------------------------
# reductions


def reduce_sum(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    shape = x.data.shape

    def bw(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        ge = np.expand_dims(g, axis) if not keepdims else g
        return (np.broadcast_to(ge, shape).copy(),)

    return _record("sum", (x,), x.data.sum(axis=axis, keepdims=keepdims), bw)


def reduce_mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    shape = x.data.shape
    count = x.data.size if axis is None else shape[axis]

    def bw(g):
        if axis is None:
            return (np.broadcast_to(g / count, shape).copy(),)
        ge = np.expand_dims(g, axis) if not keepdims else g
        return (np.broadcast_to(ge / count, shape).copy(),)

    return _record("mean", (x,), x.data.mean(axis=axis, keepdims=keepdims), bw)


def reduce_max(x) -> Tensor:
    """Maximum over all elements; gradient routes to the first argmax."""
    x = as_tensor(x)
    flat_arg = int(np.argmax(x.data))
    shape = x.data.shape

    def bw(g):
        acc = np.zeros(shape)
        acc.reshape(-1)[flat_arg] = g
        return (acc,)

    return _record("max", (x,), x.data.max(), bw)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise DimensionError(
            f"matmul shapes do not conform: {a.data.shape} x {b.data.shape}")
    ad, bd = a.data, b.data
    return _record("matmul", (a, b), ad @ bd,
                   lambda g: (g @ bd.T, ad.T @ g))


def row_softmax(m) -> Tensor:
    """Softmax along each row, stabilized by row-max subtraction."""
    m = as_tensor(m)
    if m.data.ndim != 2:
        raise DimensionError(f"row_softmax expects a matrix, got shape {m.data.shape}")
    shifted = m.data - m.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=1, keepdims=True)

    def bw(g):
        return (p * (g - (g * p).sum(axis=1, keepdims=True)),)

    return _record("row_softmax", (m,), p, bw)


def pairwise_l1(x, y=None) -> Tensor:
    """L1 distances between rows of x (N x C) and rows of y (M x C) -> N x M.

    With y omitted this is the symmetric all-pairs distance matrix of x.
    """
    x = as_tensor(x)
    y = x if y is None else as_tensor(y)
    if x.data.ndim != 2 or y.data.ndim != 2:
        raise DimensionError(
            f"pairwise_l1 expects matrices, got {x.data.shape} and {y.data.shape}")
    if x.data.shape[1] != y.data.shape[1]:
        raise DimensionError(
            f"pairwise_l1 column mismatch: {x.data.shape} vs {y.data.shape}")
    diff = x.data[:, None, :] - y.data[None, :, :]
    sgn = np.sign(diff)

    def bw(g):
        gx = (g[:, :, None] * sgn).sum(axis=1)
        gy = -(g[:, :, None] * sgn).sum(axis=0)
        return gx, gy

    return _record("pairwise_l1", (x, y), np.abs(diff).sum(axis=2), bw)


# ---------------------------------------------------------------------------
# spatial ops (channel-first maps C x H x W)


def conv2d(x, kernel, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation of a C_in x H x W map with C_out x C_in x k x k weights."""
    x, kernel = as_tensor(x), as_tensor(kernel)
    if x.data.ndim != 3 or kernel.data.ndim != 4:
        raise DimensionError(
            f"conv2d expects CHW input and OIkk kernel, got {x.data.shape} and {kernel.data.shape}")
    cin, h, w = x.data.shape
    cout, kcin, kh, kw = kernel.data.shape
    if kcin != cin:
        raise DimensionError(
            f"conv2d channel mismatch: input has {cin}, kernel expects {kcin}")
    if kh != kw or kh not in (1, 3):
        raise ContractError(f"conv2d supports square kernels of size 1 or 3, got {kh}x{kw}")
    if stride not in (1, 2):
        raise ContractError(f"conv2d supports stride 1 or 2, got {stride}")
    k = kh
    if (h + 2 * pad - k) % stride or (w + 2 * pad - k) % stride:
        raise ConfigError(
            f"conv2d output size is not integral for input {h}x{w}, "
            f"kernel {k}, stride {stride}, pad {pad}")
    oh = (h + 2 * pad - k) // stride + 1
    ow = (w + 2 * pad - k) // stride + 1

    padded = np.pad(x.data, ((0, 0), (pad, pad), (pad, pad))) if pad else x.data
    ph, pw = padded.shape[1:]
    kmat = kernel.data.reshape(cout, cin * k * k)
    if k == 1 and stride == 1:
        cols = padded.reshape(cin, oh * ow)
    else:
        # one im2col copy, then a single GEMM per direction
        windows = np.lib.stride_tricks.sliding_window_view(padded, (k, k),
                                                           axis=(1, 2))
        windows = windows[:, ::stride, ::stride]
        cols = np.ascontiguousarray(windows.transpose(0, 3, 4, 1, 2)
                                    ).reshape(cin * k * k, oh * ow)
    out = (kmat @ cols).reshape(cout, oh, ow)

    def bw(g):
        gm = g.reshape(cout, -1)
        dk = (gm @ cols.T).reshape(cout, cin, k, k)
        dcols = (kmat.T @ gm).reshape(cin, k, k, oh, ow)
        dpad = np.zeros((cin, ph, pw))
        for ky in range(k):
            for kx in range(k):
                dpad[:, ky:ky + stride * oh:stride,
                     kx:kx + stride * ow:stride] += dcols[:, ky, kx]
        dx = dpad[:, pad:pad + h, pad:pad + w] if pad else dpad
        return dx, dk

    return _record("conv2d", (x, kernel), out, bw)


@lru_cache(maxsize=32)
def _up2_matrix(n: int) -> Array:
    """Row-stochastic 2n x n bilinear upsampling operator (align corners false)."""
    m = np.zeros((2 * n, n))
    for i in range(2 * n):
        pos = i / 2.0 - 0.25
        lo = int(np.floor(pos))
        frac = pos - lo
        lo_c = min(max(lo, 0), n - 1)
        hi_c = min(max(lo + 1, 0), n - 1)
        m[i, lo_c] += 1.0 - frac
        m[i, hi_c] += frac
    return m


def bilinear_up2(x) -> Tensor:
    """Bilinear x2 upsampling of a C x H x W map (align corners false)."""
    x = as_tensor(x)
    if x.data.ndim != 3:
        raise DimensionError(f"bilinear_up2 expects CHW, got shape {x.data.shape}")
    _, h, w = x.data.shape
    uh, uw = _up2_matrix(h), _up2_matrix(w)
    # tensordot moves the contracted axis to the end, so H and W land back
    # in CHW order after the two passes
    out = np.tensordot(np.tensordot(x.data, uh, (1, 1)), uw, (1, 1))

    def bw(g):
        return (np.ascontiguousarray(
            np.tensordot(np.tensordot(g, uh, (1, 0)), uw, (1, 0))),)

    return _record("bilinear_up2", (x,), np.ascontiguousarray(out), bw)


def avg_pool2(x) -> Tensor:
    """2x2 average pooling; equals bilinear x2 downsampling (align corners false)."""
    x = as_tensor(x)
    if x.data.ndim != 3:
        raise DimensionError(f"avg_pool2 expects CHW, got shape {x.data.shape}")
    c, h, w = x.data.shape
    if h % 2 or w % 2:
        raise DimensionError(f"avg_pool2 needs even spatial dims, got {h}x{w}")
    out = x.data.reshape(c, h // 2, 2, w // 2, 2).mean(axis=(2, 4))

    def bw(g):
        return (np.repeat(np.repeat(g, 2, axis=1), 2, axis=2) * 0.25,)

    return _record("avg_pool2", (x,), out, bw)


def max_pool2(x) -> Tensor:
    """2x2 max pooling; gradient routes to the first max in each window."""
    x = as_tensor(x)
    if x.data.ndim != 3:
        raise DimensionError(f"max_pool2 expects CHW, got shape {x.data.shape}")
    c, h, w = x.data.shape
    if h % 2 or w % 2:
        raise DimensionError(f"max_pool2 needs even spatial dims, got {h}x{w}")
    windows = x.data.reshape(c, h // 2, 2, w // 2, 2).transpose(0, 1, 3, 2, 4) \
        .reshape(c, h // 2, w // 2, 4)
    arg = windows.argmax(axis=3)
    out = np.take_along_axis(windows, arg[..., None], axis=3)[..., 0]

    def bw(g):
        dwin = np.zeros((c, h // 2, w // 2, 4))
        np.put_along_axis(dwin, arg[..., None], g[..., None], axis=3)
        return (dwin.reshape(c, h // 2, w // 2, 2, 2).transpose(0, 1, 3, 2, 4)
                .reshape(c, h, w),)

    return _record("max_pool2", (x,), np.ascontiguousarray(out), bw)


def bilinear_resize(x, up: bool) -> Tensor:
    """Resize a C x H x W map by a factor of 2 (up=True) or 1/2 (up=False)."""
    return bilinear_up2(x) if up else avg_pool2(x)


# ---------------------------------------------------------------------------
# classification


def softmax_cross_entropy(logits, labels, ignore_label: Optional[int] = None) -> Tensor:
    """Mean negative log-likelihood over non-ignored positions.

    `logits` is K x N (class scores per position), `labels` a length-N
    integer array.
    """
    logits = as_tensor(logits)
    if logits.data.ndim != 2:
        raise DimensionError(
            f"softmax_cross_entropy expects K x N logits, got shape {logits.data.shape}")
    k, n = logits.data.shape
    lab = np.asarray(labels).reshape(-1)
    if lab.size != n:
        raise DimensionError(f"{lab.size} labels for {n} positions")
    valid = np.ones(n, dtype=bool) if ignore_label is None else lab != ignore_label
    if not valid.any():
        raise UndefinedResultError("cross-entropy undefined: all positions ignored")
    if lab[valid].min() < 0 or lab[valid].max() >= k:
        raise ContractError(f"labels must lie in [0, {k})")

    shifted = logits.data - logits.data.max(axis=0, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=0))
    nv = int(valid.sum())
    picked = shifted[lab[valid], np.flatnonzero(valid)]
    out = -(picked - logz[valid]).sum() / nv

    def bw(g):
        p = np.exp(shifted) / np.exp(shifted).sum(axis=0, keepdims=True)
        d = p.copy()
        d[lab[valid], np.flatnonzero(valid)] -= 1.0
        d[:, ~valid] = 0.0
        return (g * d / nv,)

    return _record("softmax_cross_entropy", (logits,), np.array(out), bw)


# ---------------------------------------------------------------------------
# gradient checking


def grad_check(f, inputs, eps: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    `f` maps the input tensor(s) to a scalar Tensor.  Relative error per
    component is |analytic - numeric| / max(|analytic|, |numeric|, 1e-8).
    """
    if eps <= 0:
        raise ContractError("eps must be positive")
    single = isinstance(inputs, Tensor)
    xs = [inputs] if single else list(inputs)

    tape = Tape()
    watched = [tape.watch(Tensor(x.data.copy())) for x in xs]
    loss = f(watched[0]) if single else f(*watched)
    backward(loss)
    analytic = [np.zeros_like(w.data) if w.grad is None else w.grad.copy()
                for w in watched]
    tape.release()

    worst = 0.0
    for xi, x in enumerate(xs):
        base = x.data.copy()
        flat = base.reshape(-1)
        num = np.zeros_like(flat)
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + eps
            args = [Tensor(base) if j == xi else Tensor(xs[j].data) for j in range(len(xs))]
            hi = (f(args[0]) if single else f(*args)).item()
            flat[i] = keep - eps
            args = [Tensor(base) if j == xi else Tensor(xs[j].data) for j in range(len(xs))]
            lo = (f(args[0]) if single else f(*args)).item()
            flat[i] = keep
            num[i] = (hi - lo) / (2.0 * eps)
        a = analytic[xi].reshape(-1)
        denom = np.maximum(np.maximum(np.abs(a), np.abs(num)), 1e-8)
        worst = max(worst, float(np.max(np.abs(a - num) / denom)))
    return worst
