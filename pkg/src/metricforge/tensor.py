"""Dense float64 tensors with reverse-mode automatic differentiation.

Every forward operation records a node in a dynamic graph; ``backward``
replays the graph once in reverse topological order and then consumes it,
so calling ``backward`` twice on the same loss raises. Broadcasting is
deliberately restricted to scalar-vs-tensor, per-channel bias and per-row
scaling; anything else needs an explicit reshape, which keeps every
gradient rule short enough to audit by eye.

Subgradient convention: ``relu`` (and the hinge losses built on it) uses 0
at exactly zero pre-activation, i.e. the inactive side.
"""

from __future__ import annotations

import contextlib
import threading

import numpy as np

from .errors import ContractError, NumericError, ShapeError

# recording state is per-thread: graphs are confined to one execution
# context, and parallel no-grad inference must not disturb other threads
_STATE = threading.local()


def _recording() -> bool:
    return getattr(_STATE, "grad_enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block; forward values only."""
    prev = _recording()
    _STATE.grad_enabled = False
    try:
        yield
    finally:
        _STATE.grad_enabled = prev


class Tensor:
    """A dense float64 array plus an optional position in a gradient graph."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp", "_consumed")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._vjp = None
        self._consumed = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # ------------------------------------------------------------------
    # elementwise arithmetic
    # ------------------------------------------------------------------

    def __add__(self, other):
        if isinstance(other, _SCALARS):
            a, c = self, float(other)

            def vjp(g):
                _accum(a, g)

            return _node(a.data + c, (a,), vjp)
        other = _coerce(other)
        _check_ewise(self.shape, other.shape)
        a, b = self, other

        def vjp(g):
            if a.requires_grad:
                _accum(a, _unbroadcast(g, a.data.shape))
            if b.requires_grad:
                _accum(b, _unbroadcast(g, b.data.shape))

        return _node(a.data + b.data, (a, b), vjp)

    def __radd__(self, other):
        return self.__add__(other)

    def __neg__(self):
        a = self

        def vjp(g):
            _accum(a, -g)

        return _node(-a.data, (a,), vjp)

    def __sub__(self, other):
        if isinstance(other, _SCALARS):
            return self.__add__(-float(other))
        return self.__add__(_coerce(other).__neg__())

    def __rsub__(self, other):
        return self.__neg__().__add__(other)

    def __mul__(self, other):
        if isinstance(other, _SCALARS):
            a, c = self, float(other)

            def vjp(g):
                _accum(a, g * c)

            return _node(a.data * c, (a,), vjp)
        other = _coerce(other)
        _check_ewise(self.shape, other.shape)
        a, b = self, other
        ad, bd = a.data, b.data

        def vjp(g):
            if a.requires_grad:
                _accum(a, _unbroadcast(g * bd, ad.shape))
            if b.requires_grad:
                _accum(b, _unbroadcast(g * ad, bd.shape))

        return _node(ad * bd, (a, b), vjp)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        if isinstance(other, _SCALARS):
            return self.__mul__(1.0 / float(other))
        return self.__mul__(_coerce(other) ** -1.0)

    def __rtruediv__(self, other):
        return (self ** -1.0).__mul__(other)

    def __pow__(self, p):
        if not isinstance(p, _SCALARS):
            raise ContractError("only scalar exponents are supported")
        a, pc = self, float(p)
        ad = a.data

        def vjp(g):
            _accum(a, g * pc * ad ** (pc - 1.0))

        return _node(ad ** pc, (a,), vjp)

    def sqrt(self):
        return self ** 0.5

    def exp(self):
        a = self
        out = np.exp(a.data)

        def vjp(g):
            _accum(a, g * out)

        return _node(out, (a,), vjp)

    def log(self):
        a = self
        ad = a.data

        def vjp(g):
            _accum(a, g / ad)

        return _node(np.log(ad), (a,), vjp)

    def sigmoid(self):
        a = self
        x = a.data
        out = np.empty_like(x)
        pos = x >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
        ex = np.exp(x[~pos])
        out[~pos] = ex / (1.0 + ex)

        def vjp(g):
            _accum(a, g * out * (1.0 - out))

        return _node(out, (a,), vjp)

    def relu(self):
        a = self
        mask = a.data > 0

        def vjp(g):
            _accum(a, g * mask)

        return _node(a.data * mask, (a,), vjp)

    def prelu(self, slopes):
        """PReLU with one trainable slope per channel.

        The channel axis is the last axis for 1-D/2-D inputs and the
        (C, H, W) channel axis for 3-D/4-D feature maps.
        """
        slopes = _coerce(slopes)
        if slopes.ndim != 1:
            raise ShapeError("prelu slopes must be a 1-D tensor")
        ax = self.ndim - 3 if self.ndim >= 3 else self.ndim - 1
        if self.shape[ax] != slopes.shape[0]:
            raise ShapeError(
                f"prelu needs {self.shape[ax]} slopes for input shape {self.shape}, "
                f"got {slopes.shape[0]}"
            )
        a, s = self, slopes
        bshape = [1] * self.ndim
        bshape[ax] = slopes.shape[0]
        sb = s.data.reshape(bshape)
        pos = a.data > 0
        out = np.where(pos, a.data, sb * a.data)
        red_axes = tuple(i for i in range(self.ndim) if i != ax)

        def vjp(g):
            if a.requires_grad:
                _accum(a, g * np.where(pos, 1.0, sb))
            if s.requires_grad:
                gs = g * a.data * (~pos)
                _accum(s, gs.sum(axis=red_axes) if red_axes else gs)

        return _node(out, (a, s), vjp)

    # ------------------------------------------------------------------
    # reductions and shape ops
    # ------------------------------------------------------------------

    def sum(self, axis=None, keepdims: bool = False):
        a = self
        shape = a.data.shape

        def vjp(g):
            gg = g
            if axis is not None and not keepdims:
                gg = np.expand_dims(gg, axis)
            _accum(a, np.broadcast_to(gg, shape))

        return _node(a.data.sum(axis=axis, keepdims=keepdims), (a,), vjp)

    def mean(self, axis=None, keepdims: bool = False):
        if axis is None:
            n = self.size
        else:
            n = self.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    def reshape(self, shape):
        a = self
        orig = a.data.shape

        def vjp(g):
            _accum(a, g.reshape(orig))

        return _node(a.data.reshape(shape), (a,), vjp)

    @property
    def T(self):
        if self.ndim != 2:
            raise ShapeError("T is only defined for 2-D tensors")
        a = self

        def vjp(g):
            _accum(a, g.T)

        return _node(a.data.T, (a,), vjp)

    def index_rows(self, indices):
        """Select rows of a 2-D tensor; the backward pass scatter-adds."""
        if self.ndim != 2:
            raise ShapeError("index_rows needs a 2-D tensor")
        idx = np.asarray(indices, dtype=np.intp)
        if idx.ndim != 1:
            raise ShapeError("index_rows needs a flat index list")
        a = self

        def vjp(g):
            buf = np.zeros_like(a.data)
            np.add.at(buf, idx, g)
            _accum(a, buf)

        return _node(a.data[idx], (a,), vjp)

    def gather(self, indices):
        """Select elements of a 1-D tensor; the backward pass scatter-adds."""
        if self.ndim != 1:
            raise ShapeError("gather needs a 1-D tensor")
        idx = np.asarray(indices, dtype=np.intp)
        a = self

        def vjp(g):
            buf = np.zeros_like(a.data)
            np.add.at(buf, idx, g)
            _accum(a, buf)

        return _node(a.data[idx], (a,), vjp)

    def scale_rows(self, scales):
        """Multiply row i of a 2-D tensor by scales[i]."""
        scales = _coerce(scales)
        if self.ndim != 2 or scales.ndim != 1 or scales.shape[0] != self.shape[0]:
            raise ShapeError(
                f"scale_rows needs (n, d) x (n,), got {self.shape} and {scales.shape}"
            )
        x, s = self, scales
        xd, sd = x.data, s.data

        def vjp(g):
            if x.requires_grad:
                _accum(x, g * sd[:, None])
            if s.requires_grad:
                _accum(s, (g * xd).sum(axis=1))

        return _node(xd * sd[:, None], (x, s), vjp)

    def add_channel_bias(self, bias):
        """Add a per-channel bias: axis 1 for 2-D/4-D input, axis 0 for 3-D."""
        bias = _coerce(bias)
        if bias.ndim != 1:
            raise ShapeError("bias must be a 1-D tensor")
        if self.ndim not in (2, 3, 4):
            raise ShapeError(f"add_channel_bias does not support ndim={self.ndim}")
        ax = 0 if self.ndim == 3 else 1
        if self.shape[ax] != bias.shape[0]:
            raise ShapeError(
                f"bias length {bias.shape[0]} does not match channel count {self.shape[ax]}"
            )
        a, b = self, bias
        bshape = [1] * self.ndim
        bshape[ax] = bias.shape[0]
        red_axes = tuple(i for i in range(self.ndim) if i != ax)

        def vjp(g):
            if a.requires_grad:
                _accum(a, g)
            if b.requires_grad:
                _accum(b, g.sum(axis=red_axes))

        return _node(a.data + b.data.reshape(bshape), (a, b), vjp)

    # ------------------------------------------------------------------
    # linear algebra and convolution
    # ------------------------------------------------------------------

    def matmul(self, other):
        other = _coerce(other)
        if self.ndim != 2 or other.ndim != 2:
            raise ShapeError("matmul needs two 2-D tensors")
        if self.shape[1] != other.shape[0]:
            raise ShapeError(f"matmul inner dims disagree: {self.shape} x {other.shape}")
        a, b = self, other
        ad, bd = a.data, b.data

        def vjp(g):
            if a.requires_grad:
                _accum(a, g @ bd.T)
            if b.requires_grad:
                _accum(b, ad.T @ g)

        return _node(ad @ bd, (a, b), vjp)

    def __matmul__(self, other):
        return self.matmul(other)

    def conv2d(self, kernel, stride: int = 1, padding: int = 0):
        """Cross-correlate with a (C_out, C_in, kh, kw) kernel.

        Input is (C, H, W) or batched (B, C, H, W). The output size
        (H + 2*padding - kh) / stride + 1 must be integral, otherwise a
        ShapeError is raised; no silent flooring.
        """
        if self.ndim == 3:
            c, h, w = self.shape
            out = self.reshape((1, c, h, w)).conv2d(kernel, stride, padding)
            _, co, ho, wo = out.shape
            return out.reshape((co, ho, wo))
        if self.ndim != 4:
            raise ShapeError(f"conv2d input must be 3-D or 4-D, got shape {self.shape}")
        kernel = _coerce(kernel)
        if kernel.ndim != 4:
            raise ShapeError("conv2d kernel must be (C_out, C_in, kh, kw)")
        if stride < 1 or padding < 0:
            raise ContractError("conv2d needs stride >= 1 and padding >= 0")
        bsz, cin, h, w = self.shape
        cout, kcin, kh, kw = kernel.shape
        if kcin != cin:
            raise ShapeError(f"kernel expects {kcin} input channels, input has {cin}")
        hp, wp = h + 2 * padding, w + 2 * padding
        if kh > hp or kw > wp:
            raise ShapeError(f"kernel {kh}x{kw} larger than padded input {hp}x{wp}")
        if (hp - kh) % stride or (wp - kw) % stride:
            raise ShapeError(
                f"non-integral conv output for input {h}x{w}, kernel {kh}x{kw}, "
                f"stride {stride}, padding {padding}"
            )
        ho = (hp - kh) // stride + 1
        wo = (wp - kw) // stride + 1
        x, k = self, kernel
        fast = kh == 1 and kw == 1 and stride == 1 and padding == 0
        if padding:
            xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
        else:
            xp = x.data
        if fast:
            cols = xp.reshape(bsz, cin, h * w)
        else:
            cols6 = np.empty((bsz, cin, kh, kw, ho, wo))
            for i in range(kh):
                hi = slice(i, i + stride * (ho - 1) + 1, stride)
                for j in range(kw):
                    wi = slice(j, j + stride * (wo - 1) + 1, stride)
                    cols6[:, :, i, j] = xp[:, :, hi, wi]
            cols = cols6.reshape(bsz, cin * kh * kw, ho * wo)
        w2 = k.data.reshape(cout, cin * kh * kw)
        out = np.matmul(w2, cols).reshape(bsz, cout, ho, wo)

        def vjp(g):
            g2 = g.reshape(bsz, cout, ho * wo)
            if k.requires_grad:
                gw = np.matmul(g2, cols.transpose(0, 2, 1)).sum(axis=0)
                _accum(k, gw.reshape(k.data.shape))
            if x.requires_grad:
                gcols = np.matmul(w2.T, g2)
                if fast:
                    _accum(x, gcols.reshape(bsz, cin, h, w))
                    return
                g6 = gcols.reshape(bsz, cin, kh, kw, ho, wo)
                gxp = np.zeros((bsz, cin, hp, wp))
                for i in range(kh):
                    hi = slice(i, i + stride * (ho - 1) + 1, stride)
                    for j in range(kw):
                        wi = slice(j, j + stride * (wo - 1) + 1, stride)
                        gxp[:, :, hi, wi] += g6[:, :, i, j]
                if padding:
                    gxp = gxp[:, :, padding:padding + h, padding:padding + w]
                _accum(x, gxp)

        return _node(out, (x, k), vjp)

    def avg_pool2d(self, k: int, stride: int | None = None):
        """Spatial average pooling with floor semantics (edge remainder dropped)."""
        if stride is None:
            stride = k
        if k < 1 or stride < 1:
            raise ContractError("avg_pool2d needs k >= 1 and stride >= 1")
        if self.ndim == 3:
            c, h, w = self.shape
            out = self.reshape((1, c, h, w)).avg_pool2d(k, stride)
            _, co, ho, wo = out.shape
            return out.reshape((co, ho, wo))
        if self.ndim != 4:
            raise ShapeError(f"avg_pool2d input must be 3-D or 4-D, got {self.shape}")
        bsz, c, h, w = self.shape
        if k > h or k > w:
            raise ShapeError(f"pool window {k} larger than input {h}x{w}")
        ho = (h - k) // stride + 1
        wo = (w - k) // stride + 1
        a = self
        acc = np.zeros((bsz, c, ho, wo))
        for i in range(k):
            hi = slice(i, i + stride * (ho - 1) + 1, stride)
            for j in range(k):
                wi = slice(j, j + stride * (wo - 1) + 1, stride)
                acc += a.data[:, :, hi, wi]
        acc *= 1.0 / (k * k)

        def vjp(g):
            gs = g * (1.0 / (k * k))
            gx = np.zeros((bsz, c, h, w))
            for i in range(k):
                hi = slice(i, i + stride * (ho - 1) + 1, stride)
                for j in range(k):
                    wi = slice(j, j + stride * (wo - 1) + 1, stride)
                    gx[:, :, hi, wi] += gs
            _accum(a, gx)

        return _node(acc, (a,), vjp)

    def global_avg_pool(self):
        """Spatial mean per channel: (C, H, W) -> (C,) or (B, C, H, W) -> (B, C)."""
        if self.ndim == 3:
            axes = (1, 2)
        elif self.ndim == 4:
            axes = (2, 3)
        else:
            raise ShapeError(f"global_avg_pool input must be 3-D or 4-D, got {self.shape}")
        a = self
        shape = a.data.shape
        n = shape[-1] * shape[-2]

        def vjp(g):
            gg = np.expand_dims(np.expand_dims(g, -1), -1) / n
            _accum(a, np.broadcast_to(gg, shape))

        return _node(a.data.mean(axis=axes), (a,), vjp)

    def log1p_sum_exp(self):
        """log(1 + sum_i exp(x_i)) of a 1-D tensor, computed overflow-safe."""
        if self.ndim != 1 or self.size < 1:
            raise ShapeError("log1p_sum_exp needs a non-empty 1-D tensor")
        a = self
        m = max(0.0, float(a.data.max()))
        ex = np.exp(a.data - m)
        s = ex.sum() + np.exp(-m)

        def vjp(g):
            _accum(a, g * ex / s)

        return _node(np.float64(m + np.log(s)), (a,), vjp)

    def backward(self):
        backward(self)


_SCALARS = (int, float, np.integer, np.floating)


def _coerce(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def _check_ewise(a_shape, b_shape):
    if a_shape == b_shape:
        return
    if int(np.prod(a_shape)) == 1 or int(np.prod(b_shape)) == 1:
        return
    raise ShapeError(
        f"elementwise op needs matching shapes or a scalar, got {a_shape} and {b_shape}"
    )


def _unbroadcast(g, shape):
    if g.shape == tuple(shape):
        return g
    return np.sum(g).reshape(shape)


def _accum(t: Tensor, g):
    if not t.requires_grad:
        return
    t.grad = g if t.grad is None else t.grad + g


def _node(data, parents, vjp) -> Tensor:
    out = Tensor(data)
    if _recording() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._vjp = vjp
    return out


def _toposort(root: Tensor):
    topo = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return topo


def backward(loss: Tensor):
    """Populate ``grad`` on every requires-grad leaf reachable from ``loss``.

    The loss must be a single-element tensor recorded on the graph. The
    traversal consumes the graph: each node is visited exactly once and its
    record is cleared, so a second backward on the same loss raises.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._consumed:
        raise ContractError("graph already consumed by a previous backward pass")
    if loss._vjp is None:
        raise ContractError("loss is not connected to a recorded graph")
    topo = _toposort(loss)
    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo):
        vjp = node._vjp
        if vjp is None:
            continue
        if node.grad is not None:
            vjp(node.grad)
        node._vjp = None
        node._parents = ()
        node._consumed = True
        node.grad = None
    loss._consumed = True


def activation(x: Tensor, kind: str, slopes: Tensor | None = None) -> Tensor:
    """Dispatch to relu / prelu / sigmoid by name."""
    if kind == "relu":
        return x.relu()
    if kind == "sigmoid":
        return x.sigmoid()
    if kind == "prelu":
        if slopes is None:
            raise ContractError("prelu activation needs a slopes tensor")
        return x.prelu(slopes)
    raise ContractError(f"unknown activation kind '{kind}'")


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean cross-entropy of max-shifted softmax logits against integer labels."""
    if logits.ndim != 2:
        raise ShapeError("softmax_cross_entropy needs (batch, classes) logits")
    labels = np.asarray(labels)
    if labels.ndim != 1 or labels.shape[0] != logits.shape[0]:
        raise ShapeError("labels must be a 1-D array matching the batch size")
    if not np.issubdtype(labels.dtype, np.integer):
        raise ContractError("labels must be integers")
    ncls = logits.shape[1]
    if labels.min() < 0 or labels.max() >= ncls:
        raise ContractError(f"label out of range [0, {ncls})")
    z = logits.data
    zs = z - z.max(axis=1, keepdims=True)
    logp = zs - np.log(np.exp(zs).sum(axis=1, keepdims=True))
    bsz = z.shape[0]
    rows = np.arange(bsz)
    val = -logp[rows, labels].mean()
    lg = logits

    def vjp(g):
        p = np.exp(logp)
        p[rows, labels] -= 1.0
        _accum(lg, (float(g) / bsz) * p)

    return _node(np.float64(val), (lg,), vjp)


def zero_grad(params):
    """Clear accumulated gradients on a dict or iterable of tensors."""
    values = params.values() if isinstance(params, dict) else params
    for t in values:
        t.grad = None


def finite_diff_check(f, x: Tensor, eps: float = 1e-5) -> float:
    """Max relative error between analytic gradient of f at x and central differences.

    Relative error per coordinate is |analytic - fd| / max(1, |analytic|).
    ``f`` must map the tensor to a scalar tensor and be evaluable at the
    perturbed points.
    """
    if eps <= 0:
        raise ContractError("eps must be positive")
    prev_rg = x.requires_grad
    x.requires_grad = True
    x.grad = None
    try:
        out = f(x)
        backward(out)
        analytic = (x.grad if x.grad is not None else np.zeros_like(x.data)).copy()
    finally:
        x.requires_grad = prev_rg
        x.grad = None
    flat = x.data.reshape(-1)
    fd = np.empty(flat.size)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = float(f(x).data)
            flat[i] = orig - eps
            fm = float(f(x).data)
            flat[i] = orig
            fd[i] = (fp - fm) / (2.0 * eps)
    an = analytic.reshape(-1)
    if not (np.isfinite(fd).all() and np.isfinite(an).all()):
        raise NumericError("non-finite values in gradient check")
    rel = np.abs(an - fd) / np.maximum(1.0, np.abs(an))
    return float(rel.max())
