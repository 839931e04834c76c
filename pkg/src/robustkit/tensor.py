"""Dense float tensors and the tape-based reverse-mode differentiation core.

Tensors wrap contiguous numpy arrays of rank <= 4 (feature maps are laid out
N x C x H x W).  Arithmetic runs in float32 by default; float64 is supported
solely as a shadow precision for finite-difference testing and follows the
dtype of the operands.

Every primitive validates its output for NaN/Inf and, when a ``Tape`` is
active and an operand requires gradients, records a node holding the saved
forward values needed for the backward pass.  ``backward`` replays the tape
in exact reverse order and accumulates partial gradients additively.
"""

from __future__ import annotations

import numpy as np

from .errors import ConfigError, NonFiniteError, UsageError, ValidationError

DEFAULT_DTYPE = np.float32


class Tensor:
    """Immutable n-dimensional float array with optional gradient tracking.

    ``name`` identifies parameters in the gradient map returned by
    ``backward``; anonymous tensors still receive gradients, retrievable via
    ``GradientMap.wrt``.
    """

    __slots__ = ("data", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data, dtype=dtype if dtype is not None else DEFAULT_DTYPE)
        if arr.ndim > 4:
            raise ConfigError(f"tensors are limited to rank 4, got shape {arr.shape}")
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        # ascontiguousarray would promote 0-d scalars to rank 1; keep them 0-d.
        self.data = arr if arr.ndim == 0 else np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad)
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype.name}{tag})"


class Tape:
    """Ordered record of primitive applications for one forward pass.

    Use as a context manager around the forward computation; ``backward``
    consumes the tape.  A tape must stay on the thread that created it.
    """

    def __init__(self):
        self._nodes = []
        self._consumed = False

    def __enter__(self):
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        top = _TAPE_STACK.pop()
        assert top is self
        return False

    def _record(self, out: Tensor, parents):
        self._nodes.append((out, parents))


_TAPE_STACK: list = []


def _active_tape() -> Tape | None:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


class GradientMap:
    """Gradients from one backward pass.

    Behaves as a mapping ``parameter name -> Tensor`` for named tensors;
    ``wrt`` looks up the gradient of any tensor that required one.
    """

    def __init__(self):
        self._by_id = {}
        self._by_name = {}

    def _put(self, tensor: Tensor, grad: np.ndarray):
        g = Tensor(grad, dtype=grad.dtype)
        self._by_id[id(tensor)] = g
        if tensor.name is not None:
            self._by_name[tensor.name] = g

    def wrt(self, tensor: Tensor) -> Tensor:
        try:
            return self._by_id[id(tensor)]
        except KeyError:
            raise UsageError(
                "no gradient was accumulated for this tensor; was it marked requires_grad "
                "and used under the tape?"
            ) from None

    def __getitem__(self, name: str) -> Tensor:
        return self._by_name[name]

    def __contains__(self, name: str) -> bool:
        return name in self._by_name

    def __iter__(self):
        return iter(self._by_name)

    def __len__(self):
        return len(self._by_name)

    def keys(self):
        return self._by_name.keys()

    def items(self):
        return self._by_name.items()


def backward(tape: Tape, loss: Tensor) -> GradientMap:
    """Accumulate gradients of a scalar ``loss`` for every tracked tensor.

    The tape is consumed; calling backward twice on one tape raises
    ``UsageError``.  Gradient accumulation is additive: a tensor consumed by
    k operations receives the sum of the k partial gradients.
    """
    if tape._consumed:
        raise UsageError("backward called twice on the same tape")
    tape._consumed = True
    if loss.data.ndim != 0:
        raise UsageError(f"loss must be a scalar, got shape {loss.shape}")

    grads = {id(loss): np.ones((), dtype=loss.dtype)}
    holders = {id(loss): loss}
    for out, parents in reversed(tape._nodes):
        g = grads.pop(id(out), None)
        if g is None:
            continue  # this node does not feed the loss
        for tensor, vjp in parents:
            contrib = vjp(g)
            key = id(tensor)
            if key in grads:
                grads[key] = grads[key] + contrib
            else:
                grads[key] = contrib
                holders[key] = tensor

    result = GradientMap()
    for key, g in grads.items():
        t = holders[key]
        if t.requires_grad:
            result._put(t, np.asarray(g, dtype=t.dtype))
    return result


def _check_finite(arr: np.ndarray, op: str):
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{op} produced non-finite values")


def _result(op: str, data: np.ndarray, parents) -> Tensor:
    """Wrap an op output, enforcing finiteness and recording on the active tape."""
    _check_finite(data, op)
    tracked = [(t, vjp) for t, vjp in parents if t.requires_grad]
    out = Tensor(data, requires_grad=bool(tracked), dtype=data.dtype)
    tape = _active_tape()
    if tape is not None and tracked:
        tape._record(out, tracked)
    return out


def _same_dtype(*tensors: Tensor):
    dt = tensors[0].dtype
    for t in tensors[1:]:
        if t.dtype != dt:
            raise ConfigError(f"mixed dtypes {dt} and {t.dtype} in one operation")
    return dt


# ---------------------------------------------------------------------------
# elementwise and reduction primitives
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum of two same-shape tensors (residual connections)."""
    if a.shape != b.shape:
        raise ConfigError(f"add shape mismatch: {a.shape} vs {b.shape}")
    _same_dtype(a, b)
    return _result("add", a.data + b.data, [(a, lambda g: g), (b, lambda g: g)])


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product of two same-shape tensors."""
    if a.shape != b.shape:
        raise ConfigError(f"mul shape mismatch: {a.shape} vs {b.shape}")
    _same_dtype(a, b)
    ad, bd = a.data, b.data
    return _result("mul", ad * bd, [(a, lambda g: g * bd), (b, lambda g: g * ad)])


def scale(a: Tensor, s: float) -> Tensor:
    """Multiply by a Python scalar."""
    s = float(s)
    return _result("scale", a.data * s, [(a, lambda g: g * s)])


def add_const(a: Tensor, c: float) -> Tensor:
    """Add a Python scalar."""
    return _result("add_const", a.data + float(c), [(a, lambda g: g)])


def relu(a: Tensor) -> Tensor:
    """max(x, 0); the subgradient at exactly zero is taken as zero."""
    mask = a.data > 0
    return _result("relu", np.where(mask, a.data, a.dtype.type(0)), [(a, lambda g: g * mask)])


def tensor_sum(a: Tensor) -> Tensor:
    """Sum of all elements, as a scalar tensor."""
    shape = a.shape
    return _result(
        "sum", np.asarray(a.data.sum(), dtype=a.dtype),
        [(a, lambda g: g * np.ones(shape, dtype=a.dtype))],
    )


def global_avg_pool(a: Tensor) -> Tensor:
    """Spatial mean: N x C x H x W -> N x C."""
    if a.data.ndim != 4:
        raise ConfigError(f"global_avg_pool expects rank-4 input, got {a.shape}")
    n, c, h, w = a.shape
    inv = 1.0 / (h * w)

    def vjp(g):
        return np.broadcast_to((g * inv)[:, :, None, None], (n, c, h, w)).astype(a.dtype, copy=False)

    return _result("global_avg_pool", a.data.mean(axis=(2, 3)), [(a, vjp)])


def slice_channels(a: Tensor, lo: int, hi: int) -> Tensor:
    """Select channels [lo, hi) along axis 1 of an N x C (or N x C x H x W) tensor."""
    if not (0 <= lo < hi <= a.shape[1]):
        raise ConfigError(f"channel slice [{lo}, {hi}) out of range for shape {a.shape}")

    def vjp(g):
        full = np.zeros(a.shape, dtype=a.dtype)
        full[:, lo:hi] = g
        return full

    return _result("slice_channels", a.data[:, lo:hi].copy(), [(a, vjp)])


def channel_affine(x: Tensor, nu: Tensor, mu: Tensor) -> Tensor:
    """Per-sample, per-channel modulation: out[n,c,h,w] = nu[n,c] * x[n,c,h,w] + mu[n,c]."""
    if x.data.ndim != 4:
        raise ConfigError(f"channel_affine expects rank-4 input, got {x.shape}")
    n, c = x.shape[:2]
    if nu.shape != (n, c) or mu.shape != (n, c):
        raise ConfigError(
            f"channel_affine modulation shapes {nu.shape}/{mu.shape} do not match input {x.shape}"
        )
    _same_dtype(x, nu, mu)
    xd, nud = x.data, nu.data
    out = nud[:, :, None, None] * xd + mu.data[:, :, None, None]
    return _result(
        "channel_affine", out,
        [
            (x, lambda g: g * nud[:, :, None, None]),
            (nu, lambda g: (g * xd).sum(axis=(2, 3))),
            (mu, lambda g: g.sum(axis=(2, 3))),
        ],
    )


def channel_standardize_const(x: Tensor, mean, std) -> Tensor:
    """Fixed per-channel (x - mean) / std, used as a model's input normalization."""
    if x.data.ndim != 4:
        raise ConfigError(f"channel_standardize_const expects rank-4 input, got {x.shape}")
    c = x.shape[1]
    mean = np.asarray(mean, dtype=x.dtype).reshape(-1)
    std = np.asarray(std, dtype=x.dtype).reshape(-1)
    if mean.size != c or std.size != c:
        raise ConfigError(f"normalization constants sized {mean.size}/{std.size} for {c} channels")
    if np.any(std <= 0):
        raise ConfigError("normalization std must be positive")
    inv = (1.0 / std)[None, :, None, None]
    shift = (-mean / std)[None, :, None, None]
    out = x.data * inv + shift
    return _result("channel_standardize_const", out, [(x, lambda g: g * inv)])


# ---------------------------------------------------------------------------
# dense and convolution
# ---------------------------------------------------------------------------

def dense(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Affine map N x D -> N x M with weight D x M and optional bias M."""
    if x.data.ndim != 2 or weight.data.ndim != 2:
        raise ConfigError(f"dense expects matrices, got {x.shape} and {weight.shape}")
    if x.shape[1] != weight.shape[0]:
        raise ConfigError(f"dense inner dimensions disagree: {x.shape} x {weight.shape}")
    _same_dtype(x, weight)
    xd, wd = x.data, weight.data
    out = xd @ wd
    parents = [(x, lambda g: g @ wd.T), (weight, lambda g: xd.T @ g)]
    if bias is not None:
        if bias.shape != (weight.shape[1],):
            raise ConfigError(f"dense bias shape {bias.shape} does not match output {weight.shape[1]}")
        out = out + bias.data
        parents.append((bias, lambda g: g.sum(axis=0)))
    return _result("dense", out, parents)


def _conv_geometry(x_shape, w_shape, stride, pad):
    n, cin, h, w = x_shape
    cout, cin_w, kh, kw = w_shape
    if kh != kw or kh not in (1, 3):
        raise ConfigError(f"conv2d kernels must be square with k in {{1, 3}}, got {kh}x{kw}")
    if cin != cin_w:
        raise ConfigError(f"conv2d channel mismatch: input has {cin}, weight expects {cin_w}")
    if stride not in (1, 2):
        raise ConfigError(f"conv2d stride must be 1 or 2, got {stride}")
    if pad != (kh - 1) // 2:
        raise ConfigError(f"conv2d pad must be (k-1)/2 = {(kh - 1) // 2} for k={kh}, got {pad}")
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise ConfigError(f"conv2d output would be empty for input {x_shape} with k={kh}, stride={stride}")
    return n, cin, cout, kh, ho, wo


def _im2col(xd: np.ndarray, k: int, stride: int, pad: int, ho: int, wo: int) -> np.ndarray:
    n, c = xd.shape[:2]
    xp = np.pad(xd, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else xd
    cols = np.empty((n, c, k, k, ho, wo), dtype=xd.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, :, i, j] = xp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride]
    return cols.reshape(n, c * k * k, ho * wo)


def _col2im(dcols: np.ndarray, x_shape, k: int, stride: int, pad: int, ho: int, wo: int) -> np.ndarray:
    n, c, h, w = x_shape
    dxp = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=dcols.dtype)
    dcols = dcols.reshape(n, c, k, k, ho, wo)
    for i in range(k):
        for j in range(k):
            dxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += dcols[:, :, i, j]
    return dxp[:, :, pad : pad + h, pad : pad + w] if pad else dxp


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None,
           stride: int = 1, pad: int | None = None) -> Tensor:
    """2-D cross-correlation of N x Cin x H x W with Cout x Cin x k x k.

    Supports k in {1, 3} with same-size padding (k-1)/2 and stride in {1, 2};
    lowered to an im2col matrix product.
    """
    if x.data.ndim != 4 or weight.data.ndim != 4:
        raise ConfigError(f"conv2d expects rank-4 input/weight, got {x.shape} and {weight.shape}")
    if pad is None:
        pad = (weight.shape[2] - 1) // 2
    n, cin, cout, k, ho, wo = _conv_geometry(x.shape, weight.shape, stride, pad)
    _same_dtype(x, weight)

    cols = _im2col(x.data, k, stride, pad, ho, wo)          # N x (Cin k k) x (Ho Wo)
    wmat = weight.data.reshape(cout, cin * k * k)
    out = np.matmul(wmat[None], cols).reshape(n, cout, ho, wo)

    x_shape = x.shape

    def vjp_x(g):
        gmat = g.reshape(n, cout, ho * wo)
        dcols = np.matmul(wmat.T[None], gmat)
        return _col2im(dcols, x_shape, k, stride, pad, ho, wo)

    def vjp_w(g):
        gmat = g.reshape(n, cout, ho * wo)
        dw = np.einsum("nol,nfl->of", gmat, cols)
        return dw.reshape(weight.shape)

    parents = [(x, vjp_x), (weight, vjp_w)]
    if bias is not None:
        if bias.shape != (cout,):
            raise ConfigError(f"conv2d bias shape {bias.shape} does not match {cout} output channels")
        out = out + bias.data[None, :, None, None]
        parents.append((bias, lambda g: g.sum(axis=(0, 2, 3))))
    return _result("conv2d", out, parents)


# ---------------------------------------------------------------------------
# batch normalization
# ---------------------------------------------------------------------------

class BatchNormState:
    """Running statistics owned by one batchnorm layer.

    Statistics stay ``None`` until the first training-mode pass (or a
    checkpoint load); evaluating before that is an error.
    """

    def __init__(self, channels: int, momentum: float = 0.9, eps: float = 1e-5):
        self.channels = channels
        self.momentum = float(momentum)
        self.eps = float(eps)
        self.mean = None
        self.var = None

    def initialized(self) -> bool:
        return self.mean is not None

    def ensure_initialized(self, dtype):
        """Give the running statistics their conventional start (mean 0, var 1)."""
        if self.mean is None:
            self.mean = np.zeros(self.channels, dtype=np.float64)
            self.var = np.ones(self.channels, dtype=np.float64)


def batchnorm(x: Tensor, gamma: Tensor, beta: Tensor, state: BatchNormState,
              training: bool, update_stats: bool = True) -> Tensor:
    """Per-channel batch normalization over an N x C x H x W tensor.

    Training mode standardizes with current-batch statistics and, when
    ``update_stats`` is set, folds them into the running statistics with the
    state's momentum.  Evaluation mode standardizes with running statistics
    only and raises if none exist yet.
    """
    if x.data.ndim != 4:
        raise ConfigError(f"batchnorm expects rank-4 input, got {x.shape}")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ConfigError(f"batchnorm affine shapes {gamma.shape}/{beta.shape} do not match {c} channels")
    _same_dtype(x, gamma, beta)
    dt = x.dtype
    xd, gd, bd = x.data, gamma.data, beta.data
    eps = state.eps

    if training:
        m = xd.shape[0] * xd.shape[2] * xd.shape[3]
        mean = xd.mean(axis=(0, 2, 3))
        centered = xd - mean[None, :, None, None]
        var = np.mean(centered * centered, axis=(0, 2, 3))
        if update_stats:
            state.ensure_initialized(dt)
            mom = state.momentum
            state.mean = mom * state.mean + (1.0 - mom) * mean.astype(np.float64)
            state.var = mom * state.var + (1.0 - mom) * var.astype(np.float64)
        inv_std = (1.0 / np.sqrt(var + eps)).astype(dt, copy=False)
        xhat = centered * inv_std[None, :, None, None]
        out = gd[None, :, None, None] * xhat + bd[None, :, None, None]

        def vjp_x(g):
            # Standard batch-stat backward: gradients flow through mean and variance.
            dxhat = g * gd[None, :, None, None]
            sum_dxhat = dxhat.sum(axis=(0, 2, 3))
            sum_dxhat_xhat = (dxhat * xhat).sum(axis=(0, 2, 3))
            t = dxhat - (sum_dxhat[None, :, None, None] + xhat * sum_dxhat_xhat[None, :, None, None]) / m
            return t * inv_std[None, :, None, None]

        parents = [
            (x, vjp_x),
            (gamma, lambda g: (g * xhat).sum(axis=(0, 2, 3))),
            (beta, lambda g: g.sum(axis=(0, 2, 3))),
        ]
        return _result("batchnorm", out, parents)

    if not state.initialized():
        raise ConfigError(
            "uninitialized running statistics: run a training-mode pass or load a checkpoint "
            "before evaluation-mode batchnorm"
        )
    inv_std = (1.0 / np.sqrt(state.var + eps)).astype(dt, copy=False)
    rmean = state.mean.astype(dt, copy=False)
    xhat = (xd - rmean[None, :, None, None]) * inv_std[None, :, None, None]
    out = gd[None, :, None, None] * xhat + bd[None, :, None, None]
    parents = [
        (x, lambda g: g * (gd * inv_std)[None, :, None, None]),
        (gamma, lambda g: (g * xhat).sum(axis=(0, 2, 3))),
        (beta, lambda g: g.sum(axis=(0, 2, 3))),
    ]
    return _result("batchnorm", out, parents)


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------

def softmax(logits: np.ndarray) -> np.ndarray:
    """Numerically stable softmax over the last axis of a plain array."""
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def one_hot(labels, classes: int, dtype=DEFAULT_DTYPE) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.ndim != 1:
        raise ConfigError(f"labels must be a vector, got shape {labels.shape}")
    if labels.min(initial=0) < 0 or (labels.size and labels.max() >= classes):
        raise ValidationError(f"labels out of range [0, {classes})")
    out = np.zeros((labels.size, classes), dtype=dtype)
    out[np.arange(labels.size), labels] = 1
    return out


def softmax_cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean cross-entropy between softmax(logits) and target distributions.

    ``targets`` may be an N x M array of one-hot or soft rows (each summing
    to 1 within 1e-5) or an N-vector of integer labels.  The gradient with
    respect to the logits is (softmax - target) / N; targets are treated as
    constants.
    """
    if logits.data.ndim != 2:
        raise ConfigError(f"logits must be N x M, got shape {logits.shape}")
    n, m = logits.shape
    t = np.asarray(targets.data if isinstance(targets, Tensor) else targets)
    if t.ndim == 1 and not np.issubdtype(t.dtype, np.floating):
        t = one_hot(t, m, dtype=logits.dtype)
    t = t.astype(logits.dtype, copy=False)
    if t.shape != (n, m):
        raise ConfigError(f"targets shape {t.shape} does not match logits {logits.shape}")
    row_sums = t.sum(axis=1)
    if np.any(np.abs(row_sums - 1.0) > 1e-5):
        bad = int(np.argmax(np.abs(row_sums - 1.0)))
        raise ValidationError(f"target row {bad} sums to {row_sums[bad]:.7f}, expected 1 within 1e-5")

    logp = log_softmax(logits.data)
    loss = np.asarray(-(t * logp).sum() / n, dtype=logits.dtype)
    probs = softmax(logits.data)

    def vjp(g):
        return g * (probs - t) / logits.dtype.type(n)

    return _result("softmax_cross_entropy", loss, [(logits, vjp)])
