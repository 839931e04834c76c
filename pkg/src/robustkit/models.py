"""Wide residual networks, optionally carrying input-conditioned normalization.

A WRN-depth-widen network is a 16-channel 3x3 stem, three groups of
pre-activation residual blocks with widths {16w, 32w, 64w} (stride-2
downsampling entering groups 2 and 3), a final BN+ReLU, global average
pooling and a dense classifier.  Depth must satisfy depth = 6*n + 4 with n
blocks per group.

The adaptive variant inserts a conditional normalization module between the
two convolutions of the first block of each group.  A three-layer
meta-network (3x3 -> 3x3 -> 1x1 convs, then global average pooling) maps the
block's first-conv feature maps z to per-sample, per-channel scale and bias
(nu, mu); the block's features are then modulated as nu * x + mu.  The 1x1
output conv starts at zero, so a freshly built adaptive model is exactly its
non-adaptive twin (nu = 1, mu = 0).
"""

from __future__ import annotations

import re
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .rng import Rng
from .tensor import (
    BatchNormState,
    Tape,
    Tensor,
    add,
    add_const,
    backward,
    batchnorm,
    channel_affine,
    channel_standardize_const,
    conv2d,
    dense,
    global_avg_pool,
    one_hot,
    relu,
    slice_channels,
    softmax_cross_entropy,
)

DEFAULT_DTYPE = np.float32


@dataclass(frozen=True)
class WrnSpec:
    """Architecture hyperparameters of one wide residual network."""

    depth: int
    widen: int
    classes: int
    adaptive: bool = False
    input_channels: int = 3
    input_size: int = 32

    def __post_init__(self):
        if (self.depth - 4) % 6 != 0 or self.blocks_per_group < 1:
            raise ConfigError(
                f"depth must be 6*n + 4 with n >= 1, got {self.depth}"
            )
        if self.widen < 1:
            raise ConfigError(f"widen factor must be >= 1, got {self.widen}")
        if self.classes < 2:
            raise ConfigError(f"need at least 2 classes, got {self.classes}")
        if self.input_channels not in (1, 3):
            raise ConfigError(f"input_channels must be 1 or 3, got {self.input_channels}")
        if self.input_size < 8:
            raise ConfigError(f"input_size must be >= 8, got {self.input_size}")

    @property
    def blocks_per_group(self) -> int:
        return (self.depth - 4) // 6

    @property
    def group_widths(self) -> tuple:
        return (16 * self.widen, 32 * self.widen, 64 * self.widen)

    def arch_string(self) -> str:
        base = f"wrn-{self.depth}-{self.widen}"
        return base + "-adaptive" if self.adaptive else base


_ARCH_RE = re.compile(r"^wrn-(\d+)-(\d+)(-adaptive)?$")


def parse_arch(text: str, classes: int, input_channels: int = 3, input_size: int = 32) -> WrnSpec:
    """Parse the ``wrn-<depth>-<widen>[-adaptive]`` architecture string."""
    m = _ARCH_RE.match(text.strip())
    if not m:
        raise ConfigError(f"unrecognized architecture string '{text}' (expected wrn-<depth>-<widen>[-adaptive])")
    return WrnSpec(int(m.group(1)), int(m.group(2)), classes,
                   adaptive=m.group(3) is not None,
                   input_channels=input_channels, input_size=input_size)


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------

class _Conv:
    def __init__(self, graph: "ModelGraph", name: str, cin: int, cout: int, k: int,
                 stride: int = 1, bias: bool = False, zero_init: bool = False):
        self.stride = stride
        self.pad = (k - 1) // 2
        if zero_init:
            w = np.zeros((cout, cin, k, k), dtype=graph.dtype)
        else:
            std = float(np.sqrt(2.0 / (cin * k * k)))
            w = graph._init_rng.normal((cout, cin, k, k), std=std).astype(graph.dtype)
        self.wname = graph._register(f"{name}.weight", w)
        self.bname = graph._register(f"{name}.bias", np.zeros(cout, dtype=graph.dtype)) if bias else None

    def __call__(self, graph, x):
        b = graph.params[self.bname] if self.bname else None
        return conv2d(x, graph.params[self.wname], b, stride=self.stride, pad=self.pad)


class _BatchNorm:
    def __init__(self, graph: "ModelGraph", name: str, channels: int):
        self.gname = graph._register(f"{name}.gamma", np.ones(channels, dtype=graph.dtype))
        self.bname = graph._register(f"{name}.beta", np.zeros(channels, dtype=graph.dtype))
        self.state = BatchNormState(channels, momentum=graph.bn_momentum, eps=graph.bn_eps)
        graph._bn_states[name] = self.state

    def __call__(self, graph, x, ctx):
        return batchnorm(x, graph.params[self.gname], graph.params[self.bname],
                         self.state, training=ctx.batch_stats, update_stats=ctx.update_stats)


class _Dense:
    def __init__(self, graph: "ModelGraph", name: str, din: int, dout: int):
        std = float(np.sqrt(2.0 / din))
        w = graph._init_rng.normal((din, dout), std=std).astype(graph.dtype)
        self.wname = graph._register(f"{name}.weight", w)
        self.bname = graph._register(f"{name}.bias", np.zeros(dout, dtype=graph.dtype))

    def __call__(self, graph, x):
        return dense(x, graph.params[self.wname], graph.params[self.bname])


class CondNormModule:
    """Meta-network producing per-sample scale and bias from feature maps.

    Layers: 3x3 conv (C -> 16w) + ReLU, 3x3 conv (16w -> 16w) + ReLU,
    1x1 conv (16w -> 2C, zero-initialized), global average pooling.  The
    pooled output splits into raw (r_nu, r_mu); modulation uses
    nu = 1 + r_nu and mu = r_mu, so zero init is exactly the identity.
    """

    def __init__(self, graph: "ModelGraph", name: str, channels: int, hidden: int):
        self.channels = channels
        self.conv_a = _Conv(graph, f"{name}.conv_a", channels, hidden, 3, bias=True)
        self.conv_b = _Conv(graph, f"{name}.conv_b", hidden, hidden, 3, bias=True)
        self.conv_out = _Conv(graph, f"{name}.conv_out", hidden, 2 * channels, 1,
                              bias=True, zero_init=True)

    def __call__(self, graph, x):
        c = x.shape[1]
        if c != self.channels:
            raise ConfigError(
                f"conditional normalization built for {self.channels} channels, got input with {c}"
            )
        z = relu(self.conv_a(graph, x))
        z = relu(self.conv_b(graph, z))
        pooled = global_avg_pool(self.conv_out(graph, z))
        nu = add_const(slice_channels(pooled, 0, c), 1.0)
        mu = slice_channels(pooled, c, 2 * c)
        return channel_affine(x, nu, mu)


class _Block:
    """Pre-activation residual block: BN-ReLU-conv-BN-ReLU-conv.

    A 1x1 conv shortcut (applied to the activated input) replaces the
    identity when width or stride changes.  When ``adaptive`` is set the
    conditional normalization module modulates the first conv's output
    before it continues to BN-ReLU-conv2.
    """

    def __init__(self, graph, name, cin, cout, stride, adaptive, hidden):
        self.bn1 = _BatchNorm(graph, f"{name}.bn1", cin)
        self.conv1 = _Conv(graph, f"{name}.conv1", cin, cout, 3, stride=stride)
        self.condnorm = CondNormModule(graph, f"{name}.condnorm", cout, hidden) if adaptive else None
        self.bn2 = _BatchNorm(graph, f"{name}.bn2", cout)
        self.conv2 = _Conv(graph, f"{name}.conv2", cout, cout, 3)
        self.shortcut = None
        if stride != 1 or cin != cout:
            self.shortcut = _Conv(graph, f"{name}.shortcut", cin, cout, 1, stride=stride)

    def __call__(self, graph, x, ctx):
        act = relu(self.bn1(graph, x, ctx))
        h = self.conv1(graph, act)
        if self.condnorm is not None:
            h = self.condnorm(graph, h)
        h = self.conv2(graph, relu(self.bn2(graph, h, ctx)))
        residual = self.shortcut(graph, act) if self.shortcut is not None else x
        return add(h, residual)


class _ForwardCtx:
    __slots__ = ("batch_stats", "update_stats")

    def __init__(self, batch_stats, update_stats):
        self.batch_stats = batch_stats
        self.update_stats = update_stats


class ModelGraph:
    """Parameter registry plus layer topology of one network.

    Parameters are registered in a deterministic order fixed by the
    architecture spec; checkpoints serialize in that order.  ``mode``
    selects between training behavior (current-batch normalization
    statistics, updated in place) and evaluation behavior (running
    statistics, pure function of input and parameters).
    """

    def __init__(self, spec: WrnSpec, seed: int = 0, mean=None, std=None,
                 dtype=DEFAULT_DTYPE, bn_momentum: float = 0.9, bn_eps: float = 1e-5):
        self.spec = spec
        self.dtype = np.dtype(dtype)
        self.bn_momentum = float(bn_momentum)
        self.bn_eps = float(bn_eps)
        self.params: dict[str, Tensor] = {}
        self._bn_states: dict[str, BatchNormState] = {}
        self.mode = "train"
        self.grad_passes = 0
        self.mean = np.asarray(mean if mean is not None else np.zeros(spec.input_channels), dtype=np.float64)
        self.std = np.asarray(std if std is not None else np.ones(spec.input_channels), dtype=np.float64)
        if self.mean.size != spec.input_channels or self.std.size != spec.input_channels:
            raise ConfigError("normalization mean/std must have one entry per input channel")
        self._init_rng = Rng(seed).derive("init")
        self._build()

    # -- construction -------------------------------------------------------

    def _register(self, name: str, value: np.ndarray) -> str:
        if name in self.params:
            raise ConfigError(f"duplicate parameter name '{name}'")
        self.params[name] = Tensor(value, requires_grad=True, name=name, dtype=self.dtype)
        return name

    def _build(self):
        spec = self.spec
        n = spec.blocks_per_group
        widths = spec.group_widths
        hidden = 16 * spec.widen
        self.stem = _Conv(self, "stem", spec.input_channels, 16, 3)
        self.blocks = []
        cin = 16
        for g, width in enumerate(widths, start=1):
            stride = 1 if g == 1 else 2
            for b in range(n):
                adaptive = spec.adaptive and b == 0
                blk = _Block(self, f"group{g}.block{b}", cin, width,
                             stride if b == 0 else 1, adaptive, hidden)
                self.blocks.append(blk)
                cin = width
        self.bn_final = _BatchNorm(self, "final.bn", widths[-1])
        self.fc = _Dense(self, "fc", widths[-1], spec.classes)

    # -- modes and parameters ----------------------------------------------

    def train(self):
        self.mode = "train"
        return self

    def eval(self):
        self.mode = "eval"
        return self

    def set_params(self, new_params: dict):
        """Swap in updated parameters (same keys, shapes and order)."""
        if list(new_params.keys()) != list(self.params.keys()):
            raise ConfigError("parameter update must cover exactly the registered names, in order")
        self.params = dict(new_params)

    def bn_states(self) -> dict:
        return dict(self._bn_states)

    def param_count(self) -> int:
        """Total number of trainable parameter elements (running stats excluded)."""
        return sum(t.size for t in self.params.values())

    # -- forward / gradients -------------------------------------------------

    def forward(self, x, batch_stats: bool | None = None, update_stats: bool | None = None) -> Tensor:
        """Logits for a batch. Flags default to the model's mode.

        ``batch_stats`` selects current-batch normalization statistics;
        ``update_stats`` lets a batch-stats pass advance the running
        statistics (training steps do, attack passes must not).
        """
        if not isinstance(x, Tensor):
            x = Tensor(x, dtype=self.dtype)
        expected = (self.spec.input_channels, self.spec.input_size, self.spec.input_size)
        if x.data.ndim != 4 or x.shape[1:] != expected:
            raise ConfigError(f"input shape {x.shape} does not match N x {expected}")
        if batch_stats is None:
            batch_stats = self.mode == "train"
        if update_stats is None:
            update_stats = batch_stats
        ctx = _ForwardCtx(batch_stats, update_stats)

        h = channel_standardize_const(x, self.mean, self.std)
        h = self.stem(self, h)
        for blk in self.blocks:
            h = blk(self, h, ctx)
        h = relu(self.bn_final(self, h, ctx))
        h = global_avg_pool(h)
        return self.fc(self, h)

    def loss_and_input_grad(self, x, targets, batch_stats: bool = False):
        """Loss, gradient w.r.t. the input, and logits, in one taped pass.

        This is the whole model surface an attack needs: forward plus input
        gradient.  Running statistics are never updated here.
        """
        xt = x if isinstance(x, Tensor) else Tensor(x, dtype=self.dtype)
        xt = Tensor(xt.data, requires_grad=True, name="input", dtype=self.dtype)
        with Tape() as tape:
            logits = self.forward(xt, batch_stats=batch_stats, update_stats=False)
            loss = softmax_cross_entropy(logits, targets)
        grads = backward(tape, loss)
        self.grad_passes += 1
        return loss.item(), grads.wrt(xt).data, logits.data

    def predict(self, x, batch_size: int = 256) -> np.ndarray:
        """Argmax class predictions in evaluation mode, streamed in batches."""
        x = np.asarray(x, dtype=self.dtype)
        out = []
        for lo in range(0, x.shape[0], batch_size):
            logits = self.forward(x[lo : lo + batch_size], batch_stats=False, update_stats=False)
            out.append(np.argmax(logits.data, axis=1))
        return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def build_wrn(spec: WrnSpec, seed: int = 0, mean=None, std=None, dtype=DEFAULT_DTYPE,
              bn_momentum: float = 0.9, bn_eps: float = 1e-5) -> ModelGraph:
    """Construct a (possibly adaptive) WRN with He-initialized weights."""
    return ModelGraph(spec, seed=seed, mean=mean, std=std, dtype=dtype,
                      bn_momentum=bn_momentum, bn_eps=bn_eps)


def param_count(model: ModelGraph) -> int:
    return model.param_count()


def cond_norm_forward(x: Tensor, module: CondNormModule, graph: ModelGraph) -> Tensor:
    """Apply one conditional normalization module to feature maps ``x``."""
    return module(graph, x)
