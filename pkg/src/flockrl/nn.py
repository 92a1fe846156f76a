"""Dense tanh networks with hand-written backprop, Adam and target tracking.

All parameters of a network live in one flat float64 buffer: every layer's
weight matrix (row-major, shape ``(fan_out, fan_in)``) in order, followed by
every layer's bias vector. ``weights`` and ``biases`` are views into that
buffer, so optimizer and soft-update arithmetic is a single vector op.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import CorruptCheckpointError, DimensionError, InvalidConfigurationError, NumericError

ACTIVATIONS = ("identity", "tanh")

MAGIC = b"FLRL"
FORMAT_VERSION = 1


def _layout(layer_sizes):
    shapes = [(layer_sizes[k + 1], layer_sizes[k]) for k in range(len(layer_sizes) - 1)]
    n_weights = sum(a * b for a, b in shapes)
    n_biases = sum(a for a, _ in shapes)
    return shapes, n_weights + n_biases


class _FlatParams:
    """Flat parameter buffer with per-layer weight/bias views."""

    def __init__(self, layer_sizes, flat=None):
        layer_sizes = tuple(int(s) for s in layer_sizes)
        if len(layer_sizes) < 2 or any(s < 1 for s in layer_sizes):
            raise InvalidConfigurationError(f"invalid layer sizes {layer_sizes!r}")
        shapes, total = _layout(layer_sizes)
        if flat is None:
            flat = np.zeros(total, dtype=np.float64)
        elif flat.shape != (total,):
            raise DimensionError(f"flat buffer has {flat.size} entries, layout needs {total}")
        self.layer_sizes = layer_sizes
        self.flat = flat
        self.weights = []
        self.biases = []
        pos = 0
        for rows, cols in shapes:
            self.weights.append(flat[pos:pos + rows * cols].reshape(rows, cols))
            pos += rows * cols
        for rows, _ in shapes:
            self.biases.append(flat[pos:pos + rows])
            pos += rows

    @property
    def size(self):
        return self.flat.size

    def __len__(self):
        return self.flat.size


class Gradient(_FlatParams):
    """Parameter-shaped gradient buffer."""

    @classmethod
    def zeros_like(cls, net):
        return cls(net.layer_sizes)

    def __add__(self, other):
        return Gradient(self.layer_sizes, self.flat + other.flat)

    def __mul__(self, c):
        return Gradient(self.layer_sizes, self.flat * c)

    __rmul__ = __mul__


class Network(_FlatParams):
    """A dense network: tanh on hidden layers, configurable output activation."""

    def __init__(self, layer_sizes, out_activation="identity", flat=None):
        if out_activation not in ACTIVATIONS:
            raise InvalidConfigurationError(f"unknown activation {out_activation!r}")
        super().__init__(layer_sizes, flat)
        self.out_activation = out_activation

    @property
    def n_inputs(self):
        return self.layer_sizes[0]

    @property
    def n_outputs(self):
        return self.layer_sizes[-1]

    def copy(self):
        return Network(self.layer_sizes, self.out_activation, self.flat.copy())

    def __call__(self, x):
        return mlp_forward(self, x)


def mlp_init(layer_sizes, seed, out_activation="identity"):
    """Uniform fan-in init on weights, zero biases; deterministic in ``seed``."""
    if not layer_sizes:
        raise InvalidConfigurationError("empty layer list")
    net = Network(layer_sizes, out_activation)
    rng = np.random.default_rng(seed)
    for w in net.weights:
        bound = 1.0 / np.sqrt(w.shape[1])
        w[...] = rng.uniform(-bound, bound, size=w.shape)
    return net


def _check_input(net, x):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim not in (1, 2) or x.shape[-1] != net.n_inputs:
        raise DimensionError(f"input shape {x.shape} does not match network input {net.n_inputs}")
    return x


def _trace(net, x):
    """Forward pass keeping every post-activation (input first, output last)."""
    acts = [x]
    last = len(net.weights) - 1
    h = x
    for k, (w, b) in enumerate(zip(net.weights, net.biases)):
        h = h @ w.T + b
        if k < last or net.out_activation == "tanh":
            h = np.tanh(h)
        acts.append(h)
    return acts


def mlp_forward(net, x):
    """Evaluate ``net`` on one input vector or a batch of row vectors."""
    x = _check_input(net, x)
    return _trace(net, x)[-1]


def mlp_backward(net, x, upstream, trace=None):
    """Reverse-mode gradient of ``<upstream, net(x)>``.

    For a batch the result is summed over rows. Returns the parameter
    gradient and the gradient with respect to ``x`` (same shape as ``x``).
    """
    x = _check_input(net, x)
    upstream = np.asarray(upstream, dtype=np.float64)
    if upstream.shape[-1] != net.n_outputs or upstream.ndim != x.ndim:
        raise DimensionError(f"upstream shape {upstream.shape} does not match output {net.n_outputs}")
    if x.ndim == 2 and upstream.shape[0] != x.shape[0]:
        raise DimensionError("batch sizes of input and upstream gradient differ")
    batched = x.ndim == 2
    if not batched:
        x = x[None, :]
        upstream = upstream[None, :]
    acts = trace if trace is not None else _trace(net, x)
    grad = Gradient.zeros_like(net)
    delta = upstream
    for k in range(len(net.weights) - 1, -1, -1):
        out = acts[k + 1]
        if k < len(net.weights) - 1 or net.out_activation == "tanh":
            delta = delta * (1.0 - out * out)
        grad.weights[k][...] = delta.T @ acts[k]
        grad.biases[k][...] = delta.sum(axis=0)
        delta = delta @ net.weights[k]
    return grad, (delta if batched else delta[0])


class AdamState:
    """First/second moment accumulators for one network."""

    def __init__(self, net, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.layer_sizes = net.layer_sizes
        self.m = np.zeros(net.size)
        self.v = np.zeros(net.size)
        self.step = 0
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps

    def copy(self):
        out = AdamState.__new__(AdamState)
        out.__dict__.update(self.__dict__)
        out.m = self.m.copy()
        out.v = self.v.copy()
        return out


def adam_step(state, net, grad):
    """Bias-corrected Adam update of ``net`` in place."""
    if state.layer_sizes != net.layer_sizes or grad.layer_sizes != net.layer_sizes:
        raise DimensionError("optimizer state, network and gradient shapes disagree")
    g = grad.flat
    if not np.all(np.isfinite(g)):
        raise NumericError("non-finite gradient entry; update aborted")
    step = state.step + 1
    with np.errstate(over="ignore", invalid="ignore"):
        m = state.beta1 * state.m + (1.0 - state.beta1) * g
        v = state.beta2 * state.v + (1.0 - state.beta2) * g * g
        m_hat = m / (1.0 - state.beta1 ** step)
        v_hat = v / (1.0 - state.beta2 ** step)
        delta = state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
        new = net.flat - delta
    if not (np.all(np.isfinite(v)) and np.all(np.isfinite(new))):
        raise NumericError("Adam update overflowed; parameters left unchanged")
    state.step = step
    state.m[...] = m
    state.v[...] = v
    net.flat[...] = new
    return state, net


def soft_update(target, source, tau):
    """theta' <- tau * theta + (1 - tau) * theta', in place on ``target``."""
    if not 0.0 <= tau <= 1.0:
        raise InvalidConfigurationError(f"tau={tau} outside [0, 1]")
    if target.layer_sizes != source.layer_sizes:
        raise DimensionError("target and source shapes disagree")
    target.flat[...] = tau * source.flat + (1.0 - tau) * target.flat
    return target


def l2_param_norm(net):
    return float(np.sqrt(np.dot(net.flat, net.flat)))


def l2_norm_grad(net):
    """Gradient of the (unsquared) parameter norm; zero at the origin."""
    norm = l2_param_norm(net)
    grad = Gradient.zeros_like(net)
    if norm > 0.0:
        grad.flat[...] = net.flat / norm
    return grad


# -- checkpoints ------------------------------------------------------------

def save_params(path, net, adam=None):
    """Write ``net`` (and optionally its Adam state) as a little-endian blob."""
    sizes = net.layer_sizes
    parts = [
        MAGIC,
        struct.pack("<II", FORMAT_VERSION, len(sizes)),
        struct.pack(f"<{len(sizes)}I", *sizes),
        struct.pack("<BB", ACTIVATIONS.index(net.out_activation), adam is not None),
        net.flat.astype("<f8").tobytes(),
    ]
    if adam is not None:
        parts += [
            adam.m.astype("<f8").tobytes(),
            adam.v.astype("<f8").tobytes(),
            struct.pack("<Q4d", adam.step, adam.lr, adam.beta1, adam.beta2, adam.eps),
        ]
    Path(path).write_bytes(b"".join(parts))


def load_params(path):
    """Inverse of :func:`save_params`; returns ``(net, adam_or_None)``."""
    data = Path(path).read_bytes()

    def take(n, what):
        nonlocal pos
        if pos + n > len(data):
            raise CorruptCheckpointError(f"truncated checkpoint while reading {what}")
        chunk = data[pos:pos + n]
        pos += n
        return chunk

    pos = 0
    if take(4, "magic") != MAGIC:
        raise CorruptCheckpointError("bad magic")
    version, count = struct.unpack("<II", take(8, "header"))
    if version != FORMAT_VERSION:
        raise CorruptCheckpointError(f"unsupported format version {version}")
    if count < 2 or count > 64:
        raise CorruptCheckpointError(f"implausible layer count {count}")
    sizes = struct.unpack(f"<{count}I", take(4 * count, "layer sizes"))
    if any(s < 1 for s in sizes):
        raise CorruptCheckpointError("zero-sized layer in header")
    act_code, has_adam = struct.unpack("<BB", take(2, "flags"))
    if act_code >= len(ACTIVATIONS):
        raise CorruptCheckpointError(f"unknown activation code {act_code}")
    _, total = _layout(sizes)
    flat = np.frombuffer(take(8 * total, "parameters"), dtype="<f8").astype(np.float64)
    net = Network(sizes, ACTIVATIONS[act_code], flat)
    adam = None
    if has_adam:
        adam = AdamState(net)
        adam.m = np.frombuffer(take(8 * total, "first moments"), dtype="<f8").astype(np.float64)
        adam.v = np.frombuffer(take(8 * total, "second moments"), dtype="<f8").astype(np.float64)
        adam.step, adam.lr, adam.beta1, adam.beta2, adam.eps = struct.unpack("<Q4d", take(40, "optimizer scalars"))
    if pos != len(data):
        raise CorruptCheckpointError(f"{len(data) - pos} trailing bytes; header does not match body")
    return net, adam
