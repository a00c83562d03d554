"""Small fully connected Q-network with analytic gradients and Adam/SGD updates.

Weights are stored as ``(n_in, n_out)`` matrices so a batch forward pass is
``x @ W + b``. Hidden layers use ReLU, the output layer is linear.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import BinaryIO, Sequence

import numpy as np

MAGIC = b"DQNCKPT1"


class ArchitectureMismatch(ValueError):
    pass


@dataclass
class MLP:
    layer_sizes: tuple[int, ...]
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def __post_init__(self) -> None:
        self.layer_sizes = tuple(int(n) for n in self.layer_sizes)
        if len(self.layer_sizes) < 2:
            raise ValueError("an MLP needs at least input and output sizes")
        if len(self.weights) != len(self.layer_sizes) - 1 or len(self.biases) != len(self.weights):
            raise ValueError("one weight matrix and bias vector per layer")
        for l, (W, b) in enumerate(zip(self.weights, self.biases)):
            shape = (self.layer_sizes[l], self.layer_sizes[l + 1])
            if W.shape != shape or b.shape != (shape[1],):
                raise ValueError(f"layer {l}: expected W{shape}, b({shape[1]},)")

    @classmethod
    def init(cls, layer_sizes: Sequence[int], rng: np.random.Generator | int = 0) -> "MLP":
        """He-uniform weights (limit sqrt(6 / fan_in)), zero biases."""
        rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
        sizes = tuple(int(n) for n in layer_sizes)
        weights, biases = [], []
        for n_in, n_out in zip(sizes[:-1], sizes[1:]):
            limit = np.sqrt(6.0 / n_in)
            weights.append(rng.uniform(-limit, limit, size=(n_in, n_out)))
            biases.append(np.zeros(n_out))
        return cls(sizes, weights, biases)

    @classmethod
    def zeros(cls, layer_sizes: Sequence[int]) -> "MLP":
        sizes = tuple(int(n) for n in layer_sizes)
        return cls(
            sizes,
            [np.zeros((a, b)) for a, b in zip(sizes[:-1], sizes[1:])],
            [np.zeros(b) for b in sizes[1:]],
        )

    @property
    def n_inputs(self) -> int:
        return self.layer_sizes[0]

    @property
    def n_outputs(self) -> int:
        return self.layer_sizes[-1]

    def params(self) -> list[np.ndarray]:
        """Parameters in checkpoint order: W0, b0, W1, b1, ..."""
        out = []
        for W, b in zip(self.weights, self.biases):
            out += [W, b]
        return out

    def copy(self) -> "MLP":
        return MLP(self.layer_sizes, [W.copy() for W in self.weights], [b.copy() for b in self.biases])

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return forward(self, x)


def _check_input(net: MLP, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != net.n_inputs or x.ndim not in (1, 2):
        raise ValueError(f"input must have {net.n_inputs} features, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ValueError("non-finite input")
    return x


def forward(net: MLP, x: np.ndarray) -> np.ndarray:
    """Q-values for one observation (1-D) or a batch (2-D, one row per observation)."""
    h = _check_input(net, x)
    last = len(net.weights) - 1
    for l, (W, b) in enumerate(zip(net.weights, net.biases)):
        h = h @ W + b
        if l < last:
            h = np.maximum(h, 0.0)
    return h


@dataclass
class Gradients:
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    loss: float = 0.0

    def params(self) -> list[np.ndarray]:
        out = []
        for W, b in zip(self.weights, self.biases):
            out += [W, b]
        return out


def masked_loss(net: MLP, obs: np.ndarray, actions: np.ndarray, targets: np.ndarray) -> float:
    """(1/B) * sum_i (Q(s_i, a_i) - y_i)^2."""
    q = forward(net, np.atleast_2d(obs))
    picked = q[np.arange(len(actions)), np.asarray(actions, dtype=int)]
    return float(np.mean((picked - np.asarray(targets, dtype=float)) ** 2))


def backward(net: MLP, obs: np.ndarray, actions: Sequence[int], targets: Sequence[float]) -> Gradients:
    """Gradients of the masked squared error; only the taken action's output carries error."""
    x = _check_input(net, np.atleast_2d(obs))
    actions = np.asarray(actions, dtype=int)
    targets = np.asarray(targets, dtype=float)
    B = x.shape[0]
    if actions.shape != (B,) or targets.shape != (B,):
        raise ValueError("need exactly one action and one target per observation")
    if not np.all(np.isfinite(targets)):
        raise ValueError("non-finite targets")
    if np.any(actions < 0) or np.any(actions >= net.n_outputs):
        raise ValueError("action index out of range")

    acts = [x]
    pre = []
    h = x
    last = len(net.weights) - 1
    for l, (W, b) in enumerate(zip(net.weights, net.biases)):
        z = h @ W + b
        pre.append(z)
        h = np.maximum(z, 0.0) if l < last else z
        acts.append(h)

    rows = np.arange(B)
    err = h[rows, actions] - targets
    delta = np.zeros_like(h)
    delta[rows, actions] = 2.0 * err / B

    gW: list[np.ndarray] = [np.empty(0)] * len(net.weights)
    gb: list[np.ndarray] = [np.empty(0)] * len(net.weights)
    for l in range(last, -1, -1):
        gW[l] = acts[l].T @ delta
        gb[l] = delta.sum(axis=0)
        if l > 0:
            delta = (delta @ net.weights[l].T) * (pre[l - 1] > 0)
    return Gradients(gW, gb, float(np.mean(err * err)))


@dataclass
class OptimizerState:
    method: str = "adam"  # "adam" or "sgd"
    step_size: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)
    t: int = 0

    @classmethod
    def for_net(cls, net: MLP, method: str = "adam", step_size: float = 0.001, **kw) -> "OptimizerState":
        if method not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {method!r}")
        zeros = [np.zeros_like(p) for p in net.params()]
        return cls(method, step_size, m=zeros, v=[np.zeros_like(p) for p in zeros], **kw)


def apply_update(net: MLP, grads: Gradients, opt: OptimizerState) -> None:
    """One optimizer step, in place on ``net`` and ``opt``."""
    params = net.params()
    gs = grads.params()
    if len(gs) != len(params) or any(g.shape != p.shape for g, p in zip(gs, params)):
        raise ArchitectureMismatch("gradient shapes do not match the network")
    opt.t += 1
    if opt.method == "sgd":
        for p, g in zip(params, gs):
            p -= opt.step_size * g
        return
    if len(opt.m) != len(params):
        raise ArchitectureMismatch("optimizer state does not match the network")
    b1, b2 = opt.beta1, opt.beta2
    corr1 = 1.0 - b1**opt.t
    corr2 = 1.0 - b2**opt.t
    for p, g, m, v in zip(params, gs, opt.m, opt.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= opt.step_size * (m / corr1) / (np.sqrt(v / corr2) + opt.eps)


def copy_parameters(source: MLP, target: MLP) -> None:
    if source.layer_sizes != target.layer_sizes:
        raise ArchitectureMismatch(f"{source.layer_sizes} vs {target.layer_sizes}")
    for dst, src in zip(target.params(), source.params()):
        dst[...] = src


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------
#
# MAGIC | u32 n_sizes | u32 sizes[n_sizes] | f64 W0 (row-major) | f64 b0 | ... |
# optional tagged sections: 4-byte tag | u64 payload length | payload
#   b"ADAM": u8 method (0 adam, 1 sgd) | f64 step, beta1, beta2, eps | u64 t | m... | v...
#   b"NORM": f64 offset[n_in] | f64 scale[n_in]


def _write_section(out: BinaryIO, tag: bytes, payload: bytes) -> None:
    out.write(tag + struct.pack("<Q", len(payload)) + payload)


def save_checkpoint(
    out: BinaryIO,
    net: MLP,
    opt: OptimizerState | None = None,
    normalizer: tuple[np.ndarray, np.ndarray] | None = None,
) -> None:
    out.write(MAGIC)
    out.write(struct.pack("<I", len(net.layer_sizes)))
    out.write(struct.pack(f"<{len(net.layer_sizes)}I", *net.layer_sizes))
    for p in net.params():
        out.write(np.ascontiguousarray(p, dtype="<f8").tobytes())
    if normalizer is not None:
        offset, scale = normalizer
        _write_section(out, b"NORM", np.concatenate([offset, scale]).astype("<f8").tobytes())
    if opt is not None:
        head = struct.pack("<B4dQ", 0 if opt.method == "adam" else 1, opt.step_size,
                           opt.beta1, opt.beta2, opt.eps, opt.t)
        body = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for a in opt.m + opt.v)
        _write_section(out, b"ADAM", head + body)


@dataclass
class Checkpoint:
    net: MLP
    optimizer: OptimizerState | None = None
    normalizer: tuple[np.ndarray, np.ndarray] | None = None


def load_checkpoint(data: bytes) -> Checkpoint:
    if not data.startswith(MAGIC):
        raise ValueError("not a DQN checkpoint (bad magic)")
    pos = len(MAGIC)
    (n,) = struct.unpack_from("<I", data, pos)
    pos += 4
    sizes = struct.unpack_from(f"<{n}I", data, pos)
    pos += 4 * n

    def take(count: int) -> np.ndarray:
        nonlocal pos
        arr = np.frombuffer(data, dtype="<f8", count=count, offset=pos).astype(float)
        pos += 8 * count
        return arr

    weights, biases = [], []
    for a, b in zip(sizes[:-1], sizes[1:]):
        weights.append(take(a * b).reshape(a, b))
        biases.append(take(b))
    net = MLP(sizes, weights, biases)
    ckpt = Checkpoint(net)
    while pos < len(data):
        tag = data[pos : pos + 4]
        (length,) = struct.unpack_from("<Q", data, pos + 4)
        pos += 12
        end = pos + length
        if tag == b"NORM":
            vals = take(2 * sizes[0])
            ckpt.normalizer = (vals[: sizes[0]], vals[sizes[0] :])
        elif tag == b"ADAM":
            method, step, b1, b2, eps, t = struct.unpack_from("<B4dQ", data, pos)
            pos += struct.calcsize("<B4dQ")
            shapes = [p.shape for p in net.params()]
            m = [take(int(np.prod(s))).reshape(s) for s in shapes]
            v = [take(int(np.prod(s))).reshape(s) for s in shapes]
            ckpt.optimizer = OptimizerState("adam" if method == 0 else "sgd", step, b1, b2, eps, m, v, t)
        pos = end
    return ckpt
