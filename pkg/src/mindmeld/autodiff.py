"""Small reverse-mode autodiff over numpy arrays.

Ops are recorded on the active :class:`Tape` as whole-array nodes (a matmul, a
full bidirectional LSTM pass, ...), so backprop cost is proportional to the
number of ops rather than the number of scalars.

    with Tape() as tape:
        y = (x * w).sum()
    tape.backward(y)
    w.grad
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

DTYPE = np.float64


class Tensor:
    """An array that can take part in differentiation."""

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=DTYPE)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def __len__(self) -> int:
        return len(self.data)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None):
        return reduce_sum(self, axis)

    def mean(self, axis=None):
        return reduce_mean(self, axis)


@dataclass
class _Node:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]
    saved: dict = field(default_factory=dict)


class Tape:
    """Records differentiable ops in execution order.

    Nodes are appended as ops run, so each input is produced before its
    consumer. :meth:`backward` walks the nodes in exact reverse order.
    """

    _active: list["Tape"] = []

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        Tape._active.append(self)
        return self

    def __exit__(self, *exc) -> None:
        Tape._active.remove(self)

    def record(self, node: _Node) -> None:
        self.nodes.append(node)

    def backward(self, loss: Tensor) -> None:
        """Accumulate dloss/dtensor into ``.grad`` of every tensor that needs it."""
        if loss.data.size != 1:
            raise ValueError(f"loss must be scalar, got shape {loss.shape}")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self.nodes):
            g_out = grads.pop(id(node.output), None)
            if g_out is None:
                continue
            for tensor, g in zip(node.inputs, node.backward(g_out)):
                if g is None or not tensor.requires_grad:
                    continue
                key = id(tensor)
                if key in grads:
                    grads[key] = grads[key] + g
                else:
                    grads[key] = g
        for node in self.nodes:
            for tensor in node.inputs:
                _deposit(tensor, grads)
        _deposit(loss, grads)

    def clear(self) -> None:
        self.nodes.clear()


def _deposit(tensor: Tensor, grads: dict[int, np.ndarray]) -> None:
    # Only leaves (tensors with no producing node) keep a grad; interior grads
    # were consumed by pop() above.
    g = grads.pop(id(tensor), None)
    if g is None or not tensor.requires_grad:
        return
    tensor.grad = g.copy() if tensor.grad is None else tensor.grad + g


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _emit(op: str, inputs: tuple[Tensor, ...], out_data: np.ndarray, backward, saved=None) -> Tensor:
    needs = any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=needs)
    if needs and Tape._active:
        Tape._active[-1].record(_Node(op, inputs, out, backward, saved or {}))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    return _emit(
        "add", (a, b), a.data + b.data,
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    return _emit(
        "sub", (a, b), a.data - b.data,
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    return _emit(
        "mul", (a, b), a.data * b.data,
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def square(x: Tensor) -> Tensor:
    return _emit("square", (x,), x.data * x.data, lambda g: (2.0 * x.data * g,))


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    return _emit("exp", (x,), y, lambda g: (g * y,))


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _emit("tanh", (x,), y, lambda g: (g * (1.0 - y * y),))


def sigmoid(x: Tensor) -> Tensor:
    y = _sigmoid(x.data)
    return _emit("sigmoid", (x,), y, lambda g: (g * y * (1.0 - y),))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _emit("relu", (x,), np.where(mask, x.data, 0.0), lambda g: (g * mask,))


def clamp(x: Tensor, lo: float, hi: float) -> Tensor:
    """Clip to [lo, hi]; gradient is zero where clipping is active."""
    inside = (x.data >= lo) & (x.data <= hi)
    return _emit("clamp", (x,), np.clip(x.data, lo, hi), lambda g: (g * inside,))


def identity(x: Tensor) -> Tensor:
    return x


ACTIVATIONS: dict[str, Callable[[Tensor], Tensor]] = {
    "linear": identity,
    "relu": relu,
    "tanh": tanh,
    "sigmoid": sigmoid,
}


# ---------------------------------------------------------------- structural


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape[-1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

    def backward(g):
        ga = g @ b.data.T
        if a.data.ndim == 1:
            gb = np.outer(a.data, g)
        else:
            gb = a.data.T @ g
        return ga, gb

    return _emit("matmul", (a, b), a.data @ b.data, backward)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = tuple(_as_tensor(t) for t in tensors)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    return _emit(
        "concat", tensors, np.concatenate([t.data for t in tensors], axis=axis),
        lambda g: np.split(g, splits, axis=axis),
    )


def getitem(x: Tensor, index) -> Tensor:
    def backward(g):
        out = np.zeros_like(x.data)
        np.add.at(out, index, g)
        return (out,)

    return _emit("getitem", (x,), x.data[index], backward)


def gather_rows(table: Tensor, rows: np.ndarray) -> Tensor:
    """Embedding lookup; repeated rows accumulate their gradients."""
    rows = np.asarray(rows, dtype=np.intp)

    def backward(g):
        out = np.zeros_like(table.data)
        np.add.at(out, rows, g)
        return (out,)

    return _emit("gather_rows", (table,), table.data[rows], backward)


def reduce_sum(x: Tensor, axis=None) -> Tensor:
    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, x.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), x.shape).copy(),)

    return _emit("sum", (x,), np.asarray(x.data.sum(axis=axis)), backward)


def reduce_mean(x: Tensor, axis=None) -> Tensor:
    n = x.data.size if axis is None else x.shape[axis]
    return mul(reduce_sum(x, axis), 1.0 / n)


# ---------------------------------------------------------------- layers


@dataclass
class DenseParams:
    """A chain of affine layers, one activation tag per layer."""

    weights: list[Tensor]
    biases: list[Tensor]
    activations: list[str]

    @classmethod
    def init(cls, widths: Sequence[int], activations: Sequence[str], rng: np.random.Generator, prefix: str = "dense"):
        if len(activations) != len(widths) - 1:
            raise ValueError("need one activation per layer")
        weights, biases = [], []
        for k, (fan_in, fan_out) in enumerate(zip(widths[:-1], widths[1:])):
            bound = 1.0 / np.sqrt(fan_in)
            weights.append(Tensor(rng.uniform(-bound, bound, (fan_in, fan_out)), True, f"{prefix}.W{k}"))
            biases.append(Tensor(rng.uniform(-bound, bound, fan_out), True, f"{prefix}.b{k}"))
        return cls(weights, biases, list(activations))

    @property
    def widths(self) -> list[int]:
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    def parameters(self) -> list[Tensor]:
        return [p for pair in zip(self.weights, self.biases) for p in pair]


def forward_dense(params: DenseParams, x) -> Tensor:
    x = _as_tensor(x)
    if x.shape[-1] != params.widths[0]:
        raise ValueError(f"dense input has width {x.shape[-1]}, expected {params.widths[0]}")
    for w, b, act in zip(params.weights, params.biases, params.activations):
        x = ACTIVATIONS[act](add(matmul(x, w), b))
    return x


@dataclass
class LstmParams:
    """Bidirectional LSTM weights.

    Each direction has ``W`` of shape ``(input_size + hidden_size, 4*hidden)``
    acting on ``[x_t, h_{t-1}]`` and bias ``b`` of shape ``(4*hidden,)``.
    Gate blocks are ordered input, forget, cell, output.
    """

    input_size: int
    hidden_size: int
    W_fwd: Tensor
    b_fwd: Tensor
    W_bwd: Tensor
    b_bwd: Tensor

    @classmethod
    def init(cls, input_size: int, hidden_size: int, rng: np.random.Generator, forget_bias: float = 1.0):
        bound = 1.0 / np.sqrt(hidden_size)
        shape = (input_size + hidden_size, 4 * hidden_size)

        def u(*s):
            return rng.uniform(-bound, bound, s)

        def bias():
            b = u(4 * hidden_size)
            b[hidden_size:2 * hidden_size] += forget_bias
            return b

        return cls(
            input_size, hidden_size,
            Tensor(u(*shape), True, "lstm.W_fwd"), Tensor(bias(), True, "lstm.b_fwd"),
            Tensor(u(*shape), True, "lstm.W_bwd"), Tensor(bias(), True, "lstm.b_bwd"),
        )

    @classmethod
    def zeros(cls, input_size: int, hidden_size: int):
        shape = (input_size + hidden_size, 4 * hidden_size)
        return cls(
            input_size, hidden_size,
            Tensor(np.zeros(shape), True), Tensor(np.zeros(4 * hidden_size), True),
            Tensor(np.zeros(shape), True), Tensor(np.zeros(4 * hidden_size), True),
        )

    def parameters(self) -> list[Tensor]:
        return [self.W_fwd, self.b_fwd, self.W_bwd, self.b_bwd]


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _lstm_pass(x: np.ndarray, W: np.ndarray, b: np.ndarray, H: int):
    """Run one direction over ``x`` of shape (B, T, in); keep gates for BPTT."""
    B, T, n_in = x.shape
    Wh = W[n_in:]
    xproj = x @ W[:n_in] + b
    h = np.zeros((B, H))
    c = np.zeros((B, H))
    hs = np.empty((B, T, H))  # h_{t-1} fed into step t
    gates = np.empty((B, T, 4 * H))
    cs = np.empty((B, T, H))  # c_{t-1}
    tcs = np.empty((B, T, H))
    for t in range(T):
        hs[:, t] = h
        cs[:, t] = c
        pre = xproj[:, t] + h @ Wh
        act = _sigmoid(pre)
        act[:, 2 * H:3 * H] = np.tanh(pre[:, 2 * H:3 * H])
        gates[:, t] = act
        i, f, g, o = act[:, :H], act[:, H:2 * H], act[:, 2 * H:3 * H], act[:, 3 * H:]
        c = f * c + i * g
        tc = np.tanh(c)
        tcs[:, t] = tc
        h = o * tc
    return h, (x, hs, gates, cs, tcs)


def _lstm_backprop(dh: np.ndarray, cache, W: np.ndarray, in_size: int, H: int):
    x, hs, gates, cs, tcs = cache
    B, T, _ = x.shape
    Wh = W[in_size:]
    dpre = np.empty((B, T, 4 * H))
    dc = np.zeros((B, H))
    for t in range(T - 1, -1, -1):
        act = gates[:, t]
        i, f, g, o = act[:, :H], act[:, H:2 * H], act[:, 2 * H:3 * H], act[:, 3 * H:]
        tc = tcs[:, t]
        dc = dc + dh * o * (1.0 - tc * tc)
        d = dpre[:, t]
        d[:, :H] = dc * g * i * (1 - i)
        d[:, H:2 * H] = dc * cs[:, t] * f * (1 - f)
        d[:, 2 * H:3 * H] = dc * i * (1 - g * g)
        d[:, 3 * H:] = dh * tc * o * (1 - o)
        dh = d @ Wh.T
        dc = dc * f
    flat = dpre.reshape(B * T, 4 * H)
    dW = np.vstack([x.reshape(B * T, in_size).T @ flat, hs.reshape(B * T, H).T @ flat])
    db = flat.sum(axis=0)
    dx = dpre @ W[:in_size].T
    return dx, dW, db


def forward_lstm_bidirectional(params: LstmParams, seq) -> Tensor:
    """Final hidden states of the forward and backward passes, concatenated.

    ``seq`` is (T, in) for a single sequence or (B, T, in) for a batch; the
    result is (2*hidden,) or (B, 2*hidden) respectively.
    """
    seq = _as_tensor(seq)
    single = seq.data.ndim == 2
    x = seq.data[None] if single else seq.data
    if x.ndim != 3 or x.shape[1] == 0:
        raise ValueError("empty input sequence")
    if x.shape[2] != params.input_size:
        raise ValueError(f"sequence feature size {x.shape[2]} != LSTM input size {params.input_size}")
    if not np.all(np.isfinite(x)):
        raise ValueError("non-finite values in input sequence")
    H = params.hidden_size
    h_f, cache_f = _lstm_pass(x, params.W_fwd.data, params.b_fwd.data, H)
    h_b, cache_b = _lstm_pass(x[:, ::-1, :], params.W_bwd.data, params.b_bwd.data, H)
    out = np.concatenate([h_f, h_b], axis=1)

    def backward(g):
        g = g[None] if single else g
        dx_f, dW_f, db_f = _lstm_backprop(g[:, :H], cache_f, params.W_fwd.data, params.input_size, H)
        dx_b, dW_b, db_b = _lstm_backprop(g[:, H:], cache_b, params.W_bwd.data, params.input_size, H)
        dx = dx_f + dx_b[:, ::-1, :]
        if single:
            dx = dx[0]
        return dx, dW_f, db_f, dW_b, db_b

    return _emit(
        "lstm_bidirectional",
        (seq, params.W_fwd, params.b_fwd, params.W_bwd, params.b_bwd),
        out[0] if single else out,
        backward,
        saved={"forward_gates": cache_f, "backward_gates": cache_b},
    )


def sample_gaussian_reparam(mean: Tensor, log_var: Tensor, noise) -> Tensor:
    """``mean + exp(log_var / 2) * noise``; noise is treated as a constant."""
    noise = np.asarray(noise.data if isinstance(noise, Tensor) else noise, dtype=DTYPE)
    if mean.shape != log_var.shape or mean.shape != noise.shape:
        raise ValueError(f"shape mismatch: mean {mean.shape}, log_var {log_var.shape}, noise {noise.shape}")
    return add(mean, mul(exp(mul(log_var, 0.5)), Tensor(noise)))


# ---------------------------------------------------------------- optimizer


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0

    @classmethod
    def zeros_like(cls, params: Sequence[Tensor]) -> "AdamState":
        return cls([np.zeros_like(p.data) for p in params], [np.zeros_like(p.data) for p in params])


def adam_step(
    params: Sequence[Tensor],
    grads: Sequence[np.ndarray | None],
    state: AdamState,
    lr: float = 1e-3,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
) -> None:
    """One bias-corrected Adam update, in place. ``None`` grads count as zero."""
    b1, b2 = betas
    state.t += 1
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for k, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.data.shape:
            raise ValueError(f"grad shape {g.shape} != param shape {p.data.shape}")
        state.m[k] = b1 * state.m[k] + (1 - b1) * g
        state.v[k] = b2 * state.v[k] + (1 - b2) * g * g
        p.data -= lr * (state.m[k] / c1) / (np.sqrt(state.v[k] / c2) + eps)


class Adam:
    def __init__(self, params: Sequence[Tensor], lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr, self.betas, self.eps = lr, betas, eps
        self.state = AdamState.zeros_like(self.params)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        adam_step(self.params, [p.grad for p in self.params], self.state, self.lr, self.betas, self.eps)
