"""Learned interface flux: network, reverse-mode tape, Adam, checkpoints.

The flux network consumes the (a-1) x b sub-stencil around an interface
(b history rows oldest to newest, each a-1 cells left to right, flattened
row-major): a linear layer of width ``hidden_width`` over the flattened
stencil (the kernel-(a-1) convolution, applied per interface), then
``hidden_layers`` 1x1 layers of the same width, tanh activations, and a
linear scalar output. Applying it across a row shares the weights, which
is what makes Eq.-(3)-style updates conservative regardless of training.

The tape records array-valued primal ops and adjoint closures; with
``tape=None`` the same code runs recording-free for inference.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .grid import ConfigError

CHECKPOINT_MAGIC = b"NFVW"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class NfvArchitecture:
    a: int
    b: int
    hidden_width: int = 15
    hidden_layers: int = 5
    activation: str = "tanh"

    def __post_init__(self):
        if self.a < 3 or self.a % 2 == 0:
            raise ConfigError("stencil width a must be an odd integer >= 3")
        if self.b < 1:
            raise ConfigError("temporal depth b must be >= 1")
        if self.activation != "tanh":
            raise ConfigError("only tanh activation ships")

    @property
    def in_dim(self) -> int:
        return (self.a - 1) * self.b

    @property
    def label(self) -> str:
        return f"nfv_{self.a}_{self.b}"


def param_layout(arch: NfvArchitecture):
    """[(name, offset, shape)] for the flat parameter vector, plus length."""
    dims = [arch.in_dim] + [arch.hidden_width] * (arch.hidden_layers + 1) + [1]
    layout = []
    offset = 0
    for k in range(len(dims) - 1):
        fan_in, fan_out = dims[k], dims[k + 1]
        layout.append((f"w{k}", offset, (fan_in, fan_out)))
        offset += fan_in * fan_out
        layout.append((f"b{k}", offset, (fan_out,)))
        offset += fan_out
    return layout, offset


def param_count(arch: NfvArchitecture) -> int:
    return param_layout(arch)[1]


def init_params(arch: NfvArchitecture, seed: int) -> np.ndarray:
    """Seeded Glorot-uniform weights, zero biases."""
    layout, total = param_layout(arch)
    rng = np.random.default_rng(seed)
    params = np.zeros(total)
    for name, offset, shape in layout:
        if name.startswith("w"):
            bound = np.sqrt(6.0 / (shape[0] + shape[1]))
            params[offset : offset + shape[0] * shape[1]] = rng.uniform(
                -bound, bound, shape[0] * shape[1]
            )
    return params


# ---------------------------------------------------------------------------
# Reverse-mode tape


class Tape:
    def __init__(self):
        self.nodes = []


class Var:
    """Array-valued node; tape=None marks constants/inference values."""

    __slots__ = ("value", "grad", "tape")

    def __init__(self, value, tape: Optional[Tape] = None):
        self.value = np.asarray(value, dtype=float)
        self.grad = None
        self.tape = tape

    @property
    def shape(self):
        return self.value.shape


def _tape_of(*vars_):
    for v in vars_:
        if isinstance(v, Var) and v.tape is not None:
            return v.tape
    return None


def _accum(var, g):
    if isinstance(var, Var) and var.tape is not None:
        var.grad = g if var.grad is None else var.grad + g


def _unbroadcast(g, shape):
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _value(x):
    return x.value if isinstance(x, Var) else np.asarray(x, dtype=float)


def _binary(a, b, fwd, bwd_a, bwd_b):
    tape = _tape_of(a, b)
    out = Var(fwd(_value(a), _value(b)), tape)
    if tape is not None:

        def node():
            if out.grad is None:
                return
            _accum(a, _unbroadcast(bwd_a(out.grad), _value(a).shape))
            _accum(b, _unbroadcast(bwd_b(out.grad), _value(b).shape))

        tape.nodes.append(node)
    return out


def add(a, b):
    return _binary(a, b, np.add, lambda g: g, lambda g: g)


def sub(a, b):
    return _binary(a, b, np.subtract, lambda g: g, lambda g: -g)


def mul(a, b):
    av, bv = _value(a), _value(b)
    return _binary(a, b, np.multiply, lambda g: g * bv, lambda g: g * av)


def matmul(a, b):
    av, bv = _value(a), _value(b)
    tape = _tape_of(a, b)
    out = Var(av @ bv, tape)
    if tape is not None:

        def node():
            if out.grad is None:
                return
            _accum(a, out.grad @ bv.T)
            _accum(b, av.T @ out.grad)

        tape.nodes.append(node)
    return out


def scale(a, c: float):
    return mul(a, float(c))


def tanh(a):
    tape = _tape_of(a)
    val = np.tanh(_value(a))
    out = Var(val, tape)
    if tape is not None:

        def node():
            if out.grad is not None:
                _accum(a, out.grad * (1.0 - val * val))

        tape.nodes.append(node)
    return out


def square(a):
    av = _value(a)
    tape = _tape_of(a)
    out = Var(av * av, tape)
    if tape is not None:

        def node():
            if out.grad is not None:
                _accum(a, out.grad * 2.0 * av)

        tape.nodes.append(node)
    return out


def sum_all(a):
    tape = _tape_of(a)
    av = _value(a)
    out = Var(av.sum(), tape)
    if tape is not None:

        def node():
            if out.grad is not None:
                _accum(a, np.broadcast_to(out.grad, av.shape).copy())

        tape.nodes.append(node)
    return out


def mean_all(a):
    return scale(sum_all(a), 1.0 / _value(a).size)


def reshape(a, shape):
    tape = _tape_of(a)
    av = _value(a)
    out = Var(av.reshape(shape), tape)
    if tape is not None:

        def node():
            if out.grad is not None:
                _accum(a, out.grad.reshape(av.shape))

        tape.nodes.append(node)
    return out


def segment(a, offset: int, shape):
    """Slice a flat vector and view it with the given shape."""
    tape = _tape_of(a)
    av = _value(a)
    n = int(np.prod(shape))
    out = Var(av[offset : offset + n].reshape(shape), tape)
    if tape is not None:

        def node():
            if out.grad is not None:
                g = np.zeros_like(av)
                g[offset : offset + n] = out.grad.ravel()
                _accum(a, g)

        tape.nodes.append(node)
    return out


def getcols(a, j0: int, j1: int):
    tape = _tape_of(a)
    av = _value(a)
    out = Var(av[:, j0:j1], tape)
    if tape is not None:

        def node():
            if out.grad is not None:
                g = np.zeros_like(av)
                g[:, j0:j1] = out.grad
                _accum(a, g)

        tape.nodes.append(node)
    return out


def concat_cols(parts: Sequence):
    tape = _tape_of(*parts)
    vals = [_value(p) for p in parts]
    out = Var(np.concatenate(vals, axis=1), tape)
    if tape is not None:
        splits = np.cumsum([v.shape[1] for v in vals])[:-1]

        def node():
            if out.grad is None:
                return
            for part, g in zip(parts, np.split(out.grad, splits, axis=1)):
                _accum(part, g)

        tape.nodes.append(node)
    return out


def stack_last(parts: Sequence):
    """Stack (n, m) arrays into (n, m, k) along a new last axis."""
    tape = _tape_of(*parts)
    vals = [_value(p) for p in parts]
    out = Var(np.stack(vals, axis=-1), tape)
    if tape is not None:

        def node():
            if out.grad is None:
                return
            for k, part in enumerate(parts):
                _accum(part, out.grad[..., k])

        tape.nodes.append(node)
    return out


def flux_term(model, a):
    """f(u) with the flux model's clamped evaluation; d/du is f'(u) inside
    the domain and 0 where the argument was clamped."""
    from .fluxes import derivative, evaluate

    tape = _tape_of(a)
    av = _value(a)
    out = Var(evaluate(model, av), tape)
    if tape is not None:
        lo, hi = model.domain
        inside = ((av >= lo) & (av <= hi)).astype(float)
        dval = derivative(model, np.clip(av, lo, hi)) * inside

        def node():
            if out.grad is not None:
                _accum(a, out.grad * dval)

        tape.nodes.append(node)
    return out


def backward(tape: Tape, loss: Var) -> None:
    """Seed d(loss)/d(loss)=1 and replay adjoints; grads land in .grad."""
    loss.grad = np.ones_like(loss.value)
    for node in reversed(tape.nodes):
        node()


# ---------------------------------------------------------------------------
# Network forward


def net_apply(arch: NfvArchitecture, params, block):
    """Network output for a block of flattened stencils.

    params: Var or array, flat; block: Var or array (n, (a-1)*b).
    Returns a Var of shape (n,).
    """
    layout, total = param_layout(arch)
    if _value(params).shape != (total,):
        raise ConfigError("parameter vector length does not match architecture")
    if _value(block).ndim != 2 or _value(block).shape[1] != arch.in_dim:
        raise ConfigError("stencil block width does not match architecture")
    if not isinstance(params, Var):
        params = Var(params)
    if not isinstance(block, Var):
        block = Var(block)
    x = block
    n_layers = arch.hidden_layers + 2  # input layer + hidden 1x1s + output
    for k in range(n_layers):
        name_w, off_w, shape_w = layout[2 * k]
        name_b, off_b, shape_b = layout[2 * k + 1]
        w = segment(params, off_w, shape_w)
        bvec = segment(params, off_b, shape_b)
        x = add(matmul(x, w), bvec)
        if k < n_layers - 1:
            x = tanh(x)
    return reshape(x, (_value(x).shape[0],))


def forward_flux(arch: NfvArchitecture, params: np.ndarray, stencil) -> float:
    """Flux for one (b, a-1) sub-stencil (rows: history oldest to newest).

    Flat inputs of length (a-1)*b and batches (n, (a-1)*b) are accepted;
    batches return an array.
    """
    st = np.asarray(stencil, dtype=float)
    batched = st.ndim == 2 and st.shape[1] == arch.in_dim and st.shape != (arch.b, arch.a - 1)
    if not batched:
        if st.shape == (arch.b, arch.a - 1):
            st = st.reshape(1, arch.in_dim)
        elif st.shape == (arch.in_dim,):
            st = st.reshape(1, arch.in_dim)
        else:
            raise ConfigError(
                f"stencil shape {st.shape} does not match NFV_{arch.a}^{arch.b}"
            )
    out = net_apply(arch, params, st).value
    return out if batched else float(out[0])


class NeuralScheme:
    """Duck-typed flux object plugged into schemes.Scheme(kind='neural')."""

    def __init__(self, arch: NfvArchitecture, params: np.ndarray):
        self.arch = arch
        self.params = np.asarray(params, dtype=float)
        self.a = arch.a
        self.b = arch.b
        self.label = arch.label

    def flux_row(self, block: np.ndarray) -> np.ndarray:
        return net_apply(self.arch, self.params, block).value


def neural_scheme(arch: NfvArchitecture, params: np.ndarray):
    from .schemes import NEURAL, Scheme

    return Scheme(kind=NEURAL, neural=NeuralScheme(arch, params))


# ---------------------------------------------------------------------------
# Adam and the learning-rate schedule


@dataclass(frozen=True)
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def fresh(cls, n: int) -> "AdamState":
        return cls(m=np.zeros(n), v=np.zeros(n), t=0)


def adam_step(
    state: AdamState,
    params: np.ndarray,
    grads: np.ndarray,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
):
    if params.shape != grads.shape or params.shape != state.m.shape:
        raise ConfigError("Adam shapes disagree")
    t = state.t + 1
    m = beta1 * state.m + (1.0 - beta1) * grads
    v = beta2 * state.v + (1.0 - beta2) * grads * grads
    m_hat = m / (1.0 - beta1**t)
    v_hat = v / (1.0 - beta2**t)
    new_params = params - lr * m_hat / (np.sqrt(v_hat) + eps)
    return new_params, AdamState(m=m, v=v, t=t)


def lr_schedule(step: int, total_steps: int, lr_start: float, lr_end: float) -> float:
    if not 0 <= step <= total_steps:
        raise ConfigError("schedule step out of range")
    if total_steps == 0:
        return lr_start
    return float(lr_start * (lr_end / lr_start) ** (step / total_steps))


# ---------------------------------------------------------------------------
# Checkpoints


def save_checkpoint(path, arch: NfvArchitecture, params: np.ndarray, manifest: dict):
    params = np.asarray(params, dtype=float)
    if params.shape != (param_count(arch),):
        raise ConfigError("parameter vector length does not match architecture")
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(
        struct.pack(
            "<IIIII",
            CHECKPOINT_VERSION,
            arch.a,
            arch.b,
            arch.hidden_width,
            arch.hidden_layers,
        )
    )
    buf.write(struct.pack("<Q", params.size))
    buf.write(params.astype("<f8").tobytes())
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())
    with open(str(path) + ".manifest.txt", "w", encoding="utf-8", newline="\n") as fh:
        for key in sorted(manifest):
            fh.write(f"{key}={manifest[key]}\n")


def load_checkpoint(path):
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise ConfigError(f"bad checkpoint magic {magic!r}")
        version, a, b, width, layers = struct.unpack("<IIIII", fh.read(20))
        if version != CHECKPOINT_VERSION:
            raise ConfigError(f"unsupported checkpoint version {version}")
        (count,) = struct.unpack("<Q", fh.read(8))
        params = np.frombuffer(fh.read(8 * count), dtype="<f8").copy()
    arch = NfvArchitecture(a=a, b=b, hidden_width=width, hidden_layers=layers)
    if params.size != param_count(arch):
        raise ConfigError("checkpoint payload does not match its header")
    return arch, params
