"""Tiny float64 building blocks: parameter storage, a linear tape for
reverse-mode gradients, dense/LSTM primitives, Adam and soft updates.

Every array is batch-major: inputs are ``(batch, features)`` and weight
matrices are ``(out, in)`` so a dense layer computes ``x @ W.T + b``.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np


class ConfigError(ValueError):
    """Shapes or hyperparameters that can never work."""


class NumericError(ArithmeticError):
    """A NaN/Inf showed up where a finite value was required."""


class TapeError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# activations

def sigmoid(z):
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def softmax(z, axis=-1):
    z = np.asarray(z, dtype=np.float64)
    e = np.exp(z - z.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def relu(z):
    return np.maximum(z, 0.0)


ACTIVATIONS = {
    "identity": lambda z: z,
    "relu": relu,
    "tanh": np.tanh,
    "sigmoid": sigmoid,
}


def _act_grad(name: str, z: np.ndarray, y: np.ndarray) -> np.ndarray:
    # derivative of activation evaluated through pre-activation z / output y
    if name == "identity":
        return np.ones_like(y)
    if name == "relu":
        return (z > 0).astype(np.float64)
    if name == "tanh":
        return 1.0 - y * y
    if name == "sigmoid":
        return y * (1.0 - y)
    raise ConfigError(f"unknown activation {name!r}")


# ---------------------------------------------------------------------------
# parameter storage

class ParameterSet:
    """Named tensors living in one contiguous float64 vector.

    Keeping everything flat makes Adam, clipping and soft updates single
    vector operations; ``ps[name]`` hands back a writable view.
    """

    def __init__(self, specs: Sequence[tuple[str, tuple[int, ...]]], flat: np.ndarray | None = None):
        self.layout: dict[str, tuple[int, tuple[int, ...]]] = {}
        offset = 0
        for name, shape in specs:
            if name in self.layout:
                raise ConfigError(f"duplicate parameter {name!r}")
            shape = tuple(int(d) for d in shape)
            self.layout[name] = (offset, shape)
            offset += int(np.prod(shape)) if shape else 1
        self.size = offset
        if flat is None:
            flat = np.zeros(offset)
        elif flat.shape != (offset,):
            raise ConfigError(f"flat vector has shape {flat.shape}, expected ({offset},)")
        self.flat = flat
        self._views = {n: self._view(flat, n) for n in self.layout}

    def _view(self, flat, name):
        off, shape = self.layout[name]
        n = int(np.prod(shape)) if shape else 1
        return flat[off:off + n].reshape(shape)

    def __getstate__(self):
        # views would unpickle as independent copies; rebuild them from flat instead
        return {"layout": self.layout, "size": self.size, "flat": self.flat}

    def __setstate__(self, state):
        self.__dict__.update(state)
        self._views = {n: self._view(self.flat, n) for n in self.layout}

    def __getitem__(self, name: str) -> np.ndarray:
        return self._views[name]

    def __contains__(self, name: str) -> bool:
        return name in self.layout

    def names(self) -> list[str]:
        return list(self.layout)

    def span(self, prefixes: Iterable[str]) -> slice:
        """Contiguous flat slice covering every tensor whose name starts with one of ``prefixes``."""
        prefixes = tuple(prefixes)
        hits = [n for n in self.layout if n.startswith(prefixes)]
        if not hits:
            raise ConfigError(f"no parameters under {prefixes}")
        lo = min(self.layout[n][0] for n in hits)
        hi = max(self.layout[n][0] + self[n].size for n in hits)
        covered = sum(self[n].size for n in hits)
        if covered != hi - lo:
            raise ConfigError(f"parameters under {prefixes} are not contiguous")
        return slice(lo, hi)

    def zeros_like(self) -> "ParameterSet":
        return ParameterSet([(n, s) for n, (_, s) in self.layout.items()])

    def copy(self) -> "ParameterSet":
        return ParameterSet([(n, s) for n, (_, s) in self.layout.items()], self.flat.copy())

    def same_layout(self, other: "ParameterSet") -> bool:
        return self.layout == other.layout


def init_uniform(ps: ParameterSet, rng: np.random.Generator, skip: Callable[[str], bool] = lambda n: False) -> None:
    """uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for matrices; vectors stay zero."""
    for name in ps.names():
        w = ps[name]
        if w.ndim == 2 and not skip(name):
            bound = 1.0 / np.sqrt(w.shape[1])
            w[...] = rng.uniform(-bound, bound, size=w.shape)


# ---------------------------------------------------------------------------
# tape

class Var:
    __slots__ = ("value", "grad", "needs_grad")

    def __init__(self, value, needs_grad=False):
        self.value = value
        self.grad = None
        self.needs_grad = needs_grad

    @property
    def shape(self):
        return self.value.shape

    def _acc(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g


class Tape:
    """Ordered record of primitive ops; ``backward`` replays it once in reverse.

    Parameters are bound with :meth:`param`; only bound parameters (and
    anything computed from them) get gradients.  ``min_kink`` tracks the
    closest relu pre-activation to zero, which gradient checks use to avoid
    sampling non-differentiable points.
    """

    def __init__(self, params: ParameterSet | None = None, trainable: Iterable[str] | None = None):
        self.params = params
        self._ops: list[Callable[[], None]] = []
        self._bound: dict[str, Var] = {}
        self._trainable = None if trainable is None else tuple(trainable)
        self._replayed = False
        self.min_kink = np.inf

    def __len__(self):
        return len(self._ops)

    def param(self, name: str) -> Var:
        v = self._bound.get(name)
        if v is None:
            track = self._trainable is None or name.startswith(self._trainable)
            v = Var(self.params[name], needs_grad=track)
            self._bound[name] = v
        return v

    @staticmethod
    def const(x) -> Var:
        return Var(np.asarray(x, dtype=np.float64))

    def _record(self, fn):
        self._ops.append(fn)

    # -- primitives -------------------------------------------------------

    def dense(self, x: Var, W: Var, b: Var | None, activation: str = "identity") -> Var:
        if x.value.shape[-1] != W.value.shape[1]:
            raise ConfigError(f"dense: input dim {x.value.shape[-1]} != W.cols {W.value.shape[1]}")
        if b is not None and b.value.shape[0] != W.value.shape[0]:
            raise ConfigError(f"dense: bias dim {b.value.shape[0]} != W.rows {W.value.shape[0]}")
        z = x.value @ W.value.T
        if b is not None:
            z = z + b.value
        if activation not in ACTIVATIONS:
            raise ConfigError(f"unknown activation {activation!r}")
        y = ACTIVATIONS[activation](z)
        if activation == "relu" and z.size:
            self.min_kink = min(self.min_kink, float(np.abs(z).min()))
        out = Var(y, x.needs_grad or W.needs_grad or (b is not None and b.needs_grad))
        if out.needs_grad:
            def back():
                if out.grad is None:
                    return
                gz = out.grad * _act_grad(activation, z, y)
                if x.needs_grad:
                    x._acc(gz @ W.value)
                if W.needs_grad:
                    W._acc(gz.T @ x.value)
                if b is not None and b.needs_grad:
                    b._acc(gz.sum(axis=0))
            self._record(back)
        return out

    def lstm(self, x: Var, h: Var, c: Var, W: Var, b: Var) -> tuple[Var, Var]:
        """One LSTM step; W stacks the forget/update/output/candidate rows."""
        H = h.value.shape[1]
        if W.value.shape != (4 * H, H + x.value.shape[1]):
            raise ConfigError(f"lstm: W shape {W.value.shape} incompatible with hidden {H}, input {x.value.shape[1]}")
        hx = np.concatenate([h.value, x.value], axis=1)
        z = hx @ W.value.T + b.value
        gates = sigmoid(z[:, :3 * H])
        zf, zu, zo = gates[:, :H], gates[:, H:2 * H], gates[:, 2 * H:]
        cand = np.tanh(z[:, 3 * H:])
        c_new = zf * c.value + zu * cand
        tc = np.tanh(c_new)
        h_new = zo * tc
        needs = x.needs_grad or h.needs_grad or c.needs_grad or W.needs_grad or b.needs_grad
        hv, cv = Var(h_new, needs), Var(c_new, needs)
        if needs:
            def back():
                gh = hv.grad if hv.grad is not None else 0.0
                gc = cv.grad if cv.grad is not None else 0.0
                if hv.grad is None and cv.grad is None:
                    return
                gc = gc + gh * zo * (1.0 - tc * tc)
                gzo = gh * tc * zo * (1.0 - zo)
                gzf = gc * c.value * zf * (1.0 - zf)
                gzu = gc * cand * zu * (1.0 - zu)
                gzc = gc * zu * (1.0 - cand * cand)
                gz = np.concatenate([gzf, gzu, gzo, gzc], axis=1)
                if W.needs_grad:
                    W._acc(gz.T @ hx)
                if b.needs_grad:
                    b._acc(gz.sum(axis=0))
                if h.needs_grad or x.needs_grad:
                    ghx = gz @ W.value
                    if h.needs_grad:
                        h._acc(ghx[:, :H])
                    if x.needs_grad:
                        x._acc(ghx[:, H:])
                if c.needs_grad:
                    c._acc(gc * zf)
            self._record(back)
        return hv, cv

    def concat(self, parts: Sequence[Var]) -> Var:
        vals = [p.value for p in parts]
        out = Var(np.concatenate(vals, axis=1), any(p.needs_grad for p in parts))
        if out.needs_grad:
            edges = np.cumsum([0] + [v.shape[1] for v in vals])

            def back():
                if out.grad is None:
                    return
                for p, lo, hi in zip(parts, edges[:-1], edges[1:]):
                    if p.needs_grad:
                        p._acc(out.grad[:, lo:hi])
            self._record(back)
        return out

    def cols(self, x: Var, lo: int, hi: int) -> Var:
        out = Var(x.value[:, lo:hi], x.needs_grad)
        if out.needs_grad:
            def back():
                if out.grad is None:
                    return
                g = np.zeros_like(x.value)
                g[:, lo:hi] = out.grad
                x._acc(g)
            self._record(back)
        return out

    def add(self, *xs: Var) -> Var:
        val = xs[0].value
        for x in xs[1:]:
            val = val + x.value
        out = Var(val, any(x.needs_grad for x in xs))
        if out.needs_grad:
            def back():
                if out.grad is None:
                    return
                for x in xs:
                    if x.needs_grad:
                        x._acc(_unbroadcast(out.grad, x.value.shape))
            self._record(back)
        return out

    def mul(self, a: Var, b: Var) -> Var:
        out = Var(a.value * b.value, a.needs_grad or b.needs_grad)
        if out.needs_grad:
            def back():
                if out.grad is None:
                    return
                if a.needs_grad:
                    a._acc(_unbroadcast(out.grad * b.value, a.value.shape))
                if b.needs_grad:
                    b._acc(_unbroadcast(out.grad * a.value, b.value.shape))
            self._record(back)
        return out

    def softmax(self, x: Var) -> Var:
        y = softmax(x.value, axis=1)
        out = Var(y, x.needs_grad)
        if out.needs_grad:
            def back():
                if out.grad is None:
                    return
                g = out.grad
                x._acc(y * (g - (g * y).sum(axis=1, keepdims=True)))
            self._record(back)
        return out

    def sigmoid(self, x: Var) -> Var:
        y = sigmoid(x.value)
        out = Var(y, x.needs_grad)
        if out.needs_grad:
            def back():
                if out.grad is not None:
                    x._acc(out.grad * y * (1.0 - y))
            self._record(back)
        return out

    def rowdot(self, a: Var, b: Var) -> Var:
        """Per-row dot product, returns shape (batch, 1)."""
        if a.value.shape[-1] != b.value.shape[-1]:
            raise ConfigError(f"rowdot: dims {a.value.shape} vs {b.value.shape}")
        out = Var((a.value * b.value).sum(axis=1, keepdims=True), a.needs_grad or b.needs_grad)
        if out.needs_grad:
            def back():
                if out.grad is None:
                    return
                if a.needs_grad:
                    a._acc(_unbroadcast(out.grad * b.value, a.value.shape))
                if b.needs_grad:
                    b._acc(_unbroadcast(out.grad * a.value, b.value.shape))
            self._record(back)
        return out

    def embed(self, table: Var, idx: np.ndarray) -> Var:
        idx = np.asarray(idx, dtype=np.int64)
        out = Var(table.value[idx], table.needs_grad)
        if out.needs_grad:
            def back():
                if out.grad is None:
                    return
                g = np.zeros_like(table.value)
                np.add.at(g, idx, out.grad)
                table._acc(g)
            self._record(back)
        return out

    # -- reverse sweep ----------------------------------------------------

    def backward(self, out: Var, seed=None) -> np.ndarray:
        """Replay the tape from ``out``; returns a flat gradient vector laid out like ``params``."""
        if self._replayed:
            raise TapeError("tape already replayed")
        if not self._ops and not any(v is out for v in self._bound.values()):
            raise TapeError("empty tape")
        self._replayed = True
        seed = np.ones_like(out.value) if seed is None else np.asarray(seed, dtype=np.float64)
        if seed.shape != out.value.shape:
            raise ConfigError(f"seed gradient shape {seed.shape} != output shape {out.value.shape}")
        out.grad = seed.copy()
        for fn in reversed(self._ops):
            fn()
        grads = np.zeros(self.params.size) if self.params is not None else np.zeros(0)
        for name, v in self._bound.items():
            if v.needs_grad and v.grad is not None:
                off, shape = self.params.layout[name]
                grads[off:off + v.grad.size] += v.grad.ravel()
        return grads


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, d in enumerate(shape):
        if d == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# functional wrappers


@dataclass
class LstmState:
    c: np.ndarray
    h: np.ndarray

    @classmethod
    def zeros(cls, batch: int, hidden: int) -> "LstmState":
        return cls(np.zeros((batch, hidden)), np.zeros((batch, hidden)))

    def copy(self) -> "LstmState":
        return LstmState(self.c.copy(), self.h.copy())


def dense_forward(x, W, b, activation="identity", tape: Tape | None = None):
    """activation(W x + b) for a single vector or a batch of rows."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    t = tape or Tape()
    out = t.dense(t.const(np.atleast_2d(x)), t.const(W), t.const(b), activation)
    return out.value[0] if single else out.value


def lstm_step(inp, prev: LstmState, W_gates, b_gates) -> LstmState:
    inp = np.atleast_2d(np.asarray(inp, dtype=np.float64))
    bad = np.flatnonzero(~np.isfinite(inp).all(axis=0))
    if bad.size:
        raise NumericError(f"non-finite LSTM input at index {int(bad[0])}")
    t = Tape()
    h, c = t.lstm(t.const(inp), t.const(np.atleast_2d(prev.h)), t.const(np.atleast_2d(prev.c)),
                  t.const(W_gates), t.const(b_gates))
    return LstmState(c.value, h.value)


def backward(tape: Tape, out: Var, loss_grad=None) -> np.ndarray:
    return tape.backward(out, loss_grad)


def clip_by_global_norm(grads: np.ndarray, max_norm: float) -> float:
    """In-place; returns the pre-clip norm."""
    norm = float(np.sqrt(np.dot(grads, grads)))
    if norm > max_norm:
        grads *= max_norm / norm
    return norm


# ---------------------------------------------------------------------------
# optimiser and target tracking


@dataclass
class AdamState:
    size: int
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: np.ndarray = field(default=None)
    v: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.m is None:
            self.m = np.zeros(self.size)
        if self.v is None:
            self.v = np.zeros(self.size)


def adam_update(params: np.ndarray, grads: np.ndarray, state: AdamState) -> None:
    """One bias-corrected Adam step, in place on ``params`` (a flat vector or slice view)."""
    if params.shape != grads.shape or params.shape != state.m.shape:
        raise ConfigError(f"adam: shapes {params.shape}, {grads.shape}, {state.m.shape} differ")
    if not np.all(np.isfinite(grads)):
        bad = int(np.flatnonzero(~np.isfinite(grads))[0])
        raise NumericError(f"non-finite gradient at flat index {bad}; update aborted")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    state.m *= b1
    state.m += (1.0 - b1) * grads
    state.v *= b2
    state.v += (1.0 - b2) * grads * grads
    m_hat = state.m / (1.0 - b1 ** state.step)
    v_hat = state.v / (1.0 - b2 ** state.step)
    params -= state.lr * m_hat / (np.sqrt(v_hat) + state.eps)


def soft_update(target: np.ndarray, online: np.ndarray, tau: float) -> np.ndarray:
    """target <- tau * online + (1 - tau) * target, in place."""
    if not 0.0 <= tau <= 1.0:
        raise ConfigError(f"tau must lie in [0, 1], got {tau}")
    if target.shape != online.shape:
        raise ConfigError(f"soft_update: shapes {target.shape} vs {online.shape}")
    if tau == 0.0:
        return target
    target[...] = tau * online + (1.0 - tau) * target
    return target


# ---------------------------------------------------------------------------
# checkpoints
#
# layout (little endian):
#   b"RLLTVCKP"  u32 version  u32 n_tensors
#   per tensor:  u32 name_len  name(utf-8)  u32 ndim  u64*ndim shape  f64*prod(shape)
# tensors are written in sorted name order so identical state gives identical bytes.

CHECKPOINT_MAGIC = b"RLLTVCKP"
CHECKPOINT_VERSION = 1


def save_tensors(path, tensors: dict[str, np.ndarray]) -> None:
    chunks = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(tensors))]
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype="<f8")
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<I", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        chunks.append(arr.tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(chunks))


def load_tensors(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:8] != CHECKPOINT_MAGIC:
        raise ConfigError(f"{path}: not a checkpoint file")
    version, count = struct.unpack_from("<II", data, 8)
    if version != CHECKPOINT_VERSION:
        raise ConfigError(f"{path}: unsupported checkpoint version {version}")
    pos = 16
    out = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<I", data, pos)
        pos += 4
        name = data[pos:pos + n].decode("utf-8")
        pos += n
        (ndim,) = struct.unpack_from("<I", data, pos)
        pos += 4
        shape = struct.unpack_from(f"<{ndim}Q", data, pos)
        pos += 8 * ndim
        size = int(np.prod(shape)) if ndim else 1
        out[name] = np.frombuffer(data, dtype="<f8", count=size, offset=pos).reshape(shape).copy()
        pos += 8 * size
    return out


def adam_tensors(prefix: str, state: AdamState) -> dict[str, np.ndarray]:
    return {
        f"{prefix}/m": state.m,
        f"{prefix}/v": state.v,
        f"{prefix}/hyper": np.array([state.step, state.lr, state.beta1, state.beta2, state.eps], dtype=np.float64),
    }


def adam_from_tensors(prefix: str, tensors: dict[str, np.ndarray]) -> AdamState:
    step, lr, b1, b2, eps = tensors[f"{prefix}/hyper"]
    m = tensors[f"{prefix}/m"].copy()
    return AdamState(size=m.size, lr=float(lr), beta1=float(b1), beta2=float(b2), eps=float(eps),
                     step=int(step), m=m, v=tensors[f"{prefix}/v"].copy())
