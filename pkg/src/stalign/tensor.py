"""Reverse-mode autodiff over dense float64 arrays.

The op set is deliberately small: exactly what the alignment losses, the
window projector and the frozen stack need. There is no general
broadcasting; matmul is the one op with batching rules (both operands
stacked with equal leading dims, or a stacked left operand against a
shared 2-D right operand). Everything is float64.
"""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

# Additive mask value. exp(BIG_NEG) underflows to exactly 0.0, so masked
# entries drop out of log-sum-exp reductions without producing NaN.
BIG_NEG = -1e30


class ShapeError(ValueError):
    """Operand shapes incompatible with the requested op."""


class GradientError(RuntimeError):
    """backward() was asked for something it cannot provide."""


class Tape:
    """Execution record for one forward computation.

    Ops append nodes in execution order; backward() replays them exactly
    once, in reverse. A tape is confined to one thread of execution.
    """

    def __init__(self) -> None:
        self._nodes: list[tuple[int, tuple["Tensor", ...], Callable]] = []
        self._leaves: list["Tensor"] = []

    def leaf(self, values) -> "Tensor":
        """Register a trainable input tensor on this tape."""
        t = Tensor(values, requires_grad=True, tape=self)
        self._leaves.append(t)
        return t

    def record(self, out: "Tensor", inputs: tuple["Tensor", ...], pull: Callable) -> None:
        self._nodes.append((id(out), inputs, pull))

    def __len__(self) -> int:
        return len(self._nodes)

    def backward(self, scalar: "Tensor") -> dict["Tensor", np.ndarray]:
        """Gradients of a one-element tensor w.r.t. every registered leaf."""
        if scalar.values.size != 1:
            raise GradientError(
                f"backward() needs a scalar, got shape {scalar.shape}"
            )
        if not self._nodes:
            raise GradientError("backward() on an empty tape")
        grads: dict[int, np.ndarray] = {
            id(scalar): np.ones_like(scalar.values)
        }
        for out_id, inputs, pull in reversed(self._nodes):
            g = grads.pop(out_id, None)
            if g is None:
                continue
            for inp, gi in zip(inputs, pull(g)):
                if gi is None or not inp.requires_grad:
                    continue
                acc = grads.get(id(inp))
                # never mutate in place: pull() may hand the same array
                # to several inputs (e.g. add)
                grads[id(inp)] = gi if acc is None else acc + gi
        out: dict[Tensor, np.ndarray] = {}
        for leaf in self._leaves:
            got = grads.get(id(leaf))
            out[leaf] = np.zeros_like(leaf.values) if got is None else got
        return out


class Tensor:
    """Immutable dense float64 array, optionally tracked on a tape."""

    __slots__ = ("values", "requires_grad", "tape")

    def __init__(self, values, requires_grad: bool = False, tape: Tape | None = None):
        self.values = np.asarray(values, dtype=np.float64)
        self.requires_grad = requires_grad
        self.tape = tape

    # -- basics ---------------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def ndim(self) -> int:
        return self.values.ndim

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def item(self) -> float:
        return float(self.values.reshape(-1)[0])

    # -- op plumbing ----------------------------------------------------

    def _result(self, values: np.ndarray, inputs: tuple["Tensor", ...], pull: Callable) -> "Tensor":
        tape = None
        track = False
        for inp in inputs:
            if inp.requires_grad:
                track = True
                if inp.tape is not None:
                    if tape is not None and tape is not inp.tape:
                        raise GradientError("inputs belong to different tapes")
                    tape = inp.tape
        out = Tensor(values, requires_grad=track, tape=tape)
        if track and tape is not None:
            tape.record(out, inputs, pull)
        return out

    # -- primitive ops ----------------------------------------------------

    def matmul(self, other: "Tensor") -> "Tensor":
        a, b = self.values, other.values
        if a.ndim < 2 or b.ndim < 2:
            raise ShapeError(f"matmul needs matrices, got {a.shape} @ {b.shape}")
        if a.shape[-1] != b.shape[-2]:
            raise ShapeError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
        if b.ndim == 2:
            pass  # stacked @ shared weight
        elif a.ndim == b.ndim and a.shape[:-2] == b.shape[:-2]:
            pass  # equal leading batch dims
        else:
            raise ShapeError(f"unsupported matmul batching: {a.shape} @ {b.shape}")
        vals = a @ b

        def pull(g: np.ndarray):
            ga = gb = None
            if self.requires_grad:
                ga = g @ np.swapaxes(b, -1, -2)
            if other.requires_grad:
                if b.ndim == 2 and a.ndim > 2:
                    k, m = b.shape
                    gb = a.reshape(-1, k).T @ g.reshape(-1, m)
                else:
                    gb = np.swapaxes(a, -1, -2) @ g
            return ga, gb

        return self._result(vals, (self, other), pull)

    def add(self, other: "Tensor") -> "Tensor":
        if self.shape != other.shape:
            raise ShapeError(f"add shapes differ: {self.shape} vs {other.shape}")
        return self._result(
            self.values + other.values,
            (self, other),
            lambda g: (g, g),
        )

    def mul(self, other: "Tensor") -> "Tensor":
        if self.shape != other.shape:
            raise ShapeError(f"mul shapes differ: {self.shape} vs {other.shape}")
        a, b = self.values, other.values
        return self._result(a * b, (self, other), lambda g: (g * b, g * a))

    def scale(self, alpha: float) -> "Tensor":
        alpha = float(alpha)
        return self._result(self.values * alpha, (self,), lambda g: (g * alpha,))

    def exp(self) -> "Tensor":
        out = np.exp(self.values)
        return self._result(out, (self,), lambda g: (g * out,))

    def log(self) -> "Tensor":
        v = self.values
        if np.any(v <= 0.0):
            raise ValueError("log requires strictly positive values")
        return self._result(np.log(v), (self,), lambda g: (g / v,))

    def tanh(self) -> "Tensor":
        out = np.tanh(self.values)
        return self._result(out, (self,), lambda g: (g * (1.0 - out * out),))

    def softmax(self, axis: int = -1) -> "Tensor":
        v = self.values
        shifted = v - np.max(v, axis=axis, keepdims=True)
        e = np.exp(shifted)
        out = e / np.sum(e, axis=axis, keepdims=True)

        def pull(g: np.ndarray):
            inner = np.sum(g * out, axis=axis, keepdims=True)
            return ((g - inner) * out,)

        return self._result(out, (self,), pull)

    def mean(self, axis: int, keepdims: bool = False) -> "Tensor":
        v = self.values
        n = v.shape[axis]
        out = np.mean(v, axis=axis, keepdims=keepdims)

        def pull(g: np.ndarray):
            gg = g if keepdims else np.expand_dims(g, axis)
            return (np.broadcast_to(gg, v.shape) / n,)

        return self._result(out, (self,), pull)

    def l2norm(self, axis: int, keepdims: bool = False) -> "Tensor":
        v = self.values
        out = np.sqrt(np.sum(v * v, axis=axis, keepdims=True))

        def pull(g: np.ndarray):
            gg = g if keepdims else np.expand_dims(g, axis)
            return (np.broadcast_to(gg, v.shape) * v / np.maximum(out, 1e-300),)

        res = out if keepdims else np.squeeze(out, axis=axis)
        return self._result(res, (self,), pull)

    def slice(self, key) -> "Tensor":
        v = self.values
        out = v[key]

        def pull(g: np.ndarray):
            gi = np.zeros_like(v)
            gi[key] = g
            return (gi,)

        return self._result(out, (self,), pull)

    def transpose(self) -> "Tensor":
        """Matrix transpose: swap the last two axes, batch dims untouched."""
        if self.ndim < 2:
            raise ShapeError(f"transpose needs >= 2 dims, got {self.shape}")
        return self._result(
            np.swapaxes(self.values, -1, -2),
            (self,),
            lambda g: (np.swapaxes(g, -1, -2),),
        )

    def reshape(self, shape: tuple[int, ...]) -> "Tensor":
        """Row-major reshape; gradient reshapes back. Internal utility."""
        old = self.shape
        return self._result(
            self.values.reshape(shape),
            (self,),
            lambda g: (g.reshape(old),),
        )

    # -- sugar ------------------------------------------------------------

    def __add__(self, other: "Tensor") -> "Tensor":
        return self.add(other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return self.add(other.scale(-1.0))

    def __mul__(self, other: "Tensor") -> "Tensor":
        return self.mul(other)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return self.matmul(other)

    def __neg__(self) -> "Tensor":
        return self.scale(-1.0)

    def __getitem__(self, key) -> "Tensor":
        return self.slice(key)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    """Concatenate along an existing axis; gradient splits back."""
    if not tensors:
        raise ShapeError("concat of zero tensors")
    base = list(tensors[0].shape)
    for t in tensors[1:]:
        s = list(t.shape)
        if len(s) != len(base) or any(
            i != (axis % len(base)) and s[i] != base[i] for i in range(len(base))
        ):
            raise ShapeError(
                f"concat shapes differ off-axis: {tensors[0].shape} vs {t.shape}"
            )
    vals = np.concatenate([t.values for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def pull(g: np.ndarray):
        out = []
        for i in range(len(tensors)):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(bounds[i], bounds[i + 1])
            out.append(g[tuple(idx)])
        return tuple(out)

    track = any(t.requires_grad for t in tensors)
    tape = next((t.tape for t in tensors if t.tape is not None), None)
    out = Tensor(vals, requires_grad=track, tape=tape if track else None)
    if track and tape is not None:
        tape.record(out, tuple(tensors), pull)
    return out


def constant(values) -> Tensor:
    """Untracked tensor (no gradient, no tape)."""
    return Tensor(values, requires_grad=False, tape=None)


def backward(scalar: Tensor) -> dict[Tensor, np.ndarray]:
    """Gradient map of a one-element tensor w.r.t. its tape's leaves."""
    if scalar.tape is None:
        raise GradientError("tensor is not attached to a tape")
    return scalar.tape.backward(scalar)


_OPS = {
    "matmul": lambda ins, kw: ins[0].matmul(ins[1]),
    "add": lambda ins, kw: ins[0].add(ins[1]),
    "scale": lambda ins, kw: ins[0].scale(kw["alpha"]),
    "exp": lambda ins, kw: ins[0].exp(),
    "log": lambda ins, kw: ins[0].log(),
    "tanh": lambda ins, kw: ins[0].tanh(),
    "softmax-over-axis": lambda ins, kw: ins[0].softmax(kw.get("axis", -1)),
    "mean-over-axis": lambda ins, kw: ins[0].mean(kw["axis"], kw.get("keepdims", False)),
    "l2norm-over-axis": lambda ins, kw: ins[0].l2norm(kw["axis"], kw.get("keepdims", False)),
    "concat": lambda ins, kw: concat(ins, kw.get("axis", 0)),
    "slice": lambda ins, kw: ins[0].slice(kw["key"]),
    "elementwise-mul": lambda ins, kw: ins[0].mul(ins[1]),
    "transpose": lambda ins, kw: ins[0].transpose(),
}


def forward_op(kind: str, inputs: Sequence[Tensor], **kwargs) -> Tensor:
    """Dispatch a primitive op by name; see _OPS for the supported kinds."""
    try:
        fn = _OPS[kind]
    except KeyError:
        raise ValueError(f"unknown op kind {kind!r}") from None
    return fn(list(inputs), kwargs)


# -- compositions used throughout the losses -----------------------------


def sum_along(t: Tensor, axis: int, keepdims: bool = False) -> Tensor:
    return t.mean(axis, keepdims).scale(t.shape[axis])


def sum_all(t: Tensor) -> Tensor:
    out = t
    for _ in range(t.ndim):
        out = sum_along(out, 0)
    return out


def div_positive(num: Tensor, den: Tensor) -> Tensor:
    """Elementwise num / den for strictly positive den (via exp(-log))."""
    return num.mul(den.log().scale(-1.0).exp())


def logsumexp(t: Tensor, axis: int, keepdims: bool = False) -> Tensor:
    """Stable log-sum-exp along one axis (max handled as a constant shift)."""
    m = np.max(t.values, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    shifted = t.add(constant(np.broadcast_to(-m, t.shape).copy()))
    s = sum_along(shifted.exp(), axis, keepdims=True).log()
    out = s.add(constant(m))
    if not keepdims:
        out = out.slice(_squeeze_key(out.ndim, axis))
    return out


def _squeeze_key(ndim: int, axis: int):
    key = [slice(None)] * ndim
    key[axis % ndim] = 0
    return tuple(key)
