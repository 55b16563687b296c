"""Tape-based reverse-mode differentiation over the numpy kernels.

A ``Tape`` is an append-only list of nodes; every op records its output
value plus a closure computing input adjoints from the output adjoint.
Backward walks the tape once in reverse, accumulating gradients additively
across fan-out. A finite-difference oracle (``finite_diff_grad``) and a
per-op check harness (``grad_check``) verify every registered adjoint.

Complex FFT values are represented as (re, im) pairs of real nodes, so the
whole engine only ever differentiates real arrays.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import kernels as K
from .errors import ConfigError, ShapeError, UnknownOpError

# Every op kind that may legally appear on a tape. Ops register themselves
# at import time; Tape.record rejects anything else.
KNOWN_OP_KINDS: set[str] = {"leaf", "constant"}


def _known(kind: str) -> str:
    KNOWN_OP_KINDS.add(kind)
    return kind


class Node:
    __slots__ = ("op", "inputs", "value", "bwd")

    def __init__(self, op, inputs, value, bwd):
        self.op = op
        self.inputs = inputs
        self.value = value
        self.bwd = bwd


class Var:
    """Handle to one tape node."""

    __slots__ = ("tape", "idx")

    def __init__(self, tape: "Tape", idx: int):
        self.tape = tape
        self.idx = idx

    @property
    def value(self) -> np.ndarray:
        return self.tape.nodes[self.idx].value

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def _wrap(self, other) -> "Var":
        if isinstance(other, Var):
            return other
        return self.tape.constant(np.asarray(other, dtype=np.float64))

    def __add__(self, other):
        return add(self, self._wrap(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, self._wrap(other))

    def __rsub__(self, other):
        return sub(self._wrap(other), self)

    def __mul__(self, other):
        return mul(self, self._wrap(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, self._wrap(other))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


class GradMap:
    """Node id -> gradient array, zero-filled for unreached leaves."""

    def __init__(self, tape: "Tape", grads: dict[int, np.ndarray]):
        self._tape = tape
        self._grads = grads

    def grad(self, v: Var) -> np.ndarray:
        g = self._grads.get(v.idx)
        if g is None:
            return np.zeros_like(self._tape.nodes[v.idx].value)
        return g

    def __contains__(self, v: Var) -> bool:
        return v.idx in self._grads


class Tape:
    """Single-writer op recorder. Construction and backward happen on one
    thread; independent tapes are fully independent."""

    def __init__(self):
        self.nodes: list[Node] = []

    def __len__(self):
        return len(self.nodes)

    def record(self, op: str, inputs: Sequence[Var], value: np.ndarray, bwd=None) -> Var:
        if op not in KNOWN_OP_KINDS:
            raise UnknownOpError(f"op kind {op!r} was never registered")
        ids = tuple(v.idx for v in inputs)
        if any(v.tape is not self for v in inputs) or any(
            i >= len(self.nodes) for i in ids
        ):
            raise ConfigError("record() inputs must already be on this tape")
        self.nodes.append(Node(op, ids, np.asarray(value, dtype=np.float64), bwd))
        return Var(self, len(self.nodes) - 1)

    def leaf(self, value) -> Var:
        return self.record("leaf", (), K.as_f64(value))

    def constant(self, value) -> Var:
        return self.record("constant", (), K.as_f64(value))

    def backward(self, loss: Var) -> GradMap:
        if loss.tape is not self:
            raise ConfigError("loss lives on a different tape")
        if loss.value.size != 1:
            raise ConfigError(f"backward needs a scalar loss, got shape {loss.shape}")
        grads: dict[int, np.ndarray] = {loss.idx: np.ones_like(loss.value)}
        for i in range(loss.idx, -1, -1):
            g = grads.get(i)
            if g is None:
                continue
            node = self.nodes[i]
            if node.bwd is None:
                continue
            in_grads = node.bwd(g)
            for j, gj in zip(node.inputs, in_grads):
                if gj is None:
                    continue
                expect = self.nodes[j].value.shape
                if gj.shape != expect:
                    raise ShapeError(
                        f"adjoint of {node.op!r} produced {gj.shape}, input has {expect}"
                    )
                if j in grads:
                    grads[j] = grads[j] + gj
                else:
                    grads[j] = gj
        return GradMap(self, grads)


# ---------------------------------------------------------------------------
# primitive ops
# ---------------------------------------------------------------------------


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


_ADD = _known("add")


def add(a: Var, b: Var) -> Var:
    out = a.value + b.value
    sa, sb = a.value.shape, b.value.shape
    return a.tape.record(_ADD, (a, b), out, lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


_SUB = _known("sub")


def sub(a: Var, b: Var) -> Var:
    out = a.value - b.value
    sa, sb = a.value.shape, b.value.shape
    return a.tape.record(_SUB, (a, b), out, lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


_MUL = _known("mul")


def mul(a: Var, b: Var) -> Var:
    av, bv = a.value, b.value
    return a.tape.record(
        _MUL,
        (a, b),
        av * bv,
        lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)),
    )


_DIV = _known("div")


def div(a: Var, b: Var) -> Var:
    av, bv = a.value, b.value
    return a.tape.record(
        _DIV,
        (a, b),
        av / bv,
        lambda g: (
            _unbroadcast(g / bv, av.shape),
            _unbroadcast(-g * av / (bv * bv), bv.shape),
        ),
    )


_NEG = _known("neg")


def neg(a: Var) -> Var:
    return a.tape.record(_NEG, (a,), -a.value, lambda g: (-g,))


_MATMUL = _known("matmul")


def matmul(a: Var, b: Var) -> Var:
    av, bv = a.value, b.value
    out = K.matmul(av, bv)

    def bwd(g):
        ga = np.matmul(g, np.swapaxes(bv, -1, -2))
        if bv.ndim == 2 and av.ndim > 2:
            gb = np.matmul(
                av.reshape(-1, av.shape[-1]).T, g.reshape(-1, g.shape[-1])
            )
        else:
            gb = np.matmul(np.swapaxes(av, -1, -2), g)
        return ga, gb

    return a.tape.record(_MATMUL, (a, b), out, bwd)


_TRANSPOSE = _known("transpose")


def transpose(x: Var, axes: Sequence[int]) -> Var:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return x.tape.record(
        _TRANSPOSE, (x,), x.value.transpose(axes), lambda g: (g.transpose(inv),)
    )


_RESHAPE = _known("reshape")


def reshape(x: Var, shape: Sequence[int]) -> Var:
    old = x.value.shape
    return x.tape.record(
        _RESHAPE, (x,), x.value.reshape(shape), lambda g: (g.reshape(old),)
    )


_SUM = _known("sum")


def sum_(x: Var, axis=None, keepdims: bool = False) -> Var:
    xv = x.value
    out = np.sum(xv, axis=axis, keepdims=keepdims)

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g, xv.shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, xv.shape).copy(),)

    return x.tape.record(_SUM, (x,), out, bwd)


_MEAN = _known("mean")


def mean(x: Var, axis=None, keepdims: bool = False) -> Var:
    xv = x.value
    out = np.mean(xv, axis=axis, keepdims=keepdims)
    count = xv.size if axis is None else np.prod(
        [xv.shape[a] for a in (axis if isinstance(axis, tuple) else (axis,))]
    )

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g / count, xv.shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg / count, xv.shape).copy(),)

    return x.tape.record(_MEAN, (x,), out, bwd)


_SQRT = _known("sqrt")


def sqrt(x: Var) -> Var:
    y = np.sqrt(x.value)
    return x.tape.record(_SQRT, (x,), y, lambda g: (g * 0.5 / y,))


_SOFTMAX = _known("softmax")


def softmax(x: Var, axis: int = -1) -> Var:
    y = K.softmax(x.value, axis=axis)
    return x.tape.record(
        _SOFTMAX,
        (x,),
        y,
        lambda g: (y * (g - np.sum(g * y, axis=axis, keepdims=True)),),
    )


_RELU = _known("relu")


def relu(x: Var) -> Var:
    xv = x.value
    return x.tape.record(_RELU, (x,), K.relu(xv), lambda g: (g * K.relu_grad(xv),))


_GELU = _known("gelu")


def gelu(x: Var) -> Var:
    xv = x.value
    y, t = K.gelu_with_tanh(xv)
    return x.tape.record(
        _GELU, (x,), y, lambda g: (g * K.gelu_grad_from_tanh(xv, t),)
    )


_LAYER_NORM = _known("layer_norm")


def layer_norm(x: Var, gamma: Var, beta: Var, eps: float = 1e-5) -> Var:
    y, xhat, inv_std = K.layer_norm(x.value, gamma.value, beta.value, eps)
    gv = gamma.value
    lead = tuple(range(x.value.ndim - 1))

    def bwd(g):
        dbeta = g.sum(axis=lead)
        dgamma = (g * xhat).sum(axis=lead)
        dxhat = g * gv
        m1 = np.mean(dxhat, axis=-1, keepdims=True)
        m2 = np.mean(dxhat * xhat, axis=-1, keepdims=True)
        dx = inv_std * (dxhat - m1 - xhat * m2)
        return dx, dgamma, dbeta

    return x.tape.record(_LAYER_NORM, (x, gamma, beta), y, bwd)


_POOL = _known("global_avg_pool")


def global_avg_pool(x: Var) -> Var:
    xv = x.value
    out = K.global_avg_pool(xv)
    hw = xv.shape[2] * xv.shape[3]
    return x.tape.record(
        _POOL,
        (x,),
        out,
        lambda g: (np.broadcast_to(g[:, :, None, None] / hw, xv.shape).copy(),),
    )


_TAKE = _known("take_last")


def take_last(x: Var, index: int) -> Var:
    """Select one slice along the last axis."""
    xv = x.value

    def bwd(g):
        full = np.zeros_like(xv)
        full[..., index] = g
        return (full,)

    return x.tape.record(_TAKE, (x,), xv[..., index].copy(), bwd)


_FFT_RE = _known("fft2_re")
_FFT_IM = _known("fft2_im")


def fft2(x: Var, axes=(-2, -1)) -> tuple[Var, Var]:
    """Unnormalized 2-D DFT of a real field, returned as (re, im) nodes.

    The DFT matrix is symmetric, so the adjoint of each real branch is the
    matching component of the forward transform applied to the adjoint.
    """
    z = K.fft2(x.value, axes=axes)
    re = x.tape.record(
        _FFT_RE, (x,), z.real.copy(), lambda g: (np.fft.fft2(g, axes=axes).real,)
    )
    im = x.tape.record(
        _FFT_IM, (x,), z.imag.copy(), lambda g: (np.fft.fft2(g, axes=axes).imag,)
    )
    return re, im


_IFFT = _known("ifft2_real")


def ifft2_real(re: Var, im: Var, axes=(-2, -1)) -> Var:
    """Real part of the normalized inverse 2-D DFT of re + i*im."""
    z = K.ifft2(re.value + 1j * im.value, axes=axes)

    def bwd(g):
        w = np.fft.ifft2(g, axes=axes)
        return w.real.copy(), -w.imag
    return re.tape.record(_IFFT, (re, im), z.real.copy(), bwd)


def as_var(tape: Tape, x) -> Var:
    """Lift onto the tape: Vars pass through, arrays become constants."""
    return x if isinstance(x, Var) else tape.constant(x)


def affine(x: Var, w, b) -> Var:
    """x @ w + b, the everyday linear layer. w and b may be arrays."""
    t = x.tape
    return add(matmul(x, as_var(t, w)), as_var(t, b))


# ---------------------------------------------------------------------------
# finite-difference oracle and the grad-check harness
# ---------------------------------------------------------------------------


def finite_diff_grad(f: Callable[[np.ndarray], float], x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central differences (f(x+h e_i) - f(x-h e_i)) / 2h per coordinate."""
    if h <= 0:
        raise ConfigError(f"finite difference step must be > 0, got {h}")
    x = K.as_f64(x)
    out = np.zeros_like(x)
    flat = out.reshape(-1)
    base = x.reshape(-1)
    for i in range(base.size):
        xp = base.copy()
        xm = base.copy()
        xp[i] += h
        xm[i] -= h
        flat[i] = (f(xp.reshape(x.shape)) - f(xm.reshape(x.shape))) / (2 * h)
    return out


def _fd_coords(f, x, coords, h):
    base = x.reshape(-1)
    vals = np.zeros(len(coords))
    for n, i in enumerate(coords):
        xp = base.copy()
        xm = base.copy()
        xp[i] += h
        xm[i] -= h
        vals[n] = (f(xp.reshape(x.shape)) - f(xm.reshape(x.shape))) / (2 * h)
    return vals


@dataclass
class CheckCase:
    """How to exercise one op for gradient checking.

    ``build(rng)`` returns (inputs, fn) where fn maps leaf Vars to a scalar
    Var. ``max_coords`` caps the finite-difference coordinates per input
    (sampled at random) for expensive composites.
    """

    name: str
    build: Callable[[np.random.Generator], tuple[list[np.ndarray], Callable]]
    max_coords: Optional[int] = None
    default_tol: float = 1e-5


@dataclass
class CheckReport:
    op: str
    passed: bool
    max_rel_err: float
    tol: float
    detail: str = ""


GRAD_CASES: dict[str, CheckCase] = {}


def register_case(case: CheckCase) -> None:
    GRAD_CASES[case.name] = case


def grad_check(
    op: str,
    tol: Optional[float] = None,
    h: float = 1e-5,
    seeds: Sequence[int] = (0, 1, 2),
) -> CheckReport:
    """Compare the tape adjoint against finite differences.

    Never raises: failures (including exceptions inside the op) come back
    as a failed report. Relative error uses a max(|a|, |b|, 1e-8)
    denominator, maximized over inputs, coordinates, and seeds.
    """
    case = GRAD_CASES.get(op)
    if case is None:
        return CheckReport(op, False, np.inf, tol or 0.0, detail="no such registered op")
    tol = case.default_tol if tol is None else tol
    worst = 0.0
    try:
        for seed in seeds:
            rng = np.random.default_rng([seed, 999331])
            inputs, fn = case.build(rng)

            def scalar_at(arrays: list[np.ndarray]) -> float:
                tape = Tape()
                leaves = [tape.leaf(a) for a in arrays]
                return float(fn(*leaves).value)

            tape = Tape()
            leaves = [tape.leaf(a) for a in inputs]
            loss = fn(*leaves)
            gm = tape.backward(loss)

            for which, x in enumerate(inputs):
                bp = gm.grad(leaves[which]).reshape(-1)

                def f_of_x(xi, _which=which):
                    pert = [a for a in inputs]
                    pert[_which] = xi
                    return scalar_at(pert)

                if case.max_coords is not None and x.size > case.max_coords:
                    coords = rng.choice(x.size, size=case.max_coords, replace=False)
                else:
                    coords = np.arange(x.size)
                fd = _fd_coords(f_of_x, x, coords, h)
                bp_sel = bp[coords]
                denom = np.maximum(np.maximum(np.abs(fd), np.abs(bp_sel)), 1e-8)
                rel = np.abs(fd - bp_sel) / denom
                worst = max(worst, float(rel.max()) if rel.size else 0.0)
    except Exception as exc:  # noqa: BLE001 - report instead of raising
        return CheckReport(op, False, np.inf, tol, detail=f"{type(exc).__name__}: {exc}")
    return CheckReport(op, worst < tol, worst, tol)


def grad_check_all(h: float = 1e-5, seeds: Sequence[int] = (0, 1, 2)) -> list[CheckReport]:
    return [grad_check(name, h=h, seeds=seeds) for name in sorted(GRAD_CASES)]


# ---------------------------------------------------------------------------
# default cases for the primitive ops
# ---------------------------------------------------------------------------


def _probe_sum(probe_seed: int, out: Var) -> Var:
    """Weighted sum with a frozen random probe, so gradients are well spread
    and the objective is identical on every re-evaluation."""
    probe = np.random.default_rng(probe_seed).normal(size=out.shape)
    return sum_(mul(out, out.tape.constant(probe)))


def _simple(name, make_inputs, apply_op):
    def build(rng):
        inputs = make_inputs(rng)
        pseed = int(rng.integers(2**31))

        def fn(*leaves):
            return _probe_sum(pseed, apply_op(*leaves))

        return inputs, fn

    register_case(CheckCase(name, build))


_simple("add", lambda r: [r.normal(size=(3, 4)), r.normal(size=(4,))], add)
_simple("sub", lambda r: [r.normal(size=(3, 4)), r.normal(size=(3, 4))], sub)
_simple("mul", lambda r: [r.normal(size=(3, 4)), r.normal(size=(4,))], mul)
_simple(
    "div",
    lambda r: [r.normal(size=(3, 4)), np.abs(r.normal(size=(4,))) + 0.5],
    div,
)
_simple("neg", lambda r: [r.normal(size=(3, 4))], neg)
_simple("matmul", lambda r: [r.normal(size=(4, 3)), r.normal(size=(3, 2))], matmul)
_simple(
    "matmul_batched",
    lambda r: [r.normal(size=(2, 3, 4)), r.normal(size=(2, 4, 2))],
    matmul,
)
_simple(
    "matmul_shared",
    lambda r: [r.normal(size=(2, 3, 4)), r.normal(size=(4, 2))],
    matmul,
)
_simple(
    "transpose",
    lambda r: [r.normal(size=(2, 3, 4))],
    lambda x: transpose(x, (2, 0, 1)),
)
_simple("reshape", lambda r: [r.normal(size=(2, 6))], lambda x: reshape(x, (3, 4)))
_simple("sum", lambda r: [r.normal(size=(3, 4))], lambda x: sum_(x, axis=1))
_simple("mean", lambda r: [r.normal(size=(2, 3, 4))], lambda x: mean(x, axis=(1, 2)))
_simple("sqrt", lambda r: [np.abs(r.normal(size=(3, 4))) + 0.5], sqrt)
_simple("softmax", lambda r: [r.normal(size=(3, 5))], lambda x: softmax(x, axis=-1))
_simple("relu", lambda r: [r.normal(size=(3, 4))], relu)
_simple("gelu", lambda r: [r.normal(size=(3, 4))], gelu)
_simple(
    "layer_norm",
    lambda r: [r.normal(size=(4, 6)), r.normal(size=(6,)), r.normal(size=(6,))],
    lambda x, g, b: layer_norm(x, g, b, eps=1e-5),
)
_simple(
    "global_avg_pool",
    lambda r: [r.normal(size=(2, 3, 4, 4))],
    global_avg_pool,
)
_simple("take_last", lambda r: [r.normal(size=(3, 5))], lambda x: take_last(x, 2))


def _build_fft(rng):
    inputs = [rng.normal(size=(2, 4, 4))]
    pr = rng.normal(size=(2, 4, 4))
    pi = rng.normal(size=(2, 4, 4))

    def fn(x):
        re, im = fft2(x)
        pr_c = x.tape.constant(pr)
        pi_c = x.tape.constant(pi)
        return add(sum_(mul(re, pr_c)), sum_(mul(im, pi_c)))

    return inputs, fn


register_case(CheckCase("fft2", _build_fft))


def _build_ifft(rng):
    inputs = [rng.normal(size=(4, 4)), rng.normal(size=(4, 4))]
    probe = rng.normal(size=(4, 4))

    def fn(re, im):
        y = ifft2_real(re, im)
        return sum_(mul(y, re.tape.constant(probe)))

    return inputs, fn


register_case(CheckCase("ifft2_real", _build_ifft))


def _build_fft_power(rng):
    # fft2 -> |.|^2 -> sum pipeline; exercises both branches jointly.
    inputs = [rng.normal(size=(4, 4))]

    def fn(x):
        re, im = fft2(x)
        return add(sum_(mul(re, re)), sum_(mul(im, im)))

    return inputs, fn


register_case(CheckCase("fft2_power_sum", _build_fft_power))
