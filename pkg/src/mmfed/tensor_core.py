"""Float64 tensors with reverse-mode autodiff for a small set of layer primitives.

Every primitive stores what its backward rule needs in a closure on the output
node. ``backward`` walks the graph once in reverse topological order and then
releases the closures, so a graph can be differentiated exactly once.
"""

from __future__ import annotations

import contextlib
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError, DataError, ShapeError, UsageError

DTYPE = np.float64


class Tensor:
    """A float64 array plus the bookkeeping needed to differentiate through it."""

    __slots__ = ("data", "requires_grad", "_parents", "_backward", "_consumed", "name")

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data, dtype=DTYPE, order="C")
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self._consumed = False
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data: np.ndarray, parents: Sequence[Tensor], backward_fn) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.name = None
    out._consumed = False
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


# ---------------------------------------------------------------------------
# Recording of activation patterns (used to skip finite-difference probes that
# cross a ReLU kink or a max-pool argmax switch).

_pattern_log: list[list[np.ndarray]] = []


@contextlib.contextmanager
def record_patterns():
    log: list[np.ndarray] = []
    _pattern_log.append(log)
    try:
        yield log
    finally:
        _pattern_log.pop()


def _log_pattern(arr: np.ndarray):
    if _pattern_log:
        _pattern_log[-1].append(arr.copy())


# ---------------------------------------------------------------------------
# Elementwise helpers (enough to express small test losses such as theta**2).

def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and grad.shape[i] != 1:
            grad = grad.sum(axis=i, keepdims=True)
    return grad


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _node(out, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _node(out, (a, b), bw)


def sum_all(x: Tensor) -> Tensor:
    x = as_tensor(x)

    def bw(g):
        return (np.broadcast_to(g, x.shape).copy(),)

    return _node(np.asarray(x.data.sum(), dtype=DTYPE), (x,), bw)


def mean_all(x: Tensor) -> Tensor:
    return mul(sum_all(x), 1.0 / x.size)


# ---------------------------------------------------------------------------
# Layer primitives.

def conv2d(x: Tensor, weight: Tensor, bias: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Direct 2-D cross-correlation with zero padding, NCHW layout."""
    if not isinstance(stride, (int, np.integer)) or stride < 1:
        raise ConfigError(f"conv2d stride must be a positive integer, got {stride!r}")
    if not isinstance(padding, (int, np.integer)) or padding < 0:
        raise ConfigError(f"conv2d padding must be a non-negative integer, got {padding!r}")
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    if x.data.ndim != 4 or weight.data.ndim != 4:
        raise ShapeError(f"conv2d expects 4-d input and weight, got input {x.shape} and weight {weight.shape}")
    n, c, h, w = x.shape
    f, cw, kh, kw = weight.shape
    if c != cw:
        raise ShapeError(f"conv2d channel mismatch: input {x.shape} vs weight {weight.shape}")
    if bias.shape != (f,):
        raise ShapeError(f"conv2d bias {bias.shape} does not match weight {weight.shape}")
    if h + 2 * padding < kh or w + 2 * padding < kw:
        raise ShapeError(f"conv2d kernel larger than padded input: input {x.shape} vs weight {weight.shape}")

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    hs = stride * (ho - 1) + 1
    ws = stride * (wo - 1) + 1
    # cols[n, (c, a, b), (i, j)] = xp[n, c, i*stride + a, j*stride + b]
    cols = np.empty((n, c, kh, kw, ho, wo))
    for a in range(kh):
        for b in range(kw):
            cols[:, :, a, b] = xp[:, :, a:a + hs:stride, b:b + ws:stride]
    cols = cols.reshape(n, c * kh * kw, ho * wo)
    wmat = weight.data.reshape(f, c * kh * kw)
    out = (wmat @ cols).reshape(n, f, ho, wo) + bias.data[None, :, None, None]

    def bw(g):
        g3 = g.reshape(n, f, ho * wo)
        gw = np.einsum("nfp,nqp->fq", g3, cols, optimize=True).reshape(weight.shape) if weight.requires_grad else None
        gb = g.sum(axis=(0, 2, 3)) if bias.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (wmat.T @ g3).reshape(n, c, kh, kw, ho, wo)
            gxp = np.zeros_like(xp)
            for a in range(kh):
                for b in range(kw):
                    gxp[:, :, a:a + hs:stride, b:b + ws:stride] += gcols[:, :, a, b]
            gx = gxp[:, :, padding:padding + h, padding:padding + w] if padding else gxp
        return gx, gw, gb

    return _node(out, (x, weight, bias), bw)


def relu(x: Tensor) -> Tensor:
    x = as_tensor(x)
    on = x.data > 0
    _log_pattern(on)
    out = np.where(on, x.data, 0.0)

    def bw(g):
        return (g * on,)

    return _node(out, (x,), bw)


def maxpool2d(x: Tensor, k: int, stride: int | None = None) -> Tensor:
    """k x k max pooling; gradient goes to the first maximal element of each window."""
    stride = k if stride is None else stride
    if k < 1 or stride < 1:
        raise ConfigError(f"maxpool2d needs positive window and stride, got k={k}, stride={stride}")
    x = as_tensor(x)
    if x.data.ndim != 4:
        raise ShapeError(f"maxpool2d expects a 4-d input, got {x.shape}")
    n, c, h, w = x.shape
    if h < k or w < k:
        raise ShapeError(f"maxpool2d window {k}x{k} larger than input {x.shape}")
    ho = (h - k) // stride + 1
    wo = (w - k) // stride + 1
    win = sliding_window_view(x.data, (k, k), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    flat = win.reshape(n, c, ho, wo, k * k)
    arg = flat.argmax(axis=-1)  # first occurrence == lowest flat index
    _log_pattern(arg)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def bw(g):
        gx = np.zeros_like(x.data)
        for o in range(k * k):
            a, b = divmod(o, k)
            hit = arg == o
            if hit.any():
                gx[:, :, a:a + stride * (ho - 1) + 1:stride, b:b + stride * (wo - 1) + 1:stride] += g * hit
        return (gx,)

    return _node(np.ascontiguousarray(out), (x,), bw)


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    if x.data.ndim != 2 or weight.data.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise ShapeError(f"linear dimension mismatch: input {x.shape} vs weight {weight.shape}")
    if bias.shape != (weight.shape[1],):
        raise ShapeError(f"linear bias {bias.shape} does not match weight {weight.shape}")
    out = x.data @ weight.data + bias.data

    def bw(g):
        gx = g @ weight.data.T if x.requires_grad else None
        gw = x.data.T @ g if weight.requires_grad else None
        gb = g.sum(axis=0) if bias.requires_grad else None
        return gx, gw, gb

    return _node(out, (x, weight, bias), bw)


def flatten_concat(parts: Sequence[Tensor]) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    if not parts:
        raise ShapeError("flatten_concat needs at least one part")
    n = parts[0].shape[0]
    for p in parts:
        if p.data.ndim == 0 or p.shape[0] != n:
            raise ShapeError(f"flatten_concat batch mismatch: {parts[0].shape} vs {p.shape}")
    flats = [p.data.reshape(n, -1) for p in parts]
    offsets = np.cumsum([0] + [f.shape[1] for f in flats])
    out = np.concatenate(flats, axis=1)

    def bw(g):
        return tuple(g[:, offsets[i]:offsets[i + 1]].reshape(p.shape) for i, p in enumerate(parts))

    return _node(out, parts, bw)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean cross-entropy of integer labels under softmax(logits)."""
    logits = as_tensor(logits)
    labels = np.asarray(labels)
    if logits.data.ndim != 2:
        raise ShapeError(f"softmax_cross_entropy expects [N, K] logits, got {logits.shape}")
    n, k = logits.shape
    if labels.shape != (n,):
        raise ShapeError(f"labels shape {labels.shape} does not match logits {logits.shape}")
    bad = np.flatnonzero((labels < 0) | (labels >= k))
    if bad.size:
        raise DataError(f"label {labels[bad[0]]} in row {bad[0]} outside [0, {k})")
    labels = labels.astype(np.int64)
    logp = log_softmax(logits.data)
    rows = np.arange(n)
    loss = -logp[rows, labels].sum() / n

    def bw(g):
        grad = np.exp(logp)
        grad[rows, labels] -= 1.0
        return (grad * (g / n),)

    return _node(np.asarray(loss, dtype=DTYPE), (logits,), bw)


# ---------------------------------------------------------------------------
# Parameter containers and differentiation.

class ParamSet:
    """Ordered, named collection of float64 arrays with elementwise arithmetic."""

    def __init__(self, entries: Iterable[tuple[str, np.ndarray]] | Mapping[str, np.ndarray] = ()):
        if isinstance(entries, Mapping):
            entries = entries.items()
        self._d: OrderedDict[str, np.ndarray] = OrderedDict()
        for name, arr in entries:
            if name in self._d:
                raise ShapeError(f"duplicate parameter name {name!r}")
            if isinstance(arr, Tensor):
                arr = arr.data
            self._d[name] = np.array(arr, dtype=DTYPE, copy=True)

    def names(self) -> list[str]:
        return list(self._d)

    def items(self):
        return self._d.items()

    def values(self):
        return self._d.values()

    def shapes(self) -> list[tuple[str, tuple[int, ...]]]:
        return [(k, v.shape) for k, v in self._d.items()]

    def __getitem__(self, name: str) -> np.ndarray:
        return self._d[name]

    def __contains__(self, name):
        return name in self._d

    def __len__(self):
        return len(self._d)

    def __iter__(self):
        return iter(self._d)

    def __repr__(self):
        return f"ParamSet({len(self)} tensors, {self.size()} scalars)"

    def size(self) -> int:
        return int(sum(v.size for v in self._d.values()))

    def compatible(self, other: "ParamSet") -> bool:
        return self.shapes() == other.shapes()

    def _check(self, other: "ParamSet"):
        if not self.compatible(other):
            raise ShapeError(f"incompatible ParamSets: {self.shapes()} vs {other.shapes()}")

    def __add__(self, other: "ParamSet") -> "ParamSet":
        self._check(other)
        return ParamSet((k, v + other[k]) for k, v in self._d.items())

    def __sub__(self, other: "ParamSet") -> "ParamSet":
        self._check(other)
        return ParamSet((k, v - other[k]) for k, v in self._d.items())

    def scale(self, c: float) -> "ParamSet":
        return ParamSet((k, v * c) for k, v in self._d.items())

    def zeros_like(self) -> "ParamSet":
        return ParamSet((k, np.zeros_like(v)) for k, v in self._d.items())

    def copy(self) -> "ParamSet":
        return ParamSet(self._d.items())

    def leaves(self) -> "OrderedDict[str, Tensor]":
        """Fresh differentiable leaf tensors sharing this set's names and values."""
        return OrderedDict((k, Tensor(v.copy(), requires_grad=True, name=k)) for k, v in self._d.items())

    def constants(self) -> "OrderedDict[str, Tensor]":
        return OrderedDict((k, Tensor(v, name=k)) for k, v in self._d.items())

    def bit_equal(self, other: "ParamSet") -> bool:
        return self.compatible(other) and all(
            np.array_equal(v.view(np.uint64), other[k].view(np.uint64)) for k, v in self._d.items()
        )

    def max_abs_diff(self, other: "ParamSet") -> float:
        self._check(other)
        return max((float(np.max(np.abs(v - other[k]))) for k, v in self._d.items() if v.size), default=0.0)

    def all_finite(self) -> bool:
        return all(np.isfinite(v).all() for v in self._d.values())


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    return order


def backward(loss: Tensor, wrt: Mapping[str, Tensor]) -> ParamSet:
    """Gradients of a scalar ``loss`` with respect to the leaves in ``wrt``.

    Leaves that do not influence the loss get exact zeros. The graph's saved
    activations are released afterwards; differentiating it again raises
    UsageError.
    """
    if loss._consumed:
        raise UsageError("backward already called on this graph")
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {}
    if loss.requires_grad:
        order = _topo_order(loss)
        grads[id(loss)] = np.ones_like(loss.data)
        for node in reversed(order):
            g = grads.get(id(node))
            if node._backward is None:
                if node._parents:
                    raise UsageError("graph was already consumed by an earlier backward call")
                continue
            if g is None:
                continue
            parent_grads = node._backward(g)
            for p, pg in zip(node._parents, parent_grads):
                if pg is None or not p.requires_grad:
                    continue
                if id(p) in grads:
                    grads[id(p)] = grads[id(p)] + pg
                else:
                    grads[id(p)] = pg
            if node is not loss:
                del grads[id(node)]
        for node in order:
            if node._parents:
                node._backward = None
                node._consumed = True
    loss._consumed = True
    loss._backward = None
    return ParamSet(
        (name, grads[id(t)] if id(t) in grads else np.zeros_like(t.data)) for name, t in wrt.items()
    )


def value_and_grad(fn: Callable[[Mapping[str, Tensor]], Tensor], params: ParamSet) -> tuple[float, ParamSet]:
    leaves = params.leaves()
    loss = fn(leaves)
    value = float(loss.data)
    return value, backward(loss, leaves)


def sgd_step(params: ParamSet, grads: ParamSet, lr: float) -> ParamSet:
    """params - lr * grads as a new ParamSet."""
    if not params.compatible(grads):
        raise ShapeError(f"sgd_step: params {params.shapes()} vs grads {grads.shapes()}")
    if lr == 0:
        return params.copy()
    return ParamSet((k, v - lr * grads[k]) for k, v in params.items())


# ---------------------------------------------------------------------------
# Finite-difference gradient checking.

@dataclass
class GradCheckReport:
    tol: float
    h: float
    max_rel_error: dict[str, float] = field(default_factory=dict)
    checked: dict[str, int] = field(default_factory=dict)
    excluded: dict[str, int] = field(default_factory=dict)

    @property
    def worst(self) -> float:
        return max(self.max_rel_error.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return all(e <= self.tol for e in self.max_rel_error.values())

    @property
    def failures(self) -> dict[str, float]:
        return {k: e for k, e in self.max_rel_error.items() if e > self.tol}

    def summary(self) -> str:
        lines = [f"grad_check h={self.h:g} tol={self.tol:g} worst={self.worst:.3e} {'PASS' if self.passed else 'FAIL'}"]
        for k, e in self.max_rel_error.items():
            lines.append(f"  {k}: {e:.3e} ({self.checked[k]} checked, {self.excluded[k]} excluded)")
        return "\n".join(lines)


def relative_error(analytic, numeric, floor: float = 1e-4):
    """|a - n| / max(|a|, |n|, floor); the floor keeps near-zero gradients from
    turning rounding noise into huge relative errors."""
    analytic = np.asarray(analytic)
    numeric = np.asarray(numeric)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def grad_check(
    fn: Callable[[Mapping[str, Tensor]], Tensor],
    params: ParamSet,
    h: float = 1e-5,
    tol: float = 1e-5,
    *,
    exclude_kinks: bool = False,
    max_per_param: int | None = None,
    floor: float = 1e-4,
    seed: int = 0,
) -> GradCheckReport:
    """Compare backward() against central differences (f(p+h) - f(p-h)) / 2h.

    With ``exclude_kinks`` the activation pattern (ReLU signs, pool argmaxes)
    is recorded during both probes; a coordinate whose +h and -h probes see
    different patterns straddles a non-differentiable point and is skipped.
    ``max_per_param`` samples that many coordinates per tensor instead of all.
    """
    _, analytic = value_and_grad(fn, params)
    report = GradCheckReport(tol=tol, h=h)
    rng = np.random.default_rng(seed)
    work = params.copy()
    inputs = work.constants()  # shares memory with ``work``; probes edit it in place

    def probe():
        with record_patterns() as log:
            value = float(fn(inputs).data)
        return value, log

    def same_pattern(a, b):
        return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))

    for name in params.names():
        flat = work[name].reshape(-1)
        idx = np.arange(flat.size)
        if max_per_param is not None and flat.size > max_per_param:
            idx = np.sort(rng.choice(flat.size, size=max_per_param, replace=False))
        worst = 0.0
        n_excl = 0
        for i in idx:
            orig = flat[i]
            flat[i] = orig + h
            f_plus, pat_plus = probe()
            flat[i] = orig - h
            f_minus, pat_minus = probe()
            flat[i] = orig
            if exclude_kinks and not same_pattern(pat_plus, pat_minus):
                n_excl += 1
                continue
            numeric = (f_plus - f_minus) / (2 * h)
            err = float(relative_error(analytic[name].reshape(-1)[i], numeric, floor))
            worst = max(worst, err)
        report.max_rel_error[name] = worst
        report.checked[name] = int(len(idx) - n_excl)
        report.excluded[name] = n_excl
    return report
