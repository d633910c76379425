"""Tape-based reverse-mode differentiation over numpy arrays.

Every primitive is a ``forward(attrs, *arrays) -> (out, ctx)`` /
``backward(attrs, ctx, grad) -> input grads`` pair registered by kind.
Applying a primitive while a :class:`Tape` is active records it; calling
:func:`backward` walks the tape in reverse and accumulates gradients into a
table keyed by the leaf tensors that were reached.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Any, Callable, Sequence

import numpy as np


class NonFiniteError(FloatingPointError):
    """A forward value or gradient contained NaN or Inf."""


class ShapeError(ValueError):
    pass


class TapeError(RuntimeError):
    pass


_local = threading.local()


def active_tape() -> "Tape | None":
    return getattr(_local, "tape", None)


class Tensor:
    # set on loss outputs whose contributing element set was empty
    empty = False

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        if any(d <= 0 for d in arr.shape):
            raise ShapeError(f"tensor extents must be positive, got {arr.shape}")
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name
        self._tape: Tape | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __mul__(self, other: "Tensor") -> "Tensor":
        return mul(self, other)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)


def constant(data, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=False, dtype=dtype)


@dataclass
class Entry:
    kind: str
    inputs: tuple[Tensor, ...]
    attrs: dict[str, Any]
    output: Tensor
    ctx: Any


@dataclass
class Tape:
    """Ordered record of primitive applications for one step.

    Use as a context manager; primitives applied inside the block are
    recorded.  A tape is consumed by :func:`backward` and re-armed by
    :meth:`replay`.
    """

    entries: list[Entry] = field(default_factory=list)
    consumed: bool = False
    _previous: "Tape | None" = field(default=None, repr=False)

    def __enter__(self) -> "Tape":
        self._previous = active_tape()
        _local.tape = self
        return self

    def __exit__(self, *exc) -> None:
        _local.tape = self._previous
        self._previous = None

    def record(self, kind: str, inputs: tuple[Tensor, ...], attrs: dict, output: Tensor, ctx) -> None:
        if self.consumed:
            raise TapeError("cannot record onto a consumed tape")
        output._tape = self
        self.entries.append(Entry(kind, inputs, attrs, output, ctx))

    def replay(self) -> list[np.ndarray]:
        """Re-run every recorded forward from the current leaf values.

        Outputs are refreshed in place so that :func:`backward` can be
        called again; returns the list of recomputed output arrays.
        """
        outs = []
        for entry in self.entries:
            prim = PRIMITIVES[entry.kind]
            out, ctx = prim.forward(entry.attrs, *[t.data for t in entry.inputs])
            _check_finite(entry.kind, out)
            entry.output.data = out
            entry.ctx = ctx
            outs.append(out)
        self.consumed = False
        return outs


@dataclass(frozen=True)
class Primitive:
    kind: str
    forward: Callable[..., tuple[np.ndarray, Any]]
    backward: Callable[..., tuple[np.ndarray | None, ...]]


PRIMITIVES: dict[str, Primitive] = {}


def _register(kind: str, forward, backward) -> None:
    PRIMITIVES[kind] = Primitive(kind, forward, backward)


def _check_finite(kind: str, out: np.ndarray) -> None:
    if not np.all(np.isfinite(out)):
        raise NonFiniteError(f"primitive {kind!r} produced non-finite values")


def apply_primitive(kind: str, inputs: Sequence[Tensor], **attrs) -> Tensor:
    """Evaluate ``kind`` on ``inputs`` and record it on the active tape."""
    try:
        prim = PRIMITIVES[kind]
    except KeyError:
        raise ValueError(f"unknown primitive {kind!r}") from None
    inputs = tuple(inputs)
    with np.errstate(over="ignore", invalid="ignore"):
        out, ctx = prim.forward(attrs, *[t.data for t in inputs])
    _check_finite(kind, out)
    tracked = kind != "stop_gradient" and any(t.requires_grad for t in inputs)
    result = Tensor(out, requires_grad=tracked)
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        tape.record(kind, inputs, attrs, result, ctx)
    return result


# ---------------------------------------------------------------------------
# elementwise


def _same_shape(kind, a, b):
    if a.shape != b.shape:
        raise ShapeError(f"{kind}: shapes {a.shape} and {b.shape} differ")


def _add_fwd(attrs, a, b):
    _same_shape("add", a, b)
    return a + b, None


_register("add", _add_fwd, lambda attrs, ctx, g: (g, g))


def _mul_fwd(attrs, a, b):
    _same_shape("mul", a, b)
    return a * b, (a, b)


_register("mul", _mul_fwd, lambda attrs, ctx, g: (g * ctx[1], g * ctx[0]))


def _relu_fwd(attrs, x):
    return np.maximum(x, 0), x > 0


_register("relu", _relu_fwd, lambda attrs, ctx, g: (g * ctx,))


def _leaky_fwd(attrs, x):
    alpha = attrs["alpha"]
    if not alpha > 0:
        raise ValueError("leaky_relu requires alpha > 0")
    mask = x > 0
    return np.where(mask, x, alpha * x).astype(x.dtype), mask


def _leaky_bwd(attrs, ctx, g):
    return (np.where(ctx, g, attrs["alpha"] * g).astype(g.dtype),)


_register("leaky_relu", _leaky_fwd, _leaky_bwd)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return np.exp(-np.logaddexp(0, -x)).astype(x.dtype)


def _sigmoid_fwd(attrs, x):
    s = _sigmoid(x)
    return s, s


_register("sigmoid", _sigmoid_fwd, lambda attrs, ctx, g: (g * ctx * (1 - ctx),))


def _stop_fwd(attrs, x):
    return x.copy(), None


# the input edge never carries gradient
_register("stop_gradient", _stop_fwd, lambda attrs, ctx, g: (None,))


def _sum_fwd(attrs, x):
    return np.asarray(x.sum(), dtype=x.dtype), x.shape


_register("sum", _sum_fwd, lambda attrs, ctx, g: (np.full(ctx, g, dtype=g.dtype),))


# ---------------------------------------------------------------------------
# shape manipulation


def _reshape_fwd(attrs, x):
    return x.reshape(attrs["shape"]), x.shape


_register("reshape", _reshape_fwd, lambda attrs, ctx, g: (g.reshape(ctx),))
_register("flatten", lambda attrs, x: (x.reshape(x.shape[0], -1), x.shape), lambda attrs, ctx, g: (g.reshape(ctx),))


def _cast_fwd(attrs, x):
    return x.astype(attrs["dtype"]), x.dtype


_register("cast", _cast_fwd, lambda attrs, ctx, g: (g.astype(ctx),))


def _transpose_fwd(attrs, x):
    axes = attrs.get("axes") or tuple(reversed(range(x.ndim)))
    return np.ascontiguousarray(np.transpose(x, axes)), axes


_register("transpose", _transpose_fwd, lambda attrs, ctx, g: (np.transpose(g, np.argsort(ctx)),))


def _slice_fwd(attrs, x):
    axis, start, stop = attrs["axis"], attrs["start"], attrs["stop"]
    if not 0 <= start < stop <= x.shape[axis]:
        raise ShapeError(f"slice [{start}:{stop}] out of range for extent {x.shape[axis]}")
    index = [slice(None)] * x.ndim
    index[axis] = slice(start, stop)
    return np.ascontiguousarray(x[tuple(index)]), (x.shape, tuple(index))


def _slice_bwd(attrs, ctx, g):
    shape, index = ctx
    full = np.zeros(shape, dtype=g.dtype)
    full[index] = g
    return (full,)


_register("slice", _slice_fwd, _slice_bwd)


def _concat_fwd(attrs, *xs):
    axis = attrs["axis"]
    ref = xs[0]
    for x in xs[1:]:
        if x.ndim != ref.ndim or any(
            a != b for i, (a, b) in enumerate(zip(x.shape, ref.shape)) if i != axis % ref.ndim
        ):
            raise ShapeError(f"concat: incompatible shapes {ref.shape} and {x.shape} on axis {axis}")
    sizes = [x.shape[axis] for x in xs]
    return np.concatenate(xs, axis=axis), sizes


def _concat_bwd(attrs, sizes, g):
    cuts = np.cumsum(sizes)[:-1]
    return tuple(np.split(g, cuts, axis=attrs["axis"]))


_register("concat", _concat_fwd, _concat_bwd)


def _tile_fwd(attrs, x):
    axis, count = attrs["axis"], attrs["count"]
    if count < 1:
        raise ValueError("tile count must be >= 1")
    return np.concatenate([x] * count, axis=axis), None


def _tile_bwd(attrs, ctx, g):
    parts = np.split(g, attrs["count"], axis=attrs["axis"])
    total = parts[0].copy()
    for p in parts[1:]:
        total += p
    return (total,)


_register("tile", _tile_fwd, _tile_bwd)


# ---------------------------------------------------------------------------
# linear algebra


def _matmul_fwd(attrs, a, b):
    if a.ndim not in (2, 3) or b.ndim not in (2, 3):
        raise ShapeError("matmul supports 2-d and 3-d operands")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dims {a.shape} @ {b.shape}")
    if a.ndim == 3 and b.ndim == 3 and a.shape[0] != b.shape[0]:
        raise ShapeError(f"matmul: batch dims {a.shape[0]} != {b.shape[0]}")
    return a @ b, (a, b)


def _matmul_bwd(attrs, ctx, g):
    a, b = ctx
    ga = g @ np.swapaxes(b, -1, -2)
    if ga.ndim > a.ndim:
        ga = ga.sum(axis=0)
    gb = np.swapaxes(a, -1, -2) @ g
    if gb.ndim > b.ndim:
        gb = gb.sum(axis=0)
    return ga, gb


_register("matmul", _matmul_fwd, _matmul_bwd)


def _linear_fwd(attrs, x, w, b):
    if x.ndim != 2 or w.ndim != 2 or b.ndim != 1 or x.shape[1] != w.shape[1] or w.shape[0] != b.shape[0]:
        raise ShapeError(f"linear: x{x.shape} w{w.shape} b{b.shape}")
    return x @ w.T + b, (x, w)


def _linear_bwd(attrs, ctx, g):
    x, w = ctx
    return g @ w, g.T @ x, g.sum(axis=0)


_register("linear", _linear_fwd, _linear_bwd)


def _im2col(x: np.ndarray, k: int, stride: int, pad: int) -> tuple[np.ndarray, int, int]:
    """Patches as a (C*k*k, N*Ho*Wo) matrix so each conv pass is a single GEMM."""
    n, c, h, w = x.shape
    ho = (h + 2 * pad - k) // stride + 1
    wo = (w + 2 * pad - k) // stride + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: input {x.shape} too small for kernel {k}")
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    xp = xp.transpose(1, 0, 2, 3)
    cols = np.empty((c, k, k, n, ho, wo), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, i, j] = xp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride]
    return cols.reshape(c * k * k, n * ho * wo), ho, wo


def _conv_fwd(attrs, x, w, b):
    stride, pad = attrs.get("stride", 1), attrs.get("pad", 0)
    if x.ndim != 4 or w.ndim != 4 or w.shape[1] != x.shape[1] or w.shape[2] != w.shape[3] or b.shape != (w.shape[0],):
        raise ShapeError(f"conv2d: x{x.shape} w{w.shape} b{b.shape}")
    k = w.shape[2]
    cols, ho, wo = _im2col(x, k, stride, pad)
    w2 = w.reshape(w.shape[0], -1)
    out = (w2 @ cols + b[:, None]).reshape(w.shape[0], x.shape[0], ho, wo)
    return np.ascontiguousarray(out.transpose(1, 0, 2, 3)), (x.shape, cols, w2, w.shape)


def _conv_bwd(attrs, ctx, g):
    stride, pad = attrs.get("stride", 1), attrs.get("pad", 0)
    xshape, cols, w2, wshape = ctx
    n, c, h, w = xshape
    k = wshape[2]
    ho, wo = g.shape[2], g.shape[3]
    g2 = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(wshape[0], -1)
    gw = (g2 @ cols.T).reshape(wshape)
    gb = g2.sum(axis=1)
    gcols = (w2.T @ g2).reshape(c, k, k, n, ho, wo)
    gxp = np.zeros((c, n, h + 2 * pad, w + 2 * pad), dtype=g.dtype)
    for i in range(k):
        for j in range(k):
            gxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += gcols[:, i, j]
    gx = gxp[:, :, pad : pad + h, pad : pad + w] if pad else gxp
    return np.ascontiguousarray(gx.transpose(1, 0, 2, 3)), gw, gb


_register("conv2d", _conv_fwd, _conv_bwd)


def bilinear_matrix(start: float, end: float, out_size: int, length: int, dtype=np.float64) -> np.ndarray:
    """Row-stochastic (out_size, length) matrix sampling [start, end) at bin centres.

    Coordinates are continuous with pixel ``j`` covering ``[j, j + 1)``;
    sample positions outside the valid range are clamped to the border.
    """
    pos = start + (np.arange(out_size) + 0.5) * ((end - start) / out_size) - 0.5
    pos = np.clip(pos, 0.0, length - 1)
    mat = np.zeros((out_size, length), dtype=dtype)
    rows = np.arange(out_size)
    if length == 1:
        mat[:, 0] = 1.0
        return mat
    lo = np.minimum(np.floor(pos).astype(np.int64), length - 2)
    frac = pos - lo
    mat[rows, lo] += 1.0 - frac
    mat[rows, lo + 1] += frac
    return mat


def _crop_fwd(attrs, feats):
    boxes, index, size = attrs["boxes"], attrs["index"], attrs["size"]
    if feats.ndim != 4:
        raise ShapeError("bilinear_crop expects (N, C, H, W) features")
    _, _, h, w = feats.shape
    r = len(boxes)
    wy = np.empty((r, size, h), dtype=feats.dtype)
    wx = np.empty((r, size, w), dtype=feats.dtype)
    for i, (x0, y0, x1, y1) in enumerate(boxes):
        wy[i] = bilinear_matrix(y0, y1, size, h)
        wx[i] = bilinear_matrix(x0, x1, size, w)
    sel = feats[np.asarray(index)]
    out = (wy[:, None] @ sel) @ np.swapaxes(wx, 1, 2)[:, None]
    return out, (feats.shape, wy, wx)


def _crop_bwd(attrs, ctx, g):
    shape, wy, wx = ctx
    gsel = (np.swapaxes(wy, 1, 2)[:, None] @ g) @ wx[:, None]
    gfeats = np.zeros(shape, dtype=g.dtype)
    index = np.asarray(attrs["index"])
    for i in np.unique(index):
        gfeats[i] = gsel[index == i].sum(axis=0)
    return (gfeats,)


_register("bilinear_crop", _crop_fwd, _crop_bwd)


# ---------------------------------------------------------------------------
# losses; targets and element weights are non-differentiable attributes


def _normaliser(weight: np.ndarray) -> float:
    return float(weight.sum())


def _bce_fwd(attrs, x):
    t, w = attrs["target"], attrs["weight"]
    if t.shape != x.shape or w.shape != x.shape:
        raise ShapeError(f"bce: prediction {x.shape}, target {t.shape}, weight {w.shape}")
    denom = _normaliser(w)
    if denom == 0:
        return np.zeros((), dtype=x.dtype), (x, 0.0)
    per = np.maximum(x, 0) - x * t + np.log1p(np.exp(-np.abs(x)))
    return np.asarray((per * w).sum() / denom, dtype=x.dtype), (x, denom)


def _bce_bwd(attrs, ctx, g):
    x, denom = ctx
    if denom == 0:
        return (np.zeros_like(x),)
    return ((g * attrs["weight"] * (_sigmoid(x) - attrs["target"]) / denom).astype(x.dtype),)


_register("bce_with_logits", _bce_fwd, _bce_bwd)


def _softmax_fwd(attrs, x):
    labels, w = attrs["target"], attrs["weight"]
    if x.ndim != 2 or labels.shape != (x.shape[0],) or w.shape != (x.shape[0],):
        raise ShapeError(f"softmax_ce: logits {x.shape}, labels {labels.shape}")
    denom = _normaliser(w)
    shifted = x - x.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - logz
    if denom == 0:
        return np.zeros((), dtype=x.dtype), (logp, 0.0)
    nll = -logp[np.arange(x.shape[0]), labels]
    return np.asarray((nll * w).sum() / denom, dtype=x.dtype), (logp, denom)


def _softmax_bwd(attrs, ctx, g):
    logp, denom = ctx
    if denom == 0:
        return (np.zeros_like(logp),)
    grad = np.exp(logp)
    grad[np.arange(len(grad)), attrs["target"]] -= 1
    return ((g * grad * attrs["weight"][:, None] / denom).astype(logp.dtype),)


_register("softmax_ce", _softmax_fwd, _softmax_bwd)


def _smooth_l1_fwd(attrs, x):
    t, w, beta = attrs["target"], attrs["weight"], attrs.get("beta", 1.0)
    if t.shape != x.shape or w.shape != x.shape:
        raise ShapeError(f"smooth_l1: prediction {x.shape}, target {t.shape}")
    denom = _normaliser(w)
    d = x - t
    if denom == 0:
        return np.zeros((), dtype=x.dtype), (d, 0.0)
    ad = np.abs(d)
    per = np.where(ad < beta, 0.5 * d * d / beta, ad - 0.5 * beta)
    return np.asarray((per * w).sum() / denom, dtype=x.dtype), (d, denom)


def _smooth_l1_bwd(attrs, ctx, g):
    d, denom = ctx
    if denom == 0:
        return (np.zeros_like(d),)
    beta = attrs.get("beta", 1.0)
    slope = np.where(np.abs(d) < beta, d / beta, np.sign(d))
    return ((g * slope * attrs["weight"] / denom).astype(d.dtype),)


_register("smooth_l1", _smooth_l1_fwd, _smooth_l1_bwd)


# ---------------------------------------------------------------------------
# public op wrappers


def add(a: Tensor, b: Tensor) -> Tensor:
    return apply_primitive("add", [a, b])


def mul(a: Tensor, b: Tensor) -> Tensor:
    return apply_primitive("mul", [a, b])


def matmul(a: Tensor, b: Tensor) -> Tensor:
    return apply_primitive("matmul", [a, b])


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """``x @ weight.T + bias`` with weight shaped (out, in)."""
    return apply_primitive("linear", [x, weight, bias])


def conv2d(x: Tensor, weight: Tensor, bias: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    return apply_primitive("conv2d", [x, weight, bias], stride=stride, pad=pad)


def relu(x: Tensor) -> Tensor:
    return apply_primitive("relu", [x])


def leaky_relu(x: Tensor, alpha: float = 0.01) -> Tensor:
    return apply_primitive("leaky_relu", [x], alpha=alpha)


def sigmoid(x: Tensor) -> Tensor:
    return apply_primitive("sigmoid", [x])


def concat(xs: Sequence[Tensor], axis: int) -> Tensor:
    return apply_primitive("concat", xs, axis=axis)


def tile(x: Tensor, axis: int, count: int) -> Tensor:
    return apply_primitive("tile", [x], axis=axis, count=count)


def flatten(x: Tensor) -> Tensor:
    return apply_primitive("flatten", [x])


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    return apply_primitive("reshape", [x], shape=tuple(shape))


def cast(x: Tensor, dtype) -> Tensor:
    """Change precision; the gradient is cast back to the input's dtype."""
    return apply_primitive("cast", [x], dtype=np.dtype(dtype))


def transpose(x: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    return apply_primitive("transpose", [x], axes=tuple(axes) if axes is not None else None)


def slice_axis(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    return apply_primitive("slice", [x], axis=axis, start=start, stop=stop)


def sum_all(x: Tensor) -> Tensor:
    return apply_primitive("sum", [x])


def stop_gradient(x: Tensor) -> Tensor:
    """Identity on values; contributes no gradient to ``x``."""
    return apply_primitive("stop_gradient", [x])


def bilinear_crop(features: Tensor, boxes, index, size: int) -> Tensor:
    """Sample ``size x size`` bins from each box of an (N, C, H, W) map.

    ``boxes`` are continuous (x0, y0, x1, y1) in feature coordinates and
    ``index`` picks the batch image for each box.
    """
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    index = np.asarray(index, dtype=np.int64).reshape(-1)
    if len(boxes) != len(index):
        raise ShapeError("one batch index per box required")
    return apply_primitive("bilinear_crop", [features], boxes=boxes, index=index, size=int(size))


LOSS_KINDS = ("bce_with_logits", "softmax_ce", "smooth_l1")


def compute_loss(kind: str, prediction: Tensor, target, weight=None) -> Tensor:
    """Mean-reduced loss over contributing elements.

    ``weight`` selects (and may weight) contributing elements; for
    ``bce_with_logits`` this is the channel mask.  When nothing contributes
    the loss is 0 and the returned tensor has ``empty = True``.
    """
    if kind not in LOSS_KINDS:
        raise ValueError(f"unknown loss {kind!r}")
    dtype = prediction.dtype
    if kind == "softmax_ce":
        target = np.asarray(target, dtype=np.int64)
        shape = (prediction.shape[0],)
    else:
        target = np.asarray(target, dtype=dtype)
        shape = prediction.shape
    weight = np.ones(shape, dtype=dtype) if weight is None else np.asarray(weight, dtype=dtype)
    out = apply_primitive(kind, [prediction], target=target, weight=weight)
    out.empty = not weight.any()
    return out


# ---------------------------------------------------------------------------
# reverse pass


def backward(loss: Tensor, wrt: Sequence[Tensor] = ()) -> dict[Tensor, np.ndarray]:
    """Accumulate d(loss)/d(leaf) for every reachable grad-requiring leaf.

    Leaves reached only through ``stop_gradient`` (or not at all) are absent
    from the table, i.e. their gradient is zero; tensors listed in ``wrt``
    are always present, with explicit zeros when unreached.
    """
    if loss.size != 1:
        raise ShapeError(f"loss must be scalar, got shape {loss.shape}")
    tape = loss._tape
    if tape is None:
        raise TapeError("loss was not produced on a tape")
    if tape.consumed:
        raise TapeError("tape already consumed")
    end = next(i for i in range(len(tape.entries) - 1, -1, -1) if tape.entries[i].output is loss)

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    tensors: dict[int, Tensor] = {}
    for entry in reversed(tape.entries[: end + 1]):
        g = grads.pop(id(entry.output), None)
        if g is None:
            continue
        in_grads = PRIMITIVES[entry.kind].backward(entry.attrs, entry.ctx, g)
        for t, gi in zip(entry.inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            key = id(t)
            grads[key] = grads[key] + gi if key in grads else gi
            tensors[key] = t
    tape.consumed = True
    for entry in tape.entries:
        entry.ctx = None

    table = {}
    for key, g in grads.items():
        if key in tensors:
            if not np.all(np.isfinite(g)):
                raise NonFiniteError(f"non-finite gradient for {tensors[key]!r}")
            table[tensors[key]] = g
    for t in wrt:
        if t not in table:
            table[t] = np.zeros_like(t.data)
    return table


def grad(fn: Callable[[Tensor], Tensor], point: np.ndarray) -> tuple[float, np.ndarray]:
    """Value and gradient of a scalar function at ``point``."""
    x = Tensor(np.array(point, copy=True), requires_grad=True)
    with Tape():
        out = fn(x)
    return out.item(), backward(out, wrt=[x])[x]


def finite_diff_check(fn: Callable[[Tensor], Tensor], point, eps: float = 1e-5, analytic=None) -> float:
    """Max over coordinates of |analytic - central| / max(1, |central|)."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    point = np.asarray(point, dtype=np.float64)
    if analytic is None:
        _, analytic = grad(fn, point)
    analytic = np.asarray(analytic, dtype=np.float64)
    worst = 0.0
    for i in range(point.size):
        hi = point.copy()
        lo = point.copy()
        hi.flat[i] += eps
        lo.flat[i] -= eps
        f_hi = fn(Tensor(hi)).item()
        f_lo = fn(Tensor(lo)).item()
        if not (np.isfinite(f_hi) and np.isfinite(f_lo)):
            raise NonFiniteError("non-finite evaluation during finite differencing")
        central = (f_hi - f_lo) / (2 * eps)
        worst = max(worst, abs(analytic.flat[i] - central) / max(1.0, abs(central)))
    return worst


# ---------------------------------------------------------------------------
# optimisation


def he_normal(rng: np.random.Generator, shape: Sequence[int], fan_in: int, scale: float = 1.0, dtype=np.float32) -> np.ndarray:
    return (rng.standard_normal(shape) * (scale * np.sqrt(2.0 / fan_in))).astype(dtype)


def sgd_momentum_step(param: np.ndarray, grad: np.ndarray, velocity: np.ndarray, lr: float,
                      momentum: float = 0.9, weight_decay: float = 1e-4) -> tuple[np.ndarray, np.ndarray]:
    """Classical momentum: v' = m*v + (g + wd*p);  p' = p - lr*v'."""
    if param.shape != grad.shape or param.shape != velocity.shape:
        raise ShapeError("param, grad and velocity shapes must agree")
    if not np.all(np.isfinite(grad)):
        raise NonFiniteError("non-finite gradient passed to sgd_momentum_step")
    v = momentum * velocity + (grad + weight_decay * param)
    if lr == 0:
        return param.copy(), v
    return param - lr * v, v


@dataclass
class OptimState:
    lr: float = 0.02
    momentum: float = 0.9
    weight_decay: float = 1e-4
    velocity: dict[str, np.ndarray] = field(default_factory=dict)


class SGD:
    """Momentum SGD over a named parameter table.

    Parameters that received no gradient this step are left untouched,
    weight decay included.
    """

    def __init__(self, params: dict[str, Tensor], state: OptimState | None = None):
        self.params = params
        self.state = state or OptimState()

    def step(self, grads: dict[Tensor, np.ndarray], lr: float | None = None) -> None:
        lr = self.state.lr if lr is None else lr
        updates = {}
        for name, p in self.params.items():
            g = grads.get(p)
            if g is None:
                continue
            v = self.state.velocity.get(name)
            if v is None:
                v = np.zeros_like(p.data)
            updates[name] = sgd_momentum_step(p.data, g.astype(p.dtype, copy=False), v, lr,
                                              self.state.momentum, self.state.weight_decay)
        # apply only after every gradient validated
        for name, (new_p, new_v) in updates.items():
            self.params[name].data = new_p
            self.state.velocity[name] = new_v
