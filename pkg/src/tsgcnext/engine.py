"""Minimal reverse-mode autodiff over float64 numpy arrays.

Only the operators the network needs are provided. Every differentiable
operator records a node linking its output to its inputs and a backward
rule; :func:`backward` collects the nodes reachable from a scalar loss into a
:class:`Tape` ordered by execution and replays them in reverse.

Layouts follow the network convention ``[N, C, T, V]`` (batch, channels,
frames, joints).
"""

from __future__ import annotations

import contextlib
import itertools
import threading
import zlib
from typing import Callable, Iterable, Optional, Sequence

import numpy as np
from scipy.special import ndtr

from .exceptions import DimensionError, InputError, UsageError

_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)

_counter = itertools.count()
_state = threading.local()


def _grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextlib.contextmanager
def no_grad():
    """Run operators without recording backward nodes."""
    prev = _grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


# ----------------------------------------------------------------------------
# deterministic mode

_det_limiter = None


def set_deterministic(flag: bool = True) -> None:
    """Force single-threaded BLAS so reductions run in a fixed order."""
    global _det_limiter
    from threadpoolctl import threadpool_limits

    if flag and _det_limiter is None:
        _det_limiter = threadpool_limits(limits=1)
    elif not flag and _det_limiter is not None:
        _det_limiter.restore_original_limits()
        _det_limiter = None


def is_deterministic() -> bool:
    return _det_limiter is not None


@contextlib.contextmanager
def deterministic():
    was = is_deterministic()
    set_deterministic(True)
    try:
        yield
    finally:
        if not was:
            set_deterministic(False)


class SeedStream:
    """Counter-based random streams keyed by ``(seed, *key)``.

    Each key gets an independent Philox generator, so the draw seen by one
    stochastic op does not depend on how many draws other ops made before it.
    """

    def __init__(self, seed: int = 0):
        self.seed = int(seed)

    def generator(self, *key) -> np.random.Generator:
        words = [self.seed & 0xFFFFFFFF]
        for k in key:
            if isinstance(k, str):
                words.append(zlib.crc32(k.encode()))
            else:
                words.append(int(k) & 0xFFFFFFFF)
        return np.random.Generator(np.random.Philox(np.random.SeedSequence(words)))


# ----------------------------------------------------------------------------
# tensor + tape


class Node:
    __slots__ = ("op", "inputs", "backward")

    def __init__(self, op: str, inputs: Sequence["Tensor"], backward: Callable):
        self.op = op
        self.inputs = tuple(inputs)
        self.backward = backward


class Tensor:
    """Dense float64 array with an optional gradient buffer."""

    __slots__ = ("data", "requires_grad", "grad", "name", "_node", "_seq")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._node: Optional[Node] = None
        self._seq = next(_counter)

    @classmethod
    def _wrap(cls, data: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        t.data = data
        t.requires_grad = False
        t.grad = None
        t.name = None
        t._node = None
        t._seq = next(_counter)
        return t

    # -- basic properties
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def op(self) -> Optional[str]:
        return self._node.op if self._node is not None else None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self):
        tag = f", op={self.op}" if self._node else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    @staticmethod
    def zeros(shape, requires_grad=False) -> "Tensor":
        return Tensor(np.zeros(shape), requires_grad=requires_grad)

    # -- operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def permute(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return permute(self, axes)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor._wrap(np.asarray(x, dtype=np.float64))


def apply_op(op: str, data: np.ndarray, inputs: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    """Wrap ``data`` as the output of ``op``.

    ``backward_fn(grad)`` must return one gradient (or None) per input.
    """
    out = Tensor._wrap(data)
    if _grad_enabled() and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._node = Node(op, inputs, backward_fn)
    return out


class Tape:
    """Operations reachable from a root tensor, in execution order."""

    def __init__(self, tensors: list):
        self.tensors = tensors

    @classmethod
    def record(cls, root: Tensor) -> "Tape":
        seen = {}
        stack = [root]
        while stack:
            t = stack.pop()
            if id(t) in seen:
                continue
            seen[id(t)] = t
            if t._node is not None:
                stack.extend(t._node.inputs)
        return cls(sorted(seen.values(), key=lambda t: t._seq))

    @property
    def ops(self) -> list:
        return [t.op for t in self.tensors if t._node is not None]

    def replay(self, root: Tensor, seed_grad: np.ndarray) -> None:
        grads = {id(root): seed_grad}
        for t in reversed(self.tensors):
            if t._node is None:
                continue
            g = grads.pop(id(t), None)
            if g is None:
                continue
            in_grads = t._node.backward(g)
            for inp, gi in zip(t._node.inputs, in_grads):
                if gi is None or not inp.requires_grad:
                    continue
                prev = grads.get(id(inp))
                grads[id(inp)] = gi if prev is None else prev + gi
        for t in self.tensors:
            # only leaves keep a gradient buffer; intermediates are released with the tape
            if not t.requires_grad or t._node is not None:
                continue
            g = grads.get(id(t))
            if g is None:
                g = np.zeros_like(t.data)
            if t.grad is None:
                t.grad = np.array(g, dtype=np.float64, copy=True)
            else:
                t.grad = t.grad + g


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(t) into ``t.grad`` for every reachable leaf ``t``."""
    if loss.data.size != 1:
        raise UsageError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise UsageError("loss is not connected to any tensor that requires grad")
    Tape.record(loss).replay(loss, np.ones_like(loss.data))


# ----------------------------------------------------------------------------
# elementwise and structural primitives


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return apply_op(
        "add", a.data + b.data, (a, b),
        lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)),
    )


def neg(a: Tensor) -> Tensor:
    return apply_op("neg", -a.data, (a,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data

    def bw(g):
        ga = _unbroadcast(g * bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(g * ad, bd.shape) if b.requires_grad else None
        return ga, gb

    return apply_op("mul", ad * bd, (a, b), bw)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a[..., m, k] @ b[k, n]``."""
    if b.ndim != 2 or a.shape[-1] != b.shape[0]:
        raise DimensionError(
            f"matmul: a axis -1 ({a.shape[-1]}) must equal b axis 0 ({b.shape[0]}) and b must be 2-D"
        )
    ad, bd = a.data, b.data

    def bw(g):
        ga = g @ bd.T if a.requires_grad else None
        gb = None
        if b.requires_grad:
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        return ga, gb

    return apply_op("matmul", ad @ bd, (a, b), bw)


def tsum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    shape = a.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return apply_op("sum", np.sum(a.data, axis=axis, keepdims=keepdims), (a,), bw)


def tmean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    shape = a.shape
    out = np.mean(a.data, axis=axis, keepdims=keepdims)
    count = a.data.size // max(out.size, 1)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, shape),)

    return apply_op("mean", out, (a,), bw)


def reshape(a: Tensor, shape) -> Tensor:
    src = a.shape
    return apply_op("reshape", a.data.reshape(shape), (a,), lambda g: (g.reshape(src),))


def permute(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return apply_op(
        "permute", np.ascontiguousarray(a.data.transpose(axes)), (a,),
        lambda g: (g.transpose(inv),),
    )


def concat(xs: Sequence[Tensor], axis: int = 1) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    sizes = [x.shape[axis] for x in xs]
    bounds = np.cumsum([0] + sizes)

    def bw(g):
        idx = [slice(None)] * g.ndim
        out = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            idx[axis] = slice(lo, hi)
            out.append(g[tuple(idx)])
        return tuple(out)

    return apply_op("concat", np.concatenate([x.data for x in xs], axis=axis), xs, bw)


def slice_axis(a: Tensor, start: int, stop: int, axis: int = 1) -> Tensor:
    idx = [slice(None)] * a.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)
    shape = a.shape

    def bw(g):
        full = np.zeros(shape)
        full[idx] = g
        return (full,)

    return apply_op("slice", a.data[idx], (a,), bw)


def split(a: Tensor, sizes: Sequence[int], axis: int = 1) -> list:
    if sum(sizes) != a.shape[axis]:
        raise DimensionError(f"split: sizes {list(sizes)} do not sum to axis {axis} extent {a.shape[axis]}")
    out, lo = [], 0
    for s in sizes:
        out.append(slice_axis(a, lo, lo + s, axis))
        lo += s
    return out


# ----------------------------------------------------------------------------
# network operators


def _check4(x: Tensor, op: str):
    if x.ndim != 4:
        raise DimensionError(f"{op}: expected [N, C, T, V] input, got shape {x.shape}")


def pointwise_conv(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """1x1 convolution mixing channels: ``out[n,o,t,v] = sum_c x[n,c,t,v] w[c,o] + b[o]``."""
    _check4(x, "pointwise_conv")
    if w.ndim != 2 or w.shape[0] != x.shape[1]:
        raise DimensionError(
            f"pointwise_conv: weight axis 0 ({w.shape[0] if w.ndim else None}) "
            f"must equal input channel axis 1 ({x.shape[1]})"
        )
    if b is not None and b.shape != (w.shape[1],):
        raise DimensionError(f"pointwise_conv: bias shape {b.shape} != ({w.shape[1]},)")
    n, ci, t, v = x.shape
    co = w.shape[1]
    x3 = x.data.reshape(n, ci, t * v)
    wd = w.data
    out = np.matmul(wd.T, x3)
    if b is not None:
        out += b.data[:, None]
    inputs = (x, w) if b is None else (x, w, b)

    def bw(g):
        g3 = g.reshape(n, co, t * v)
        gx = np.matmul(wd, g3).reshape(n, ci, t, v) if x.requires_grad else None
        gw = np.matmul(x3, g3.transpose(0, 2, 1)).sum(axis=0) if w.requires_grad else None
        if b is None:
            return gx, gw
        return gx, gw, g3.sum(axis=(0, 2))

    return apply_op("pointwise_conv", out.reshape(n, co, t, v), inputs, bw)


def _conv_len(t: int, k: int, stride: int, pad: str) -> tuple:
    if stride < 1:
        raise DimensionError(f"stride must be >= 1, got {stride}")
    if pad == "same":
        if k % 2 != 1:
            raise DimensionError(f"same padding needs an odd kernel, got k={k}")
        if t % stride != 0:
            raise DimensionError(f"T={t} is not divisible by stride {stride}")
        p = (k - 1) // 2
        return p, (t + 2 * p - k) // stride + 1
    if pad == "none":
        if t < k or t % stride != 0:
            raise DimensionError(f"T={t} is incompatible with kernel {k} / stride {stride} without padding")
        return 0, (t - k) // stride + 1
    raise InputError(f"unknown padding mode {pad!r}")


def depthwise_temporal_conv(x: Tensor, w: Tensor, stride: int = 1, pad: str = "same") -> Tensor:
    """Per-channel 1-D cross-correlation along T with zero padding.

    ``w`` has shape ``[C, k]``; channels never mix and joints are untouched.
    """
    _check4(x, "depthwise_temporal_conv")
    if w.ndim != 2 or w.shape[0] != x.shape[1]:
        raise DimensionError(f"depthwise_temporal_conv: weight shape {w.shape} does not match {x.shape[1]} channels")
    n, c, t, v = x.shape
    k = w.shape[1]
    p, t_out = _conv_len(t, k, stride, pad)
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (0, 0))) if p else x.data
    wd = w.data
    span = stride * (t_out - 1) + 1
    out = np.zeros((n, c, t_out, v))
    for j in range(k):
        out += wd[:, j][None, :, None, None] * xp[:, :, j:j + span:stride, :]

    def bw(g):
        gx = gw = None
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for j in range(k):
                gxp[:, :, j:j + span:stride, :] += wd[:, j][None, :, None, None] * g
            gx = gxp[:, :, p:p + t, :] if p else gxp
        if w.requires_grad:
            gw = np.stack(
                [np.einsum("nctv,nctv->c", g, xp[:, :, j:j + span:stride, :]) for j in range(k)], axis=1
            )
        return gx, gw

    return apply_op("depthwise_temporal_conv", out, (x, w), bw)


def temporal_patch_conv(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """Non-overlapping ``s x 1`` convolution over time with stride ``s``.

    ``w`` has shape ``[C_in, s, C_out]``.
    """
    _check4(x, "temporal_patch_conv")
    if w.ndim != 3 or w.shape[0] != x.shape[1]:
        raise DimensionError(f"temporal_patch_conv: weight shape {w.shape} does not match {x.shape[1]} channels")
    n, ci, t, v = x.shape
    s, co = w.shape[1], w.shape[2]
    if t % s != 0:
        raise DimensionError(f"temporal_patch_conv: T={t} is not divisible by stride {s}")
    x5 = x.data.reshape(n, ci, t // s, s, v)
    wd = w.data
    out = np.einsum("nctsv,cso->notv", x5, wd, optimize=True)
    if b is not None:
        out += b.data[None, :, None, None]
    inputs = (x, w) if b is None else (x, w, b)

    def bw(g):
        gx = np.einsum("notv,cso->nctsv", g, wd, optimize=True).reshape(n, ci, t, v) if x.requires_grad else None
        gw = np.einsum("nctsv,notv->cso", x5, g, optimize=True) if w.requires_grad else None
        if b is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    return apply_op("temporal_patch_conv", np.ascontiguousarray(out), inputs, bw)


def layer_norm_channel(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalize across axis 1 at every other position, then apply ``gamma``/``beta``."""
    if eps <= 0:
        raise InputError(f"eps must be positive, got {eps}")
    if x.ndim < 2 or gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
        raise DimensionError(f"layer_norm_channel: affine shapes {gamma.shape}/{beta.shape} vs input {x.shape}")
    bshape = (1, x.shape[1]) + (1,) * (x.ndim - 2)
    mu = x.data.mean(axis=1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=1, keepdims=True) + eps)
    xhat = xc * inv
    gd = gamma.data.reshape(bshape)
    out = xhat * gd + beta.data.reshape(bshape)
    red = (0,) + tuple(range(2, x.ndim))

    def bw(g):
        gx = None
        if x.requires_grad:
            gh = g * gd
            gx = inv * (gh - gh.mean(axis=1, keepdims=True) - xhat * (gh * xhat).mean(axis=1, keepdims=True))
        gg = (g * xhat).sum(axis=red) if gamma.requires_grad else None
        gb = g.sum(axis=red) if beta.requires_grad else None
        return gx, gg, gb

    return apply_op("layer_norm_channel", out, (x, gamma, beta), bw)


def _gelu_grad(x: np.ndarray, cdf: np.ndarray) -> np.ndarray:
    return cdf + x * _INV_SQRT_2PI * np.exp(-0.5 * x * x)


def gelu(x: Tensor) -> Tensor:
    """Exact GELU, ``x * Phi(x)``."""
    xd = x.data
    cdf = ndtr(xd)
    return apply_op("gelu", xd * cdf, (x,), lambda g: (g * _gelu_grad(xd, cdf),))


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)
    return apply_op("softmax", y, (x,), lambda g: (y * (g - (g * y).sum(axis=axis, keepdims=True)),))


def log_softmax_np(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def smoothed_cross_entropy(logits: Tensor, labels, eps_ls: float = 0.1) -> Tensor:
    """Batch-mean cross entropy against a label-smoothed target."""
    if not 0.0 <= eps_ls < 1.0:
        raise InputError(f"label smoothing must lie in [0, 1), got {eps_ls}")
    if logits.ndim != 2:
        raise DimensionError(f"smoothed_cross_entropy: logits must be [N, K], got {logits.shape}")
    n, k = logits.shape
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if labels.shape[0] != n:
        raise DimensionError(f"smoothed_cross_entropy: {labels.shape[0]} labels for {n} rows")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise InputError(f"labels must lie in [0, {k}), got range [{labels.min()}, {labels.max()}]")
    q = np.full((n, k), eps_ls / k)
    q[np.arange(n), labels] += 1.0 - eps_ls
    logp = log_softmax_np(logits.data)
    loss = -(q * logp).sum() / n

    def bw(g):
        return (g * (np.exp(logp) - q) / n,)

    return apply_op("smoothed_cross_entropy", np.asarray(loss), (logits,), bw)


def drop_path(x: Tensor, rate: float, training: bool, rng: Optional[np.random.Generator] = None) -> Tensor:
    """Per-sample stochastic depth on a residual branch.

    ``rate == 1`` drops every sample's branch.
    """
    if not 0.0 <= rate <= 1.0:
        raise InputError(f"drop-path rate must lie in [0, 1], got {rate}")
    if not training or rate == 0.0:
        return x
    shape = (x.shape[0],) + (1,) * (x.ndim - 1)
    if rate == 1.0:
        return mul(x, Tensor._wrap(np.zeros(shape)))
    keep = 1.0 - rate
    mask = (rng.random(x.shape[0]) < keep).astype(np.float64).reshape(shape) / keep
    return mul(x, Tensor._wrap(mask))


def dropout(x: Tensor, rate: float, training: bool, rng: Optional[np.random.Generator] = None) -> Tensor:
    """Inverted elementwise dropout."""
    if not 0.0 <= rate < 1.0:
        raise InputError(f"dropout rate must lie in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    keep = 1.0 - rate
    mask = (rng.random(x.shape) < keep).astype(np.float64) / keep
    return mul(x, Tensor._wrap(mask))


def mean_pool_tv(x: Tensor) -> Tensor:
    """``[N, C, T, V] -> [N, C]``."""
    _check4(x, "mean_pool_tv")
    return tmean(x, axis=(2, 3))


def mean_persons(x: Tensor, persons: int) -> Tensor:
    """Fold ``[N*M, C]`` back to ``[N, C]`` by averaging over persons."""
    nm, c = x.shape
    if nm % persons:
        raise DimensionError(f"mean_persons: leading extent {nm} is not a multiple of M={persons}")
    return tmean(reshape(x, (nm // persons, persons, c)), axis=1)


def linear(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    y = matmul(x, w)
    return y if b is None else add(y, b)


def parameters_of(obj, prefix: str = "") -> Iterable[tuple]:
    """Yield ``(dotted_name, Tensor)`` for tensors held by dataclasses, lists and dicts."""
    import dataclasses

    if isinstance(obj, Tensor):
        yield prefix, obj
    elif dataclasses.is_dataclass(obj):
        for f in dataclasses.fields(obj):
            if f.metadata.get("static"):
                continue
            sub = f"{prefix}.{f.name}" if prefix else f.name
            yield from parameters_of(getattr(obj, f.name), sub)
    elif isinstance(obj, (list, tuple)):
        for i, item in enumerate(obj):
            yield from parameters_of(item, f"{prefix}.{i}" if prefix else str(i))
    elif isinstance(obj, dict):
        for key, item in obj.items():
            yield from parameters_of(item, f"{prefix}.{key}" if prefix else str(key))
