"""Adjacency-times-feature contraction in two numerically equivalent forms.

``node_mix`` contracts a shared adjacency ``A[V, U, k]`` with features
``X[N, C, T, V, k]``. ``node_mix_repeated`` first materializes one copy of
``A`` per batch element and contracts batch-by-batch; the backward of the
copy sums the per-copy gradients, which is what makes both forms yield the
same update for ``A``.
"""

from __future__ import annotations

import csv
import statistics
import time
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .data import SkeletonGraph
from .engine import SeedStream, Tensor, apply_op, backward, no_grad
from .exceptions import DimensionError, InputError, ResourceError

DEFAULT_BENCH_SHAPES = (
    (8, 16, 32, 25, 3),
    (32, 64, 64, 25, 3),
    (64, 96, 64, 25, 3),
    (128, 96, 64, 25, 3),
)


@dataclass
class AdjacencySet:
    """Learnable ``[V, V, k]`` adjacency; slice ``a[:, :, s]`` maps source ``v`` to target ``u``."""

    values: Tensor
    normalization: str = field(default="none", metadata={"static": True})

    def __post_init__(self):
        if self.values.ndim != 3 or self.values.shape[0] != self.values.shape[1]:
            raise DimensionError(f"adjacency must be [V, V, k], got {self.values.shape}")

    @property
    def V(self) -> int:
        return self.values.shape[0]

    @property
    def k(self) -> int:
        return self.values.shape[2]

    @classmethod
    def from_graph(cls, graph: SkeletonGraph, requires_grad: bool = True) -> "AdjacencySet":
        """Self / inward / outward slices, each row-normalized once (``D^-1 A``)."""
        V = graph.V
        a = np.zeros((V, V, 3))
        a[:, :, 0] = np.eye(V)
        for v, p in graph.inward:
            a[v, p, 1] = 1.0
        for p, v in graph.outward:
            a[p, v, 2] = 1.0
        return cls(Tensor(row_normalize(a), requires_grad=requires_grad), normalization="row")

    @classmethod
    def zeros(cls, V: int, k: int = 3, requires_grad: bool = True) -> "AdjacencySet":
        return cls(Tensor(np.zeros((V, V, k)), requires_grad=requires_grad))

    def with_zeroed_row(self, v: int) -> "AdjacencySet":
        a = self.values.data.copy()
        a[v, :, :] = 0.0
        return AdjacencySet(Tensor(a, requires_grad=self.values.requires_grad), self.normalization)


def row_normalize(a: np.ndarray) -> np.ndarray:
    sums = a.sum(axis=1, keepdims=True)
    return np.divide(a, sums, out=np.zeros_like(a), where=sums != 0)


def _as_values(a) -> Tensor:
    return a.values if isinstance(a, AdjacencySet) else a


LAYOUTS = ("nctvk", "nkctv")


def _dims(x: Tensor, layout: str):
    if layout == "nctvk":
        n, c, t, v, k = x.shape
    elif layout == "nkctv":
        n, k, c, t, v = x.shape
    else:
        raise InputError(f"unknown layout {layout!r}; expected one of {LAYOUTS}")
    return n, c, t, v, k


def _check(a: Tensor, x: Tensor, op: str, layout: str):
    if x.ndim != 5:
        raise DimensionError(f"{op}: features must be 5-D ({layout}), got {x.shape}")
    if a.ndim != 3 or a.shape[0] != a.shape[1]:
        raise DimensionError(f"{op}: adjacency must be [V, V, k], got {a.shape}")
    n, c, t, v, k = _dims(x, layout)
    if a.shape[0] != v:
        raise DimensionError(f"{op}: adjacency V={a.shape[0]} != feature node extent {v}")
    if a.shape[2] != k:
        raise DimensionError(f"{op}: adjacency k={a.shape[2]} != feature subgraph extent {k}")


def _slices(arr: np.ndarray, layout: str, dims) -> list:
    """Per-subgraph ``[N, C*T, V]`` operands."""
    n, c, t, v, k = dims
    if layout == "nctvk":
        return [np.ascontiguousarray(arr[..., s]).reshape(n, c * t, v) for s in range(k)]
    return [arr[:, s].reshape(n, c * t, v) for s in range(k)]


def _assemble(parts: list, layout: str, dims) -> np.ndarray:
    n, c, t, v, k = dims
    if layout == "nctvk":
        out = np.empty((n, c, t, v, k))
        for s, part in enumerate(parts):
            out[..., s] = part.reshape(n, c, t, v)
        return out
    out = np.empty((n, k, c, t, v))
    for s, part in enumerate(parts):
        out[:, s] = part.reshape(n, c, t, v)
    return out


def node_mix(a, x: Tensor, layout: str = "nctvk") -> Tensor:
    """``out[n,c,t,u,s] = sum_v a[v,u,s] * x[n,c,t,v,s]`` with the shared adjacency.

    ``layout="nkctv"`` takes and returns the same contraction with the subgraph
    axis second, ``x[n, s, c, t, v]``.
    """
    a = _as_values(a)
    _check(a, x, "node_mix", layout)
    dims = _dims(x, layout)
    n, c, t, v, k = dims
    # contiguous per-subgraph matrices keep matmul on the BLAS path
    ad = [np.ascontiguousarray(a.data[:, :, s]) for s in range(k)]
    xs = _slices(x.data, layout, dims)
    out = _assemble([np.matmul(xs[s], ad[s]) for s in range(k)], layout, dims)

    def bw(g):
        gs = _slices(g, layout, dims)
        ga = gx = None
        if a.requires_grad:
            # one contraction over all N*C*T rows at once
            ga = np.stack(
                [xs[s].reshape(n * c * t, v).T @ gs[s].reshape(n * c * t, v) for s in range(k)], axis=2
            )
        if x.requires_grad:
            gx = _assemble([np.matmul(gs[s], ad[s].T) for s in range(k)], layout, dims)
        return ga, gx

    return apply_op("node_mix", out, (a, x), bw)


def repeat_batch(a: Tensor, n: int) -> Tensor:
    """``[V, U, k] -> [n, V, U, k]``; the backward sums over the copies."""
    return apply_op(
        "repeat", np.broadcast_to(a.data, (n,) + a.shape).copy(), (a,),
        lambda g: (g.sum(axis=0),),
    )


def batched_node_mix(a_rep: Tensor, x: Tensor, layout: str = "nctvk") -> Tensor:
    """``out[n,c,t,u,s] = sum_v a_rep[n,v,u,s] * x[n,c,t,v,s]``."""
    dims = _dims(x, layout)
    n, c, t, v, k = dims
    if a_rep.shape != (n, v, v, k):
        raise DimensionError(f"batched_node_mix: repeated adjacency {a_rep.shape} != {(n, v, v, k)}")
    ad = [np.ascontiguousarray(a_rep.data[..., s]) for s in range(k)]
    xs = _slices(x.data, layout, dims)
    out = _assemble([np.matmul(xs[s], ad[s]) for s in range(k)], layout, dims)

    def bw(g):
        gs = _slices(g, layout, dims)
        ga = gx = None
        if a_rep.requires_grad:
            # one small contraction per batch element
            ga = np.stack([np.matmul(xs[s].transpose(0, 2, 1), gs[s]) for s in range(k)], axis=3)
        if x.requires_grad:
            gx = _assemble([np.matmul(gs[s], ad[s].transpose(0, 2, 1)) for s in range(k)], layout, dims)
        return ga, gx

    return apply_op("batched_node_mix", out, (a_rep, x), bw)


def node_mix_repeated(a, x: Tensor, layout: str = "nctvk") -> Tensor:
    """Training-time drop-in for :func:`node_mix` built on a per-sample copy of ``a``."""
    a = _as_values(a)
    _check(a, x, "node_mix_repeated", layout)
    return batched_node_mix(repeat_batch(a, x.shape[0]), x, layout)


FORMULATIONS = {"baseline": node_mix, "repeated": node_mix_repeated}


def get_formulation(name: str):
    try:
        return FORMULATIONS[name]
    except KeyError:
        raise InputError(f"unknown formulation {name!r}; expected one of {sorted(FORMULATIONS)}") from None


# -- equivalence ------------------------------------------------------------------


@dataclass
class EquivalenceReport:
    shape: Tuple[int, ...]
    trials: int
    forward_max_diff: float = 0.0
    grad_a_max_diff: float = 0.0
    grad_x_max_diff: float = 0.0
    forward_tol: float = 1e-12
    grad_tol: float = 1e-10
    note: str = ""

    @property
    def passed(self) -> bool:
        return (
            self.forward_max_diff < self.forward_tol
            and self.grad_a_max_diff < self.grad_tol
            and self.grad_x_max_diff < self.grad_tol
        )

    def summary(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        extra = f" ({self.note})" if self.note else ""
        return (
            f"{status} shape={self.shape} trials={self.trials} fwd={self.forward_max_diff:.3e} "
            f"grad_a={self.grad_a_max_diff:.3e} grad_x={self.grad_x_max_diff:.3e}{extra}"
        )


def _leaf(arr: np.ndarray) -> Tensor:
    t = Tensor._wrap(arr)
    t.requires_grad = True
    return t


def _run_pair(a0: np.ndarray, x0: np.ndarray) -> Tuple[float, float, float]:
    """Max abs differences (forward, grad a, grad x) between the formulations.

    Runs sequentially and drops intermediates early so large shapes fit in memory.
    """
    a, x = _leaf(a0), _leaf(x0)
    y = node_mix(a, x)
    backward(y.sum())
    yb, gab, gxb = y.data, a.grad, x.grad
    del y, a, x
    a, x = _leaf(a0), _leaf(x0)
    y = node_mix_repeated(a, x)
    d_fwd = float(np.abs(yb - y.data).max())
    del yb
    backward(y.sum())
    del y
    d_a = float(np.abs(gab - a.grad).max())
    d_x = float(np.abs(gxb - x.grad).max())
    return d_fwd, d_a, d_x


def check_grad_equivalence(shape: Sequence[int], trials: int = 10, seed: int = 0) -> EquivalenceReport:
    """Compare both formulations on random inputs with ``loss = sum(outputs)``."""
    shape = tuple(int(s) for s in shape)
    if len(shape) != 5 or min(shape) < 1:
        raise DimensionError(f"shape must be five positive extents (N, C, T, V, k), got {shape}")
    n, c, t, v, k = shape
    report = EquivalenceReport(shape, trials)
    if trials == 0:
        report.note = "no trials"
        return report
    stream = SeedStream(seed)
    for trial in range(trials):
        rng = stream.generator("equivalence", trial)
        a0 = rng.standard_normal((v, v, k))
        x0 = rng.standard_normal(shape)
        d_fwd, d_a, d_x = _run_pair(a0, x0)
        report.forward_max_diff = max(report.forward_max_diff, d_fwd)
        report.grad_a_max_diff = max(report.grad_a_max_diff, d_a)
        report.grad_x_max_diff = max(report.grad_x_max_diff, d_x)
    return report


# -- benchmark --------------------------------------------------------------------


@dataclass
class BenchRecord:
    shape: Tuple[int, ...]
    formulation: str
    forward_ms: float
    backward_ms: float
    reps: int
    max_abs_diff: float = 0.0

    def __post_init__(self):
        if self.reps < 5:
            raise InputError(f"a bench record needs >= 5 repetitions, got {self.reps}")


def _bench_bytes(shape) -> int:
    n, c, t, v, k = shape
    # x, output, seed grad, grad_x, plus per-subgraph working copies
    return 8 * n * c * t * v * k * 6


def _check_memory(shape):
    try:
        import psutil

        avail = psutil.virtual_memory().available
    except Exception:  # pragma: no cover - psutil missing
        return
    need = _bench_bytes(shape)
    if need > avail:
        raise ResourceError(f"shape {shape} needs ~{need / 2**30:.2f} GiB, only {avail / 2**30:.2f} GiB available")


def _time_once(fn, a0, x0, with_backward: bool) -> float:
    a, x = _leaf(a0), _leaf(x0)
    start = time.perf_counter()
    y = fn(a, x)
    if with_backward:
        backward(y.sum())
    elapsed = time.perf_counter() - start
    del y, a, x
    return elapsed


def bench_formulations(
    shapes: Sequence[Sequence[int]] = DEFAULT_BENCH_SHAPES,
    reps: int = 5,
    warmup: int = 1,
    seed: int = 0,
    csv_path=None,
    progress=None,
) -> List[BenchRecord]:
    """Median forward and backward wall time of both formulations per shape.

    Backward time is ``median(forward + backward) - median(forward)``. Each
    shape is also checked for forward/gradient agreement between formulations;
    the largest difference is stored on the records.
    """
    if reps < 5:
        raise InputError(f"reps must be >= 5, got {reps}")
    if warmup < 1:
        raise InputError(f"warmup must be >= 1, got {warmup}")
    records = []
    stream = SeedStream(seed)
    for shape in shapes:
        shape = tuple(int(s) for s in shape)
        _check_memory(shape)
        n, c, t, v, k = shape
        rng = stream.generator("bench", *shape)
        a0 = rng.standard_normal((v, v, k))
        x0 = rng.standard_normal(shape)
        diff = _max_pair_diff(a0, x0)
        for name in ("baseline", "repeated"):
            fn = FORMULATIONS[name]
            for _ in range(warmup):
                _time_once(fn, a0, x0, True)
            fwd = [_time_once(fn, a0, x0, False) for _ in range(reps)]
            both = [_time_once(fn, a0, x0, True) for _ in range(reps)]
            f_med = statistics.median(fwd)
            b_med = statistics.median(both) - f_med
            if b_med <= 0:
                b_med = min(both)
            rec = BenchRecord(shape, name, 1e3 * f_med, 1e3 * b_med, reps, diff)
            records.append(rec)
            if progress:
                progress(rec)
        del x0
    if csv_path is not None:
        write_bench_csv(csv_path, records)
    return records


def _max_pair_diff(a0, x0) -> float:
    return max(_run_pair(a0, x0))


BENCH_FIELDS = ("shape", "formulation", "phase", "median_ms", "reps")


def shape_str(shape) -> str:
    return "x".join(str(s) for s in shape)


def write_bench_csv(path, records: Sequence[BenchRecord]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(BENCH_FIELDS)
        for r in records:
            w.writerow([shape_str(r.shape), r.formulation, "forward", repr(r.forward_ms), r.reps])
            w.writerow([shape_str(r.shape), r.formulation, "backward", repr(r.backward_ms), r.reps])


def read_bench_csv(path) -> List[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    for row in rows:
        row["shape"] = tuple(int(s) for s in row["shape"].split("x"))
        row["median_ms"] = float(row["median_ms"])
        row["reps"] = int(row["reps"])
    return rows


def backward_ratios(records: Sequence[BenchRecord]) -> dict:
    """``repeated / baseline`` backward time per shape."""
    by = {(r.shape, r.formulation): r for r in records}
    out = {}
    for (shape, name), rec in by.items():
        if name == "baseline" and (shape, "repeated") in by:
            out[shape] = by[(shape, "repeated")].backward_ms / rec.backward_ms
    return out
