"""Finite-difference verification of every differentiable op.

Each registry entry builds small random inputs for a seed and a function of
those inputs. The analytic gradient of ``sum(R * f(inputs))`` for a fixed
random ``R`` is compared with central differences, per input, as

    rel = ||g_analytic - g_numeric|| / max(||g_analytic||, ||g_numeric||, floor)

The module also bundles the baseline/repeated node-mixing equivalence check
so that one call covers both verification suites.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict, List, Sequence, Tuple

import numpy as np

from . import engine as E
from .engine import Tensor
from .graph import (AdjacencySet, EquivalenceReport, batched_node_mix, check_grad_equivalence,
                    node_mix, node_mix_repeated, repeat_batch)
from .mechanisms import ClassicalParams, DssmgParams, classical_layer, ds_smg_layer

GRAD_TOL = 1e-4
FD_STEP = 1e-5
NORM_FLOOR = 1e-10


@dataclass
class OpCase:
    """Inputs for one op and seed, plus the function under test."""

    inputs: List[np.ndarray]
    fn: Callable[..., Tensor]


# builder(rng) -> OpCase
REGISTRY: Dict[str, Callable[[np.random.Generator], OpCase]] = {}


def register(name: str):
    def deco(builder):
        if name in REGISTRY:
            raise ValueError(f"op {name!r} registered twice")
        REGISTRY[name] = builder
        return builder

    return deco


def _n(rng, *shape):
    return rng.standard_normal(shape)


@register("add")
def _(rng):
    return OpCase([_n(rng, 2, 3, 4), _n(rng, 3, 1)], E.add)


@register("neg")
def _(rng):
    return OpCase([_n(rng, 3, 4)], E.neg)


@register("mul")
def _(rng):
    return OpCase([_n(rng, 2, 3, 4), _n(rng, 1, 4)], E.mul)


@register("matmul")
def _(rng):
    return OpCase([_n(rng, 2, 3, 4), _n(rng, 4, 5)], E.matmul)


@register("sum")
def _(rng):
    return OpCase([_n(rng, 2, 3, 4)], lambda a: E.tsum(a, axis=(0, 2), keepdims=True))


@register("mean")
def _(rng):
    return OpCase([_n(rng, 2, 3, 4)], lambda a: E.tmean(a, axis=1))


@register("reshape")
def _(rng):
    return OpCase([_n(rng, 2, 3, 4)], lambda a: E.reshape(a, (4, 6)))


@register("permute")
def _(rng):
    return OpCase([_n(rng, 2, 3, 4)], lambda a: E.permute(a, (2, 0, 1)))


@register("concat")
def _(rng):
    return OpCase([_n(rng, 2, 3, 4), _n(rng, 2, 1, 4)], lambda a, b: E.concat([a, b], axis=1))


@register("slice")
def _(rng):
    return OpCase([_n(rng, 2, 5, 3)], lambda a: E.slice_axis(a, 1, 4, axis=1))


@register("split")
def _(rng):
    def fn(a):
        p, q = E.split(a, [2, 3], axis=1)
        return E.concat([E.mul(p, p), q], axis=1)

    return OpCase([_n(rng, 2, 5, 3)], fn)


@register("pointwise_conv")
def _(rng):
    return OpCase([_n(rng, 2, 3, 4, 5), _n(rng, 3, 2), _n(rng, 2)], E.pointwise_conv)


@register("depthwise_temporal_conv")
def _(rng):
    return OpCase([_n(rng, 2, 3, 6, 4), _n(rng, 3, 3)], lambda x, w: E.depthwise_temporal_conv(x, w, 1, "same"))


@register("depthwise_temporal_conv_strided")
def _(rng):
    return OpCase([_n(rng, 2, 3, 6, 4), _n(rng, 3, 2)], lambda x, w: E.depthwise_temporal_conv(x, w, 2, "none"))


@register("temporal_patch_conv")
def _(rng):
    return OpCase([_n(rng, 2, 3, 8, 4), _n(rng, 3, 4, 5), _n(rng, 5)], E.temporal_patch_conv)


@register("layer_norm_channel")
def _(rng):
    return OpCase([_n(rng, 2, 4, 3, 5), _n(rng, 4), _n(rng, 4)],
                  lambda x, g, b: E.layer_norm_channel(x, g, b, 1e-6))


@register("gelu")
def _(rng):
    return OpCase([2.0 * _n(rng, 3, 4, 5)], E.gelu)


@register("softmax")
def _(rng):
    return OpCase([_n(rng, 3, 5)], lambda z: E.softmax(z, axis=-1))


@register("smoothed_cross_entropy")
def _(rng):
    labels = rng.integers(0, 5, 4)
    return OpCase([_n(rng, 4, 5)], lambda z: E.smoothed_cross_entropy(z, labels, 0.1))


@register("drop_path")
def _(rng):
    seed = int(rng.integers(1 << 31))
    # the same mask on every evaluation, so the op is a fixed linear map
    return OpCase([_n(rng, 6, 2, 3, 2)],
                  lambda x: E.drop_path(x, 0.5, True, np.random.default_rng(seed)))


@register("dropout")
def _(rng):
    seed = int(rng.integers(1 << 31))
    return OpCase([_n(rng, 4, 6)], lambda x: E.dropout(x, 0.4, True, np.random.default_rng(seed)))


@register("mean_pool_tv")
def _(rng):
    return OpCase([_n(rng, 2, 3, 4, 5)], E.mean_pool_tv)


@register("mean_persons")
def _(rng):
    return OpCase([_n(rng, 6, 4)], lambda x: E.mean_persons(x, 2))


@register("linear")
def _(rng):
    return OpCase([_n(rng, 3, 4), _n(rng, 4, 2), _n(rng, 2)], E.linear)


@register("node_mix")
def _(rng):
    return OpCase([_n(rng, 4, 4, 3), _n(rng, 2, 2, 3, 4, 3)], node_mix)


@register("node_mix_branch_major")
def _(rng):
    return OpCase([_n(rng, 4, 4, 3), _n(rng, 2, 3, 2, 3, 4)], lambda a, x: node_mix(a, x, layout="nkctv"))


@register("repeat_batch")
def _(rng):
    return OpCase([_n(rng, 3, 3, 2)], lambda a: repeat_batch(a, 3))


@register("batched_node_mix")
def _(rng):
    return OpCase([_n(rng, 2, 4, 4, 3), _n(rng, 2, 2, 3, 4, 3)], batched_node_mix)


@register("node_mix_repeated")
def _(rng):
    return OpCase([_n(rng, 4, 4, 3), _n(rng, 2, 2, 3, 4, 3)], node_mix_repeated)


@register("classical_layer")
def _(rng):
    def fn(x, w, b, a):
        return classical_layer(ClassicalParams(w, AdjacencySet(a), b), x)

    return OpCase([_n(rng, 2, 3, 2, 4), _n(rng, 3, 2), _n(rng, 2), _n(rng, 4, 4, 3)], fn)


def _dssmg_case(rng, static_branch):
    c, v = 2, 4

    def fn(x, ew, eb, a, pw, ls):
        return ds_smg_layer(DssmgParams(ew, AdjacencySet(a), pw, ls, eb), x, static_branch)

    return OpCase([_n(rng, 2, c, 3, v), _n(rng, c, 4 * c), _n(rng, 4 * c), _n(rng, v, v, 3),
                   _n(rng, 4 * c, c), _n(rng, c)], fn)


@register("ds_smg_layer")
def _(rng):
    return _dssmg_case(rng, True)


@register("smg_layer")
def _(rng):
    return _dssmg_case(rng, False)


# -- harness -----------------------------------------------------------------------


@dataclass
class OpResult:
    op: str
    worst_rel_err: float
    worst_seed: int
    seeds: int
    tol: float = GRAD_TOL

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.worst_rel_err)) and self.worst_rel_err < self.tol


def _projected(fn, tensors, proj):
    out = fn(*tensors)
    return E.tsum(E.mul(out, Tensor(proj)))


def op_rel_error(case: OpCase, rng: np.random.Generator, h: float = FD_STEP) -> float:
    """Worst relative gradient error over the inputs of one case."""
    probe = case.fn(*[Tensor(a) for a in case.inputs])
    proj = rng.standard_normal(probe.shape)
    leaves = [Tensor(a.copy(), requires_grad=True) for a in case.inputs]
    E.backward(_projected(case.fn, leaves, proj))
    worst = 0.0
    for i, leaf in enumerate(leaves):
        analytic = leaf.grad if leaf.grad is not None else np.zeros(leaf.shape)
        numeric = np.zeros(leaf.shape)
        base = [a.copy() for a in case.inputs]
        flat = base[i].reshape(-1)
        with E.no_grad():
            for j in range(flat.size):
                keep = flat[j]
                flat[j] = keep + h
                up = _projected(case.fn, [Tensor(a) for a in base], proj).item()
                flat[j] = keep - h
                down = _projected(case.fn, [Tensor(a) for a in base], proj).item()
                flat[j] = keep
                numeric.reshape(-1)[j] = (up - down) / (2 * h)
        denom = max(np.linalg.norm(analytic), np.linalg.norm(numeric), NORM_FLOOR)
        worst = max(worst, float(np.linalg.norm(analytic - numeric) / denom))
    return worst


def check_op(name: str, seeds: int = 20, base_seed: int = 0, h: float = FD_STEP) -> OpResult:
    if name not in REGISTRY:
        raise KeyError(f"no gradcheck registered for {name!r}")
    worst, worst_seed = 0.0, base_seed
    for s in range(base_seed, base_seed + seeds):
        rng = np.random.default_rng([s, 0x6743])
        err = op_rel_error(REGISTRY[name](rng), rng, h)
        if not np.isfinite(err) or err > worst:
            worst, worst_seed = err, s
            if not np.isfinite(err):
                break
    return OpResult(name, worst, worst_seed, seeds)


EQUIV_SHAPES: Tuple[Tuple[int, ...], ...] = ((2, 3, 4, 5, 3), (8, 16, 32, 25, 3))


@dataclass
class GradcheckReport:
    ops: List[OpResult] = field(default_factory=list)
    equivalence: List[EquivalenceReport] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.ops) and all(r.passed for r in self.equivalence)

    @property
    def failures(self) -> List[str]:
        return [r.op for r in self.ops if not r.passed] + [
            "equivalence" + str(r.shape) for r in self.equivalence if not r.passed]

    def summary(self) -> str:
        lines = [f"{'op':34s} {'worst rel err':>14s} seed  status"]
        for r in self.ops:
            lines.append(f"{r.op:34s} {r.worst_rel_err:14.3e} {r.worst_seed:4d}  {'PASS' if r.passed else 'FAIL'}")
        for r in self.equivalence:
            lines.append(r.summary())
        lines.append("ALL PASS" if self.passed else "FAILED: " + ", ".join(self.failures))
        return "\n".join(lines)


def run_gradcheck(ops: Sequence[str] = None, seeds: int = 20, equivalence_shapes=EQUIV_SHAPES,
                  equivalence_trials: int = 20, progress: Callable[[str], None] = None) -> GradcheckReport:
    """Run the finite-difference suite and the formulation-equivalence suite."""
    report = GradcheckReport()
    for name in (ops if ops is not None else list(REGISTRY)):
        report.ops.append(check_op(name, seeds))
        if progress:
            progress(name)
    for shape in equivalence_shapes:
        report.equivalence.append(check_grad_equivalence(tuple(shape), equivalence_trials, seed=0))
        if progress:
            progress(f"equivalence{tuple(shape)}")
    return report
