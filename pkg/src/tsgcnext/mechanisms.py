"""Spatial graph-learning mechanisms applied inside a block.

``ds_smg_layer`` expands ``C`` channels into four groups, mixes the first
three over the self, inward and outward adjacencies, passes the fourth
through unmixed (the static branch), then projects ``4C -> C`` and applies a
per-channel layer scale. Setting ``static_branch=False`` zeroes the fourth
group (the SMG variant). ``classical_layer`` shares a single weight across
all three adjacencies, and ``mlp_layer`` drops spatial mixing altogether.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from . import engine as E
from .engine import Tensor
from .exceptions import DimensionError, InputError
from .graph import AdjacencySet, get_formulation

MECHANISMS = ("none", "classical", "smg", "ds-smg")


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    """Normal samples redrawn until they fall within two standard deviations."""
    z = rng.standard_normal(shape)
    bad = np.abs(z) > 2.0
    while bad.any():
        z[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(z) > 2.0
    return z * std


@dataclass
class DssmgParams:
    expand_w: Tensor
    adjacency: AdjacencySet
    project_w: Tensor
    layer_scale: Tensor
    expand_b: Optional[Tensor] = None

    def __post_init__(self):
        c, c4 = self.expand_w.shape
        if c4 != 4 * c:
            raise DimensionError(f"expand_w must be [C, 4C], got {self.expand_w.shape}")
        if self.adjacency.k != 3:
            raise DimensionError(f"DS-SMG needs k=3 adjacencies, got {self.adjacency.k}")
        if self.project_w.shape != (4 * c, c):
            raise DimensionError(f"project_w must be [4C, C] = {(4 * c, c)}, got {self.project_w.shape}")
        if self.layer_scale.shape != (c,):
            raise DimensionError(f"layer_scale must be [{c}], got {self.layer_scale.shape}")

    @property
    def C(self) -> int:
        return self.expand_w.shape[0]


@dataclass
class ClassicalParams:
    w: Tensor
    adjacency: AdjacencySet
    b: Optional[Tensor] = None

    def __post_init__(self):
        if self.adjacency.k != 3:
            raise DimensionError(f"classical layer needs k=3 adjacencies, got {self.adjacency.k}")


@dataclass
class ClassicalMixer:
    """Classical layer widened to ``4C`` followed by the same projection and scale as DS-SMG."""

    layer: ClassicalParams
    project_w: Tensor
    layer_scale: Tensor


@dataclass
class MlpParams:
    expand_w: Tensor
    project_w: Tensor
    layer_scale: Tensor
    expand_b: Optional[Tensor] = None


def _channel_scale(x: Tensor, scale: Tensor) -> Tensor:
    return E.mul(x, E.reshape(scale, (1, scale.shape[0], 1, 1)))


def classical_layer(p: ClassicalParams, x: Tensor, formulation: str = "baseline") -> Tensor:
    """``gelu(A_s X W + A_i X W + A_o X W)`` with one shared ``W``."""
    if x.ndim != 4 or p.w.shape[0] != x.shape[1]:
        raise DimensionError(f"classical_layer: weight {p.w.shape} does not fit input {x.shape}")
    if p.adjacency.V != x.shape[3]:
        raise DimensionError(f"classical_layer: adjacency V={p.adjacency.V} != input joints {x.shape[3]}")
    h = E.pointwise_conv(x, p.w, p.b)
    n, co, t, v = h.shape
    # the shared W makes the three terms collapse onto the summed adjacency
    a_sum = E.tsum(p.adjacency.values, axis=2, keepdims=True)
    mixed = get_formulation(formulation)(a_sum, E.reshape(h, (n, 1, co, t, v)), layout="nkctv")
    return E.gelu(E.reshape(mixed, (n, co, t, v)))


def ds_smg_layer(p: DssmgParams, x: Tensor, static_branch: bool = True, formulation: str = "baseline") -> Tensor:
    if x.ndim != 4 or x.shape[1] != p.C:
        raise DimensionError(f"ds_smg_layer: input channel axis 1 ({x.shape[1] if x.ndim > 1 else None}) != C={p.C}")
    if p.adjacency.V != x.shape[3]:
        raise DimensionError(f"ds_smg_layer: adjacency V={p.adjacency.V} != input joints {x.shape[3]}")
    n, c, t, v = x.shape
    f = E.gelu(E.pointwise_conv(x, p.expand_w, p.expand_b))
    groups = E.reshape(f, (n, 4, c, t, v))
    dynamic, static = E.split(groups, [3, 1], axis=1)
    mixed = get_formulation(formulation)(p.adjacency, dynamic, layout="nkctv")
    if not static_branch:
        static = Tensor.zeros((n, 1, c, t, v))
    z = E.reshape(E.concat([mixed, static], axis=1), (n, 4 * c, t, v))
    return _channel_scale(E.pointwise_conv(z, p.project_w), p.layer_scale)


def mlp_layer(p: MlpParams, x: Tensor) -> Tensor:
    """Channel MLP with no spatial mixing."""
    h = E.gelu(E.pointwise_conv(x, p.expand_w, p.expand_b))
    return _channel_scale(E.pointwise_conv(h, p.project_w), p.layer_scale)


def classical_mixer(p: ClassicalMixer, x: Tensor, formulation: str = "baseline") -> Tensor:
    z = classical_layer(p.layer, x, formulation)
    return _channel_scale(E.pointwise_conv(z, p.project_w), p.layer_scale)


def apply_mixer(mechanism: str, params, x: Tensor, formulation: str = "baseline") -> Tensor:
    if mechanism == "ds-smg":
        return ds_smg_layer(params, x, True, formulation)
    if mechanism == "smg":
        return ds_smg_layer(params, x, False, formulation)
    if mechanism == "classical":
        return classical_mixer(params, x, formulation)
    if mechanism == "none":
        return mlp_layer(params, x)
    raise InputError(f"unknown mechanism {mechanism!r}; expected one of {MECHANISMS}")


def init_mixer(mechanism: str, C: int, adjacency: Optional[AdjacencySet], rng: np.random.Generator,
               std: float = 0.02, layer_scale: float = 1e-6):
    """Fresh parameters for one block's mixer."""

    def w(*shape):
        return Tensor(trunc_normal(rng, shape, std), requires_grad=True)

    def const(value, n):
        return Tensor(np.full(n, value), requires_grad=True)

    if mechanism in ("ds-smg", "smg"):
        return DssmgParams(w(C, 4 * C), adjacency, w(4 * C, C), const(layer_scale, C), const(0.0, 4 * C))
    if mechanism == "classical":
        return ClassicalMixer(ClassicalParams(w(C, 4 * C), adjacency, const(0.0, 4 * C)),
                              w(4 * C, C), const(layer_scale, C))
    if mechanism == "none":
        return MlpParams(w(C, 4 * C), w(4 * C, C), const(layer_scale, C), const(0.0, 4 * C))
    raise InputError(f"unknown mechanism {mechanism!r}; expected one of {MECHANISMS}")


# -- node information retention --------------------------------------------------


@dataclass
class RetentionResult:
    node: int
    sensitivity: float
    threshold: float = field(default=1e-8)

    @property
    def retained(self) -> bool:
        return self.sensitivity > self.threshold


def generic_dssmg_params(C: int, V: int, rng: np.random.Generator) -> DssmgParams:
    """Random DS-SMG parameters with no special structure (O(1) scales, dense adjacency)."""
    return DssmgParams(
        Tensor(rng.standard_normal((C, 4 * C))),
        AdjacencySet(Tensor(rng.standard_normal((V, V, 3)))),
        Tensor(rng.standard_normal((4 * C, C))),
        Tensor(rng.uniform(0.5, 1.5, C)),
        Tensor(rng.standard_normal(4 * C)),
    )


def generic_classical_params(C_in: int, C_out: int, V: int, rng: np.random.Generator) -> ClassicalParams:
    return ClassicalParams(
        Tensor(rng.standard_normal((C_in, C_out))),
        AdjacencySet(Tensor(rng.standard_normal((V, V, 3)))),
        Tensor(rng.standard_normal(C_out)),
    )


def _layer_fn(mechanism: str):
    if mechanism == "classical":
        return classical_layer
    if mechanism == "ds-smg":
        return lambda p, x: ds_smg_layer(p, x, True)
    if mechanism == "smg":
        return lambda p, x: ds_smg_layer(p, x, False)
    raise InputError(f"retention probe supports classical, smg and ds-smg, got {mechanism!r}")


def node_retention_probe(mechanism: str, params, v: int, x: Optional[np.ndarray] = None,
                         delta: float = 1e-3, seed: int = 0) -> RetentionResult:
    """Zero row ``v`` of every adjacency slice, nudge node ``v`` and measure the output change."""
    adjacency = params.adjacency if hasattr(params, "adjacency") else params.layer.adjacency
    V = adjacency.V
    if not 0 <= v < V:
        raise InputError(f"node {v} out of range for V={V}")
    probed = replace(params, adjacency=adjacency.with_zeroed_row(v))
    if x is None:
        C = params.w.shape[0] if isinstance(params, ClassicalParams) else params.C
        x = np.random.default_rng(seed).standard_normal((1, C, 4, V))
    bumped = x.copy()
    bumped[..., v] += delta
    fn = _layer_fn(mechanism)
    with E.no_grad():
        base = fn(probed, Tensor(x)).data
        moved = fn(probed, Tensor(bumped)).data
    return RetentionResult(v, float(np.abs(moved - base).max()))
