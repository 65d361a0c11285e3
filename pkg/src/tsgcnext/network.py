"""TSGCNeXt network: temporal stem, three block stages and a classifier head."""

from __future__ import annotations

import dataclasses
import json
import struct
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import engine as E
from .data import SkeletonGraph
from .engine import SeedStream, Tensor
from .exceptions import ConfigError, DimensionError, ParseError
from .graph import AdjacencySet
from .mechanisms import MECHANISMS, apply_mixer, init_mixer, trunc_normal

STEM_STRIDE = 4
DOWN_STRIDE = 2
DEFAULT_SCRS = ((2, 5, 2), (4, 3, 2))
CHECKPOINT_MAGIC = b"TSGC"
CHECKPOINT_VERSION = 1


def parse_scr(text) -> Tuple[int, int, int]:
    """``"2:5:2"`` -> ``(2, 5, 2)``."""
    if isinstance(text, str):
        parts = text.replace(",", ":").split(":")
    else:
        parts = list(text)
    try:
        scr = tuple(int(p) for p in parts)
    except ValueError:
        raise ConfigError(f"cannot parse stage compute ratio {text!r}") from None
    if len(scr) != 3:
        raise ConfigError(f"stage compute ratio needs three stages, got {text!r}")
    return scr


@dataclass
class ModelConfig:
    scr: Tuple[int, int, int] = (2, 5, 2)
    base_channels: int = 96
    k_temporal: int = 3
    T: int = 256
    V: int = 25
    M: int = 2
    num_classes: int = 60
    drop_path_rate: float = 0.1
    dropout: float = 0.4
    mechanism: str = "ds-smg"
    in_channels: int = 3
    parents: Optional[Tuple[int, ...]] = None
    layer_scale_init: float = 1e-6
    init_std: float = 0.02
    ln_eps: float = 1e-6

    def __post_init__(self):
        self.scr = parse_scr(self.scr)
        if self.parents is not None:
            self.parents = tuple(int(p) for p in self.parents)

    def violations(self) -> List[str]:
        out = []
        if any(b < 1 for b in self.scr):
            out.append(f"every stage needs >= 1 block, got scr={self.scr}")
        if self.base_channels < 1:
            out.append(f"base_channels must be >= 1, got {self.base_channels}")
        if self.k_temporal < 1 or self.k_temporal % 2 == 0:
            out.append(f"k_temporal must be odd and >= 1, got {self.k_temporal}")
        if self.T < 16 or self.T % 16:
            out.append(f"T must be a positive multiple of 16 (stem /4, two /2 downsamples), got {self.T}")
        if self.V < 1 or self.M < 1:
            out.append(f"V and M must be >= 1, got V={self.V}, M={self.M}")
        if self.num_classes < 2:
            out.append(f"num_classes must be >= 2, got {self.num_classes}")
        if not 0.0 <= self.drop_path_rate < 1.0:
            out.append(f"drop_path_rate must lie in [0, 1), got {self.drop_path_rate}")
        if not 0.0 <= self.dropout < 1.0:
            out.append(f"dropout must lie in [0, 1), got {self.dropout}")
        if self.mechanism not in MECHANISMS:
            out.append(f"mechanism must be one of {MECHANISMS}, got {self.mechanism!r}")
        if self.parents is not None and len(self.parents) != self.V:
            out.append(f"parents lists {len(self.parents)} joints but V={self.V}")
        return out

    def validate(self) -> "ModelConfig":
        problems = self.violations()
        if problems:
            raise ConfigError(problems)
        return self

    def graph(self) -> SkeletonGraph:
        if self.parents is not None:
            return SkeletonGraph(self.parents)
        return SkeletonGraph.default_for(self.V)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["scr"] = list(self.scr)
        d["parents"] = list(self.parents) if self.parents is not None else None
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - names)
        if unknown:
            raise ConfigError([f"unknown model option {k!r}" for k in unknown])
        return cls(**d)


def stage_schedule(cfg: ModelConfig) -> List[Tuple[int, int]]:
    """``(channels, frames)`` for each of the three stages."""
    t = cfg.T // STEM_STRIDE
    c = cfg.base_channels
    return [(c, t), (2 * c, t // 2), (4 * c, t // 4)]


# -- parameter containers ---------------------------------------------------------


@dataclass
class StemParams:
    w: Tensor  # [3, 4, C]
    b: Tensor
    ln_g: Tensor
    ln_b: Tensor


@dataclass
class DownParams:
    ln_g: Tensor
    ln_b: Tensor
    w: Tensor  # [C, 2, 2C]
    b: Tensor


@dataclass
class BlockParams:
    dw_w: Tensor  # [C, k]
    dw_b: Tensor
    ln_g: Tensor
    ln_b: Tensor
    mixer: object
    drop_path: float = field(default=0.0, metadata={"static": True})
    index: int = field(default=0, metadata={"static": True})


@dataclass
class HeadParams:
    ln_g: Tensor
    ln_b: Tensor
    w: Tensor
    b: Tensor


@dataclass
class ModelParams:
    stem: StemParams
    stages: List[List[BlockParams]]
    downs: List[DownParams]
    head: HeadParams


# -- functional layers ------------------------------------------------------------


def temporal_stem(x: Tensor, p: StemParams, eps: float = 1e-6) -> Tensor:
    """Non-overlapping 4x1 patchify convolution over time, then channel layer-norm."""
    if x.ndim != 4 or x.shape[2] % STEM_STRIDE:
        raise DimensionError(f"temporal_stem: T={x.shape[2] if x.ndim == 4 else x.shape} is not divisible by {STEM_STRIDE}")
    return E.layer_norm_channel(E.temporal_patch_conv(x, p.w, p.b), p.ln_g, p.ln_b, eps)


def temporal_downsample(x: Tensor, p: DownParams, eps: float = 1e-6) -> Tensor:
    """Channel layer-norm, then a 2x1 stride-2 convolution doubling the channels."""
    if x.ndim != 4 or x.shape[2] % DOWN_STRIDE:
        raise DimensionError(f"temporal_downsample: T={x.shape[2] if x.ndim == 4 else x.shape} is odd")
    return E.temporal_patch_conv(E.layer_norm_channel(x, p.ln_g, p.ln_b, eps), p.w, p.b)


def tsgcnext_block(x: Tensor, p: BlockParams, mechanism: str, training: bool = False,
                   rng: Optional[np.random.Generator] = None, formulation: str = "baseline",
                   eps: float = 1e-6) -> Tensor:
    """Residual block: temporal depthwise conv -> LN -> spatial mixer -> drop-path."""
    if x.ndim != 4 or x.shape[1] != p.dw_w.shape[0]:
        raise DimensionError(f"tsgcnext_block: input {x.shape} does not match {p.dw_w.shape[0]} channels")
    c = x.shape[1]
    h = E.depthwise_temporal_conv(x, p.dw_w, stride=1, pad="same")
    h = E.add(h, E.reshape(p.dw_b, (1, c, 1, 1)))
    h = E.layer_norm_channel(h, p.ln_g, p.ln_b, eps)
    h = apply_mixer(mechanism, p.mixer, h, formulation)
    return E.add(x, E.drop_path(h, p.drop_path, training, rng))


# -- model --------------------------------------------------------------------------


class TSGCNeXt:
    """Full network built from a :class:`ModelConfig`."""

    def __init__(self, cfg: ModelConfig, params: ModelParams):
        self.cfg = cfg
        self.params = params

    @property
    def blocks(self) -> List[BlockParams]:
        return [b for stage in self.params.stages for b in stage]

    def named_parameters(self) -> List[Tuple[str, Tensor]]:
        return list(E.parameters_of(self.params))

    def parameters(self) -> List[Tensor]:
        return [t for _, t in self.named_parameters()]

    def param_count(self) -> int:
        return int(sum(t.size for t in self.parameters()))

    def zero_grad(self) -> None:
        for t in self.parameters():
            t.grad = None

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self.named_parameters()}

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = sorted(set(own) - set(state))
        extra = sorted(set(state) - set(own))
        if missing or extra:
            raise DimensionError(f"state mismatch: missing={missing[:5]} unexpected={extra[:5]}")
        for name, t in own.items():
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != t.shape:
                raise DimensionError(f"parameter {name}: checkpoint shape {arr.shape} != model shape {t.shape}")
            t.data = arr.copy()

    def copy(self) -> "TSGCNeXt":
        clone = build_model(self.cfg, seed=0)
        clone.load_state_dict(self.state_dict())
        return clone

    def forward(self, batch, training: bool = False, step: int = 0, seeds: Optional[SeedStream] = None,
                formulation: str = "baseline", trace: Optional[list] = None) -> Tensor:
        """``batch[N, 3, M, T, V] -> logits[N, num_classes]``.

        Persons are folded into the batch axis for the backbone and averaged
        after global pooling. ``training`` enables dropout and drop-path; their
        masks come from ``seeds`` keyed by ``step``.
        """
        cfg = self.cfg
        data = batch.data if isinstance(batch, Tensor) else np.asarray(batch, dtype=np.float64)
        expect = (cfg.in_channels, cfg.M, cfg.T, cfg.V)
        if data.ndim != 5 or data.shape[1:] != expect:
            raise DimensionError(f"forward: batch must be [N, {', '.join(map(str, expect))}], got {data.shape}")
        if training and seeds is None:
            seeds = SeedStream(0)
        n = data.shape[0]
        folded = np.ascontiguousarray(data.transpose(0, 2, 1, 3, 4)).reshape(n * cfg.M, cfg.in_channels, cfg.T, cfg.V)
        x = Tensor._wrap(folded)
        p = self.params
        eps = cfg.ln_eps

        def note(tag, t):
            if trace is not None:
                trace.append((tag, t.shape))

        x = temporal_stem(x, p.stem, eps)
        note("stem", x)
        for s, stage in enumerate(p.stages):
            if s > 0:
                x = temporal_downsample(x, p.downs[s - 1], eps)
                note(f"down{s}", x)
            for blk in stage:
                rng = seeds.generator("drop_path", blk.index, step) if training else None
                x = tsgcnext_block(x, blk, cfg.mechanism, training, rng, formulation, eps)
            note(f"stage{s}", x)
        h = p.head
        x = E.layer_norm_channel(x, h.ln_g, h.ln_b, eps)
        x = E.mean_pool_tv(x)
        x = E.mean_persons(x, cfg.M)
        rng = seeds.generator("dropout", step) if training else None
        x = E.dropout(x, cfg.dropout, training, rng)
        logits = E.linear(x, h.w, h.b)
        note("logits", logits)
        return logits

    __call__ = forward


def _drop_path_rates(cfg: ModelConfig) -> List[float]:
    total = sum(cfg.scr)
    if total == 1:
        return [0.0]
    return [float(r) for r in np.linspace(0.0, cfg.drop_path_rate, total)]


def build_model(cfg: ModelConfig, seed: int = 0) -> TSGCNeXt:
    cfg.validate()
    rng = SeedStream(seed).generator("init")
    graph = cfg.graph()
    std = cfg.init_std

    def w(*shape):
        return Tensor(trunc_normal(rng, shape, std), requires_grad=True)

    def ones(n):
        return Tensor(np.ones(n), requires_grad=True)

    def zeros(n):
        return Tensor(np.zeros(n), requires_grad=True)

    c0 = cfg.base_channels
    stem = StemParams(w(cfg.in_channels, STEM_STRIDE, c0), zeros(c0), ones(c0), zeros(c0))
    rates = _drop_path_rates(cfg)
    stages, downs, idx = [], [], 0
    for s, (c, _) in enumerate(stage_schedule(cfg)):
        if s > 0:
            downs.append(DownParams(ones(c // 2), zeros(c // 2), w(c // 2, DOWN_STRIDE, c), zeros(c)))
        blocks = []
        for _ in range(cfg.scr[s]):
            adj = AdjacencySet.from_graph(graph) if cfg.mechanism != "none" else None
            mixer = init_mixer(cfg.mechanism, c, adj, rng, std, cfg.layer_scale_init)
            blocks.append(BlockParams(w(c, cfg.k_temporal), zeros(c), ones(c), zeros(c), mixer, rates[idx], idx))
            idx += 1
        stages.append(blocks)
    c_last = 4 * c0
    head = HeadParams(ones(c_last), zeros(c_last), w(c_last, cfg.num_classes), zeros(cfg.num_classes))
    return TSGCNeXt(cfg, ModelParams(stem, stages, downs, head))


# -- checkpoints --------------------------------------------------------------------
#
# b"TSGC" | u32 version | u32 header_len | header JSON (utf-8) | u32 n_tensors |
# n_tensors x ( u16 name_len | name | u8 ndim | u32[ndim] dims | f64[prod(dims)] )
# all little-endian; the header holds {"config": ..., "meta": ...}.


def save_checkpoint(path, model: TSGCNeXt, meta: Optional[dict] = None) -> None:
    header = json.dumps({"config": model.cfg.to_dict(), "meta": meta or {}}, sort_keys=True).encode()
    named = model.named_parameters()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(header)))
        fh.write(header)
        fh.write(struct.pack("<I", len(named)))
        for name, t in named:
            raw = name.encode()
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<B", t.ndim))
            fh.write(struct.pack(f"<{t.ndim}I", *t.shape))
            fh.write(np.ascontiguousarray(t.data, dtype="<f8").tobytes())


def read_checkpoint(path) -> Tuple[dict, Dict[str, np.ndarray]]:
    """Return ``(header, tensors)`` without building a model."""
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:4] != CHECKPOINT_MAGIC:
        raise ParseError("not a TSGC checkpoint", 0)
    if len(buf) < 12:
        raise ParseError("truncated checkpoint header", len(buf))
    version, hlen = struct.unpack_from("<II", buf, 4)
    if version != CHECKPOINT_VERSION:
        raise ParseError(f"unsupported checkpoint version {version}", 4)
    off = 12
    if off + hlen + 4 > len(buf):
        raise ParseError("truncated checkpoint header", off)
    header = json.loads(buf[off:off + hlen].decode())
    off += hlen
    (count,) = struct.unpack_from("<I", buf, off)
    off += 4
    tensors = {}
    for _ in range(count):
        try:
            (nlen,) = struct.unpack_from("<H", buf, off)
            off += 2
            name = buf[off:off + nlen].decode()
            off += nlen
            (ndim,) = struct.unpack_from("<B", buf, off)
            off += 1
            dims = struct.unpack_from(f"<{ndim}I", buf, off)
            off += 4 * ndim
        except struct.error:
            raise ParseError("truncated tensor record", off) from None
        size = int(np.prod(dims)) if ndim else 1
        if off + 8 * size > len(buf):
            raise ParseError(f"tensor {name!r} overruns the file", off)
        tensors[name] = np.frombuffer(buf, dtype="<f8", count=size, offset=off).reshape(dims).astype(np.float64)
        off += 8 * size
    return header, tensors


def load_checkpoint(path) -> Tuple[TSGCNeXt, dict]:
    header, tensors = read_checkpoint(path)
    cfg = ModelConfig.from_dict(header["config"])
    model = build_model(cfg, seed=0)
    model.load_state_dict(tensors)
    return model, header.get("meta", {})


def decays(name: str) -> bool:
    """Whether weight decay applies to a parameter (weights only)."""
    leaf = name.rsplit(".", 1)[-1]
    if "adjacency" in name:
        return False
    return leaf in ("w", "dw_w", "expand_w", "project_w")
