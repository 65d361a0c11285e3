"""Skeleton sequences: graph topology, input streams, resampling and I/O.

Arrays follow the ``[3, M, T, V]`` layout per sequence (coordinate channel,
person, frame, joint); batched helpers accept any leading axes.
"""

from __future__ import annotations

import enum
import os
import struct
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .exceptions import InputError, ParseError

MAGIC = b"SKL1"

# NTU RGB+D 25-joint tree, 0-based; joint 20 (spine) is the root.
NTU25_PARENTS = (
    1, 20, 20, 2, 20, 4, 5, 6, 20, 8, 9, 10, 0, 12, 13, 14,
    0, 16, 17, 18, 20, 22, 7, 24, 11,
)


@dataclass(frozen=True)
class SkeletonGraph:
    """Joint forest given by a parent array; a root is its own parent."""

    parents: Tuple[int, ...]

    def __post_init__(self):
        parents = tuple(int(p) for p in self.parents)
        object.__setattr__(self, "parents", parents)
        v = len(parents)
        if v == 0:
            raise InputError("a skeleton needs at least one joint")
        if any(p < 0 or p >= v for p in parents):
            raise InputError(f"parent indices must lie in [0, {v})")
        for start in range(v):
            node, steps = start, 0
            while parents[node] != node:
                node = parents[node]
                steps += 1
                if steps > v:
                    raise InputError(f"parent array has a cycle through joint {start}")

    @property
    def V(self) -> int:
        return len(self.parents)

    @property
    def roots(self) -> List[int]:
        return [v for v, p in enumerate(self.parents) if p == v]

    @property
    def inward(self) -> List[Tuple[int, int]]:
        return [(v, p) for v, p in enumerate(self.parents) if p != v]

    @property
    def outward(self) -> List[Tuple[int, int]]:
        return [(p, v) for v, p in self.inward]

    @property
    def self_edges(self) -> List[Tuple[int, int]]:
        return [(v, v) for v in range(self.V)]

    @classmethod
    def chain(cls, V: int) -> "SkeletonGraph":
        return cls(tuple([0] + list(range(V - 1))))

    @classmethod
    def ntu25(cls) -> "SkeletonGraph":
        return cls(NTU25_PARENTS)

    @classmethod
    def default_for(cls, V: int) -> "SkeletonGraph":
        return cls.ntu25() if V == 25 else cls.chain(V)


class StreamKind(str, enum.Enum):
    JOINT = "joint"
    BONE = "bone"
    JOINT_MOTION = "joint_motion"
    BONE_MOTION = "bone_motion"


@dataclass
class SkeletonSequence:
    coords: np.ndarray
    label: int
    meta: str = field(default="")

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=np.float64)
        if self.coords.ndim != 4 or self.coords.shape[0] != 3:
            raise InputError(f"coords must be [3, M, T, V], got {self.coords.shape}")
        if self.coords.shape[2] < 2:
            raise InputError(f"a sequence needs at least 2 frames, got {self.coords.shape[2]}")
        if not np.all(np.isfinite(self.coords)):
            raise InputError("coords contain non-finite values")
        if int(self.label) < 0:
            raise InputError(f"label must be non-negative, got {self.label}")
        self.label = int(self.label)

    @property
    def M(self) -> int:
        return self.coords.shape[1]

    @property
    def T(self) -> int:
        return self.coords.shape[2]

    @property
    def V(self) -> int:
        return self.coords.shape[3]

    def replace(self, coords: np.ndarray) -> "SkeletonSequence":
        return SkeletonSequence(coords, self.label, self.meta)


# -- array-level stream operators -----------------------------------------------


def bone_array(x: np.ndarray, parents: Sequence[int]) -> np.ndarray:
    if x.shape[-1] != len(parents):
        raise InputError(f"skeleton has {len(parents)} joints but data has V={x.shape[-1]}")
    return x - x[..., list(parents)]


def motion_array(x: np.ndarray) -> np.ndarray:
    if x.shape[-2] < 2:
        raise InputError(f"motion needs at least 2 frames, got {x.shape[-2]}")
    out = np.zeros_like(x)
    out[..., :-1, :] = x[..., 1:, :] - x[..., :-1, :]
    return out


def stream_array(x: np.ndarray, kind, parents: Sequence[int]) -> np.ndarray:
    kind = StreamKind(kind)
    if kind is StreamKind.JOINT:
        return np.array(x, dtype=np.float64)
    if kind is StreamKind.BONE:
        return bone_array(x, parents)
    if kind is StreamKind.JOINT_MOTION:
        return motion_array(x)
    return motion_array(bone_array(x, parents))


def resample_array(x: np.ndarray, T: int) -> np.ndarray:
    """Linear interpolation along the frame axis (``-2``) onto ``T`` points."""
    if T < 2:
        raise InputError(f"target length must be >= 2, got {T}")
    t_raw = x.shape[-2]
    if t_raw == T:
        return np.array(x, dtype=np.float64)
    pos = np.arange(T) * ((t_raw - 1) / (T - 1))
    lo = np.minimum(np.floor(pos).astype(np.int64), t_raw - 2)
    frac = (pos - lo)[:, None]
    return x[..., lo, :] * (1.0 - frac) + x[..., lo + 1, :] * frac


# -- sequence-level operations ----------------------------------------------------


def derive_bone(seq: SkeletonSequence, graph: SkeletonGraph) -> SkeletonSequence:
    return seq.replace(bone_array(seq.coords, graph.parents))


def derive_motion(seq: SkeletonSequence) -> SkeletonSequence:
    return seq.replace(motion_array(seq.coords))


def derive_stream(seq: SkeletonSequence, kind, graph: SkeletonGraph) -> SkeletonSequence:
    return seq.replace(stream_array(seq.coords, kind, graph.parents))


def resample_to(seq: SkeletonSequence, T: int) -> SkeletonSequence:
    return seq.replace(resample_array(seq.coords, T))


def normalize(seq: SkeletonSequence, root_joint: int = 0, mode: str = "3d") -> SkeletonSequence:
    """Translate so the first person's root joint sits at the origin in frame 0.

    In ``"2d"`` mode the third channel is a confidence score and is left alone.
    """
    if not 0 <= root_joint < seq.V:
        raise InputError(f"root joint {root_joint} out of range for V={seq.V}")
    if mode not in ("3d", "2d"):
        raise InputError(f"mode must be '3d' or '2d', got {mode!r}")
    n = 3 if mode == "3d" else 2
    coords = seq.coords.copy()
    origin = coords[:n, 0, 0, root_joint].copy()
    coords[:n] -= origin[:, None, None, None]
    return seq.replace(coords)


def mean_pose(X: np.ndarray) -> np.ndarray:
    """Per-coordinate, per-joint mean ``[3, V]`` of a batch ``X[n, 3, M, T, V]``.

    Fitted on training data and subtracted from every batch by
    :func:`center_pose`. Without it the static pose (bone offsets along the
    body) dwarfs the motion after the stem's channel layer-norm, and training
    stalls at chance for many epochs.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 5 or X.shape[0] == 0:
        raise InputError(f"expected a non-empty batch [n, C, M, T, V], got shape {X.shape}")
    return X.mean(axis=(0, 2, 3))


def center_pose(X: np.ndarray, mean: np.ndarray) -> np.ndarray:
    mean = np.asarray(mean, dtype=np.float64)
    if X.ndim != 5 or mean.shape != (X.shape[1], X.shape[4]):
        raise InputError(f"mean pose {mean.shape} does not fit batch {X.shape}")
    return X - mean[None, :, None, None, :]


def to_arrays(seqs: Sequence[SkeletonSequence]) -> Tuple[np.ndarray, np.ndarray]:
    """Stack equal-shape sequences into ``X[n, 3, M, T, V]`` and ``y[n]``."""
    if not seqs:
        return np.zeros((0, 3, 1, 2, 1)), np.zeros(0, dtype=np.int64)
    shapes = {s.coords.shape for s in seqs}
    if len(shapes) != 1:
        raise InputError(f"sequences have mixed shapes {sorted(shapes)}; resample first")
    return np.stack([s.coords for s in seqs]), np.array([s.label for s in seqs], dtype=np.int64)


def from_arrays(X: np.ndarray, y: Sequence[int], meta: str = "") -> List[SkeletonSequence]:
    return [SkeletonSequence(x, int(lbl), meta) for x, lbl in zip(X, y)]


# -- synthetic data -------------------------------------------------------------


def synth_dataset(
    classes: int,
    per_class: int,
    V: int,
    T_raw: int,
    M: int = 1,
    seed: int = 0,
    noise: float = 0.1,
) -> List[SkeletonSequence]:
    """Deterministic toy actions on a chain skeleton.

    Every joint circles around its rest position. Class ``c`` sets the
    angular frequency (``2 + c // 2`` cycles per sequence) and the direction in
    which the phase travels along the chain (``+`` for even ``c``, ``-`` for odd).
    A single joint's trajectory therefore only reveals the frequency; telling
    the direction apart requires relating neighbouring joints.

    ``noise`` scales the coordinate jitter and amplitude jitter, and also the
    spread of the per-sample phase offset (the full circle once ``noise >= 0.1``).
    At ``noise = 0`` all samples of a class are identical.
    """
    if classes < 2:
        raise InputError(f"need at least 2 classes, got {classes}")
    if V < 2 or T_raw < 2 or M < 1 or per_class < 1:
        raise InputError("V, T_raw must be >= 2 and M, per_class >= 1")
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), 0x534B4C])))
    t = np.arange(T_raw) / T_raw
    v = np.arange(V)
    rest_y = v * 0.25
    step = np.pi / 3.0
    spread = 2.0 * np.pi * min(1.0, 10.0 * noise)
    out = []
    for i in range(per_class):
        for c in range(classes):
            freq = 2 + c // 2
            direction = 1.0 if c % 2 == 0 else -1.0
            coords = np.empty((3, M, T_raw, V))
            for m in range(M):
                psi = rng.uniform(0.0, spread) if spread > 0 else 0.0
                amp = 0.1 * (1.0 + noise * rng.standard_normal())
                phase = 2 * np.pi * freq * t[:, None] + direction * step * v[None, :] + psi
                coords[0, m] = amp * np.cos(phase) + 0.5 * m
                coords[1, m] = rest_y[None, :]
                coords[2, m] = amp * np.sin(phase)
            if noise > 0:
                coords += 0.1 * noise * rng.standard_normal(coords.shape)
            out.append(SkeletonSequence(coords, c, meta=f"synth:{seed}:{i}:{c}"))
    return out


# -- SKL1 binary format ---------------------------------------------------------
#
# b"SKL1" | u64 count | count x ( u32 C=3 | u32 M | u32 T | u32 V | u32 label | f64[C*M*T*V] )
# all little-endian, payload row-major.

_HDR = struct.Struct("<5I")


def save_sequences(path, seqs: Sequence[SkeletonSequence]) -> None:
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(seqs)))
        for s in seqs:
            c, m, t, v = s.coords.shape
            fh.write(_HDR.pack(c, m, t, v, s.label))
            fh.write(np.ascontiguousarray(s.coords, dtype="<f8").tobytes())


def load_sequences(path) -> List[SkeletonSequence]:
    with open(path, "rb") as fh:
        buf = fh.read()
    return parse_sequences(buf, meta=os.path.basename(str(path)))


def parse_sequences(buf: bytes, meta: str = "") -> List[SkeletonSequence]:
    if len(buf) == 0:
        return []
    if len(buf) < 12:
        raise ParseError("file too short for SKL1 header", len(buf))
    if buf[:4] != MAGIC:
        raise ParseError(f"bad magic {buf[:4]!r}", 0)
    (count,) = struct.unpack_from("<Q", buf, 4)
    off = 12
    out = []
    for i in range(count):
        if off + _HDR.size > len(buf):
            raise ParseError(f"truncated header of record {i}", off)
        c, m, t, v, label = _HDR.unpack_from(buf, off)
        if c != 3 or m == 0 or t < 2 or v == 0:
            raise ParseError(f"invalid extents (C={c}, M={m}, T={t}, V={v}) in record {i}", off)
        off += _HDR.size
        nbytes = 8 * c * m * t * v
        if off + nbytes > len(buf):
            raise ParseError(f"record {i} payload of {nbytes} bytes overruns the file", off)
        coords = np.frombuffer(buf, dtype="<f8", count=c * m * t * v, offset=off).reshape(c, m, t, v)
        try:
            out.append(SkeletonSequence(coords.astype(np.float64), label, meta))
        except InputError as exc:
            raise ParseError(f"record {i}: {exc}", off) from exc
        off += nbytes
    if off != len(buf):
        raise ParseError(f"{len(buf) - off} trailing bytes after {count} records", off)
    return out
