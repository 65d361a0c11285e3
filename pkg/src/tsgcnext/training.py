"""Optimisation, schedule, EMA, evaluation and multi-stream score fusion.

Defaults mirror the published recipe: AdamW at a peak rate of ``4e-3`` with
decoupled weight decay ``0.05``, 20 warm-up epochs followed by cosine decay to
zero at epoch 300, label smoothing ``0.1`` and a parameter EMA with decay
``0.9999`` updated after every optimiser step.
"""

from __future__ import annotations

import csv
import math
import os
import re
from dataclasses import asdict, dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import yaml

from . import engine as E
from .data import SkeletonSequence, StreamKind, to_arrays
from .exceptions import ConfigError, DivergenceError, InputError, UsageError
from .network import TSGCNeXt, decays, parse_scr


@dataclass
class TrainConfig:
    lr_peak: float = 4e-3
    weight_decay: float = 0.05
    betas: Tuple[float, float] = (0.9, 0.999)
    epochs: int = 300
    warmup_epochs: int = 20
    label_smoothing: float = 0.1
    ema_decay: float = 0.9999
    batch_size: int = 128
    seed: int = 0
    adam_eps: float = 1e-8
    # evaluate the EMA weights alongside the raw ones on each eval pass
    eval_ema: bool = True
    # stop once eval-mode training accuracy reaches this value (None: run all epochs)
    stop_at_train_accuracy: Optional[float] = None
    formulation: str = "repeated"

    def __post_init__(self):
        self.betas = tuple(float(b) for b in self.betas)

    def violations(self) -> List[str]:
        out = []
        if self.epochs < 1:
            out.append(f"epochs must be >= 1, got {self.epochs}")
        if not 0 <= self.warmup_epochs < self.epochs:
            out.append(f"warmup_epochs must lie in [0, epochs), got {self.warmup_epochs} with epochs={self.epochs}")
        if self.lr_peak < 0:
            out.append(f"lr_peak must be >= 0, got {self.lr_peak}")
        if self.weight_decay < 0:
            out.append(f"weight_decay must be >= 0, got {self.weight_decay}")
        if len(self.betas) != 2 or not all(0 <= b < 1 for b in self.betas):
            out.append(f"betas must be two values in [0, 1), got {self.betas}")
        if not 0 <= self.label_smoothing < 1:
            out.append(f"label_smoothing must lie in [0, 1), got {self.label_smoothing}")
        if not 0 <= self.ema_decay <= 1:
            out.append(f"ema_decay must lie in [0, 1], got {self.ema_decay}")
        if self.batch_size < 1:
            out.append(f"batch_size must be >= 1, got {self.batch_size}")
        if self.formulation not in ("baseline", "repeated"):
            out.append(f"formulation must be 'baseline' or 'repeated', got {self.formulation!r}")
        if self.stop_at_train_accuracy is not None and not 0 < self.stop_at_train_accuracy <= 1:
            out.append(f"stop_at_train_accuracy must lie in (0, 1], got {self.stop_at_train_accuracy}")
        return out

    def validate(self) -> "TrainConfig":
        bad = self.violations()
        if bad:
            raise ConfigError(bad)
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = set(cls.__dataclass_fields__)
        extra = sorted(set(d) - known)
        if extra:
            raise ConfigError([f"unknown training field {k!r}" for k in extra])
        return cls(**d)


# -- schedule ----------------------------------------------------------------------


def lr_at(epoch: float, cfg: TrainConfig) -> float:
    """Linear warm-up from 0 to ``lr_peak``, then cosine decay to 0 at ``cfg.epochs``."""
    if not 0 <= epoch <= cfg.epochs:
        raise UsageError(f"epoch {epoch} outside the schedule [0, {cfg.epochs}]")
    w = cfg.warmup_epochs
    if epoch < w:
        return cfg.lr_peak * epoch / w
    span = cfg.epochs - w
    return cfg.lr_peak * 0.5 * (1.0 + math.cos(math.pi * (epoch - w) / span))


# -- optimiser ---------------------------------------------------------------------


@dataclass
class AdamWState:
    m: List[np.ndarray]
    v: List[np.ndarray]
    decay_mask: List[bool]
    t: int = 0

    @classmethod
    def for_params(cls, params: Sequence[E.Tensor], decay_mask: Optional[Sequence[bool]] = None) -> "AdamWState":
        if decay_mask is None:
            decay_mask = [True] * len(params)
        if len(decay_mask) != len(params):
            raise UsageError(f"decay mask has {len(decay_mask)} entries for {len(params)} parameters")
        return cls([np.zeros(p.shape) for p in params], [np.zeros(p.shape) for p in params], list(decay_mask))

    @classmethod
    def for_model(cls, model: TSGCNeXt) -> "AdamWState":
        named = model.named_parameters()
        return cls.for_params([t for _, t in named], [decays(n) for n, _ in named])


def adamw_step(params: Sequence[E.Tensor], grads: Sequence[Optional[np.ndarray]], state: AdamWState,
               lr: float, cfg: TrainConfig) -> None:
    """One AdamW update with bias correction and decoupled weight decay, in place.

    A ``None`` gradient counts as zero.
    """
    if lr < 0:
        raise UsageError(f"learning rate must be >= 0, got {lr}")
    if not len(params) == len(grads) == len(state.m):
        raise UsageError(f"{len(params)} parameters, {len(grads)} gradients, {len(state.m)} moment slots")
    b1, b2 = cfg.betas
    state.t += 1
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            g = np.zeros(p.shape)
        elif g.shape != p.shape:
            raise UsageError(f"gradient {i} has shape {g.shape}, parameter has {p.shape}")
        m, v = state.m[i], state.v[i]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        if state.decay_mask[i] and cfg.weight_decay:
            p.data *= 1.0 - lr * cfg.weight_decay
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + cfg.adam_eps)


# -- EMA ---------------------------------------------------------------------------


@dataclass
class EmaState:
    shadow: Dict[str, np.ndarray]
    decay: float = 0.9999

    @classmethod
    def from_model(cls, model: TSGCNeXt, decay: float = 0.9999) -> "EmaState":
        return cls(model.state_dict(), decay)

    def model(self, like: TSGCNeXt) -> TSGCNeXt:
        """A detached model carrying the shadow weights."""
        clone = like.copy()
        clone.load_state_dict(self.shadow)
        return clone


def ema_update(ema: EmaState, model: TSGCNeXt) -> None:
    """``shadow <- decay * shadow + (1 - decay) * param`` for every parameter."""
    d = ema.decay
    for name, t in model.named_parameters():
        s = ema.shadow.get(name)
        if s is None or s.shape != t.shape:
            raise UsageError(f"EMA shadow for {name} is {None if s is None else s.shape}, parameter is {t.shape}")
        s *= d
        s += (1.0 - d) * t.data


# -- evaluation --------------------------------------------------------------------


@dataclass
class EvalResult:
    accuracy: float
    per_class: Dict[int, float]
    counts: Dict[int, int]
    loss: float = float("nan")


def _as_xy(dataset) -> Tuple[np.ndarray, np.ndarray]:
    if isinstance(dataset, tuple) and len(dataset) == 2:
        X, y = dataset
        return np.asarray(X, dtype=np.float64), np.asarray(y, dtype=np.int64)
    if isinstance(dataset, (list, tuple)) and all(isinstance(s, SkeletonSequence) for s in dataset):
        return to_arrays(dataset)
    raise InputError("dataset must be an (X, y) pair or a list of SkeletonSequence")


def predict_logits(model: TSGCNeXt, X: np.ndarray, batch_size: int = 128) -> np.ndarray:
    out = []
    with E.no_grad():
        for i in range(0, len(X), batch_size):
            out.append(model.forward(X[i:i + batch_size], training=False).data)
    if not out:
        return np.zeros((0, model.cfg.num_classes))
    return np.concatenate(out)


def evaluate(model: TSGCNeXt, dataset, batch_size: int = 128, label_smoothing: float = 0.0) -> EvalResult:
    """Top-1 accuracy from argmax logits, overall and per class."""
    X, y = _as_xy(dataset)
    if len(y) == 0:
        raise InputError("cannot evaluate on an empty dataset")
    logits = predict_logits(model, X, batch_size)
    return score_logits(logits, y, label_smoothing)


def score_logits(logits: np.ndarray, y: np.ndarray, label_smoothing: float = 0.0) -> EvalResult:
    pred = logits.argmax(axis=1)
    hit = pred == y
    per_class, counts = {}, {}
    for c in np.unique(y):
        mask = y == c
        counts[int(c)] = int(mask.sum())
        per_class[int(c)] = float(hit[mask].mean())
    with E.no_grad():
        loss = E.smoothed_cross_entropy(E.Tensor(logits), y, label_smoothing).item()
    return EvalResult(float(hit.mean()), per_class, counts, loss)


# -- training loop -----------------------------------------------------------------

METRIC_FIELDS = ("epoch", "split", "weights", "loss", "accuracy")


@dataclass
class MetricRow:
    epoch: int
    split: str
    weights: str
    loss: float
    accuracy: float


@dataclass
class TrainResult:
    model: TSGCNeXt
    ema: EmaState
    log: List[MetricRow] = field(default_factory=list)
    steps: int = 0
    epochs_run: int = 0

    def ema_model(self) -> TSGCNeXt:
        return self.ema.model(self.model)

    def last(self, split: str, weights: str = "raw") -> Optional[MetricRow]:
        rows = [r for r in self.log if r.split == split and r.weights == weights]
        return rows[-1] if rows else None


def write_metrics_csv(path, rows: Sequence[MetricRow]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(METRIC_FIELDS)
        for r in rows:
            w.writerow([r.epoch, r.split, r.weights, repr(float(r.loss)), repr(float(r.accuracy))])


def read_metrics_csv(path) -> List[MetricRow]:
    with open(path, newline="") as fh:
        return [MetricRow(int(r["epoch"]), r["split"], r["weights"], float(r["loss"]), float(r["accuracy"]))
                for r in csv.DictReader(fh)]


def train(model: TSGCNeXt, dataset, cfg: TrainConfig, eval_dataset=None,
          callbacks: Sequence[Callable] = (), metrics_path=None) -> TrainResult:
    """Mini-batch training with AdamW, per-step lr, label smoothing and EMA.

    Every epoch logs the running training loss and accuracy (training mode,
    so with dropout and drop-path active). With ``eval_dataset`` it also logs
    held-out loss and accuracy for the raw weights and, if ``cfg.eval_ema``,
    for the EMA weights. Each callback is called as ``cb(epoch, result)``
    after the epoch; a truthy return stops training.

    Raises
    ------
    DivergenceError
        If the loss becomes non-finite.
    """
    cfg.validate()
    X, y = _as_xy(dataset)
    if len(y) == 0:
        raise InputError("training dataset is empty")
    if y.max() >= model.cfg.num_classes:
        raise InputError(f"label {int(y.max())} out of range for {model.cfg.num_classes} classes")
    ev = _as_xy(eval_dataset) if eval_dataset is not None else None

    seeds = E.SeedStream(cfg.seed)
    named = model.named_parameters()
    params = [t for _, t in named]
    opt = AdamWState.for_params(params, [decays(n) for n, _ in named])
    ema = EmaState.from_model(model, cfg.ema_decay)
    result = TrainResult(model, ema)
    n = len(y)
    steps_per_epoch = math.ceil(n / cfg.batch_size)

    for epoch in range(cfg.epochs):
        order = seeds.generator("shuffle", epoch).permutation(n)
        loss_sum, hits = 0.0, 0
        for b in range(steps_per_epoch):
            idx = order[b * cfg.batch_size:(b + 1) * cfg.batch_size]
            frac = epoch + b / steps_per_epoch
            lr = lr_at(frac, cfg)
            model.zero_grad()
            logits = model.forward(X[idx], training=True, step=result.steps, seeds=seeds,
                                   formulation=cfg.formulation)
            loss = E.smoothed_cross_entropy(logits, y[idx], cfg.label_smoothing)
            value = loss.item()
            if not math.isfinite(value):
                raise DivergenceError(
                    f"non-finite loss {value} at epoch {epoch}, step {result.steps}, lr {lr:.3e}")
            E.backward(loss)
            adamw_step(params, [p.grad for p in params], opt, lr, cfg)
            ema_update(ema, model)
            result.steps += 1
            loss_sum += value * len(idx)
            hits += int((logits.data.argmax(axis=1) == y[idx]).sum())
        model.zero_grad()
        result.epochs_run = epoch + 1
        train_acc = hits / n
        result.log.append(MetricRow(epoch, "train", "raw", loss_sum / n, train_acc))

        if ev is not None:
            r = evaluate(model, ev, cfg.batch_size, cfg.label_smoothing)
            result.log.append(MetricRow(epoch, "eval", "raw", r.loss, r.accuracy))
            if cfg.eval_ema:
                r = evaluate(ema.model(model), ev, cfg.batch_size, cfg.label_smoothing)
                result.log.append(MetricRow(epoch, "eval", "ema", r.loss, r.accuracy))

        stop = False
        target = cfg.stop_at_train_accuracy
        if target is not None and train_acc >= target:
            # the running figure includes dropout noise; confirm in eval mode
            r = evaluate(model, (X, y), cfg.batch_size, cfg.label_smoothing)
            result.log.append(MetricRow(epoch, "train_eval", "raw", r.loss, r.accuracy))
            stop = r.accuracy >= target
        for cb in callbacks:
            stop = bool(cb(epoch, result)) or stop
        if stop:
            break

    if metrics_path is not None:
        write_metrics_csv(metrics_path, result.log)
    return result


# -- multi-stream fusion -----------------------------------------------------------


@dataclass
class FusionEntry:
    stream: StreamKind
    scr: Tuple[int, int, int]
    use_ema: bool
    weight: float
    checkpoint: Optional[str] = None

    def __post_init__(self):
        self.stream = StreamKind(self.stream)
        self.scr = parse_scr(self.scr)
        self.weight = float(self.weight)
        if not self.weight > 0:
            raise ConfigError([f"fusion weight must be > 0, got {self.weight}"])


@dataclass
class FusionSpec:
    entries: List[FusionEntry]
    name: str = ""

    def __post_init__(self):
        if not self.entries:
            raise ConfigError(["fusion spec needs at least one entry"])

    @property
    def weights(self) -> np.ndarray:
        return np.array([e.weight for e in self.entries])

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "entries": [
                {"stream": e.stream.value, "scr": ":".join(map(str, e.scr)), "ema": e.use_ema,
                 "weight": e.weight, "checkpoint": e.checkpoint}
                for e in self.entries
            ],
        }

    @classmethod
    def from_dict(cls, d: dict, base_dir: Optional[str] = None) -> "FusionSpec":
        if not isinstance(d, dict) or not isinstance(d.get("entries"), list):
            raise ConfigError(["fusion spec must be a mapping with an 'entries' list"])
        entries = []
        for i, e in enumerate(d["entries"]):
            if not isinstance(e, dict):
                raise ConfigError([f"fusion entry {i} must be a mapping"])
            missing = [k for k in ("stream", "scr", "weight") if k not in e]
            if missing:
                raise ConfigError([f"fusion entry {i} lacks {', '.join(missing)}"])
            ckpt = e.get("checkpoint")
            if ckpt is not None and base_dir is not None and not os.path.isabs(ckpt):
                ckpt = os.path.join(base_dir, ckpt)
            try:
                entries.append(FusionEntry(e["stream"], e["scr"], bool(e.get("ema", True)), e["weight"], ckpt))
            except ValueError as exc:
                raise ConfigError([f"fusion entry {i}: {exc}"]) from exc
        return cls(entries, str(d.get("name", "")))

    @classmethod
    def from_yaml(cls, path) -> "FusionSpec":
        with open(path) as fh:
            d = load_yaml(fh)
        return cls.from_dict(d or {}, os.path.dirname(os.path.abspath(str(path))))


class _Loader(yaml.SafeLoader):
    """Safe loader without YAML 1.1 base-60 integers, so ``scr: 2:5:2`` stays a string."""


_Loader.yaml_implicit_resolvers = {
    ch: [(tag, rx) for tag, rx in rs if tag != "tag:yaml.org,2002:int"]
    for ch, rs in yaml.SafeLoader.yaml_implicit_resolvers.items()
}
_Loader.add_implicit_resolver(
    "tag:yaml.org,2002:int",
    re.compile(r"""^(?:[-+]?0b[0-1_]+|[-+]?0[0-7_]+|[-+]?(?:0|[1-9][0-9_]*)|[-+]?0x[0-9a-fA-F_]+)$"""),
    list("-+0123456789"))


def load_yaml(stream):
    """``yaml.safe_load`` minus sexagesimal integers."""
    return yaml.load(stream, Loader=_Loader)


# (benchmark) -> [(scr, stream, ema, weight)] as published
FUSION_PRESETS: Dict[str, List[Tuple[str, str, bool, float]]] = {
    "ntu60-xview": [("2:5:2", "joint", True, 0.70), ("2:5:2", "bone", True, 0.40),
                    ("4:3:2", "joint", True, 1.00), ("4:3:2", "bone", True, 0.80)],
    "ntu60-xsub": [("2:5:2", "joint", True, 0.05), ("2:5:2", "bone", True, 0.85),
                   ("4:3:2", "joint", True, 1.00), ("4:3:2", "bone", True, 0.75)],
    "ntu60-hrnet2d-xview": [("2:5:2", "joint", True, 0.50), ("2:5:2", "bone", True, 0.30),
                            ("4:3:2", "joint", True, 1.00), ("4:3:2", "bone", True, 0.95)],
    "ntu60-hrnet2d-xsub": [("2:5:2", "joint", False, 0.95), ("2:5:2", "bone", True, 0.90),
                           ("4:3:2", "joint", True, 0.90), ("4:3:2", "bone", True, 1.00)],
    "ntu120-xset": [("2:5:2", "joint", True, 0.95), ("2:5:2", "bone", True, 1.00),
                    ("2:5:2", "bone", False, 0.85), ("4:3:2", "bone", True, 0.30)],
    "ntu120-xsub": [("2:5:2", "joint", True, 0.90), ("2:5:2", "bone", True, 0.70),
                    ("4:3:2", "joint", True, 0.55), ("4:3:2", "bone", True, 1.00)],
}


def fusion_preset(name: str, checkpoints: Optional[Sequence[str]] = None) -> FusionSpec:
    if name not in FUSION_PRESETS:
        raise ConfigError([f"unknown fusion preset {name!r}; known: {sorted(FUSION_PRESETS)}"])
    rows = FUSION_PRESETS[name]
    ckpts = list(checkpoints) if checkpoints is not None else [None] * len(rows)
    if len(ckpts) != len(rows):
        raise ConfigError([f"preset {name} has {len(rows)} entries, got {len(ckpts)} checkpoints"])
    return FusionSpec([FusionEntry(s, scr, ema, w, c) for (scr, s, ema, w), c in zip(rows, ckpts)], name)


def fused_scores(weights, per_stream_logits: Sequence[np.ndarray]) -> np.ndarray:
    """``sum_s weight_s * softmax(logits_s)`` as an ``[N, K]`` array."""
    if isinstance(weights, FusionSpec):
        weights = weights.weights
    weights = np.asarray(weights, dtype=np.float64)
    if len(per_stream_logits) == 0 or len(weights) != len(per_stream_logits):
        raise UsageError(f"{len(weights)} weights for {len(per_stream_logits)} streams")
    shapes = {np.shape(z) for z in per_stream_logits}
    if len(shapes) != 1 or len(next(iter(shapes))) != 2:
        raise UsageError(f"per-stream logits must share one [N, K] shape, got {sorted(shapes)}")
    total = np.zeros(next(iter(shapes)))
    for w, z in zip(weights, per_stream_logits):
        total += w * np.exp(E.log_softmax_np(np.asarray(z, dtype=np.float64)))
    return total


def fuse_scores(spec, per_stream_logits: Sequence[np.ndarray]) -> np.ndarray:
    """Fused predictions, ``argmax_k sum_s weight_s * softmax(logits_s)[:, k]``."""
    return fused_scores(spec, per_stream_logits).argmax(axis=1)
