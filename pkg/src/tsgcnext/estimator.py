"""scikit-learn style wrappers: stream/resample/centering transformers and a classifier.

All of them take batched skeleton arrays ``X[n, 3, M, T, V]`` so they compose
in a :class:`sklearn.pipeline.Pipeline`::

    Pipeline([
        ("center", RootCenterer(root_joint=0)),
        ("stream", SkeletonStreamTransformer("bone")),
        ("resample", TemporalResampler(64)),
        ("clf", TSGCNeXtClassifier(base_channels=24, epochs=30)),
    ])
"""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from . import engine as E
from .data import SkeletonGraph, StreamKind, center_pose, mean_pose, resample_array, stream_array
from .exceptions import DimensionError, InputError
from .network import ModelConfig, build_model, load_checkpoint, parse_scr, save_checkpoint
from .training import EmaState, TrainConfig, predict_logits, train


def check_skeleton_array(X, *, min_frames: int = 2, allow_empty: bool = False) -> np.ndarray:
    """Validate a batch of skeleton sequences and return it as float64.

    Parameters
    ----------
    X : array-like of shape (n, 3, M, T, V)

    Raises
    ------
    DimensionError
        Wrong rank or coordinate extent.
    InputError
        Too few frames, no samples, or non-finite values.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 5 or X.shape[1] != 3:
        raise DimensionError(f"expected skeleton batch [n, 3, M, T, V], got shape {X.shape}")
    if X.shape[0] == 0 and not allow_empty:
        raise InputError("got an empty batch")
    if X.shape[3] < min_frames:
        raise InputError(f"need at least {min_frames} frames, got {X.shape[3]}")
    if not np.all(np.isfinite(X)):
        raise InputError("skeleton batch contains non-finite values")
    return X


class SkeletonStreamTransformer(TransformerMixin, BaseEstimator):
    """Derive the joint, bone, joint-motion or bone-motion stream.

    Parameters
    ----------
    kind : str
        One of ``joint``, ``bone``, ``joint_motion``, ``bone_motion``.
    parents : sequence of int, optional
        Parent array of the skeleton; defaults to the graph implied by ``V``.
    """

    def __init__(self, kind: str = "joint", parents: Optional[Sequence[int]] = None):
        self.kind = kind
        self.parents = parents

    def fit(self, X, y=None):
        X = check_skeleton_array(X)
        StreamKind(self.kind)
        graph = SkeletonGraph(tuple(self.parents)) if self.parents is not None else SkeletonGraph.default_for(X.shape[-1])
        if graph.V != X.shape[-1]:
            raise DimensionError(f"skeleton has {graph.V} joints but data has V={X.shape[-1]}")
        self.parents_ = graph.parents
        return self

    def transform(self, X):
        check_is_fitted(self, "parents_")
        return stream_array(check_skeleton_array(X), self.kind, self.parents_)


class TemporalResampler(TransformerMixin, BaseEstimator):
    """Linearly resample every sequence to ``T`` frames."""

    def __init__(self, T: int = 64):
        self.T = T

    def fit(self, X, y=None):
        check_skeleton_array(X)
        if int(self.T) < 2:
            raise InputError(f"target length must be >= 2, got {self.T}")
        self.n_frames_in_ = np.asarray(X).shape[3]
        return self

    def transform(self, X):
        check_is_fitted(self, "n_frames_in_")
        return resample_array(check_skeleton_array(X), int(self.T))


class RootCenterer(TransformerMixin, BaseEstimator):
    """Translate each sequence so the first person's root joint is at the origin in frame 0."""

    def __init__(self, root_joint: int = 0, mode: str = "3d"):
        self.root_joint = root_joint
        self.mode = mode

    def fit(self, X, y=None):
        X = check_skeleton_array(X)
        if not 0 <= self.root_joint < X.shape[-1]:
            raise InputError(f"root joint {self.root_joint} out of range for V={X.shape[-1]}")
        if self.mode not in ("3d", "2d"):
            raise InputError(f"mode must be '3d' or '2d', got {self.mode!r}")
        self.n_joints_ = X.shape[-1]
        return self

    def transform(self, X):
        check_is_fitted(self, "n_joints_")
        X = check_skeleton_array(X).copy()
        n = 3 if self.mode == "3d" else 2
        origin = X[:, :n, 0, 0, self.root_joint].copy()
        X[:, :n] -= origin[:, :, None, None, None]
        return X


class TSGCNeXtClassifier(ClassifierMixin, BaseEstimator):
    """Skeleton action classifier trained with the full recipe.

    ``M``, ``V`` and (unless given) ``T`` are taken from the training data.
    Labels may be arbitrary; they are encoded to ``0..K-1`` internally and
    exposed as ``classes_``. Prediction uses the EMA weights when
    ``use_ema`` is set, the raw weights otherwise. With ``mean_pose`` set the
    training set's per-joint mean pose is stored as ``pose_mean_`` and
    subtracted from every input.
    """

    def __init__(self, mechanism: str = "ds-smg", scr="2:5:2", base_channels: int = 96,
                 k_temporal: int = 3, T: Optional[int] = None, parents=None,
                 drop_path_rate: float = 0.1, dropout: float = 0.4,
                 epochs: int = 300, warmup_epochs: int = 20, lr_peak: float = 4e-3,
                 weight_decay: float = 0.05, batch_size: int = 128, label_smoothing: float = 0.1,
                 ema_decay: float = 0.9999, use_ema: bool = False,
                 stop_at_train_accuracy: Optional[float] = None, formulation: str = "repeated",
                 mean_pose: bool = True, random_state: int = 0):
        self.mechanism = mechanism
        self.scr = scr
        self.base_channels = base_channels
        self.k_temporal = k_temporal
        self.T = T
        self.parents = parents
        self.drop_path_rate = drop_path_rate
        self.dropout = dropout
        self.epochs = epochs
        self.warmup_epochs = warmup_epochs
        self.lr_peak = lr_peak
        self.weight_decay = weight_decay
        self.batch_size = batch_size
        self.label_smoothing = label_smoothing
        self.ema_decay = ema_decay
        self.use_ema = use_ema
        self.stop_at_train_accuracy = stop_at_train_accuracy
        self.formulation = formulation
        self.mean_pose = mean_pose
        self.random_state = random_state

    def _model_config(self, X: np.ndarray, n_classes: int) -> ModelConfig:
        T = X.shape[3] if self.T is None else int(self.T)
        if X.shape[3] != T:
            raise DimensionError(f"data has T={X.shape[3]} frames but T={T} was requested; resample first")
        return ModelConfig(
            scr=parse_scr(self.scr), base_channels=self.base_channels, k_temporal=self.k_temporal,
            T=T, V=X.shape[4], M=X.shape[2], num_classes=n_classes, drop_path_rate=self.drop_path_rate,
            dropout=self.dropout, mechanism=self.mechanism,
            parents=None if self.parents is None else tuple(self.parents),
        ).validate()

    def _train_config(self) -> TrainConfig:
        return TrainConfig(
            lr_peak=self.lr_peak, weight_decay=self.weight_decay, epochs=self.epochs,
            warmup_epochs=self.warmup_epochs, label_smoothing=self.label_smoothing,
            ema_decay=self.ema_decay, batch_size=self.batch_size, seed=int(self.random_state),
            eval_ema=False, stop_at_train_accuracy=self.stop_at_train_accuracy,
            formulation=self.formulation,
        ).validate()

    def fit(self, X, y, eval_set=None):
        """Train from scratch.

        Parameters
        ----------
        X : array of shape (n, 3, M, T, V)
        y : array of shape (n,)
        eval_set : (X_eval, y_eval), optional
            Held-out data scored after every epoch and recorded in ``history_``.
        """
        X = check_skeleton_array(X)
        y = np.asarray(y)
        if y.ndim != 1 or len(y) != len(X):
            raise DimensionError(f"y must be 1-D with {len(X)} labels, got shape {y.shape}")
        self.classes_, codes = np.unique(y, return_inverse=True)
        if len(self.classes_) < 2:
            raise InputError("need at least two classes to fit a classifier")
        cfg = self._model_config(X, len(self.classes_))
        tcfg = self._train_config()
        self.pose_mean_ = mean_pose(X) if self.mean_pose else None
        X = self._center(X)
        ev = None
        if eval_set is not None:
            Xe, ye = eval_set
            ev = (self._center(check_skeleton_array(Xe)), self._encode(ye))
        model = build_model(cfg, seed=int(self.random_state))
        result = train(model, (X, codes.astype(np.int64)), tcfg, ev)
        self.model_ = result.model
        self.ema_ = result.ema
        self.history_ = result.log
        self.n_epochs_ = result.epochs_run
        return self

    def _encode(self, y) -> np.ndarray:
        y = np.asarray(y)
        idx = np.searchsorted(self.classes_, y)
        idx = np.clip(idx, 0, len(self.classes_) - 1)
        if not np.all(self.classes_[idx] == y):
            raise InputError("labels contain classes unseen during fit")
        return idx.astype(np.int64)

    def _center(self, X: np.ndarray) -> np.ndarray:
        return X if self.pose_mean_ is None else center_pose(X, self.pose_mean_)

    def _active_model(self):
        check_is_fitted(self, "model_")
        return self.ema_.model(self.model_) if self.use_ema else self.model_

    def decision_function(self, X) -> np.ndarray:
        model = self._active_model()
        X = self._center(check_skeleton_array(X))
        return predict_logits(model, X, int(self.batch_size))

    def predict_proba(self, X) -> np.ndarray:
        z = self.decision_function(X)
        return np.exp(E.log_softmax_np(z))

    def predict(self, X) -> np.ndarray:
        return self.classes_[self.decision_function(X).argmax(axis=1)]

    def save(self, path) -> None:
        """Write the weights used for prediction (EMA or raw) with the fitted classes."""
        model = self._active_model()
        pose = None if self.pose_mean_ is None else self.pose_mean_.tolist()
        meta = {"classes": self.classes_.tolist(), "estimator": self.get_params(), "pose_mean": pose}
        save_checkpoint(path, model, meta=meta)

    @classmethod
    def load(cls, path) -> "TSGCNeXtClassifier":
        model, meta = load_checkpoint(path)
        params = dict(meta.get("estimator", {}))
        clf = cls(**params)
        clf.model_ = model
        clf.ema_ = EmaState.from_model(model, clf.ema_decay)
        clf.classes_ = np.asarray(meta["classes"])
        pose = meta.get("pose_mean")
        clf.pose_mean_ = None if pose is None else np.asarray(pose)
        clf.history_ = []
        clf.n_epochs_ = 0
        return clf
