"""scikit-learn compatible estimators around the network and preprocessing."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .data import STEP, WINDOW, split_groups, window_array, znormalize_array
from .model import (
    DEFAULT_CLASSES,
    ModelConfig,
    forward,
    load_checkpoint,
    save_checkpoint,
)
from .ndcore import LayerMode, ShapeError
from .training import TrainSchedule, train


def check_windows(X, window: int | None = None, channels: int | None = None) -> np.ndarray:
    """Validate an ``(N, T, C)`` batch of windows."""
    X = check_array(X, allow_nd=True, dtype=np.float64, ensure_min_samples=1)
    if X.ndim != 3:
        raise ShapeError(f"expected windows shaped (N, T, C), got {X.shape}")
    if window is not None and X.shape[1] != window:
        raise ShapeError(f"windows have {X.shape[1]} time steps, model expects {window}")
    if channels is not None and X.shape[2] != channels:
        raise ShapeError(f"windows have {X.shape[2]} channels, model expects {channels}")
    return X


def check_dual_labels(y, n_samples: int, n_classes=(3, 3)) -> np.ndarray:
    """Validate an ``(N, n_heads)`` array of 0-based class indices."""
    y = np.asarray(y)
    if y.shape != (n_samples, len(n_classes)):
        raise ValueError(f"labels must be shaped ({n_samples}, {len(n_classes)}), got {y.shape}")
    if not np.issubdtype(y.dtype, np.integer):
        if not np.all(np.equal(np.mod(y, 1), 0)):
            raise ValueError("labels must be integer class indices")
        y = y.astype(np.int64)
    for j, k in enumerate(n_classes):
        if y[:, j].min() < 0 or y[:, j].max() >= k:
            raise ValueError(f"head {j} labels must lie in [0, {k})")
    return y.astype(np.int64)


class SatrClassifier(BaseEstimator):
    """Dual-head skill/task classifier over fixed-length kinematic windows.

    ``fit`` takes ``X`` shaped ``(N, T, C)`` and ``y`` shaped ``(N, 2)`` with
    0-based (skill, task) indices. Without explicit validation data the
    training windows are split by ``groups`` (trial ids) so that no trial
    straddles the split, stratified by label pair.

    Attributes
    ----------
    params_ : SatrParams
        Best-validation network parameters.
    config_ : ModelConfig
    train_log_ : TrainLog
    classes_ : list of ndarray
        Class indices per head.
    """

    def __init__(
        self,
        conv_filters=(32, 64),
        kernel_size=2,
        conv_dropout=0.2,
        gru_units=(128, 64),
        gru_dropout=0.2,
        merge_dropout=0.5,
        epochs=80,
        batch_size=64,
        batches_per_epoch=None,
        learning_rate=0.005,
        beta1=0.9,
        beta2=0.999,
        adam_eps=1e-8,
        plateau_factor=5.0,
        plateau_patience=3,
        plateau_threshold=1e-6,
        lr_floor=1e-6,
        validation_fraction=0.2,
        random_state=0,
    ):
        self.conv_filters = conv_filters
        self.kernel_size = kernel_size
        self.conv_dropout = conv_dropout
        self.gru_units = gru_units
        self.gru_dropout = gru_dropout
        self.merge_dropout = merge_dropout
        self.epochs = epochs
        self.batch_size = batch_size
        self.batches_per_epoch = batches_per_epoch
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.adam_eps = adam_eps
        self.plateau_factor = plateau_factor
        self.plateau_patience = plateau_patience
        self.plateau_threshold = plateau_threshold
        self.lr_floor = lr_floor
        self.validation_fraction = validation_fraction
        self.random_state = random_state

    def _make_config(self, window: int, channels: int) -> ModelConfig:
        return ModelConfig(
            channels=channels,
            window=window,
            conv_filters=tuple(self.conv_filters),
            kernel_size=self.kernel_size,
            conv_dropout=self.conv_dropout,
            gru_units=tuple(self.gru_units),
            gru_dropout=self.gru_dropout,
            merge_dropout=self.merge_dropout,
        )

    def _make_schedule(self) -> TrainSchedule:
        return TrainSchedule(
            epochs=self.epochs,
            batch_size=self.batch_size,
            batches_per_epoch=self.batches_per_epoch,
            learning_rate=self.learning_rate,
            beta1=self.beta1,
            beta2=self.beta2,
            adam_eps=self.adam_eps,
            plateau_factor=self.plateau_factor,
            plateau_patience=self.plateau_patience,
            plateau_threshold=self.plateau_threshold,
            lr_floor=self.lr_floor,
            seed=int(self.random_state),
        )

    def fit(self, X, y, groups=None, X_val=None, y_val=None, callback=None):
        X = check_windows(X)
        y = check_dual_labels(y, len(X))
        config = self._make_config(X.shape[1], X.shape[2])

        if X_val is None:
            if not 0.0 < self.validation_fraction < 1.0:
                raise ValueError("validation_fraction must lie in (0, 1) when no X_val is given")
            groups = np.arange(len(X)) if groups is None else np.asarray(groups)
            tr, va = split_groups(groups, y, 1.0 - self.validation_fraction, seed=self.random_state)
            if len(va) == 0:
                raise ValueError("validation split is empty; provide more trials or X_val")
            X, X_val, y, y_val = X[tr], X[va], y[tr], y[va]
        else:
            X_val = check_windows(X_val, config.window, config.channels)
            y_val = check_dual_labels(y_val, len(X_val))

        self.params_, self.train_log_ = train(
            config, self._make_schedule(), X, y, X_val, y_val, callback=callback
        )
        self.config_ = config
        self.class_names_ = {k: tuple(v) for k, v in DEFAULT_CLASSES.items()}
        self.classes_ = [np.arange(k) for _, k in config.heads]
        self.n_features_in_ = config.channels
        return self

    def predict_proba(self, X, batch_size: int = 256) -> list[np.ndarray]:
        """Posteriors per head, in head order (skill, task)."""
        check_is_fitted(self, "params_")
        X = check_windows(X, self.config_.window, self.config_.channels)
        out = {name: [] for name in self.config_.head_names}
        for start in range(0, len(X), batch_size):
            fp = forward(self.params_, self.config_, X[start : start + batch_size], LayerMode.INFERENCE)
            for name, p in fp.posteriors().items():
                out[name].append(p)
        return [np.concatenate(out[name]) for name in self.config_.head_names]

    def predict(self, X) -> np.ndarray:
        """``(N, 2)`` class indices; ties go to the lowest index."""
        return np.stack([np.argmax(p, axis=1) for p in self.predict_proba(X)], axis=1)

    def score(self, X, y) -> float:
        """Mean of the per-head accuracies."""
        pred = self.predict(X)
        y = check_dual_labels(y, len(pred))
        return float(np.mean(pred == y))

    def save(self, path):
        check_is_fitted(self, "params_")
        return save_checkpoint(path, self.params_, self.config_, self.class_names_)

    @classmethod
    def from_checkpoint(cls, path) -> "SatrClassifier":
        params, config, classes = load_checkpoint(path)
        est = cls(
            conv_filters=config.conv_filters,
            kernel_size=config.kernel_size,
            conv_dropout=config.conv_dropout,
            gru_units=config.gru_units,
            gru_dropout=config.gru_dropout,
            merge_dropout=config.merge_dropout,
        )
        est.params_ = params
        est.config_ = config
        est.class_names_ = classes
        est.classes_ = [np.arange(k) for _, k in config.heads]
        est.n_features_in_ = config.channels
        return est


class TrialStandardizer(TransformerMixin, BaseEstimator):
    """Stateless per-trial, per-channel z-scoring.

    Accepts a single ``(L, C)`` trial or a list of them.
    """

    def __init__(self, tol=1e-8):
        self.tol = tol

    def fit(self, X, y=None):
        return self

    def transform(self, X):
        if isinstance(X, np.ndarray) and X.ndim == 2:
            return znormalize_array(X, self.tol)
        return [znormalize_array(np.asarray(x), self.tol) for x in X]


class SlidingWindower(TransformerMixin, BaseEstimator):
    """Cut an ``(L, C)`` trial (or a list of trials) into ``(n, size, C)`` windows."""

    def __init__(self, size=WINDOW, step=STEP):
        self.size = size
        self.step = step

    def fit(self, X, y=None):
        return self

    def transform(self, X):
        if isinstance(X, np.ndarray) and X.ndim == 2:
            return window_array(X, self.size, self.step)
        return np.concatenate([window_array(np.asarray(x), self.size, self.step) for x in X])
