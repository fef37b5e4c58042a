"""Heart localisation from three per-axis slice classifiers.

Each classifier sees every slice of the volume along its axis (downsampled
to a small square) and reports the probability that the slice cuts the
heart. The longest run of positive slices per axis, widened by one slice,
gives that axis' extent of the bounding box.
"""
from __future__ import annotations

import json
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from scipy import ndimage
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from ..ctvol import BoundingBox, CtVolume
from ..tensornet.checkpoint import ModelCheckpoint
from ..tensornet.layers import sigmoid
from ..tensornet.network import ConvNet, LayerConfig
from ..tensornet.optim import AdamState
from .slices import normalize_hu
from .training import TrainingDivergedError, bce_logits_loss, train_network
from .validation import check_images

# classifier name -> BoundingBox axis (x=0, y=1, z=2)
AXES = {"sagittal": 0, "coronal": 1, "axial": 2}
MIN_VALIDATION_ACCURACY = 0.6


class LocalizationError(RuntimeError):
    """No slice along some axis was classified as containing the heart."""


def axis_slices(vol: CtVolume, axis: str, size: int) -> np.ndarray:
    """All slices of ``vol`` across ``axis``, resampled to ``size`` x ``size`` and normalised."""
    v = vol.voxels.astype(np.float64)  # (z, y, x)
    if axis == "axial":
        stack = v
    elif axis == "coronal":
        stack = v.transpose(1, 0, 2)
    elif axis == "sagittal":
        stack = v.transpose(2, 0, 1)
    else:
        raise ValueError(f"unknown axis {axis!r}")
    _, h, w = stack.shape
    if (h, w) != (size, size):
        stack = ndimage.zoom(stack, (1, size / h, size / w), order=1, mode="nearest", grid_mode=True)
    return normalize_hu(stack)


def slice_labels(box: BoundingBox, axis: str, n: int) -> np.ndarray:
    a = AXES[axis]
    idx = np.arange(n)
    return ((idx >= box.lo[a]) & (idx < box.hi[a])).astype(np.float64)


def longest_run(mask: np.ndarray) -> tuple[int, int] | None:
    """Half-open ``(start, stop)`` of the longest True run; the first wins ties."""
    best, start = None, None
    for i, m in enumerate(list(mask) + [False]):
        if m and start is None:
            start = i
        elif not m and start is not None:
            if best is None or i - start > best[1] - best[0]:
                best = (start, i)
            start = None
    return best


def box_from_probabilities(probs: Mapping[str, np.ndarray], threshold: float = 0.5, dilate: int = 1) -> BoundingBox:
    """Combine per-axis slice probabilities into a box (dilated, clipped to the volume)."""
    lo, hi = [0, 0, 0], [0, 0, 0]
    for axis, a in AXES.items():
        p = np.asarray(probs[axis], dtype=np.float64)
        run = longest_run(p > threshold)
        if run is None:
            raise LocalizationError(f"no {axis} slice contains the heart")
        lo[a] = max(run[0] - dilate, 0)
        hi[a] = min(run[1] + dilate, len(p))
    return BoundingBox.make(lo, hi)


class SliceClassifier(ClassifierMixin, BaseEstimator):
    """Binary heart-presence classifier for square slices (three conv stages)."""

    def __init__(self, input_size=32, conv_channels=(8, 16, 16), dense_widths=(32,), epochs=6,
                 batch_size=100, learning_rate=0.01, dtype="float64", random_state=0):
        self.input_size = input_size
        self.conv_channels = conv_channels
        self.dense_widths = dense_widths
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.dtype = dtype
        self.random_state = random_state

    def _config(self) -> LayerConfig:
        if len(self.conv_channels) != 3:
            raise ValueError("slice classifiers have three conv stages")
        return LayerConfig(conv_channels=tuple(self.conv_channels), input_size=(self.input_size,) * 2,
                           dense_widths=tuple(self.dense_widths), n_extra=0, dtype=self.dtype)

    def fit(self, X, y, X_val=None, y_val=None):
        config = self._config()
        X = check_images(X, config.input_size)
        y = np.asarray(y, dtype=np.float64).ravel()
        if len(y) != len(X) or not np.all((y == 0) | (y == 1)):
            raise ValueError("labels must be 0/1, one per slice")
        self.classes_ = np.array([0, 1])
        self.net_ = ConvNet(config, np.random.default_rng(self.random_state))
        validate = None
        if X_val is not None:
            X_val = check_images(X_val, config.input_size)
            y_val = np.asarray(y_val).ravel()

            def validate(net):
                return float(np.mean((net.predict(X_val).ravel() > 0) != (y_val > 0.5)))

        result = train_network(self.net_, X, None, y, epochs=self.epochs, batch_size=self.batch_size,
                               optimizer=AdamState(lr=self.learning_rate), seed=self.random_state,
                               loss=bce_logits_loss, validate=validate)
        self.history_ = result.history
        self.optimizer_ = result.best_optimizer
        err = result.history[result.best_epoch - 1]["val_mae"]
        self.validation_accuracy_ = 1.0 - err if validate is not None else float("nan")
        if validate is not None and self.validation_accuracy_ < MIN_VALIDATION_ACCURACY:
            raise TrainingDivergedError(
                f"slice classifier reached only {self.validation_accuracy_:.3f} validation accuracy")
        return self

    def decision_function(self, X) -> np.ndarray:
        check_is_fitted(self, "net_")
        X = check_images(X, self.net_.config.input_size)
        return self.net_.predict(X).ravel().astype(np.float64)

    def predict_proba(self, X) -> np.ndarray:
        p = sigmoid(self.decision_function(X))
        return np.column_stack([1.0 - p, p])

    def predict(self, X) -> np.ndarray:
        return (self.decision_function(X) > 0).astype(int)

    def to_checkpoint(self, axis: str) -> ModelCheckpoint:
        check_is_fitted(self, "net_")
        meta = {"kind": "slice_classifier", "axis": axis,
                "validation_accuracy": self.validation_accuracy_,
                "params": {k: (list(v) if isinstance(v, tuple) else v) for k, v in self.get_params().items()}}
        return ModelCheckpoint(self.net_.config, self.net_.copy_state(), meta, self.optimizer_)

    @classmethod
    def from_checkpoint(cls, ckpt: ModelCheckpoint) -> "SliceClassifier":
        params = {k: (tuple(v) if isinstance(v, list) else v) for k, v in ckpt.metadata["params"].items()}
        est = cls(**params)
        est.net_ = ckpt.build()
        est.classes_ = np.array([0, 1])
        est.optimizer_ = ckpt.optimizer
        est.validation_accuracy_ = ckpt.metadata.get("validation_accuracy", float("nan"))
        est.history_ = []
        return est


def locate_heart(vol: CtVolume, models: Mapping[str, object], size: int = 32) -> BoundingBox:
    """Bounding box of the heart from one model per axis.

    ``models`` maps "axial", "coronal" and "sagittal" to a fitted
    :class:`SliceClassifier` or to any callable returning one heart
    probability per slice of an ``(n, size, size)`` stack.
    """
    probs = {}
    for axis in AXES:
        m = models[axis]
        stack = axis_slices(vol, axis, getattr(m, "input_size", size))
        probs[axis] = m.predict_proba(stack)[:, 1] if hasattr(m, "predict_proba") else np.asarray(m(stack))
    return box_from_probabilities(probs)


class HeartLocator(BaseEstimator):
    """Three slice classifiers (axial, coronal, sagittal) predicting a heart box."""

    LOCATOR_FILE = "locator.json"

    def __init__(self, input_size=32, conv_channels=(8, 16, 16), dense_widths=(32,), epochs=6,
                 batch_size=100, learning_rate=0.01, dtype="float64", random_state=0):
        self.input_size = input_size
        self.conv_channels = conv_channels
        self.dense_widths = dense_widths
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.dtype = dtype
        self.random_state = random_state

    def _dataset(self, volumes: Sequence[CtVolume], boxes: Sequence[BoundingBox], axis: str):
        xs, ys = [], []
        for vol, box in zip(volumes, boxes):
            s = axis_slices(vol, axis, self.input_size)
            xs.append(s)
            ys.append(slice_labels(box, axis, len(s)))
        return np.concatenate(xs), np.concatenate(ys)

    def fit(self, volumes, boxes, val_volumes=None, val_boxes=None):
        if len(volumes) != len(boxes) or not volumes:
            raise ValueError("need one true box per training volume")
        self.classifiers_ = {}
        for k, axis in enumerate(AXES):
            X, y = self._dataset(volumes, boxes, axis)
            Xv = yv = None
            if val_volumes:
                Xv, yv = self._dataset(val_volumes, val_boxes, axis)
            clf = SliceClassifier(self.input_size, self.conv_channels, self.dense_widths, self.epochs,
                                  self.batch_size, self.learning_rate, self.dtype, self.random_state + k)
            self.classifiers_[axis] = clf.fit(X, y, Xv, yv)
        return self

    def predict_proba(self, vol: CtVolume) -> dict[str, np.ndarray]:
        check_is_fitted(self, "classifiers_")
        return {axis: clf.predict_proba(axis_slices(vol, axis, self.input_size))[:, 1]
                for axis, clf in self.classifiers_.items()}

    def predict(self, vol: CtVolume) -> BoundingBox:
        return box_from_probabilities(self.predict_proba(vol))

    def slice_accuracy(self, volumes, boxes) -> dict[str, float]:
        """Per-axis fraction of correctly classified slices."""
        out = {}
        for axis, clf in self.classifiers_.items():
            X, y = self._dataset(volumes, boxes, axis)
            out[axis] = float(np.mean(clf.predict(X) == y))
        return out

    def save(self, directory) -> None:
        check_is_fitted(self, "classifiers_")
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        for axis, clf in self.classifiers_.items():
            clf.to_checkpoint(axis).save(d / f"{axis}.cnet")
        params = {k: (list(v) if isinstance(v, tuple) else v) for k, v in self.get_params().items()}
        tmp = d / (self.LOCATOR_FILE + ".tmp")
        tmp.write_text(json.dumps({"params": params, "axes": list(AXES)}, indent=1, sort_keys=True))
        tmp.replace(d / self.LOCATOR_FILE)

    @classmethod
    def load(cls, directory) -> "HeartLocator":
        d = Path(directory)
        meta = json.loads((d / cls.LOCATOR_FILE).read_text())
        est = cls(**{k: (tuple(v) if isinstance(v, list) else v) for k, v in meta["params"].items()})
        est.classifiers_ = {axis: SliceClassifier.from_checkpoint(ModelCheckpoint.load(d / f"{axis}.cnet"))
                            for axis in AXES}
        return est
