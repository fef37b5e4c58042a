"""Cohort-level training and subject-level prediction."""
from __future__ import annotations

import csv
import io
import math
import time
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, NamedTuple

import numpy as np

from ..ctvol import HU_MAX, HU_MIN, BoundingBox, CtVolume, load_volume
from ..phantom import load_manifest
from ..refscore import ScoreReport
from ..tensornet.checkpoint import ModelCheckpoint
from .locator import HeartLocator
from .regressor import EXPERIMENTS, TARGET_KINDS, CalciumRegressor
from .slices import prepare_slices

TRAIN_LOG_FIELDS = ("epoch", "train_mae", "val_mae", "wall_seconds")


@dataclass(frozen=True)
class ExperimentVariant:
    """Kernel sharing and target transform of one experiment, plus the score it regresses."""

    shared_kernels: bool = False
    log_targets: bool = False
    target_kind: str = "agatston"

    def __post_init__(self):
        if self.target_kind not in TARGET_KINDS:
            raise ValueError(f"target_kind must be one of {TARGET_KINDS}")

    @property
    def name(self) -> str:
        return next(k for k, v in EXPERIMENTS.items() if v == (self.shared_kernels, self.log_targets))

    @classmethod
    def parse(cls, experiment: str, target_kind: str = "agatston") -> "ExperimentVariant":
        if experiment not in EXPERIMENTS:
            raise ValueError(f"unknown experiment {experiment!r}; expected one of {sorted(EXPERIMENTS)}")
        shared, log_t = EXPERIMENTS[experiment]
        return cls(shared, log_t, target_kind)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    batch_size: int = 100
    input_size: int = 64
    window: tuple[float, float] = (HU_MIN, HU_MAX)
    seed: int = 0
    conv_channels: tuple[int, ...] | None = None
    dense_widths: tuple[int, ...] = (64, 32)
    learning_rate: float = 0.01
    dtype: str = "float64"
    selection: str = "min_validation_mae"

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be at least 1")
        if self.batch_size < 2:
            raise ValueError("batch size must be at least 2 for batch normalisation")
        if self.selection != "min_validation_mae":
            raise ValueError("only minimum-validation-MAE model selection is supported")
        lo, hi = self.window
        if not hi > lo:
            raise ValueError("normalisation window must have hi > lo")
        if self.conv_channels is not None:
            object.__setattr__(self, "conv_channels", tuple(int(c) for c in self.conv_channels))
        object.__setattr__(self, "dense_widths", tuple(int(c) for c in self.dense_widths))
        object.__setattr__(self, "window", (float(lo), float(hi)))

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, obj: dict) -> "TrainConfig":
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in obj.items()})


@dataclass(frozen=True)
class LocatorConfig:
    input_size: int = 32
    conv_channels: tuple[int, ...] = (8, 16, 16)
    dense_widths: tuple[int, ...] = (32,)
    epochs: int = 6
    batch_size: int = 100
    learning_rate: float = 0.01
    dtype: str = "float64"
    seed: int = 0

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, obj: dict) -> "LocatorConfig":
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in obj.items()})


class Subject(NamedTuple):
    entry: dict
    volume: CtVolume
    box: BoundingBox


def load_subjects(manifest, split: str | None = None) -> list[Subject]:
    """Volumes and true heart boxes of one split, ordered by subject id."""
    entries, root = load_manifest(manifest)
    chosen = [e for e in entries if split is None or e.get("split") == split]
    if split is not None and not chosen:
        raise ValueError(f"manifest has no {split!r} subjects")
    chosen.sort(key=lambda e: e["subject_id"])
    return [Subject(e, load_volume(root / e["file"]), BoundingBox.from_json(e["heart_box"])) for e in chosen]


def stack_slices(subjects, input_size: int, target_kind: str, window):
    """Concatenated images, spacing features and raw per-slice targets."""
    batches = [prepare_slices(s.volume, s.box, input_size, target_kind, window=window) for s in subjects]
    return (np.concatenate([b.images for b in batches]),
            np.concatenate([b.spacing for b in batches]),
            np.concatenate([b.raw_targets for b in batches]))


def write_training_log(history, path) -> None:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=TRAIN_LOG_FIELDS, lineterminator="\n")
    w.writeheader()
    for row in history:
        w.writerow({k: repr(float(row[k])) if k != "epoch" else row[k] for k in TRAIN_LOG_FIELDS})
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(buf.getvalue())
    tmp.replace(path)


def make_regressor(variant: ExperimentVariant, config: TrainConfig) -> CalciumRegressor:
    return CalciumRegressor(
        experiment=variant.name, target_kind=variant.target_kind, epochs=config.epochs,
        batch_size=config.batch_size, input_size=config.input_size, conv_channels=config.conv_channels,
        dense_widths=config.dense_widths, learning_rate=config.learning_rate, dtype=config.dtype,
        random_state=config.seed,
    )


def train_regressor(manifest, variant: ExperimentVariant, config: TrainConfig = TrainConfig(),
                    log_path=None, on_epoch: Callable[[dict], None] | None = None,
                    subjects: dict[str, list[Subject]] | None = None) -> ModelCheckpoint:
    """Train one experiment on the manifest's train split; select on its validation split.

    ``subjects`` may hold preloaded ``{"train": [...], "validation": [...]}``
    lists to skip reading the volumes again.
    """
    if subjects is None:
        subjects = {s: load_subjects(manifest, s) for s in ("train", "validation")}
    X, S, y = stack_slices(subjects["train"], config.input_size, variant.target_kind, config.window)
    Xv, Sv, yv = stack_slices(subjects["validation"], config.input_size, variant.target_kind, config.window)
    model = make_regressor(variant, config)
    model.fit(X, y, S, Xv, yv, Sv, on_epoch=on_epoch)
    if log_path is not None:
        write_training_log(model.history_, log_path)
    ckpt = model.to_checkpoint()
    ckpt.metadata["train_config"] = config.to_json()
    ckpt.metadata["window"] = list(config.window)
    ckpt.metadata["n_train_slices"] = int(len(X))
    return ckpt


def train_locator(manifest, config: LocatorConfig = LocatorConfig(),
                  subjects: dict[str, list[Subject]] | None = None) -> HeartLocator:
    """Fit the three slice classifiers on the train split (validated on the validation split)."""
    if subjects is None:
        subjects = {s: load_subjects(manifest, s) for s in ("train", "validation")}
    tr, va = subjects["train"], subjects["validation"]
    loc = HeartLocator(config.input_size, config.conv_channels, config.dense_widths, config.epochs,
                       config.batch_size, config.learning_rate, config.dtype, config.seed)
    return loc.fit([s.volume for s in tr], [s.box for s in tr], [s.volume for s in va], [s.box for s in va])


def regressor_from(model) -> tuple[CalciumRegressor, tuple[float, float]]:
    if isinstance(model, (str, Path)):
        model = ModelCheckpoint.load(model)
    if isinstance(model, ModelCheckpoint):
        window = tuple(model.metadata.get("window", (HU_MIN, HU_MAX)))
        return CalciumRegressor.from_checkpoint(model), window
    return model, (HU_MIN, HU_MAX)


def predict_subject(vol: CtVolume, model, locator: HeartLocator | None = None,
                    box: BoundingBox | None = None, window=None) -> ScoreReport:
    """Subject score as the sum of per-slice predictions clamped at zero.

    ``model`` is a fitted regressor, a checkpoint or a checkpoint path. The
    heart box comes from ``box`` when given, else from ``locator``. Timings
    (seconds) land in ``report.extra``.
    """
    model, ckpt_window = regressor_from(model)
    window = ckpt_window if window is None else window
    t0 = time.perf_counter()
    if box is None:
        if locator is None:
            raise ValueError("need a heart locator or an explicit box")
        box = locator.predict(vol)
    t1 = time.perf_counter()
    batch = prepare_slices(vol, box, model.input_size, target_kind=None, window=window)
    per_slice = np.maximum(model.predict(batch.images, batch.spacing), 0.0)
    total = float(np.sum(per_slice))
    t2 = time.perf_counter()
    assert total == float(np.sum(per_slice))
    extra = {
        "experiment": model.experiment,
        "target_kind": model.target_kind,
        "box": box.to_json(),
        "localization_seconds": t1 - t0,
        "inference_seconds": t2 - t1,
        "wall_seconds": t2 - t0,
    }
    nan = math.nan
    if model.target_kind == "agatston":
        return ScoreReport(vol.subject_id, total, nan, per_slice, source=f"predicted:{model.experiment}",
                           extra=extra)
    return ScoreReport(vol.subject_id, nan, total, np.full(len(per_slice), nan),
                       source=f"predicted:{model.experiment}", per_slice_volume=per_slice, extra=extra)
