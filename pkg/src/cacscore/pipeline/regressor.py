"""Direct per-slice calcium score regression as a scikit-learn style estimator."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_is_fitted

from ..tensornet.checkpoint import ModelCheckpoint
from ..tensornet.network import ConvNet, LayerConfig
from ..tensornet.optim import AdamState
from .slices import inverse_log_transform, log_transform
from .training import l1_loss, train_network
from .validation import check_images, check_spacing, check_targets

# experiment tag -> (shared kernels, log targets)
EXPERIMENTS = {
    "i": (False, False),
    "ii": (True, False),
    "iii": (False, True),
    "iv": (True, True),
}
TARGET_KINDS = ("agatston", "volume")


def experiment_flags(experiment: str) -> tuple[bool, bool]:
    try:
        return EXPERIMENTS[experiment]
    except KeyError:
        raise ValueError(f"unknown experiment {experiment!r}; expected one of {sorted(EXPERIMENTS)}") from None


class CalciumRegressor(RegressorMixin, BaseEstimator):
    """ConvNet that maps a padded axial slice (plus voxel spacing) to its calcium score.

    Parameters
    ----------
    experiment : {"i", "ii", "iii", "iv"}
        Separate or shared kernels crossed with raw or ``ln(y + 1)`` targets.
    target_kind : {"agatston", "volume"}
        Only recorded in checkpoints; the targets passed to ``fit`` decide.
    conv_channels : sequence of six ints, optional
        Feature maps per conv stage. Defaults to (16, 32, 32, 64, 64, 64),
        or 32 everywhere when kernels are shared.
    dtype : {"float32", "float64"}
        Compute precision. Single precision roughly halves training time.
    random_state : int
        Seeds initialisation and the per-epoch shuffles.

    Training minimises the mean absolute error of targets divided by
    ``target_scale_`` (the standard deviation of the transformed training
    targets), so reported errors stay in transformed score units.
    """

    def __init__(self, experiment="i", target_kind="agatston", epochs=50, batch_size=100, input_size=64,
                 conv_channels=None, dense_widths=(64, 32), learning_rate=0.01, beta1=0.9, beta2=0.999,
                 dtype="float64", random_state=0):
        self.experiment = experiment
        self.target_kind = target_kind
        self.epochs = epochs
        self.batch_size = batch_size
        self.input_size = input_size
        self.conv_channels = conv_channels
        self.dense_widths = dense_widths
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.dtype = dtype
        self.random_state = random_state

    @property
    def shared_kernels(self) -> bool:
        return experiment_flags(self.experiment)[0]

    @property
    def log_targets(self) -> bool:
        return experiment_flags(self.experiment)[1]

    def _layer_config(self) -> LayerConfig:
        shared, _ = experiment_flags(self.experiment)
        return LayerConfig.regressor(shared_kernels=shared, conv_channels=self.conv_channels,
                                     input_size=self.input_size, dense_widths=tuple(self.dense_widths),
                                     dtype=self.dtype)

    def _transform(self, y):
        return log_transform(y) if self.log_targets else np.asarray(y, dtype=np.float64)

    def fit(self, X, y, spacing=None, X_val=None, y_val=None, spacing_val=None, on_epoch=None):
        """Train on slices ``X`` (N, H, W) with raw per-slice scores ``y``.

        When validation slices are given the returned model is the epoch with
        the lowest validation MAE; the per-epoch record is ``history_``.
        """
        if self.target_kind not in TARGET_KINDS:
            raise ValueError(f"target_kind must be one of {TARGET_KINDS}")
        config = self._layer_config()
        X = check_images(X, config.input_size)
        y = check_targets(y, len(X))
        spacing = check_spacing(spacing, len(X))
        t = self._transform(y)
        scale = float(np.std(t))
        self.target_scale_ = scale if scale > 0 else 1.0

        validate = None
        if X_val is not None:
            X_val = check_images(X_val, config.input_size)
            t_val = self._transform(check_targets(y_val, len(X_val)))
            spacing_val = check_spacing(spacing_val, len(X_val))

            def validate(net):
                pred = net.predict(X_val, spacing_val).ravel().astype(np.float64) * self.target_scale_
                return float(np.mean(np.abs(pred - t_val)))

        self.net_ = ConvNet(config, np.random.default_rng(self.random_state))
        optimizer = AdamState(lr=self.learning_rate, beta1=self.beta1, beta2=self.beta2)
        scale_ = self.target_scale_

        def report(row):
            row["train_mae"] *= scale_
            if on_epoch is not None:
                on_epoch(row)

        result = train_network(
            self.net_, X, spacing, t / self.target_scale_, epochs=self.epochs, batch_size=self.batch_size,
            optimizer=optimizer, seed=self.random_state, loss=l1_loss, validate=validate, on_epoch=report,
        )
        self.history_ = result.history
        self.best_epoch_ = result.best_epoch
        self.optimizer_ = result.best_optimizer
        best = result.history[result.best_epoch - 1]
        self.best_val_mae_ = best["val_mae"]
        self.n_features_in_ = int(np.prod(config.input_size))
        return self

    def predict_transformed(self, X, spacing=None) -> np.ndarray:
        check_is_fitted(self, "net_")
        X = check_images(X, self.net_.config.input_size)
        spacing = check_spacing(spacing, len(X))
        return self.net_.predict(X, spacing).ravel().astype(np.float64) * self.target_scale_

    def predict(self, X, spacing=None) -> np.ndarray:
        """Per-slice scores in score units (inverse-transformed, not clamped)."""
        t = self.predict_transformed(X, spacing)
        return inverse_log_transform(t) if self.log_targets else t

    # -- checkpoints ---------------------------------------------------------

    def to_checkpoint(self) -> ModelCheckpoint:
        check_is_fitted(self, "net_")
        meta = {
            "kind": "regressor",
            "experiment": self.experiment,
            "target_kind": self.target_kind,
            "log_targets": self.log_targets,
            "shared_kernels": self.shared_kernels,
            "target_scale": self.target_scale_,
            "best_epoch": self.best_epoch_,
            "validation_mae": self.best_val_mae_,
            "params": {k: (list(v) if isinstance(v, tuple) else v) for k, v in self.get_params().items()},
        }
        return ModelCheckpoint(self.net_.config, self.net_.copy_state(), meta, self.optimizer_)

    @classmethod
    def from_checkpoint(cls, ckpt: ModelCheckpoint) -> "CalciumRegressor":
        meta = ckpt.metadata
        if meta.get("kind") != "regressor":
            raise ValueError("checkpoint does not hold a calcium regressor")
        params = dict(meta.get("params", {}))
        for key in ("conv_channels", "dense_widths"):
            if isinstance(params.get(key), list):
                params[key] = tuple(params[key])
        est = cls(**params)
        est.net_ = ckpt.build()
        est.target_scale_ = float(meta["target_scale"])
        est.best_epoch_ = meta.get("best_epoch", 0)
        est.best_val_mae_ = meta.get("validation_mae", float("nan"))
        est.optimizer_ = ckpt.optimizer
        est.history_ = []
        est.n_features_in_ = int(np.prod(ckpt.config.input_size))
        return est
