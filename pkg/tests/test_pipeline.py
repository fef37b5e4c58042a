import math

import numpy as np
import pytest

from cacscore.ctvol import BoundingBox, CtVolume, OversizeError
from cacscore.phantom import PhantomSpec, generate_volume
from cacscore.pipeline import (
    CalciumRegressor,
    ExperimentVariant,
    HeartLocator,
    LocalizationError,
    SliceClassifier,
    TrainConfig,
    box_from_probabilities,
    inverse_log_transform,
    locate_heart,
    log_transform,
    predict_subject,
    prepare_slices,
    saliency_maps,
)
from cacscore.pipeline.locator import axis_slices, longest_run, slice_labels
from cacscore.pipeline.saliency import overlay_png
from cacscore.pipeline.slices import normalize_hu
from cacscore.pipeline.training import TrainingDivergedError, batches, epoch_rng, l1_loss
from cacscore.refscore import risk_category
from cacscore.tensornet import ConvNet, LayerConfig, ModelCheckpoint

TINY = (2, 2, 2, 2, 2, 2)


@pytest.fixture(scope="module")
def phantom():
    return generate_volume(PhantomSpec(seed=21, lesion_count_range=(3, 5), zero_lesion_fraction=0.0), 0)


# -- target transform ----------------------------------------------------------------------


def test_log_transform_examples():
    assert log_transform(0.0) == 0.0
    assert log_transform(62.0) == pytest.approx(4.1431, abs=1e-4)
    assert inverse_log_transform(log_transform(255.3)) == pytest.approx(255.3, abs=1e-9)
    assert inverse_log_transform(-0.5) == 0.0
    with pytest.raises(ValueError):
        log_transform(-1.0)


def test_log_roundtrip_grid():
    y = np.concatenate([[0.0], np.logspace(-3, 5, 200)])
    np.testing.assert_allclose(inverse_log_transform(log_transform(y)), y, rtol=1e-12, atol=1e-12)


def test_normalisation_endpoints():
    assert normalize_hu(-1024) == 0.0
    assert normalize_hu(3071) == 1.0
    assert normalize_hu(-3000) == 0.0


# -- slice preparation ---------------------------------------------------------------------


def test_prepare_slices_targets_match_reference(phantom):
    vol, ledger = phantom
    batch = prepare_slices(vol, ledger.heart_box, 64)
    assert batch.images.shape == (ledger.heart_box.shape[2], 64, 64)
    np.testing.assert_allclose(batch.raw_targets, ledger.per_slice_agatston(), atol=1e-9)
    assert batch.raw_targets.sum() == pytest.approx(ledger.analytic_agatston, abs=1e-9)
    np.testing.assert_allclose(batch.targets(log_targets=True), np.log1p(batch.raw_targets))
    assert np.all(batch.spacing == np.array(vol.spacing) * 0.1)


def test_prepare_slices_volume_target(phantom):
    vol, ledger = phantom
    batch = prepare_slices(vol, ledger.heart_box, 64, target_kind="volume")
    assert batch.raw_targets.sum() == pytest.approx(ledger.analytic_volume, abs=1e-9)


def test_padding_is_air(phantom):
    vol, ledger = phantom
    batch = prepare_slices(vol, ledger.heart_box, 64)
    r, c = batch.offsets
    assert r > 0 and c > 0
    assert np.all(batch.images[:, :r, :] == 0.0)
    assert np.all(batch.images[:, :, :c] == 0.0)


def test_calcium_free_slice_has_zero_target(phantom):
    vol, ledger = phantom
    batch = prepare_slices(vol, ledger.heart_box, 64)
    zero = batch.raw_targets == 0
    assert zero.any()
    assert np.all(batch.targets(True)[zero] == 0.0)


def test_oversize_heart_box_rejected(phantom):
    vol, _ = phantom
    with pytest.raises(OversizeError):
        prepare_slices(vol, BoundingBox.full(vol), 32)


def test_unknown_target_kind(phantom):
    vol, ledger = phantom
    with pytest.raises(ValueError):
        prepare_slices(vol, ledger.heart_box, 64, target_kind="mass")


# -- localisation rules --------------------------------------------------------------------


def test_longest_run():
    assert longest_run(np.array([0, 1, 1, 0, 1, 1, 1, 0], bool)) == (4, 7)
    assert longest_run(np.array([1, 1, 0, 1, 1], bool)) == (0, 2)
    assert longest_run(np.zeros(4, bool)) is None


def test_box_from_probabilities_dilates_and_clips():
    probs = {"sagittal": np.array([0, 0, 0.9, 0.9, 0, 0]),
             "coronal": np.array([0.7, 0.6, 0, 0]),
             "axial": np.array([0, 0, 0, 0.51, 0.6])}
    box = box_from_probabilities(probs)
    assert box.lo == (1, 0, 2) and box.hi == (5, 3, 5)


def test_threshold_is_strict():
    probs = {"sagittal": np.array([0.5, 1.0]), "coronal": np.ones(2), "axial": np.ones(2)}
    assert box_from_probabilities(probs, dilate=0).lo[0] == 1


def test_all_positive_classifier_gives_full_volume(phantom):
    vol, _ = phantom
    ones = {axis: (lambda s: np.ones(len(s))) for axis in ("axial", "coronal", "sagittal")}
    assert locate_heart(vol, ones) == BoundingBox.full(vol)


def test_all_negative_classifier_fails(phantom):
    vol, _ = phantom
    zeros = {axis: (lambda s: np.zeros(len(s))) for axis in ("axial", "coronal", "sagittal")}
    with pytest.raises(LocalizationError):
        locate_heart(vol, zeros)


def test_oracle_classifier_recovers_dilated_true_box(phantom):
    vol, ledger = phantom
    box = ledger.heart_box
    probs = {axis: slice_labels(box, axis, vol.dims[a]) for axis, a in
             (("sagittal", 0), ("coronal", 1), ("axial", 2))}
    got = box_from_probabilities(probs)
    assert got.lo == tuple(max(v - 1, 0) for v in box.lo)
    assert got.hi == tuple(min(v + 1, d) for v, d in zip(box.hi, vol.dims))


def test_heart_centre_slice_is_positive(phantom):
    vol, ledger = phantom
    for axis, a in (("sagittal", 0), ("coronal", 1), ("axial", 2)):
        labels = slice_labels(ledger.heart_box, axis, vol.dims[a])
        centre = (ledger.heart_box.lo[a] + ledger.heart_box.hi[a]) // 2
        assert labels[centre] == 1.0 and labels[0] == 0.0


def test_axis_slices_shapes(phantom):
    vol, _ = phantom
    for axis, n in (("axial", vol.dims[2]), ("coronal", vol.dims[1]), ("sagittal", vol.dims[0])):
        s = axis_slices(vol, axis, 32)
        assert s.shape == (n, 32, 32)
        assert s.min() >= 0 and s.max() <= 1
    with pytest.raises(ValueError):
        axis_slices(vol, "oblique", 32)


def _toy_slices(n, seed):
    # bright disc in half the slices
    rng = np.random.default_rng(seed)
    y = (np.arange(n) % 2).astype(float)
    rr, cc = np.mgrid[:16, :16]
    disc = ((rr - 8) ** 2 + (cc - 8) ** 2 < 20).astype(float)
    X = rng.uniform(0, 0.2, (n, 16, 16)) + 0.6 * y[:, None, None] * disc
    return X, y


def test_slice_classifier_learns_and_is_deterministic():
    X, y = _toy_slices(120, 0)
    Xv, yv = _toy_slices(40, 1)
    kw = dict(input_size=16, conv_channels=(4, 4, 4), dense_widths=(8,), epochs=4, batch_size=20)
    a = SliceClassifier(**kw).fit(X, y, Xv, yv)
    b = SliceClassifier(**kw).fit(X, y, Xv, yv)
    assert a.validation_accuracy_ >= 0.9
    assert a.to_checkpoint("axial").to_bytes() == b.to_checkpoint("axial").to_bytes()
    p = a.predict_proba(Xv)
    assert p.shape == (40, 2) and np.allclose(p.sum(1), 1)
    back = SliceClassifier.from_checkpoint(ModelCheckpoint.from_bytes(a.to_checkpoint("axial").to_bytes()))
    np.testing.assert_array_equal(back.predict(Xv), a.predict(Xv))


def test_slice_classifier_divergence_reported():
    X, y = _toy_slices(60, 0)
    # validation labels inverted: accuracy must collapse below the floor
    Xv, yv = _toy_slices(40, 1)
    kw = dict(input_size=16, conv_channels=(4, 4, 4), dense_widths=(8,), epochs=3, batch_size=20)
    with pytest.raises(TrainingDivergedError):
        SliceClassifier(**kw).fit(X, y, Xv, 1 - yv)


def test_slice_classifier_label_validation():
    X, _ = _toy_slices(10, 0)
    with pytest.raises(ValueError):
        SliceClassifier(input_size=16).fit(X, np.full(10, 0.5))


def test_heart_locator_save_load(tmp_path):
    spec = PhantomSpec(seed=5, dims=(32, 32, 24), spacing_mm=(1.6, 1.6, 2.5),
                       heart_center=(25.6, 27.0, 30.0))
    subjects = [generate_volume(spec, i) for i in range(6)]
    loc = HeartLocator(input_size=16, conv_channels=(4, 4, 4), dense_widths=(8,), epochs=2, batch_size=50)
    loc.fit([v for v, _ in subjects], [l.heart_box for _, l in subjects])
    loc.save(tmp_path / "loc")
    back = HeartLocator.load(tmp_path / "loc")
    vol = subjects[0][0]
    for axis, p in loc.predict_proba(vol).items():
        np.testing.assert_array_equal(p, back.predict_proba(vol)[axis])
    assert set(loc.slice_accuracy([vol], [subjects[0][1].heart_box])) == {"axial", "coronal", "sagittal"}


# -- regressor -----------------------------------------------------------------------------


def _slice_set(n, seed, zero=False):
    rng = np.random.default_rng(seed)
    X = rng.uniform(0, 0.3, (n, 64, 64))
    y = np.zeros(n) if zero else rng.gamma(1.0, 20.0, n) * (rng.random(n) < 0.5)
    return X, y


def test_all_zero_targets_converge_to_zero():
    # Adam at lr 0.01 on an L1 loss needs a few hundred steps to settle
    X, y = _slice_set(100, 0, zero=True)
    Xv, yv = _slice_set(20, 1, zero=True)
    model = CalciumRegressor(conv_channels=TINY, dense_widths=(8, 8), epochs=60, batch_size=20)
    model.fit(X, y, None, Xv, yv)
    assert model.best_val_mae_ < 0.01
    assert np.abs(model.predict(Xv)).max() < 0.05


def test_regressor_is_deterministic():
    X, y = _slice_set(40, 2)
    Xv, yv = _slice_set(10, 3)
    kw = dict(experiment="iii", conv_channels=TINY, dense_widths=(4, 4), epochs=2, batch_size=20, random_state=4)
    a = CalciumRegressor(**kw).fit(X, y, None, Xv, yv).to_checkpoint().to_bytes()
    b = CalciumRegressor(**kw).fit(X, y, None, Xv, yv).to_checkpoint().to_bytes()
    assert a == b


def test_regressor_checkpoint_roundtrip():
    X, y = _slice_set(30, 2)
    model = CalciumRegressor(experiment="iii", conv_channels=TINY, dense_widths=(4, 4), epochs=1, batch_size=10)
    model.fit(X, y, None, X, y)
    back = CalciumRegressor.from_checkpoint(ModelCheckpoint.from_bytes(model.to_checkpoint().to_bytes()))
    np.testing.assert_array_equal(back.predict(X), model.predict(X))
    assert back.get_params() == model.get_params()


def test_history_and_best_epoch_selection():
    X, y = _slice_set(40, 5)
    Xv, yv = _slice_set(20, 6)
    model = CalciumRegressor(conv_channels=TINY, dense_widths=(4, 4), epochs=4, batch_size=20)
    model.fit(X, y, None, Xv, yv)
    vals = [r["val_mae"] for r in model.history_]
    assert [r["epoch"] for r in model.history_] == [1, 2, 3, 4]
    assert model.best_epoch_ == int(np.argmin(vals)) + 1
    assert model.best_val_mae_ == min(vals)
    # the kept weights are the ones that produced that validation error
    assert np.mean(np.abs(model.predict_transformed(Xv) - yv)) == pytest.approx(min(vals), rel=1e-9)


def test_shared_variant_has_fewer_parameters():
    X, y = _slice_set(20, 0)
    cfg = dict(conv_channels=(4,) * 6, dense_widths=(4, 4), epochs=1, batch_size=10)
    i = CalciumRegressor(experiment="i", **cfg).fit(X, y).to_checkpoint()
    ii = CalciumRegressor(experiment="ii", **cfg).fit(X, y).to_checkpoint()
    assert ii.n_params < i.n_params


def test_regressor_input_validation():
    X, y = _slice_set(10, 0)
    model = CalciumRegressor(conv_channels=TINY, epochs=1, batch_size=5)
    with pytest.raises(ValueError):
        model.fit(X, -y - 1)
    with pytest.raises(ValueError):
        model.fit(X[:, :32, :32], y)
    with pytest.raises(ValueError):
        model.fit(X, y[:5])
    with pytest.raises(ValueError):
        CalciumRegressor(experiment="v", conv_channels=TINY).fit(X, y)


def test_sklearn_clone_and_params():
    from sklearn.base import clone

    model = CalciumRegressor(experiment="iv", epochs=3)
    twin = clone(model)
    assert twin.get_params() == model.get_params()
    assert twin.shared_kernels and twin.log_targets


def test_loss_and_batches():
    value, grad = l1_loss(np.array([[1.0], [-2.0]]), np.array([[0.0], [0.0]]))
    assert value == 1.5 and grad.ravel().tolist() == [0.5, -0.5]
    sizes = [len(b) for b in batches(201, 100, epoch_rng(0, 1))]
    assert sizes == [100, 100]  # a lone trailing slice cannot be batch-normalised
    a = [b.tolist() for b in batches(50, 10, epoch_rng(3, 2))]
    assert a == [b.tolist() for b in batches(50, 10, epoch_rng(3, 2))]
    assert a != [b.tolist() for b in batches(50, 10, epoch_rng(3, 3))]


def test_manifest_order_does_not_change_checkpoint(tmp_path):
    # subjects are sorted by id before the seeded shuffle, so file order is irrelevant
    import json
    import shutil

    from cacscore.phantom import generate_cohort
    from cacscore.pipeline.train import train_regressor

    generate_cohort(PhantomSpec(seed=2), 6, tmp_path / "a")
    shutil.copytree(tmp_path / "a", tmp_path / "b")
    entries = json.loads((tmp_path / "b" / "manifest.json").read_text())
    (tmp_path / "b" / "manifest.json").write_text(json.dumps(entries[::-1]))
    cfg = TrainConfig(epochs=1, batch_size=20, conv_channels=TINY, dense_widths=(4, 4))
    blobs = [train_regressor(tmp_path / d, ExperimentVariant.parse("i"), cfg).to_bytes() for d in "ab"]
    assert blobs[0] == blobs[1]


# -- subject prediction --------------------------------------------------------------------


class FixedSlices:
    """Stand-in regressor returning preset per-slice scores."""

    experiment = "i"
    target_kind = "agatston"
    input_size = 64

    def __init__(self, values):
        self.values = np.asarray(values, dtype=float)

    def predict(self, X, spacing=None):
        return self.values[: len(X)]


def test_clamp_then_sum():
    vol = CtVolume(np.full((2, 8, 8), -1000), (1.0, 1.0, 3.0), "two")
    rep = predict_subject(vol, FixedSlices([-0.2, 5.0]), box=BoundingBox.full(vol))
    assert rep.agatston == 5.0
    assert rep.per_slice_agatston.tolist() == [0.0, 5.0]
    assert rep.category == "low"
    assert rep.source == "predicted:i"
    assert math.isnan(rep.volume_mm3)
    assert rep.extra["wall_seconds"] >= 0


def test_predict_needs_a_box_source():
    vol = CtVolume(np.full((2, 8, 8), -1000), (1.0, 1.0, 3.0))
    with pytest.raises(ValueError):
        predict_subject(vol, FixedSlices([0.0, 0.0]))


def test_fig2_categories_agree():
    assert risk_category(62) == risk_category(68) == "moderate"


def test_volume_variant_report():
    class VolumeSlices(FixedSlices):
        target_kind = "volume"

    vol = CtVolume(np.full((3, 8, 8), -1000), (1.0, 1.0, 3.0))
    rep = predict_subject(vol, VolumeSlices([1.0, -1.0, 2.0]), box=BoundingBox.full(vol))
    assert rep.volume_mm3 == 3.0 and math.isnan(rep.agatston) and rep.category == "n/a"


def test_experiment_variant_names():
    assert ExperimentVariant.parse("iii").log_targets
    assert ExperimentVariant.parse("ii").name == "ii"
    with pytest.raises(ValueError):
        ExperimentVariant.parse("v")
    with pytest.raises(ValueError):
        ExperimentVariant(target_kind="mass")


def test_train_config_json_roundtrip():
    cfg = TrainConfig(epochs=3, conv_channels=TINY, dtype="float32")
    assert TrainConfig.from_json(cfg.to_json()) == cfg
    with pytest.raises(ValueError):
        TrainConfig(batch_size=1)
    with pytest.raises(ValueError):
        TrainConfig(window=(10, 10))


# -- saliency ------------------------------------------------------------------------------


def test_zero_network_gives_zero_map():
    cfg = LayerConfig.regressor(conv_channels=TINY, dense_widths=(4, 4))
    net = ConvNet(cfg, 0)
    for k in net.params:
        net.params[k][...] = 0.0
    maps = saliency_maps(net, np.zeros((2, 64, 64)), np.zeros((2, 3)))
    assert maps.shape == (2, 64, 64)
    assert np.all(maps == 0.0)


def test_saliency_shape_and_range():
    net = ConvNet(LayerConfig.regressor(conv_channels=TINY, dense_widths=(4, 4)), 0)
    x = np.random.default_rng(0).uniform(0, 1, (3, 64, 64))
    maps = saliency_maps(net, x, np.full((3, 3), 0.1))
    assert maps.shape == x.shape
    assert maps.min() >= 0 and np.allclose(maps.max(axis=(1, 2)), 1.0)
    single = saliency_maps(net, x[0], np.full((1, 3), 0.1))
    assert single.shape == (64, 64)


def test_overlay_png(tmp_path):
    from PIL import Image

    img = np.linspace(0, 1, 64 * 64).reshape(64, 64)
    sal = np.zeros((64, 64))
    sal[10:20, 10:20] = 1.0
    overlay_png(img, sal, tmp_path / "o.png")
    arr = np.asarray(Image.open(tmp_path / "o.png"))
    assert arr.shape == (64, 64, 3)
    assert arr[15, 15, 0] > arr[15, 15, 2]  # red where salient
    assert arr[40, 40, 0] == arr[40, 40, 2]  # grey elsewhere
