"""Turning cropped volumes into network-ready axial slices."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..ctvol import AIR_HU, HU_MAX, HU_MIN, BoundingBox, CtVolume, crop, pad_slice_to
from ..refscore import ScoreReport, score_volume

SPACING_SCALE = 0.1  # mm -> network feature


def normalize_hu(hu, window=(HU_MIN, HU_MAX)) -> np.ndarray:
    """Fixed affine map of a HU window onto [0, 1]."""
    lo, hi = window
    return np.clip((np.asarray(hu, dtype=np.float64) - lo) / (hi - lo), 0.0, 1.0)


def log_transform(y):
    y = np.asarray(y, dtype=np.float64)
    if np.any(y < 0):
        raise ValueError("log transform needs non-negative scores")
    return np.log1p(y)


def inverse_log_transform(t):
    return np.maximum(0.0, np.expm1(np.asarray(t, dtype=np.float64)))


@dataclass
class SliceBatch:
    """Axial slices of one subject inside a box, padded and normalised.

    ``offsets`` is the (row, col) of the crop's top-left corner inside each
    padded image; ``z`` are the source slice indices.
    """

    images: np.ndarray
    spacing: np.ndarray
    raw_targets: np.ndarray
    z: np.ndarray
    box: BoundingBox
    offsets: tuple[int, int]
    subject_id: str = ""

    def targets(self, log_targets: bool = False) -> np.ndarray:
        return log_transform(self.raw_targets) if log_targets else self.raw_targets

    def __len__(self):
        return len(self.images)


def spacing_features(vol: CtVolume, n: int) -> np.ndarray:
    return np.tile(np.asarray(vol.spacing) * SPACING_SCALE, (n, 1))


def prepare_slices(vol: CtVolume, box: BoundingBox, input_size=(64, 64), target_kind: str = "agatston",
                   reference: ScoreReport | None = None, window=(HU_MIN, HU_MAX)) -> SliceBatch:
    """Crop every axial slice to ``box``, pad with air to ``input_size`` and normalise.

    Raw per-slice targets come from the reference scorer run on the cropped
    volume (or from ``reference`` when it is supplied).
    """
    if isinstance(input_size, int):
        input_size = (input_size, input_size)
    sub = crop(vol, box)
    nz = sub.dims[2]
    images = np.empty((nz, *input_size))
    for k in range(nz):
        images[k] = normalize_hu(pad_slice_to(sub.voxels[k], input_size, AIR_HU), window)
    if target_kind not in ("agatston", "volume", None):
        raise ValueError(f"unknown target kind {target_kind!r}")
    if target_kind is None:
        targets = np.zeros(nz)
    else:
        rep = reference if reference is not None else score_volume(sub)
        targets = rep.per_slice_agatston if target_kind == "agatston" else rep.per_slice_volume
        targets = np.asarray(targets, dtype=np.float64)
        if len(targets) != nz:
            raise ValueError("reference per-slice scores do not match the box depth")
    h, w = sub.voxels.shape[1:]
    offsets = ((input_size[0] - h) // 2, (input_size[1] - w) // 2)
    return SliceBatch(
        images=images,
        spacing=spacing_features(vol, nz),
        raw_targets=targets,
        z=np.arange(box.lo[2], box.hi[2]),
        box=box,
        offsets=offsets,
        subject_id=vol.subject_id,
    )
