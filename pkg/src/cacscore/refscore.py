"""Reference calcium scoring: lesion extraction, Agatston and volume scores."""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy import ndimage

from .ctvol import BoundingBox, CtVolume, crop

CALCIUM_THRESHOLD_HU = 130
MIN_LESION_VOLUME_MM3 = 1.5

# left-closed weight bins: [130,200) -> 1, [200,300) -> 2, [300,400) -> 3, [400, inf) -> 4
WEIGHT_EDGES = (200, 300, 400)

CATEGORIES = ("very_low", "low", "moderate", "moderately_high", "high")
CATEGORY_EDGES = (1.0, 10.0, 100.0, 400.0)

_STRUCTURE_26 = np.ones((3, 3, 3), dtype=bool)


@dataclass(frozen=True)
class Lesion:
    """A 26-connected calcified component.

    ``voxels`` holds ``(z, y, x)`` indices. ``slice_z``, ``slice_area_mm2``
    and ``slice_max_hu`` describe the lesion's footprint in each axial slice
    it touches, in increasing ``z``.
    """

    voxels: np.ndarray
    spacing: tuple[float, float, float]
    slice_z: np.ndarray
    slice_area_mm2: np.ndarray
    slice_max_hu: np.ndarray

    @property
    def n_voxels(self) -> int:
        return len(self.voxels)

    @property
    def volume_mm3(self) -> float:
        sx, sy, sz = self.spacing
        return self.n_voxels * sx * sy * sz


def agatston_weight(max_hu) -> np.ndarray:
    """Density weight for per-slice maximum HU values (0 below threshold)."""
    max_hu = np.asarray(max_hu)
    w = 1 + np.searchsorted(WEIGHT_EDGES, max_hu, side="right")
    return np.where(max_hu >= CALCIUM_THRESHOLD_HU, w, 0)


def lesion_from_voxels(coords: np.ndarray, values: np.ndarray, spacing) -> Lesion:
    """Build a lesion record from ``(z, y, x)`` coordinates and their HU values."""
    coords = np.asarray(coords, dtype=np.int64).reshape(-1, 3)
    values = np.asarray(values)
    order = np.lexsort((coords[:, 2], coords[:, 1], coords[:, 0]))
    coords = coords[order]
    values = values[order]
    zs, start, counts = np.unique(coords[:, 0], return_index=True, return_counts=True)
    max_hu = np.maximum.reduceat(values, start) if len(values) else values
    sx, sy, _ = spacing
    return Lesion(
        voxels=coords,
        spacing=tuple(float(s) for s in spacing),
        slice_z=zs,
        slice_area_mm2=counts * (sx * sy),
        slice_max_hu=np.asarray(max_hu, dtype=np.int64),
    )


def extract_lesions(vol: CtVolume) -> list[Lesion]:
    """Maximal 26-connected components of voxels at or above 130 HU.

    Components below 1.5 mm^3 are dropped. Lesions are ordered by their
    lexicographically smallest ``(z, y, x)`` voxel.
    """
    mask = vol.voxels >= CALCIUM_THRESHOLD_HU
    if not mask.any():
        return []
    labels, n = ndimage.label(mask, structure=_STRUCTURE_26)
    coords = np.argwhere(labels)  # C order, so each label's first row is its minimum
    lab = labels[tuple(coords.T)]
    order = np.argsort(lab, kind="stable")
    coords = coords[order]
    lab = lab[order]
    bounds = np.searchsorted(lab, np.arange(1, n + 2))
    values = vol.voxels[tuple(coords.T)]
    min_voxels = MIN_LESION_VOLUME_MM3 / vol.voxel_volume_mm3
    lesions = []
    for i in range(n):
        a, b = bounds[i], bounds[i + 1]
        if (b - a) < min_voxels - 1e-12:
            continue
        lesions.append(lesion_from_voxels(coords[a:b], values[a:b], vol.spacing))
    lesions.sort(key=lambda les: tuple(les.voxels[0]))
    return lesions


def agatston_score(lesions: Sequence[Lesion], n_slices: int | None = None) -> tuple[float, np.ndarray]:
    """Total Agatston score and its per-slice breakdown.

    Each (lesion, slice) pair contributes its in-plane area times the weight
    of its maximum HU within that slice.
    """
    if n_slices is None:
        n_slices = max((int(les.slice_z[-1]) + 1 for les in lesions), default=0)
    per_slice = np.zeros(n_slices)
    for les in lesions:
        contrib = les.slice_area_mm2 * agatston_weight(les.slice_max_hu)
        np.add.at(per_slice, les.slice_z, contrib)
    return float(per_slice.sum()), per_slice


def volume_score(lesions: Iterable[Lesion]) -> float:
    return float(sum(les.volume_mm3 for les in lesions))


def risk_category(agatston: float) -> str:
    if not agatston >= 0:
        raise ValueError(f"Agatston score must be non-negative, got {agatston}")
    return CATEGORIES[int(np.searchsorted(CATEGORY_EDGES, agatston, side="right"))]


def category_index(agatston) -> np.ndarray:
    """Vectorised ordinal risk category (0 = very_low ... 4 = high)."""
    agatston = np.asarray(agatston, dtype=float)
    if np.any(agatston < 0):
        raise ValueError("Agatston scores must be non-negative")
    return np.searchsorted(CATEGORY_EDGES, agatston, side="right")


NOT_SCORED = "n/a"


@dataclass
class ScoreReport:
    """Subject-level scores.

    A model predicts either Agatston or volume; the other score is NaN, and
    a NaN Agatston score has category ``"n/a"``.
    """

    subject_id: str
    agatston: float
    volume_mm3: float
    per_slice_agatston: np.ndarray
    category: str = ""
    source: str = "reference"
    per_slice_volume: np.ndarray | None = None
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        self.per_slice_agatston = np.asarray(self.per_slice_agatston, dtype=float)
        if math.isnan(self.agatston):
            self.category = self.category or NOT_SCORED
            if self.category != NOT_SCORED:
                raise ValueError("unscored subject cannot have a risk category")
            return
        if not self.category:
            self.category = risk_category(self.agatston)
        if abs(self.per_slice_agatston.sum() - self.agatston) > 1e-9 * max(1.0, abs(self.agatston)):
            raise ValueError("per-slice Agatston scores do not sum to the total")
        if self.category != risk_category(self.agatston):
            raise ValueError("category inconsistent with Agatston score")

    def row(self) -> dict:
        return {
            "subject_id": self.subject_id,
            "source": self.source,
            "agatston": repr(float(self.agatston)),
            "volume_mm3": repr(float(self.volume_mm3)),
            "category": self.category,
        }

    def to_json(self) -> dict:
        out = {k: v for k, v in self.row().items()}
        out["agatston"] = float(self.agatston)
        out["volume_mm3"] = float(self.volume_mm3)
        out["per_slice_agatston"] = self.per_slice_agatston.tolist()
        if self.per_slice_volume is not None:
            out["per_slice_volume"] = np.asarray(self.per_slice_volume).tolist()
        out.update(self.extra)
        return out


def score_volume(vol: CtVolume, box: BoundingBox | None = None) -> ScoreReport:
    if box is not None:
        vol = crop(vol, box)
    lesions = extract_lesions(vol)
    total, per_slice = agatston_score(lesions, vol.dims[2])
    per_slice_vol = np.zeros(vol.dims[2])
    sx, sy, sz = vol.spacing
    for les in lesions:
        np.add.at(per_slice_vol, les.slice_z, les.slice_area_mm2 * sz)
    return ScoreReport(
        subject_id=vol.subject_id,
        agatston=total,
        volume_mm3=volume_score(lesions),
        per_slice_agatston=per_slice,
        source="reference",
        per_slice_volume=per_slice_vol,
    )


REPORT_FIELDS = ("subject_id", "source", "agatston", "volume_mm3", "category")


def reports_to_csv(reports: Iterable[ScoreReport]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=REPORT_FIELDS, lineterminator="\n")
    writer.writeheader()
    for rep in reports:
        writer.writerow(rep.row())
    return buf.getvalue()


def reports_to_json(reports: Iterable[ScoreReport]) -> str:
    return json.dumps([rep.to_json() for rep in reports], indent=1, sort_keys=True)


def read_report_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    for row in rows:
        row["agatston"] = float(row["agatston"])
        row["volume_mm3"] = float(row["volume_mm3"])
    return rows
