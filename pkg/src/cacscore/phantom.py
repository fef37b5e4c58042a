"""Synthetic chest-CT phantoms with embedded calcifications and exact ground truth."""
from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .ctvol import BoundingBox, CtVolume, save_volume
from .refscore import CALCIUM_THRESHOLD_HU, MIN_LESION_VOLUME_MM3, agatston_weight

AIR = -1000
TISSUE = 40
LUNG = -800
HEART = 30
LESION_FLOOR = CALCIUM_THRESHOLD_HU + 1
NON_LESION_CEILING = CALCIUM_THRESHOLD_HU - 1

SPLIT_RATIO = (772, 386, 388)
SPLIT_NAMES = ("train", "validation", "test")

MAX_PLACEMENT_TRIES = 200


class PlacementError(RuntimeError):
    """A lesion could not be placed within the retry budget."""


@dataclass(frozen=True)
class PhantomSpec:
    """Cohort-level generator settings. Lengths are in mm unless noted."""

    seed: int = 0
    dims: tuple[int, int, int] = (64, 64, 40)
    spacing_mm: tuple[float, float, float] = (0.8, 0.8, 1.5)
    heart_center: tuple[float, float, float] = (25.6, 27.0, 30.0)
    heart_radii: tuple[float, float, float] = (11.0, 9.5, 11.0)
    heart_jitter_mm: float = 3.0
    heart_radius_jitter: float = 0.12
    lesion_count_range: tuple[int, int] = (1, 6)
    lesion_radius_range_mm: tuple[float, float] = (0.5, 3.2)
    lesion_peak_hu_range: tuple[int, int] = (150, 800)
    noise_sigma_hu: float = 12.0
    distractor_count_range: tuple[int, int] = (0, 2)
    distractor_radius_range_mm: tuple[float, float] = (1.0, 2.5)
    truncate_noise: bool = True
    zero_lesion_fraction: float = 0.2

    def __post_init__(self):
        for name in ("lesion_count_range", "lesion_radius_range_mm", "lesion_peak_hu_range",
                     "distractor_count_range", "distractor_radius_range_mm"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"{name} is empty: {lo} > {hi}")
        if self.lesion_count_range[0] < 0 or self.distractor_count_range[0] < 0:
            raise ValueError("counts must be non-negative")
        if self.lesion_peak_hu_range[0] < LESION_FLOOR:
            raise ValueError(f"lesion peak HU must be at least {LESION_FLOOR}")
        if self.lesion_radius_range_mm[0] <= 0:
            raise ValueError("lesion radii must be positive")
        if self.noise_sigma_hu < 0:
            raise ValueError("noise sigma must be non-negative")
        if not 0 <= self.zero_lesion_fraction <= 1:
            raise ValueError("zero_lesion_fraction must lie in [0, 1]")
        extent = [n * s for n, s in zip(self.dims, self.spacing_mm)]
        for c, r, e in zip(self.heart_center, self.heart_radii, extent):
            reach = self.heart_jitter_mm + r * (1 + self.heart_radius_jitter)
            if c - reach < 0 or c + reach > e:
                raise ValueError("heart ellipsoid (with jitter) must lie inside the volume")

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, obj: dict) -> "PhantomSpec":
        obj = {k: tuple(v) if isinstance(v, list) else v for k, v in obj.items()}
        return cls(**obj)


@dataclass
class LedgerLesion:
    center: tuple[int, int, int]  # voxel (x, y, z)
    n_voxels: int
    slice_z: list[int]
    slice_area_mm2: list[float]
    slice_max_hu: list[int]
    inside_heart: bool
    peak_hu: int
    radius_mm: float

    def volume_mm3(self, spacing) -> float:
        return self.n_voxels * spacing[0] * spacing[1] * spacing[2]

    def scoreable(self, spacing) -> bool:
        return self.volume_mm3(spacing) >= MIN_LESION_VOLUME_MM3 - 1e-12

    def agatston(self) -> float:
        return float(sum(a * int(agatston_weight(m)) for a, m in zip(self.slice_area_mm2, self.slice_max_hu)))


@dataclass
class LesionLedger:
    subject_id: str
    spacing: tuple[float, float, float]
    heart_box: BoundingBox
    lesions: list[LedgerLesion] = field(default_factory=list)
    distractors: list[LedgerLesion] = field(default_factory=list)

    def _counted(self):
        return [les for les in self.lesions if les.scoreable(self.spacing)]

    @property
    def analytic_agatston(self) -> float:
        return float(sum(les.agatston() for les in self._counted()))

    @property
    def analytic_volume(self) -> float:
        sx, sy, sz = self.spacing
        return float(sum(les.n_voxels for les in self._counted()) * sx * sy * sz)

    def per_slice_agatston(self, nz: int | None = None) -> np.ndarray:
        """Per-slice Agatston indexed relative to the heart box."""
        z0, z1 = self.heart_box.lo[2], self.heart_box.hi[2]
        out = np.zeros(z1 - z0 if nz is None else nz)
        for les in self._counted():
            for z, a, m in zip(les.slice_z, les.slice_area_mm2, les.slice_max_hu):
                out[z - z0] += a * int(agatston_weight(m))
        return out

    def to_json(self) -> dict:
        return {
            "subject_id": self.subject_id,
            "spacing": list(self.spacing),
            "heart_box": self.heart_box.to_json(),
            "lesions": [asdict(les) for les in self.lesions],
            "distractors": [asdict(les) for les in self.distractors],
        }

    @classmethod
    def from_json(cls, obj: dict) -> "LesionLedger":
        def _les(d):
            d = dict(d)
            d["center"] = tuple(d["center"])
            return LedgerLesion(**d)

        return cls(
            subject_id=obj["subject_id"],
            spacing=tuple(obj["spacing"]),
            heart_box=BoundingBox.from_json(obj["heart_box"]),
            lesions=[_les(d) for d in obj["lesions"]],
            distractors=[_les(d) for d in obj["distractors"]],
        )


def subject_rng(seed: int, subject_index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed) & (2**64 - 1), int(subject_index)]))


def _ellipsoid_mask(shape_zyx, spacing, center, radii) -> np.ndarray:
    nz, ny, nx = shape_zyx
    sx, sy, sz = spacing
    x = ((np.arange(nx) + 0.5) * sx - center[0]) / radii[0]
    y = ((np.arange(ny) + 0.5) * sy - center[1]) / radii[1]
    z = ((np.arange(nz) + 0.5) * sz - center[2]) / radii[2]
    return z[:, None, None] ** 2 + y[None, :, None] ** 2 + x[None, None, :] ** 2 <= 1.0


def _sphere(center_mm, radius, spacing, shape_zyx):
    """Voxel coordinates (z, y, x) inside a sphere plus their normalised radius."""
    sx, sy, sz = spacing
    lo = [max(0, int(math.floor((c - radius) / s))) for c, s in zip(center_mm, (sx, sy, sz))]
    hi = [min(n, int(math.ceil((c + radius) / s)) + 1) for c, s, n in zip(center_mm, (sx, sy, sz), shape_zyx[::-1])]
    xs = np.arange(lo[0], hi[0])
    ys = np.arange(lo[1], hi[1])
    zs = np.arange(lo[2], hi[2])
    zz, yy, xx = np.meshgrid(zs, ys, xs, indexing="ij")
    d = np.sqrt(
        ((xx + 0.5) * sx - center_mm[0]) ** 2
        + ((yy + 0.5) * sy - center_mm[1]) ** 2
        + ((zz + 0.5) * sz - center_mm[2]) ** 2
    )
    inside = d <= radius
    coords = np.stack([zz[inside], yy[inside], xx[inside]], axis=1)
    return coords, d[inside] / radius


def _dilate_coords(coords, shape_zyx):
    offsets = np.stack(np.meshgrid([-1, 0, 1], [-1, 0, 1], [-1, 0, 1], indexing="ij"), -1).reshape(-1, 3)
    out = (coords[:, None, :] + offsets[None]).reshape(-1, 3)
    out = out[np.all((out >= 0) & (out < np.array(shape_zyx)), axis=1)]
    return out


def _mask_box(mask: np.ndarray) -> BoundingBox:
    zs, ys, xs = np.nonzero(mask)
    return BoundingBox.make((xs.min(), ys.min(), zs.min()), (xs.max() + 1, ys.max() + 1, zs.max() + 1))


def _ledger_entry(coords, values, spacing, inside_heart, peak, radius) -> LedgerLesion:
    sx, sy, _ = spacing
    zs = sorted(set(int(z) for z in coords[:, 0]))
    areas, maxima = [], []
    for z in zs:
        sel = coords[:, 0] == z
        areas.append(float(sel.sum()) * sx * sy)
        maxima.append(int(values[sel].max()))
    cz, cy, cx = np.rint(coords.mean(axis=0)).astype(int)
    return LedgerLesion(
        center=(int(cx), int(cy), int(cz)),
        n_voxels=int(len(coords)),
        slice_z=zs,
        slice_area_mm2=areas,
        slice_max_hu=maxima,
        inside_heart=inside_heart,
        peak_hu=int(peak),
        radius_mm=float(radius),
    )


def generate_volume(spec: PhantomSpec, subject_index: int) -> tuple[CtVolume, LesionLedger]:
    """Render one subject. Deterministic in ``(spec.seed, subject_index)``."""
    rng = subject_rng(spec.seed, subject_index)
    nx, ny, nz = spec.dims
    shape = (nz, ny, nx)
    spacing = tuple(float(s) for s in spec.spacing_mm)
    extent = np.array([n * s for n, s in zip(spec.dims, spacing)])

    center = np.array(spec.heart_center) + rng.uniform(-1, 1, 3) * spec.heart_jitter_mm
    radii = np.array(spec.heart_radii) * (1 + rng.uniform(-1, 1, 3) * spec.heart_radius_jitter)

    body_c = extent / 2
    body = _ellipsoid_mask(shape, spacing, (body_c[0], body_c[1], body_c[2]),
                           (0.48 * extent[0], 0.44 * extent[1], 1e6))
    lung_r = (0.22 * extent[0], 0.34 * extent[1], 0.62 * extent[2])
    lung_dx = 0.2 * extent[0]
    lung_l = _ellipsoid_mask(shape, spacing, (body_c[0] - lung_dx, body_c[1], body_c[2]), lung_r)
    lung_r_mask = _ellipsoid_mask(shape, spacing, (body_c[0] + lung_dx, body_c[1], body_c[2]), lung_r)
    heart = _ellipsoid_mask(shape, spacing, center, radii)

    base = np.full(shape, AIR, dtype=np.float64)
    base[body] = TISSUE
    base[body & (lung_l | lung_r_mask)] = LUNG
    base[heart] = HEART
    if spec.noise_sigma_hu > 0:
        base += rng.normal(0.0, spec.noise_sigma_hu, shape)
    base = np.rint(base)
    if spec.truncate_noise:
        base = np.minimum(base, NON_LESION_CEILING)
    heart_box = _mask_box(heart)

    occupied = np.zeros(shape, dtype=bool)  # lesion voxels dilated by one
    lesions: list[LedgerLesion] = []
    distractors: list[LedgerLesion] = []

    n_lesions = int(rng.integers(spec.lesion_count_range[0], spec.lesion_count_range[1] + 1))
    if spec.zero_lesion_fraction > 0 and rng.random() < spec.zero_lesion_fraction:
        n_lesions = 0
    n_distract = int(rng.integers(spec.distractor_count_range[0], spec.distractor_count_range[1] + 1))

    box_mask = np.zeros(shape, dtype=bool)
    box_mask[heart_box.slices] = True

    def place(radius_range, allowed, inside_heart):
        for _ in range(MAX_PLACEMENT_TRIES):
            radius = float(np.exp(rng.uniform(np.log(radius_range[0]), np.log(radius_range[1]))))
            peak = int(rng.integers(spec.lesion_peak_hu_range[0], spec.lesion_peak_hu_range[1] + 1))
            if inside_heart:
                u = rng.uniform(-1, 1, 3)
                if (u ** 2).sum() > 1:
                    continue
                c = center + u * radii
            else:
                c = rng.uniform(0, 1, 3) * extent
            coords, rel = _sphere(c, radius, spacing, shape)
            if len(coords) == 0:
                continue
            idx = tuple(coords.T)
            if not allowed[idx].all() or occupied[idx].any():
                continue
            hu = LESION_FLOOR + (peak - LESION_FLOOR) * (1.0 - rel)
            if spec.noise_sigma_hu > 0:
                hu = hu + rng.normal(0.0, spec.noise_sigma_hu, len(hu))
            hu = np.clip(np.rint(hu), LESION_FLOOR, 3071)
            base[idx] = hu
            occupied[tuple(_dilate_coords(coords, shape).T)] = True
            return _ledger_entry(coords, hu, spacing, inside_heart, peak, radius)
        raise PlacementError(
            f"could not place a {'lesion' if inside_heart else 'distractor'} "
            f"after {MAX_PLACEMENT_TRIES} tries (subject {subject_index})"
        )

    for _ in range(n_lesions):
        lesions.append(place(spec.lesion_radius_range_mm, heart, True))
    outside = body & ~_dilate_mask(box_mask)
    for _ in range(n_distract):
        distractors.append(place(spec.distractor_radius_range_mm, outside, False))

    subject_id = f"S{spec.seed}-{subject_index:05d}"
    vol = CtVolume(base.astype(np.int16), spacing, subject_id)
    return vol, LesionLedger(subject_id, spacing, heart_box, lesions, distractors)


def _dilate_mask(mask: np.ndarray) -> np.ndarray:
    from scipy.ndimage import binary_dilation

    return binary_dilation(mask, structure=np.ones((3, 3, 3), dtype=bool))


def split_sizes(n: int, ratio=SPLIT_RATIO) -> tuple[int, ...]:
    """Largest-remainder apportionment of ``n`` items over ``ratio``."""
    if n < 0:
        raise ValueError("n must be non-negative")
    total = sum(ratio)
    quotas = [n * r / total for r in ratio]
    sizes = [int(math.floor(q)) for q in quotas]
    rest = n - sum(sizes)
    order = sorted(range(len(ratio)), key=lambda i: (-(quotas[i] - sizes[i]), i))
    for i in order[:rest]:
        sizes[i] += 1
    return tuple(sizes)


def assign_splits(n: int, seed: int) -> list[str]:
    sizes = split_sizes(n)
    labels = [name for name, k in zip(SPLIT_NAMES, sizes) for _ in range(k)]
    perm = np.random.default_rng(np.random.SeedSequence([int(seed) & (2**64 - 1), 0x5B117])).permutation(n)
    out = [""] * n
    for label, i in zip(labels, perm):
        out[int(i)] = label
    return out


MANIFEST_NAME = "manifest.json"
SPEC_NAME = "phantom_spec.json"


def _atomic_write(path: Path, data: bytes) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


def generate_cohort(spec: PhantomSpec, n: int, out_dir) -> list[dict]:
    """Write ``n`` CTVOL files plus ``manifest.json``; returns the manifest."""
    if n < 1:
        raise ValueError("cohort size must be at least 1")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    splits = assign_splits(n, spec.seed)
    manifest = []
    for i in range(n):
        vol, ledger = generate_volume(spec, i)
        fname = f"{vol.subject_id}.ctvol"
        save_volume(vol, out_dir / fname)
        manifest.append(
            {
                "file": fname,
                "subject_id": vol.subject_id,
                "split": splits[i],
                "analytic_agatston": ledger.analytic_agatston,
                "analytic_volume": ledger.analytic_volume,
                "heart_box": ledger.heart_box.to_json(),
                "ledger": ledger.to_json(),
            }
        )
    _atomic_write(out_dir / SPEC_NAME, json.dumps(spec.to_json(), indent=1, sort_keys=True).encode())
    _atomic_write(out_dir / MANIFEST_NAME, json.dumps(manifest, indent=1, sort_keys=True).encode())
    return manifest


def load_manifest(path) -> tuple[list[dict], Path]:
    """Read a cohort manifest; ``path`` may be the file or its directory."""
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST_NAME
    entries = json.loads(path.read_text())
    return entries, path.parent


def with_overrides(spec: PhantomSpec, **kw) -> PhantomSpec:
    return replace(spec, **{k: v for k, v in kw.items() if v is not None})
