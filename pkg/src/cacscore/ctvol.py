"""CT volume container, CTVOL file format and geometric helpers.

Voxel arrays are stored ``(nz, ny, nx)`` so that ``voxels[z]`` is an axial
slice; ``dims`` and ``spacing`` follow the ``(x, y, z)`` convention.
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

HU_MIN = -1024
HU_MAX = 3071
AIR_HU = -1024

MAGIC = b"CTVOL\x00"
FORMAT_VERSION = 1

CLINICAL_MIN_SLICES = 100
PHANTOM_MIN_SLICES = 20
MAX_SLICE_THICKNESS_MM = 3.0


class CtVolError(ValueError):
    """Base class for CTVOL format problems."""


class MalformedHeaderError(CtVolError):
    pass


class PayloadSizeError(CtVolError):
    pass


class UnsupportedVersionError(CtVolError):
    pass


class OversizeError(ValueError):
    """A slice does not fit in the requested output size."""


@dataclass(frozen=True)
class CtVolume:
    """Immutable HU voxel grid with physical spacing in mm."""

    voxels: np.ndarray
    spacing: tuple[float, float, float]
    subject_id: str = ""
    effective_thickness_mm: float | None = None

    def __post_init__(self):
        vox = np.asarray(self.voxels)
        if vox.ndim != 3 or min(vox.shape) < 1:
            raise ValueError(f"voxels must be a non-empty 3D array, got shape {vox.shape}")
        if not np.issubdtype(vox.dtype, np.integer):
            if not np.all(np.isfinite(vox)) or not np.all(vox == np.round(vox)):
                raise ValueError("voxels must be integer valued")
        vox = np.clip(vox, HU_MIN, HU_MAX).astype(np.int16)
        vox.flags.writeable = False
        spacing = tuple(float(s) for s in self.spacing)
        if len(spacing) != 3 or not all(math.isfinite(s) and s > 0 for s in spacing):
            raise ValueError(f"spacing must be three positive finite values, got {self.spacing}")
        thick = self.effective_thickness_mm
        thick = spacing[2] if thick is None else float(thick)
        if not (math.isfinite(thick) and thick > 0):
            raise ValueError("effective thickness must be positive")
        object.__setattr__(self, "voxels", vox)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "subject_id", str(self.subject_id))
        object.__setattr__(self, "effective_thickness_mm", thick)

    @property
    def dims(self) -> tuple[int, int, int]:
        nz, ny, nx = self.voxels.shape
        return nx, ny, nz

    @property
    def voxel_volume_mm3(self) -> float:
        sx, sy, sz = self.spacing
        return sx * sy * sz

    def __eq__(self, other):
        if not isinstance(other, CtVolume):
            return NotImplemented
        return (
            self.spacing == other.spacing
            and self.subject_id == other.subject_id
            and self.effective_thickness_mm == other.effective_thickness_mm
            and np.array_equal(self.voxels, other.voxels)
        )

    __hash__ = None


class BoundingBox(NamedTuple):
    """Axis aligned box, ``lo`` inclusive and ``hi`` exclusive, both (x, y, z)."""

    lo: tuple[int, int, int]
    hi: tuple[int, int, int]

    @classmethod
    def make(cls, lo: Sequence[int], hi: Sequence[int]) -> "BoundingBox":
        lo = tuple(int(v) for v in lo)
        hi = tuple(int(v) for v in hi)
        if len(lo) != 3 or len(hi) != 3:
            raise ValueError("bounding box corners need three coordinates")
        if any(a >= b for a, b in zip(lo, hi)):
            raise ValueError(f"empty bounding box {lo} -> {hi}")
        if any(a < 0 for a in lo):
            raise ValueError(f"negative bounding box corner {lo}")
        return cls(lo, hi)

    @classmethod
    def full(cls, vol: CtVolume) -> "BoundingBox":
        return cls.make((0, 0, 0), vol.dims)

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(b - a for a, b in zip(self.lo, self.hi))

    @property
    def slices(self) -> tuple[slice, slice, slice]:
        """Index expression for a ``(z, y, x)`` array."""
        return (
            slice(self.lo[2], self.hi[2]),
            slice(self.lo[1], self.hi[1]),
            slice(self.lo[0], self.hi[0]),
        )

    def fits(self, dims: Sequence[int]) -> bool:
        return all(0 <= a < b <= d for a, b, d in zip(self.lo, self.hi, dims))

    def offset(self, delta: Sequence[int]) -> "BoundingBox":
        return BoundingBox.make(
            [a + d for a, d in zip(self.lo, delta)], [b + d for b, d in zip(self.hi, delta)]
        )

    def iou(self, other: "BoundingBox") -> float:
        inter = 1
        for a0, a1, b0, b1 in zip(self.lo, self.hi, other.lo, other.hi):
            inter *= max(0, min(a1, b1) - max(a0, b0))
        union = math.prod(self.shape) + math.prod(other.shape) - inter
        return inter / union

    def to_json(self) -> dict:
        return {"lo": list(self.lo), "hi": list(self.hi)}

    @classmethod
    def from_json(cls, obj) -> "BoundingBox":
        return cls.make(obj["lo"], obj["hi"])


# ---------------------------------------------------------------------------
# file format


def _header(vol: CtVolume) -> bytes:
    header = {
        "subject_id": vol.subject_id,
        "dims": list(vol.dims),
        "spacing_mm": list(vol.spacing),
        "effective_thickness_mm": vol.effective_thickness_mm,
        "hu_offset": 0,
    }
    return json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")


def volume_to_bytes(vol: CtVolume) -> bytes:
    header = _header(vol)
    return b"".join(
        [
            MAGIC,
            struct.pack("<H", FORMAT_VERSION),
            struct.pack("<I", len(header)),
            header,
            vol.voxels.astype("<i2").tobytes(order="C"),
        ]
    )


def volume_from_bytes(data: bytes) -> CtVolume:
    if len(data) < 12 or data[:6] != MAGIC:
        raise MalformedHeaderError("missing CTVOL magic")
    (version,) = struct.unpack("<H", data[6:8])
    if version != FORMAT_VERSION:
        raise UnsupportedVersionError(f"CTVOL version {version} is not supported")
    (hlen,) = struct.unpack("<I", data[8:12])
    if 12 + hlen > len(data):
        raise MalformedHeaderError("header length exceeds file size")
    try:
        header = json.loads(data[12 : 12 + hlen].decode("utf-8"))
        nx, ny, nz = (int(v) for v in header["dims"])
        spacing = tuple(float(v) for v in header["spacing_mm"])
        subject_id = header.get("subject_id", "")
        thickness = header.get("effective_thickness_mm")
        offset = int(header.get("hu_offset", 0))
    except (ValueError, KeyError, TypeError) as exc:
        raise MalformedHeaderError(f"unreadable CTVOL header: {exc}") from exc
    if min(nx, ny, nz) < 1:
        raise MalformedHeaderError(f"invalid dims {header['dims']}")
    payload = data[12 + hlen :]
    expected = 2 * nx * ny * nz
    if len(payload) != expected:
        raise PayloadSizeError(f"payload holds {len(payload)} bytes, expected {expected}")
    voxels = np.frombuffer(payload, dtype="<i2").reshape(nz, ny, nx).astype(np.int32) + offset
    return CtVolume(voxels, spacing, subject_id, thickness)


def save_volume(vol: CtVolume, path) -> None:
    Path(path).write_bytes(volume_to_bytes(vol))


def load_volume(path) -> CtVolume:
    return volume_from_bytes(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# scoring preconditions and geometry


@dataclass(frozen=True)
class Validation:
    accepted: bool
    reason: str
    min_slices: int

    def __bool__(self):
        return self.accepted


def validate_for_scoring(vol: CtVolume, min_slices: int = CLINICAL_MIN_SLICES) -> Validation:
    """Apply the slice-count and slice-thickness exclusion rules.

    ``min_slices`` defaults to the clinical floor of 100; pass
    ``PHANTOM_MIN_SLICES`` for desk-scale phantoms.
    """
    nz = vol.dims[2]
    sz = vol.spacing[2]
    if nz < min_slices:
        return Validation(False, f"too few slices ({nz} < {min_slices})", min_slices)
    if sz > MAX_SLICE_THICKNESS_MM:
        return Validation(False, f"slices too thick ({sz:g} mm > {MAX_SLICE_THICKNESS_MM:g} mm)", min_slices)
    return Validation(True, "accepted", min_slices)


def slab_weights(nz: int, sz: float, thickness_mm: float = 3.0, increment_mm: float = 1.5) -> np.ndarray:
    """Overlap weights mapping ``nz`` input slices onto output slabs.

    Input slice ``i`` covers ``[i*sz, (i+1)*sz)``. Output slab ``k`` is
    centred at ``thickness/2 + k*increment`` and only slabs fully inside the
    input coverage are produced. Rows sum to one.
    """
    if sz > thickness_mm + 1e-12:
        raise ValueError(
            f"input slices ({sz:g} mm) are thicker than the target thickness ({thickness_mm:g} mm)"
        )
    extent = nz * sz
    n_out = int(math.floor((extent - thickness_mm) / increment_mm + 1e-9)) + 1
    if n_out < 1:
        raise ValueError("volume is shorter than one output slab")
    starts = np.arange(n_out) * increment_mm
    edges = np.arange(nz + 1) * sz
    lo = np.maximum(starts[:, None], edges[None, :-1])
    hi = np.minimum(starts[:, None] + thickness_mm, edges[None, 1:])
    return np.clip(hi - lo, 0.0, None) / thickness_mm


def slab_average(profile: np.ndarray, sz: float, thickness_mm: float = 3.0, increment_mm: float = 1.5) -> np.ndarray:
    """Slab-average a float array along axis 0."""
    profile = np.asarray(profile, dtype=np.float64)
    w = slab_weights(profile.shape[0], sz, thickness_mm, increment_mm)
    return np.tensordot(w, profile, axes=(1, 0))


def resample_z(vol: CtVolume, thickness_mm: float = 3.0, increment_mm: float = 1.5) -> CtVolume:
    averaged = slab_average(vol.voxels, vol.spacing[2], thickness_mm, increment_mm)
    voxels = np.clip(np.rint(averaged), HU_MIN, HU_MAX).astype(np.int16)
    sx, sy, _ = vol.spacing
    return CtVolume(voxels, (sx, sy, increment_mm), vol.subject_id, thickness_mm)


def crop(vol: CtVolume, box: BoundingBox) -> CtVolume:
    if not box.fits(vol.dims):
        raise ValueError(f"box {tuple(box)} does not fit volume dims {vol.dims}")
    return CtVolume(vol.voxels[box.slices], vol.spacing, vol.subject_id, vol.effective_thickness_mm)


def pad_slice_to(image: np.ndarray, target: tuple[int, int], fill: float = AIR_HU) -> np.ndarray:
    """Centre a 2D slice inside a ``target``-sized canvas filled with ``fill``."""
    image = np.asarray(image)
    h, w = image.shape
    th, tw = target
    if h > th or w > tw:
        raise OversizeError(f"slice {h}x{w} exceeds input size {th}x{tw}")
    out = np.full((th, tw), fill, dtype=np.result_type(image.dtype, np.asarray(fill).dtype))
    top = (th - h) // 2
    left = (tw - w) // 2
    out[top : top + h, left : left + w] = image
    return out
