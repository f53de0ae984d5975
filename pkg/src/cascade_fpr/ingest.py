"""Volume headers, raw voxel files, candidate lists and patch extraction."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

__all__ = [
    "IngestError",
    "HeaderError",
    "CandidateParseError",
    "OutOfBoundsError",
    "VolumeMeta",
    "Volume",
    "Candidate",
    "Dataset",
    "ELEMENT_TYPES",
    "HU_WINDOW",
    "parse_volume_header",
    "format_volume_header",
    "load_volume",
    "volume_bytes",
    "read_volume",
    "write_volume",
    "parse_candidates",
    "format_candidates",
    "world_to_voxel",
    "voxel_to_world",
    "extract_patch",
    "extract_patches",
    "normalize_hu",
]

# MetaImage element type tag -> little-endian numpy dtype
ELEMENT_TYPES = {"MET_SHORT": np.dtype("<i2"), "MET_DOUBLE": np.dtype("<f8")}

HU_WINDOW = (-1000.0, 400.0)

CANDIDATE_HEADER = ["seriesuid", "coordX", "coordY", "coordZ", "class"]

_REQUIRED_KEYS = ("NDims", "DimSize", "ElementSpacing", "Offset", "ElementType", "ElementDataFile")


class IngestError(ValueError):
    """Base class for structured ingestion errors."""


class HeaderError(IngestError):
    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


class CandidateParseError(IngestError):
    def __init__(self, row: int, message: str):
        super().__init__(f"row {row}: {message}")
        self.row = row


class OutOfBoundsError(IngestError):
    def __init__(self, index: tuple[int, int, int], dims: tuple[int, int, int]):
        super().__init__(f"voxel index {index} outside volume of dims {dims}")
        self.index = index
        self.dims = dims


@dataclass(frozen=True)
class VolumeMeta:
    dims: tuple[int, int, int]
    spacing: tuple[float, float, float]
    origin: tuple[float, float, float]
    element_type: str = "MET_SHORT"
    data_file: str = ""

    def __post_init__(self):
        if len(self.dims) != 3 or any(int(d) <= 0 for d in self.dims):
            raise HeaderError("DimSize", f"dims must be three positive integers, got {self.dims}")
        if len(self.spacing) != 3 or not all(math.isfinite(s) and s > 0 for s in self.spacing):
            raise HeaderError("ElementSpacing", f"spacing must be positive, got {self.spacing}")
        if len(self.origin) != 3 or not all(math.isfinite(o) for o in self.origin):
            raise HeaderError("Offset", f"origin must be three finite numbers, got {self.origin}")
        if self.element_type not in ELEMENT_TYPES:
            raise HeaderError("ElementType", f"unsupported element type {self.element_type!r}")

    @property
    def dtype(self) -> np.dtype:
        return ELEMENT_TYPES[self.element_type]

    @property
    def nbytes(self) -> int:
        return int(np.prod(self.dims)) * self.dtype.itemsize


@dataclass(frozen=True, eq=False)
class Volume:
    """Voxel intensities stored ``[z, y, x]`` (x fastest, matching the raw file)."""

    meta: VolumeMeta
    voxels: np.ndarray

    def __post_init__(self):
        x, y, z = self.meta.dims
        if self.voxels.shape != (z, y, x):
            raise IngestError(f"voxel array shape {self.voxels.shape} does not match dims {self.meta.dims}")

    def at(self, x: int, y: int, z: int):
        return self.voxels[z, y, x]


@dataclass
class Candidate:
    id: int
    scan_id: str
    world_center: tuple[float, float, float]
    label: int
    voxel_center: tuple[int, int, int] | None = None
    probability: float | None = None

    def __post_init__(self):
        if self.label not in (0, 1):
            raise ValueError(f"label must be 0 or 1, got {self.label!r}")
        if self.probability is not None and not 0.0 <= self.probability <= 1.0:
            raise ValueError(f"probability must lie in [0, 1], got {self.probability}")


@dataclass
class Dataset:
    volumes: dict[str, Volume]
    candidates: list[Candidate]
    manifest: dict = field(default_factory=dict)

    @property
    def scan_count(self) -> int:
        return len(self.volumes)

    def labels(self) -> np.ndarray:
        return np.array([c.label for c in self.candidates], dtype=np.int64)


# --------------------------------------------------------------------------
# headers


def _floats(key: str, raw: str, n: int) -> tuple[float, ...]:
    parts = raw.split()
    if len(parts) != n:
        raise HeaderError(key, f"expected {n} values, got {len(parts)}")
    try:
        vals = tuple(float(p) for p in parts)
    except ValueError:
        raise HeaderError(key, f"non-numeric value in {raw!r}") from None
    if not all(math.isfinite(v) for v in vals):
        raise HeaderError(key, f"non-finite value in {raw!r}")
    return vals


def parse_volume_header(text: str | bytes) -> VolumeMeta:
    """Parse a MetaImage-style ``key = value`` header into a :class:`VolumeMeta`.

    Unknown keys are ignored. ``Origin`` is accepted as an alias of ``Offset``.
    """
    if isinstance(text, (bytes, bytearray)):
        try:
            text = bytes(text).decode("ascii")
        except UnicodeDecodeError:
            raise HeaderError("<header>", "header is not ASCII text") from None
    fields: dict[str, str] = {}
    for line in text.splitlines():
        if "=" not in line:
            continue
        key, _, value = line.partition("=")
        key = key.strip()
        if key == "Origin":
            key = "Offset"
        fields.setdefault(key, value.strip())
    for key in _REQUIRED_KEYS:
        if key not in fields:
            raise HeaderError(key, "missing required key")
    if fields["NDims"] != "3":
        raise HeaderError("NDims", f"only 3-D volumes are supported, got {fields['NDims']!r}")
    if fields.get("BinaryDataByteOrderMSB", "False").lower() == "true":
        raise HeaderError("BinaryDataByteOrderMSB", "big-endian data is not supported")
    dims = _floats("DimSize", fields["DimSize"], 3)
    if not all(d == int(d) and d > 0 for d in dims):
        raise HeaderError("DimSize", f"dims must be positive integers, got {fields['DimSize']!r}")
    spacing = _floats("ElementSpacing", fields["ElementSpacing"], 3)
    origin = _floats("Offset", fields["Offset"], 3)
    etype = fields["ElementType"]
    if etype not in ELEMENT_TYPES:
        raise HeaderError("ElementType", f"unsupported element type {etype!r}")
    return VolumeMeta(
        dims=tuple(int(d) for d in dims),
        spacing=spacing,
        origin=origin,
        element_type=etype,
        data_file=fields["ElementDataFile"],
    )


def format_volume_header(meta: VolumeMeta) -> str:
    def join(vals):
        return " ".join(repr(float(v)) if isinstance(v, float) else str(v) for v in vals)

    return (
        "ObjectType = Image\n"
        "NDims = 3\n"
        "BinaryData = True\n"
        "BinaryDataByteOrderMSB = False\n"
        f"Offset = {join(meta.origin)}\n"
        f"ElementSpacing = {join(meta.spacing)}\n"
        f"DimSize = {join(meta.dims)}\n"
        f"ElementType = {meta.element_type}\n"
        f"ElementDataFile = {meta.data_file}\n"
    )


# --------------------------------------------------------------------------
# raw voxels


def load_volume(meta: VolumeMeta, raw: bytes) -> Volume:
    if len(raw) != meta.nbytes:
        raise IngestError(f"raw data size mismatch: expected {meta.nbytes} bytes, got {len(raw)}")
    x, y, z = meta.dims
    voxels = np.frombuffer(raw, dtype=meta.dtype).reshape(z, y, x).astype(meta.dtype.newbyteorder("="))
    return Volume(meta, voxels)


def volume_bytes(volume: Volume) -> bytes:
    return np.ascontiguousarray(volume.voxels, dtype=volume.meta.dtype).tobytes()


def read_volume(header_path: str | Path) -> Volume:
    header_path = Path(header_path)
    meta = parse_volume_header(header_path.read_bytes())
    return load_volume(meta, (header_path.parent / meta.data_file).read_bytes())


def write_volume(volume: Volume, header_path: str | Path) -> None:
    header_path = Path(header_path)
    meta = volume.meta
    if not meta.data_file:
        meta = replace(meta, data_file=header_path.with_suffix(".raw").name)
    header_path.write_text(format_volume_header(meta), encoding="ascii")
    (header_path.parent / meta.data_file).write_bytes(volume_bytes(volume))


# --------------------------------------------------------------------------
# candidates


def parse_candidates(text: str | bytes) -> list[Candidate]:
    """Parse a ``seriesuid,coordX,coordY,coordZ,class`` CSV into candidates.

    Candidate ids are the 0-based data-row index. Row numbers in errors count
    the header as row 1.
    """
    if isinstance(text, (bytes, bytearray)):
        try:
            text = bytes(text).decode("utf-8-sig")
        except UnicodeDecodeError:
            raise CandidateParseError(0, "file is not UTF-8 text") from None
    reader = csv.reader(io.StringIO(text))
    try:
        header = next(reader)
    except StopIteration:
        raise CandidateParseError(1, "missing header line") from None
    except csv.Error as exc:
        raise CandidateParseError(1, str(exc)) from None
    if [h.strip() for h in header] != CANDIDATE_HEADER:
        raise CandidateParseError(1, f"expected header {','.join(CANDIDATE_HEADER)}")
    out: list[Candidate] = []
    row_no = 1
    while True:
        try:
            row = next(reader)
        except StopIteration:
            break
        except csv.Error as exc:
            raise CandidateParseError(row_no + 1, str(exc)) from None
        row_no += 1
        if not row:
            continue
        if len(row) != 5:
            raise CandidateParseError(row_no, f"expected 5 fields, got {len(row)}")
        try:
            xyz = tuple(float(v) for v in row[1:4])
        except ValueError:
            raise CandidateParseError(row_no, "non-numeric coordinate") from None
        if not all(math.isfinite(v) for v in xyz):
            raise CandidateParseError(row_no, "non-finite coordinate")
        label = row[4].strip()
        if label not in ("0", "1"):
            raise CandidateParseError(row_no, f"class must be 0 or 1, got {label!r}")
        out.append(Candidate(id=len(out), scan_id=row[0].strip(), world_center=xyz, label=int(label)))
    return out


def format_candidates(candidates: Sequence[Candidate]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CANDIDATE_HEADER)
    for c in candidates:
        w.writerow([c.scan_id, *(repr(float(v)) for v in c.world_center), c.label])
    return buf.getvalue()


# --------------------------------------------------------------------------
# geometry and patches


def _round_half_away(v: float) -> int:
    return int(math.copysign(math.floor(abs(v) + 0.5), v))


def world_to_voxel(world: Sequence[float], meta: VolumeMeta) -> tuple[int, int, int]:
    idx = tuple(_round_half_away((w - o) / s) for w, o, s in zip(world, meta.origin, meta.spacing))
    if not all(0 <= i < d for i, d in zip(idx, meta.dims)):
        raise OutOfBoundsError(idx, meta.dims)
    return idx


def voxel_to_world(voxel: Sequence[int], meta: VolumeMeta) -> tuple[float, float, float]:
    return tuple(o + s * v for v, o, s in zip(voxel, meta.origin, meta.spacing))


def normalize_hu(values: np.ndarray) -> np.ndarray:
    lo, hi = HU_WINDOW
    return (np.clip(np.asarray(values, dtype=np.float64), lo, hi) - lo) / (hi - lo)


def extract_patch(volume: Volume, center: Sequence[int], size: int = 48, slabs: int = 3) -> np.ndarray:
    """Axial ``size x size x slabs`` crop around ``center = (x, y, z)``.

    Rows index y, columns index x, channels the slices ``z - slabs//2 ...``.
    Pixels outside the volume read as air before the HU window is applied.
    """
    cx, cy, cz = (int(v) for v in center)
    nz, ny, nx = volume.voxels.shape
    x0, y0, z0 = cx - size // 2, cy - size // 2, cz - slabs // 2
    block = np.full((slabs, size, size), HU_WINDOW[0])
    zs, ys, xs = max(z0, 0), max(y0, 0), max(x0, 0)
    ze, ye, xe = min(z0 + slabs, nz), min(y0 + size, ny), min(x0 + size, nx)
    if zs < ze and ys < ye and xs < xe:
        block[zs - z0:ze - z0, ys - y0:ye - y0, xs - x0:xe - x0] = volume.voxels[zs:ze, ys:ye, xs:xe]
    return normalize_hu(block.transpose(1, 2, 0))


def extract_patches(dataset: Dataset, size: int = 48, slabs: int = 3) -> np.ndarray:
    """Patches for every candidate, in candidate order, as an ``(N, size, size, slabs)`` array.

    Candidates without a ``voxel_center`` are resolved against their scan's
    geometry first (and the result stored on the candidate).
    """
    out = np.empty((len(dataset.candidates), size, size, slabs))
    for i, cand in enumerate(dataset.candidates):
        vol = dataset.volumes.get(cand.scan_id)
        if vol is None:
            raise IngestError(f"candidate {cand.id} refers to unknown scan {cand.scan_id!r}")
        if cand.voxel_center is None:
            cand.voxel_center = world_to_voxel(cand.world_center, vol.meta)
        out[i] = extract_patch(vol, cand.voxel_center, size, slabs)
    return out
