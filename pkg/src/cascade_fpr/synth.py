"""Seeded synthetic CT-like volumes with labelled candidates.

Each volume is tiled into candidate cells of ``patch_size x patch_size`` voxels
in-plane and ``cell_depth`` slices.  Every cell holds one candidate at its
centre:

* nodules (label 1) are solid spheres of random radius and density, some of
  them touching a vessel;
* non-nodules (label 0) are either a vessel-like tube through the centre at a
  random 3-D orientation, or background only (optionally with a vessel
  passing off-centre).

Volumes are stored as int16 Hounsfield-like values.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .ingest import (
    Candidate,
    Dataset,
    Volume,
    VolumeMeta,
    format_candidates,
    parse_candidates,
    read_volume,
    voxel_to_world,
    write_volume,
)
from .rng import make_rng

__all__ = ["SynthSpec", "SynthConfigError", "synthesize_dataset", "write_dataset", "load_dataset",
           "load_real_dataset"]

MANIFEST_NAME = "manifest.json"


class SynthConfigError(ValueError):
    pass


@dataclass(frozen=True)
class SynthSpec:
    n_positive: int = 150
    n_negative: int = 4500
    volume_dims: tuple[int, int, int] = (128, 128, 20)
    patch_size: int = 16
    cell_depth: int = 5
    spacing: tuple[float, float, float] = (0.75, 0.75, 1.25)
    background_hu: float = -850.0
    noise_hu: float = 60.0
    nodule_radius: tuple[float, float] = (1.8, 4.5)
    nodule_hu: tuple[float, float] = (-150.0, 80.0)
    vessel_radius: tuple[float, float] = (0.8, 2.2)
    vessel_hu: tuple[float, float] = (-250.0, 60.0)
    empty_fraction: float = 0.55
    juxtavascular_fraction: float = 0.3
    center_jitter: float = 1.0

    def __post_init__(self):
        if self.n_positive < 0 or self.n_negative < 0:
            raise SynthConfigError("counts must be >= 0")
        x, y, z = self.volume_dims
        if self.patch_size < 2 or self.cell_depth < 3:
            raise SynthConfigError("patch_size must be >= 2 and cell_depth >= 3")
        if self.patch_size > min(x, y) or self.cell_depth > z:
            raise SynthConfigError(
                f"candidate cell {self.patch_size}x{self.patch_size}x{self.cell_depth} "
                f"does not fit volume dims {self.volume_dims}")
        if not 0 <= self.empty_fraction <= 1 or not 0 <= self.juxtavascular_fraction <= 1:
            raise SynthConfigError("fractions must lie in [0, 1]")

    @property
    def cells_per_volume(self) -> tuple[int, int, int]:
        x, y, z = self.volume_dims
        return x // self.patch_size, y // self.patch_size, z // self.cell_depth

    @property
    def capacity(self) -> int:
        return int(np.prod(self.cells_per_volume))

    def to_dict(self) -> dict:
        return asdict(self)


def _soft_inside(signed_depth: np.ndarray) -> np.ndarray:
    # ~1 inside, ~0 outside, 1-voxel wide partial-volume edge
    return 1.0 / (1.0 + np.exp(-signed_depth / 0.35))


def _random_direction(rng: np.random.Generator) -> np.ndarray:
    v = rng.normal(size=3)
    return v / np.linalg.norm(v)


def _tube(coords: np.ndarray, point: np.ndarray, direction: np.ndarray, radius: float) -> np.ndarray:
    rel = coords - point
    along = rel @ direction
    dist = np.sqrt(np.maximum((rel * rel).sum(-1) - along * along, 0.0))
    return _soft_inside(radius - dist)


def _render_cell(kind: str, spec: SynthSpec, rng: np.random.Generator, zscale: float) -> np.ndarray:
    p, d = spec.patch_size, spec.cell_depth
    zz, yy, xx = np.meshgrid(np.arange(d), np.arange(p), np.arange(p), indexing="ij")
    # physical-ish coordinates in in-plane voxel units
    coords = np.stack([xx, yy, zz * zscale], axis=-1).astype(np.float64)
    centre = np.array([p // 2, p // 2, (d // 2) * zscale], dtype=np.float64)
    centre[:2] += rng.uniform(-spec.center_jitter, spec.center_jitter, size=2)

    density = np.zeros((d, p, p))
    structure_hu = np.zeros((d, p, p))

    def add(mask, hu):
        nonlocal density, structure_hu
        structure_hu = np.where(mask > density, hu, structure_hu)
        density = np.maximum(density, mask)

    if kind == "nodule":
        radius = rng.uniform(*spec.nodule_radius)
        dist = np.sqrt(((coords - centre) ** 2).sum(-1))
        add(_soft_inside(radius - dist), rng.uniform(*spec.nodule_hu))
        if rng.random() < spec.juxtavascular_fraction:
            direction = _random_direction(rng)
            normal = np.cross(direction, _random_direction(rng))
            normal /= np.linalg.norm(normal)
            vr = rng.uniform(*spec.vessel_radius)
            add(_tube(coords, centre + normal * (radius + vr * 0.8), direction, vr),
                rng.uniform(*spec.vessel_hu))
    elif kind == "vessel":
        direction = _random_direction(rng)
        add(_tube(coords, centre, direction, rng.uniform(*spec.vessel_radius)),
            rng.uniform(*spec.vessel_hu))
        if rng.random() < 0.3:
            add(_tube(coords, centre, _random_direction(rng), rng.uniform(*spec.vessel_radius) * 0.7),
                rng.uniform(*spec.vessel_hu))
    else:  # "empty"
        if rng.random() < 0.5:
            direction = _random_direction(rng)
            offset = np.cross(direction, _random_direction(rng))
            offset /= np.linalg.norm(offset)
            add(_tube(coords, centre + offset * rng.uniform(4.0, p / 2), direction,
                      rng.uniform(*spec.vessel_radius)),
                rng.uniform(*spec.vessel_hu))

    noise = rng.normal(0.0, spec.noise_hu, size=(d, p, p))
    return spec.background_hu + density * (structure_hu - spec.background_hu) + noise


def synthesize_dataset(spec: SynthSpec, seed: int) -> Dataset:
    """Generate volumes and candidates; identical ``(spec, seed)`` give identical output."""
    n_total = spec.n_positive + spec.n_negative
    layout_rng = make_rng(seed, "synth", "layout")
    labels = np.array([1] * spec.n_positive + [0] * spec.n_negative, dtype=np.int64)
    labels = labels[layout_rng.permutation(n_total)] if n_total else labels
    neg_kinds = np.where(layout_rng.random(n_total) < spec.empty_fraction, "empty", "vessel")

    cap = spec.capacity
    nxc, nyc, nzc = spec.cells_per_volume
    n_volumes = -(-n_total // cap)
    x, y, z = spec.volume_dims
    zscale = spec.spacing[2] / spec.spacing[0]
    origin = (-x * spec.spacing[0] / 2, -y * spec.spacing[1] / 2, -z * spec.spacing[2])

    volumes: dict[str, Volume] = {}
    candidates: list[Candidate] = []
    for v in range(n_volumes):
        scan_id = f"synth-{v:04d}"
        meta = VolumeMeta((x, y, z), tuple(spec.spacing), origin, "MET_SHORT", f"{scan_id}.raw")
        rng = make_rng(seed, "synth", "volume", v)
        vox = spec.background_hu + rng.normal(0.0, spec.noise_hu, size=(z, y, x))
        for slot in range(cap):
            idx = v * cap + slot
            if idx >= n_total:
                break
            cz, rem = divmod(slot, nxc * nyc)
            cy, cx = divmod(rem, nxc)
            label = int(labels[idx])
            kind = "nodule" if label == 1 else str(neg_kinds[idx])
            cell = _render_cell(kind, spec, rng, zscale)
            p, d = spec.patch_size, spec.cell_depth
            x0, y0, z0 = cx * p, cy * p, cz * d
            vox[z0:z0 + d, y0:y0 + p, x0:x0 + p] = cell
            centre = (x0 + p // 2, y0 + p // 2, z0 + d // 2)
            candidates.append(Candidate(id=len(candidates), scan_id=scan_id,
                                        world_center=voxel_to_world(centre, meta),
                                        label=label, voxel_center=centre))
        vox = np.clip(np.rint(vox), -32768, 32767).astype(np.int16)
        volumes[scan_id] = Volume(meta, vox)

    manifest = {"seed": int(seed), "spec": spec.to_dict(),
                "counts": {"positive": spec.n_positive, "negative": spec.n_negative},
                "scans": len(volumes)}
    return Dataset(volumes, candidates, manifest)


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_dataset(dataset: Dataset, out_dir: str | Path) -> Path:
    """Write volumes (``.mhd`` + ``.raw``), ``candidates.csv`` and ``manifest.json``."""
    out = Path(out_dir)
    (out / "volumes").mkdir(parents=True, exist_ok=True)
    files = []
    for scan_id in sorted(dataset.volumes):
        header = out / "volumes" / f"{scan_id}.mhd"
        write_volume(dataset.volumes[scan_id], header)
        raw = header.with_name(dataset.volumes[scan_id].meta.data_file)
        files.append({"scan_id": scan_id, "header": f"volumes/{header.name}",
                      "header_sha256": _sha256(header),
                      "raw": f"volumes/{raw.name}", "raw_sha256": _sha256(raw)})
    cand_path = out / "candidates.csv"
    cand_path.write_text(format_candidates(dataset.candidates), encoding="utf-8")
    manifest = dict(dataset.manifest)
    manifest["volumes"] = files
    manifest["candidates"] = {"path": "candidates.csv", "sha256": _sha256(cand_path)}
    path = out / MANIFEST_NAME
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def load_dataset(directory: str | Path) -> Dataset:
    """Load a directory written by :func:`write_dataset`."""
    directory = Path(directory)
    manifest = json.loads((directory / MANIFEST_NAME).read_text(encoding="utf-8"))
    volumes = {entry["scan_id"]: read_volume(directory / entry["header"]) for entry in manifest["volumes"]}
    candidates = parse_candidates((directory / manifest["candidates"]["path"]).read_bytes())
    return Dataset(volumes, candidates, manifest)


def load_real_dataset(volume_dir: str | Path, candidates_file: str | Path) -> Dataset:
    """Volumes named ``<seriesuid>.mhd`` in ``volume_dir`` plus a candidates CSV.

    Only scans referenced by at least one candidate are loaded.
    """
    volume_dir = Path(volume_dir)
    candidates = parse_candidates(Path(candidates_file).read_bytes())
    volumes = {}
    for scan_id in sorted({c.scan_id for c in candidates}):
        volumes[scan_id] = read_volume(volume_dir / f"{scan_id}.mhd")
    return Dataset(volumes, candidates, {"source": "real", "volume_dir": str(volume_dir),
                                         "candidates": str(candidates_file)})
