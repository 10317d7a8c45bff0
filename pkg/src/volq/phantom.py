"""Synthetic labelled brain-like volumes, preprocessing, and their file formats.

Volumes are held as float32 arrays indexed ``[x, y, z]``. On disk the voxel
order is x fastest, then y, then z (Fortran order of that array).
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import FormatError

VOLUME_MAGIC = b"VOLB"
_HEADER = struct.Struct("<4sIII")
MAX_VOXELS = 1 << 31


@dataclass
class Volume:
    voxels: np.ndarray

    def __post_init__(self):
        self.voxels = np.asarray(self.voxels, dtype=np.float32)
        if self.voxels.ndim != 3 or min(self.voxels.shape) < 1:
            raise ValueError(f"volume needs three positive dims, got {self.voxels.shape}")

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.voxels.shape  # type: ignore[return-value]

    def in_unit_range(self) -> bool:
        return bool(self.voxels.min() >= 0.0 and self.voxels.max() <= 1.0)


@dataclass
class LabeledVolume:
    id: str
    volume: Volume
    label: int
    split: str = "train"

    def __post_init__(self):
        if self.label not in (0, 1):
            raise ValueError(f"label must be 0 or 1, got {self.label}")


@dataclass(frozen=True)
class PhantomConfig:
    """Generator settings.

    ``native_xy_factor`` sets the acquisition in-plane size as a multiple of
    ``out_dims`` so that :func:`downsample_xy` has real work to do; the native
    slice count is drawn from ``native_z_range`` and later zero-padded.
    """

    out_dims: tuple[int, int, int] = (32, 32, 16)
    native_xy_factor: int = 2
    native_z_range: tuple[int, int] = (12, 16)
    lesion_count_range: tuple[int, int] = (1, 3)
    lesion_radius_range: tuple[float, float] = (4.0, 6.0)
    lesion_contrast: float = 0.55
    noise_sigma: float = 0.03
    rng_seed: int = 0

    @property
    def native_xy(self) -> tuple[int, int]:
        return (self.out_dims[0] * self.native_xy_factor, self.out_dims[1] * self.native_xy_factor)


PRESETS: dict[str, PhantomConfig] = {
    # large lesions so that 90 training volumes suffice to generalise
    "desk": PhantomConfig(lesion_count_range=(2, 4), lesion_radius_range=(10.0, 14.0)),
    # 256 x 256 in-plane acquisitions with 28..36 slices
    "paper": PhantomConfig(out_dims=(64, 64, 36), native_xy_factor=4, native_z_range=(28, 36),
                           lesion_radius_range=(8.0, 14.0)),
}


def _stream(seed: int, ident: str, purpose: str) -> np.random.Generator:
    digest = hashlib.blake2b(f"{ident}\0{purpose}".encode(), digest_size=8).digest()
    return np.random.default_rng([seed, int.from_bytes(digest, "little")])


def _brain_field(shape: tuple[int, int, int], rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Smooth ellipsoidal intensity field and the ellipsoid mask."""
    nx, ny, nz = shape
    cx, cy, cz = (np.array(shape) - 1) / 2.0 + rng.uniform(-0.03, 0.03, 3) * np.array(shape)
    rx, ry, rz = np.array([nx, ny, nz]) * rng.uniform(0.36, 0.44, 3)
    x, y, z = np.meshgrid(np.arange(nx), np.arange(ny), np.arange(nz), indexing="ij")
    r2 = ((x - cx) / rx) ** 2 + ((y - cy) / ry) ** 2 + ((z - cz) / rz) ** 2
    mask = r2 <= 1.0
    base = rng.uniform(0.30, 0.38)
    # brighter rim (cortex-like) fading to the centre
    field_ = np.where(mask, base + 0.12 * r2, 0.0)
    return field_, mask


def generate_phantom(config: PhantomConfig, label: int, id: str) -> LabeledVolume:
    """Make one native-resolution phantom; deterministic per ``(rng_seed, id)``.

    The background and noise come from a stream that ignores ``label``, so a
    label-1 phantom equals its label-0 twin outside the lesion spheres.
    """
    if label not in (0, 1):
        raise ValueError(f"label must be 0 or 1, got {label}")
    bg_rng = _stream(config.rng_seed, id, "background")
    nx, ny = config.native_xy
    nz = int(bg_rng.integers(config.native_z_range[0], config.native_z_range[1] + 1))
    shape = (nx, ny, nz)
    r_max = config.lesion_radius_range[1]
    if 2 * r_max >= min(nx, ny):
        raise ValueError(f"lesion radius {r_max} does not fit a {shape} volume")

    field_, mask = _brain_field(shape, bg_rng)
    noise = bg_rng.normal(0.0, config.noise_sigma, shape) if config.noise_sigma > 0 else 0.0
    vol = field_ + np.where(mask, noise, 0.0)

    if label == 1:
        les_rng = _stream(config.rng_seed, id, "lesions")
        lo, hi = config.lesion_count_range
        inside = np.argwhere(mask)
        x, y, z = np.meshgrid(np.arange(nx), np.arange(ny), np.arange(nz), indexing="ij")
        for _ in range(int(les_rng.integers(lo, hi + 1))):
            centre = inside[les_rng.integers(len(inside))]
            radius = les_rng.uniform(*config.lesion_radius_range)
            # anisotropic voxels: slices are thicker than in-plane pixels
            zr = max(radius / config.native_xy_factor, 1.0)
            d2 = ((x - centre[0]) / radius) ** 2 + ((y - centre[1]) / radius) ** 2 \
                + ((z - centre[2]) / zr) ** 2
            blob = d2 <= 1.0
            vol = np.where(blob, vol + config.lesion_contrast * (1.0 - 0.3 * d2), vol)

    vol = np.clip(vol, 0.0, 1.0).astype(np.float32)
    return LabeledVolume(id=id, volume=Volume(vol), label=label)


def downsample_xy(v: Volume, target_xy: int | tuple[int, int]) -> Volume:
    """Block-mean pool each z-slice down to ``target_xy``."""
    tx, ty = (target_xy, target_xy) if isinstance(target_xy, int) else target_xy
    nx, ny, nz = v.dims
    if tx < 1 or ty < 1 or nx % tx or ny % ty:
        raise ValueError(f"cannot block-pool {nx}x{ny} down to {tx}x{ty}")
    fx, fy = nx // tx, ny // ty
    pooled = v.voxels.astype(np.float64).reshape(tx, fx, ty, fy, nz).mean(axis=(1, 3))
    return Volume(pooled.astype(np.float32))


def pad_z(v: Volume, target_z: int) -> Volume:
    """Append zero slices at the high-z (caudal) end up to ``target_z``."""
    nz = v.dims[2]
    if nz > target_z:
        raise ValueError(f"volume has {nz} slices, more than target {target_z}")
    if nz == target_z:
        return Volume(v.voxels.copy())
    return Volume(np.pad(v.voxels, ((0, 0), (0, 0), (0, target_z - nz))))


def preprocess(v: Volume, out_dims: Sequence[int]) -> Volume:
    return pad_z(downsample_xy(v, (out_dims[0], out_dims[1])), out_dims[2])


# file formats ----------------------------------------------------------------

def volume_to_bytes(v: Volume) -> bytes:
    nx, ny, nz = v.dims
    payload = np.asarray(v.voxels, dtype="<f4").ravel(order="F").tobytes()
    return _HEADER.pack(VOLUME_MAGIC, nx, ny, nz) + payload


def volume_from_bytes(buf: bytes) -> Volume:
    if len(buf) < _HEADER.size:
        raise FormatError(f"header needs {_HEADER.size} bytes, file has {len(buf)}", len(buf))
    magic, nx, ny, nz = _HEADER.unpack_from(buf)
    if magic != VOLUME_MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {VOLUME_MAGIC!r}", 0)
    n = nx * ny * nz
    if n == 0 or n > MAX_VOXELS:
        raise FormatError(f"dims ({nx}, {ny}, {nz}) out of range", 4)
    need = _HEADER.size + 4 * n
    if len(buf) < need:
        raise FormatError(f"truncated payload: need {n} floats, have {(len(buf) - _HEADER.size) // 4}",
                          len(buf))
    if len(buf) > need:
        raise FormatError(f"{len(buf) - need} trailing bytes after payload", need)
    data = np.frombuffer(buf, dtype="<f4", count=n, offset=_HEADER.size)
    return Volume(data.reshape((nx, ny, nz), order="F").astype(np.float32))


def write_volume(path: str | Path, v: Volume) -> None:
    Path(path).write_bytes(volume_to_bytes(v))


def read_volume(path: str | Path) -> Volume:
    return volume_from_bytes(Path(path).read_bytes())


def volume_roundtrip(path: str | Path, v: Volume) -> Volume:
    write_volume(path, v)
    return read_volume(path)


# manifests -------------------------------------------------------------------

DEFAULT_COUNTS = {"train": {0: 40, 1: 50}, "test": {0: 40, 1: 21}}


@dataclass
class ManifestEntry:
    id: str
    path: str
    label: int
    split: str

    def to_json(self) -> str:
        return json.dumps({"id": self.id, "path": self.path, "label": self.label, "split": self.split})


def build_manifest(volumes: Iterable[LabeledVolume], counts: dict | None = None,
                   suffix: str = ".volb") -> list[ManifestEntry]:
    """Assign splits class by class in input order: train quota first, then test.

    Volumes beyond the quotas are left out. ``path`` is ``<id><suffix>``,
    relative to the manifest's directory.
    """
    counts = DEFAULT_COUNTS if counts is None else counts
    pools: dict[int, list[LabeledVolume]] = {0: [], 1: []}
    for lv in volumes:
        pools[lv.label].append(lv)
    short = []
    for label in (0, 1):
        need = sum(counts.get(s, {}).get(label, 0) for s in ("train", "test"))
        if len(pools[label]) < need:
            short.append(f"label {label}: need {need}, have {len(pools[label])}")
    if short:
        raise ValueError("not enough volumes: " + "; ".join(short))
    ids = [lv.id for pool in pools.values() for lv in pool]
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate volume ids")

    entries = []
    for split in ("train", "test"):
        for label in (0, 1):
            take = counts.get(split, {}).get(label, 0)
            chosen, pools[label] = pools[label][:take], pools[label][take:]
            entries += [ManifestEntry(lv.id, lv.id + suffix, label, split) for lv in chosen]
    return entries


def write_manifest(entries: Iterable[ManifestEntry], path: str | Path) -> None:
    Path(path).write_text("".join(e.to_json() + "\n" for e in entries))


def read_manifest(path: str | Path) -> list[ManifestEntry]:
    entries = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        obj = json.loads(line)
        if obj.get("label") not in (0, 1) or obj.get("split") not in ("train", "test"):
            raise ValueError(f"{path}:{lineno}: bad label or split in {obj}")
        entries.append(ManifestEntry(str(obj["id"]), str(obj["path"]), int(obj["label"]), obj["split"]))
    return entries


@dataclass
class Split:
    """Stacked volumes of one split, ready for the trainers."""

    ids: list[str]
    volumes: np.ndarray  # (N, X, Y, Z) float32
    labels: np.ndarray  # (N,) int64
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.ids)

    def with_labels(self, labels: dict[str, int]) -> "Split":
        missing = [i for i in self.ids if i not in labels]
        if missing:
            raise ValueError(f"label map lacks ids: {', '.join(missing)}")
        return replace(self, labels=np.array([labels[i] for i in self.ids], dtype=np.int64))


def load_split(manifest_path: str | Path, split: str) -> Split:
    root = Path(manifest_path).parent
    rows = [e for e in read_manifest(manifest_path) if e.split == split]
    if not rows:
        return Split([], np.zeros((0, 1, 1, 1), np.float32), np.zeros(0, np.int64))
    vols = np.stack([read_volume(root / e.path).voxels for e in rows])
    return Split([e.id for e in rows], vols, np.array([e.label for e in rows], dtype=np.int64))


def generate_dataset(config: PhantomConfig, out_dir: str | Path, counts: dict | None = None,
                     prefix: str = "vol") -> list[ManifestEntry]:
    """Generate, preprocess, and write a full split set plus ``manifest.jsonl``."""
    counts = DEFAULT_COUNTS if counts is None else counts
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    per_label = {lab: sum(counts.get(s, {}).get(lab, 0) for s in ("train", "test")) for lab in (0, 1)}
    labels = np.repeat([0, 1], [per_label[0], per_label[1]])
    np.random.default_rng(config.rng_seed).shuffle(labels)
    made = []
    for i, lab in enumerate(labels):
        lv = generate_phantom(config, int(lab), f"{prefix}{i:04d}")
        lv.volume = preprocess(lv.volume, config.out_dims)
        made.append(lv)
    entries = build_manifest(made, counts)
    by_id = {lv.id: lv for lv in made}
    for e in entries:
        write_volume(out / e.path, by_id[e.id].volume)
    write_manifest(entries, out / "manifest.jsonl")
    return entries
