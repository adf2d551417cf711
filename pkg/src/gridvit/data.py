"""Volume I/O, slice windows, grid packing, fusion, augmentation, synthetic data.

Volumes are stored in RVF1 files::

    b"RVF1\\n"
    {"dz": 12, "h": 32, "w": 32, "dtype": "f32le", "modality": "T1", "case_id": "..."}\\n
    dz*h*w little-endian float32 values in (slice, row, col) order

A manifest is a JSON-lines file, one ``{"id", "t1", "t2", "label"}`` object per
case. Relative volume paths resolve against the manifest's directory.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .errors import (
    BadMagicError,
    FormatError,
    InsufficientDepthError,
    NonFiniteDataError,
    TruncatedError,
    ValidationError,
)

RVF_MAGIC = b"RVF1\n"
MODALITIES = ("T1", "T2")
CLASS_NAMES = ("normal", "low-grade", "high-grade")


@dataclass(frozen=True)
class Volume:
    voxels: np.ndarray  # (dz, h, w) float32
    modality: str
    case_id: str

    def __post_init__(self):
        if self.voxels.ndim != 3 or min(self.voxels.shape) < 1:
            raise ValidationError(f"volume {self.case_id!r} must be 3D and non-empty, got {self.voxels.shape}")
        if self.modality not in MODALITIES:
            raise ValidationError(f"unknown modality {self.modality!r}")

    @property
    def extents(self) -> Tuple[int, int, int]:
        return tuple(self.voxels.shape)


@dataclass(frozen=True)
class ManifestEntry:
    case_id: str
    t1: Path
    t2: Path
    label: int


@dataclass(frozen=True)
class ScanRecord:
    case_id: str
    t1: Volume
    t2: Volume
    label: int

    def __post_init__(self):
        if self.t1.extents != self.t2.extents:
            raise ValidationError(
                f"case {self.case_id!r}: T1 extents {self.t1.extents} != T2 extents {self.t2.extents}"
            )
        if self.label not in (0, 1, 2):
            raise ValidationError(f"case {self.case_id!r}: label {self.label} not in {{0,1,2}}")

    def volume(self, modality: str) -> Volume:
        return self.t1 if modality == "T1" else self.t2

    @property
    def depth(self) -> int:
        return self.t1.extents[0]


@dataclass
class GridSample:
    image: np.ndarray  # (sqrt(k)*H, sqrt(k)*W, C)
    label: int
    case_id: str
    window_start: int
    k: int


# ---------------------------------------------------------------------------
# volume files


def write_volume(volume: Volume, path) -> None:
    dz, h, w = volume.extents
    header = {"dz": dz, "h": h, "w": w, "dtype": "f32le",
              "modality": volume.modality, "case_id": volume.case_id}
    payload = np.ascontiguousarray(volume.voxels, dtype="<f4").tobytes()
    with open(path, "wb") as fh:
        fh.write(RVF_MAGIC)
        fh.write(json.dumps(header).encode("utf-8") + b"\n")
        fh.write(payload)


def load_volume(path) -> Volume:
    raw = Path(path).read_bytes()
    if not raw.startswith(RVF_MAGIC):
        raise BadMagicError(f"{path}: not an RVF1 volume (magic {raw[:5]!r})")
    end = raw.find(b"\n", len(RVF_MAGIC))
    if end < 0:
        raise TruncatedError(f"{path}: header line is not terminated")
    try:
        header = json.loads(raw[len(RVF_MAGIC):end].decode("utf-8"))
        dz, h, w = int(header["dz"]), int(header["h"]), int(header["w"])
        modality, case_id = header["modality"], str(header["case_id"])
    except (ValueError, KeyError, TypeError) as exc:
        raise FormatError(f"{path}: malformed header ({exc})") from exc
    if header.get("dtype", "f32le") != "f32le":
        raise FormatError(f"{path}: unsupported dtype {header['dtype']!r}")
    if min(dz, h, w) < 1:
        raise FormatError(f"{path}: non-positive extents {(dz, h, w)}")
    payload = raw[end + 1:]
    need = dz * h * w * 4
    if len(payload) < need:
        raise TruncatedError(
            f"{path}: header declares {dz}x{h}x{w} ({need} bytes) but payload has {len(payload)} bytes"
        )
    if len(payload) > need:
        raise FormatError(f"{path}: {len(payload) - need} trailing bytes after payload")
    voxels = np.frombuffer(payload, dtype="<f4").astype(np.float32).reshape(dz, h, w)
    if not np.all(np.isfinite(voxels)):
        raise NonFiniteDataError(f"{path}: volume contains NaN or Inf voxels")
    return Volume(voxels, modality, case_id)


# ---------------------------------------------------------------------------
# manifests


def parse_manifest(path) -> List[ManifestEntry]:
    path = Path(path)
    base = path.parent
    entries: List[ManifestEntry] = []
    seen = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValidationError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from exc
            if not isinstance(obj, dict):
                raise ValidationError(f"{path}:{lineno}: expected a JSON object")
            for key in ("id", "t1", "t2", "label"):
                if key not in obj:
                    raise ValidationError(f"{path}:{lineno}: missing key {key!r}")
            label = obj["label"]
            if isinstance(label, bool) or label not in (0, 1, 2):
                raise ValidationError(f"{path}:{lineno}: label {label!r} not in {{0,1,2}}")
            case_id = str(obj["id"])
            if case_id in seen:
                raise ValidationError(f"{path}:{lineno}: duplicate case id {case_id!r}")
            seen.add(case_id)
            entries.append(ManifestEntry(case_id, base / obj["t1"], base / obj["t2"], int(label)))
    return entries


def write_manifest(entries: Iterable[dict], path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for obj in entries:
            fh.write(json.dumps(obj) + "\n")


def load_record(entry: ManifestEntry, normalize: bool = True) -> ScanRecord:
    t1, t2 = load_volume(entry.t1), load_volume(entry.t2)
    if normalize:
        t1, t2 = normalize_volume(t1), normalize_volume(t2)
    return ScanRecord(entry.case_id, replace(t1, modality="T1"), replace(t2, modality="T2"), entry.label)


def load_records(entries: Sequence[ManifestEntry], normalize: bool = True) -> List[ScanRecord]:
    return [load_record(e, normalize) for e in entries]


# ---------------------------------------------------------------------------
# intensity / windows / grids


def normalize_volume(v: Volume) -> Volume:
    """Min-max scale to [0, 1]. A constant volume maps to all zeros."""
    x = v.voxels.astype(np.float32)
    lo, hi = x.min(), x.max()
    if hi > lo:
        out = (x - lo) / (hi - lo)
    else:
        out = np.zeros_like(x)
    return replace(v, voxels=out)


def extract_windows(depth: int, k: int, stride: int = 1) -> List[int]:
    """Start indices 0, stride, 2*stride, ... up to and including the last start <= depth-k."""
    if stride < 1:
        raise ValidationError(f"stride must be >= 1, got {stride}")
    if k > depth:
        raise InsufficientDepthError(f"window of k={k} slices exceeds volume depth {depth}")
    return list(range(0, depth - k + 1, stride))


def central_window(depth: int, k: int) -> int:
    if k > depth:
        raise InsufficientDepthError(f"window of k={k} slices exceeds volume depth {depth}")
    return (depth - k) // 2


def grid_side(k: int) -> int:
    s = math.isqrt(k)
    if k < 1 or s * s != k:
        raise ValidationError(f"k={k} is not a perfect square")
    return s


def pack_grid(slices) -> np.ndarray:
    """Tile k slices of shape (H, W, ...) into a sqrt(k) x sqrt(k) mosaic, row-major."""
    if isinstance(slices, np.ndarray):
        stack = slices
    else:
        shapes = {np.shape(s) for s in slices}
        if len(shapes) != 1:
            raise ValidationError(f"ragged slices: {sorted(shapes)}")
        stack = np.stack(slices)
    k = stack.shape[0]
    s = grid_side(k)
    h, w = stack.shape[1:3]
    rest = stack.shape[3:]
    tiles = stack.reshape(s, s, h, w, *rest)
    order = (0, 2, 1, 3) + tuple(range(4, 4 + len(rest)))
    return tiles.transpose(order).reshape(s * h, s * w, *rest)


def unpack_grid(grid: np.ndarray, k: int) -> np.ndarray:
    """Inverse of :func:`pack_grid`; returns (k, H, W, ...)."""
    s = grid_side(k)
    gh, gw = grid.shape[:2]
    if gh % s or gw % s:
        raise ValidationError(f"grid {grid.shape[:2]} not divisible into {s}x{s} cells")
    h, w = gh // s, gw // s
    rest = grid.shape[2:]
    tiles = grid.reshape(s, h, s, w, *rest)
    order = (0, 2, 1, 3) + tuple(range(4, 4 + len(rest)))
    return tiles.transpose(order).reshape(k, h, w, *rest)


def fuse_early(g1: np.ndarray, g2: np.ndarray) -> np.ndarray:
    """Stack the T1 and T2 grids as channels 0 and 1."""
    if g1.shape != g2.shape:
        raise ValidationError(f"cannot fuse grids of shapes {g1.shape} and {g2.shape}")
    return np.stack([g1, g2], axis=-1)


def make_sample(record: ScanRecord, start: int, k: int,
                modalities: Sequence[str] = MODALITIES) -> GridSample:
    if start < 0 or start + k > record.depth:
        raise InsufficientDepthError(
            f"case {record.case_id!r}: window [{start}, {start + k}) outside depth {record.depth}"
        )
    grids = [pack_grid(record.volume(m).voxels[start:start + k]) for m in modalities]
    image = fuse_early(*grids) if len(grids) == 2 else grids[0][..., None]
    return GridSample(np.ascontiguousarray(image, dtype=np.float32), record.label,
                      record.case_id, start, k)


def window_samples(record: ScanRecord, k: int, stride: int = 1,
                   modalities: Sequence[str] = MODALITIES) -> List[GridSample]:
    return [make_sample(record, s, k, modalities)
            for s in extract_windows(record.depth, k, stride)]


def central_sample(record: ScanRecord, k: int,
                   modalities: Sequence[str] = MODALITIES) -> GridSample:
    return make_sample(record, central_window(record.depth, k), k, modalities)


# ---------------------------------------------------------------------------
# augmentation


def flip_rotate(sample: GridSample, flip: bool, quarter_turns: int) -> GridSample:
    """Apply one horizontal flip decision and one rotation to every slice, then re-pack."""
    cells = unpack_grid(sample.image, sample.k)  # (k, H, W, C)
    if flip:
        cells = cells[:, :, ::-1]
    r = quarter_turns % 4
    if r:
        if r % 2 and cells.shape[1] != cells.shape[2]:
            raise ValidationError("odd quarter turns need square slices")
        cells = np.rot90(cells, r, axes=(1, 2))
    return replace(sample, image=np.ascontiguousarray(pack_grid(cells)))


def augment(sample: GridSample, rng: np.random.Generator) -> GridSample:
    flip = bool(rng.random() < 0.5)
    cells_square = sample.image.shape[0] == sample.image.shape[1]
    r = int(rng.integers(4)) if cells_square else 2 * int(rng.integers(2))
    return flip_rotate(sample, flip, r)


# ---------------------------------------------------------------------------
# synthetic data


@dataclass
class SyntheticSpec:
    """Three-class toy volumes: a tissue disc with a class-dependent lesion.

    Class 0 has no lesion. Lesions are bright on T1 and dark on T2, and both
    modalities carry a small saturated marker so per-volume min-max scaling
    keeps contrast levels comparable across cases.
    """

    cases_per_class: int = 20
    depth: int = 12
    height: int = 32
    width: int = 32
    lesion_radius: Tuple[float, float, float] = (0.0, 6.0, 10.0)
    lesion_contrast: Tuple[float, float, float] = (0.0, 0.35, 0.65)
    lesion_depth: int = 3
    radius_jitter: float = 0.5
    noise: float = 0.01
    seed: int = 0

    def __post_init__(self):
        self.lesion_radius = tuple(float(x) for x in self.lesion_radius)
        self.lesion_contrast = tuple(float(x) for x in self.lesion_contrast)
        self.validate()

    def validate(self) -> None:
        for name in ("cases_per_class", "lesion_depth", "seed"):
            if int(getattr(self, name)) < 0:
                raise ValidationError(f"{name} must be non-negative")
        for name in ("depth", "height", "width"):
            if int(getattr(self, name)) < 1:
                raise ValidationError(f"{name} must be >= 1")
        for name in ("lesion_radius", "lesion_contrast"):
            vals = getattr(self, name)
            if len(vals) != 3:
                raise ValidationError(f"{name} needs one value per class (3)")
            if any(v < 0 or not math.isfinite(v) for v in vals):
                raise ValidationError(f"{name} must be finite and non-negative")
        for name in ("noise", "radius_jitter"):
            if not getattr(self, name) >= 0:
                raise ValidationError(f"{name} must be non-negative")

    @classmethod
    def from_dict(cls, obj: dict) -> "SyntheticSpec":
        known = {f.name for f in fields(cls)}
        unknown = set(obj) - known
        if unknown:
            raise ValidationError(f"unknown synthetic spec field(s): {sorted(unknown)}")
        try:
            return cls(**obj)
        except TypeError as exc:
            raise ValidationError(str(exc)) from exc

    @classmethod
    def from_json(cls, path) -> "SyntheticSpec":
        try:
            obj = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ValidationError(f"{path}: invalid JSON ({exc.msg})") from exc
        if not isinstance(obj, dict):
            raise ValidationError(f"{path}: expected a JSON object")
        return cls.from_dict(obj)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lesion_radius"] = list(self.lesion_radius)
        d["lesion_contrast"] = list(self.lesion_contrast)
        return d


def _synthetic_case(spec: SyntheticSpec, label: int, rng: np.random.Generator):
    dz, h, w = spec.depth, spec.height, spec.width
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    cy = (h - 1) / 2 + rng.uniform(-2, 2)
    cx = (w - 1) / 2 + rng.uniform(-2, 2)
    tissue = (yy - cy) ** 2 + (xx - cx) ** 2 <= (0.42 * min(h, w)) ** 2
    ly, lx = cy + rng.uniform(-2, 2), cx + rng.uniform(-2, 2)
    radius = spec.lesion_radius[label]
    if radius > 0:
        radius = max(radius + spec.radius_jitter * rng.uniform(-1, 1), 0.5)
    contrast = spec.lesion_contrast[label]
    zc = dz // 2 + int(rng.integers(-1, 2)) if dz > 2 else dz // 2
    half = spec.lesion_depth + 0.5

    t1 = np.full((dz, h, w), 0.1)
    t2 = np.full((dz, h, w), 0.2)
    t1[:, tissue] = 0.3
    t2[:, tissue] = 0.8
    for z in range(dz):
        rz = radius * math.sqrt(max(0.0, 1.0 - ((z - zc) / half) ** 2)) if radius > 0 else 0.0
        if rz <= 0 or contrast == 0:
            continue
        lesion = (yy - ly) ** 2 + (xx - lx) ** 2 <= rz ** 2
        t1[z, lesion] = 0.3 + contrast
        t2[z, lesion] = 0.8 - contrast
    mh, mw = max(1, h // 16), max(1, w // 16)
    t1[:, :mh, :mw] = 1.0
    t2[:, :mh, :mw] = 1.0
    t1 += rng.normal(0.0, spec.noise, t1.shape)
    t2 += rng.normal(0.0, spec.noise, t2.shape)
    return t1.astype(np.float32), t2.astype(np.float32)


def gen_synthetic(spec: SyntheticSpec, out_dir) -> Tuple[Path, List[ManifestEntry]]:
    """Write volumes plus ``manifest.jsonl`` under ``out_dir``.

    Labels cycle 0, 1, 2, ... so any prefix of the manifest is roughly balanced.
    Output bytes depend only on ``spec``.
    """
    spec.validate()
    out = Path(out_dir)
    vol_dir = out / "volumes"
    vol_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(spec.seed)
    lines = []
    for i in range(3 * spec.cases_per_class):
        label = i % 3
        case_id = f"syn{i:04d}"
        t1, t2 = _synthetic_case(spec, label, rng)
        rel1 = f"volumes/{case_id}_T1.rvf"
        rel2 = f"volumes/{case_id}_T2.rvf"
        write_volume(Volume(t1, "T1", case_id), out / rel1)
        write_volume(Volume(t2, "T2", case_id), out / rel2)
        lines.append({"id": case_id, "t1": rel1, "t2": rel2, "label": label})
    manifest = out / "manifest.jsonl"
    write_manifest(lines, manifest)
    (out / "spec.json").write_text(json.dumps(spec.to_dict(), indent=2) + "\n", encoding="utf-8")
    return manifest, parse_manifest(manifest)


def synthetic_records(spec: SyntheticSpec, out_dir, normalize: bool = True) -> List[ScanRecord]:
    _, entries = gen_synthetic(spec, out_dir)
    return load_records(entries, normalize)
