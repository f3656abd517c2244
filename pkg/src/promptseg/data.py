"""Synthetic organ/lesion data, z-slicing, splits, and on-disk formats.

All randomness flows through ``numpy.random.Generator(Philox(SeedSequence(...)))``
with explicit integer keys, so streams do not depend on platform defaults or
on the order in which samples are produced.

Sample files (``.segv``, little-endian)::

    b"SEGV"  u8 version=1  u8 role_count
    image block
    role_count x (u16 name length, UTF-8 name, mask block)

    block := u8 dtype (0 = u8 mask, 1 = f32 image)  u8 ndim  ndim x u32 dims  payload

Volumes use the same layout with 3D blocks. Manifests are UTF-8 text::

    key = value            (one per line, until the table)
    [cases]
    case_id split          (split in train/val/test, one case per line)

Blank lines and ``#`` comments are ignored everywhere.
"""

from __future__ import annotations

import math
import struct
import warnings
from dataclasses import asdict, dataclass, field, fields
from fractions import Fraction
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .geometry import validate_mask

ROLES = ("organ", "lesion")
SPLITS = ("train", "val", "test")
SEGV_MAGIC = b"SEGV"
SEGV_VERSION = 1
DTYPE_MASK, DTYPE_IMAGE = 0, 1


def philox(*key: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(list(key))))


# --------------------------------------------------------------------------
# types

@dataclass(eq=False)
class Sample:
    case_id: str
    image: np.ndarray
    masks: dict[str, np.ndarray]

    def __post_init__(self) -> None:
        img = np.asarray(self.image)
        if img.ndim != 2:
            raise ValueError(f"{self.case_id}: image must be 2D, got shape {img.shape}")
        if not np.isfinite(img).all():
            raise ValueError(f"{self.case_id}: image has non-finite values")
        self.image = np.ascontiguousarray(img, dtype=np.float32)
        masks = {}
        for role, m in self.masks.items():
            m = validate_mask(m, f"{self.case_id}/{role}")
            if m.shape != self.image.shape:
                raise ValueError(f"{self.case_id}/{role}: mask shape {m.shape} != image shape {self.image.shape}")
            masks[role] = m
        self.masks = masks

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Sample):
            return NotImplemented
        return (
            self.case_id == other.case_id
            and self.image.dtype == other.image.dtype
            and np.array_equal(self.image, other.image)
            and list(self.masks) == list(other.masks)
            and all(np.array_equal(self.masks[r], other.masks[r]) for r in self.masks)
        )


@dataclass(eq=False)
class Volume3D:
    volume_id: str
    image: np.ndarray
    masks: dict[str, np.ndarray]

    def __post_init__(self) -> None:
        self.image = np.ascontiguousarray(self.image, dtype=np.float32)
        if self.image.ndim != 3:
            raise ValueError(f"volume image must be 3D, got shape {self.image.shape}")
        for role, m in self.masks.items():
            m = np.asarray(m)
            if m.shape != self.image.shape:
                raise ValueError(f"{role}: mask shape {m.shape} != volume shape {self.image.shape}")
            if not np.isin(m, (0, 1)).all():
                raise ValueError(f"{role}: mask not binary")
            self.masks[role] = np.ascontiguousarray(m, dtype=np.uint8)

    @property
    def depth(self) -> int:
        return self.image.shape[0]


@dataclass(frozen=True)
class SyntheticConfig:
    image_size: int = 64
    organ_radius_min: float = 12.0
    organ_radius_max: float = 22.0
    lesion_radius_min: float = 3.0
    lesion_radius_max: float = 7.0
    background_intensity: float = 0.25
    organ_intensity: float = 0.55
    lesion_intensity: float = 0.8
    noise_std: float = 0.05
    irregularity: float = 0.15
    count: int = 100
    seed: int = 0

    def validate(self) -> "SyntheticConfig":
        if self.image_size < 8:
            raise ValueError("image_size must be >= 8")
        if self.count < 1:
            raise ValueError("count must be >= 1")
        if not 0 < self.lesion_radius_min <= self.lesion_radius_max:
            raise ValueError("lesion radius range must be positive and ordered")
        if not self.organ_radius_min <= self.organ_radius_max:
            raise ValueError("organ radius range must be ordered")
        if self.lesion_radius_max >= self.organ_radius_min:
            raise ValueError("lesion max radius must be below organ min radius")
        for name in ("background_intensity", "organ_intensity", "lesion_intensity"):
            if not 0 <= getattr(self, name) <= 1:
                raise ValueError(f"{name} must lie in [0, 1]")
        if self.noise_std < 0:
            raise ValueError("noise_std must be >= 0")
        if not 0 <= self.irregularity < 0.5:
            raise ValueError("irregularity must lie in [0, 0.5)")
        reach = self.organ_radius_max * (1 + self.irregularity)
        if 2 * reach + 2 > self.image_size:
            raise ValueError("organ radius too large for image_size")
        return self


# --------------------------------------------------------------------------
# synthetic generation

def _blob(shape: tuple[int, int], cx: float, cy: float, rx: float, ry: float,
          theta: float, harmonics: np.ndarray) -> np.ndarray:
    """Star-convex blob: a rotated ellipse whose radius is modulated by a few harmonics."""
    yy, xx = np.mgrid[0:shape[0], 0:shape[1]].astype(np.float64)
    dx, dy = xx - cx, yy - cy
    c, s = math.cos(theta), math.sin(theta)
    u, v = c * dx + s * dy, -s * dx + c * dy
    phi = np.arctan2(v, u)
    rho = np.hypot(u, v)
    r_ell = rx * ry / np.sqrt((ry * np.cos(phi)) ** 2 + (rx * np.sin(phi)) ** 2)
    mod = np.ones_like(phi)
    for k, (amp, phase) in enumerate(harmonics, start=2):
        mod += amp * np.cos(k * phi + phase)
    return (rho <= r_ell * mod).astype(np.uint8)


def _harmonics(rng: np.random.Generator, irregularity: float) -> np.ndarray:
    amps = rng.uniform(0, irregularity / 3, size=3)
    phases = rng.uniform(0, 2 * math.pi, size=3)
    return np.stack([amps, phases], axis=1)


def _organ_lesion(config: SyntheticConfig, rng: np.random.Generator, case: str) -> tuple[np.ndarray, np.ndarray]:
    n = config.image_size
    shape = (n, n)
    reach = config.organ_radius_max * (1 + config.irregularity) + 1
    for _ in range(100):
        rx, ry = rng.uniform(config.organ_radius_min, config.organ_radius_max, size=2)
        cx, cy = rng.uniform(reach, n - 1 - reach, size=2)
        organ = _blob(shape, cx, cy, rx, ry, rng.uniform(0, math.pi), _harmonics(rng, config.irregularity))
        if not organ.any():
            continue
        lrx, lry = rng.uniform(config.lesion_radius_min, config.lesion_radius_max, size=2)
        ys, xs = np.nonzero(organ)
        pick = rng.integers(ys.size)
        lesion = _blob(shape, float(xs[pick]), float(ys[pick]), lrx, lry, rng.uniform(0, math.pi),
                       _harmonics(rng, config.irregularity))
        if lesion.any() and not (lesion & (1 - organ)).any():
            return organ, lesion
    raise RuntimeError(f"{case}: could not place a lesion inside the organ after 100 attempts")


def _render(config: SyntheticConfig, rng: np.random.Generator, organ: np.ndarray, lesion: np.ndarray) -> np.ndarray:
    img = np.full(organ.shape, config.background_intensity, dtype=np.float64)
    img[organ == 1] = config.organ_intensity
    img[lesion == 1] = config.lesion_intensity
    img += rng.normal(0.0, config.noise_std, size=img.shape) if config.noise_std > 0 else 0.0
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def case_name(index: int) -> str:
    return f"case_{index:05d}"


def generate_synthetic_sample(config: SyntheticConfig, index: int) -> Sample:
    """Deterministic function of ``(config.seed, index)``; lesion always lies inside the organ."""
    config.validate()
    rng = philox(config.seed, index)
    organ, lesion = _organ_lesion(config, rng, case_name(index))
    return Sample(case_name(index), _render(config, rng, organ, lesion), {"organ": organ, "lesion": lesion})


def generate_synthetic_volume(config: SyntheticConfig, index: int, depth: int = 16) -> Volume3D:
    """A z-stack whose organ occupies the central two thirds and lesion the central quarter.

    The in-plane outline is shared by every slice that contains the structure;
    only the noise changes from slice to slice.
    """
    config.validate()
    if depth < 1:
        raise ValueError("depth must be >= 1")
    rng = philox(config.seed, index, 0x3D)
    organ2d, lesion2d = _organ_lesion(config, rng, f"vol_{index:05d}")
    zc = (depth - 1) / 2
    n = config.image_size
    image = np.empty((depth, n, n), dtype=np.float32)
    organ = np.zeros((depth, n, n), dtype=np.uint8)
    lesion = np.zeros((depth, n, n), dtype=np.uint8)
    for z in range(depth):
        if abs(z - zc) <= depth / 3:
            organ[z] = organ2d
        if abs(z - zc) <= depth / 8:
            lesion[z] = lesion2d
        image[z] = _render(config, rng, organ[z], lesion[z])
    return Volume3D(f"vol_{index:05d}", image, {"organ": organ, "lesion": lesion})


def generate_dataset(config: SyntheticConfig, name: str = "synthetic") -> tuple[list[Sample], "DatasetManifest"]:
    config.validate()
    samples = [generate_synthetic_sample(config, i) for i in range(config.count)]
    params = {k: repr(v) for k, v in asdict(config).items() if k != "seed"}
    manifest = split_dataset([s.case_id for s in samples], seed=config.seed, name=name, params=params)
    return samples, manifest


# --------------------------------------------------------------------------
# slicing

@dataclass
class SliceResult:
    samples: list[Sample]
    z_indices: list[int]
    insufficient: bool


def slice_volume(volume: Volume3D, slices_per_volume: int, rng: np.random.Generator) -> SliceResult:
    """Draw z-slices uniformly without replacement among slices where every role is non-empty."""
    if slices_per_volume < 1:
        raise ValueError("slices_per_volume must be >= 1")
    if not volume.masks:
        raise ValueError("volume has no masks")
    eligible = np.flatnonzero(np.all([m.any(axis=(1, 2)) for m in volume.masks.values()], axis=0))
    k = min(slices_per_volume, eligible.size)
    insufficient = k < slices_per_volume
    if insufficient:
        warnings.warn(
            f"{volume.volume_id}: {eligible.size} eligible slices, {slices_per_volume} requested",
            stacklevel=2,
        )
    chosen = sorted(int(z) for z in rng.choice(eligible, size=k, replace=False)) if k else []
    samples = [
        Sample(f"{volume.volume_id}_z{z:03d}", volume.image[z].copy(),
               {role: m[z].copy() for role, m in volume.masks.items()})
        for z in chosen
    ]
    return SliceResult(samples, chosen, insufficient)


# --------------------------------------------------------------------------
# splits and manifests

RESERVED_KEYS = frozenset({"format", "name", "seed"})


@dataclass
class DatasetManifest:
    name: str
    seed: int
    entries: list[tuple[str, str]]
    params: dict[str, str] = field(default_factory=dict)

    def __post_init__(self) -> None:
        ids = [cid for cid, _ in self.entries]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate case ids in manifest")
        for cid, split in self.entries:
            if split not in SPLITS:
                raise ValueError(f"{cid}: unknown split {split!r}")
            if not cid or any(ch.isspace() for ch in cid):
                raise ValueError(f"invalid case id {cid!r}")
        clash = RESERVED_KEYS & set(self.params)
        if clash:
            raise ValueError(f"params may not use reserved keys {sorted(clash)}")
        self.entries = sorted(self.entries)

    def ids(self, split: str) -> list[str]:
        if split not in SPLITS:
            raise ValueError(f"unknown split {split!r}")
        return [cid for cid, s in self.entries if s == split]

    def sizes(self) -> tuple[int, int, int]:
        return tuple(len(self.ids(s)) for s in SPLITS)  # type: ignore[return-value]

    def to_text(self) -> str:
        lines = ["format = promptseg-manifest/1", f"name = {self.name}", f"seed = {self.seed}"]
        lines += [f"{k} = {v}" for k, v in sorted(self.params.items())]
        lines.append("[cases]")
        lines += [f"{cid} {split}" for cid, split in self.entries]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "DatasetManifest":
        header: dict[str, str] = {}
        entries = []
        in_table = False
        for lineno, raw in enumerate(text.split("\n"), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if line == "[cases]":
                in_table = True
                continue
            if in_table:
                parts = line.split()
                if len(parts) != 2:
                    raise ValueError(f"manifest line {lineno}: expected 'case_id split'")
                entries.append((parts[0], parts[1]))
            else:
                key, sep, value = line.partition("=")
                if not sep:
                    raise ValueError(f"manifest line {lineno}: expected 'key = value'")
                header[key.strip()] = value.strip()
        if header.pop("format", None) != "promptseg-manifest/1":
            raise ValueError("manifest: missing or unsupported format line")
        try:
            name, seed = header.pop("name"), int(header.pop("seed"))
        except KeyError as exc:
            raise ValueError(f"manifest: missing key {exc.args[0]!r}") from None
        return cls(name, seed, entries, header)


def split_sizes(n: int, ratios: Sequence[float] = (0.70, 0.15, 0.15)) -> tuple[int, int, int]:
    """Floor the train and val shares; test takes the remainder."""
    fr = [Fraction(repr(float(r))) for r in ratios]
    if len(fr) != 3 or any(r < 0 for r in fr) or sum(fr) != 1:
        raise ValueError(f"ratios must be three non-negative numbers summing to 1, got {ratios}")
    train = math.floor(fr[0] * n)
    val = math.floor(fr[1] * n)
    return train, val, n - train - val


def split_dataset(case_ids: Sequence[str], ratios: Sequence[float] = (0.70, 0.15, 0.15), seed: int = 0,
                  name: str = "dataset", params: Mapping[str, str] | None = None) -> DatasetManifest:
    if len(case_ids) == 0:
        raise ValueError("cannot split an empty case list")
    n_train, n_val, _ = split_sizes(len(case_ids), ratios)
    order = philox(seed, 0x5911).permutation(len(case_ids))
    entries = []
    for rank, i in enumerate(order):
        split = "train" if rank < n_train else "val" if rank < n_train + n_val else "test"
        entries.append((case_ids[i], split))
    return DatasetManifest(name, seed, entries, dict(params or {}))


# --------------------------------------------------------------------------
# SEGV1 codec

class SegvFormatError(ValueError):
    """Malformed sample file; ``field`` names the part that failed to parse."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


class _Reader:
    def __init__(self, data: bytes):
        self.data = memoryview(data)
        self.pos = 0

    def take(self, n: int, what: str) -> memoryview:
        if self.pos + n > len(self.data):
            raise SegvFormatError(what, f"truncated (need {n} bytes at offset {self.pos}, file has {len(self.data)})")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str, what: str) -> tuple:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def _write_block(out: list[bytes], arr: np.ndarray, code: int) -> None:
    out.append(struct.pack("<BB", code, arr.ndim))
    out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
    dtype = "<f4" if code == DTYPE_IMAGE else "u1"
    out.append(np.ascontiguousarray(arr).astype(dtype, copy=False).tobytes())


def _read_block(r: _Reader, what: str, expect_code: int, expect_ndim: int) -> np.ndarray:
    code, ndim = r.unpack("<BB", f"{what}.header")
    if code != expect_code:
        raise SegvFormatError(f"{what}.dtype", f"expected dtype code {expect_code}, got {code}")
    if ndim != expect_ndim:
        raise SegvFormatError(f"{what}.ndim", f"expected {expect_ndim}, got {ndim}")
    dims = r.unpack(f"<{ndim}I", f"{what}.dims")
    if any(d == 0 for d in dims):
        raise SegvFormatError(f"{what}.dims", f"zero-sized dimension in {dims}")
    dtype = np.dtype("<f4" if code == DTYPE_IMAGE else "u1")
    nbytes = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
    return np.frombuffer(r.take(nbytes, f"{what}.payload"), dtype=dtype).reshape(dims).copy()


def _encode(image: np.ndarray, masks: Mapping[str, np.ndarray]) -> bytes:
    if len(masks) > 255:
        raise ValueError("at most 255 roles per file")
    out = [SEGV_MAGIC, struct.pack("<BB", SEGV_VERSION, len(masks))]
    _write_block(out, image, DTYPE_IMAGE)
    for role, m in masks.items():
        name = role.encode("utf-8")
        out.append(struct.pack("<H", len(name)) + name)
        _write_block(out, m, DTYPE_MASK)
    return b"".join(out)


def _decode(data: bytes, ndim: int) -> tuple[np.ndarray, dict[str, np.ndarray]]:
    r = _Reader(data)
    if bytes(r.take(4, "magic")) != SEGV_MAGIC:
        raise SegvFormatError("magic", "not a SEGV file")
    version, role_count = r.unpack("<BB", "version")
    if version != SEGV_VERSION:
        raise SegvFormatError("version", f"unsupported version {version}")
    image = _read_block(r, "image", DTYPE_IMAGE, ndim)
    if not np.isfinite(image).all():
        raise SegvFormatError("image.payload", "non-finite pixel values")
    masks: dict[str, np.ndarray] = {}
    for i in range(role_count):
        (nlen,) = r.unpack("<H", f"role[{i}].name_length")
        try:
            role = bytes(r.take(nlen, f"role[{i}].name")).decode("utf-8")
        except UnicodeDecodeError:
            raise SegvFormatError(f"role[{i}].name", "invalid UTF-8") from None
        if not role or role in masks:
            raise SegvFormatError(f"role[{i}].name", f"empty or duplicate role name {role!r}")
        m = _read_block(r, f"role[{role}]", DTYPE_MASK, ndim)
        if m.shape != image.shape:
            raise SegvFormatError(f"role[{role}].dims", f"mask shape {m.shape} != image shape {image.shape}")
        if m.max() > 1:
            raise SegvFormatError(f"role[{role}].payload", "mask not binary")
        masks[role] = m
    if r.pos != len(r.data):
        raise SegvFormatError("trailer", f"{len(r.data) - r.pos} unexpected trailing bytes")
    return image, masks


def encode_sample(sample: Sample) -> bytes:
    return _encode(sample.image, sample.masks)


def decode_sample(data: bytes, case_id: str) -> Sample:
    image, masks = _decode(data, 2)
    return Sample(case_id, image, masks)


def write_sample(sample: Sample, path: str | Path) -> None:
    """Write ``sample``; the case id is carried by the file stem. Refuses to overwrite."""
    with open(path, "xb") as fh:
        fh.write(encode_sample(sample))


def read_sample(path: str | Path) -> Sample:
    path = Path(path)
    return decode_sample(path.read_bytes(), path.stem)


def write_volume(volume: Volume3D, path: str | Path) -> None:
    with open(path, "xb") as fh:
        fh.write(_encode(volume.image, volume.masks))


def read_volume(path: str | Path) -> Volume3D:
    path = Path(path)
    image, masks = _decode(path.read_bytes(), 3)
    return Volume3D(path.stem, image, masks)


# --------------------------------------------------------------------------
# dataset directories

MANIFEST_NAME = "manifest.txt"


def save_dataset(samples: Sequence[Sample], manifest: DatasetManifest, out_dir: str | Path) -> Path:
    out = Path(out_dir)
    (out / "samples").mkdir(parents=True, exist_ok=True)
    known = {cid for cid, _ in manifest.entries}
    for s in samples:
        if s.case_id not in known:
            raise ValueError(f"{s.case_id} is not in the manifest")
        write_sample(s, out / "samples" / f"{s.case_id}.segv")
    with open(out / MANIFEST_NAME, "xb") as fh:
        fh.write(manifest.to_text().encode("utf-8"))
    return out


def load_manifest(data_dir: str | Path) -> DatasetManifest:
    return DatasetManifest.from_text((Path(data_dir) / MANIFEST_NAME).read_text(encoding="utf-8"))


def load_dataset(data_dir: str | Path, split: str | None = None) -> tuple[list[Sample], DatasetManifest]:
    manifest = load_manifest(data_dir)
    ids = [cid for cid, _ in manifest.entries] if split is None else manifest.ids(split)
    samples = [read_sample(Path(data_dir) / "samples" / f"{cid}.segv") for cid in ids]
    return samples, manifest


def config_fields(cls) -> list[str]:
    return [f.name for f in fields(cls)]
