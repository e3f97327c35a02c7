"""Synthetic cord/butterfly segmentation data, PGM rasters and manifests.

Directory layout on disk::

    <root>/train.manifest
    <root>/val.manifest
    <root>/{train,val}/img/<id>.pgm   16-bit P5, value = round(65535 * intensity)
    <root>/{train,val}/msk/<id>.pgm   8-bit P5, values {0, 255}

Manifest format (UTF-8, one ``key: value`` per line, then a tab separated
sample table)::

    format: adaseg-manifest
    version: 1
    n: 64
    split: train
    count: 160
    samples:
    id<TAB>split<TAB>image<TAB>mask
    train_0000<TAB>train<TAB>train/img/train_0000.pgm<TAB>train/msk/train_0000.pgm
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from scipy import ndimage


class DataFormatError(ValueError):
    """Malformed PGM or manifest content."""


@dataclass
class Sample:
    id: str
    image: np.ndarray
    gt: np.ndarray
    split: str = "train"


@dataclass
class Dataset:
    """Stacked images ``[N,n,n]`` (float32 in [0,1]) and masks ``[N,n,n]`` (uint8 in {0,1})."""

    ids: list
    images: np.ndarray
    masks: np.ndarray
    split: str = "train"

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        self.masks = np.asarray(self.masks, dtype=np.uint8)
        if self.images.shape != self.masks.shape:
            raise ValueError(f"images {self.images.shape} and masks {self.masks.shape} differ in shape")
        if len(self.ids) != len(self.images):
            raise ValueError("one id per image required")

    def __len__(self):
        return len(self.ids)

    @property
    def n(self) -> int:
        return self.images.shape[-1]

    def sample(self, i: int) -> Sample:
        return Sample(self.ids[i], self.images[i], self.masks[i], self.split)

    def index(self, sample_id: str) -> int:
        try:
            return self.ids.index(sample_id)
        except ValueError:
            raise KeyError(f"unknown sample id {sample_id!r}") from None

    @classmethod
    def from_samples(cls, samples: list, split: str = "train") -> "Dataset":
        if not samples:
            raise ValueError("cannot stack zero samples; use Dataset.empty(n)")
        return cls([s.id for s in samples], np.stack([s.image for s in samples]),
                   np.stack([s.gt for s in samples]), split)

    @classmethod
    def empty(cls, n: int, split: str = "train") -> "Dataset":
        return cls([], np.zeros((0, n, n), np.float32), np.zeros((0, n, n), np.uint8), split)


@dataclass
class SyntheticSpec:
    n: int = 64
    train: int = 160
    val: int = 40
    noise_std: float = 0.05
    spurious_context: bool = True
    correlation: float = 0.8
    shape_family: str = "butterfly"
    distractors: int = 1

    def validate(self) -> "SyntheticSpec":
        if self.n <= 0 or self.n % 8:
            raise ValueError(f"n={self.n} must be a positive multiple of 8")
        if self.train < 1 or self.val < 1:
            raise ValueError("sample counts must be >= 1")
        if not 0.0 <= self.correlation <= 1.0:
            raise ValueError("correlation strength must lie in [0, 1]")
        if self.noise_std < 0:
            raise ValueError("noise_std must be >= 0")
        if self.distractors < 0:
            raise ValueError("distractors must be >= 0")
        if self.shape_family != "butterfly":
            raise ValueError(f"unsupported shape family {self.shape_family!r}")
        return self


BACKGROUND = 0.1
CORD = 0.5
GREY = 0.85
MARKER_SIDE = 0.1  # fraction of n


def _ellipse(rr, cc, cy, cx, ry, rx):
    return ((rr - cy) / ry) ** 2 + ((cc - cx) / rx) ** 2 <= 1.0


def butterfly_mask(n: int, cy: float, cx: float, scale: float) -> np.ndarray:
    """Two wing lobes joined by a horizontal bridge; always one 4-connected blob."""
    rr, cc = np.mgrid[0:n, 0:n].astype(np.float64)
    wing_dx = 0.075 * n * scale
    ry, rx = 0.085 * n * scale, 0.05 * n * scale
    m = _ellipse(rr, cc, cy, cx - wing_dx, ry, rx) | _ellipse(rr, cc, cy, cx + wing_dx, ry, rx)
    bridge = (np.abs(rr - cy) <= max(1.0, 0.02 * n * scale)) & (np.abs(cc - cx) <= wing_dx)
    return (m | bridge).astype(np.uint8)


def marker_intensity(gt: np.ndarray, correlation: float, u: float) -> float:
    """Corner-marker brightness: a blend of the gt's horizontal position and noise ``u``."""
    cols = np.nonzero(gt)[1]
    pos = cols.mean() / (gt.shape[1] - 1) if cols.size else 0.5
    return float(correlation * pos + (1.0 - correlation) * u)


def distractor_mask(n: int, cord: np.ndarray, marker_side: int, rng: np.random.Generator,
                    tries: int = 50) -> np.ndarray:
    """A gt-lookalike butterfly outside the cord, clear of the corner marker.

    Placement is rejection-sampled; after ``tries`` failures no distractor is drawn.
    """
    keep_out = ndimage.binary_dilation(cord, iterations=2)
    keep_out[:marker_side + 3, :marker_side + 3] = True
    for _ in range(tries):
        cy, cx = rng.uniform(0, n - 1), rng.uniform(0, n - 1)
        m = butterfly_mask(n, cy, cx, rng.uniform(0.9, 1.15)).astype(bool)
        if m.sum() >= 0.5 * butterfly_mask(n, n / 2, n / 2, 0.9).sum() and not (m & keep_out).any():
            return m
    return np.zeros((n, n), bool)


def synth_sample(spec: SyntheticSpec, rng: np.random.Generator, sample_id: str, split: str) -> Sample:
    n = spec.n
    rr, cc = np.mgrid[0:n, 0:n].astype(np.float64)
    cy = n / 2 + rng.uniform(-0.08, 0.08) * n
    cx = n / 2 + rng.uniform(-0.08, 0.08) * n
    ry = rng.uniform(0.19, 0.23) * n
    rx = rng.uniform(0.26, 0.31) * n
    cord = _ellipse(rr, cc, cy, cx, ry, rx)
    gy = cy + rng.uniform(-0.03, 0.03) * n
    gx = cx + rng.uniform(-0.04, 0.04) * n
    gt = butterfly_mask(n, gy, gx, rng.uniform(0.9, 1.15))
    gt &= cord.astype(np.uint8)

    img = np.full((n, n), BACKGROUND)
    img[cord] = CORD
    side = max(2, int(round(MARKER_SIDE * n)))
    for _ in range(spec.distractors):
        img[distractor_mask(n, cord, side, rng)] = GREY
    img[gt.astype(bool)] = GREY
    u = rng.uniform()
    if spec.spurious_context:
        img[1:1 + side, 1:1 + side] = marker_intensity(gt, spec.correlation, u)
    img = img + rng.normal(0.0, spec.noise_std, size=(n, n))
    img = np.clip(img, 0.0, 1.0).astype(np.float32)
    return Sample(sample_id, img, gt.astype(np.uint8), split)


def generate_synthetic_dataset(spec: SyntheticSpec, seed: int = 0) -> tuple[Dataset, Dataset]:
    """Train and validation sets with disjoint ids, bit-identical for a given seed."""
    spec.validate()
    rng = np.random.default_rng(seed)
    out = []
    for split, count in (("train", spec.train), ("val", spec.val)):
        samples = [synth_sample(spec, rng, f"{split}_{i:04d}", split) for i in range(count)]
        out.append(Dataset.from_samples(samples, split))
    return out[0], out[1]


# ---------------------------------------------------------------- PGM


def _read_header(data: bytes) -> tuple[int, int, int, int]:
    """Parse a binary PGM header; returns width, height, maxval, payload offset."""
    if data[:2] != b"P5":
        if data[:2] == b"P2":
            raise DataFormatError("unsupported PGM format P2 (ASCII); only binary P5 is supported")
        raise DataFormatError("not a PGM file (missing P5 magic)")
    fields = []
    pos = 2
    while len(fields) < 3:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and data[pos:pos + 1].isdigit():
            pos += 1
        if start == pos:
            raise DataFormatError("malformed PGM header")
        fields.append(int(data[start:pos]))
    if pos >= len(data) or not data[pos:pos + 1].isspace():
        raise DataFormatError("malformed PGM header")
    w, h, maxval = fields
    return w, h, maxval, pos + 1


def read_pgm(path) -> tuple[np.ndarray, int]:
    data = Path(path).read_bytes()
    w, h, maxval, off = _read_header(data)
    if not 0 < maxval < 65536:
        raise DataFormatError(f"invalid maxval {maxval}")
    dtype = ">u2" if maxval > 255 else "u1"
    need = w * h * np.dtype(dtype).itemsize
    if len(data) - off < need:
        raise DataFormatError(f"{path}: truncated pixel data")
    arr = np.frombuffer(data, dtype=dtype, count=w * h, offset=off).reshape(h, w)
    return arr.astype(np.uint16 if maxval > 255 else np.uint8), maxval


def write_pgm(path, arr: np.ndarray, maxval: int) -> None:
    arr = np.asarray(arr)
    h, w = arr.shape
    header = f"P5\n{w} {h}\n{maxval}\n".encode("ascii")
    payload = arr.astype(">u2" if maxval > 255 else "u1").tobytes()
    Path(path).write_bytes(header + payload)


def save_image(path, image: np.ndarray) -> None:
    write_pgm(path, np.round(np.clip(image, 0, 1) * 65535).astype(np.uint16), 65535)


def load_image(path) -> np.ndarray:
    arr, maxval = read_pgm(path)
    if maxval != 65535:
        raise DataFormatError(f"{path}: image maxval must be 65535, got {maxval}")
    return (arr.astype(np.float64) / 65535.0).astype(np.float32)


def save_mask(path, mask: np.ndarray) -> None:
    write_pgm(path, (np.asarray(mask) > 0).astype(np.uint8) * 255, 255)


def load_mask(path) -> np.ndarray:
    arr, maxval = read_pgm(path)
    if maxval != 255:
        raise DataFormatError(f"{path}: mask maxval must be 255, got {maxval}")
    bad = (arr != 0) & (arr != 255)
    if bad.any():
        raise DataFormatError(f"{path}: invalid mask value {int(arr[bad][0])} (expected 0 or 255)")
    return (arr == 255).astype(np.uint8)


def save_sample(root, sample: Sample) -> tuple[str, str]:
    """Write one sample under ``root``; returns the relative image and mask paths."""
    root = Path(root)
    img_rel = f"{sample.split}/img/{sample.id}.pgm"
    msk_rel = f"{sample.split}/msk/{sample.id}.pgm"
    for rel in (img_rel, msk_rel):
        (root / rel).parent.mkdir(parents=True, exist_ok=True)
    save_image(root / img_rel, sample.image)
    save_mask(root / msk_rel, sample.gt)
    return img_rel, msk_rel


def load_sample(root, sample_id: str, img_rel: str, msk_rel: str, split: str = "train",
                n: Optional[int] = None) -> Sample:
    root = Path(root)
    img, msk = root / img_rel, root / msk_rel
    for p in (img, msk):
        if not p.exists():
            raise FileNotFoundError(f"sample {sample_id}: missing file {p}")
    image = load_image(img)
    gt = load_mask(msk)
    if image.shape != gt.shape:
        raise DataFormatError(f"sample {sample_id}: image {image.shape} and mask {gt.shape} differ")
    if n is not None and image.shape != (n, n):
        raise DataFormatError(f"sample {sample_id}: size {image.shape} does not match manifest n={n}")
    return Sample(sample_id, image, gt, split)


# ---------------------------------------------------------------- manifests


@dataclass
class Manifest:
    n: int
    split: str
    entries: list = field(default_factory=list)  # (id, split, image_rel, mask_rel)


def save_manifest(path, manifest: Manifest) -> None:
    lines = [
        "format: adaseg-manifest",
        "version: 1",
        f"n: {manifest.n}",
        f"split: {manifest.split}",
        f"count: {len(manifest.entries)}",
        "samples:",
        "id\tsplit\timage\tmask",
    ]
    lines += ["\t".join(e) for e in manifest.entries]
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")
    os.replace(tmp, path)


def read_manifest(path) -> Manifest:
    text = Path(path).read_text(encoding="utf-8").splitlines()
    meta = {}
    i = 0
    while i < len(text) and text[i].strip() != "samples:":
        line = text[i].strip()
        i += 1
        if not line or line.startswith("#"):
            continue
        if ":" not in line:
            raise DataFormatError(f"{path}: malformed line {line!r}")
        k, v = line.split(":", 1)
        meta[k.strip()] = v.strip()
    if meta.get("format") != "adaseg-manifest" or i >= len(text):
        raise DataFormatError(f"{path}: not an adaseg manifest")
    if meta.get("version") != "1":
        raise DataFormatError(f"{path}: unsupported manifest version {meta.get('version')}")
    try:
        n = int(meta["n"])
        count = int(meta["count"])
    except (KeyError, ValueError):
        raise DataFormatError(f"{path}: missing or invalid n/count") from None
    rows = [r for r in text[i + 2:] if r.strip()]
    entries, seen = [], set()
    for r in rows:
        parts = r.split("\t")
        if len(parts) != 4:
            raise DataFormatError(f"{path}: malformed sample row {r!r}")
        if parts[0] in seen:
            raise DataFormatError(f"{path}: duplicate sample id {parts[0]!r}")
        seen.add(parts[0])
        entries.append(tuple(parts))
    if len(entries) != count:
        raise DataFormatError(f"{path}: count {count} does not match {len(entries)} rows")
    return Manifest(n, meta.get("split", ""), entries)


def load_manifest(path) -> Dataset:
    """Read a manifest and every file it references, validating sizes against n."""
    man = read_manifest(path)
    root = Path(path).parent
    samples = [load_sample(root, sid, img, msk, split, man.n) for sid, split, img, msk in man.entries]
    if not samples:
        return Dataset.empty(man.n, man.split)
    return Dataset.from_samples(samples, man.split)


def write_dataset(root, dataset: Dataset) -> Path:
    """Write a dataset's rasters plus ``<root>/<split>.manifest``."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    entries = []
    for i in range(len(dataset)):
        s = dataset.sample(i)
        img_rel, msk_rel = save_sample(root, s)
        entries.append((s.id, s.split, img_rel, msk_rel))
    path = root / f"{dataset.split}.manifest"
    save_manifest(path, Manifest(dataset.n, dataset.split, entries))
    return path
