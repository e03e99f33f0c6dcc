"""Samples, dataset manifests, image decoding and training-set augmentation."""
from __future__ import annotations

import math
import os
from collections.abc import Sequence
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import DataError, DecodeError, ManifestError, ParameterError


@dataclass
class Sample:
    """One image with its binary label and optional field-of-view mask.

    ``image`` is H x W x C float32 in [0, 1], ``label`` H x W uint8 in {0, 1},
    ``fov_mask`` H x W bool or None.
    """

    image: np.ndarray
    label: np.ndarray
    fov_mask: Optional[np.ndarray] = None
    id: str = ""

    def __post_init__(self):
        img = np.asarray(self.image, dtype=np.float32)
        if img.ndim == 2:
            img = img[:, :, None]
        if img.ndim != 3:
            raise DataError(f"sample {self.id!r}: image must be H x W x C, got shape {img.shape}")
        lab = np.asarray(self.label)
        if lab.shape != img.shape[:2]:
            raise DataError(f"sample {self.id!r}: label shape {lab.shape} != image shape {img.shape[:2]}")
        if not np.isin(lab, (0, 1)).all():
            raise DataError(f"sample {self.id!r}: label is not binary")
        if not np.all(np.isfinite(img)) or img.min(initial=0) < 0 or img.max(initial=0) > 1:
            raise DataError(f"sample {self.id!r}: image values must be finite and in [0, 1]")
        self.image = img
        self.label = lab.astype(np.uint8)
        if self.fov_mask is not None:
            mask = np.asarray(self.fov_mask).astype(bool)
            if mask.shape != img.shape[:2]:
                raise DataError(f"sample {self.id!r}: mask shape {mask.shape} != image shape {img.shape[:2]}")
            self.fov_mask = mask

    @property
    def shape(self):
        return self.image.shape[:2]

    def counted(self):
        """Boolean map of the pixels that enter losses and metrics."""
        if self.fov_mask is None:
            return np.ones(self.shape, dtype=bool)
        return self.fov_mask


# decoding ---------------------------------------------------------------------

def decode_image(path, in_channels=None) -> np.ndarray:
    """Decode PNG (8/16-bit), BMP, PPM/PGM and other Pillow formats to H x W x C floats in [0, 1].

    Grayscale images are replicated to ``in_channels`` channels when given.
    """
    try:
        with Image.open(path) as im:
            im.load()
            arr = _pil_to_float(im)
    except FileNotFoundError:
        raise
    except UnidentifiedImageError as exc:
        raise DecodeError(f"{path}: unsupported image format") from exc
    except (OSError, SyntaxError, ValueError) as exc:
        raise DecodeError(f"{path}: corrupt image stream ({exc})") from exc
    if in_channels is not None and arr.shape[2] != in_channels:
        if arr.shape[2] == 1:
            arr = np.repeat(arr, in_channels, axis=2)
        elif in_channels == 1:
            arr = arr.mean(axis=2, keepdims=True)
        else:
            raise DecodeError(f"{path}: image has {arr.shape[2]} channels, cannot map to {in_channels}")
    return arr


def _pil_to_float(im: Image.Image) -> np.ndarray:
    mode = im.mode
    if mode == "1":
        arr = np.asarray(im, dtype=np.float32)
    elif mode in ("I;16", "I;16B", "I;16L", "I"):
        arr = np.asarray(im).astype(np.float32) / 65535.0
    elif mode == "F":
        arr = np.asarray(im, dtype=np.float32)
        top = float(arr.max(initial=0))
        if top > 1:
            arr = arr / top
    elif mode in ("L", "RGB"):
        arr = np.asarray(im, dtype=np.float32) / 255.0
    elif mode == "LA":
        arr = np.asarray(im.convert("L"), dtype=np.float32) / 255.0
    elif mode == "P":
        conv = im.convert("RGBA" if "transparency" in im.info else "RGB").convert("RGB")
        arr = np.asarray(conv, dtype=np.float32) / 255.0
        if np.array_equal(arr[..., 0], arr[..., 1]) and np.array_equal(arr[..., 0], arr[..., 2]):
            arr = arr[..., 0]
    else:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    if arr.ndim == 2:
        arr = arr[:, :, None]
    return np.clip(arr, 0.0, 1.0)


def binarize_label(raw, threshold=0.5) -> np.ndarray:
    raw = np.asarray(raw, dtype=np.float32)
    if raw.ndim == 3:
        if raw.shape[2] != 1 and not np.all(raw == raw[:, :, :1]):
            raise DataError(f"label must be single-channel, got {raw.shape[2]} distinct channels")
        raw = raw[:, :, 0]
    return (raw >= threshold).astype(np.uint8)


def save_png(path, arr):
    """Write a uint8 (H x W or H x W x 3) or uint16 (H x W) array as PNG."""
    arr = np.asarray(arr)
    if arr.dtype == np.uint16:
        Image.fromarray(arr.astype(np.uint16)).save(path, format="PNG")
    else:
        Image.fromarray(arr.astype(np.uint8)).save(path, format="PNG")


def to_uint8(arr):
    return np.clip(np.rint(np.asarray(arr, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


# geometry ---------------------------------------------------------------------

def _rotation_terms(degrees):
    d = float(degrees) % 360.0
    if d % 90.0 == 0:
        return {0.0: (1.0, 0.0), 90.0: (0.0, 1.0), 180.0: (-1.0, 0.0), 270.0: (0.0, -1.0)}[d]
    rad = math.radians(d)
    return math.cos(rad), math.sin(rad)


def _source_coords(shape, degrees):
    H, W = shape
    cos, sin = _rotation_terms(degrees)
    cy, cx = (H - 1) / 2.0, (W - 1) / 2.0
    r, c = np.mgrid[0:H, 0:W].astype(np.float64)
    x = c - cx
    y = cy - r
    # inverse of a counter-clockwise rotation
    xs = cos * x + sin * y
    ys = -sin * x + cos * y
    return cy - ys, cx + xs


def rotate_array(arr, degrees, order=1):
    """Rotate an H x W or H x W x C array counter-clockwise about its centre.

    ``order`` 1 is bilinear, 0 nearest neighbour; out-of-canvas samples are 0.
    """
    arr = np.asarray(arr)
    squeeze = arr.ndim == 2
    a = arr[:, :, None] if squeeze else arr
    H, W = a.shape[:2]
    sr, sc = _source_coords((H, W), degrees)
    if order == 0:
        ri = np.floor(sr + 0.5).astype(np.intp)
        ci = np.floor(sc + 0.5).astype(np.intp)
        inside = (ri >= 0) & (ri < H) & (ci >= 0) & (ci < W)
        out = np.zeros_like(a)
        out[inside] = a[ri[inside], ci[inside]]
    else:
        r0 = np.floor(sr).astype(np.intp)
        c0 = np.floor(sc).astype(np.intp)
        fr = (sr - r0)[:, :, None]
        fc = (sc - c0)[:, :, None]
        out = np.zeros(a.shape, dtype=np.float64)
        for dr, wr in ((0, 1.0 - fr), (1, fr)):
            for dc, wc in ((0, 1.0 - fc), (1, fc)):
                rr, cc = r0 + dr, c0 + dc
                inside = (rr >= 0) & (rr < H) & (cc >= 0) & (cc < W)
                vals = np.zeros(a.shape, dtype=np.float64)
                vals[inside] = a[rr[inside], cc[inside]]
                out += wr * wc * vals
        out = out.astype(a.dtype)
    return out[:, :, 0] if squeeze else out


def rotate_sample(sample: Sample, degrees) -> Sample:
    """Bilinear image rotation, nearest-neighbour label/mask rotation, canvas preserved.

    A sample without a field-of-view mask gains one at non-zero angles so the
    zero-filled corners are excluded downstream.
    """
    if float(degrees) % 360.0 == 0:
        return replace(sample)
    mask = sample.fov_mask if sample.fov_mask is not None else np.ones(sample.shape, dtype=bool)
    return Sample(
        image=np.clip(rotate_array(sample.image, degrees, order=1), 0.0, 1.0),
        label=rotate_array(sample.label, degrees, order=0),
        fov_mask=rotate_array(mask, degrees, order=0),
        id=sample.id,
    )


def adjust_brightness(sample: Sample, gain) -> Sample:
    if not gain > 0:
        raise ParameterError(f"brightness gain must be positive, got {gain}")
    return Sample(
        image=np.clip(sample.image * np.float32(gain), 0.0, 1.0),
        label=sample.label,
        fov_mask=sample.fov_mask,
        id=sample.id,
    )


@dataclass(frozen=True)
class CropRecord:
    height: int
    width: int
    pad_bottom: int = 0
    pad_right: int = 0

    @property
    def empty(self):
        return self.pad_bottom == 0 and self.pad_right == 0

    def crop(self, arr):
        """Undo padding on an array whose first two axes are H x W."""
        return np.asarray(arr)[: self.height, : self.width]


def _pad_mode(size, pad):
    return "reflect" if pad < size else "edge"


def pad_to_multiple(sample: Sample, multiple=4):
    """Pad bottom/right to the next multiple; image reflect-padded, label and mask zero-padded.

    Returns ``(padded_sample, crop_record)``. A sample without a mask gains one
    that excludes the padded border.
    """
    if multiple < 1:
        raise ParameterError(f"multiple must be >= 1, got {multiple}")
    H, W = sample.shape
    ph = (-H) % multiple
    pw = (-W) % multiple
    record = CropRecord(H, W, ph, pw)
    if record.empty:
        return sample, record
    img = sample.image
    if ph:
        img = np.pad(img, ((0, ph), (0, 0), (0, 0)), mode=_pad_mode(H, ph))
    if pw:
        img = np.pad(img, ((0, 0), (0, pw), (0, 0)), mode=_pad_mode(W, pw))
    label = np.pad(sample.label, ((0, ph), (0, pw)))
    mask = sample.counted()
    mask = np.pad(mask, ((0, ph), (0, pw)))
    return Sample(img, label, mask, sample.id), record


# augmentation -----------------------------------------------------------------

def draw_gains(count, gain_range=(0.7, 1.3), dead_zone=(0.98, 1.02), rng=None):
    lo, hi = gain_range
    if not 0 < lo < hi:
        raise ParameterError(f"invalid gain range {gain_range}")
    dlo, dhi = dead_zone
    if dlo <= lo and dhi >= hi:
        raise ParameterError(f"gain range {gain_range} lies inside the dead zone {dead_zone}")
    rng = rng if rng is not None else np.random.default_rng()
    out = []
    while len(out) < count:
        g = float(rng.uniform(lo, hi))
        if not dlo <= g <= dhi:
            out.append(g)
    return out


class AugmentedDataset(Sequence):
    """Lazily expanded training set.

    For each source sample: ``rotations`` copies rotated by 0, 1, ... degrees,
    then ``brightness_variants`` copies at seeded random gains. Items are
    computed on access, so the expanded set never needs to fit in memory.
    """

    def __init__(self, samples, rotations=360, brightness_variants=20, gain_range=(0.7, 1.3),
                 rng_seed=0, dead_zone=(0.98, 1.02)):
        if len(samples) == 0:
            raise DataError("cannot augment an empty sample set")
        if rotations < 0 or brightness_variants < 0:
            raise ParameterError("rotation and brightness counts must be non-negative")
        self.samples = samples
        self.rotations = int(rotations)
        self.brightness_variants = int(brightness_variants)
        rng = np.random.default_rng(rng_seed)
        flat = draw_gains(len(samples) * self.brightness_variants, gain_range, dead_zone, rng)
        self.gains = np.asarray(flat, dtype=np.float64).reshape(len(samples), self.brightness_variants)

    @property
    def per_source(self):
        return self.rotations + self.brightness_variants

    def __len__(self):
        return len(self.samples) * self.per_source

    def describe(self, index):
        """(source index, kind, value) of an item without decoding anything."""
        if not 0 <= index < len(self):
            raise IndexError(index)
        src, j = divmod(index, self.per_source)
        if j < self.rotations:
            return src, "rot", j
        return src, "gain", float(self.gains[src, j - self.rotations])

    def __getitem__(self, index):
        if isinstance(index, slice):
            return [self[i] for i in range(*index.indices(len(self)))]
        if index < 0:
            index += len(self)
        src, kind, value = self.describe(index)
        base = self.samples[src]
        if kind == "rot":
            out = rotate_sample(base, value)
            out.id = f"{base.id}_rot{value:03d}"
        else:
            j = index % self.per_source - self.rotations
            out = adjust_brightness(base, value)
            out.id = f"{base.id}_gain{j:02d}"
        return out


def augment_training_set(samples, rotations=360, brightness_variants=20, gain_range=(0.7, 1.3), rng_seed=0):
    return AugmentedDataset(samples, rotations, brightness_variants, gain_range, rng_seed)


# manifests --------------------------------------------------------------------

@dataclass
class ManifestRecord:
    id: str
    image: Path
    label: Path
    mask: Optional[Path] = None
    line: int = 0


@dataclass
class DatasetManifest:
    name: str
    split: str
    records: list = field(default_factory=list)
    resize: Optional[tuple] = None  # None means native resolution
    path: Optional[Path] = None

    def __len__(self):
        return len(self.records)


def _parse_header(text, line):
    fields = {}
    for tok in text.split():
        if "=" not in tok:
            raise ManifestError(f"malformed header token {tok!r}", line)
        k, v = tok.split("=", 1)
        fields[k] = v
    missing = {"dataset", "split", "resize"} - set(fields)
    if missing:
        raise ManifestError(f"header lacks {sorted(missing)}", line)
    if fields["split"] not in ("train", "test"):
        raise ManifestError(f"split must be train or test, got {fields['split']!r}", line)
    return fields["dataset"], fields["split"], parse_resize(fields["resize"], line)


def parse_resize(text, line=None):
    if text == "native":
        return None
    parts = text.lower().split("x")
    try:
        h, w = (int(p) for p in parts)
    except ValueError:
        raise ManifestError(f"resize must be 'native' or HxW, got {text!r}", line) from None
    if h < 1 or w < 1:
        raise ManifestError(f"resize dimensions must be positive, got {text!r}", line)
    return h, w


def load_manifest(path, check_files=True) -> DatasetManifest:
    """Parse a tab-separated manifest; relative paths resolve against its directory."""
    path = Path(path)
    if not path.is_file():
        raise ManifestError(f"manifest not found: {path}")
    base = path.parent
    header = None
    records = []
    seen = {}
    with open(path, encoding="utf-8") as f:
        for lineno, raw in enumerate(f, start=1):
            line = raw.rstrip("\n").rstrip("\r")
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            if header is None:
                header = _parse_header(line, lineno)
                continue
            parts = line.split("\t")
            if len(parts) not in (3, 4) or not all(p.strip() for p in parts):
                raise ManifestError(f"expected 3 or 4 tab-separated fields, got {len(parts)}", lineno)
            rid = parts[0].strip()
            if rid in seen:
                raise ManifestError(f"duplicate id {rid!r} (first on line {seen[rid]})", lineno)
            seen[rid] = lineno
            files = [base / p.strip() for p in parts[1:]]
            if check_files:
                for kind, fp in zip(("image", "label", "mask"), files):
                    if not fp.is_file():
                        raise ManifestError(f"record {rid!r}: {kind} file not found: {fp}", lineno)
            records.append(ManifestRecord(rid, files[0], files[1], files[2] if len(files) == 3 else None, lineno))
    if header is None:
        raise ManifestError("manifest has no header line")
    name, split, resize = header
    return DatasetManifest(name, split, records, resize, path)


def write_manifest(path, name, split, records, resize=None):
    """Write ``records`` ((id, image, label[, mask]) tuples) with paths relative to the manifest."""
    path = Path(path)
    base = path.parent.resolve()
    res = "native" if resize is None else f"{resize[0]}x{resize[1]}"
    lines = [f"dataset={name} split={split} resize={res}"]
    for rec in records:
        rid, *files = rec
        rel = [os.path.relpath(Path(p).resolve(), base) for p in files if p is not None]
        lines.append("\t".join([rid, *rel]))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def split_records(records, n_train):
    """First ``n_train`` records for training, the rest for testing."""
    records = list(records)
    if not 0 <= n_train <= len(records):
        raise ParameterError(f"cannot take {n_train} training records from {len(records)}")
    return records[:n_train], records[n_train:]


def _resize(arr, size, nearest):
    h, w = size
    if arr.shape[:2] == (h, w):
        return arr
    resample = Image.NEAREST if nearest else Image.BILINEAR
    if arr.ndim == 2:
        return np.asarray(Image.fromarray(arr.astype(np.float32), mode="F").resize((w, h), resample))
    chans = [np.asarray(Image.fromarray(arr[:, :, c].astype(np.float32), mode="F").resize((w, h), resample))
             for c in range(arr.shape[2])]
    return np.stack(chans, axis=2)


def load_sample(record: ManifestRecord, in_channels=3, resize=None) -> Sample:
    image = decode_image(record.image, in_channels)
    label = binarize_label(decode_image(record.label))
    mask = binarize_label(decode_image(record.mask)).astype(bool) if record.mask is not None else None
    if resize is not None:
        image = np.clip(_resize(image, resize, nearest=False), 0.0, 1.0)
        label = _resize(label, resize, nearest=True).astype(np.uint8)
        if mask is not None:
            mask = _resize(mask.astype(np.float32), resize, nearest=True) > 0.5
    try:
        return Sample(image, label, mask, record.id)
    except DataError as exc:
        raise DataError(f"record {record.id!r} (line {record.line}): {exc}") from None


class ManifestDataset(Sequence):
    """Samples of a manifest, decoded on access."""

    def __init__(self, manifest: DatasetManifest, in_channels=3):
        self.manifest = manifest
        self.in_channels = in_channels

    def __len__(self):
        return len(self.manifest.records)

    def __getitem__(self, index):
        if isinstance(index, slice):
            return [self[i] for i in range(*index.indices(len(self)))]
        return load_sample(self.manifest.records[index], self.in_channels, self.manifest.resize)


# synthetic data ---------------------------------------------------------------

def synthetic_vessel_sample(size=64, seed=0, in_channels=3, n_vessels=4, with_mask=True) -> Sample:
    """A fundus-like image with dark curvilinear vessels on a reddish disc."""
    rng = np.random.default_rng(seed)
    H = W = size
    rr, cc = np.mgrid[0:H, 0:W].astype(np.float64)
    label = np.zeros((H, W), dtype=bool)
    for _ in range(n_vessels):
        y, x = rng.uniform(0.2, 0.8) * H, rng.uniform(0.2, 0.8) * W
        heading = rng.uniform(0, 2 * np.pi)
        radius = rng.uniform(0.7, 1.6) * size / 64
        for _ in range(3 * size):
            heading += rng.normal(0, 0.15)
            y += np.sin(heading)
            x += np.cos(heading)
            if not (-2 <= y < H + 2 and -2 <= x < W + 2):
                break
            label |= (rr - y) ** 2 + (cc - x) ** 2 <= radius ** 2
            radius = max(0.6 * size / 64, radius * 0.995)
    fov = (rr - (H - 1) / 2) ** 2 + (cc - (W - 1) / 2) ** 2 <= (0.48 * size) ** 2
    base = 0.55 + 0.2 * np.cos(rr / H * np.pi) * np.cos(cc / W * np.pi)
    tint = np.array([1.0, 0.55, 0.3])[:in_channels] if in_channels <= 3 else np.ones(in_channels)
    img = base[:, :, None] * tint[None, None, :]
    img = img * np.where(label, 0.45, 1.0)[:, :, None]
    img += rng.normal(0, 0.02, size=img.shape)
    img *= fov[:, :, None]
    return Sample(np.clip(img, 0, 1), (label & fov).astype(np.uint8), fov if with_mask else None, f"synth{seed:03d}")


def write_synthetic_dataset(directory, n=1, size=64, seed=0, split="train", name="synthetic"):
    """Write ``n`` synthetic samples as PNGs plus a manifest; returns the manifest path."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    records = []
    for i in range(n):
        s = synthetic_vessel_sample(size, seed + i)
        img_p = directory / f"{s.id}_image.png"
        lab_p = directory / f"{s.id}_label.png"
        mask_p = directory / f"{s.id}_mask.png"
        save_png(img_p, to_uint8(s.image))
        save_png(lab_p, s.label * 255)
        save_png(mask_p, s.fov_mask.astype(np.uint8) * 255)
        records.append((s.id, img_p, lab_p, mask_p))
    return write_manifest(directory / f"{split}.tsv", name, split, records)
