"""Dataset ingestion, synthetic surrogate data, Gaussian noise and splits.

Images are held as float32 arrays ``[N, 1, H, W]`` scaled to ``[0, 1]``.
Two on-disk formats are read without extra dependencies:

* binary PGM (``P5``, maxval <= 255), one image per file;
* IDX archives (``idx3-ubyte`` images / ``idx1-ubyte`` labels, big-endian),
  addressed from a manifest as ``archive.idx3-ubyte#<index>``.

Noise standard deviations are in normalised pixel units.
"""

from __future__ import annotations

import csv
import gzip
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from fusenet_uq.rng import box_muller, stream

SYNTHETIC_CLASSES = ("disk", "cross", "ring")
NOISE_GRID = (0.0001, 0.001, 0.01, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6)
IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class DataError(ValueError):
    """Dataset content violates a contract (bad labels, empty class, ...)."""


class LoadError(DataError):
    """An image or manifest entry could not be read."""


@dataclass
class LabeledSet:
    x: np.ndarray
    y: np.ndarray
    class_names: tuple = SYNTHETIC_CLASSES

    def __post_init__(self):
        self.y = np.asarray(self.y, dtype=np.int64)
        if len(self.x) != len(self.y):
            raise DataError(f"{len(self.x)} images but {len(self.y)} labels")

    def __len__(self):
        return len(self.y)

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def subset(self, idx) -> "LabeledSet":
        idx = np.asarray(idx, dtype=np.int64)
        return LabeledSet(self.x[idx], self.y[idx], self.class_names)


# --- synthetic surrogate -----------------------------------------------------

def _soft(d: np.ndarray) -> np.ndarray:
    """Anti-aliased inside-indicator for a signed distance (negative = inside)."""
    return np.clip(0.5 - d, 0.0, 1.0)


def _render(label: int, g: int, rng) -> np.ndarray:
    yy, xx = np.mgrid[0:g, 0:g].astype(np.float64) + 0.5
    cy, cx = g / 2 + rng.uniform(-0.12, 0.12, size=2) * g
    r = np.hypot(yy - cy, xx - cx)
    if label == 0:
        shape = _soft(r - rng.uniform(0.16, 0.26) * g)
    elif label == 1:
        half_t = rng.uniform(0.04, 0.07) * g
        half_l = rng.uniform(0.28, 0.4) * g
        h_bar = np.maximum(np.abs(yy - cy) - half_t, np.abs(xx - cx) - half_l)
        v_bar = np.maximum(np.abs(xx - cx) - half_t, np.abs(yy - cy) - half_l)
        shape = np.maximum(_soft(h_bar), _soft(v_bar))
    else:
        outer = rng.uniform(0.28, 0.36) * g
        width = rng.uniform(0.05, 0.08) * g
        shape = _soft(np.abs(r - outer) - width)
        shape = np.maximum(shape, _soft(np.abs(r - outer / 2.4) - width * 0.6))
    # textured grey background: base level plus a few low-frequency waves
    background = np.full((g, g), rng.uniform(0.1, 0.3))
    for _ in range(3):
        fy, fx = rng.uniform(-2.5, 2.5, size=2) * (2 * np.pi / g)
        background += 0.03 * np.cos(fy * yy + fx * xx + rng.uniform(0, 2 * np.pi))
    contrast = rng.uniform(0.35, 0.6)
    return background + contrast * shape


def synthesize_dataset(n_per_class: int, seed: int = 0, geometry: int = 64, pixel_noise: float = 0.15) -> LabeledSet:
    """Three procedural classes (filled disks, crossing bars, concentric rings).

    Shapes are drawn brighter than a textured grey background; every sample
    has jittered position, size, contrast and background plus mild pixel
    noise whose std is drawn per sample from ``[pixel_noise / 4, pixel_noise]``.
    Labels are interleaved (0, 1, 2, 0, 1, 2, ...).
    """
    if n_per_class < 1:
        raise ValueError("n_per_class must be >= 1")
    if geometry < 16:
        raise ValueError(f"geometry must be >= 16 px, got {geometry}")
    rng = stream(seed, 101)
    k = len(SYNTHETIC_CLASSES)
    x = np.empty((n_per_class * k, 1, geometry, geometry), dtype=np.float32)
    y = np.tile(np.arange(k), n_per_class)
    for i, label in enumerate(y):
        img = _render(int(label), geometry, rng)
        img = img + rng.uniform(0.25, 1.0) * pixel_noise * box_muller(rng, geometry * geometry).reshape(geometry, geometry)
        x[i, 0] = np.clip(img, 0.0, 1.0)
    return LabeledSet(x, y, SYNTHETIC_CLASSES)


_SEGMENTS = {
    0: "abcdef", 1: "bc", 2: "abged", 3: "abgcd", 4: "fgbc",
    5: "afgcd", 6: "afgedc", 7: "abc", 8: "abcdefg", 9: "abcdfg",
}


def synthesize_digits(n: int, seed: int = 0, geometry: int = 64) -> np.ndarray:
    """Seven-segment style digit glyphs: an out-of-distribution set for the surrogate task."""
    rng = stream(seed, 202)
    g = geometry
    yy, xx = np.mgrid[0:g, 0:g].astype(np.float64) + 0.5
    out = np.empty((n, 1, g, g), dtype=np.float32)
    for i in range(n):
        digit = int(rng.integers(10))
        w, h = rng.uniform(0.25, 0.35) * g, rng.uniform(0.5, 0.65) * g
        x0 = g / 2 - w / 2 + rng.uniform(-0.08, 0.08) * g
        y0 = g / 2 - h / 2 + rng.uniform(-0.08, 0.08) * g
        t = rng.uniform(0.04, 0.06) * g
        ends = {
            "a": ((x0, y0), (x0 + w, y0)), "g": ((x0, y0 + h / 2), (x0 + w, y0 + h / 2)),
            "d": ((x0, y0 + h), (x0 + w, y0 + h)), "f": ((x0, y0), (x0, y0 + h / 2)),
            "b": ((x0 + w, y0), (x0 + w, y0 + h / 2)), "e": ((x0, y0 + h / 2), (x0, y0 + h)),
            "c": ((x0 + w, y0 + h / 2), (x0 + w, y0 + h)),
        }
        img = np.zeros((g, g))
        for s in _SEGMENTS[digit]:
            (ax, ay), (bx, by) = ends[s]
            dx, dy = bx - ax, by - ay
            u = np.clip(((xx - ax) * dx + (yy - ay) * dy) / (dx * dx + dy * dy), 0, 1)
            d = np.hypot(xx - ax - u * dx, yy - ay - u * dy)
            img = np.maximum(img, _soft(d - t))
        out[i, 0] = img * rng.uniform(0.7, 1.0)
    return out


def synthesize_noise_images(n: int, seed: int = 0, geometry: int = 64) -> np.ndarray:
    """Uniform [0, 1] noise images."""
    return stream(seed, 303).random((n, 1, geometry, geometry)).astype(np.float32)


# --- noise --------------------------------------------------------------------

@dataclass(frozen=True)
class NoiseSpec:
    std: float
    clip_to_unit: bool = True
    mean: float = field(default=0.0, init=False)

    def __post_init__(self):
        if not self.std >= 0:
            raise ValueError(f"noise std must be >= 0, got {self.std}")


def add_gaussian_noise(x: np.ndarray, spec: NoiseSpec, seed: int) -> np.ndarray:
    """``x + N(0, std^2)`` element-wise, optionally clamped to [0, 1]."""
    x = np.asarray(x)
    if spec.std == 0:
        return x.copy()
    z = box_muller(stream(seed, 404), x.size).reshape(x.shape)
    out = x + spec.std * z
    if spec.clip_to_unit:
        out = np.clip(out, 0.0, 1.0)
    return out.astype(x.dtype)


# --- splits ---------------------------------------------------------------------

def split_indices(labels, fractions: Sequence[float], seed: int) -> tuple:
    """Stratified partition of ``range(len(labels))``; rounding remainders go to the first part."""
    labels = np.asarray(labels)
    fractions = [float(f) for f in fractions]
    if not fractions or any(f <= 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"fractions must be positive and sum to 1, got {fractions}")
    rng = stream(seed, 505)
    parts: list[list] = [[] for _ in fractions]
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        if len(idx) < len(fractions):
            raise DataError(f"class {c} has {len(idx)} samples, fewer than {len(fractions)} split parts")
        idx = idx[rng.permutation(len(idx))]
        counts = [int(np.floor(len(idx) * f)) for f in fractions[1:]]
        counts = [max(1, n) for n in counts]
        counts.insert(0, len(idx) - sum(counts))
        if counts[0] < 1:
            raise DataError(f"class {c} too small for fractions {fractions}")
        start = 0
        for part, n in zip(parts, counts):
            part.extend(idx[start:start + n])
            start += n
    return tuple(np.sort(np.asarray(p, dtype=np.int64)) for p in parts)


def stratified_split(dataset: LabeledSet, fractions=(0.6, 0.2, 0.2), seed: int = 0) -> tuple:
    return tuple(dataset.subset(i) for i in split_indices(dataset.y, fractions, seed))


# --- file formats -------------------------------------------------------------------

def _open(path: Path):
    return gzip.open(path, "rb") if str(path).endswith(".gz") else open(path, "rb")


def read_idx(path) -> np.ndarray:
    """Read an unsigned-byte IDX file (any rank) as a uint8 array."""
    path = Path(path)
    with _open(path) as fh:
        raw = fh.read()
    if len(raw) < 4 or raw[0] != 0 or raw[1] != 0:
        raise LoadError(f"{path}: not an IDX file")
    if raw[2] != 0x08:
        raise LoadError(f"{path}: only unsigned-byte IDX data is supported")
    ndim = raw[3]
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise LoadError(f"{path}: truncated IDX header")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    count = int(np.prod(dims)) if dims else 1
    if len(raw) - header < count:
        raise LoadError(f"{path}: truncated IDX payload")
    return np.frombuffer(raw, dtype=np.uint8, count=count, offset=header).reshape(dims)


def write_idx(path, array: np.ndarray) -> None:
    a = np.ascontiguousarray(array, dtype=np.uint8)
    with open(path, "wb") as fh:
        fh.write(bytes([0, 0, 0x08, a.ndim]))
        fh.write(struct.pack(f">{a.ndim}I", *a.shape))
        fh.write(a.tobytes())


def read_pgm(path) -> np.ndarray:
    """Read a binary (P5) greyscale PGM with maxval <= 255."""
    path = Path(path)
    with open(path, "rb") as fh:
        raw = fh.read()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if pos < len(raw) and raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise LoadError(f"{path}: truncated PGM header")
        tokens.append(raw[start:pos])
    if tokens[0] != b"P5":
        raise LoadError(f"{path}: not a binary PGM (P5) file")
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise LoadError(f"{path}: malformed PGM header") from None
    if not 0 < maxval < 256:
        raise LoadError(f"{path}: unsupported maxval {maxval}")
    pos += 1
    if len(raw) - pos < w * h:
        raise LoadError(f"{path}: truncated PGM payload")
    img = np.frombuffer(raw, dtype=np.uint8, count=w * h, offset=pos).reshape(h, w)
    if maxval != 255:
        img = np.round(img.astype(np.float64) * (255.0 / maxval)).astype(np.uint8)
    return img


def write_pgm(path, image: np.ndarray) -> None:
    img = np.ascontiguousarray(image, dtype=np.uint8)
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(img.tobytes())


def resize_bilinear(img: np.ndarray, height: int, width: int) -> np.ndarray:
    """Bilinear resize with half-pixel centres and edge clamping."""
    img = np.asarray(img, dtype=np.float64)
    h, w = img.shape
    if (h, w) == (height, width):
        return img.copy()

    def coords(n_in, n_out):
        s = np.clip((np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5, 0, n_in - 1)
        lo = np.floor(s).astype(np.int64)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, s - lo

    y0, y1, fy = coords(h, height)
    x0, x1, fx = coords(w, width)
    top = img[y0][:, x0] * (1 - fx) + img[y0][:, x1] * fx
    bot = img[y1][:, x0] * (1 - fx) + img[y1][:, x1] * fx
    return top * (1 - fy[:, None]) + bot * fy[:, None]


# --- manifests -----------------------------------------------------------------------

@dataclass
class DatasetManifest:
    entries: list  # (path, label, class_name)
    class_names: tuple
    geometry: tuple = (64, 64)
    root: Path = Path(".")

    @classmethod
    def read(cls, path, geometry=(64, 64)) -> "DatasetManifest":
        path = Path(path)
        try:
            with open(path, newline="", encoding="utf-8") as fh:
                reader = csv.DictReader(fh)
                if reader.fieldnames != ["path", "label", "class_name"]:
                    raise LoadError(f"{path}: manifest header must be path,label,class_name")
                rows = list(reader)
        except OSError as exc:
            raise LoadError(f"cannot read manifest {path}: {exc.strerror}") from None
        entries, names = [], {}
        for n, row in enumerate(rows, start=2):
            try:
                label = int(row["label"])
            except (TypeError, ValueError):
                raise LoadError(f"{path}:{n}: bad label {row['label']!r}") from None
            entries.append((row["path"], label, row["class_name"]))
            if names.setdefault(label, row["class_name"]) != row["class_name"]:
                raise LoadError(f"{path}:{n}: label {label} maps to two class names")
        ordered = tuple(names[k] for k in sorted(names))
        return cls(entries, ordered, tuple(geometry), path.parent)


def _read_entry(root: Path, ref: str, cache: dict) -> np.ndarray:
    if "#" in ref:
        file, _, index = ref.rpartition("#")
        p = root / file
        if p not in cache:
            cache[p] = read_idx(p)
        archive = cache[p]
        i = int(index)
        if archive.ndim != 3 or not 0 <= i < len(archive):
            raise LoadError(f"index {i} out of range for {p}")
        return archive[i]
    p = root / ref
    if p.suffix.lower() == ".pgm":
        return read_pgm(p)
    arr = read_idx(p)
    if arr.ndim == 3 and len(arr) == 1:
        arr = arr[0]
    if arr.ndim != 2:
        raise LoadError(f"{p}: expected a single 2-d image")
    return arr


def to_unit_images(images: np.ndarray, geometry) -> np.ndarray:
    """uint8 ``[N, h, w]`` images -> float32 ``[N, 1, H, W]`` in [0, 1]."""
    h, w = geometry
    out = np.empty((len(images), 1, h, w), dtype=np.float32)
    for i, img in enumerate(images):
        out[i, 0] = np.clip(resize_bilinear(np.asarray(img, dtype=np.float64) / 255.0, h, w), 0, 1)
    return out


def load_dataset(manifest: DatasetManifest, num_classes: Optional[int] = None) -> LabeledSet:
    k = num_classes if num_classes is not None else len(manifest.class_names)
    if k < 2:
        raise DataError("a dataset needs at least two classes")
    h, w = manifest.geometry
    cache: dict = {}
    x = np.empty((len(manifest.entries), 1, h, w), dtype=np.float32)
    y = np.empty(len(manifest.entries), dtype=np.int64)
    for i, (ref, label, name) in enumerate(manifest.entries):
        if not 0 <= label < k:
            raise LoadError(f"entry {ref!r}: label {label} outside [0, {k})")
        try:
            img = _read_entry(manifest.root, ref, cache)
        except OSError as exc:
            raise LoadError(f"entry {ref!r}: {exc.strerror or exc}") from None
        except LoadError as exc:
            raise LoadError(f"entry {ref!r}: {exc}") from None
        x[i] = to_unit_images(img[None], (h, w))[0]
        y[i] = label
    present = set(y.tolist())
    if present != set(range(k)):
        missing = sorted(set(range(k)) - present)
        raise DataError(f"labels must be dense in [0, {k}); missing {missing}")
    names = manifest.class_names if len(manifest.class_names) == k else tuple(str(c) for c in range(k))
    return LabeledSet(x, y, names)


def load_idx_pair(images_path, labels_path=None, geometry=(64, 64)):
    """Load an IDX image archive (and optional label archive)."""
    imgs = read_idx(images_path)
    if imgs.ndim != 3:
        raise LoadError(f"{images_path}: expected rank-3 image archive")
    x = to_unit_images(imgs, geometry)
    if labels_path is None:
        return x
    labels = read_idx(labels_path)
    if labels.shape != (len(imgs),):
        raise LoadError(f"{labels_path}: label count does not match images")
    return x, labels.astype(np.int64)
