"""Label schema, manifest CSV, PPM images and NFV1 feature files."""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import DataError

# Attribute flags in manifest column order; "no_nucleus" doubles as a shape.
ATTRIBUTES = (
    "halo",
    "gemistocyte",
    "nucleoli",
    "grooved",
    "hyperchromasia",
    "overlapping",
    "multinucleation",
    "mitosis",
    "apoptosis",
    "no_nucleus",
)
SHAPES = ("oval", "close_round", "round", "elongated", "irregular", "no_nucleus")
NO_NUCLEUS_ATTR = ATTRIBUTES.index("no_nucleus")
NO_NUCLEUS_SHAPE = SHAPES.index("no_nucleus")

ATTRIBUTE_TITLES = (
    "Perinuclear Halos",
    "Gemistocyte",
    "Nucleoli",
    "Grooved",
    "Hyperchromasia",
    "Overlapping Nuclei",
    "Multinucleation",
    "Mitosis",
    "Apoptosis",
    "No Nucleus",
)
SHAPE_TITLES = ("Oval", "Close to Round", "Round", "Elongated", "Irregular Shape", "No Nucleus")
# The 15 distinct evaluation classes: 10 attributes, then the 5 proper shapes.
CLASS_TITLES = ATTRIBUTE_TITLES + SHAPE_TITLES[:-1]
N_CLASSES = len(CLASS_TITLES)

# Positive counts out of 2078 images, per class in CLASS_TITLES order.
REFERENCE_POSITIVES = (78, 51, 77, 14, 505, 105, 43, 53, 20, 545, 325, 104, 296, 333, 475)
REFERENCE_TOTAL = 2078

MANIFEST_HEADER = ("path",) + ATTRIBUTES + ("shape",)


@dataclass(frozen=True)
class LabelVector:
    attributes: tuple
    shape: int

    def __post_init__(self):
        object.__setattr__(self, "attributes", tuple(int(a) for a in self.attributes))
        self.validate()

    def validate(self):
        if len(self.attributes) != len(ATTRIBUTES):
            raise DataError(f"expected {len(ATTRIBUTES)} attribute flags, got {len(self.attributes)}")
        if any(a not in (0, 1) for a in self.attributes):
            raise DataError("attribute flags must be 0 or 1")
        if not 0 <= self.shape < len(SHAPES):
            raise DataError(f"shape index {self.shape} out of range")
        flag = self.attributes[NO_NUCLEUS_ATTR] == 1
        if flag != (self.shape == NO_NUCLEUS_SHAPE):
            raise DataError(
                f"no_nucleus flag={int(flag)} disagrees with shape={SHAPES[self.shape]}"
            )

    def class_vector(self) -> np.ndarray:
        """Binary truth over the 15 evaluation classes."""
        v = np.zeros(N_CLASSES, dtype=np.int8)
        v[: len(ATTRIBUTES)] = self.attributes
        if self.shape != NO_NUCLEUS_SHAPE:
            v[len(ATTRIBUTES) + self.shape] = 1
        return v


@dataclass
class DatasetManifest:
    root: Path
    paths: list
    labels: list
    feature_file: Optional[Path] = None
    _path_set: set = field(default_factory=set, repr=False)

    def __len__(self):
        return len(self.paths)

    def image_path(self, i) -> Path:
        return self.root / self.paths[i]

    def attribute_matrix(self) -> np.ndarray:
        return np.array([lv.attributes for lv in self.labels], dtype=np.int8).reshape(-1, len(ATTRIBUTES))

    def shape_indices(self) -> np.ndarray:
        return np.array([lv.shape for lv in self.labels], dtype=np.int64)

    def class_matrix(self) -> np.ndarray:
        return np.array([lv.class_vector() for lv in self.labels], dtype=np.int8).reshape(-1, N_CLASSES)


def _parse_row(row, lineno):
    if len(row) != len(MANIFEST_HEADER):
        raise DataError(f"manifest row {lineno}: expected {len(MANIFEST_HEADER)} fields, got {len(row)}")
    path, *flags, shape = row
    try:
        attrs = tuple(int(f) for f in flags)
    except ValueError:
        raise DataError(f"manifest row {lineno}: attribute flags must be integers") from None
    if shape not in SHAPES:
        raise DataError(f"manifest row {lineno}: unknown shape {shape!r}")
    try:
        return path, LabelVector(attrs, SHAPES.index(shape))
    except DataError as exc:
        raise DataError(f"manifest row {lineno}: {exc}") from None


def load_manifest(path, feature_file=None) -> DatasetManifest:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"manifest not found: {path}")
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != MANIFEST_HEADER:
            raise DataError(f"manifest header must be: {','.join(MANIFEST_HEADER)}")
        paths, labels, seen = [], [], set()
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            p, lv = _parse_row([c.strip() for c in row], lineno)
            if p in seen:
                raise DataError(f"manifest row {lineno}: duplicate path {p!r}")
            seen.add(p)
            paths.append(p)
            labels.append(lv)
    if len(paths) == 0:
        raise DataError(f"manifest {path} has no records")
    return DatasetManifest(
        root=path.parent,
        paths=paths,
        labels=labels,
        feature_file=Path(feature_file) if feature_file else None,
        _path_set=seen,
    )


def write_manifest(path, paths: Sequence[str], labels: Sequence[LabelVector]):
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MANIFEST_HEADER)
        for p, lv in zip(paths, labels):
            w.writerow([p, *lv.attributes, SHAPES[lv.shape]])
    return path


# ---------------------------------------------------------------------------
# PPM images
# ---------------------------------------------------------------------------


def _ppm_tokens(data: bytes, count: int):
    """Read ``count`` whitespace-separated header tokens, skipping comments."""
    tokens, pos = [], 0
    while len(tokens) < count:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise DataError("truncated PPM header")
        tokens.append(data[start:pos])
    return tokens, pos + 1  # exactly one whitespace byte ends the header


def read_ppm(path) -> np.ndarray:
    """Binary P6 PPM -> uint8 array (H, W, 3)."""
    path = Path(path)
    if not path.is_file():
        raise DataError(f"image not found: {path}")
    data = path.read_bytes()
    if data[:2] != b"P6":
        raise DataError(f"{path}: not a binary PPM (magic {data[:2]!r})")
    (magic, w, h, maxval), offset = _ppm_tokens(data, 4)
    try:
        w, h, maxval = int(w), int(h), int(maxval)
    except ValueError:
        raise DataError(f"{path}: malformed PPM header") from None
    if maxval != 255:
        raise DataError(f"{path}: only maxval 255 is supported, got {maxval}")
    need = w * h * 3
    payload = data[offset:offset + need]
    if len(payload) < need:
        raise DataError(f"{path}: truncated payload ({len(payload)} of {need} bytes)")
    return np.frombuffer(payload, dtype=np.uint8).reshape(h, w, 3)


def write_ppm(path, rgb: np.ndarray):
    rgb = np.asarray(rgb)
    if rgb.dtype != np.uint8 or rgb.ndim != 3 or rgb.shape[2] != 3:
        raise DataError(f"write_ppm expects uint8 (H, W, 3), got {rgb.dtype} {rgb.shape}")
    h, w, _ = rgb.shape
    Path(path).write_bytes(b"P6\n%d %d\n255\n" % (w, h) + rgb.tobytes())


def load_image(path, dtype=np.float64) -> np.ndarray:
    """PPM -> [3, H, W] tensor scaled to [0, 1]."""
    return read_ppm(path).transpose(2, 0, 1).astype(dtype) / 255.0


def center_crop(t: np.ndarray, size: int) -> np.ndarray:
    h, w = t.shape[-2:]
    if size > min(h, w):
        raise DataError(f"cannot crop {h}x{w} to {size}x{size}")
    oy, ox = (h - size) // 2, (w - size) // 2
    return t[..., oy:oy + size, ox:ox + size]


def uncrop(crop: np.ndarray, original: np.ndarray) -> np.ndarray:
    """Paste a center crop back into (a copy of) the image it came from."""
    out = np.array(original, copy=True)
    size = crop.shape[-1]
    h, w = out.shape[-2:]
    oy, ox = (h - size) // 2, (w - size) // 2
    out[..., oy:oy + size, ox:ox + size] = crop
    return out


def load_images(manifest: DatasetManifest, indices=None, crop: Optional[int] = 32, dtype=np.float32):
    """Stack the manifest's images (optionally center-cropped) into (N, 3, H, W)."""
    idx = range(len(manifest)) if indices is None else indices
    imgs = []
    for i in idx:
        t = load_image(manifest.image_path(i), dtype=dtype)
        imgs.append(center_crop(t, crop) if crop else t)
    return np.stack(imgs) if imgs else np.zeros((0, 3, crop or 0, crop or 0), dtype=dtype)


# ---------------------------------------------------------------------------
# NFV1 feature files
# ---------------------------------------------------------------------------

FEATURE_MAGIC = b"NFV1"


def write_feature_file(path, features: np.ndarray):
    features = np.asarray(features)
    if features.ndim != 2:
        raise DataError(f"feature matrix must be 2-D, got shape {features.shape}")
    count, dim = features.shape
    payload = np.ascontiguousarray(features, dtype="<f4").tobytes()
    Path(path).write_bytes(FEATURE_MAGIC + struct.pack("<II", count, dim) + payload)
    return Path(path)


def load_feature_file(path, expected_rows: Optional[int] = None, expected_dim: Optional[int] = None):
    path = Path(path)
    if not path.is_file():
        raise DataError(f"feature file not found: {path}")
    data = path.read_bytes()
    if data[:4] != FEATURE_MAGIC:
        raise DataError(f"{path}: bad feature-file magic {data[:4]!r}")
    if len(data) < 12:
        raise DataError(f"{path}: truncated header")
    count, dim = struct.unpack("<II", data[4:12])
    if len(data) != 12 + 4 * count * dim:
        raise DataError(f"{path}: size {len(data)} does not match header ({count} x {dim})")
    if expected_rows is not None and count != expected_rows:
        raise DataError(f"{path}: {count} rows but manifest has {expected_rows}")
    if expected_dim is not None and dim != expected_dim:
        raise DataError(f"{path}: feature dim {dim} but model expects {expected_dim}")
    return np.frombuffer(data, dtype="<f4", offset=12).reshape(count, dim).astype(np.float32)
