"""Datasets, image file formats, augmentation and segmentation metrics.

Synthetic scenes are colored geometric shapes over a gradient background:
class 0 is background, classes 1..C-1 each get a fixed shape kind and hue so
the task is learnable from local color plus shape context.  Every sample
keeps its scene description so tests can re-render the label map through an
independent per-pixel oracle.

On disk a dataset is a directory with `images/*.ppm` (binary P6) and
`labels/*.pgm` (binary P5), paired by file stem.  Label value 255 is void:
never scored, ignored by the loss.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import ops
from .errors import ConfigError, DataError

VOID_LABEL = 255


@dataclass(frozen=True)
class ShapeSpec:
    """One rendered shape: kind, class, paint color and geometry."""

    kind: str
    class_id: int
    color: tuple
    geom: dict


@dataclass(frozen=True)
class Scene:
    """Full recipe for one synthetic sample, in paint order."""

    background: tuple  # two RGB corner colors for a vertical gradient
    shapes: tuple


@dataclass(frozen=True)
class SegSample:
    """One image/label pair; image is (1, h, w, 3) float32 in [0, 1]."""

    image: np.ndarray
    labels: np.ndarray
    name: str = ""
    scene: Optional[Scene] = None


# -- color helpers ------------------------------------------------------------


def hsv_to_rgb(h: np.ndarray, s: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Vectorized HSV -> RGB, all components in [0, 1]; returns (..., 3)."""
    h = np.asarray(h, dtype=np.float64) % 1.0
    s = np.asarray(s, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    i = np.floor(h * 6.0).astype(np.int64) % 6
    f = h * 6.0 - np.floor(h * 6.0)
    p = v * (1.0 - s)
    q = v * (1.0 - s * f)
    t = v * (1.0 - s * (1.0 - f))
    r = np.choose(i, [v, q, p, p, t, v])
    g = np.choose(i, [t, v, v, q, p, p])
    b = np.choose(i, [p, p, t, v, v, q])
    return np.stack([r, g, b], axis=-1)


def rgb_to_hsv(rgb: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vectorized RGB -> (h, s, v), inverse of hsv_to_rgb."""
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    mx = np.maximum(np.maximum(r, g), b)
    mn = np.minimum(np.minimum(r, g), b)
    d = mx - mn
    h = np.zeros_like(mx)
    nz = d > 0
    rim = nz & (mx == r)
    gim = nz & (mx == g) & ~rim
    bim = nz & ~rim & ~gim
    h[rim] = ((g - b)[rim] / d[rim]) % 6.0
    h[gim] = (b - r)[gim] / d[gim] + 2.0
    h[bim] = (r - g)[bim] / d[bim] + 4.0
    h = h / 6.0
    s = np.where(mx > 0, d / np.where(mx > 0, mx, 1.0), 0.0)
    return h, s, mx


def class_color(class_id: int, num_classes: int) -> tuple:
    """Fixed, well-separated RGB color for a shape class."""
    span = max(num_classes - 2, 1)
    hue = 0.8 * (class_id - 1) / span
    rgb = hsv_to_rgb(np.float64(hue), np.float64(0.8), np.float64(0.9))
    return tuple(float(c) for c in rgb)


SHAPE_KINDS = ("rect", "disk", "triangle", "ring", "bar")


# -- synthetic scenes ---------------------------------------------------------


def _random_shape(kind: str, class_id: int, h: int, w: int, num_classes: int,
                  rng: np.random.Generator) -> ShapeSpec:
    base = min(h, w)
    r = rng.uniform(0.12, 0.28) * base
    cy = rng.uniform(0.8 * r, h - 0.8 * r)
    cx = rng.uniform(0.8 * r, w - 0.8 * r)
    if kind == "rect":
        ay = r * rng.uniform(0.6, 1.0)
        ax = r * rng.uniform(0.6, 1.0)
        geom = {"y0": cy - ay, "y1": cy + ay, "x0": cx - ax, "x1": cx + ax}
    elif kind == "disk":
        geom = {"cy": cy, "cx": cx, "r": r}
    elif kind == "triangle":
        theta = rng.uniform(0.0, 2.0 * math.pi)
        verts = []
        for k in range(3):
            a = theta + k * 2.0 * math.pi / 3.0 + rng.uniform(-0.25, 0.25)
            verts.append((cy + 1.25 * r * math.sin(a), cx + 1.25 * r * math.cos(a)))
        geom = {"verts": tuple(verts)}
    elif kind == "ring":
        geom = {"cy": cy, "cx": cx, "r_out": r, "r_in": r * rng.uniform(0.45, 0.62)}
    elif kind == "bar":
        theta = rng.uniform(0.0, math.pi)
        geom = {"cy": cy, "cx": cx, "theta": theta,
                "half_len": 1.4 * r, "half_width": r * rng.uniform(0.2, 0.35)}
    else:
        raise ConfigError(f"unknown shape kind {kind!r}")
    base_color = np.array(class_color(class_id, num_classes))
    jit = rng.uniform(-0.06, 0.06, size=3)
    color = tuple(float(c) for c in np.clip(base_color + jit, 0.0, 1.0))
    return ShapeSpec(kind=kind, class_id=class_id, color=color, geom=geom)


def shape_mask(shape: ShapeSpec, yy: np.ndarray, xx: np.ndarray) -> np.ndarray:
    """Boolean membership mask of a shape over pixel-center grids yy/xx."""
    g = shape.geom
    if shape.kind == "rect":
        return (yy >= g["y0"]) & (yy < g["y1"]) & (xx >= g["x0"]) & (xx < g["x1"])
    if shape.kind == "disk":
        return (yy - g["cy"]) ** 2 + (xx - g["cx"]) ** 2 <= g["r"] ** 2
    if shape.kind == "ring":
        d2 = (yy - g["cy"]) ** 2 + (xx - g["cx"]) ** 2
        return (d2 <= g["r_out"] ** 2) & (d2 >= g["r_in"] ** 2)
    if shape.kind == "triangle":
        (y0, x0), (y1, x1), (y2, x2) = g["verts"]
        d0 = (x1 - x0) * (yy - y0) - (y1 - y0) * (xx - x0)
        d1 = (x2 - x1) * (yy - y1) - (y2 - y1) * (xx - x1)
        d2 = (x0 - x2) * (yy - y2) - (y0 - y2) * (xx - x2)
        neg = (d0 <= 0) & (d1 <= 0) & (d2 <= 0)
        pos = (d0 >= 0) & (d1 >= 0) & (d2 >= 0)
        return neg | pos
    if shape.kind == "bar":
        dy = yy - g["cy"]
        dx = xx - g["cx"]
        along = dx * math.cos(g["theta"]) + dy * math.sin(g["theta"])
        across = -dx * math.sin(g["theta"]) + dy * math.cos(g["theta"])
        return (np.abs(along) <= g["half_len"]) & (np.abs(across) <= g["half_width"])
    raise ConfigError(f"unknown shape kind {shape.kind!r}")


def render_scene(scene: Scene, h: int, w: int) -> tuple[np.ndarray, np.ndarray]:
    """Paint a scene into (image float64 (h,w,3), labels int32 (h,w))."""
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    c0 = np.array(scene.background[0])
    c1 = np.array(scene.background[1])
    t = (yy / max(h - 1, 1))[..., None]
    image = c0 * (1.0 - t) + c1 * t
    labels = np.zeros((h, w), dtype=np.int32)
    for shape in scene.shapes:
        m = shape_mask(shape, yy, xx)
        labels[m] = shape.class_id
        image[m] = shape.color
    return image, labels


def generate_synthetic_dataset(n: int, h: int, w: int, num_classes: int,
                               seed: int) -> list[SegSample]:
    """Deterministic synthetic segmentation set; class 0 is background."""
    if num_classes < 2:
        raise ConfigError(f"need at least 2 classes, got {num_classes}")
    if n < 1 or h < 8 or w < 8:
        raise ConfigError(f"bad dataset dimensions n={n}, h={h}, w={w}")
    samples = []
    for i in range(n):
        rng = np.random.default_rng([seed, i])
        grey = rng.uniform(0.15, 0.4, size=2)
        tint = rng.uniform(-0.04, 0.04, size=(2, 3))
        background = tuple(
            tuple(float(v) for v in np.clip(grey[j] + tint[j], 0.0, 1.0))
            for j in range(2))
        shapes = []
        for cls in range(1, num_classes):
            kind = SHAPE_KINDS[(cls - 1) % len(SHAPE_KINDS)]
            count = 1 + int(rng.random() < 0.35)
            for _ in range(count):
                shapes.append(_random_shape(kind, cls, h, w, num_classes, rng))
        order = rng.permutation(len(shapes))
        scene = Scene(background=background, shapes=tuple(shapes[j] for j in order))
        image, labels = render_scene(scene, h, w)
        image = image + rng.normal(0.0, 0.015, size=image.shape)
        image = np.clip(image, 0.0, 1.0).astype(np.float32)[None]
        samples.append(SegSample(image=image, labels=labels, name=f"{i:04d}",
                                 scene=scene))
    return samples


# -- netpbm I/O ---------------------------------------------------------------


def _read_pnm_tokens(data: bytes, count: int, path: str) -> tuple[list[int], int]:
    """Read `count` whitespace/comment-separated ASCII integers after the magic."""
    tokens: list[int] = []
    i = 2  # past the 2-byte magic
    n = len(data)
    while len(tokens) < count:
        while i < n and data[i:i + 1].isspace():
            i += 1
        if i < n and data[i] == ord("#"):
            while i < n and data[i] != ord("\n"):
                i += 1
            continue
        j = i
        while j < n and not data[j:j + 1].isspace():
            j += 1
        if j == i:
            raise DataError(f"{path}: truncated header")
        try:
            tokens.append(int(data[i:j]))
        except ValueError:
            raise DataError(f"{path}: bad header token {data[i:j]!r}") from None
        i = j
    if i >= n or not data[i:i + 1].isspace():
        raise DataError(f"{path}: missing whitespace after header")
    return tokens, i + 1


def _load_pnm(path: str, magic: bytes, channels: int) -> np.ndarray:
    try:
        with open(path, "rb") as f:
            data = f.read()
    except OSError as e:
        raise DataError(f"{path}: {e}") from e
    if data[:2] != magic:
        raise DataError(f"{path}: expected {magic.decode()} file, got "
                        f"{data[:2]!r}")
    (w, h, maxval), off = _read_pnm_tokens(data, 3, path)
    if w < 1 or h < 1:
        raise DataError(f"{path}: bad dimensions {w}x{h}")
    if not 0 < maxval < 256:
        raise DataError(f"{path}: unsupported maxval {maxval}, need 1..255")
    need = w * h * channels
    raster = data[off:off + need]
    if len(raster) < need:
        raise DataError(f"{path}: truncated raster, need {need} bytes, "
                        f"have {len(raster)}")
    arr = np.frombuffer(raster, dtype=np.uint8).reshape(h, w, channels)
    return arr[..., 0] if channels == 1 else arr


def load_ppm(path: str) -> np.ndarray:
    """Binary P6 image as uint8 (h, w, 3)."""
    return _load_pnm(path, b"P6", 3)


def load_pgm(path: str) -> np.ndarray:
    """Binary P5 map as uint8 (h, w)."""
    return _load_pnm(path, b"P5", 1)


def save_ppm(path: str, image: np.ndarray) -> None:
    """Write uint8 (h, w, 3) as binary P6."""
    if image.ndim != 3 or image.shape[2] != 3 or image.dtype != np.uint8:
        raise DataError(f"save_ppm needs uint8 (h, w, 3), got {image.dtype} {image.shape}")
    h, w = image.shape[:2]
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode())
        f.write(image.tobytes())


def save_pgm(path: str, labels: np.ndarray) -> None:
    """Write uint8 (h, w) as binary P5."""
    if labels.ndim != 2 or labels.dtype != np.uint8:
        raise DataError(f"save_pgm needs uint8 (h, w), got {labels.dtype} {labels.shape}")
    h, w = labels.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode())
        f.write(labels.tobytes())


def load_sample(image_path: str, label_path: str,
                num_classes: Optional[int] = None) -> SegSample:
    """Load one PPM/PGM pair, validating dimensions and label range."""
    img = load_ppm(image_path)
    lab = load_pgm(label_path)
    if img.shape[:2] != lab.shape:
        raise DataError(
            f"{image_path}: image {img.shape[:2]} and labels {lab.shape} differ")
    labels = lab.astype(np.int32)
    if num_classes is not None:
        bad = (labels >= num_classes) & (labels != VOID_LABEL)
        if bad.any():
            v = int(labels[bad][0])
            raise DataError(
                f"{label_path}: label {v} outside [0, {num_classes}) and not "
                f"{VOID_LABEL} (void)")
    image = (img.astype(np.float32) / 255.0)[None]
    name = os.path.splitext(os.path.basename(image_path))[0]
    return SegSample(image=image, labels=labels, name=name)


def save_dataset(directory: str, samples: list[SegSample]) -> None:
    """Write samples as images/NAME.ppm + labels/NAME.pgm."""
    img_dir = os.path.join(directory, "images")
    lab_dir = os.path.join(directory, "labels")
    os.makedirs(img_dir, exist_ok=True)
    os.makedirs(lab_dir, exist_ok=True)
    for i, s in enumerate(samples):
        name = s.name or f"{i:04d}"
        img = np.clip(np.round(s.image[0] * 255.0), 0, 255).astype(np.uint8)
        save_ppm(os.path.join(img_dir, f"{name}.ppm"), img)
        save_pgm(os.path.join(lab_dir, f"{name}.pgm"), s.labels.astype(np.uint8))


def load_dataset(directory: str, num_classes: Optional[int] = None) -> list[SegSample]:
    """Load every images/*.ppm with its labels/*.pgm partner, sorted by stem."""
    img_dir = os.path.join(directory, "images")
    lab_dir = os.path.join(directory, "labels")
    if not os.path.isdir(img_dir) or not os.path.isdir(lab_dir):
        raise DataError(
            f"{directory}: expected images/ and labels/ subdirectories")
    stems = sorted(os.path.splitext(f)[0] for f in os.listdir(img_dir)
                   if f.endswith(".ppm"))
    if not stems:
        raise DataError(f"{img_dir}: no .ppm images found")
    samples = []
    for stem in stems:
        lab_path = os.path.join(lab_dir, f"{stem}.pgm")
        if not os.path.exists(lab_path):
            raise DataError(f"{lab_path}: missing labels for image {stem!r}")
        samples.append(load_sample(os.path.join(img_dir, f"{stem}.ppm"),
                                   lab_path, num_classes))
    return samples


# -- palette ------------------------------------------------------------------


def default_palette(num_classes: int) -> np.ndarray:
    """uint8 (C, 3) palette matching the synthetic class colors."""
    pal = np.zeros((num_classes, 3), dtype=np.uint8)
    pal[0] = (70, 70, 70)
    for cls in range(1, num_classes):
        pal[cls] = tuple(int(round(255 * v)) for v in class_color(cls, num_classes))
    return pal


def save_palette(path: str, palette: np.ndarray) -> None:
    """Write a palette as text lines `class r g b`."""
    with open(path, "w") as f:
        for cls, (r, g, b) in enumerate(palette):
            f.write(f"{cls} {int(r)} {int(g)} {int(b)}\n")


def load_palette(path: str) -> np.ndarray:
    """Parse `class r g b` lines back into a uint8 (C, 3) palette."""
    entries = {}
    try:
        with open(path) as f:
            lines = f.readlines()
    except OSError as e:
        raise DataError(f"{path}: {e}") from e
    for ln, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 4:
            raise DataError(f"{path}:{ln}: expected 'class r g b', got {line!r}")
        try:
            cls, r, g, b = (int(p) for p in parts)
        except ValueError:
            raise DataError(f"{path}:{ln}: non-integer value in {line!r}") from None
        if not (0 <= r <= 255 and 0 <= g <= 255 and 0 <= b <= 255) or cls < 0:
            raise DataError(f"{path}:{ln}: values out of range in {line!r}")
        entries[cls] = (r, g, b)
    if not entries or sorted(entries) != list(range(len(entries))):
        raise DataError(f"{path}: palette must cover classes 0..C-1 without gaps")
    pal = np.zeros((len(entries), 3), dtype=np.uint8)
    for cls, rgb in entries.items():
        pal[cls] = rgb
    return pal


def colorize_mask(labels: np.ndarray, palette: np.ndarray) -> np.ndarray:
    """Map labels to palette colors; void renders black."""
    out = np.zeros(labels.shape + (3,), dtype=np.uint8)
    void = labels == VOID_LABEL
    in_range = ~void & (labels >= 0) & (labels < len(palette))
    if not (in_range | void).all():
        bad = int(labels[~(in_range | void)][0])
        raise DataError(f"label {bad} outside palette of {len(palette)} classes")
    out[in_range] = palette[labels[in_range]]
    return out


# -- augmentation -------------------------------------------------------------


@dataclass(frozen=True)
class AugmentConfig:
    """Amplitudes for the training-time augmentation pipeline."""

    scale_range: tuple = (0.75, 1.5)
    flip_prob: float = 0.5
    hue: float = 0.03
    saturation: tuple = (0.85, 1.15)
    brightness: tuple = (0.85, 1.15)
    contrast: tuple = (0.85, 1.15)


def _nearest_indices(out_len: int, in_len: int) -> np.ndarray:
    idx = ((np.arange(out_len) + 0.5) * in_len / out_len).astype(np.int64)
    return np.minimum(idx, in_len - 1)


def augment(sample: SegSample, cfg: AugmentConfig, rng: np.random.Generator
            ) -> SegSample:
    """Random scale + crop-or-pad, synchronized flip, photometric jitter.

    Returns a new sample of the original spatial size; the input is not
    modified.  Padded label pixels are void, padded image pixels are black.
    """
    image = sample.image[0]
    labels = sample.labels
    h, w = labels.shape

    lo, hi = cfg.scale_range
    if (lo, hi) != (1.0, 1.0):
        s = float(rng.uniform(lo, hi))
        nh = max(1, int(round(h * s)))
        nw = max(1, int(round(w * s)))
        image = ops.resize_bilinear(image[None], nh, nw)[0]
        labels = labels[np.ix_(_nearest_indices(nh, h), _nearest_indices(nw, w))]
        # crop back down or pad back up to (h, w), axis by axis
        if nh > h:
            off = int(rng.integers(0, nh - h + 1))
            image, labels = image[off:off + h], labels[off:off + h]
        elif nh < h:
            top = (h - nh) // 2
            image = np.pad(image, ((top, h - nh - top), (0, 0), (0, 0)))
            labels = np.pad(labels, ((top, h - nh - top), (0, 0)),
                            constant_values=VOID_LABEL)
        if nw > w:
            off = int(rng.integers(0, nw - w + 1))
            image, labels = image[:, off:off + w], labels[:, off:off + w]
        elif nw < w:
            left = (w - nw) // 2
            image = np.pad(image, ((0, 0), (left, w - nw - left), (0, 0)))
            labels = np.pad(labels, ((0, 0), (left, w - nw - left)),
                            constant_values=VOID_LABEL)

    if cfg.flip_prob > 0 and rng.random() < cfg.flip_prob:
        image = image[:, ::-1]
        labels = labels[:, ::-1]

    photometric = (cfg.hue != 0.0 or cfg.saturation != (1.0, 1.0)
                   or cfg.brightness != (1.0, 1.0) or cfg.contrast != (1.0, 1.0))
    if photometric:
        image = image.astype(np.float64)
        if cfg.hue != 0.0 or cfg.saturation != (1.0, 1.0):
            hch, sch, vch = rgb_to_hsv(image)
            hch = (hch + rng.uniform(-cfg.hue, cfg.hue)) % 1.0
            sch = np.clip(sch * rng.uniform(*cfg.saturation), 0.0, 1.0)
            image = hsv_to_rgb(hch, sch, vch)
        if cfg.brightness != (1.0, 1.0):
            image = image * rng.uniform(*cfg.brightness)
        if cfg.contrast != (1.0, 1.0):
            mean = image.mean()
            image = (image - mean) * rng.uniform(*cfg.contrast) + mean
        image = np.clip(image, 0.0, 1.0)

    image = np.ascontiguousarray(image, dtype=np.float32)[None]
    labels = np.ascontiguousarray(labels, dtype=np.int32)
    return SegSample(image=image, labels=labels, name=sample.name, scene=sample.scene)


# -- metrics ------------------------------------------------------------------


def downsample_labels(labels: np.ndarray, factor: int) -> np.ndarray:
    """Nearest-neighbor label downsampling over batched (n, h, w) maps.

    Samples at cell centers, so a void pixel stays void and no new values
    appear.
    """
    if factor < 1:
        raise DataError(f"downsample factor must be >= 1, got {factor}")
    if factor == 1:
        return labels
    off = factor // 2
    return np.ascontiguousarray(labels[:, off::factor, off::factor])


def new_confusion(num_classes: int) -> np.ndarray:
    """Empty (C, C) confusion matrix; rows are truth, columns prediction."""
    return np.zeros((num_classes, num_classes), dtype=np.int64)


def confusion_update(cm: np.ndarray, prediction: np.ndarray, labels: np.ndarray,
                     ignore_index: int = VOID_LABEL) -> np.ndarray:
    """Accumulate one prediction/label pair into cm (in place) and return it."""
    if prediction.shape != labels.shape:
        raise DataError(
            f"prediction shape {prediction.shape} does not match labels {labels.shape}")
    c = cm.shape[0]
    valid = labels != ignore_index
    t = labels[valid].astype(np.int64)
    p = prediction[valid].astype(np.int64)
    if t.size and (t.min() < 0 or t.max() >= c or p.min() < 0 or p.max() >= c):
        raise DataError(f"class values outside [0, {c}) in confusion update")
    cm += np.bincount(t * c + p, minlength=c * c).reshape(c, c)
    return cm


def compute_miou(cm: np.ndarray) -> tuple[np.ndarray, float]:
    """Per-class IoU and mean.

    IoU_c = TP / (TP + FP + FN).  Classes absent from both truth and
    prediction get NaN and are excluded from the mean; the mean of an empty
    matrix is NaN.
    """
    tp = np.diag(cm).astype(np.float64)
    truth = cm.sum(axis=1).astype(np.float64)
    pred = cm.sum(axis=0).astype(np.float64)
    denom = truth + pred - tp
    ious = np.full(cm.shape[0], np.nan)
    present = denom > 0
    ious[present] = tp[present] / denom[present]
    mean = float(np.nanmean(ious)) if present.any() else float("nan")
    return ious, mean
