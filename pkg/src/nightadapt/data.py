"""Dataset ingestion and the synthetic paired day/night scene generator.

On-disk layout: ``<root>/images/*.png`` with optional ``<root>/labels/*.png``
holding class indices as single-channel 8-bit images (255 = ignore), plus a
``pairs.tsv`` with one ``night_name<TAB>day_name`` line per day/night pair.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .core import IGNORE_INDEX, LabelSet

log = logging.getLogger(__name__)

SYNTH_NAMES = ("road", "sidewalk", "building", "vegetation", "sky",
               "pole", "traffic sign", "car")
# cars move between the day and night shots, everything else persists
SYNTH_STATIC = ("road", "sidewalk", "building", "vegetation", "sky",
                "pole", "traffic sign")

_ROAD, _SIDEWALK, _BUILDING, _VEGETATION, _SKY, _POLE, _SIGN, _CAR = range(8)

_DAY_COLORS = {
    _ROAD: (0.42, 0.42, 0.46),
    _SIDEWALK: (0.63, 0.61, 0.57),
    _BUILDING: (0.52, 0.42, 0.36),
    _VEGETATION: (0.17, 0.40, 0.15),
    _SKY: (0.56, 0.70, 0.92),
    _POLE: (0.24, 0.24, 0.26),
    _SIGN: (0.88, 0.78, 0.12),
}
_CAR_COLORS = ((0.70, 0.12, 0.12), (0.15, 0.25, 0.70),
               (0.10, 0.60, 0.70), (0.55, 0.15, 0.55))

# the target city looks systematically different from the source city
# (as two real cities do), so unlabeled target-day imagery carries
# information that source supervision alone cannot provide
_TARGET_COLOR_SHIFT = {
    _ROAD: (0.02, 0.02, 0.07),
    _SIDEWALK: (0.07, -0.02, -0.05),
    _BUILDING: (0.09, -0.03, -0.07),
    _VEGETATION: (0.06, 0.04, -0.04),
    _SKY: (-0.09, -0.03, 0.03),
    _POLE: (0.06, 0.06, 0.06),
    _SIGN: (-0.02, 0.03, 0.06),
}
_TARGET_NOISE = 0.035
_SOURCE_NOISE = 0.025

# day image of a paired scene is cropped this far inside the rendered
# canvas so the night crop can shift by up to the same amount
PAIR_MARGIN = 3


def synthetic_label_set() -> LabelSet:
    return LabelSet.from_names(SYNTH_NAMES, SYNTH_STATIC)


@dataclass(frozen=True)
class ImageRecord:
    image_path: Path
    label_path: Path | None
    record_id: str


@dataclass(frozen=True)
class PairedSample:
    day_path: Path
    night_path: Path
    pair_id: str


@dataclass
class DatasetIndex:
    split: str
    records: list = field(default_factory=list)
    pairs: list = field(default_factory=list)

    def __len__(self):
        return len(self.records) + len(self.pairs)


def load_image(path) -> torch.Tensor:
    """Read an 8-bit RGB image as a float32 (3, H, W) tensor in [0, 1]."""
    arr = np.asarray(Image.open(path).convert("RGB"), dtype=np.float32) / 255.0
    return torch.from_numpy(arr).permute(2, 0, 1).contiguous()


def load_label(path) -> torch.Tensor:
    """Read a single-channel 8-bit label image as an int64 (H, W) tensor."""
    arr = np.asarray(Image.open(path), dtype=np.uint8)
    if arr.ndim != 2:
        raise ValueError(f"label file {path} is not single-channel")
    return torch.from_numpy(arr.astype(np.int64))


def save_image(path, image) -> None:
    """Write a float (3, H, W) tensor in [0, 1] as an 8-bit RGB PNG."""
    arr = (np.asarray(image.detach().cpu() if isinstance(image, torch.Tensor) else image)
           .clip(0.0, 1.0) * 255.0).round().astype(np.uint8)
    Image.fromarray(np.transpose(arr, (1, 2, 0))).save(path)


def save_label(path, label) -> None:
    arr = np.asarray(label, dtype=np.uint8)
    Image.fromarray(arr, mode="L").save(path)


def load_labeled_index(root, split="source", require_labels=True) -> DatasetIndex:
    """Index ``root/images`` with matching files from ``root/labels``."""
    root = Path(root)
    image_dir = root / "images"
    if not image_dir.is_dir():
        raise FileNotFoundError(f"no images directory under {root}")
    index = DatasetIndex(split=split)
    for image_path in sorted(image_dir.glob("*.png")):
        label_path = root / "labels" / image_path.name
        if not label_path.exists():
            if require_labels:
                raise FileNotFoundError(f"missing label for {image_path.name} under {root}")
            label_path = None
        index.records.append(ImageRecord(image_path, label_path, image_path.stem))
    if not index.records:
        raise ValueError(f"empty dataset: no PNG images under {image_dir}")
    return index


def load_paired_index(day_dir, night_dir, pairs_file) -> DatasetIndex:
    """Build the day/night pair index from an explicit pairing file.

    Each line of `pairs_file` reads ``night_name<TAB>day_name``. Files in
    either directory that no line references are reported as warnings.
    """
    day_dir, night_dir = Path(day_dir), Path(night_dir)
    index = DatasetIndex(split="target")
    used_day, used_night = set(), set()
    for lineno, line in enumerate(Path(pairs_file).read_text().splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise ValueError(
                f"{pairs_file}:{lineno}: expected 'night<TAB>day', got {line!r}")
        night_name, day_name = parts
        night_path, day_path = night_dir / night_name, day_dir / day_name
        for p in (night_path, day_path):
            if not p.exists():
                raise FileNotFoundError(f"{pairs_file}:{lineno}: missing image {p}")
        used_day.add(day_name)
        used_night.add(night_name)
        index.pairs.append(PairedSample(day_path, night_path, Path(night_name).stem))
    if not index.pairs:
        raise ValueError(f"empty pair index: no usable lines in {pairs_file}")
    ids = [p.pair_id for p in index.pairs]
    if len(set(ids)) != len(ids):
        raise ValueError(f"duplicate pair ids in {pairs_file}")
    for directory, used in ((day_dir, used_day), (night_dir, used_night)):
        stray = sorted(p.name for p in directory.glob("*.png") if p.name not in used)
        if stray:
            log.warning("%d file(s) under %s not referenced by %s (e.g. %s)",
                        len(stray), directory, pairs_file, stray[0])
    return index


def class_proportions(index: DatasetIndex, labels: LabelSet) -> np.ndarray:
    """Per-class share of valid (non-ignore) pixels over a labeled split."""
    counts = np.zeros(labels.num_classes, dtype=np.int64)
    for record in index.records:
        if record.label_path is None:
            raise ValueError(f"record {record.record_id} has no label file")
        arr = np.asarray(load_label(record.label_path))
        valid = arr != labels.ignore_index
        counts += np.bincount(arr[valid].ravel(), minlength=labels.num_classes)[
            :labels.num_classes]
    total = counts.sum()
    if total == 0:
        raise ValueError("no valid pixels in the labeled split")
    return counts / total


# ---------------------------------------------------------------------------
# synthetic scene generation


def _render_scene(rng, canvas, target_style=False):
    """Rasterize one street scene; returns (label uint8, image float (H,W,3))."""
    p = canvas
    label = np.full((p, p), _VEGETATION, dtype=np.uint8)
    horizon = int(p * rng.uniform(0.40, 0.60))
    label[:horizon] = _SKY

    # road trapezoid with flanking sidewalks
    cx = p / 2 + rng.uniform(-0.08, 0.08) * p
    w_top = p * rng.uniform(0.10, 0.18)
    w_bot = p * rng.uniform(0.42, 0.62)
    walk = int(rng.integers(3, 5))
    for y in range(horizon, p):
        t = (y - horizon) / max(p - horizon - 1, 1)
        half = (w_top + (w_bot - w_top) * t) / 2
        x0, x1 = int(round(cx - half)), int(round(cx + half))
        label[y, max(x0 - walk, 0):max(x0, 0)] = _SIDEWALK
        label[y, min(x1, p):min(x1 + walk, p)] = _SIDEWALK
        label[y, max(x0, 0):min(x1, p)] = _ROAD

    for _ in range(int(rng.integers(1, 4))):
        bw = int(rng.integers(p // 8, p // 3))
        bx = int(rng.integers(0, p - bw))
        bh = int(rng.integers(p // 6, int(p * 0.42)))
        label[max(horizon - bh, 0):horizon, bx:bx + bw] = _BUILDING

    yy, xx = np.mgrid[0:p, 0:p]
    for _ in range(int(rng.integers(1, 4))):
        cy = horizon + int(rng.integers(-3, 4))
        cxv = int(rng.integers(0, p))
        ry, rx = int(rng.integers(3, 7)), int(rng.integers(4, 10))
        blob = ((yy - cy) / ry) ** 2 + ((xx - cxv) / rx) ** 2 <= 1.0
        label[blob] = _VEGETATION

    for _ in range(int(rng.integers(2, 4))):
        pw = int(rng.integers(1, 3))
        px = int(rng.integers(2, p - 3 - pw))
        base = horizon + int(rng.integers(3, max(4, (p - horizon) // 2)))
        height = int(rng.integers(p // 5, p // 2))
        top = max(base - height, 1)
        label[top:base, px:px + pw] = _POLE
        sh, sw = int(rng.integers(3, 5)), int(rng.integers(3, 5))
        sy = max(top - 1, 0)
        sx = min(max(px - sw // 2, 0), p - sw)
        label[sy:sy + sh, sx:sx + sw] = _SIGN

    if rng.random() < 0.85:
        cw = int(rng.integers(p // 8, p // 5))
        ch = int(rng.integers(max(p // 14, 2), p // 9))
        bottom = int(rng.integers(horizon + (p - horizon) // 3, p - 2))
        ccx = int(cx + rng.uniform(-0.25, 0.25) * w_bot)
        x0 = min(max(ccx - cw // 2, 0), p - cw)
        label[max(bottom - ch, 0):bottom, x0:x0 + cw] = _CAR

    # paint day-style colors with per-scene jitter and texture noise
    brightness = rng.uniform(0.90, 1.10)
    image = np.zeros((p, p, 3), dtype=np.float64)
    car_color = np.array(_CAR_COLORS[int(rng.integers(0, len(_CAR_COLORS)))])
    for cls in range(8):
        color = car_color if cls == _CAR else np.array(_DAY_COLORS[cls])
        if target_style and cls != _CAR:
            color = color + np.array(_TARGET_COLOR_SHIFT[cls])
        jitter = rng.uniform(-0.04, 0.04, size=3)
        image[label == cls] = np.clip(color * brightness + jitter, 0.05, 0.97)
    sky_fade = np.linspace(1.06, 0.90, max(horizon, 1))[:, None, None]
    image[:horizon] = image[:horizon] * sky_fade
    sigma = _TARGET_NOISE if target_style else _SOURCE_NOISE
    image += rng.normal(0.0, sigma, size=image.shape)
    return label, np.clip(image, 0.03, 0.97)


# extra sensor noise in dimly lit regions, relative to the brightest ones
NOISE_DARK_BOOST = 2.0


def _night_transform(rng):
    """Draw the photometric parameters of one night rendering.

    Channel-wise gains and gammas break hue constancy, and a smooth random
    illumination field (pools of street light) breaks global intensity
    normalization, so the shift cannot be undone by per-image statistics.
    The night crop is shifted by at most one pixel, within the tolerance of
    the 3x3 pseudo-label matching window.
    """
    gain = rng.uniform(0.14, 0.24)
    field = rng.uniform(0.55, 1.45, size=(3, 3))
    return {
        "gain": [round(gain * f, 6) for f in (0.80, 0.95, 1.25)],
        "gamma": [round(float(rng.uniform(1.6, 2.6)), 6) for _ in range(3)],
        "field": [[round(float(v), 6) for v in row] for row in field],
        "noise": round(float(rng.uniform(0.015, 0.03)), 6),
        "dx": int(rng.integers(-1, 2)),
        "dy": int(rng.integers(-1, 2)),
    }


def _light_field(transform, shape):
    """Bilinearly upsample the 3x3 illumination grid to (H, W, 1)."""
    grid = np.asarray(transform["field"], dtype=np.float64)
    h, w = shape
    ys = np.linspace(0, grid.shape[0] - 1, h)
    xs = np.linspace(0, grid.shape[1] - 1, w)
    y0 = np.clip(ys.astype(int), 0, grid.shape[0] - 2)
    x0 = np.clip(xs.astype(int), 0, grid.shape[1] - 2)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    f = (grid[y0][:, x0] * (1 - fy) * (1 - fx)
         + grid[y0 + 1][:, x0] * fy * (1 - fx)
         + grid[y0][:, x0 + 1] * (1 - fy) * fx
         + grid[y0 + 1][:, x0 + 1] * fy * fx)
    return f[:, :, None]


def _noise_sigma(transform, shape):
    """Per-pixel noise level: stronger where the light field is dimmer."""
    field = _light_field(transform, shape)
    lo, hi = 0.55, 1.45
    dimness = np.clip((hi - field) / (hi - lo), 0.0, 1.0)
    return transform["noise"] * (1.0 + NOISE_DARK_BOOST * dimness)


def apply_night_style(image, transform, rng=None, noise=None):
    """Darken a day-style (H, W, 3) image according to `transform`.

    The additive sensor noise may be passed explicitly (for verification)
    or drawn from `rng`.
    """
    image = np.asarray(image, dtype=np.float64)
    gain = np.asarray(transform["gain"])[None, None, :]
    gamma = np.asarray(transform["gamma"])[None, None, :]
    dark = gain * _light_field(transform, image.shape[:2]) * np.power(image, gamma)
    if noise is None:
        noise = rng.normal(0.0, 1.0, size=image.shape) * \
            _noise_sigma(transform, image.shape[:2])
    return np.clip(dark + noise, 0.0, 1.0)


def invert_night_style(image, transform):
    """Undo the gain/field/gamma part of a night rendering (noise cannot be)."""
    image = np.asarray(image, dtype=np.float64)
    gain = np.asarray(transform["gain"])[None, None, :]
    gamma = np.asarray(transform["gamma"])[None, None, :]
    linear = np.clip(image / (gain * _light_field(transform, image.shape[:2])),
                     0.0, 1.0)
    return np.power(linear, 1.0 / gamma)


def _save_rgb(path, image):
    arr = (np.clip(image, 0.0, 1.0) * 255.0).round().astype(np.uint8)
    Image.fromarray(arr).save(path)


def synth_generate(out_dir, seed, n_scenes=200, size=64, debug_labels=False):
    """Generate the three desk-scale splits and return the manifest.

    Layout under `out_dir`: ``source/`` (labeled), ``target_day/`` and
    ``target_night/`` (unlabeled, linked by ``pairs.tsv``), ``night_val/``
    (labeled night scenes for evaluation) and ``meta.json`` recording the
    exact photometric transform and shift of every night rendering.
    """
    if size % 32 != 0:
        raise ValueError(f"scene size {size} not divisible by 32")
    if n_scenes < 3:
        raise ValueError("need at least 3 scenes for the three splits")
    out_dir = Path(out_dir)
    n_source = max(1, round(0.40 * n_scenes))
    n_val = max(1, round(0.15 * n_scenes))
    n_pairs = n_scenes - n_source - n_val
    canvas = size + 2 * PAIR_MARGIN
    rng = np.random.default_rng(seed)

    for sub in ("source/images", "source/labels", "target_day/images",
                "target_night/images", "night_val/images", "night_val/labels"):
        (out_dir / sub).mkdir(parents=True, exist_ok=True)
    if debug_labels:
        for sub in ("target_day/labels", "target_night/labels"):
            (out_dir / sub).mkdir(parents=True, exist_ok=True)

    m = PAIR_MARGIN
    meta = {"format": 1, "seed": int(seed), "size": int(size),
            "counts": {"source": n_source, "pairs": n_pairs, "night_val": n_val},
            "pairs": {}, "night_val": {}}

    for i in range(n_source):
        label, image = _render_scene(rng, canvas)
        name = f"src_{i:04d}.png"
        _save_rgb(out_dir / "source/images" / name, image[m:m + size, m:m + size])
        save_label(out_dir / "source/labels" / name, label[m:m + size, m:m + size])

    pair_lines = []
    for i in range(n_pairs):
        label, image = _render_scene(rng, canvas, target_style=True)
        tf = _night_transform(rng)
        dy, dx = tf["dy"], tf["dx"]
        day = image[m:m + size, m:m + size]
        night_src = image[m + dy:m + dy + size, m + dx:m + dx + size]
        night = apply_night_style(night_src, tf, rng=rng)
        day_name, night_name = f"pair_{i:04d}_day.png", f"pair_{i:04d}_night.png"
        _save_rgb(out_dir / "target_day/images" / day_name, day)
        _save_rgb(out_dir / "target_night/images" / night_name, night)
        if debug_labels:
            save_label(out_dir / "target_day/labels" / day_name,
                       label[m:m + size, m:m + size])
            save_label(out_dir / "target_night/labels" / night_name,
                       label[m + dy:m + dy + size, m + dx:m + dx + size])
        pair_lines.append(f"{night_name}\t{day_name}")
        meta["pairs"][f"pair_{i:04d}"] = tf

    for i in range(n_val):
        label, image = _render_scene(rng, canvas, target_style=True)
        tf = _night_transform(rng)
        dy, dx = tf["dy"], tf["dx"]
        night_src = image[m + dy:m + dy + size, m + dx:m + dx + size]
        night = apply_night_style(night_src, tf, rng=rng)
        name = f"val_{i:04d}.png"
        _save_rgb(out_dir / "night_val/images" / name, night)
        save_label(out_dir / "night_val/labels" / name,
                   label[m + dy:m + dy + size, m + dx:m + dx + size])
        meta["night_val"][f"val_{i:04d}"] = tf

    (out_dir / "pairs.tsv").write_text("\n".join(pair_lines) + "\n")
    (out_dir / "meta.json").write_text(json.dumps(meta, sort_keys=True, indent=2))
    return meta
