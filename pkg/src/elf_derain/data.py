"""Desk-scale data pipeline.

Procedural clean images, additive anti-aliased rain streak overlays, PNG
round-tripping, aligned patch cropping, and the Y-channel histogram analysis
used to confirm that bilinear down-up reconstruction preserves the luminance
statistics of rainy images.

Everything is a pure function of (config, seed); identical seeds produce
bit-identical samples.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from . import kernels as K
from .tensor import EngineError

CLEAN_KINDS = ("ramp", "checker", "blobs", "mixed")

# BT.601 full-range luma weights
_Y_WEIGHTS = np.array([0.299, 0.587, 0.114])


@dataclass
class RainParams:
    """Streak generator knobs; all ranges are inclusive (lo, hi) tuples."""

    streak_density: float = 4000.0      # streaks per megapixel
    angle_deg: tuple = (60.0, 120.0)    # measured from the horizontal axis
    length_px: tuple = (8.0, 20.0)
    width_px: tuple = (1.0, 2.5)
    intensity: tuple = (0.25, 0.8)
    rng_seed: int = 0

    def __post_init__(self):
        for name in ("angle_deg", "length_px", "width_px", "intensity"):
            lo, hi = getattr(self, name)
            if hi < lo:
                raise EngineError(f"rain params: empty range for {name}")
        ilo, ihi = self.intensity
        if not (0.0 < ilo <= 1.0 and 0.0 < ihi <= 1.0):
            raise EngineError("rain params: intensity range must lie in (0, 1]")
        if self.streak_density < 0:
            raise EngineError("rain params: negative streak density")


@dataclass
class SamplePair:
    """Aligned rainy/clean images in [0, 1] RGB (HWC float32)."""

    sample_id: str
    rainy: np.ndarray
    clean: np.ndarray

    def __post_init__(self):
        if self.rainy.shape != self.clean.shape:
            raise EngineError(
                f"sample {self.sample_id}: extents differ "
                f"{self.rainy.shape} vs {self.clean.shape}")


def synth_clean(kind: str, size: int, seed: int, divisor: int = 8) -> np.ndarray:
    """Deterministic procedural clean image (size x size x 3 in [0, 1])."""
    if kind not in CLEAN_KINDS:
        raise EngineError(f"synth_clean: unknown kind {kind!r}")
    if size % divisor != 0 or size <= 0:
        raise EngineError(f"synth_clean: size {size} must be a positive multiple of {divisor}")
    rng = np.random.default_rng(np.random.SeedSequence([CLEAN_KINDS.index(kind), size, seed]))
    if kind == "ramp":
        img = _ramp(size)
    elif kind == "checker":
        img = _checker(size, rng)
    elif kind == "blobs":
        img = _blobs(size, rng)
    else:
        a = _blobs(size, rng)
        b = _ramp(size)
        t = rng.uniform(0.3, 0.7)
        img = t * a + (1.0 - t) * b
    return np.ascontiguousarray(img.astype(np.float32))


def _ramp(size: int) -> np.ndarray:
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64)
    plane = (xs + ys * size) / (size * size - 1)
    return np.repeat(plane[:, :, None], 3, axis=2)


def _checker(size: int, rng) -> np.ndarray:
    tile = int(rng.integers(4, 9))
    ys, xs = np.mgrid[0:size, 0:size]
    mask = ((ys // tile) + (xs // tile)) % 2
    lo, hi = 0.5 - 0.45, 0.5 + 0.45
    plane = np.where(mask == 1, hi, lo)
    return np.repeat(plane[:, :, None].astype(np.float64), 3, axis=2)


def _blobs(size: int, rng) -> np.ndarray:
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64)
    img = np.zeros((size, size, 3))
    n_blobs = int(rng.integers(6, 12))
    for _ in range(n_blobs):
        cy, cx = rng.uniform(0, size, 2)
        sig = rng.uniform(size / 12, size / 4)
        amp = rng.uniform(0.2, 1.0, 3)
        blob = np.exp(-((ys - cy) ** 2 + (xs - cx) ** 2) / (2 * sig * sig))
        img += blob[:, :, None] * amp[None, None, :]
    mn, mx = img.min(), img.max()
    return (img - mn) / (mx - mn) if mx > mn else np.full_like(img, 0.5)


def rain_layer(height: int, width: int, rp: RainParams) -> np.ndarray:
    """Non-negative anti-aliased streak layer (HW float32)."""
    rng = np.random.default_rng(rp.rng_seed)
    count = int(round(rp.streak_density * height * width / 1e6))
    segments = np.zeros((count, 6), dtype=np.float64)
    for i in range(count):
        cx = rng.uniform(0, width)
        cy = rng.uniform(0, height)
        ang = np.deg2rad(rng.uniform(*rp.angle_deg))
        length = rng.uniform(*rp.length_px)
        # angle from horizontal; streaks fall top to bottom
        dx, dy = 0.5 * length * np.cos(ang), 0.5 * length * np.sin(ang)
        segments[i] = (cx - dx, cy - dy, cx + dx, cy + dy,
                       rng.uniform(*rp.width_px), rng.uniform(*rp.intensity))
    layer = K.rasterize_streaks(height, width, segments)
    return layer.astype(np.float32)


def add_rain(clean: np.ndarray, rp: RainParams, sample_id: str = "sample") -> SamplePair:
    """Overlay additive rain: rainy = clip(clean + R, 0, 1) with R >= 0."""
    h, w = clean.shape[:2]
    layer = rain_layer(h, w, rp)
    rainy = np.clip(clean + layer[:, :, None], 0.0, 1.0).astype(np.float32)
    return SamplePair(sample_id, rainy, np.ascontiguousarray(clean.astype(np.float32)))


def y_channel(img: np.ndarray) -> np.ndarray:
    return img[..., 0] * _Y_WEIGHTS[0] + img[..., 1] * _Y_WEIGHTS[1] + img[..., 2] * _Y_WEIGHTS[2]


def y_histogram(img: np.ndarray, bins: int = 256) -> np.ndarray:
    """Normalized luma histogram over [0, 1]; values are clipped into range."""
    y = np.clip(y_channel(np.asarray(img, dtype=np.float64)), 0.0, 1.0)
    hist, _ = np.histogram(y, bins=bins, range=(0.0, 1.0))
    total = hist.sum()
    if total == 0:
        raise EngineError("y_histogram: empty image")
    return hist.astype(np.float64) / total


def hist_correlation(h1: np.ndarray, h2: np.ndarray) -> float:
    """Pearson correlation of two histograms (equal bin counts required)."""
    h1 = np.asarray(h1, dtype=np.float64)
    h2 = np.asarray(h2, dtype=np.float64)
    if h1.shape != h2.shape:
        raise EngineError(f"hist_correlation: bin counts differ {h1.shape} vs {h2.shape}")
    a = h1 - h1.mean()
    b = h2 - h2.mean()
    denom = np.sqrt((a * a).sum() * (b * b).sum())
    if denom == 0:
        raise EngineError("hist_correlation: zero-variance histogram")
    return float((a * b).sum() / denom)


def save_png(img: np.ndarray, path) -> None:
    """Quantize round(v * 255) and write an 8-bit RGB PNG."""
    arr = np.asarray(img)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise EngineError(f"save_png: expected HWC RGB image, got shape {arr.shape}")
    q = np.clip(np.round(arr * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(q, mode="RGB").save(path, format="PNG")


def load_png(path) -> np.ndarray:
    """Load an 8-bit PNG as [0, 1] RGB; grayscale replicates to three channels."""
    try:
        with Image.open(path) as im:
            im = im.convert("RGB")
            arr = np.asarray(im, dtype=np.float32)
    except (OSError, ValueError) as exc:
        raise EngineError(f"load_png: cannot read {path}: {exc}") from exc
    return np.ascontiguousarray(arr / 255.0)


def crop_patches(pair: SamplePair, patch: int, n: int, seed: int,
                 divisor: int = 8) -> list[SamplePair]:
    """n aligned random crops; the same window is applied to rainy and clean."""
    h, w = pair.rainy.shape[:2]
    if patch > h or patch > w:
        raise EngineError(f"crop_patches: patch {patch} exceeds image extents ({h}, {w})")
    if patch % divisor != 0:
        raise EngineError(f"crop_patches: patch {patch} must be a multiple of {divisor}")
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        y0 = int(rng.integers(0, h - patch + 1))
        x0 = int(rng.integers(0, w - patch + 1))
        out.append(SamplePair(
            f"{pair.sample_id}_p{i}",
            np.ascontiguousarray(pair.rainy[y0:y0 + patch, x0:x0 + patch]),
            np.ascontiguousarray(pair.clean[y0:y0 + patch, x0:x0 + patch]),
        ))
    return out


# ---------------------------------------------------------------------------
# dataset directory layout: PNG pairs plus a tab-separated manifest
# ---------------------------------------------------------------------------

MANIFEST_NAME = "manifest.tsv"


def write_dataset(pairs: list[SamplePair], out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    lines = []
    for pair in pairs:
        rainy_path = out / f"{pair.sample_id}_rainy.png"
        clean_path = out / f"{pair.sample_id}_clean.png"
        save_png(pair.rainy, rainy_path)
        save_png(pair.clean, clean_path)
        lines.append(f"{pair.sample_id}\t{rainy_path.name}\t{clean_path.name}")
    manifest = out / MANIFEST_NAME
    manifest.write_text("\n".join(lines) + "\n", encoding="utf-8", newline="\n")
    return manifest


def load_dataset(data_dir) -> list[SamplePair]:
    root = Path(data_dir)
    manifest = root / MANIFEST_NAME
    if not manifest.exists():
        raise EngineError(f"dataset manifest not found: {manifest}")
    pairs = []
    for line in manifest.read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        sample_id, rainy_rel, clean_rel = line.split("\t")
        pairs.append(SamplePair(sample_id,
                                load_png(root / rainy_rel),
                                load_png(root / clean_rel)))
    if not pairs:
        raise EngineError(f"dataset at {root} is empty")
    return pairs


def hwc_to_nchw(img: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(np.transpose(img, (2, 0, 1))[None])


def nchw_to_hwc(arr: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(np.transpose(arr[0], (1, 2, 0)))
