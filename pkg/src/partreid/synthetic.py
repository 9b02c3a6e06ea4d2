"""Synthetic vehicle-like dataset generation.

Each identity is a chassis rectangle with three vertically stacked,
identity-colored regions (roof, window, lights) plus small decorative marks,
so identities are distinguishable both globally and through localized cues.
Images vary by camera background, viewpoint jitter (scale / shift / flip),
illumination and background clutter. Generation is a pure function of the
spec including its seed, so repeated runs produce byte-identical files.
"""

from __future__ import annotations

import colorsys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import vision


@dataclass
class ImageSample:
    image_id: str
    image: np.ndarray          # (H, W, 3) uint8
    identity: int
    camera: int


@dataclass
class SyntheticSpec:
    num_identities: int = 16
    images_per_identity: int = 16
    image_size: int = 64
    clutter: float = 0.25
    scale_jitter: float = 0.15
    shift_jitter: float = 0.06
    flip_prob: float = 0.5
    illumination_jitter: float = 0.2
    cameras: int = 4
    shared_chassis_colors: int = 0   # >0: identities share this many hues
    seed: int = 7

    def __post_init__(self):
        if self.num_identities < 2:
            raise ValueError("need at least 2 identities")
        if self.images_per_identity < 4:
            raise ValueError("need at least 4 images per identity "
                             "(train/query/gallery split)")
        if not 0.0 <= self.clutter <= 1.0:
            raise ValueError("clutter must be in [0, 1]")
        if self.cameras < 2:
            raise ValueError("need at least 2 cameras")
        if self.image_size % 8:
            raise ValueError("image_size must be a multiple of 8")


def _hsv(h, s, v):
    return np.array(colorsys.hsv_to_rgb(h % 1.0, s, v)) * 255


@dataclass
class _IdentityStyle:
    chassis: np.ndarray
    roof: np.ndarray
    window: np.ndarray
    lights: np.ndarray
    mark_color: np.ndarray
    mark_pos: tuple[float, float]      # relative position on the chassis
    mark2_pos: tuple[float, float]


def _identity_styles(spec: SyntheticSpec, rng: np.random.Generator):
    styles = []
    n = spec.num_identities
    for i in range(n):
        if spec.shared_chassis_colors > 0:
            hue = (i % spec.shared_chassis_colors) / spec.shared_chassis_colors
            chassis = _hsv(hue, 0.75, 0.75)
        else:
            chassis = _hsv(i / n + rng.uniform(-0.2, 0.2) / n,
                           rng.uniform(0.6, 0.9), rng.uniform(0.6, 0.9))
        styles.append(_IdentityStyle(
            chassis=chassis,
            roof=_hsv(rng.random(), rng.uniform(0.5, 1.0), rng.uniform(0.5, 1.0)),
            window=_hsv(rng.random(), rng.uniform(0.5, 1.0), rng.uniform(0.5, 1.0)),
            lights=_hsv(rng.random(), rng.uniform(0.5, 1.0), rng.uniform(0.5, 1.0)),
            mark_color=_hsv(rng.random(), 1.0, 1.0),
            mark_pos=(rng.uniform(0.08, 0.30), rng.uniform(0.08, 0.85)),
            mark2_pos=(rng.uniform(0.60, 0.85), rng.uniform(0.08, 0.85)),
        ))
    return styles


_CAMERA_BG = [(36, 36, 40), (70, 62, 48), (46, 66, 52), (60, 48, 66),
              (52, 52, 30), (34, 56, 64)]


def render_image(spec: SyntheticSpec, style: _IdentityStyle, camera: int,
                 rng: np.random.Generator) -> np.ndarray:
    s = spec.image_size
    img = np.empty((s, s, 3), dtype=np.float64)
    img[:, :] = _CAMERA_BG[camera % len(_CAMERA_BG)]

    if spec.clutter > 0:
        n_blobs = int(round(spec.clutter * 8))
        for _ in range(n_blobs):
            bw = int(rng.integers(s // 10, s // 3))
            bh = int(rng.integers(s // 10, s // 3))
            by = int(rng.integers(0, s - bh))
            bx = int(rng.integers(0, s - bw))
            img[by:by + bh, bx:bx + bw] = rng.integers(0, 256, 3)

    scale = 1.0 - rng.uniform(0.0, spec.scale_jitter)
    cw = int(round(0.72 * s * scale))
    ch = int(round(0.62 * s * scale))
    cx = (s - cw) // 2 + int(round(rng.uniform(-1, 1) * spec.shift_jitter * s))
    cy = (s - ch) // 2 + int(round(rng.uniform(-1, 1) * spec.shift_jitter * s))
    cx = max(0, min(s - cw, cx))
    cy = max(0, min(s - ch, cy))

    img[cy:cy + ch, cx:cx + cw] = style.chassis
    inset = max(1, int(round(0.10 * cw)))
    px0, px1 = cx + inset, cx + cw - inset
    bands = [(0.06, 0.30, style.roof), (0.36, 0.62, style.window),
             (0.68, 0.94, style.lights)]
    for top, bot, color in bands:
        y0 = cy + int(round(top * ch))
        y1 = cy + int(round(bot * ch))
        img[y0:y1, px0:px1] = color

    msize = max(2, int(round(0.12 * cw)))
    for (ry, rx) in (style.mark_pos, style.mark2_pos):
        my = cy + int(round(ry * (ch - msize)))
        mx = cx + int(round(rx * (cw - msize)))
        img[my:my + msize, mx:mx + msize] = style.mark_color

    if rng.random() < spec.flip_prob:
        img = img[:, ::-1]

    if spec.clutter > 0:
        img = img + rng.normal(0.0, spec.clutter * 12.0, size=img.shape)

    illum = 1.0 + rng.uniform(-spec.illumination_jitter, spec.illumination_jitter)
    return np.clip(img * illum, 0, 255).astype(np.uint8)


def generate_samples(spec: SyntheticSpec) -> list[ImageSample]:
    """All samples, ordered by identity then image index."""
    rng = np.random.default_rng(spec.seed)
    styles = _identity_styles(spec, rng)
    samples = []
    for ident in range(spec.num_identities):
        for idx in range(spec.images_per_identity):
            camera = idx % spec.cameras
            img = render_image(spec, styles[ident], camera, rng)
            samples.append(ImageSample(
                image_id=f"{ident:04d}_{camera:02d}_{idx:03d}",
                image=img, identity=ident, camera=camera))
    return samples


def split_samples(spec: SyntheticSpec, samples: list[ImageSample]):
    """Per identity the last images become gallery, the ones before those
    queries (adjacent indices land on different cameras), the rest train."""
    n = spec.images_per_identity
    n_q = max(1, int(round(n * 0.125)))
    train, query, gallery = [], [], []
    for ident in range(spec.num_identities):
        block = samples[ident * n:(ident + 1) * n]
        train.extend(block[:n - 2 * n_q])
        query.extend(block[n - 2 * n_q:n - n_q])
        gallery.extend(block[n - n_q:])
    return train, query, gallery


def gen_synthetic_dataset(spec: SyntheticSpec, out_dir, force: bool = False):
    """Write PNGs named {identity:04}_{camera:02}_{index:03}.png plus
    train/query/gallery split files. Deterministic given the spec."""
    out = Path(out_dir)
    if out.exists() and any(out.iterdir()):
        if not force:
            raise FileExistsError(f"output dir {out} is not empty (use --force)")
        for p in out.iterdir():
            if p.is_file():
                p.unlink()
    out.mkdir(parents=True, exist_ok=True)
    samples = generate_samples(spec)
    for s in samples:
        vision.write_png(out / f"{s.image_id}.png", s.image)
    train, query, gallery = split_samples(spec, samples)
    for name, subset in (("train", train), ("query", query),
                         ("gallery", gallery)):
        (out / f"{name}.txt").write_text(
            "".join(f"{s.image_id}.png\n" for s in subset))
    return {"total": len(samples), "train": len(train),
            "query": len(query), "gallery": len(gallery)}


def load_split(data_dir, split: str) -> list[ImageSample]:
    data_dir = Path(data_dir)
    listing = data_dir / f"{split}.txt"
    if not listing.exists():
        raise FileNotFoundError(f"missing split file {listing}")
    samples = []
    for line in listing.read_text().splitlines():
        name = line.strip()
        if not name:
            continue
        stem = name.rsplit(".", 1)[0]
        ident_s, cam_s, _ = stem.split("_")
        samples.append(ImageSample(
            image_id=stem,
            image=vision.read_png(data_dir / name),
            identity=int(ident_s), camera=int(cam_s)))
    if not samples:
        raise ValueError(f"split '{split}' in {data_dir} is empty")
    return samples


def stack_split(samples: list[ImageSample]):
    """(images, identities, cameras, ids) arrays from a sample list."""
    images = np.stack([s.image for s in samples])
    identities = np.array([s.identity for s in samples])
    cameras = np.array([s.camera for s in samples])
    ids = [s.image_id for s in samples]
    return images, identities, cameras, ids
