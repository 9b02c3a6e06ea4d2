"""Heat-map rendering of per-stream attention maps."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from . import autograd as ag
from . import vision
from .panet import to_input
from .pmnet import PmnetModel

# blue -> cyan -> yellow -> red anchors, linearly interpolated
_ANCHORS = np.array([(20, 20, 120), (40, 180, 200), (240, 220, 60),
                     (200, 30, 30)], dtype=np.float64)


def heatmap_rgb(values: np.ndarray) -> np.ndarray:
    """Normalize a 2-D map to [0, 1] and color it."""
    v = np.asarray(values, dtype=np.float64)
    lo, hi = v.min(), v.max()
    norm = np.zeros_like(v) if hi - lo < 1e-12 else (v - lo) / (hi - lo)
    pos = norm * (len(_ANCHORS) - 1)
    i = np.clip(pos.astype(int), 0, len(_ANCHORS) - 2)
    frac = (pos - i)[..., None]
    rgb = _ANCHORS[i] * (1 - frac) + _ANCHORS[i + 1] * frac
    return rgb.astype(np.uint8)


def _upscale(map2d: np.ndarray, size: int) -> np.ndarray:
    t = ag.Tensor(map2d[None, None].astype(np.float32))
    return ag.bilinear_resize(t, (size, size)).data[0, 0]


def visualize_streams(model: PmnetModel, image: np.ndarray, out_dir):
    """Export per-stream mean activation maps before and after the attention
    module as heat-map PNGs, upscaled to image resolution."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    model.eval()
    size = model.image_size
    with ag.no_grad():
        x = to_input(image)
        trunk = model.backbone(x)
        part_trunk = model.res_p(trunk)
        written = []
        for j, stream in enumerate(model.streams()):
            f_k = stream.stream_map(part_trunk)
            attended = stream.mam(f_k)
            for tag, t in (("pre", f_k), ("post", attended)):
                m = _upscale(t.data[0].mean(axis=0), size)
                path = out / f"stream{j}_{tag}_mam.png"
                vision.write_png(path, heatmap_rgb(m))
                written.append(path)
    return written
