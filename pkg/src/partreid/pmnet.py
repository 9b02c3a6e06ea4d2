"""Part-mentored network: global head plus K teacher-student part streams.

Each stream's student reads the whole stream feature map while its teacher
reads the map cropped to a part mask and resized back; the two branches share
every parameter and differ only in input and pooling (average vs masked max).
Teachers exist only at training time. A batch-wise part-transfer loss pulls
the averaged student and teacher maps together so students internalize the
part concept and inference can drop the teachers (and with them the part
mask dependency).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from . import nn
from .autograd import Tensor
from .panet import Backbone, PartMaskSet, to_input


class DegeneratePartError(RuntimeError):
    """A part mask projects to an empty region on the feature map."""


@dataclass
class FeatureBundle:
    """Per-image embeddings used for distance fusion at retrieval time."""

    image_id: str
    f_g: np.ndarray
    f_s: np.ndarray | None
    f_t: np.ndarray | None = None


class Mam(nn.Module):
    """Multi-scale attention: channel and spatial masks, multiplied and
    applied with a +1 residual so zero attention is the identity.

    The channel block squeezes global max- and average-pooled vectors through
    one shared two-layer perceptron. The spatial block runs three parallel
    3x3 convolutions with dilations 1, 2, 3, concatenates them, and reduces
    through a small conv stack to a single sigmoid map.
    """

    def __init__(self, c: int, rng, reduction: int = 16, dtype=np.float32):
        super().__init__()
        hidden = max(c // reduction, 8)
        self.mlp1 = nn.Linear(c, hidden, rng, bias=False, dtype=dtype)
        self.mlp2 = nn.Linear(hidden, c, rng, bias=False, dtype=dtype)
        branch = max(c // 3, 1)
        for d in (1, 2, 3):
            self._modules[f"dil{d}"] = nn.ConvBnRelu(
                c, branch, 3, rng, padding=d, dilation=d, dtype=dtype)
        mid = max(3 * branch // 4, 1)
        self.sconv1 = nn.ConvBnRelu(3 * branch, mid, 3, rng, padding=1, dtype=dtype)
        self.sconv2 = nn.ConvBnRelu(mid, mid, 3, rng, padding=1, dtype=dtype)
        self.sconv3 = nn.Conv2d(mid, 1, 1, rng, dtype=dtype)

    def channel_mask(self, x: Tensor) -> Tensor:
        shared = lambda v: self.mlp2(ag.relu(self.mlp1(v)))
        s = ag.add(shared(ag.global_max_pool(x)), shared(ag.global_avg_pool(x)))
        return ag.sigmoid(s)                                  # (N, C)

    def spatial_mask(self, x: Tensor) -> Tensor:
        multi = ag.concat([self._modules[f"dil{d}"](x) for d in (1, 2, 3)], axis=1)
        return ag.sigmoid(self.sconv3(self.sconv2(self.sconv1(multi))))  # (N,1,h,w)

    def forward(self, x: Tensor, attention_override=None) -> Tensor:
        if attention_override is not None:
            cmask, smask = attention_override
            cmask = cmask if isinstance(cmask, Tensor) else Tensor(cmask, dtype=x.dtype)
            smask = smask if isinstance(smask, Tensor) else Tensor(smask, dtype=x.dtype)
        else:
            cmask = self.channel_mask(x)
            smask = self.spatial_mask(x)
        n, c = cmask.shape[0], cmask.shape[-1]
        attn = ag.mul(ag.reshape(cmask, (n, c, 1, 1)), smask)
        return ag.mul(ag.add(attn, Tensor(1.0, dtype=x.dtype)), x)


def teacher_input(f: Tensor, mask_sets: list[PartMaskSet], stream: int) -> Tensor:
    """Build the teacher input: per sample, zero the stream feature map
    outside the dense part mask, crop to the part box, and bilinearly resize
    back to the map shape. Box coordinates are constants; gradients flow
    through the masking, crop and resize into the feature map.
    """
    n, c, h, w = f.shape
    if len(mask_sets) != n:
        raise ag.ShapeError(f"{len(mask_sets)} mask sets for batch of {n}")
    pieces = []
    for i, ms in enumerate(mask_sets):
        fh, fw = ms.feature_hw
        r0, c0, r1, c1 = ms.bboxes[stream]
        # rescale feature-grid coords if this map's grid differs
        if (fh, fw) != (h, w):
            r0, r1 = int(r0 * h / fh), int((r1 + 1) * h / fh) - 1
            c0, c1 = int(c0 * w / fw), int((c1 + 1) * w / fw) - 1
        r1, c1 = min(r1, h - 1), min(c1, w - 1)
        if r1 < r0 or c1 < c0:
            raise DegeneratePartError(
                f"degenerate part: stream {stream} of '{ms.image_id}' "
                f"projects to an empty box")
        dense = ms.masks[stream]
        ih, iw = dense.shape
        if ih % h or iw % w:
            raise ag.ShapeError(f"mask {dense.shape} not divisible by map {h}x{w}")
        grid = dense.reshape(h, ih // h, w, iw // w).any(axis=(1, 3))
        if not grid[r0:r1 + 1, c0:c1 + 1].any():
            raise DegeneratePartError(
                f"degenerate part: stream {stream} of '{ms.image_id}' "
                f"is empty on the feature grid")
        sample = ag.narrow(f, 0, i, 1)
        gated = ag.mul(sample, Tensor(grid.astype(f.dtype.type), dtype=f.dtype))
        part = ag.crop(gated, (r0, r1 + 1, c0, c1 + 1))
        pieces.append(ag.bilinear_resize(part, (h, w)))
    return ag.concat(pieces, axis=0)


class PartStream(nn.Module):
    """One part stream: the 1x1 conv making the stream map, a MAM, and a
    post-attention conv, all shared between the student and the teacher."""

    def __init__(self, cin: int, width: int, embed_dim: int, rng,
                 reduction: int = 16, dtype=np.float32):
        super().__init__()
        self.conv_in = nn.Conv2d(cin, width, 1, rng, bias=False, dtype=dtype)
        self.bn_in = nn.BatchNorm(width, dtype=dtype)
        self.mam = Mam(width, rng, reduction, dtype=dtype)
        self.post = nn.ConvBnRelu(width, embed_dim, 1, rng, dtype=dtype)

    def stream_map(self, shared: Tensor) -> Tensor:
        return ag.relu(self.bn_in(self.conv_in(shared)))

    def student(self, f: Tensor):
        """Returns (embedding via GAP, pre-pooling map)."""
        pre = self.post(self.mam(f))
        return ag.global_avg_pool(pre), pre

    def teacher(self, p: Tensor):
        """Same stack as the student with max pooling over the part map."""
        pre = self.post(self.mam(p))
        return ag.global_max_pool(pre), pre


class BnClassifier(nn.Module):
    """Feature -> batchnorm -> bias-free identity logits; the triplet loss
    reads the pre-normalization embedding, the ID loss reads the logits."""

    def __init__(self, dim: int, num_ids: int, rng, dtype=np.float32):
        super().__init__()
        self.bn = nn.BatchNorm(dim, dtype=dtype)
        self.fc = nn.Linear(dim, num_ids, rng, bias=False, dtype=dtype)

    def forward(self, x):
        return self.fc(self.bn(x))


class PmnetModel(nn.Module):
    def __init__(self, num_ids: int, rng: np.random.Generator | None = None,
                 k: int = 3, widths=(16, 32, 64), image_size: int = 64,
                 global_width: int = 128, global_dim: int = 256,
                 stream_width: int = 48, stream_dim: int = 128,
                 mam_reduction: int = 16, dtype=np.float32):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.num_ids = num_ids
        self.k = k
        self.image_size = image_size
        self.global_dim = global_dim
        self.stream_dim = stream_dim
        self.backbone = Backbone(rng, widths, dtype=dtype)
        c = self.backbone.out_channels
        # both post-split residual stages keep stride 1
        self.res_g = nn.ResidualBlock(c, c, rng, stride=1, dtype=dtype)
        self.global_conv = nn.ConvBnRelu(c, global_width, 1, rng, dtype=dtype)
        self.global_fc = nn.Linear(global_width, global_dim, rng, dtype=dtype)
        self.cls_g = BnClassifier(global_dim, num_ids, rng, dtype=dtype)
        if k > 0:
            self.res_p = nn.ResidualBlock(c, c, rng, stride=1, dtype=dtype)
            for j in range(k):
                self._modules[f"stream{j}"] = PartStream(
                    c, stream_width, stream_dim, rng, mam_reduction, dtype=dtype)
            self.cls_s = BnClassifier(k * stream_dim, num_ids, rng, dtype=dtype)
            self.cls_t = BnClassifier(k * stream_dim, num_ids, rng, dtype=dtype)

    def streams(self) -> list[PartStream]:
        return [self._modules[f"stream{j}"] for j in range(self.k)]

    def global_head(self, x: Tensor) -> Tensor:
        trunk = self.backbone(x)
        return self.global_fc(ag.global_avg_pool(self.global_conv(self.res_g(trunk))))

    def forward_features(self, x: Tensor,
                         mask_sets: list[PartMaskSet] | None = None,
                         want_teacher: bool | None = None) -> dict:
        """One shared-backbone pass producing f_G, f_S and optionally f_T
        plus the pre-pooling maps the part-transfer loss needs.

        ``want_teacher`` defaults to "mask_sets given"; requesting teachers
        without masks is an error, and f_G/f_S never depend on the masks.
        """
        if want_teacher is None:
            want_teacher = mask_sets is not None
        if want_teacher and mask_sets is None:
            raise ValueError("teacher features requested but no part masks given")
        trunk = self.backbone(x)
        f_g = self.global_fc(ag.global_avg_pool(self.global_conv(self.res_g(trunk))))
        out = {"f_g": f_g, "f_s": None, "f_t": None,
               "student_maps": [], "teacher_maps": []}
        if self.k == 0:
            return out
        part_trunk = self.res_p(trunk)
        s_embs, t_embs = [], []
        for j, stream in enumerate(self.streams()):
            f_k = stream.stream_map(part_trunk)
            emb_s, map_s = stream.student(f_k)
            s_embs.append(emb_s)
            out["student_maps"].append(map_s)
            if want_teacher:
                p_k = teacher_input(f_k, mask_sets, j)
                emb_t, map_t = stream.teacher(p_k)
                t_embs.append(emb_t)
                out["teacher_maps"].append(map_t)
        out["f_s"] = ag.concat(s_embs, axis=1)
        if want_teacher:
            out["f_t"] = ag.concat(t_embs, axis=1)
        return out


def part_transfer_loss(student_maps: list[Tensor], teacher_maps: list[Tensor],
                       squared: bool = False) -> Tensor:
    """Batch-wise part transfer loss, summed over streams.

    Per stream, both maps are averaged over batch then channel; the loss is
    the per-pixel magnitude of the difference (absolute by default, squared
    as an option), averaged over pixels. Symmetric and zero exactly when the
    averaged maps coincide.
    """
    if len(student_maps) != len(teacher_maps):
        raise ag.ShapeError(f"{len(student_maps)} student vs "
                            f"{len(teacher_maps)} teacher streams")
    total = None
    for ms, mt in zip(student_maps, teacher_maps):
        if ms.shape != mt.shape:
            raise ag.ShapeError(f"map shape mismatch {ms.shape} vs {mt.shape}")
        fs = ag.tmean(ag.tmean(ms, axis=0), axis=0)      # batch then channel
        ft = ag.tmean(ag.tmean(mt, axis=0), axis=0)
        d = ag.sub(ft, fs)
        pix = ag.mul(d, d) if squared else ag.absolute(d)
        term = ag.tmean(pix)
        total = term if total is None else ag.add(total, term)
    if total is None:
        raise ag.ShapeError("part_transfer_loss needs at least one stream")
    return total


def extract_bundles(model: PmnetModel, images: np.ndarray, image_ids: list[str],
                    mask_sets: list[PartMaskSet] | None = None,
                    batch_size: int = 32) -> list[FeatureBundle]:
    """Eval-mode feature extraction; masks present => teacher features too."""
    model.eval()
    bundles: list[FeatureBundle] = []
    n = len(images)
    for start in range(0, n, batch_size):
        stop = min(start + batch_size, n)
        with ag.no_grad():
            out = model.forward_features(
                to_input(images[start:stop]),
                None if mask_sets is None else mask_sets[start:stop])
        for i in range(stop - start):
            bundles.append(FeatureBundle(
                image_id=image_ids[start + i],
                f_g=out["f_g"].data[i].copy(),
                f_s=out["f_s"].data[i].copy() if out["f_s"] is not None else None,
                f_t=out["f_t"].data[i].copy() if out["f_t"] is not None else None))
    return bundles
