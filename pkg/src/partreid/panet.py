"""Part attention network: part localization without part labels.

The network couples an identity-classification branch with a segmentation
decoder trained against graph-cut pseudo-labels. At inference, channel
recalibration turns the encoder map into per-channel spatial probability
maps; connected components and k-means over the channel responses yield K
part bounding boxes, which are intersected with the refined foreground mask
to produce dense part masks.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from . import nn, vision
from .autograd import Tensor


class InsufficientPartsError(RuntimeError):
    """Fewer non-empty attention channels than requested parts."""


def to_input(images: np.ndarray, dtype=np.float32) -> Tensor:
    """uint8 (N,H,W,3) batch -> float (N,3,H,W) tensor in [0,1]."""
    arr = np.asarray(images)
    if arr.ndim == 3:
        arr = arr[None]
    x = arr.astype(dtype) / 255.0
    return Tensor(np.transpose(x, (0, 3, 1, 2)).copy(), dtype=dtype)


class Backbone(nn.Module):
    """Stem plus three residual stages; the final stage keeps stride 1 so the
    output map stays fine enough for part localization."""

    def __init__(self, rng, widths=(16, 32, 64), dtype=np.float32):
        super().__init__()
        w0, w1, w2 = widths
        self.stem = nn.ConvBnRelu(3, w0, 3, rng, stride=2, padding=1, dtype=dtype)
        self.stage1 = nn.ResidualBlock(w0, w1, rng, stride=2, dtype=dtype)
        self.stage2 = nn.ResidualBlock(w1, w2, rng, stride=2, dtype=dtype)
        self.stage3 = nn.ResidualBlock(w2, w2, rng, stride=1, dtype=dtype)
        self.out_channels = w2
        self.stride = 8

    def forward(self, x):
        return self.stage3(self.stage2(self.stage1(self.stem(x))))


class SegmentationDecoder(nn.Module):
    """Four transposed-conv layers back to image resolution; the first three
    carry BatchNorm+ReLU, the last one a sigmoid."""

    def __init__(self, cin, rng, up_strides=(2, 2, 2, 1), widths=(32, 16, 8),
                 dtype=np.float32):
        super().__init__()
        chans = [cin, *widths, 1]
        for i, s in enumerate(up_strides):
            k, p = (4, 1) if s == 2 else (3, 1)
            self._modules[f"tconv{i}"] = nn.ConvTranspose2d(
                chans[i], chans[i + 1], k, rng, stride=s, padding=p,
                bias=(i == 3), dtype=dtype)
            if i < 3:
                self._modules[f"bn{i}"] = nn.BatchNorm(chans[i + 1], dtype=dtype)

    def forward(self, x):
        tconvs = [self._modules[f"tconv{i}"] for i in range(4)]
        bns = [self._modules[f"bn{i}"] for i in range(3)]
        for i in range(3):
            x = ag.relu(bns[i](tconvs[i](x)))
        return ag.sigmoid(tconvs[3](x))


class PanetModel(nn.Module):
    def __init__(self, num_ids: int, rng: np.random.Generator | None = None,
                 widths=(16, 32, 64), image_size: int = 64,
                 decoder_widths=(32, 16, 8), dtype=np.float32):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.num_ids = num_ids
        self.image_size = image_size
        self.backbone = Backbone(rng, widths, dtype=dtype)
        c = self.backbone.out_channels
        # the decoder's total upsampling must undo the backbone stride
        ups = []
        s = self.backbone.stride
        for _ in range(4):
            ups.append(2 if s > 1 else 1)
            s = max(1, s // 2)
        if s != 1:
            raise ValueError(f"backbone stride {self.backbone.stride} needs "
                             "more than 4 doubling decoder layers")
        self.decoder = SegmentationDecoder(c, rng, tuple(ups), decoder_widths,
                                           dtype=dtype)
        self.neck = nn.BatchNorm(c, dtype=dtype)
        self.classifier = nn.Linear(c, num_ids, rng, bias=False, dtype=dtype)

    def encode(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.image_size or x.shape[-2] != self.image_size:
            raise ag.ShapeError(
                f"expected {self.image_size}x{self.image_size} input, "
                f"got {x.shape[-2]}x{x.shape[-1]}")
        return self.backbone(x)

    def classify(self, feat: Tensor) -> Tensor:
        return self.classifier(self.neck(ag.global_avg_pool(feat)))

    def segment_decode(self, feat: Tensor) -> Tensor:
        return self.decoder(feat)

    def forward(self, x):
        feat = self.encode(x)
        return self.classify(feat), self.segment_decode(feat)


def pcr(x: Tensor) -> Tensor:
    """Part-relevant channel recalibration.

    Rows of the channel-similarity matrix are softmax-normalized, used to
    recalibrate the flattened map, and the result is softmax-normalized along
    the spatial axis, so each output channel is a probability map over
    positions.
    """
    n, c, h, w = x.shape
    xt = ag.reshape(x, (n, c, h * w))
    g = ag.softmax(ag.bmm(xt, ag.transpose2d(xt)), axis=2)
    xhat = ag.softmax(ag.bmm(g, xt), axis=2)
    return ag.reshape(xhat, (n, c, h, w))


# ---------------------------------------------------------------------------
# part mask generation

@dataclass
class PartMaskSet:
    """K dense part masks for one image, in canonical cluster order."""

    image_id: str
    masks: np.ndarray                 # (K, H, W) bool, image resolution
    bboxes: list[tuple[int, int, int, int]]   # feature coords (r0, c0, r1, c1), inclusive
    centroids: np.ndarray             # (K, 2) cluster centroids, feature (row, col)
    feature_hw: tuple[int, int]

    @property
    def k(self) -> int:
        return len(self.bboxes)

    def image_bboxes(self) -> list[tuple[int, int, int, int]]:
        """Bounding boxes upscaled to image coordinates (x0, y0, x1, y1), inclusive."""
        h_img, w_img = self.masks.shape[1:]
        fh, fw = self.feature_hw
        sy, sx = h_img / fh, w_img / fw
        out = []
        for (r0, c0, r1, c1) in self.bboxes:
            out.append((int(c0 * sx), int(r0 * sy),
                        int((c1 + 1) * sx) - 1, int((r1 + 1) * sy) - 1))
        return out

    def flip_horizontal(self) -> "PartMaskSet":
        """Mirror the masks and boxes; cluster order (sorted by row first)
        is preserved under a horizontal flip."""
        fw = self.feature_hw[1]
        boxes = [(r0, fw - 1 - c1, r1, fw - 1 - c0)
                 for (r0, c0, r1, c1) in self.bboxes]
        cents = self.centroids.copy()
        cents[:, 1] = fw - 1 - cents[:, 1]
        return PartMaskSet(self.image_id, self.masks[:, :, ::-1].copy(),
                           boxes, cents, self.feature_hw)


@dataclass
class PartEvidence:
    """Phase-1 output: per-cluster member channels, ready for phase-2 draws."""

    cluster_boxes: list[list[tuple[int, int, int, int]]]   # canonical order
    cluster_centers: list[list[tuple[float, float]]]
    centroids: np.ndarray            # (K, 2) feature coords
    m_fg: np.ndarray                 # (H, W) bool, image resolution
    feature_hw: tuple[int, int]
    image_id: str = ""


def part_evidence(xhat: np.ndarray, m_fg: np.ndarray, k: int,
                  rel_threshold: float = 0.5, cluster_seed: int = 0,
                  image_id: str = "") -> PartEvidence:
    """Phase 1: binarize each channel, keep the largest component's box and
    center, and k-means the centers into K canonically ordered clusters.

    Clustering uses its own fixed seed so phase-2 sampling seeds can never
    change the clusters.
    """
    xhat = np.asarray(xhat)
    if xhat.ndim != 3:
        raise ValueError(f"expected (C, h, w) attention map, got {xhat.shape}")
    if k < 1:
        raise ValueError("k must be >= 1")
    if not np.asarray(m_fg, bool).any():
        raise InsufficientPartsError("empty foreground mask")
    boxes, centers = [], []
    for c in range(xhat.shape[0]):
        bm = vision.binarize_channel(xhat[c], rel_threshold)
        lcc = vision.largest_connected_component(bm)
        if lcc is None:
            continue
        _, bbox, center = lcc
        boxes.append(bbox)
        centers.append(center)
    if len(centers) < k:
        raise InsufficientPartsError(
            f"insufficient part evidence: {len(centers)} non-empty channels "
            f"for k={k}")
    km = vision.kmeans(np.asarray(centers), k, seed=cluster_seed)
    order = sorted(range(k), key=lambda j: (km.centroids[j][0], km.centroids[j][1]))
    cluster_boxes, cluster_centers = [], []
    for j in order:
        members = km.members(j)
        cluster_boxes.append([boxes[m] for m in members])
        cluster_centers.append([centers[m] for m in members])
    return PartEvidence(cluster_boxes, cluster_centers,
                        km.centroids[order].copy(),
                        np.asarray(m_fg, bool), xhat.shape[1:], image_id)


def sample_mask_set(ev: PartEvidence, seed: int | None = None) -> PartMaskSet:
    """Phase 2: pick one member box per cluster and intersect with the
    foreground mask.

    With a seed the member is drawn uniformly (training); without one the
    member nearest its cluster centroid is used (deterministic inference).
    A box whose intersection with the foreground is empty falls back to the
    foreground mask itself, which keeps the mask-subset invariant.
    """
    rng = np.random.default_rng(seed) if seed is not None else None
    h_img, w_img = ev.m_fg.shape
    fh, fw = ev.feature_hw
    sy, sx = h_img / fh, w_img / fw
    masks = np.zeros((len(ev.cluster_boxes), h_img, w_img), dtype=bool)
    bboxes = []
    for j, (boxes, centers) in enumerate(zip(ev.cluster_boxes, ev.cluster_centers)):
        if rng is not None:
            pick = int(rng.integers(len(boxes)))
        else:
            d = ((np.asarray(centers) - ev.centroids[j]) ** 2).sum(axis=1)
            pick = int(d.argmin())
        r0, c0, r1, c1 = boxes[pick]
        y0, y1 = int(r0 * sy), int((r1 + 1) * sy)
        x0, x1 = int(c0 * sx), int((c1 + 1) * sx)
        m = np.zeros((h_img, w_img), dtype=bool)
        m[y0:y1, x0:x1] = True
        m &= ev.m_fg
        if not m.any():
            m = ev.m_fg.copy()
            rr, cc = np.nonzero(m)
            r0, c0 = int(rr.min() // sy), int(cc.min() // sx)
            r1, c1 = int(rr.max() // sy), int(cc.max() // sx)
        masks[j] = m
        bboxes.append((r0, c0, r1, c1))
    return PartMaskSet(ev.image_id, masks, bboxes,
                       ev.centroids.copy(), ev.feature_hw)


def generate_part_masks(xhat: np.ndarray, m_fg: np.ndarray, k: int,
                        seed: int | None = None, rel_threshold: float = 0.5,
                        cluster_seed: int = 0, image_id: str = "") -> PartMaskSet:
    """Full two-phase part mask generation for a single image."""
    ev = part_evidence(xhat, m_fg, k, rel_threshold, cluster_seed, image_id)
    return sample_mask_set(ev, seed)


def infer_evidence(model: PanetModel, image: np.ndarray, k: int,
                   rel_threshold: float = 0.5, refine_threshold: float = 0.5,
                   cluster_seed: int = 0, image_id: str = "") -> PartEvidence:
    """Run the frozen model on one image and build phase-1 part evidence."""
    model.eval()
    with ag.no_grad():
        x = to_input(image)
        feat = model.encode(x)
        prob = model.segment_decode(feat)
        xhat = pcr(feat)
    m_fg = prob.data[0, 0] >= refine_threshold
    return part_evidence(xhat.data[0], m_fg, k, rel_threshold, cluster_seed,
                         image_id)


# ---------------------------------------------------------------------------
# training

@dataclass
class PanetTrainConfig:
    epochs: int = 100
    batch_size: int = 64
    lr: float = 1e-4
    seed: int = 1
    pcr_end_to_end: bool = False     # route the ID branch through pcr()


def train_panet(model: PanetModel, images: np.ndarray, labels: np.ndarray,
                pseudo_masks: np.ndarray, config: PanetTrainConfig,
                log_fn=None) -> list[float]:
    """Joint identity + segmentation training against graph-cut pseudo-labels.

    Loss is cross-entropy on the classification branch plus mean-square error
    between the decoder output and the pseudo mask, summed with unit weights.
    Returns the per-epoch mean loss trace.
    """
    images = np.asarray(images)
    labels = np.asarray(labels)
    pseudo_masks = np.asarray(pseudo_masks, dtype=bool)
    if len(images) != len(pseudo_masks):
        raise ValueError(f"dataset/mask count mismatch: {len(images)} images "
                         f"vs {len(pseudo_masks)} masks")
    rng = np.random.default_rng(config.seed)
    opt = nn.Adam(model.parameters(), lr=config.lr)
    model.train()
    n = len(images)
    bs = min(config.batch_size, n)
    trace = []
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        losses = []
        for start in range(0, n, bs):
            idx = order[start:start + bs]
            if len(idx) < 2:      # batchnorm needs more than one sample
                continue
            x = to_input(images[idx])
            target = Tensor(pseudo_masks[idx][:, None].astype(np.float32))
            feat = model.encode(x)
            cls_feat = pcr(feat) if config.pcr_end_to_end else feat
            logits = model.classify(cls_feat)
            prob = model.segment_decode(feat)
            loss = ag.add(nn.cross_entropy(logits, labels[idx], model.num_ids),
                          nn.mse(prob, target))
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(loss.item())
        trace.append(float(np.mean(losses)))
        if log_fn is not None:
            log_fn(epoch, trace[-1])
    return trace
