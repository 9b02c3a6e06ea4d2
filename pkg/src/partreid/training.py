"""Losses and the end-to-end multi-task training loop.

Batches carry P identities x Q images so hard triplets exist by
construction. The three identity losses (global, student, teacher) are
weighted by learnable homoscedastic-uncertainty noise parameters; triplet
terms are plainly averaged and the part-transfer loss is added with unit
weight. Part masks are resampled every step with a seed derived from
(global seed, step), so training is reproducible bit for bit.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from . import nn
from .autograd import Tensor
from .panet import (PanetModel, PartEvidence, infer_evidence, sample_mask_set,
                    to_input)
from .pmnet import PmnetModel, part_transfer_loss


class NoNegativesError(ValueError):
    """Triplet loss needs at least two identities in the batch."""


@dataclass
class TrainConfig:
    p: int = 4                      # identities per batch
    q: int = 8                      # images per identity
    margin: float = 0.7
    k: int = 3
    lr: float = 1.5e-4
    warmup_frac: float = 0.1        # linear ramp over this fraction of steps
    epochs: int = 40
    flip_prob: float = 0.5
    erase_prob: float = 0.5
    occlusion_prob: float = 0.3
    label_smoothing: float = 0.1
    hul: bool = True
    fixed_weights: tuple[float, float, float] = (1.0, 1.0, 1.0)
    pt_squared: bool = False
    seed: int = 3

    def __post_init__(self):
        if self.p < 1 or self.q < 1:
            raise ValueError("p and q must be positive")
        if self.margin <= 0:
            raise ValueError("margin must be > 0")
        for name in ("flip_prob", "erase_prob", "occlusion_prob"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {v}")

    @property
    def batch_size(self) -> int:
        return self.p * self.q


class HulState(nn.Module):
    """Learnable log-variance per sub-task; weights stay positive by
    construction and the paper-style log-sigma penalty becomes s/2."""

    NAMES = ("g", "s", "t")

    def __init__(self, dtype=np.float32):
        super().__init__()
        for name in self.NAMES:
            self.register_param(f"s_{name}", np.zeros(1, dtype=dtype))

    def s(self, name: str) -> Tensor:
        return self._params[f"s_{name}"]

    def sigma_sq(self) -> dict[str, float]:
        return {name: float(np.exp(self._params[f"s_{name}"].data[0]))
                for name in self.NAMES}

    def lambdas(self) -> tuple[float, float, float]:
        """Inference fusion weights: the learned task weights 1/sigma^2."""
        ss = self.sigma_sq()
        return tuple(1.0 / ss[name] for name in self.NAMES)


def hul_combine(l_g: Tensor, l_s: Tensor, l_t: Tensor, hul: HulState) -> Tensor:
    """Uncertainty-weighted identity objective:
    sum_j exp(-s_j) L_j + s_j / 2."""
    total = None
    for name, loss in zip(HulState.NAMES, (l_g, l_s, l_t)):
        s = ag.reshape(hul.s(name), ())
        term = ag.add(ag.mul(ag.exp(ag.neg(s)), loss), ag.mul(s, 0.5))
        total = term if total is None else ag.add(total, term)
    return total


# ---------------------------------------------------------------------------
# sampling

def pq_epoch(labels: np.ndarray, p: int, q: int,
             rng: np.random.Generator) -> list[np.ndarray]:
    """One epoch of P x Q batches covering every identity at least once.

    Identities with fewer than q images are sampled with replacement. A short
    final group is padded with extra identities so every batch holds exactly
    p distinct identities.
    """
    labels = np.asarray(labels)
    ids = np.unique(labels)
    if len(ids) < p:
        raise ValueError(f"need >= {p} identities, dataset has {len(ids)}")
    by_id = {i: np.nonzero(labels == i)[0] for i in ids}
    order = rng.permutation(ids)
    batches = []
    for start in range(0, len(order), p):
        group = list(order[start:start + p])
        if len(group) < p:
            pool = [i for i in order[:start] if i not in group]
            extra = rng.choice(len(pool), size=p - len(group), replace=False)
            group += [pool[e] for e in extra]
        idx = []
        for i in group:
            imgs = by_id[i]
            replace = len(imgs) < q
            idx.append(rng.choice(imgs, size=q, replace=replace))
        batches.append(np.concatenate(idx))
    return batches


def pq_sampler(labels: np.ndarray, p: int, q: int, seed: int):
    """Endless stream of P x Q batches, deterministic given the seed."""
    rng = np.random.default_rng(seed)
    while True:
        yield from pq_epoch(labels, p, q, rng)


# ---------------------------------------------------------------------------
# losses

def pairwise_euclidean(emb: Tensor) -> Tensor:
    """(B, D) -> (B, B) Euclidean distances, eps-stabilized at zero."""
    b, d = emb.shape
    diff = ag.sub(ag.reshape(emb, (b, 1, d)), ag.reshape(emb, (1, b, d)))
    sq = ag.tsum(ag.mul(diff, diff), axis=2)
    return ag.sqrt(sq + 1e-12)


def triplet_loss_batch_hard(emb: Tensor, labels: np.ndarray,
                            margin: float = 0.7) -> Tensor:
    """Batch-hard triplet loss: per anchor, hardest positive minus hardest
    negative plus margin, hinged at zero, averaged over anchors that have at
    least one positive. Distances are Euclidean on the raw embeddings."""
    labels = np.asarray(labels)
    b = emb.shape[0]
    if len(labels) != b:
        raise ag.ShapeError(f"{len(labels)} labels for batch of {b}")
    same = labels[:, None] == labels[None, :]
    pos_mask = same & ~np.eye(b, dtype=bool)
    neg_mask = ~same
    if not neg_mask.any():
        raise NoNegativesError("single identity in batch: no negatives")
    anchors = np.nonzero(pos_mask.any(axis=1))[0]
    if len(anchors) == 0:
        raise NoNegativesError("no anchor has a positive in this batch")
    dist = pairwise_euclidean(emb)
    d = dist.data
    hardest_pos = np.where(pos_mask[anchors], d[anchors], -np.inf).argmax(axis=1)
    hardest_neg = np.where(neg_mask[anchors], d[anchors], np.inf).argmin(axis=1)
    d_ap = ag.take_pairs(dist, anchors, hardest_pos)
    d_an = ag.take_pairs(dist, anchors, hardest_neg)
    return ag.tmean(ag.relu(ag.add(ag.sub(d_ap, d_an), margin)))


def total_objective(outputs: dict, labels: np.ndarray, hul: HulState | None,
                    model: PmnetModel, config: TrainConfig) -> tuple[Tensor, dict]:
    """Aggregate objective: uncertainty-weighted ID losses plus the plain
    average of the three triplet terms plus the part-transfer loss, combined
    with unit weights. Returns (objective, float components for logging)."""
    if outputs["f_t"] is None:
        raise ValueError("training objective needs teacher features")
    ce = lambda f, cls: nn.cross_entropy(cls(f), labels, model.num_ids,
                                         config.label_smoothing)
    l_g = ce(outputs["f_g"], model.cls_g)
    l_s = ce(outputs["f_s"], model.cls_s)
    l_t = ce(outputs["f_t"], model.cls_t)
    if hul is not None:
        j_id = hul_combine(l_g, l_s, l_t, hul)
    else:
        w = config.fixed_weights
        j_id = ag.add(ag.add(ag.mul(l_g, w[0]), ag.mul(l_s, w[1])),
                      ag.mul(l_t, w[2]))
    tri = lambda f: triplet_loss_batch_hard(f, labels, config.margin)
    j_tri = ag.mul(ag.add(ag.add(tri(outputs["f_g"]), tri(outputs["f_s"])),
                          tri(outputs["f_t"])), 1.0 / 3.0)
    l_pt = part_transfer_loss(outputs["student_maps"], outputs["teacher_maps"],
                              squared=config.pt_squared)
    j = ag.add(ag.add(j_id, j_tri), l_pt)
    parts = {"J": j.item(), "J_ID": j_id.item(), "J_Tri": j_tri.item(),
             "L_PT": l_pt.item()}
    return j, parts


# ---------------------------------------------------------------------------
# augmentation

def occlusion_augment(image: np.ndarray, prob: float,
                      rng: np.random.Generator) -> np.ndarray:
    """With the given probability, fill one axis-aligned rectangle covering
    10-35% of the image area with a uniformly random RGB color."""
    if not 0.0 <= prob <= 1.0:
        raise ValueError(f"prob must be in [0, 1], got {prob}")
    if rng.random() >= prob:
        return image
    h, w = image.shape[:2]
    area = rng.uniform(0.10, 0.35) * h * w
    aspect = np.exp(rng.uniform(np.log(0.5), np.log(2.0)))
    rh = min(h, max(1, int(round(np.sqrt(area * aspect)))))
    rw = min(w, max(1, int(round(area / rh))))
    y = int(rng.integers(0, h - rh + 1))
    x = int(rng.integers(0, w - rw + 1))
    out = image.copy()
    out[y:y + rh, x:x + rw] = rng.integers(0, 256, size=3, dtype=np.uint8)
    return out


def random_erasing(image: np.ndarray, prob: float,
                   rng: np.random.Generator) -> np.ndarray:
    """Erase a 2-33% area rectangle (aspect 0.3-3.3) with per-pixel noise."""
    if rng.random() >= prob:
        return image
    h, w = image.shape[:2]
    area = rng.uniform(0.02, 0.33) * h * w
    aspect = np.exp(rng.uniform(np.log(0.3), np.log(3.3)))
    rh = min(h, max(1, int(round(np.sqrt(area * aspect)))))
    rw = min(w, max(1, int(round(area / rh))))
    y = int(rng.integers(0, h - rh + 1))
    x = int(rng.integers(0, w - rw + 1))
    out = image.copy()
    out[y:y + rh, x:x + rw] = rng.integers(0, 256,
                                           size=(rh, rw, 3), dtype=np.uint8)
    return out


def augment_image(image: np.ndarray, config: TrainConfig,
                  rng: np.random.Generator) -> tuple[np.ndarray, bool]:
    """Flip / erase / occlude; returns the image and whether it was flipped
    (the caller must mirror the part masks to match)."""
    flipped = bool(rng.random() < config.flip_prob)
    if flipped:
        image = image[:, ::-1].copy()
    image = random_erasing(image, config.erase_prob, rng)
    image = occlusion_augment(image, config.occlusion_prob, rng)
    return image, flipped


# ---------------------------------------------------------------------------
# training loop

LOG_FIELDS = ("step", "J", "J_ID", "J_Tri", "L_PT",
              "sigma_g_sq", "sigma_s_sq", "sigma_t_sq", "lr")


def warmup_lr(base_lr: float, step: int, total_steps: int,
              warmup_frac: float) -> float:
    warmup = max(1, int(round(total_steps * warmup_frac)))
    if step < warmup:
        return base_lr * (step + 1) / warmup
    return base_lr


def train_pmnet(pmnet: PmnetModel, panet: PanetModel | None,
                images: np.ndarray, labels: np.ndarray, config: TrainConfig,
                evidences: list[PartEvidence] | None = None,
                log_path=None, rel_threshold: float = 0.5,
                refine_threshold: float = 0.5) -> HulState:
    """Train PMNet against part masks from a frozen PANet.

    Phase-1 part evidence per image is computed once (or passed in); phase-2
    masks are redrawn each step with a seed derived from (config.seed, step,
    sample). PANet parameters are never updated. Returns the trained HUL
    state (PMNet is updated in place).
    """
    images = np.asarray(images)
    labels = np.asarray(labels)
    if pmnet.k < 1:
        raise ValueError("train_pmnet needs part streams; use "
                         "train_global_only for the ablation")
    if evidences is None:
        if panet is None:
            raise ValueError("need either a PANet or precomputed part evidence")
        evidences = [infer_evidence(panet, images[i], pmnet.k, rel_threshold,
                                    refine_threshold, image_id=str(i))
                     for i in range(len(images))]
    if len(evidences) != len(images):
        raise ValueError(f"{len(evidences)} evidences for {len(images)} images")

    hul = HulState() if config.hul else None
    params = pmnet.parameters() + (hul.parameters() if hul else [])
    opt = nn.Adam(params, lr=config.lr)
    rng = np.random.default_rng(config.seed)
    n_ids = len(np.unique(labels))
    steps_per_epoch = int(np.ceil(n_ids / config.p))
    total_steps = steps_per_epoch * config.epochs

    rows = []
    step = 0
    pmnet.train()
    for _ in range(config.epochs):
        for batch_idx in pq_epoch(labels, config.p, config.q, rng):
            batch_imgs, batch_masks = [], []
            for j, i in enumerate(batch_idx):
                arng = np.random.default_rng(
                    np.random.SeedSequence([config.seed, step, j]))
                img, flipped = augment_image(images[i], config, arng)
                mask_seed = int(np.random.SeedSequence(
                    [config.seed, step, j, 1]).generate_state(1)[0])
                ms = sample_mask_set(evidences[i], seed=mask_seed)
                if flipped:
                    ms = ms.flip_horizontal()
                batch_imgs.append(img)
                batch_masks.append(ms)
            x = np.stack(batch_imgs)
            out = pmnet.forward_features(to_input(x), batch_masks)
            j_total, parts = total_objective(out, labels[batch_idx], hul,
                                             pmnet, config)
            opt.zero_grad()
            j_total.backward()
            lr = warmup_lr(config.lr, step, total_steps, config.warmup_frac)
            opt.step(lr=lr)
            ss = hul.sigma_sq() if hul else {"g": 1.0, "s": 1.0, "t": 1.0}
            rows.append([step, parts["J"], parts["J_ID"], parts["J_Tri"],
                         parts["L_PT"], ss["g"], ss["s"], ss["t"], lr])
            step += 1
    if log_path is not None:
        with open(log_path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(LOG_FIELDS)
            writer.writerows(rows)
    return hul if hul is not None else HulState()


def train_global_only(pmnet: PmnetModel, images: np.ndarray,
                      labels: np.ndarray, config: TrainConfig,
                      log_path=None) -> None:
    """Train a parts-free model (k=0): identity loss plus triplet on the
    global embedding only. Used by the occlusion ablation."""
    images = np.asarray(images)
    labels = np.asarray(labels)
    opt = nn.Adam(pmnet.parameters(), lr=config.lr)
    rng = np.random.default_rng(config.seed)
    n_ids = len(np.unique(labels))
    total_steps = int(np.ceil(n_ids / config.p)) * config.epochs
    rows = []
    step = 0
    pmnet.train()
    for _ in range(config.epochs):
        for batch_idx in pq_epoch(labels, config.p, config.q, rng):
            batch = []
            for j, i in enumerate(batch_idx):
                arng = np.random.default_rng(
                    np.random.SeedSequence([config.seed, step, j]))
                img, _ = augment_image(images[i], config, arng)
                batch.append(img)
            out = pmnet.forward_features(to_input(np.stack(batch)), None)
            l_g = nn.cross_entropy(pmnet.cls_g(out["f_g"]), labels[batch_idx],
                                   pmnet.num_ids, config.label_smoothing)
            tri = triplet_loss_batch_hard(out["f_g"], labels[batch_idx],
                                          config.margin)
            loss = ag.add(l_g, tri)
            opt.zero_grad()
            loss.backward()
            lr = warmup_lr(config.lr, step, total_steps, config.warmup_frac)
            opt.step(lr=lr)
            rows.append([step, loss.item(), l_g.item(), tri.item(), 0.0,
                         1.0, 1.0, 1.0, lr])
            step += 1
    if log_path is not None:
        with open(log_path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(LOG_FIELDS)
            writer.writerows(rows)
