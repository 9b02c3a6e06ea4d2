"""Retrieval evaluation: cosine distances, weighted fusion, mAP and CMC.

All functions are pure; rankings use stable sorts so ties break by gallery
index and results are reproducible bit for bit. With camera ids present,
same-identity same-camera gallery items are removed from a query's ranking
(the usual cross-camera protocol); queries left without a single relevant
item are dropped and counted.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .pmnet import FeatureBundle


@dataclass
class DistanceMatrix:
    values: np.ndarray                 # (n_query, n_gallery)
    query_ids: np.ndarray              # identity labels
    gallery_ids: np.ndarray
    query_cams: np.ndarray | None = None
    gallery_cams: np.ndarray | None = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if not np.all(np.isfinite(self.values)):
            raise ValueError("distance matrix contains non-finite entries")
        if self.values.shape != (len(self.query_ids), len(self.gallery_ids)):
            raise ValueError(f"matrix {self.values.shape} does not match "
                             f"{len(self.query_ids)} queries x "
                             f"{len(self.gallery_ids)} gallery items")


@dataclass
class EvalReport:
    map: float
    cmc1: float
    cmc5: float
    num_valid_queries: int
    num_dropped_queries: int = 0
    distances: DistanceMatrix | None = None

    def rows(self) -> list[tuple[str, str]]:
        return [("mAP", repr(self.map)),
                ("CMC@1", repr(self.cmc1)),
                ("CMC@5", repr(self.cmc5)),
                ("valid_queries", str(self.num_valid_queries)),
                ("dropped_queries", str(self.num_dropped_queries))]

    def write_csv(self, path):
        with open(path, "w", newline="") as f:
            csv.writer(f).writerows([("metric", "value"), *self.rows()])

    def __str__(self):
        return (f"mAP={self.map:.4f} CMC@1={self.cmc1:.4f} "
                f"CMC@5={self.cmc5:.4f} "
                f"({self.num_valid_queries} queries, "
                f"{self.num_dropped_queries} dropped)")


def cosine_distance_matrix(query: np.ndarray, gallery: np.ndarray) -> np.ndarray:
    """1 - cosine similarity for every query/gallery pair; range [0, 2]."""
    q = np.asarray(query, dtype=np.float64)
    g = np.asarray(gallery, dtype=np.float64)
    if q.ndim != 2 or g.ndim != 2 or q.shape[1] != g.shape[1]:
        raise ValueError(f"feature dims differ: {q.shape} vs {g.shape}")
    qn = np.linalg.norm(q, axis=1)
    gn = np.linalg.norm(g, axis=1)
    if (qn < 1e-12).any() or (gn < 1e-12).any():
        raise ValueError("cosine distance undefined for zero-norm features")
    return 1.0 - (q / qn[:, None]) @ (g / gn[:, None]).T


def fuse_distances(d_g: np.ndarray, d_s: np.ndarray | None,
                   d_t: np.ndarray | None,
                   lambdas: tuple[float, float, float]) -> np.ndarray:
    """Weighted sum lam1*D_G + lam2*D_S + lam3*D_T; a missing matrix requires
    its weight to be zero (teacher-free mode is lam3 = 0)."""
    l1, l2, l3 = lambdas
    if min(l1, l2, l3) < 0:
        raise ValueError(f"fusion weights must be >= 0, got {lambdas}")
    out = l1 * np.asarray(d_g, dtype=np.float64)
    for d, lam, name in ((d_s, l2, "student"), (d_t, l3, "teacher")):
        if d is None:
            if lam != 0:
                raise ValueError(f"{name} distances missing but weight {lam} != 0")
            continue
        d = np.asarray(d, dtype=np.float64)
        if d.shape != out.shape:
            raise ValueError(f"{name} matrix shape {d.shape} != {out.shape}")
        out = out + lam * d
    return out


def _query_ranking(dist: DistanceMatrix, qi: int) -> np.ndarray:
    """Gallery indices in rank order for query qi, junk entries removed."""
    order = np.argsort(dist.values[qi], kind="stable")
    if dist.query_cams is not None and dist.gallery_cams is not None:
        junk = ((dist.gallery_ids == dist.query_ids[qi])
                & (dist.gallery_cams == dist.query_cams[qi]))
        order = order[~junk[order]]
    return order


def compute_map(dist: DistanceMatrix) -> tuple[float, int, int]:
    """Mean average precision. AP per query is the mean of precision@k over
    its relevant ranks k. Returns (mAP, valid queries, dropped queries)."""
    aps = []
    dropped = 0
    for qi in range(len(dist.query_ids)):
        order = _query_ranking(dist, qi)
        rel = dist.gallery_ids[order] == dist.query_ids[qi]
        n_rel = int(rel.sum())
        if n_rel == 0:
            dropped += 1
            continue
        hits = 0
        ap = 0.0
        for rank, is_rel in enumerate(rel, start=1):
            if is_rel:
                hits += 1
                ap += hits / rank
        aps.append(ap / n_rel)
    if not aps:
        raise ValueError("no query has a relevant gallery item")
    return sum(aps) / len(aps), len(aps), dropped


def compute_cmc(dist: DistanceMatrix, ranks=(1, 5)) -> dict[int, float]:
    """CMC@r: fraction of valid queries with a relevant item in the top r."""
    counts = {r: 0 for r in ranks}
    valid = 0
    for qi in range(len(dist.query_ids)):
        order = _query_ranking(dist, qi)
        rel = dist.gallery_ids[order] == dist.query_ids[qi]
        if not rel.any():
            continue
        valid += 1
        first = int(np.nonzero(rel)[0][0]) + 1
        for r in ranks:
            if first <= r:
                counts[r] += 1
    if valid == 0:
        raise ValueError("no query has a relevant gallery item")
    return {r: counts[r] / valid for r in ranks}


def _bundle_arrays(bundles: list[FeatureBundle]):
    f_g = np.stack([b.f_g for b in bundles])
    f_s = (np.stack([b.f_s for b in bundles])
           if all(b.f_s is not None for b in bundles) else None)
    f_t = (np.stack([b.f_t for b in bundles])
           if all(b.f_t is not None for b in bundles) else None)
    return f_g, f_s, f_t


def _score(query_bundles, gallery_bundles, query_ids, gallery_ids,
           lambdas, query_cams=None, gallery_cams=None) -> EvalReport:
    qg, qs, qt = _bundle_arrays(query_bundles)
    gg, gs, gt = _bundle_arrays(gallery_bundles)
    d_g = cosine_distance_matrix(qg, gg)
    d_s = cosine_distance_matrix(qs, gs) if qs is not None and gs is not None else None
    d_t = cosine_distance_matrix(qt, gt) if qt is not None and gt is not None else None
    fused = fuse_distances(d_g, d_s, d_t, lambdas)
    dist = DistanceMatrix(fused, np.asarray(query_ids), np.asarray(gallery_ids),
                          None if query_cams is None else np.asarray(query_cams),
                          None if gallery_cams is None else np.asarray(gallery_cams))
    m, valid, dropped = compute_map(dist)
    cmc = compute_cmc(dist)
    return EvalReport(map=m, cmc1=cmc[1], cmc5=cmc[5],
                      num_valid_queries=valid, num_dropped_queries=dropped,
                      distances=dist)


def evaluate(query_bundles: list[FeatureBundle], query_ids,
             gallery_bundles: list[FeatureBundle], gallery_ids,
             lambdas: tuple[float, float, float],
             query_cams=None, gallery_cams=None,
             protocol: str = "cross-camera", rounds: int = 10,
             seed: int = 0) -> EvalReport:
    """Score retrieval with fused cosine distances.

    "cross-camera" uses the given query/gallery split with same-camera
    exclusion. "single-gallery" merges both sets, draws one gallery image per
    identity (everything else queries), and averages the metrics over
    ``rounds`` seeded draws.
    """
    if protocol == "cross-camera":
        return _score(query_bundles, gallery_bundles, query_ids, gallery_ids,
                      lambdas, query_cams, gallery_cams)
    if protocol != "single-gallery":
        raise ValueError(f"unknown protocol '{protocol}'")
    pool = list(query_bundles) + list(gallery_bundles)
    ids = np.concatenate([np.asarray(query_ids), np.asarray(gallery_ids)])
    rng = np.random.default_rng(seed)
    maps, c1s, c5s, valids, drops = [], [], [], [], []
    for _ in range(rounds):
        g_idx = []
        for ident in np.unique(ids):
            members = np.nonzero(ids == ident)[0]
            g_idx.append(int(rng.choice(members)))
        g_mask = np.zeros(len(pool), dtype=bool)
        g_mask[g_idx] = True
        rep = _score([pool[i] for i in np.nonzero(~g_mask)[0]],
                     [pool[i] for i in np.nonzero(g_mask)[0]],
                     ids[~g_mask], ids[g_mask], lambdas)
        maps.append(rep.map)
        c1s.append(rep.cmc1)
        c5s.append(rep.cmc5)
        valids.append(rep.num_valid_queries)
        drops.append(rep.num_dropped_queries)
    return EvalReport(map=float(np.mean(maps)), cmc1=float(np.mean(c1s)),
                      cmc5=float(np.mean(c5s)),
                      num_valid_queries=int(np.mean(valids)),
                      num_dropped_queries=int(np.mean(drops)))
