"""Classical (non-differentiable) vision machinery.

Foreground pseudo-labels come from an iterated graph-cut with per-region GMM
color models; attention channels are turned into part evidence through
thresholding, connected components and k-means. Everything here is a pure
function of its inputs plus an explicit seed, so concurrent use on distinct
inputs is safe.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

__all__ = [
    "FlowNetwork", "max_flow_min_cut",
    "Gmm", "gmm_fit",
    "grabcut_lite", "GrabcutState", "segmentation_energy", "default_rect",
    "largest_connected_component", "kmeans", "KmeansResult",
    "binarize_channel",
    "read_png", "write_png", "write_mask_png", "read_mask_png",
]


# ---------------------------------------------------------------------------
# max-flow / min-cut

class FlowNetwork:
    """Directed flow network with arc-list storage (reverse arcs paired)."""

    def __init__(self, n: int, source: int, sink: int):
        if not (0 <= source < n and 0 <= sink < n) or source == sink:
            raise ValueError(f"invalid source/sink ({source}, {sink}) for n={n}")
        self.n = n
        self.source = source
        self.sink = sink
        self.to: list[int] = []
        self.cap: list[float] = []
        self.adj: list[list[int]] = [[] for _ in range(n)]

    def add_edge(self, u: int, v: int, cap: float):
        if not (0 <= u < self.n and 0 <= v < self.n):
            raise ValueError(f"edge ({u},{v}) outside node range 0..{self.n - 1}")
        if not np.isfinite(cap) or cap < 0:
            raise ValueError(f"capacity must be finite and >= 0, got {cap}")
        self.adj[u].append(len(self.to))
        self.to.append(v)
        self.cap.append(float(cap))
        self.adj[v].append(len(self.to))
        self.to.append(u)
        self.cap.append(0.0)

    @property
    def num_edges(self) -> int:
        return len(self.to) // 2


def max_flow_min_cut(net: FlowNetwork, eps: float = 1e-12):
    """Dinic's algorithm. Returns (flow value, source-side node set).

    The source side is the set of nodes reachable from the source in the
    final residual graph, which is a minimum cut; the flow value equals the
    capacity of that cut. The input network is not modified.
    """
    n, s, t = net.n, net.source, net.sink
    to, adj = net.to, net.adj
    res = list(net.cap)
    flow = 0.0
    level = [-1] * n

    while True:
        level = [-1] * n
        level[s] = 0
        q = deque([s])
        while q:
            u = q.popleft()
            for aid in adj[u]:
                v = to[aid]
                if res[aid] > eps and level[v] < 0:
                    level[v] = level[u] + 1
                    q.append(v)
        if level[t] < 0:
            break
        it = [0] * n
        # blocking flow via iterative DFS with current-arc pointers
        while True:
            path: list[int] = []
            u = s
            while u != t:
                advanced = False
                while it[u] < len(adj[u]):
                    aid = adj[u][it[u]]
                    v = to[aid]
                    if res[aid] > eps and level[v] == level[u] + 1:
                        path.append(aid)
                        u = v
                        advanced = True
                        break
                    it[u] += 1
                if not advanced:
                    if u == s:
                        break
                    level[u] = -1          # dead end, prune
                    u = s if not path else net.to[path[-1] ^ 1]
                    if path:
                        path.pop()
            if u != t:
                break
            bott = min(res[aid] for aid in path)
            for aid in path:
                res[aid] -= bott
                res[aid ^ 1] += bott
            flow += bott

    reachable = {s}
    q = deque([s])
    while q:
        u = q.popleft()
        for aid in adj[u]:
            v = to[aid]
            if res[aid] > eps and v not in reachable:
                reachable.add(v)
                q.append(v)
    return flow, frozenset(reachable)


# ---------------------------------------------------------------------------
# GMM color model

@dataclass
class Gmm:
    """Full-covariance Gaussian mixture over RGB colors."""

    weights: np.ndarray     # (k,), non-negative, sums to 1
    means: np.ndarray       # (k, d)
    covs: np.ndarray        # (k, d, d), symmetric positive-definite

    @property
    def k(self) -> int:
        return len(self.weights)

    def component_neglog(self, x: np.ndarray) -> np.ndarray:
        """-log( w_k * N(x; mu_k, cov_k) ) per point and component, (n, k)."""
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        n, d = x.shape
        out = np.empty((n, self.k))
        for k in range(self.k):
            if self.weights[k] <= 0:
                out[:, k] = np.inf
                continue
            cov = self.covs[k]
            try:
                chol = np.linalg.cholesky(cov)
            except np.linalg.LinAlgError:
                chol = np.linalg.cholesky(cov + np.eye(d) * _COV_RIDGE)
            diff = x - self.means[k]
            y = np.linalg.solve(chol, diff.T)
            maha = (y * y).sum(axis=0)
            logdet = 2.0 * np.log(np.diag(chol)).sum()
            out[:, k] = (0.5 * (maha + logdet + d * np.log(2 * np.pi))
                         - np.log(self.weights[k]))
        return out

    def neglog_best(self, x: np.ndarray) -> np.ndarray:
        """Data term: min over components of component_neglog, (n,)."""
        return self.component_neglog(x).min(axis=1)

    def log_likelihood(self, x: np.ndarray) -> float:
        """Total log-likelihood of the full mixture (soft, not best-component)."""
        nl = self.component_neglog(x)
        m = (-nl).max(axis=1, keepdims=True)
        return float((m[:, 0] + np.log(np.exp(-nl - m).sum(axis=1))).sum())


_COV_RIDGE = 1e-2  # added to degenerate covariances (0..255 color scale)


def _component_stats(x: np.ndarray, labels: np.ndarray, k: int,
                     prev: Gmm | None = None) -> Gmm:
    """ML weights/means/covariances per hard-assigned component."""
    n, d = x.shape
    weights = np.zeros(k)
    means = np.zeros((k, d))
    covs = np.tile(np.eye(d) * _COV_RIDGE, (k, 1, 1))
    for j in range(k):
        pts = x[labels == j]
        if len(pts) == 0:
            if prev is not None:
                means[j] = prev.means[j]
                covs[j] = prev.covs[j]
            continue
        weights[j] = len(pts) / n
        means[j] = pts.mean(axis=0)
        diff = pts - means[j]
        cov = diff.T @ diff / len(pts)
        if np.linalg.det(cov) < 1e-10:
            cov = cov + np.eye(d) * _COV_RIDGE
        covs[j] = cov
    total = weights.sum()
    if total <= 0:
        raise ValueError("no points assigned to any component")
    weights /= total
    return Gmm(weights=weights, means=means, covs=covs)


def gmm_fit(pixels: np.ndarray, k: int, iters: int = 20, seed: int = 0) -> Gmm:
    """Fit a k-component GMM with EM (k-means init), deterministic given seed.

    The soft log-likelihood is non-decreasing across EM iterations; the
    covariance ridge kicks in only for degenerate clusters.
    """
    x = np.atleast_2d(np.asarray(pixels, dtype=np.float64))
    if len(x) == 0:
        raise ValueError("gmm_fit: empty pixel list")
    if len(x) < k:
        raise ValueError(f"gmm_fit: {len(x)} pixels < {k} components")
    km = kmeans(x, k, seed=seed)
    gmm = _component_stats(x, km.labels, k)
    n, d = x.shape
    for _ in range(iters):
        # E-step: responsibilities from the current mixture
        nl = gmm.component_neglog(x)                  # (n, k)
        lw = -nl
        m = lw.max(axis=1, keepdims=True)
        r = np.exp(lw - m)
        r /= r.sum(axis=1, keepdims=True)
        # M-step
        mass = r.sum(axis=0)                          # (k,)
        weights = mass / n
        means = np.where(mass[:, None] > 1e-12,
                         (r.T @ x) / np.maximum(mass[:, None], 1e-12),
                         gmm.means)
        covs = np.empty_like(gmm.covs)
        for j in range(k):
            if mass[j] <= 1e-12:
                covs[j] = gmm.covs[j]
                continue
            diff = x - means[j]
            cov = (r[:, j, None] * diff).T @ diff / mass[j]
            if np.linalg.det(cov) < 1e-10:
                cov = cov + np.eye(d) * _COV_RIDGE
            covs[j] = cov
        gmm = Gmm(weights=weights, means=means, covs=covs)
    return gmm


# ---------------------------------------------------------------------------
# grabcut-style foreground extraction

@dataclass
class GrabcutState:
    """Snapshot of one accepted iteration (for independent energy scoring)."""

    labels: np.ndarray          # (H, W) bool, True = foreground
    fg: Gmm
    bg: Gmm
    energy: float


def default_rect(w: int, h: int, margin_frac: float = 0.05):
    """Image bounds shrunk by a fraction per side: (x0, y0, x1, y1), half-open."""
    mx = max(1, int(round(w * margin_frac)))
    my = max(1, int(round(h * margin_frac)))
    return (mx, my, w - mx, h - my)


def _pairwise_weights(img: np.ndarray, lam: float):
    """Contrast-modulated 4-neighbourhood weights.

    Returns (beta_bar, w_h, w_v) with w_h (H, W-1) horizontal and w_v (H-1, W)
    vertical weights lam * exp(-||c_p - c_q||^2 / (2 beta_bar)). A constant
    image (beta_bar == 0) degenerates to uniform weights lam.
    """
    c = img.astype(np.float64)
    dh = ((c[:, 1:] - c[:, :-1]) ** 2).sum(axis=2)
    dv = ((c[1:, :] - c[:-1, :]) ** 2).sum(axis=2)
    total = dh.sum() + dv.sum()
    count = dh.size + dv.size
    beta_bar = total / count
    if beta_bar <= 1e-12:
        return 0.0, np.full_like(dh, lam), np.full_like(dv, lam)
    return beta_bar, lam * np.exp(-dh / (2 * beta_bar)), lam * np.exp(-dv / (2 * beta_bar))


def segmentation_energy(img: np.ndarray, labels: np.ndarray, fg: Gmm, bg: Gmm,
                        rect, lam: float = 50.0) -> float:
    """Energy of a labeling: best-component GMM data terms over all pixels
    plus contrast-weighted smoothness over 4-neighbour pairs inside the rect.
    """
    h, w = labels.shape
    colors = img.reshape(-1, 3).astype(np.float64)
    flat = labels.reshape(-1)
    e = 0.0
    if flat.any():
        e += fg.neglog_best(colors[flat]).sum()
    if (~flat).any():
        e += bg.neglog_best(colors[~flat]).sum()
    _, wh, wv = _pairwise_weights(img, lam)
    x0, y0, x1, y1 = rect
    inside = np.zeros((h, w), dtype=bool)
    inside[y0:y1, x0:x1] = True
    diff_h = (labels[:, 1:] != labels[:, :-1]) & inside[:, 1:] & inside[:, :-1]
    diff_v = (labels[1:, :] != labels[:-1, :]) & inside[1:, :] & inside[:-1, :]
    e += wh[diff_h].sum() + wv[diff_v].sum()
    return float(e)


def _hard_refit(pixels: np.ndarray, gmm: Gmm) -> Gmm:
    """One hard-assignment + ML-refit step; revert if it cannot improve the
    best-component energy of these pixels (can happen via the ridge)."""
    before = gmm.neglog_best(pixels).sum()
    labels = gmm.component_neglog(pixels).argmin(axis=1)
    new = _component_stats(pixels, labels, gmm.k, prev=gmm)
    after = new.neglog_best(pixels).sum()
    return new if after <= before else gmm


def grabcut_lite(img: np.ndarray, init_rect, iters: int = 5, seed: int = 0,
                 n_components: int = 5, lam: float = 50.0,
                 return_history: bool = False):
    """Iterated GMM + min-cut foreground extraction.

    ``init_rect`` is (x0, y0, x1, y1), half-open; pixels outside it are fixed
    background. Interior pixels start as foreground. Each iteration refits the
    two color models on the current regions and re-solves the min-cut; the new
    labeling is accepted only if its energy strictly decreases, so the energy
    trace is non-increasing by construction. Smoothness is counted between
    pixel pairs inside the rect; with tied data terms the initial labeling
    therefore survives.
    """
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"expected (H, W, 3) image, got {img.shape}")
    h, w = img.shape[:2]
    x0, y0, x1, y1 = init_rect
    if not (0 <= x0 < x1 <= w and 0 <= y0 < y1 <= h):
        raise ValueError(f"degenerate or out-of-bounds init_rect {init_rect} "
                         f"for {w}x{h} image")
    if iters < 1:
        raise ValueError("iters must be >= 1")
    inside = np.zeros((h, w), dtype=bool)
    inside[y0:y1, x0:x1] = True
    if inside.all():
        raise ValueError("init_rect must leave a background margin")

    colors = img.reshape(-1, 3).astype(np.float64)
    labels = inside.copy()
    k_fg = min(n_components, int(inside.sum()))
    k_bg = min(n_components, int((~inside).sum()))
    fg = gmm_fit(colors[labels.reshape(-1)], k_fg, iters=5, seed=seed)
    bg = gmm_fit(colors[~labels.reshape(-1)], k_bg, iters=5, seed=seed + 1)

    beta_bar, wh, wv = _pairwise_weights(img, lam)
    energy = segmentation_energy(img, labels, fg, bg, init_rect, lam)
    history = [GrabcutState(labels.copy(), fg, bg, energy)]

    # graph over interior pixels only; data terms are clipped so capacities
    # stay finite when a color is impossible under one model
    idx = -np.ones((h, w), dtype=np.int64)
    ys, xs = np.nonzero(inside)
    idx[ys, xs] = np.arange(len(ys))
    n_unknown = len(ys)

    for _ in range(iters):
        fg = _hard_refit(colors[labels.reshape(-1)], fg)
        bg = _hard_refit(colors[~labels.reshape(-1)], bg)
        energy = segmentation_energy(img, labels, fg, bg, init_rect, lam)

        d_fg = np.clip(fg.neglog_best(colors[inside.reshape(-1)]), -1e8, 1e8)
        d_bg = np.clip(bg.neglog_best(colors[inside.reshape(-1)]), -1e8, 1e8)
        # capacities must be non-negative; shifting both terminal links of a
        # pixel by the same amount leaves the optimal cut unchanged
        shift = np.minimum(np.minimum(d_fg, d_bg), 0.0)
        d_fg = d_fg - shift
        d_bg = d_bg - shift
        net = FlowNetwork(n_unknown + 2, n_unknown, n_unknown + 1)
        s, t = n_unknown, n_unknown + 1
        for p in range(n_unknown):
            if d_bg[p] > 0:
                net.add_edge(s, p, d_bg[p])     # cut when labeled background
            if d_fg[p] > 0:
                net.add_edge(p, t, d_fg[p])     # cut when labeled foreground
        for r in range(h):
            for c in range(w - 1):
                a, b = idx[r, c], idx[r, c + 1]
                if a >= 0 and b >= 0 and wh[r, c] > 0:
                    net.add_edge(a, b, wh[r, c])
                    net.add_edge(b, a, wh[r, c])
        for r in range(h - 1):
            for c in range(w):
                a, b = idx[r, c], idx[r + 1, c]
                if a >= 0 and b >= 0 and wv[r, c] > 0:
                    net.add_edge(a, b, wv[r, c])
                    net.add_edge(b, a, wv[r, c])

        _, source_side = max_flow_min_cut(net)
        new_labels = np.zeros((h, w), dtype=bool)
        keep = np.array([p in source_side for p in range(n_unknown)])
        new_labels[ys[keep], xs[keep]] = True

        new_energy = segmentation_energy(img, new_labels, fg, bg, init_rect, lam)
        if new_energy < energy - 1e-9:
            labels = new_labels
            energy = new_energy
            history.append(GrabcutState(labels.copy(), fg, bg, energy))
        else:
            # the cut could not strictly improve: keep the current labeling
            history.append(GrabcutState(labels.copy(), fg, bg, energy))
            break

    if return_history:
        return labels, history
    return labels


# ---------------------------------------------------------------------------
# connected components

def largest_connected_component(mask: np.ndarray):
    """Largest 4-connected component of a boolean mask.

    Returns (component mask, bbox (r0, c0, r1, c1) inclusive, centroid
    (row, col) = bbox center), or None for an all-false mask. Ties on size go
    to the component whose lexicographically smallest (row, col) pixel comes
    first in scan order.
    """
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        return None
    h, w = mask.shape
    visited = np.zeros_like(mask)
    best = None                      # (size, seed, pixels)
    for r0 in range(h):
        for c0 in range(w):
            if not mask[r0, c0] or visited[r0, c0]:
                continue
            q = deque([(r0, c0)])
            visited[r0, c0] = True
            pixels = [(r0, c0)]
            while q:
                r, c = q.popleft()
                for rr, cc in ((r - 1, c), (r + 1, c), (r, c - 1), (r, c + 1)):
                    if 0 <= rr < h and 0 <= cc < w and mask[rr, cc] and not visited[rr, cc]:
                        visited[rr, cc] = True
                        q.append((rr, cc))
                        pixels.append((rr, cc))
            if best is None or len(pixels) > best[0]:
                best = (len(pixels), (r0, c0), pixels)
    _, _, pixels = best
    comp = np.zeros_like(mask)
    rows = np.array([p[0] for p in pixels])
    cols = np.array([p[1] for p in pixels])
    comp[rows, cols] = True
    bbox = (int(rows.min()), int(cols.min()), int(rows.max()), int(cols.max()))
    centroid = ((bbox[0] + bbox[2]) / 2.0, (bbox[1] + bbox[3]) / 2.0)
    return comp, bbox, centroid


# ---------------------------------------------------------------------------
# k-means

@dataclass
class KmeansResult:
    labels: np.ndarray        # (n,) cluster index per point
    centroids: np.ndarray     # (K, d)
    inertia: float
    inertia_trace: list[float] = field(default_factory=list)

    def members(self, k: int) -> np.ndarray:
        return np.nonzero(self.labels == k)[0]


def kmeans(points: np.ndarray, k: int, seed: int = 0,
           max_iter: int = 100) -> KmeansResult:
    """Lloyd's algorithm with k-means++ initialization.

    Deterministic given the seed. Point-to-centroid ties break toward the
    lowest cluster index; an empty cluster steals the point currently
    farthest from its assigned centroid. Stops at an assignment fixpoint or
    after ``max_iter`` sweeps.
    """
    x = np.atleast_2d(np.asarray(points, dtype=np.float64))
    n = len(x)
    if n < k:
        raise ValueError(f"kmeans: {n} points < k={k}")
    rng = np.random.default_rng(seed)

    centroids = np.empty((k, x.shape[1]))
    centroids[0] = x[rng.integers(n)]
    d2 = ((x - centroids[0]) ** 2).sum(axis=1)
    for j in range(1, k):
        total = d2.sum()
        if total <= 0:
            centroids[j] = x[rng.integers(n)]
        else:
            centroids[j] = x[rng.choice(n, p=d2 / total)]
        d2 = np.minimum(d2, ((x - centroids[j]) ** 2).sum(axis=1))

    labels = np.full(n, -1, dtype=np.int64)
    trace: list[float] = []
    for _ in range(max_iter):
        dist = ((x[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
        new_labels = dist.argmin(axis=1)          # argmin -> lowest index on ties
        for j in range(k):
            if not (new_labels == j).any():
                # steal the worst-fit point, but never from a singleton cluster
                assigned = dist[np.arange(n), new_labels]
                counts = np.bincount(new_labels, minlength=k)
                donors = np.nonzero(counts[new_labels] > 1)[0]
                worst = donors[int(assigned[donors].argmax())]
                new_labels[worst] = j
        if (new_labels == labels).all():
            break
        labels = new_labels
        for j in range(k):
            centroids[j] = x[labels == j].mean(axis=0)
        trace.append(float(((x - centroids[labels]) ** 2).sum()))
    inertia = float(((x - centroids[labels]) ** 2).sum())
    return KmeansResult(labels=labels, centroids=centroids, inertia=inertia,
                        inertia_trace=trace)


# ---------------------------------------------------------------------------
# channel binarization

def binarize_channel(chan: np.ndarray, rel_threshold: float = 0.5) -> np.ndarray:
    """Threshold a 2-D activation map at rel_threshold * max.

    For non-positive maps the argmax pixels stay on, so the result is
    all-false only for a constant map <= 0.
    """
    if not (0.0 < rel_threshold < 1.0):
        raise ValueError(f"rel_threshold must be in (0, 1), got {rel_threshold}")
    chan = np.asarray(chan, dtype=np.float64)
    m = chan.max()
    if m > 0:
        return chan >= rel_threshold * m
    if (chan == chan.reshape(-1)[0]).all():
        return np.zeros(chan.shape, dtype=bool)
    return chan == m


# ---------------------------------------------------------------------------
# PNG I/O

def read_png(path) -> np.ndarray:
    return np.asarray(Image.open(path).convert("RGB"), dtype=np.uint8)


def write_png(path, img: np.ndarray):
    arr = np.asarray(img)
    if arr.dtype != np.uint8:
        arr = np.clip(arr, 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path, format="PNG")


def write_mask_png(path, mask: np.ndarray):
    Image.fromarray(np.where(np.asarray(mask, bool), 255, 0).astype(np.uint8),
                    mode="L").save(path, format="PNG")


def read_mask_png(path) -> np.ndarray:
    return np.asarray(Image.open(path).convert("L")) >= 128
