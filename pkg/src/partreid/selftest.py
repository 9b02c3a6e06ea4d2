"""Quick built-in verification: gradient checks for every differentiable
block plus brute-force oracles for the classical algorithms. Much smaller
than the test suite, but covers the same ground; meant for `partreid
selftest` in a fresh install."""

from __future__ import annotations

import numpy as np

from . import autograd as ag
from . import evaluation, nn, vision
from .autograd import Tensor, grad_check
from .panet import PartMaskSet, pcr
from .pmnet import Mam, PartStream, teacher_input, part_transfer_loss
from .training import HulState, hul_combine, triplet_loss_batch_hard


def _check(name: str, ok: bool, detail: str = "") -> bool:
    print(f"[{'PASS' if ok else 'FAIL'}] {name}" + (f" ({detail})" if detail else ""))
    return ok


def _grad_checks() -> bool:
    ok = True
    rng = np.random.default_rng(0)

    x = Tensor(rng.standard_normal((2, 3, 6, 6)), dtype=np.float64)
    rep = grad_check(lambda: ag.tsum(ag.mul(pcr(x), pcr(x))), {"x": x}, 1e-4)
    ok &= _check("grad: channel recalibration", rep.passed, str(rep.deviations["x"]))

    mam = Mam(6, np.random.default_rng(1), dtype=np.float64)
    xm = Tensor(rng.standard_normal((2, 6, 5, 5)), dtype=np.float64)
    params = {"x": xm, **dict(mam.named_parameters())}
    rep = grad_check(lambda: ag.tsum(ag.mul(mam(xm), mam(xm))), params, 1e-4)
    ok &= _check("grad: multi-scale attention", rep.passed)

    ms = PartMaskSet("t", np.zeros((1, 8, 8), bool), [(0, 1, 2, 3)],
                     np.zeros((1, 2)), (4, 4))
    ms.masks[0][2:7, 2:8] = True
    xt = Tensor(rng.standard_normal((1, 3, 4, 4)), dtype=np.float64)
    rep = grad_check(lambda: ag.tsum(ag.mul(teacher_input(xt, [ms], 0),
                                            teacher_input(xt, [ms], 0))),
                     {"x": xt}, 1e-4)
    ok &= _check("grad: teacher input", rep.passed)

    xp = Tensor(rng.standard_normal((2, 3, 4, 4)), dtype=np.float64)
    rep = grad_check(lambda: ag.tsum(ag.mul(ag.global_max_pool(xp),
                                            ag.global_max_pool(xp))),
                     {"x": xp}, 1e-4)
    ok &= _check("grad: masked/global max pooling", rep.passed)

    sa = Tensor(rng.standard_normal((2, 2, 3, 3)), dtype=np.float64)
    sb = Tensor(rng.standard_normal((2, 2, 3, 3)), dtype=np.float64)
    rep = grad_check(lambda: part_transfer_loss([sa], [sb]), {"a": sa, "b": sb},
                     1e-4)
    ok &= _check("grad: part transfer loss", rep.passed)

    hul = HulState(dtype=np.float64)
    la = Tensor(np.array(0.7), dtype=np.float64)
    lb = Tensor(np.array(1.3), dtype=np.float64)
    lc = Tensor(np.array(0.2), dtype=np.float64)
    rep = grad_check(lambda: hul_combine(la, lb, lc, hul),
                     dict(hul.named_parameters()), 1e-4)
    ok &= _check("grad: uncertainty weighting", rep.passed)

    stream = PartStream(4, 6, 5, np.random.default_rng(2), dtype=np.float64)
    xs = Tensor(rng.standard_normal((2, 4, 4, 4)), dtype=np.float64)
    rep = grad_check(
        lambda: ag.tsum(ag.mul(stream.student(stream.stream_map(xs))[0],
                               stream.student(stream.stream_map(xs))[0])),
        {"x": xs, **dict(stream.named_parameters())}, 1e-4)
    ok &= _check("grad: part stream head", rep.passed)
    return ok


def _oracles() -> bool:
    ok = True
    rng = np.random.default_rng(42)

    good = 0
    for trial in range(20):
        n = int(rng.integers(4, 9))
        net = vision.FlowNetwork(n, 0, n - 1)
        for _ in range(int(rng.integers(n, 3 * n))):
            u, v = rng.integers(0, n, 2)
            if u != v:
                net.add_edge(int(u), int(v), float(rng.uniform(0, 10)))
        flow, _ = vision.max_flow_min_cut(net)
        best = np.inf
        for bits in range(2 ** (n - 2)):
            side = {0}
            for b in range(n - 2):
                if bits >> b & 1:
                    side.add(b + 1)
            cap = sum(net.cap[a] for u in side for a in net.adj[u]
                      if a % 2 == 0 and net.to[a] not in side)
            best = min(best, cap)
        good += abs(flow - best) < 1e-9
    ok &= _check("oracle: min-cut vs brute force", good == 20, f"{good}/20")

    good = 0
    for trial in range(20):
        mask = rng.random((9, 9)) < 0.4
        got = vision.largest_connected_component(mask)
        comps = _flood_components(mask)
        if not comps:
            good += got is None
            continue
        comps.sort(key=lambda c: (-len(c), min(c)))
        want = set(comps[0])
        good += got is not None and set(zip(*np.nonzero(got[0]))) == want
    ok &= _check("oracle: largest component vs flood fill", good == 20, f"{good}/20")

    good = 0
    for trial in range(20):
        emb = rng.standard_normal((8, 4))
        labels = rng.integers(0, 3, 8)
        if len(np.unique(labels)) < 2:
            good += 1
            continue
        loss = triplet_loss_batch_hard(Tensor(emb, dtype=np.float64), labels,
                                       0.7).item()
        want = _triplet_oracle(emb, labels, 0.7)
        good += abs(loss - want) < 1e-9
    ok &= _check("oracle: batch-hard triplet", good == 20, f"{good}/20")

    good = 0
    for trial in range(20):
        d = rng.random((4, 7))
        q_ids = rng.integers(0, 3, 4)
        g_ids = rng.integers(0, 3, 7)
        if not all((g_ids == qi).any() for qi in q_ids):
            good += 1
            continue
        dist = evaluation.DistanceMatrix(d, q_ids, g_ids)
        m, _, _ = evaluation.compute_map(dist)
        cmc = evaluation.compute_cmc(dist)
        m2, c1, c5 = _retrieval_oracle(d, q_ids, g_ids)
        good += (m == m2 and cmc[1] == c1 and cmc[5] == c5)
    ok &= _check("oracle: mAP/CMC vs direct scoring", good == 20, f"{good}/20")
    return ok


def _flood_components(mask):
    h, w = mask.shape
    seen = np.zeros_like(mask)
    comps = []
    for r in range(h):
        for c in range(w):
            if mask[r, c] and not seen[r, c]:
                stack = [(r, c)]
                seen[r, c] = True
                comp = []
                while stack:
                    y, x = stack.pop()
                    comp.append((y, x))
                    for yy, xx in ((y + 1, x), (y - 1, x), (y, x + 1), (y, x - 1)):
                        if 0 <= yy < h and 0 <= xx < w and mask[yy, xx] \
                                and not seen[yy, xx]:
                            seen[yy, xx] = True
                            stack.append((yy, xx))
                comps.append(comp)
    return comps


def _triplet_oracle(emb, labels, margin):
    import math

    total, count = 0.0, 0
    for a in range(len(emb)):
        pos = [j for j in range(len(emb))
               if labels[j] == labels[a] and j != a]
        neg = [j for j in range(len(emb)) if labels[j] != labels[a]]
        if not pos or not neg:
            continue
        dp = max(math.sqrt(sum((emb[a] - emb[j]) ** 2) + 1e-12) for j in pos)
        dn = min(math.sqrt(sum((emb[a] - emb[j]) ** 2) + 1e-12) for j in neg)
        total += max(0.0, dp - dn + margin)
        count += 1
    return total / count


def _retrieval_oracle(d, q_ids, g_ids):
    aps, c1, c5, valid = [], 0, 0, 0
    for qi in range(len(q_ids)):
        order = np.argsort(d[qi], kind="stable")
        rel = [g_ids[j] == q_ids[qi] for j in order]
        if not any(rel):
            continue
        valid += 1
        hits, ap = 0, 0.0
        for rank, r in enumerate(rel, 1):
            if r:
                hits += 1
                ap += hits / rank
        aps.append(ap / hits)
        first = rel.index(True) + 1
        c1 += first <= 1
        c5 += first <= 5
    return sum(aps) / len(aps), c1 / valid, c5 / valid


def run_selftest() -> int:
    ok = _grad_checks()
    ok &= _oracles()
    print("selftest:", "OK" if ok else "FAILED")
    return 0 if ok else 2
