"""Independent reference implementations used as test oracles.

These deliberately avoid the package's own helpers: plain loops, exact
fractions and shapely geometry, so agreement is evidence rather than echo.
"""
from fractions import Fraction
import math

import numpy as np


# ---------------------------------------------------------------------------
# Attention
# ---------------------------------------------------------------------------

def scalar_qgab(x, y, w1, w2):
    """Loop implementation of one attention pass on numpy arrays.

    ``x`` (C,H,W) is attended, ``y`` (C,H',W') guides, ``w1``/``w2`` are
    (C',C) projection matrices. Returns (refined, attention, affinity).
    """
    c, h, w = x.shape
    _, hq, wq = y.shape
    cp = w1.shape[0]
    keys = [[sum(w1[k, j] * x[j, r, s] for j in range(c)) for k in range(cp)]
            for r in range(h) for s in range(w)]
    guides = [[sum(w2[k, j] * y[j, r, s] for j in range(c)) for k in range(cp)]
              for r in range(hq) for s in range(wq)]
    aff = np.zeros((h * w, hq * wq))
    att = np.zeros((h, w))
    for p, kp in enumerate(keys):
        logits = [sum(a * b for a, b in zip(kp, g)) for g in guides]
        top = max(logits)
        ex = [math.exp(v - top) for v in logits]
        z = sum(ex)
        aff[p] = [e / z for e in ex]
        att[p // w, p % w] = max(aff[p])
    refined = np.empty_like(x)
    for j in range(c):
        refined[j] = att * x[j] + x[j]
    return refined, att, aff


# ---------------------------------------------------------------------------
# Feature corruption
# ---------------------------------------------------------------------------

def cell_span(lo, hi, n):
    return math.floor(lo * n + 0.5), math.floor(hi * n + 0.5)


def corrupt_oracle(query, sampled, boxes, z_order, out_shape):
    """Cell-by-cell placement: box 0 gets ``query``, box 1 ``sampled``.

    ``boxes`` are (x0, y0, x1, y1). Every output cell is visited and the
    topmost covering box (last in ``z_order``) decides its source pixel by
    nearest-neighbour lookup.
    """
    c, sh, sw = query.shape
    h, w = out_shape
    spans = []
    for x0, y0, x1, y1 in boxes[:2]:
        r0, r1 = cell_span(y0, y1, h)
        c0, c1 = cell_span(x0, x1, w)
        spans.append((r0, r1, c0, c1))
    out = np.zeros((c, h, w), dtype=query.dtype)
    srcs = (query, sampled)
    for r in range(h):
        for s in range(w):
            owner = None
            for slot in z_order:
                if slot > 1:
                    continue
                r0, r1, c0, c1 = spans[slot]
                if r0 <= r < r1 and c0 <= s < c1:
                    owner = slot
            if owner is None:
                continue
            r0, r1, c0, c1 = spans[owner]
            sr = ((r - r0) * sh) // (r1 - r0)
            sc = ((s - c0) * sw) // (c1 - c0)
            out[:, r, s] = srcs[owner][:, sr, sc]
    return out


# ---------------------------------------------------------------------------
# Retrieval metrics
# ---------------------------------------------------------------------------

def brute_ranking(scores):
    """Indices sorted by descending score, ties to the lower index (selection sort)."""
    remaining = list(range(len(scores)))
    order = []
    while remaining:
        best = remaining[0]
        for i in remaining[1:]:
            if scores[i] > scores[best]:
                best = i
        order.append(best)
        remaining.remove(best)
    return order


def brute_ap(match_flags) -> Fraction:
    """Exact AP from ranked match flags: mean precision at each hit."""
    hits, total = 0, Fraction(0)
    for rank, m in enumerate(match_flags, start=1):
        if m:
            hits += 1
            total += Fraction(hits, rank)
    return total / hits


def brute_cmc(ranked_flags_per_query, max_rank):
    """Exact CMC by counting, for every k, queries with a hit in the top k."""
    valid = [f for f in ranked_flags_per_query if any(f)]
    out = []
    for k in range(1, max_rank + 1):
        hit = sum(1 for f in valid if any(f[:k]))
        out.append(Fraction(hit, len(valid)))
    return out


# ---------------------------------------------------------------------------
# Geometry
# ---------------------------------------------------------------------------

def shapely_pi_criteria(crop, boxes) -> bool:
    """The multi-person crop selection rules evaluated with shapely polygons."""
    from shapely.geometry import box as sbox

    cpoly = sbox(*crop)
    polys = [sbox(*b) for b in boxes]
    for p in polys:
        inside = p.intersection(cpoly).area
        if inside < 0.7 * p.area - 1e-12 or inside < 0.3 * cpoly.area - 1e-12:
            return False
    for i, p in enumerate(polys):
        if not any(i != j and p.intersection(q).area > 0 for j, q in enumerate(polys)):
            return False
    return True


def central_difference(f, x, eps=1e-6):
    """Numerical gradient of scalar ``f`` at float64 array ``x``."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + eps
        fp = f(x)
        x[i] = old - eps
        fm = f(x)
        x[i] = old
        g[i] = (fp - fm) / (2 * eps)
    return g
