"""Scalar-loop reference implementations used as independent test oracles.

Plain Python over nested lists/arrays, no vectorised numpy or torch ops, so
they share no code path with the library.
"""

from __future__ import annotations

import itertools
import math


def masked_mae(images, recon, patch_mask, ps):
    """images/recon: [B][C][H][W]; patch_mask: [B][gh][gw] booleans."""
    per_image = []
    for b in range(len(images)):
        total, count = 0.0, 0
        for c in range(len(images[b])):
            for y in range(len(images[b][c])):
                for x in range(len(images[b][c][y])):
                    if patch_mask[b][y // ps][x // ps]:
                        total += abs(float(images[b][c][y][x]) - float(recon[b][c][y][x]))
                        count += 1
        per_image.append(total / count)
    return sum(per_image) / len(per_image)


def dice(pred, target, eps=1.0):
    inter = s_p = s_t = 0.0
    for p, t in zip(pred, target):
        inter += p * t
        s_p += p
        s_t += t
    return 1.0 - (2.0 * inter + eps) / (s_p + s_t + eps)


def bce(pred, target, clamp=1e-7):
    total = 0.0
    for p, t in zip(pred, target):
        p = min(max(p, clamp), 1.0 - clamp)
        total += -(t * math.log(p) + (1.0 - t) * math.log(1.0 - p))
    return total / len(pred)


def entropy_conf(p, base=2.0, clamp=1e-7):
    p = min(max(p, clamp), 1.0 - clamp)
    q = 1.0 - p
    return 1.0 + (p * math.log(p) + q * math.log(q)) / math.log(base)


def margin_conf(p):
    hi, lo = max(p, 1 - p), min(p, 1 - p)
    return hi - lo


def fuse_image(pg, pc, strategy, base=2.0):
    """pg/pc: flat lists of one image's pixels; per-image min-max normalisation."""
    if strategy == "average":
        return [0.5 * (a + b) for a, b in zip(pg, pc)]
    conf = entropy_conf if strategy == "entropy" else margin_conf

    def norm(vals):
        lo, hi = min(vals), max(vals)
        if hi == lo:
            return [1.0] * len(vals)
        return [(v - lo) / (hi - lo) for v in vals]

    cg = norm([conf(p, base) if strategy == "entropy" else conf(p) for p in pg])
    cc = norm([conf(p, base) if strategy == "entropy" else conf(p) for p in pc])
    return [0.5 * (a * x + b * y) for a, x, b, y in zip(pg, cg, pc, cc)]


def temporal_mask(videos, frames, dt):
    """Enumerate the mask definition entry by entry over the 2B ordering."""
    b = len(videos)
    vids = list(videos) + list(videos)
    frs = list(frames) + list(frames)
    out = [[False] * (2 * b) for _ in range(2 * b)]
    for k in range(2 * b):
        for l in range(2 * b):
            positive = l == (k + b) % (2 * b)
            if k == l:
                out[k][l] = True
            elif vids[k] == vids[l] and abs(frs[k] - frs[l]) < dt and not positive:
                out[k][l] = True
    return out


def nt_xent(z, zp, tau):
    """Reference SimCLR NT-Xent: each row excludes only itself from the denominator."""
    allz = [list(map(float, r)) for r in z] + [list(map(float, r)) for r in zp]
    n = len(allz)
    b = n // 2
    total = 0.0
    for k in range(n):
        sims = [sum(a * c for a, c in zip(allz[k], allz[l])) / tau for l in range(n)]
        pos = sims[(k + b) % n]
        m = max(sims[l] for l in range(n) if l != k)
        denom = sum(math.exp(sims[l] - m) for l in range(n) if l != k)
        total += -(pos - m - math.log(denom))
    return total / n


def mt_nxent(z, zp, videos, frames, tau, dt):
    allz = [list(map(float, r)) for r in z] + [list(map(float, r)) for r in zp]
    n = len(allz)
    b = n // 2
    mask = temporal_mask(videos, frames, dt)
    total = 0.0
    for k in range(n):
        keep = [l for l in range(n) if not mask[k][l]]
        sims = {l: sum(a * c for a, c in zip(allz[k], allz[l])) / tau for l in keep}
        m = max(sims.values())
        denom = sum(math.exp(v - m) for v in sims.values())
        total += -(sims[(k + b) % n] - m - math.log(denom))
    return total / n


def wilcoxon_enumeration(diffs):
    """Two-sided exact p by brute force over all 2^n sign assignments of the ranks."""
    d = [x for x in diffs if x != 0]
    absd = sorted(abs(x) for x in d)
    ranks = {}
    i = 0
    while i < len(absd):
        j = i
        while j + 1 < len(absd) and absd[j + 1] == absd[i]:
            j += 1
        ranks[absd[i]] = (i + 1 + j + 1) / 2.0
        i = j + 1
    r = [ranks[abs(x)] for x in d]
    w_obs = sum(rk for rk, x in zip(r, d) if x > 0)
    n = len(r)
    le = ge = 0
    for signs in itertools.product((0, 1), repeat=n):
        w = sum(rk for rk, s in zip(r, signs) if s)
        if w <= w_obs + 1e-9:
            le += 1
        if w >= w_obs - 1e-9:
            ge += 1
    return min(1.0, 2.0 * min(le, ge) / 2**n)
