"""Slow, loop-based reference implementations used as test oracles.

They deliberately avoid the package's vectorised helpers and work on plain
Python lists of ``(track_id, row, col, height)`` points.
"""

import math


def pinball(tau, y, yhat):
    if yhat <= y:
        return tau * (y - yhat)
    return (1 - tau) * (yhat - y)


def sparse_pinball(tau, pts, grid):
    total = 0.0
    for _, r, c, y in pts:
        total += pinball(tau, y, grid[r][c])
    return total / len(pts)


def multi_quantile(taus, pts, grids):
    return sum(sparse_pinball(t, pts, g) for t, g in zip(taus, grids)) / len(taus)


def shift_loss(taus, pts, grids, h, w):
    by_track = {}
    for p in pts:
        by_track.setdefault(p[0], []).append(p)
    per_track = []
    for tid in sorted(by_track):
        best = math.inf
        for dr in (-1, 0, 1):
            for dc in (-1, 0, 1):
                moved = [(t, r + dr, c + dc, y) for t, r, c, y in by_track[tid]
                         if 0 <= r + dr < h and 0 <= c + dc < w]
                if moved:
                    best = min(best, multi_quantile(taus, moved, grids))
        per_track.append(best)
    return sum(per_track) / len(per_track)


def pearson(x, y):
    n = len(x)
    mx = sum(x) / n
    my = sum(y) / n
    sxy = sum((a - mx) * (b - my) for a, b in zip(x, y))
    sxx = sum((a - mx) ** 2 for a in x)
    syy = sum((b - my) ** 2 for b in y)
    return sxy / math.sqrt(sxx * syy)


def border_mask(grid, threshold):
    h, w = len(grid), len(grid[0])
    out = [[False] * w for _ in range(h)]
    for i in range(h):
        for j in range(w):
            vals = [grid[a][b] for a in range(max(0, i - 1), min(h, i + 2))
                    for b in range(max(0, j - 1), min(w, j + 2))]
            out[i][j] = max(vals) - min(vals) > threshold
    return out


def empirical_quantile(sample, tau):
    """Inverse of the empirical CDF: smallest x with F(x) >= tau."""
    s = sorted(sample)
    k = max(0, math.ceil(tau * len(s)) - 1)
    return s[k]
