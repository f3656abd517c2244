"""Slow, obviously-correct reference implementations used only by tests."""

from __future__ import annotations

import math

import numpy as np


def boundary_points(mask: np.ndarray) -> list[tuple[int, int]]:
    h, w = mask.shape
    pts = []
    for i in range(h):
        for j in range(w):
            if not mask[i, j]:
                continue
            for di, dj in ((-1, 0), (1, 0), (0, -1), (0, 1)):
                y, x = i + di, j + dj
                if not (0 <= y < h and 0 <= x < w) or not mask[y, x]:
                    pts.append((i, j))
                    break
    return pts


def nearest(p: tuple[int, int], pts: list[tuple[int, int]]) -> float:
    return min(math.sqrt((p[0] - q[0]) ** 2 + (p[1] - q[1]) ** 2) for q in pts)


def nsd_brute(a: np.ndarray, b: np.ndarray, tau: float) -> float:
    ba, bb = boundary_points(a), boundary_points(b)
    if not ba and not bb:
        return 1.0
    if not ba or not bb:
        return 0.0
    hits = sum(nearest(p, bb) <= tau for p in ba) + sum(nearest(q, ba) <= tau for q in bb)
    return hits / (len(ba) + len(bb))


def assd_brute(a: np.ndarray, b: np.ndarray) -> float:
    ba, bb = boundary_points(a), boundary_points(b)
    total = sum(nearest(p, bb) for p in ba) + sum(nearest(q, ba) for q in bb)
    return total / (len(ba) + len(bb))


def edt_sq_brute(features: np.ndarray) -> np.ndarray:
    ys, xs = np.nonzero(features)
    h, w = features.shape
    out = np.empty((h, w))
    for i in range(h):
        for j in range(w):
            out[i, j] = ((ys - i) ** 2 + (xs - j) ** 2).min()
    return out


def random_mask(rng: np.random.Generator, max_size: int = 32, p: float | None = None) -> np.ndarray:
    h, w = rng.integers(1, max_size + 1, size=2)
    p = rng.uniform(0.05, 0.9) if p is None else p
    return (rng.random((h, w)) < p).astype(np.uint8)


def random_pair(rng: np.random.Generator, max_size: int = 32) -> tuple[np.ndarray, np.ndarray]:
    h, w = rng.integers(1, max_size + 1, size=2)
    a = (rng.random((h, w)) < rng.uniform(0.05, 0.9)).astype(np.uint8)
    b = (rng.random((h, w)) < rng.uniform(0.05, 0.9)).astype(np.uint8)
    return a, b


def blob_pair(rng: np.random.Generator, size: int = 32) -> tuple[np.ndarray, np.ndarray]:
    """Two overlapping discs; closer to real segmentations than salt-and-pepper noise."""
    yy, xx = np.mgrid[0:size, 0:size]
    out = []
    for _ in range(2):
        cy, cx = rng.uniform(size * 0.3, size * 0.7, size=2)
        r = rng.uniform(2, size * 0.3)
        out.append(((yy - cy) ** 2 + (xx - cx) ** 2 <= r * r).astype(np.uint8))
    return out[0], out[1]
