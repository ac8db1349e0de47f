"""Subsequence sampling for radius/length analyses on long sequences."""

from __future__ import annotations

from typing import NamedTuple

import numpy as np

WINDOW_SIZES = {
    1: (4, 8, 16, 32, 64, 128),
    2: (4, 8, 16, 32, 64),
    4: (4, 8, 16, 32),
}


class Window(NamedTuple):
    center: int
    stride: int
    length: int
    start: int

    @property
    def frames(self) -> list[int]:
        return list(range(self.start, self.start + self.stride * self.length, self.stride))


def sample_centers(n_frames: int, seed: int = 0, block: int = 200, margin: int = 64) -> list[int]:
    """One random center per ``block`` frames.

    Centers are drawn from ``[b + margin, e - margin)`` inside each block
    ``[b, e)``; blocks too short for that range use their midpoint.
    """
    rng = np.random.default_rng(seed)
    centers = []
    for b in range(0, n_frames, block):
        e = min(b + block, n_frames)
        lo, hi = b + margin, e - margin
        centers.append(int(rng.integers(lo, hi)) if hi > lo else (b + e) // 2)
    return centers


def sample_subsequences(n_frames: int, seed: int = 0, block: int = 200, margin: int = 64) -> list[Window]:
    """Windows around each sampled center; windows leaving ``[0, n_frames)`` are dropped."""
    smallest = min(min(v) for v in WINDOW_SIZES.values())
    if n_frames < smallest:
        raise ValueError(f"sequence shorter than the smallest window ({smallest})")
    out = []
    for c in sample_centers(n_frames, seed, block, margin):
        for stride, sizes in WINDOW_SIZES.items():
            for length in sizes:
                span = stride * (length - 1) + 1
                start = c - span // 2
                if start >= 0 and start + span <= n_frames:
                    out.append(Window(c, stride, length, start))
    return out
