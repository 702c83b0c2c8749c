"""Source view selection: top-V frames by squared extrinsic-matrix distance."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .geometry import Pose


class SelectionError(ValueError):
    pass


@dataclass(frozen=True)
class SourceSet:
    indices: tuple  # V distinct frame indices, by ascending distance
    distances: tuple  # matching non-negative distances, ascending

    def __post_init__(self):
        if len(set(self.indices)) != len(self.indices):
            raise SelectionError("source indices must be distinct")
        if any(b < a for a, b in zip(self.distances, self.distances[1:])):
            raise SelectionError("distances must be ascending")


def extrinsic_distance(a: Pose, b: Pose) -> float:
    """Squared Frobenius norm of the difference of the 3x4 world-to-camera matrices."""
    d = a.extrinsic3x4 - b.extrinsic3x4
    return float(np.sum(d * d))


def select_sources(target: Pose, pool, v: int, exclude: int | None = None,
                   stratified_rings: int | None = None) -> SourceSet:
    """The V pool frames nearest to `target` under `extrinsic_distance`.

    `pool` is a sequence of CameraFrame (or anything with .pose). Ties break
    toward the lower frame index. With `stratified_rings` set, at most
    ceil(V / ring_count) frames are taken per altitude ring (experimental
    mode, off by default).
    """
    available = len(pool) - (1 if exclude is not None else 0)
    if v < 1:
        raise SelectionError(f"V must be >= 1, got {v}")
    if v > available:
        raise SelectionError(f"V={v} exceeds the {available} available pool frames")

    dists = [(extrinsic_distance(target, f.pose), i)
             for i, f in enumerate(pool) if i != exclude]
    dists.sort()  # (distance, index): index is the documented tie-break

    if stratified_rings is not None and stratified_rings > 0:
        cap = math.ceil(v / stratified_rings)
        per_ring: dict = {}
        picked = []
        for d, i in dists:
            ring = getattr(pool[i], "altitude_tag", 0)
            if per_ring.get(ring, 0) < cap:
                per_ring[ring] = per_ring.get(ring, 0) + 1
                picked.append((d, i))
            if len(picked) == v:
                break
        if len(picked) < v:  # not enough rings to honor the cap; fall back to global
            picked = dists[:v]
    else:
        picked = dists[:v]

    return SourceSet(indices=tuple(i for _, i in picked),
                     distances=tuple(d for d, _ in picked))
