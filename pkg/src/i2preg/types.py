"""Containers shared by the matching, oracle and pose stages."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class FeatureSet:
    """Coarse and fine descriptors for one image / point-cloud pair.

    ``coarse_image`` rows follow the patch grid in row-major order.
    """

    coarse_image: np.ndarray   # (rows*cols, C)
    coarse_points: np.ndarray  # (M, C)
    fine_image: np.ndarray     # (H/2, W/2, C')
    fine_points: np.ndarray    # (N, C')


@dataclass
class CorrespondenceSet:
    """Point-to-pixel pairs. Pixels are (u, v); confidences in [0, 1]."""

    point_index: np.ndarray
    points: np.ndarray
    pixels: np.ndarray
    confidence: np.ndarray
    group_ids: np.ndarray = field(default=None)

    def __post_init__(self):
        self.point_index = np.asarray(self.point_index, dtype=np.int64).reshape(-1)
        n = len(self.point_index)
        self.points = np.asarray(self.points, dtype=np.float64).reshape(n, 3)
        self.pixels = np.asarray(self.pixels, dtype=np.float64).reshape(n, 2)
        self.confidence = np.asarray(self.confidence, dtype=np.float64).reshape(n)
        if self.group_ids is None:
            self.group_ids = np.full(n, -1, dtype=np.int64)
        self.group_ids = np.asarray(self.group_ids, dtype=np.int64).reshape(n)
        if np.any((self.confidence < 0) | (self.confidence > 1)):
            raise ValueError("confidences must lie in [0, 1]")

    def __len__(self):
        return len(self.point_index)

    def subset(self, idx) -> "CorrespondenceSet":
        return CorrespondenceSet(self.point_index[idx], self.points[idx], self.pixels[idx],
                                 self.confidence[idx], self.group_ids[idx])

    @classmethod
    def empty(cls) -> "CorrespondenceSet":
        return cls(np.zeros(0, np.int64), np.zeros((0, 3)), np.zeros((0, 2)), np.zeros(0))

    @classmethod
    def concat(cls, sets) -> "CorrespondenceSet":
        sets = list(sets)
        if not sets:
            return cls.empty()
        return cls(np.concatenate([s.point_index for s in sets]),
                   np.concatenate([s.points for s in sets]),
                   np.concatenate([s.pixels for s in sets]),
                   np.concatenate([s.confidence for s in sets]),
                   np.concatenate([s.group_ids for s in sets]))
