"""Shared fixtures for hand-built heads and detections."""

import numpy as np

from vid2shop.autodiff import ParamStore
from vid2shop.heads import SingleFrameHead
from vid2shop.types import BBox, Detection


def distance_head(dim: int = 2, bias: float = 4.0) -> SingleFrameHead:
    """Identity embedding, score sigmoid(bias - |a - b|^2)."""
    return SingleFrameHead(
        ParamStore(
            {
                "sf.embed.W": np.eye(dim),
                "sf.embed.b": np.zeros((1, dim)),
                "sf.match.w": -np.ones((dim, 1)),
                "sf.match.b": np.full((1, 1), bias),
            }
        )
    )


def make_det(frame, k, feat, conf=0.5, box=(0, 0, 10, 10), truth=None):
    return Detection(frame, k, BBox(*box), conf, np.asarray(feat, dtype=float), truth)
