"""Video-to-shop clothing retrieval with tracklet aggregation, on numpy."""

from .heads import HeadDims, Model, MultiFrameHead, SingleFrameHead, init_multi_from_single
from .types import BBox, Detection, GalleryItem, Ranking, SequenceRecord, Tracklet, iou

__version__ = "0.1.0"

__all__ = [
    "BBox",
    "Detection",
    "GalleryItem",
    "HeadDims",
    "Model",
    "MultiFrameHead",
    "Ranking",
    "SequenceRecord",
    "SingleFrameHead",
    "Tracklet",
    "init_multi_from_single",
    "iou",
]
