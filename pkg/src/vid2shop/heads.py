"""Single-frame and multi-frame matching heads.

The single-frame head embeds a detection's conv feature into a descriptor
(``f``) and scores descriptor pairs (``m``). The multi-frame head has its own
embedding and scorer, plus a temporal non-local block and an attention layer
that fold a tracklet into one descriptor:

    x = embed(c_1..c_T)                 # T x E
    w = softmax_t(attn(nlb(x)))         # 1 x T
    descriptor = w @ x                  # weights apply to x, not nlb(x)

Every forward method takes a :class:`Tape`; inference uses ``Tape(record=False)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .autodiff import ParamStore, ShapeError, Tape, Tensor, as_2d, init_linear, sigmoid

AGGREGATIONS = ("seam", "no_nlb", "mean")


@dataclass(frozen=True)
class HeadDims:
    conv_dim: int = 1024
    embed_dim: int = 256
    nlb_dim: int = 128


def _match(tape: Tape, store: ParamStore, prefix: str, a: Tensor, b: Tensor) -> Tensor:
    """sigmoid(((a - b) * (a - b)) @ w + bias), one score per row."""
    d = tape.sub(a, b)
    sq = tape.mul(d, d)
    return tape.sigmoid(tape.linear(sq, tape.param(store, f"{prefix}.w"), tape.param(store, f"{prefix}.b")))


def _match_np(store: ParamStore, prefix: str, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    d = as_2d(a) - as_2d(b)
    return sigmoid((d * d) @ store[f"{prefix}.w"] + store[f"{prefix}.b"])[:, 0]


class SingleFrameHead:
    """Embedding ``f`` (conv_dim -> embed_dim) and pair scorer ``m``."""

    prefix = "sf"

    def __init__(self, params: ParamStore):
        self.params = params
        w = params["sf.embed.W"]
        self.dims = HeadDims(conv_dim=w.shape[0], embed_dim=w.shape[1])

    @classmethod
    def init(cls, dims: HeadDims, seed: int = 0) -> "SingleFrameHead":
        rng = np.random.default_rng(seed)
        store = ParamStore()
        w, b = init_linear(rng, dims.conv_dim, dims.embed_dim)
        store.add("sf.embed.W", w)
        store.add("sf.embed.b", b)
        w, b = init_linear(rng, dims.embed_dim, 1)
        store.add("sf.match.w", w)
        store.add("sf.match.b", b)
        return cls(store)

    def embed_t(self, tape: Tape, c: Tensor) -> Tensor:
        if c.cols != self.dims.conv_dim:
            raise ShapeError(f"single-frame embed expects {self.dims.conv_dim}-d features, got {c.cols}")
        p = self.params
        return tape.linear(c, tape.param(p, "sf.embed.W"), tape.param(p, "sf.embed.b"))

    def match_t(self, tape: Tape, a: Tensor, b: Tensor) -> Tensor:
        return _match(tape, self.params, "sf.match", a, b)

    def embed(self, c) -> np.ndarray:
        """Descriptors for one feature vector (1 x E) or a stack of them (N x E)."""
        c = as_2d(c)
        if c.shape[1] != self.dims.conv_dim:
            raise ShapeError(f"single-frame embed expects {self.dims.conv_dim}-d features, got {c.shape[1]}")
        return c @ self.params["sf.embed.W"] + self.params["sf.embed.b"]

    def match(self, d1, d2) -> np.ndarray:
        d1, d2 = as_2d(d1), as_2d(d2)
        if d1.shape[1] != self.dims.embed_dim or d2.shape[1] != self.dims.embed_dim:
            raise ShapeError(f"match expects {self.dims.embed_dim}-d descriptors, got {d1.shape} and {d2.shape}")
        return _match_np(self.params, "sf.match", d1, d2)

    def match_pair(self, d1: np.ndarray, d2: np.ndarray) -> float:
        """Score a single descriptor pair; the unit of work during propagation."""
        d = d1 - d2
        z = float((d * d) @ self._w_flat) + self._b
        return 1.0 / (1.0 + math.exp(-z)) if z >= 0 else math.exp(z) / (1.0 + math.exp(z))

    @property
    def _w_flat(self) -> np.ndarray:
        return self.params["sf.match.w"][:, 0]

    @property
    def _b(self) -> float:
        return float(self.params["sf.match.b"][0, 0])


class MultiFrameHead:
    """Embedding, non-local block, attention and scorer over tracklets."""

    prefix = "mf"

    def __init__(self, params: ParamStore):
        self.params = params
        self.dims = HeadDims(
            conv_dim=params["mf.embed.W"].shape[0],
            embed_dim=params["mf.embed.W"].shape[1],
            nlb_dim=params["mf.nlb.q.W"].shape[1],
        )

    # -- tape forward ---------------------------------------------------
    def embed_t(self, tape: Tape, c: Tensor) -> Tensor:
        if c.cols != self.dims.conv_dim:
            raise ShapeError(f"multi-frame embed expects {self.dims.conv_dim}-d features, got {c.cols}")
        p = self.params
        return tape.linear(c, tape.param(p, "mf.embed.W"), tape.param(p, "mf.embed.b"))

    def _lin(self, tape, x, name):
        p = self.params
        return tape.linear(x, tape.param(p, f"mf.{name}.W"), tape.param(p, f"mf.{name}.b"))

    def nlb_t(self, tape: Tape, x: Tensor) -> Tensor:
        """Embedded-Gaussian self-attention over frames with a residual connection."""
        q = self._lin(tape, x, "nlb.q")
        k = self._lin(tape, x, "nlb.k")
        v = self._lin(tape, x, "nlb.v")
        logits = tape.scale(tape.matmul(q, tape.transpose(k)), 1.0 / math.sqrt(self.dims.nlb_dim))
        mixed = tape.matmul(tape.softmax_rows(logits), v)
        return tape.add(x, self._lin(tape, mixed, "nlb.out"))

    def attend_t(self, tape: Tape, x: Tensor, use_nlb: bool = True) -> Tensor:
        """Frame weights (1 x T) summing to one."""
        feats = self.nlb_t(tape, x) if use_nlb else x
        scores = self._lin(tape, feats, "attn")
        return tape.softmax_rows(tape.transpose(scores))

    def aggregate_t(self, tape: Tape, x: Tensor, mode: str = "seam") -> Tensor:
        if mode == "seam":
            w = self.attend_t(tape, x, use_nlb=True)
        elif mode == "no_nlb":
            w = self.attend_t(tape, x, use_nlb=False)
        elif mode == "mean":
            w = tape.constant(np.full((1, x.rows), 1.0 / x.rows))
        else:
            raise ValueError(f"unknown aggregation {mode!r}; expected one of {AGGREGATIONS}")
        return tape.matmul(w, x)

    def match_t(self, tape: Tape, a: Tensor, b: Tensor) -> Tensor:
        return _match(tape, self.params, "mf.match", a, b)

    # -- inference ------------------------------------------------------
    def embed(self, c) -> np.ndarray:
        return self.embed_t(Tape(record=False), Tensor(as_2d(c))).value

    def nlb(self, x) -> np.ndarray:
        return self.nlb_t(Tape(record=False), Tensor(as_2d(x))).value

    def attend(self, x, use_nlb: bool = True) -> np.ndarray:
        """Attention weights as a flat length-T vector."""
        return self.attend_t(Tape(record=False), Tensor(as_2d(x)), use_nlb).value[0]

    def aggregate(self, x, mode: str = "seam") -> np.ndarray:
        return self.aggregate_t(Tape(record=False), Tensor(as_2d(x)), mode).value[0]

    def describe_tracklet(self, conv_features, mode: str = "seam") -> np.ndarray:
        return self.aggregate(self.embed(conv_features), mode)

    def match(self, d1, d2) -> np.ndarray:
        d1, d2 = as_2d(d1), as_2d(d2)
        if d1.shape[1] != self.dims.embed_dim or d2.shape[1] != self.dims.embed_dim:
            raise ShapeError(f"match expects {self.dims.embed_dim}-d descriptors, got {d1.shape} and {d2.shape}")
        return _match_np(self.params, "mf.match", d1, d2)


def shop_descriptor(conv_feature, head: MultiFrameHead) -> np.ndarray:
    """A shop image is a one-frame tracklet, so its descriptor is just the embedding."""
    return head.embed(conv_feature)[0]


def init_multi_from_single(sf: SingleFrameHead, seed: int = 0, nlb_dim: int = 128) -> MultiFrameHead:
    """Copy ``f`` and ``m`` into the multi-frame head; draw NLB and attention at random.

    The NLB output transform starts at zero so the block is the identity.
    """
    rng = np.random.default_rng(seed)
    e = sf.dims.embed_dim
    store = ParamStore()
    store.add("mf.embed.W", sf.params["sf.embed.W"])
    store.add("mf.embed.b", sf.params["sf.embed.b"])
    store.add("mf.match.w", sf.params["sf.match.w"])
    store.add("mf.match.b", sf.params["sf.match.b"])
    for name in ("q", "k", "v"):
        w, b = init_linear(rng, e, nlb_dim)
        store.add(f"mf.nlb.{name}.W", w)
        store.add(f"mf.nlb.{name}.b", b)
    store.add("mf.nlb.out.W", np.zeros((nlb_dim, e)))
    store.add("mf.nlb.out.b", np.zeros((1, e)))
    w, b = init_linear(rng, e, 1)
    store.add("mf.attn.W", w)
    store.add("mf.attn.b", b)
    return MultiFrameHead(store)


@dataclass
class Model:
    """Both heads; the unit saved to and loaded from a checkpoint."""

    single: SingleFrameHead
    multi: MultiFrameHead

    def params(self) -> ParamStore:
        return self.single.params.merged(self.multi.params)

    @classmethod
    def from_params(cls, params: ParamStore) -> "Model":
        return cls(SingleFrameHead(params.subset("sf.")), MultiFrameHead(params.subset("mf.")))
