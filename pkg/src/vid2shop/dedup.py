"""Near-duplicate shop images: perceptual hash, registration, pixel check, merging.

Pipeline: hash every image, keep pairs within a Hamming radius, match a grid
of patches between the two images, fit a similarity transform with RANSAC,
and accept the pair when the registered images differ little on average.
Accepted pairs are merged into groups with union-find.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.fft import dctn

HASH_BITS = 64


class DedupError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class GrayImage:
    width: int
    height: int
    pixels: np.ndarray = field(repr=False)

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise DedupError(f"image must be non-empty, got {self.width}x{self.height}")
        px = np.asarray(self.pixels)
        if px.size != self.width * self.height:
            raise DedupError(f"expected {self.width * self.height} pixels, got {px.size}")
        px = np.clip(np.rint(px), 0, 255).astype(np.uint8).reshape(self.height, self.width)
        px.setflags(write=False)
        object.__setattr__(self, "pixels", px)

    @classmethod
    def from_array(cls, arr) -> "GrayImage":
        arr = np.asarray(arr)
        if arr.ndim != 2:
            raise DedupError(f"expected a 2-d array, got shape {arr.shape}")
        return cls(arr.shape[1], arr.shape[0], arr)

    def as_float(self) -> np.ndarray:
        return self.pixels.astype(np.float64)


@dataclass(frozen=True)
class SimilarityTransform:
    """``x -> s * R(theta) x + t`` in (x, y) pixel coordinates."""

    scale: float = 1.0
    theta: float = 0.0
    tx: float = 0.0
    ty: float = 0.0

    def __post_init__(self):
        if not (math.isfinite(self.scale) and self.scale > 0):
            raise DedupError(f"scale must be finite and positive, got {self.scale}")

    @classmethod
    def from_complex(cls, c: complex, t: complex) -> "SimilarityTransform":
        return cls(abs(c), math.atan2(c.imag, c.real), t.real, t.imag)

    @property
    def c(self) -> complex:
        return self.scale * complex(math.cos(self.theta), math.sin(self.theta))

    def apply(self, pts) -> np.ndarray:
        z = _to_complex(pts)
        return _to_points(self.c * z + complex(self.tx, self.ty))

    def inverse(self) -> "SimilarityTransform":
        ci = 1.0 / self.c
        return SimilarityTransform.from_complex(ci, -ci * complex(self.tx, self.ty))

    def matrix(self) -> np.ndarray:
        """2x3 matrix acting on column vectors ``(x, y, 1)``."""
        a = self.scale * math.cos(self.theta)
        b = self.scale * math.sin(self.theta)
        return np.array([[a, -b, self.tx], [b, a, self.ty]])


def _to_complex(pts) -> np.ndarray:
    p = np.asarray(pts, dtype=np.float64).reshape(-1, 2)
    return p[:, 0] + 1j * p[:, 1]


def _to_points(z: np.ndarray) -> np.ndarray:
    return np.stack([z.real, z.imag], axis=1)


# -- perceptual hash -------------------------------------------------------


def _box_weights(n_in: int, n_out: int) -> np.ndarray:
    """(n_out, n_in) area weights: each output cell averages the input cells it covers."""
    edges = np.arange(n_out + 1) * (n_in / n_out)
    lo, hi = edges[:-1, None], edges[1:, None]
    cells = np.arange(n_in)[None, :]
    overlap = np.clip(np.minimum(hi, cells + 1) - np.maximum(lo, cells), 0.0, None)
    return overlap / (n_in / n_out)


def box_resize(img: np.ndarray, width: int, height: int) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    return _box_weights(img.shape[0], height) @ img @ _box_weights(img.shape[1], width).T


def hash_coefficients(img: GrayImage) -> np.ndarray:
    """The 64 low-frequency DCT coefficients the hash thresholds.

    The top-left 8x8 block in row-major order without the DC term, then
    coefficient (8, 0), the next one in JPEG zig-zag order.
    """
    small = box_resize(img.as_float(), 32, 32)
    coef = dctn(small, type=2, norm="ortho")
    # round-off on flat images must not flip bits
    coef[np.abs(coef) < 1e-6] = 0.0
    block = coef[:8, :8].reshape(-1)[1:]
    return np.concatenate([block, [coef[8, 0]]])


def bits_to_int(bits: Iterable[bool]) -> int:
    out = 0
    for b in bits:
        out = (out << 1) | int(bool(b))
    return out


def phash(img: GrayImage) -> int:
    coefs = hash_coefficients(img)
    return bits_to_int(coefs > np.median(coefs))


def hamming(a: int, b: int) -> int:
    return bin(a ^ b).count("1")


def hamming_candidates(hashes: Dict[str, int], radius: int = 10) -> list:
    """Unordered id pairs ``(a, b)`` with ``a < b`` and Hamming distance <= radius."""
    ids = sorted(hashes)
    out = []
    for i, a in enumerate(ids):
        for b in ids[i + 1 :]:
            if hamming(hashes[a], hashes[b]) <= radius:
                out.append((a, b))
    return out


# -- registration ----------------------------------------------------------


def _two_point(za: np.ndarray, zb: np.ndarray) -> Optional[tuple]:
    da = za[1] - za[0]
    if abs(da) < 1e-12:
        return None
    c = (zb[1] - zb[0]) / da
    if abs(c) < 1e-12:
        return None
    return c, zb[0] - c * za[0]


def fit_similarity(pa, pb) -> SimilarityTransform:
    """Least-squares similarity mapping ``pa`` onto ``pb``."""
    za, zb = _to_complex(pa), _to_complex(pb)
    if za.size < 2:
        raise DedupError("need at least 2 point pairs")
    ma, mb = za.mean(), zb.mean()
    ca, cb = za - ma, zb - mb
    denom = float(np.sum(np.abs(ca) ** 2))
    if denom < 1e-12:
        raise DedupError("all points coincide")
    c = np.sum(np.conj(ca) * cb) / denom
    return SimilarityTransform.from_complex(complex(c), complex(mb - c * ma))


@dataclass
class RansacResult:
    transform: SimilarityTransform
    inliers: np.ndarray
    best_sample_inliers: int

    @property
    def n_inliers(self) -> int:
        return int(self.inliers.sum())


def ransac_similarity(pa, pb, iters: int = 500, inlier_tol: float = 2.0, seed: int = 0) -> RansacResult:
    """Robust similarity fit from paired points.

    The least-squares refit on the best sample's inliers is kept only if it
    keeps at least as many inliers as that sample did.
    """
    za, zb = _to_complex(pa), _to_complex(pb)
    n = za.size
    if n != zb.size:
        raise DedupError(f"point lists differ in length: {n} vs {zb.size}")
    if n < 2:
        raise DedupError("need at least 2 point pairs")
    rng = np.random.default_rng(seed)
    best = None
    best_count = -1
    for _ in range(iters):
        i, j = rng.choice(n, size=2, replace=False)
        model = _two_point(za[[i, j]], zb[[i, j]])
        if model is None:
            continue
        c, t = model
        mask = np.abs(c * za + t - zb) <= inlier_tol
        count = int(mask.sum())
        if count > best_count:
            best, best_count = (c, t, mask), count
    if best is None:
        raise DedupError("every RANSAC sample was degenerate")
    c, t, mask = best
    tf = SimilarityTransform.from_complex(complex(c), complex(t))
    for _ in range(3):
        try:
            refit = fit_similarity(_to_points(za[mask]), _to_points(zb[mask]))
        except DedupError:
            break
        new_mask = np.abs(refit.c * za + complex(refit.tx, refit.ty) - zb) <= inlier_tol
        if new_mask.sum() < mask.sum() or new_mask.sum() < best_count:
            break
        tf, same = refit, np.array_equal(new_mask, mask)
        mask = new_mask
        if same:
            break
    return RansacResult(tf, mask, best_count)


# -- correspondences -------------------------------------------------------


def _as_array(img) -> np.ndarray:
    return img.as_float() if isinstance(img, GrayImage) else np.asarray(img, dtype=np.float64)


def grid_correspondences(
    a,
    b,
    guess: Optional[SimilarityTransform] = None,
    step: int = 8,
    patch: int = 5,
    search: int = 12,
    min_std: float = 4.0,
    valid: Optional[np.ndarray] = None,
) -> tuple:
    """Match a grid of patches of ``a`` inside ``b`` by normalised cross-correlation.

    A patch centred at ``p`` is searched within ``search`` pixels of
    ``guess(p)`` (identity by default) and the peak is refined to sub-pixel
    precision with a parabola per axis. Flat patches (std below ``min_std``)
    and patches touching ``valid == False`` are skipped.
    Returns ``(points_a, points_b, scores)``.
    """
    fa, fb = _as_array(a), _as_array(b)
    guess = guess or SimilarityTransform()
    size = 2 * patch + 1
    pad = search + patch
    wins = sliding_window_view(np.pad(fb, pad, mode="edge"), (size, size))
    h, w = fa.shape
    hb, wb = fb.shape
    pa, pb, scores = [], [], []
    for y in range(patch, h - patch, step):
        for x in range(patch, w - patch, step):
            if valid is not None and not valid[y - patch : y + patch + 1, x - patch : x + patch + 1].all():
                continue
            tpl = fa[y - patch : y + patch + 1, x - patch : x + patch + 1]
            if tpl.std() < min_std:
                continue
            gx, gy = guess.apply((x, y))[0]
            cx, cy = int(round(gx)), int(round(gy))
            if not (0 <= cx < wb and 0 <= cy < hb):
                continue
            # window (i, j) of the padded image is centred on (cy + i - search, cx + j - search)
            cand = wins[cy : cy + 2 * search + 1, cx : cx + 2 * search + 1]
            ncc = _ncc(tpl, cand)
            dy, dx = np.unravel_index(np.argmax(ncc), ncc.shape)
            oy, ox = _subpixel(ncc, dy, dx)
            pa.append((x, y))
            pb.append((cx + dx + ox - search, cy + dy + oy - search))
            scores.append(float(ncc[dy, dx]))
    return (
        np.asarray(pa, dtype=np.float64).reshape(-1, 2),
        np.asarray(pb, dtype=np.float64).reshape(-1, 2),
        np.asarray(scores),
    )


def _ncc(tpl: np.ndarray, cand: np.ndarray) -> np.ndarray:
    t = tpl - tpl.mean()
    c = cand - cand.mean(axis=(2, 3), keepdims=True)
    num = np.einsum("ijkl,kl->ij", c, t)
    den = np.sqrt(np.einsum("ijkl,ijkl->ij", c, c) * np.sum(t * t))
    return np.where(den > 1e-9, num / np.maximum(den, 1e-9), -1.0)


def _subpixel(score: np.ndarray, i: int, j: int) -> tuple:
    def fit(lo, mid, hi):
        d = lo - 2 * mid + hi
        return 0.0 if d >= 0 else float(np.clip(0.5 * (lo - hi) / d, -0.5, 0.5))

    oy = fit(score[i - 1, j], score[i, j], score[i + 1, j]) if 0 < i < score.shape[0] - 1 else 0.0
    ox = fit(score[i, j - 1], score[i, j], score[i, j + 1]) if 0 < j < score.shape[1] - 1 else 0.0
    return oy, ox


# -- verification ----------------------------------------------------------


def bilinear_sample(img: np.ndarray, xs: np.ndarray, ys: np.ndarray) -> tuple:
    """Values at real-valued (xs, ys) and a mask of points inside the image."""
    h, w = img.shape
    inside = (xs >= 0) & (xs <= w - 1) & (ys >= 0) & (ys <= h - 1)
    x0 = np.clip(np.floor(xs).astype(int), 0, max(w - 2, 0))
    y0 = np.clip(np.floor(ys).astype(int), 0, max(h - 2, 0))
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx, fy = xs - x0, ys - y0
    top = img[y0, x0] * (1 - fx) + img[y0, x1] * fx
    bottom = img[y1, x0] * (1 - fx) + img[y1, x1] * fx
    return top * (1 - fy) + bottom * fy, inside


def warp_onto(a: GrayImage, tf: SimilarityTransform, width: int, height: int) -> tuple:
    """``a`` moved by ``tf`` onto a ``width`` x ``height`` canvas, with its valid mask."""
    ys, xs = np.mgrid[0:height, 0:width].astype(np.float64)
    src = tf.inverse().apply(np.stack([xs.ravel(), ys.ravel()], axis=1))
    vals, inside = bilinear_sample(a.as_float(), src[:, 0], src[:, 1])
    return vals.reshape(height, width), inside.reshape(height, width)


def pixel_diff_verify(a: GrayImage, b: GrayImage, tf: SimilarityTransform, threshold: float) -> tuple:
    """``(is_duplicate, mean_abs_diff)`` over the pixels of ``b`` covered by warped ``a``."""
    warped, inside = warp_onto(a, tf, b.width, b.height)
    if not inside.any():
        raise DedupError("no overlap between warped image and target")
    diff = float(np.abs(warped - b.as_float())[inside].mean())
    return diff <= threshold, diff


# -- merging ---------------------------------------------------------------


def merge_duplicates(pairs: Iterable[tuple], ids: Iterable[str] = ()) -> list:
    """Connected components of the pair graph, as sorted lists sorted by first id.

    ``ids`` adds items that may have no pair; they come out as singletons.
    """
    parent: dict = {}

    def find(x):
        parent.setdefault(x, x)
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    for i in ids:
        find(i)
    for a, b in pairs:
        ra, rb = find(a), find(b)
        if ra != rb:
            parent[max(ra, rb)] = min(ra, rb)
    groups: dict = {}
    for x in parent:
        groups.setdefault(find(x), []).append(x)
    return sorted((sorted(g) for g in groups.values()), key=lambda g: g[0])


# -- pipeline --------------------------------------------------------------


@dataclass(frozen=True)
class DedupConfig:
    radius: int = 10
    threshold: float = 10.0
    ransac_iters: int = 500
    inlier_tol: float = 2.0
    min_inliers: int = 8
    min_ncc: float = 0.8
    refine_passes: int = 2
    refine_tol: float = 0.5
    refine_step: int = 8
    seed: int = 0


@dataclass
class PairReport:
    a: str
    b: str
    hamming: int
    duplicate: bool
    transform: Optional[SimilarityTransform] = None
    n_inliers: int = 0
    mean_diff: Optional[float] = None
    reason: str = ""


def size_prior(a: GrayImage, b: GrayImage) -> SimilarityTransform:
    """Scale implied by the image sizes, no rotation or shift."""
    return SimilarityTransform(0.5 * (b.width / a.width + b.height / a.height))


def register(a: GrayImage, b: GrayImage, cfg: DedupConfig = DedupConfig()) -> RansacResult:
    """Similarity taking ``a``'s pixel coordinates onto ``b``'s.

    A coarse RANSAC fit from patch matches around the size prior is refined
    by matching ``b`` against ``a`` warped with the current estimate, where
    patches are no longer distorted by the scale change.
    """
    pa, pb, score = grid_correspondences(a, b, guess=size_prior(a, b))
    keep = score >= cfg.min_ncc
    if keep.sum() < max(cfg.min_inliers, 2):
        raise DedupError(f"only {int(keep.sum())} reliable correspondences")
    fit = ransac_similarity(pa[keep], pb[keep], cfg.ransac_iters, cfg.inlier_tol, cfg.seed)
    for _ in range(cfg.refine_passes):
        if fit.n_inliers < cfg.min_inliers:
            break
        warped, inside = warp_onto(a, fit.transform, b.width, b.height)
        qb, qw, score = grid_correspondences(b, warped, step=cfg.refine_step, search=3)
        ok = score >= cfg.min_ncc
        ok &= inside[np.clip(np.rint(qw[:, 1]).astype(int), 0, b.height - 1), np.clip(np.rint(qw[:, 0]).astype(int), 0, b.width - 1)]
        if ok.sum() < max(cfg.min_inliers, 2):
            break
        src = fit.transform.inverse().apply(qw[ok])
        refined = ransac_similarity(src, qb[ok], cfg.ransac_iters, cfg.refine_tol, cfg.seed)
        if refined.n_inliers < cfg.min_inliers:
            break
        fit = refined
    return fit


def verify_pair(a: GrayImage, b: GrayImage, cfg: DedupConfig = DedupConfig()) -> tuple:
    """``(duplicate, RansacResult or None, mean_diff or None, reason)``."""
    try:
        fit = register(a, b, cfg)
    except DedupError as exc:
        return False, None, None, str(exc)
    if fit.n_inliers < cfg.min_inliers:
        return False, fit, None, f"{fit.n_inliers} inliers"
    try:
        dup, diff = pixel_diff_verify(a, b, fit.transform, cfg.threshold)
    except DedupError as exc:
        return False, fit, None, str(exc)
    return dup, fit, diff, "" if dup else f"mean diff {diff:.2f}"


def find_duplicates(images: Dict[str, GrayImage], cfg: DedupConfig = DedupConfig()) -> tuple:
    """``(groups, reports)`` for a collection of images keyed by id."""
    hashes = {k: phash(v) for k, v in images.items()}
    reports = []
    for a, b in hamming_candidates(hashes, cfg.radius):
        dup, fit, diff, reason = verify_pair(images[a], images[b], cfg)
        reports.append(
            PairReport(
                a,
                b,
                hamming(hashes[a], hashes[b]),
                dup,
                fit.transform if fit is not None else None,
                fit.n_inliers if fit is not None else 0,
                diff,
                reason,
            )
        )
    groups = merge_duplicates(((r.a, r.b) for r in reports if r.duplicate), images)
    return groups, reports


# -- PGM -------------------------------------------------------------------


def _pgm_tokens(data: bytes, count: int) -> tuple:
    """First ``count`` header tokens (comments skipped) and the offset after them."""
    tokens, pos = [], 0
    while len(tokens) < count:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise DedupError("truncated PGM header")
        tokens.append(data[start:pos])
    return tokens, pos + 1


def parse_pgm(data: bytes) -> GrayImage:
    tokens, pos = _pgm_tokens(data, 4)
    if tokens[0] != b"P5":
        raise DedupError(f"not a binary PGM (magic {tokens[0]!r})")
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise DedupError("malformed PGM header") from None
    if not 0 < maxval < 256:
        raise DedupError(f"only 8-bit PGM is supported (maxval {maxval})")
    raw = data[pos : pos + w * h]
    if len(raw) != w * h:
        raise DedupError(f"PGM pixel data truncated: expected {w * h} bytes, got {len(raw)}")
    px = np.frombuffer(raw, dtype=np.uint8).astype(np.float64)
    if maxval != 255:
        px = px * (255.0 / maxval)
    return GrayImage(w, h, px)


def read_pgm(path) -> GrayImage:
    try:
        return parse_pgm(Path(path).read_bytes())
    except DedupError as exc:
        raise DedupError(f"{path}: {exc}") from None


def write_pgm(path, img: GrayImage) -> None:
    header = f"P5\n{img.width} {img.height}\n255\n".encode("ascii")
    Path(path).write_bytes(header + img.pixels.tobytes())


def read_pgm_dir(directory) -> dict:
    names = sorted(n for n in os.listdir(directory) if n.lower().endswith(".pgm"))
    return {os.path.splitext(n)[0]: read_pgm(os.path.join(directory, n)) for n in names}


# -- synthetic corpus ------------------------------------------------------


@dataclass
class DuplicateCorpus:
    images: Dict[str, GrayImage]
    # (original id, duplicate id) -> transform mapping original pixels onto the duplicate
    planted: Dict[tuple, SimilarityTransform]

    def true_pairs(self) -> set:
        return set(self.planted)


def random_object_image(rng: np.random.Generator, size: int = 256) -> np.ndarray:
    """A product-photo stand-in: smooth shading, fine texture and a few solid blobs."""
    from scipy.ndimage import gaussian_filter

    shade = gaussian_filter(rng.standard_normal((size, size)), size / 10)
    texture = gaussian_filter(rng.standard_normal((size, size)), 1.5)
    img = 128.0 + shade * (35.0 / shade.std()) + texture * (15.0 / texture.std())
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    for _ in range(rng.integers(2, 5)):
        cx, cy = rng.uniform(0.3, 0.7, size=2) * size
        rx, ry = rng.uniform(0.1, 0.25, size=2) * size
        img[((xx - cx) / rx) ** 2 + ((yy - cy) / ry) ** 2 <= 1.0] += rng.uniform(-60, 60)
    return np.clip(gaussian_filter(img, 0.7), 0, 255)


def _plant(arr: np.ndarray, tf: SimilarityTransform, shape: tuple, rng, noise: float) -> np.ndarray:
    from scipy.ndimage import affine_transform

    # affine_transform maps output (row, col) to input coordinates
    inv = tf.inverse().matrix()
    swap = np.array([[0, 1], [1, 0]])
    lin = swap @ inv[:, :2] @ swap
    off = swap @ inv[:, 2]
    out = affine_transform(arr, lin, offset=off, output_shape=shape, order=3, mode="nearest")
    return np.clip(out + rng.normal(0, noise, out.shape), 0, 255)


def duplicate_corpus(
    n_images: int = 200,
    n_duplicates: int = 40,
    size: int = 256,
    scale_range: tuple = (0.8, 1.25),
    max_shift: float = 8.0,
    noise: float = 2.0,
    seed: int = 0,
) -> DuplicateCorpus:
    """``n_images`` images of which ``n_duplicates`` are rescaled, shifted copies of others.

    A duplicate is its source resampled to ``round(s * size)`` pixels a side
    (``s`` log-uniform in ``scale_range``), shifted by at most ``max_shift``
    pixels and given pixel noise, like a re-uploaded product photo.
    """
    if not 0 <= n_duplicates <= n_images // 2:
        raise DedupError("n_duplicates must be between 0 and half the corpus")
    rng = np.random.default_rng(seed)
    n_orig = n_images - n_duplicates
    arrays = {f"img{i:04d}": random_object_image(rng, size) for i in range(n_orig)}
    images = {k: GrayImage.from_array(v) for k, v in arrays.items()}
    planted = {}
    sources = rng.choice(n_orig, size=n_duplicates, replace=False)
    for j, src in enumerate(sources):
        s = float(np.exp(rng.uniform(*np.log(scale_range))))
        r, ang = max_shift * math.sqrt(rng.uniform()), rng.uniform(0, 2 * math.pi)
        tf = SimilarityTransform(s, 0.0, r * math.cos(ang), r * math.sin(ang))
        out = int(round(s * size))
        sid, did = f"img{src:04d}", f"img{n_orig + j:04d}"
        images[did] = GrayImage.from_array(_plant(arrays[sid], tf, (out, out), rng, noise))
        planted[(sid, did)] = tf
    return DuplicateCorpus(images, planted)
