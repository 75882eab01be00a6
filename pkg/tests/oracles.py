"""Independent re-implementations used to check the library.

Everything here works from raw parameter arrays with explicit loops and never
calls the head classes.
"""

import math

import numpy as np


def _lin(params, prefix, v):
    return np.asarray(v) @ params[f"{prefix}.W"] + params[f"{prefix}.b"][0]


def _score(params, prefix, a, b):
    w = params[f"{prefix}.w"][:, 0]
    z = sum(w[i] * (a[i] - b[i]) ** 2 for i in range(len(a))) + params[f"{prefix}.b"][0, 0]
    return 1.0 / (1.0 + math.exp(-z))


def _softmax(xs):
    m = max(xs)
    e = [math.exp(x - m) for x in xs]
    return [v / sum(e) for v in e]


def nlb(params, x):
    q = [_lin(params, "mf.nlb.q", r) for r in x]
    k = [_lin(params, "mf.nlb.k", r) for r in x]
    v = [_lin(params, "mf.nlb.v", r) for r in x]
    d = params["mf.nlb.q.W"].shape[1]
    out = []
    for i in range(len(x)):
        a = _softmax([float(np.dot(q[i], k[j])) / math.sqrt(d) for j in range(len(x))])
        mixed = sum(a[j] * v[j] for j in range(len(x)))
        out.append(x[i] + _lin(params, "mf.nlb.out", mixed))
    return out


def naive_scores(params, feats, confidences, gallery_feats, method):
    """Score of every gallery item for one tracklet, recomputed from scratch."""
    feats = [np.asarray(f) for f in feats]
    n = len(feats)
    if method in ("seam", "seam_no_nlb", "seam_no_nlb_no_g"):
        x = [_lin(params, "mf.embed", f) for f in feats]
        if method == "seam_no_nlb_no_g":
            w = [1.0 / n] * n
        else:
            src = nlb(params, x) if method == "seam" else x
            w = _softmax([float(_lin(params, "mf.attn", r)[0]) for r in src])
        q = sum(w[i] * x[i] for i in range(n))
        return [_score(params, "mf.match", q, _lin(params, "mf.embed", g)) for g in gallery_feats]
    descs = [_lin(params, "sf.embed", f) for f in feats]
    shops = [_lin(params, "sf.embed", g) for g in gallery_feats]
    if method == "max_confidence":
        best = max(range(n), key=lambda i: (confidences[i], -i))
        return [_score(params, "sf.match", descs[best], s) for s in shops]
    if method == "avg_descriptor":
        q = sum(descs) / n
        return [_score(params, "sf.match", q, s) for s in shops]
    per = [[_score(params, "sf.match", d, s) for d in descs] for s in shops]
    if method == "max_matching":
        return [max(p) for p in per]
    if method == "avg_distance":
        return [sum(p) / n for p in per]
    raise ValueError(method)


def naive_ranking(item_ids, scores):
    order = sorted(range(len(item_ids)), key=lambda i: (-scores[i], item_ids[i]))
    return [item_ids[i] for i in order]


def naive_dct2(block):
    """Orthonormal 2-D DCT-II by the defining double sum."""
    n, m = block.shape
    out = np.zeros((n, m))
    for u in range(n):
        for v in range(m):
            s = 0.0
            for x in range(n):
                cx = math.cos(math.pi * (2 * x + 1) * u / (2 * n))
                for y in range(m):
                    s += block[x, y] * cx * math.cos(math.pi * (2 * y + 1) * v / (2 * m))
            au = math.sqrt(1 / n) if u == 0 else math.sqrt(2 / n)
            av = math.sqrt(1 / m) if v == 0 else math.sqrt(2 / m)
            out[u, v] = au * av * s
    return out


def naive_box_resize(img, size):
    """Average of each output cell's covered area, sampled on a fine sub-grid."""
    h, w = img.shape
    sub = 16
    out = np.zeros((size, size))
    for i in range(size):
        for j in range(size):
            ys = (i + (np.arange(sub) + 0.5) / sub) * h / size
            xs = (j + (np.arange(sub) + 0.5) / sub) * w / size
            out[i, j] = img[np.floor(ys).astype(int)][:, np.floor(xs).astype(int)].mean()
    return out
