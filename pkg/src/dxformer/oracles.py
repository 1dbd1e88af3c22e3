"""Slow reference implementations used for differential testing.

Nothing here shares code with the fast paths it checks: segments are found
from change points, IoUs are exact fractions, Levenshtein is a memoized
recursion, and attention is a dense masked softmax over the whole sequence.
"""
import math
from fractions import Fraction
from functools import lru_cache

import numpy as np


def segments_from_changepoints(labels):
    labels = list(labels)
    if not labels:
        return []
    cuts = [0] + [t for t in range(1, len(labels)) if labels[t] != labels[t - 1]] + [len(labels)]
    return [(labels[a], a, b) for a, b in zip(cuts[:-1], cuts[1:])]


def iou_matrix(pred, gt):
    ps, gs = segments_from_changepoints(pred), segments_from_changepoints(gt)
    m = []
    for pl, pa, pb in ps:
        row = []
        for gl, ga, gb in gs:
            frames_p = set(range(pa, pb))
            frames_g = set(range(ga, gb))
            row.append(Fraction(len(frames_p & frames_g), len(frames_p | frames_g)) if pl == gl else None)
        m.append(row)
    return ps, gs, m


def greedy_tp_exhaustive(pred, gt, k):
    """The greedy rule evaluated by enumerating every (pred, gt) pair explicitly."""
    ps, gs, m = iou_matrix(pred, gt)
    threshold = Fraction(k, 100)
    taken = set()
    tp = 0
    for i in range(len(ps)):
        candidates = [(m[i][j], -j) for j in range(len(gs)) if m[i][j] is not None and j not in taken]
        if not candidates:
            continue
        iou, neg_j = max(candidates)
        if iou > threshold:
            taken.add(-neg_j)
            tp += 1
    return tp, len(ps) - tp, len(gs) - tp


def optimal_tp(pred, gt, k):
    """Maximum number of one-to-one same-label pairs with IoU > k/100 (augmenting paths)."""
    ps, gs, m = iou_matrix(pred, gt)
    threshold = Fraction(k, 100)
    adj = [[j for j in range(len(gs)) if m[i][j] is not None and m[i][j] > threshold] for i in range(len(ps))]
    owner = [-1] * len(gs)

    def augment(i, seen):
        for j in adj[i]:
            if j in seen:
                continue
            seen.add(j)
            if owner[j] < 0 or augment(owner[j], seen):
                owner[j] = i
                return True
        return False

    return sum(augment(i, set()) for i in range(len(ps)))


def f1_from_counts(tp, fp, fn):
    p = Fraction(tp, tp + fp) if tp + fp else Fraction(0)
    r = Fraction(tp, tp + fn) if tp + fn else Fraction(0)
    return float(100 * 2 * p * r / (p + r)) if p + r else 0.0


def levenshtein_recursive(a, b):
    a, b = tuple(a), tuple(b)

    @lru_cache(maxsize=None)
    def dist(i, j):
        if i == 0:
            return j
        if j == 0:
            return i
        return min(dist(i - 1, j) + 1, dist(i, j - 1) + 1, dist(i - 1, j - 1) + (a[i - 1] != b[j - 1]))

    return dist(len(a), len(b))


def edit_score_reference(pred, gt):
    p = [s[0] for s in segments_from_changepoints(pred)]
    g = [s[0] for s in segments_from_changepoints(gt)]
    n = max(len(p), len(g))
    if n == 0:
        return 100.0
    return max(0.0, float(100 * (1 - Fraction(levenshtein_recursive(p, g), n))))


def dense_masked_attention(q, k, v, mask, w):
    """Dense ``T x T`` attention with an explicit block-diagonal chunk mask.

    Returns ``(out, weights)`` as numpy arrays. Rows of padded queries are zero.
    """
    q, k, v = (np.asarray(a, dtype=np.float64) for a in (q, k, v))
    t, d = q.shape
    mask = np.ones(t, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    chunk = np.arange(t) // w
    allowed = (chunk[:, None] == chunk[None, :]) & mask[None, :] & mask[:, None]
    scores = q @ k.T / math.sqrt(d)
    weights = np.zeros((t, t))
    for i in range(t):
        if not allowed[i].any():
            continue
        row = scores[i, allowed[i]]
        e = np.exp(row - row.max())
        weights[i, allowed[i]] = e / e.sum()
    return weights @ v, weights


def nearest_centroid_accuracy(features, labels, num_classes):
    """Frame accuracy (percent) of a nearest-class-mean classifier fit on the same frames.

    ``features`` is a list of ``[D, T]`` arrays, ``labels`` a matching list of int arrays.
    """
    x = np.concatenate([np.asarray(f, dtype=np.float64).T for f in features])
    y = np.concatenate([np.asarray(l) for l in labels])
    centroids = np.stack([x[y == c].mean(axis=0) if (y == c).any() else np.full(x.shape[1], np.inf)
                          for c in range(num_classes)])
    d2 = ((x[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
    return 100.0 * float((d2.argmin(axis=1) == y).mean())


def log_softmax_columns(z):
    z = np.asarray(z, dtype=np.float64)
    m = z.max(axis=0, keepdims=True)
    return z - m - np.log(np.exp(z - m).sum(axis=0, keepdims=True))


def seg_loss_reference(stage_logits, labels, smooth_weight=0.15, clip=4.0, anchors=None):
    """Loss value from plain loops over frames, classes and stages.

    ``anchors`` optionally replaces each stage's previous-frame log-probabilities
    by fixed arrays. Freezing them at a base point gives the function whose
    gradient there equals the gradient of the loss with that term detached.
    """
    labels = [int(y) for y in labels]
    total = 0.0
    for s, z in enumerate(stage_logits):
        logp = log_softmax_columns(z)
        c, t = logp.shape
        ce = -sum(logp[labels[i], i] for i in range(t)) / t
        prev = logp if anchors is None else np.asarray(anchors[s], dtype=np.float64)
        sm = 0.0
        for i in range(1, t):
            for k in range(c):
                sm += min(clip * clip, (logp[k, i] - prev[k, i - 1]) ** 2)
        total += ce + (smooth_weight * sm / (c * (t - 1)) if t > 1 else 0.0)
    return total
