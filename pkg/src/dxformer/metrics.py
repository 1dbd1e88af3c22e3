"""Segmental F1@k, edit score and frame accuracy for action segmentation."""
from dataclasses import dataclass

import numpy as np

from .errors import ContractError

OVERLAPS = (10, 25, 50)
EDIT_MODES = ("per_video", "pooled")


@dataclass(frozen=True)
class Segment:
    label: int
    start: int  # inclusive
    end: int  # exclusive

    def __len__(self):
        return self.end - self.start


def labels_to_segments(labels, ignore_label=None):
    """Maximal runs of equal labels, in order. Runs of ``ignore_label`` are dropped."""
    labels = [int(x) for x in labels]
    segs = []
    start = 0
    for t in range(1, len(labels) + 1):
        if t == len(labels) or labels[t] != labels[start]:
            if labels[start] != ignore_label:
                segs.append(Segment(labels[start], start, t))
            start = t
    return segs


def segments_to_labels(segments):
    out = []
    for s in segments:
        out.extend([s.label] * (s.end - s.start))
    return out


def _check_lengths(pred, gt):
    if len(pred) != len(gt):
        raise ContractError(f"prediction has {len(pred)} frames but ground truth has {len(gt)}")


def match_counts(pred, gt, k, ignore_label=None):
    """Greedy segment matching; returns ``(tp, fp, fn)`` at IoU threshold ``k`` percent.

    Predicted segments are visited in temporal order. Each takes the
    same-label ground-truth segment with the highest IoU among those not yet
    matched (earliest on ties) and is a true positive iff that IoU exceeds
    ``k / 100``. Only true positives consume a ground-truth segment.
    """
    _check_lengths(pred, gt)
    p_segs = labels_to_segments(pred, ignore_label)
    g_segs = labels_to_segments(gt, ignore_label)
    used = [False] * len(g_segs)
    tp = 0
    for p in p_segs:
        best, best_inter, best_union = -1, 0, 1
        for j, g in enumerate(g_segs):
            if used[j] or g.label != p.label:
                continue
            inter = min(p.end, g.end) - max(p.start, g.start)
            if inter <= 0:
                continue
            union = max(p.end, g.end) - min(p.start, g.start)
            # compare inter/union > best_inter/best_union without floats
            if best < 0 or inter * best_union > best_inter * union:
                best, best_inter, best_union = j, inter, union
        if best >= 0 and best_inter * 100 > k * best_union:
            used[best] = True
            tp += 1
    return tp, len(p_segs) - tp, len(g_segs) - tp


def _prf(tp, fp, fn):
    # each value is one division of exact integers, so it is correctly rounded
    precision = 100 * tp / (tp + fp) if tp + fp else 0.0
    recall = 100 * tp / (tp + fn) if tp + fn else 0.0
    f1 = 200 * tp / (2 * tp + fp + fn) if tp else 0.0
    return precision, recall, f1


def f1_at_k(pred, gt, k, ignore_label=None):
    """``(precision, recall, f1)`` as percentages for one video."""
    return _prf(*match_counts(pred, gt, k, ignore_label))


def levenshtein(a, b):
    prev = list(range(len(b) + 1))
    for i, x in enumerate(a, 1):
        cur = [i] + [0] * len(b)
        for j, y in enumerate(b, 1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (x != y))
        prev = cur
    return prev[-1]


def _edit_terms(pred, gt, ignore_label):
    _check_lengths(pred, gt)
    p = [s.label for s in labels_to_segments(pred, ignore_label)]
    g = [s.label for s in labels_to_segments(gt, ignore_label)]
    return levenshtein(p, g), max(len(p), len(g))


def _edit_value(dist, norm):
    # one integer division, so the result is correctly rounded
    if norm == 0:
        return 100.0
    return max(0.0, 100 * (norm - dist) / norm)


def edit_score(pred, gt, ignore_label=None):
    """``100 * (1 - lev(segment labels) / max(#segments))``, clamped at 0."""
    return _edit_value(*_edit_terms(pred, gt, ignore_label))


def _acc_terms(pred, gt, ignore_label):
    _check_lengths(pred, gt)
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    keep = np.ones(len(gt), dtype=bool) if ignore_label is None else gt != ignore_label
    return int((pred[keep] == gt[keep]).sum()), int(keep.sum())


def frame_accuracy(pred, gt, ignore_label=None):
    if len(gt) == 0:
        raise ContractError("frame accuracy is undefined for zero frames")
    correct, total = _acc_terms(pred, gt, ignore_label)
    if total == 0:
        raise ContractError("every frame carries the ignore label")
    return 100.0 * correct / total


@dataclass
class MetricsReport:
    f1_10: float
    f1_25: float
    f1_50: float
    edit: float
    acc: float
    edit_mode: str = "per_video"
    acc_mode: str = "pooled"
    num_videos: int = 0

    METRICS = ("f1_10", "f1_25", "f1_50", "edit", "acc")

    def to_record(self):
        lines = [f"{name}={getattr(self, name):.2f}" for name in self.METRICS]
        lines += [f"edit_mode={self.edit_mode}", f"acc_mode={self.acc_mode}", f"num_videos={self.num_videos}"]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_record(cls, text):
        values = dict(line.split("=", 1) for line in text.splitlines() if "=" in line)
        return cls(
            *(float(values[name]) for name in cls.METRICS),
            edit_mode=values.get("edit_mode", "per_video"),
            acc_mode=values.get("acc_mode", "pooled"),
            num_videos=int(values.get("num_videos", 0)),
        )


def evaluate_split(pairs, edit_mode="per_video", ignore_label=None):
    """Aggregate ``(pred, gt)`` pairs over a split.

    F1 pools TP/FP/FN over videos and accuracy pools frames. Edit is the
    per-video mean (``per_video``) or total distance over total normalizer
    (``pooled``).
    """
    if edit_mode not in EDIT_MODES:
        raise ContractError(f"edit_mode must be one of {EDIT_MODES}")
    pairs = list(pairs)
    if not pairs:
        raise ContractError("cannot evaluate an empty split")
    counts = {k: [0, 0, 0] for k in OVERLAPS}
    edits, dist_total, norm_total = [], 0, 0
    correct = total = 0
    for pred, gt in pairs:
        for k in OVERLAPS:
            for i, n in enumerate(match_counts(pred, gt, k, ignore_label)):
                counts[k][i] += n
        dist, norm = _edit_terms(pred, gt, ignore_label)
        edits.append(_edit_value(dist, norm))
        dist_total += dist
        norm_total += norm
        c, n = _acc_terms(pred, gt, ignore_label)
        correct += c
        total += n
    if edit_mode == "per_video":
        edit = float(np.mean(edits))
    else:
        edit = _edit_value(dist_total, norm_total)
    return MetricsReport(
        f1_10=_prf(*counts[10])[2],
        f1_25=_prf(*counts[25])[2],
        f1_50=_prf(*counts[50])[2],
        edit=edit,
        acc=100.0 * correct / total if total else 0.0,
        edit_mode=edit_mode,
        num_videos=len(pairs),
    )
