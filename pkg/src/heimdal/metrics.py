"""Trigger decoding, truth matching, DET and IOU-vs-TPR curves.

Events are decoded once at a low base threshold; the DET sweep then keeps
only events whose peak score clears each candidate threshold (the sorted
union of all event peak scores), which makes false-accept counts
non-increasing and false-reject counts non-decreasing in the threshold by
construction.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .audio import FRAME_HOP_S
from .errors import PreconditionError
from .streaming import stream_file

MERGE_GAP_FRAMES = 5  # runs separated by fewer below-threshold frames merge


@dataclass
class TriggerEvent:
    """One detection: where the score peaked and the predicted window."""

    peak_frame: int         # input-frame index of the window end
    peak_score: float
    predicted_start: int    # peak_frame - round(offset * R), clamped
    predicted_end: int

    @property
    def window(self):
        return self.predicted_start, self.predicted_end


@dataclass
class GroundTruthWindow:
    utt_id: str
    start: int
    end: int


@dataclass
class DetPoint:
    threshold: float
    frr: float
    fa_per_hour: float


def decode_events(scores, threshold, receptive_field,
                  merge_gap=MERGE_GAP_FRAMES) -> list[TriggerEvent]:
    """Turn per-frame (frame_index, prob, offset) scores into events.

    Maximal runs of frames with prob >= threshold become one event each;
    runs separated by fewer than merge_gap below-threshold frames are
    merged. The peak is the earliest maximum inside the run; the offset
    read at the peak gives the predicted start.
    """
    hits = [(f, p, o) for f, p, o in scores if p >= threshold]
    if not hits:
        return []
    runs = [[hits[0]]]
    for entry in hits[1:]:
        if entry[0] - runs[-1][-1][0] - 1 < merge_gap:
            runs[-1].append(entry)
        else:
            runs.append([entry])

    events = []
    for run in runs:
        peak_frame, peak_score, peak_offset = run[0]
        for f, p, o in run[1:]:
            if p > peak_score:
                peak_frame, peak_score, peak_offset = f, p, o
        back = max(0, int(round(peak_offset * receptive_field)))
        events.append(TriggerEvent(
            peak_frame=peak_frame,
            peak_score=float(peak_score),
            predicted_start=peak_frame - back,
            predicted_end=peak_frame,
        ))
    return events


def match(events, truths):
    """Classify events against ground-truth windows.

    An event whose predicted window intersects a truth window is a true
    positive; each truth takes at most one (its highest-scoring
    overlapping event) and further overlapping events are discarded
    without becoming false accepts. Events overlapping nothing are false
    accepts; truths nobody claimed are false rejects.

    Returns (tp, fa, fr): tp as (event, truth) pairs, fa as events, fr as
    truths. Independent of the order of the inputs.
    """
    ordered = sorted(events,
                     key=lambda e: (-e.peak_score, e.peak_frame,
                                    e.predicted_start))
    claimed = [False] * len(truths)
    tp, fa = [], []
    for event in ordered:
        overlapping = [i for i, t in enumerate(truths)
                       if _overlaps(event.window, (t.start, t.end))]
        if not overlapping:
            fa.append(event)
            continue
        free = [i for i in overlapping if not claimed[i]]
        if free:
            best = min(free)
            claimed[best] = True
            tp.append((event, truths[best]))
        # else: duplicate hit on an already-claimed truth; discard
    fr = [t for i, t in enumerate(truths) if not claimed[i]]
    return tp, fa, fr


def _overlaps(a, b):
    return a[0] <= b[1] and b[0] <= a[1]


def window_iou(a, b) -> float:
    """Intersection over union of two inclusive frame windows."""
    inter = min(a[1], b[1]) - max(a[0], b[0]) + 1
    if inter <= 0:
        return 0.0
    union = (a[1] - a[0] + 1) + (b[1] - b[0] + 1) - inter
    return inter / union


@dataclass
class DetCurve:
    points: list[DetPoint]
    frr_at_operating_point: float
    operating_threshold: float
    op_fa_per_hour: float       # the requested operating point
    total_positives: int


def det_curve(positive_tracks, negative_events, negative_hours,
              op_fa_per_hour=12.0) -> DetCurve:
    """DET sweep over the union of event peak scores.

    positive_tracks: list of (events, truths) per positive utterance
    (events pre-decoded at the base threshold). negative_events: list of
    event lists from keyword-free audio. At each threshold only events
    with peak_score >= threshold survive; FRR = FR / total truths and
    FA/hr = surviving negative events / negative_hours. The FRR at the
    requested operating point comes from linear interpolation along the
    FA/hr axis.
    """
    if negative_hours <= 0:
        raise PreconditionError("negative_hours must be positive")
    total_truths = sum(len(truths) for _, truths in positive_tracks)
    if total_truths == 0:
        raise PreconditionError(
            "no ground-truth keyword windows: FRR is undefined")

    all_scores = sorted({e.peak_score
                         for events, _ in positive_tracks for e in events}
                        | {e.peak_score
                           for events in negative_events for e in events},
                        reverse=True)
    if not all_scores:
        all_scores = [1.0]

    neg_scores = np.sort(np.array(
        [e.peak_score for events in negative_events for e in events]))
    points = []
    for threshold in all_scores:
        fr = 0
        for events, truths in positive_tracks:
            kept = [e for e in events if e.peak_score >= threshold]
            _, _, missed = match(kept, truths)
            fr += len(missed)
        fa = len(neg_scores) - np.searchsorted(neg_scores, threshold,
                                               side="left")
        points.append(DetPoint(
            threshold=threshold,
            frr=fr / total_truths,
            fa_per_hour=float(fa) / negative_hours,
        ))

    frr_at_op = _interp_frr(points, op_fa_per_hour)
    op_threshold = _operating_threshold(points, op_fa_per_hour)
    return DetCurve(points, frr_at_op, op_threshold, op_fa_per_hour,
                    total_truths)


def _interp_frr(points, op_fa_per_hour) -> float:
    """FRR at the requested FA/hr, linearly interpolated (clamped at the
    sweep edges). Duplicate FA/hr values collapse to their best FRR."""
    best = {}
    for p in points:
        if p.fa_per_hour not in best or p.frr < best[p.fa_per_hour]:
            best[p.fa_per_hour] = p.frr
    fa = np.array(sorted(best))
    frr = np.array([best[v] for v in fa])
    return float(np.interp(op_fa_per_hour, fa, frr))


def _operating_threshold(points, op_fa_per_hour) -> float:
    """Lowest swept threshold whose FA/hr stays within the operating
    point (the most sensitive admissible setting); falls back to the
    strictest threshold when even that is over budget."""
    admissible = [p for p in points if p.fa_per_hour <= op_fa_per_hour]
    if not admissible:
        return max(p.threshold for p in points)
    return min(p.threshold for p in admissible)


IOU_GRID = np.round(np.arange(0, 101) * 0.01, 2)


def iou_tpr_curve(tp_pairs, total_positives):
    """TPR(tau) = fraction of all positives whose detection has
    IOU >= tau, for tau on a 0.00..1.00 grid; plus the trapezoidal AUC.

    tp_pairs: (event, truth) pairs from match() at the operating
    threshold. Returns (taus, tprs, auc)."""
    ious = np.array([
        window_iou(event.window, (truth.start, truth.end))
        for event, truth in tp_pairs
    ])
    if total_positives <= 0:
        raise PreconditionError("total_positives must be positive")
    tprs = np.array([(ious >= tau).sum() / total_positives
                     for tau in IOU_GRID])
    trapezoid = getattr(np, "trapezoid", None) or np.trapz
    auc = float(trapezoid(tprs, IOU_GRID))
    return IOU_GRID.copy(), tprs, auc


# ---------------------------------------------------------------------------
# Output files
# ---------------------------------------------------------------------------

def write_det_csv(path, curve: DetCurve, seed=None) -> None:
    with open(path, "w") as f:
        if seed is not None:
            f.write(f"# seed={seed}\n")
        f.write(f"# frr_at_{curve.op_fa_per_hour:g}fa_per_hr="
                f"{curve.frr_at_operating_point:.6f}\n")
        f.write("threshold,frr,fa_per_hour\n")
        for p in curve.points:
            f.write(f"{p.threshold:.8f},{p.frr:.6f},{p.fa_per_hour:.6f}\n")


def write_iou_csv(path, taus, tprs, auc, seed=None) -> None:
    with open(path, "w") as f:
        if seed is not None:
            f.write(f"# seed={seed}\n")
        f.write(f"# auc={auc:.6f}\n")
        f.write("tau,tpr\n")
        for tau, tpr in zip(taus, tprs):
            f.write(f"{tau:.2f},{tpr:.6f}\n")


# ---------------------------------------------------------------------------
# Corpus-level driver
# ---------------------------------------------------------------------------

@dataclass
class EvalResult:
    det: DetCurve
    iou_taus: np.ndarray
    iou_tprs: np.ndarray
    iou_auc: float
    negative_hours: float
    tp_at_operating_point: int


def evaluate_detector(weights, config, positive_items, negative_items,
                      op_fa_per_hour=12.0, base_threshold=0.1,
                      merge_gap=MERGE_GAP_FRAMES, jobs=1) -> EvalResult:
    """Score a labeled corpus end to end.

    positive_items: (utt_id, features, truths) triples; negative_items:
    (utt_id, features) pairs of keyword-free audio. Hours of negative
    audio are counted as frames times the 100 ms hop. Scoring fans out
    over `jobs` worker threads (states are per-utterance; weights are
    shared read-only); results are aggregated in utt_id order regardless
    of job count.
    """
    from .model import Model

    receptive_field = Model(config).receptive_field()
    positive_items = sorted(positive_items, key=lambda item: item[0])
    negative_items = sorted(negative_items, key=lambda item: item[0])

    def score(features):
        coeffs = getattr(features, "coeffs", features)
        if coeffs.shape[1] < receptive_field:
            return []
        scores = stream_file(weights, config, coeffs)
        return decode_events(scores, base_threshold, receptive_field,
                             merge_gap)

    pos_feats = [item[1] for item in positive_items]
    neg_feats = [item[1] for item in negative_items]
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            pos_events = list(pool.map(score, pos_feats))
            neg_events = list(pool.map(score, neg_feats))
    else:
        pos_events = [score(f) for f in pos_feats]
        neg_events = [score(f) for f in neg_feats]

    positive_tracks = [(events, item[2])
                       for events, item in zip(pos_events, positive_items)]
    negative_hours = sum(
        getattr(item[1], "coeffs", item[1]).shape[1] * FRAME_HOP_S
        for item in negative_items) / 3600.0

    curve = det_curve(positive_tracks, neg_events, negative_hours,
                      op_fa_per_hour)

    tp_pairs = []
    for events, truths in positive_tracks:
        kept = [e for e in events if e.peak_score >= curve.operating_threshold]
        tp, _, _ = match(kept, truths)
        tp_pairs.extend(tp)
    taus, tprs, auc = iou_tpr_curve(tp_pairs, curve.total_positives)
    return EvalResult(curve, taus, tprs, auc, negative_hours, len(tp_pairs))


def write_curve_svg(path, xs, ys, xlabel, ylabel, title) -> None:
    """Minimal standalone SVG line plot (axes, ticks, one polyline)."""
    width, height = 640, 480
    margin = 60
    xs = np.asarray(xs, dtype=float)
    ys = np.asarray(ys, dtype=float)
    x_max = float(xs.max()) if len(xs) and xs.max() > 0 else 1.0
    y_max = float(ys.max()) if len(ys) and ys.max() > 0 else 1.0

    def sx(x):
        return margin + (width - 2 * margin) * x / x_max

    def sy(y):
        return height - margin - (height - 2 * margin) * y / y_max

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" '
        f'height="{height}" viewBox="0 0 {width} {height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<text x="{width / 2:.0f}" y="24" text-anchor="middle" '
        f'font-size="16">{title}</text>',
        f'<line x1="{margin}" y1="{height - margin}" x2="{width - margin}" '
        f'y2="{height - margin}" stroke="black"/>',
        f'<line x1="{margin}" y1="{margin}" x2="{margin}" '
        f'y2="{height - margin}" stroke="black"/>',
        f'<text x="{width / 2:.0f}" y="{height - 16}" text-anchor="middle" '
        f'font-size="12">{xlabel}</text>',
        f'<text x="18" y="{height / 2:.0f}" text-anchor="middle" '
        f'font-size="12" transform="rotate(-90 18 {height / 2:.0f})">'
        f'{ylabel}</text>',
    ]
    for i in range(5):
        xv = x_max * i / 4
        yv = y_max * i / 4
        parts.append(
            f'<text x="{sx(xv):.1f}" y="{height - margin + 16}" '
            f'text-anchor="middle" font-size="10">{xv:.3g}</text>')
        parts.append(
            f'<text x="{margin - 6}" y="{sy(yv) + 4:.1f}" '
            f'text-anchor="end" font-size="10">{yv:.3g}</text>')
    if len(xs):
        coords = " ".join(f"{sx(x):.1f},{sy(y):.1f}" for x, y in
                          sorted(zip(xs, ys)))
        parts.append(f'<polyline points="{coords}" fill="none" '
                     f'stroke="steelblue" stroke-width="1.5"/>')
    parts.append("</svg>")
    with open(path, "w") as f:
        f.write("\n".join(parts) + "\n")
