"""Mining training segments from forced-alignment phone spans.

Frame labeling: inside every keyword occurrence, the frames of the final
keyword phone are labeled 1, extended past the keyword end E by
min(run, 5) frames (run = frame length of the final phone's span) to
absorb alignment error; the extended end is Ê. The same phone symbol
outside keyword context stays 0.

A positive segment is a window of exactly R frames that contains the whole
keyword and ends on a label-1 frame at or after E. Three negative kinds
make the training discriminative:

* kind 1 ends inside the keyword (between S and the last frame of the
  penultimate phone),
* kind 2 starts inside the keyword (second phone start .. E) and runs past
  its end,
* kind 3 lies entirely after Ê.

Windows that overrun the utterance are padded with silence or faint white
noise (a per-segment coin flip), realized as MFCC frames of synthesized
pad audio so padding lives in the same feature space as real frames.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from . import audio
from .errors import FormatError, PreconditionError

POSITIVE = "positive"
NEG_END_EARLY = "neg1"     # ends before the keyword end
NEG_START_INSIDE = "neg2"  # starts inside, ends after the keyword end
NEG_AFTER = "neg3"         # entirely after the extended keyword end
NEGATIVE_KINDS = (NEG_END_EARLY, NEG_START_INSIDE, NEG_AFTER)

# 1 positive + 20 negatives per utterance, split across the three kinds.
NEGATIVE_QUOTA = {NEG_END_EARLY: 7, NEG_START_INSIDE: 7, NEG_AFTER: 6}

MAX_LABEL_EXTENSION = 5
PAD_NOISE_DBFS = -30.0


@dataclass
class Alignment:
    """Per-frame phone spans for one utterance; frames at the 100 ms hop.

    Spans are (phone, start_frame, end_frame) with inclusive ends; they
    must tile [0, total_frames) contiguously in order.
    """

    utt_id: str
    spans: list[tuple[str, int, int]]
    total_frames: int

    def __post_init__(self):
        expected = 0
        for phone, start, end in self.spans:
            if start != expected or end < start:
                raise FormatError(
                    f"{self.utt_id}: phone spans must be contiguous and "
                    f"ordered (bad span {phone} [{start}, {end}])")
            expected = end + 1
        if expected != self.total_frames:
            raise FormatError(
                f"{self.utt_id}: spans cover {expected} frames, expected "
                f"{self.total_frames}")

    @property
    def phones(self):
        return [p for p, _, _ in self.spans]


@dataclass
class KeywordSpan:
    """One keyword occurrence: S..E plus the extended end Ê."""

    start: int                      # S: first frame of the first phone
    end: int                        # E: last frame of the final phone
    extended_end: int               # Ê = min(E + min(run, 5), last frame)
    last_phone_run: int             # frame length of the final phone's span
    phone_bounds: tuple[tuple[int, int], ...]  # (start, end) per keyword phone


@dataclass
class Segment:
    """A mined window of exactly R frames (before padding is applied)."""

    utt_id: str
    kind: str
    start_frame: int
    end_frame: int
    label: int
    offset_target: float  # (end_frame - S)/R for positives, else nan
    left_pad: int
    right_pad: int


def parse_keyword(text) -> list[str]:
    """Split a keyword phone sequence; at least two phones required."""
    phones = text.split() if isinstance(text, str) else list(text)
    if len(phones) < 2:
        raise PreconditionError(
            f"keyword needs at least 2 phones, got {phones}")
    return phones


def find_keyword_spans(align: Alignment, keyword) -> list[KeywordSpan]:
    """All (non-overlapping, left-to-right) occurrences of the keyword's
    phone sequence in the alignment."""
    kw = parse_keyword(keyword)
    phones = align.phones
    spans = []
    i = 0
    k = len(kw)
    while i + k <= len(phones):
        if phones[i:i + k] == kw:
            bounds = tuple((s, e) for _, s, e in align.spans[i:i + k])
            start = bounds[0][0]
            end = bounds[-1][1]
            run = bounds[-1][1] - bounds[-1][0] + 1
            extended = min(end + min(run, MAX_LABEL_EXTENSION),
                           align.total_frames - 1)
            spans.append(KeywordSpan(start, end, extended, run, bounds))
            i += k
        else:
            i += 1
    return spans


def frame_labels(align: Alignment, keyword) -> np.ndarray:
    """Per-frame 0/1 vector: 1 exactly on the final keyword phone's frames
    inside each occurrence plus its (E, Ê] extension."""
    labels = np.zeros(align.total_frames, dtype=np.int8)
    for span in find_keyword_spans(align, keyword):
        last_start = span.phone_bounds[-1][0]
        labels[last_start:span.extended_end + 1] = 1
    return labels


# ---------------------------------------------------------------------------
# Admissible index sets. These are exposed so tests can compare them with
# brute-force window enumeration.
# ---------------------------------------------------------------------------

def admissible_positive_ends(align: Alignment, keyword, span: KeywordSpan,
                             receptive_field: int) -> list[int]:
    """Frames e with label 1, e >= E, and e - R + 1 <= S (so the whole
    keyword fits in the window ending at e)."""
    labels = frame_labels(align, keyword)
    return [e for e in range(span.end, align.total_frames)
            if labels[e] == 1 and e - receptive_field + 1 <= span.start]


def admissible_negative_indices(align: Alignment, span: KeywordSpan,
                                receptive_field: int, kind: str) -> list[int]:
    """Admissible end frames (kind 1) or start frames (kinds 2 and 3)."""
    r = receptive_field
    if kind == NEG_END_EARLY:
        penultimate_end = span.phone_bounds[-2][1]
        return list(range(span.start, penultimate_end + 1))
    if kind == NEG_START_INSIDE:
        second_start = span.phone_bounds[1][0]
        return [s for s in range(second_start, span.end + 1)
                if s + r - 1 > span.end]
    if kind == NEG_AFTER:
        return list(range(span.extended_end + 1, align.total_frames))
    raise PreconditionError(f"unknown negative kind {kind!r}")


# ---------------------------------------------------------------------------
# Mining
# ---------------------------------------------------------------------------

def _choice(rng, values):
    return int(values[rng.integers(0, len(values))])


def mine_positive(align: Alignment, keyword, span: KeywordSpan,
                  receptive_field: int, rng) -> Segment | None:
    """One positive segment, or None when no admissible end exists (for
    instance when the keyword is longer than the window)."""
    ends = admissible_positive_ends(align, keyword, span, receptive_field)
    if not ends:
        return None
    e = _choice(rng, ends)
    start = e - receptive_field + 1
    return Segment(
        utt_id=align.utt_id, kind=POSITIVE,
        start_frame=start, end_frame=e, label=1,
        offset_target=(e - span.start) / receptive_field,
        left_pad=max(0, -start), right_pad=0,
    )


def mine_negative(align: Alignment, keyword, span: KeywordSpan,
                  receptive_field: int, kind: str, rng) -> Segment | None:
    """One negative segment of the requested kind, or None when the kind's
    admissible range is empty."""
    indices = admissible_negative_indices(align, span, receptive_field, kind)
    if not indices:
        return None
    r = receptive_field
    pick = _choice(rng, indices)
    if kind == NEG_END_EARLY:
        start, end = pick - r + 1, pick
    else:
        start, end = pick, pick + r - 1
    return Segment(
        utt_id=align.utt_id, kind=kind,
        start_frame=start, end_frame=end, label=0,
        offset_target=math.nan,
        left_pad=max(0, -start),
        right_pad=max(0, end - (align.total_frames - 1)),
    )


def _random_window(align: Alignment, receptive_field: int, rng) -> Segment:
    """Fallback for keyword-free utterances: a random label-0 window."""
    start = int(rng.integers(0, align.total_frames))
    end = start + receptive_field - 1
    return Segment(
        utt_id=align.utt_id, kind=NEG_AFTER,
        start_frame=start, end_frame=end, label=0,
        offset_target=math.nan,
        left_pad=0, right_pad=max(0, end - (align.total_frames - 1)),
    )


def mine_utterance(align: Alignment, keyword, receptive_field: int, rng,
                   negatives_per_utterance: int = 20) -> list[Segment]:
    """1 positive + `negatives_per_utterance` negatives for one utterance.

    The negative quota is split 7/7/6 across the kinds; quota for a kind
    with an empty admissible range is redistributed over the remaining
    kinds. Utterances without a keyword occurrence contribute
    1 + negatives_per_utterance random label-0 windows; utterances where
    no positive window exists contribute negatives only.
    """
    spans = find_keyword_spans(align, keyword)
    if not spans:
        return [_random_window(align, receptive_field, rng)
                for _ in range(1 + negatives_per_utterance)]
    span = spans[0]

    segments = []
    positive = mine_positive(align, keyword, span, receptive_field, rng)
    if positive is not None:
        segments.append(positive)

    available = [k for k in NEGATIVE_KINDS
                 if admissible_negative_indices(align, span, receptive_field,
                                                k)]
    quota = dict.fromkeys(NEGATIVE_KINDS, 0)
    if not available:
        return segments + [_random_window(align, receptive_field, rng)
                           for _ in range(negatives_per_utterance)]
    base = {k: round(negatives_per_utterance * NEGATIVE_QUOTA[k]
                     / sum(NEGATIVE_QUOTA.values()))
            for k in NEGATIVE_KINDS}
    # distribute, moving quota of unavailable kinds onto available ones
    pool = 0
    for k in NEGATIVE_KINDS:
        if k in available:
            quota[k] = base[k]
        else:
            pool += base[k]
    for i in range(pool):
        quota[available[i % len(available)]] += 1
    drift = negatives_per_utterance - sum(quota.values())
    quota[available[0]] += drift

    for kind in NEGATIVE_KINDS:
        for _ in range(quota[kind]):
            seg = mine_negative(align, keyword, span, receptive_field, kind,
                                rng)
            assert seg is not None  # kind verified available above
            segments.append(seg)
    return segments


# ---------------------------------------------------------------------------
# Feature windows with padding
# ---------------------------------------------------------------------------

_SILENCE_COLUMN = None


def silence_feature_column() -> np.ndarray:
    """MFCC column of an all-zero analysis window (a constant vector)."""
    global _SILENCE_COLUMN
    if _SILENCE_COLUMN is None:
        buf = audio.AudioBuffer(np.zeros(audio.FRAME_LEN, dtype=np.float32))
        _SILENCE_COLUMN = audio.mfcc(buf).coeffs[:, 0].copy()
    return _SILENCE_COLUMN


def noise_feature_columns(count: int, rng) -> np.ndarray:
    """MFCC columns of white noise at the pad level (-30 dBFS)."""
    sigma = 10.0 ** (PAD_NOISE_DBFS / 20.0)
    n = (count - 1) * audio.FRAME_HOP + audio.FRAME_LEN
    samples = rng.normal(0.0, sigma, n).astype(np.float32)
    return audio.mfcc(audio.AudioBuffer(samples)).coeffs


def extract_window(features: np.ndarray, segment: Segment, rng) -> np.ndarray:
    """The [16 x R] feature window for a segment, padding out-of-range
    frames with silence or noise (one coin flip per padded segment)."""
    coeffs = getattr(features, "coeffs", features)
    t = coeffs.shape[1]
    r = segment.end_frame - segment.start_frame + 1
    lo = max(0, segment.start_frame)
    hi = min(t - 1, segment.end_frame)
    body = coeffs[:, lo:hi + 1]

    left, right = segment.left_pad, segment.right_pad
    if left == 0 and right == 0:
        return body
    use_noise = bool(rng.integers(0, 2))
    if use_noise:
        pad_cols = noise_feature_columns(left + right, rng)
    else:
        pad_cols = np.repeat(silence_feature_column()[:, None],
                             left + right, axis=1)
    window = np.concatenate(
        [pad_cols[:, :left], body, pad_cols[:, left:]], axis=1)
    assert window.shape[1] == r
    return window


@dataclass
class Utterance:
    """What the batch composer needs to know about one utterance."""

    utt_id: str
    features: np.ndarray  # [16 x T]
    alignment: Alignment


def compose_batch(utterances, keyword, receptive_field: int, rng
                  ) -> list[tuple[Segment, np.ndarray]]:
    """Mine every utterance (1 positive + 20 negatives each) and extract
    the padded feature windows. Deterministic for a given rng state."""
    batch = []
    for utt in utterances:
        for segment in mine_utterance(utt.alignment, keyword,
                                      receptive_field, rng):
            window = extract_window(utt.features, segment, rng)
            batch.append((segment, window))
    return batch


# ---------------------------------------------------------------------------
# TSV formats
# ---------------------------------------------------------------------------

def _data_rows(path):
    """Rows of a TSV file, skipping `#`-comment lines; first row is the
    header."""
    with open(path, newline="") as f:
        rows = [row for row in csv.reader(f, delimiter="\t")
                if row and not row[0].startswith("#")]
    if not rows:
        raise FormatError(f"{path}: empty TSV")
    return rows


def read_alignments(path) -> dict[str, Alignment]:
    """Alignment TSV: header `utt_id phone start_frame end_frame`, one row
    per phone span, inclusive end frames."""
    rows = _data_rows(path)
    header = rows[0]
    if header[:4] != ["utt_id", "phone", "start_frame", "end_frame"]:
        raise FormatError(f"{path}: unexpected alignment header {header}")
    per_utt: dict[str, list[tuple[str, int, int]]] = {}
    for row in rows[1:]:
        if len(row) < 4:
            raise FormatError(f"{path}: short alignment row {row}")
        utt_id, phone, start, end = row[0], row[1], int(row[2]), int(row[3])
        per_utt.setdefault(utt_id, []).append((phone, start, end))
    return {
        utt_id: Alignment(utt_id, spans, spans[-1][2] + 1)
        for utt_id, spans in per_utt.items()
    }


def write_alignments(path, alignments) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f, delimiter="\t", lineterminator="\n")
        writer.writerow(["utt_id", "phone", "start_frame", "end_frame"])
        for align in alignments:
            for phone, start, end in align.spans:
                writer.writerow([align.utt_id, phone, start, end])


MANIFEST_HEADER = ["utt_id", "kind", "start_frame", "end_frame", "label",
                   "offset_target", "left_pad", "right_pad"]


def write_segment_manifest(path, segments, seed=None) -> None:
    with open(path, "w", newline="") as f:
        if seed is not None:
            f.write(f"# seed={seed}\n")
        writer = csv.writer(f, delimiter="\t", lineterminator="\n")
        writer.writerow(MANIFEST_HEADER)
        for seg in segments:
            offset = "nan" if math.isnan(seg.offset_target) \
                else f"{seg.offset_target:.8f}"
            writer.writerow([seg.utt_id, seg.kind, seg.start_frame,
                             seg.end_frame, seg.label, offset,
                             seg.left_pad, seg.right_pad])


def read_segment_manifest(path) -> list[Segment]:
    rows = _data_rows(path)
    if rows[0] != MANIFEST_HEADER:
        raise FormatError(f"{path}: unexpected manifest header {rows[0]}")
    segments = []
    for row in rows[1:]:
        segments.append(Segment(
            utt_id=row[0], kind=row[1],
            start_frame=int(row[2]), end_frame=int(row[3]),
            label=int(row[4]), offset_target=float(row[5]),
            left_pad=int(row[6]), right_pad=int(row[7]),
        ))
    return segments
