"""Deterministic synthetic keyword corpus: audio plus exact alignments.

Phones are 200-400 ms spectral blocks (tone chords or band-limited noise)
rendered back to back at the feature frame rate, so the emitted alignment
is exact by construction and the mining and training stages can be
exercised without a real forced aligner. Negative utterances recycle
confusable sequences that overlap the keyword (same prefix, or same final
phone in a different context) so the detector has to discriminate content,
not just spot the final phone.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

from . import audio
from .errors import ConfigError
from .mining import Alignment, write_alignments

FRAME = audio.FRAME_HOP           # 1600 samples per alignment frame
TAIL_SAMPLES = audio.FRAME_LEN - audio.FRAME_HOP  # last window completion

GROUP_TRAIN = "train"
GROUP_TEST_POS = "test_pos"
GROUP_TEST_NEG = "test_neg"


@dataclass
class SynthPhone:
    symbol: str
    kind: str                      # "tones" or "band_noise"
    freqs: tuple[float, ...] = ()  # tone chord (Hz)
    band: tuple[float, float] = (0.0, 0.0)  # noise band (Hz)

    def band_limits(self):
        if self.kind == "tones":
            return min(self.freqs) - 100.0, max(self.freqs) + 100.0
        return self.band


@dataclass
class SynthSpec:
    phones: dict[str, SynthPhone]
    keyword: list[str]
    confusables: list[list[str]]
    fillers: list[str]
    train_count: int = 500
    test_positive_count: int = 80
    test_negative_count: int = 290
    min_negative_test_hours: float = 0.5
    lead_frames: tuple[int, int] = (30, 40)
    tail_frames: tuple[int, int] = (14, 24)
    phone_frames: tuple[int, int] = (2, 4)
    signal_rms: float = 0.15
    noise_floor_db: float = -50.0
    seed: int = 0

    def __post_init__(self):
        if len(self.keyword) < 3:
            raise ConfigError("keyword must have at least 3 phones")
        missing = [p for p in self.keyword if p not in self.phones]
        if missing:
            raise ConfigError(f"keyword phones missing recipes: {missing}")
        for seq in self.confusables:
            if seq == self.keyword:
                raise ConfigError("a confusable equals the keyword")
        if not any(seq[-1] == self.keyword[-1] for seq in self.confusables):
            raise ConfigError(
                "at least one confusable must end with the keyword's final "
                "phone (in a different context)")
        if self.phone_frames[0] < 1:
            raise ConfigError("phone durations must be at least 1 frame")

    @staticmethod
    def from_json(path) -> "SynthSpec":
        with open(path) as f:
            raw = json.load(f)
        return SynthSpec.from_dict(raw)

    @staticmethod
    def from_dict(raw: dict) -> "SynthSpec":
        phones = {}
        for symbol, recipe in raw["phones"].items():
            phones[symbol] = SynthPhone(
                symbol=symbol, kind=recipe["kind"],
                freqs=tuple(recipe.get("freqs", ())),
                band=tuple(recipe.get("band", (0.0, 0.0))),
            )
        fields_ = {k: v for k, v in raw.items() if k != "phones"}
        for key in ("lead_frames", "tail_frames", "phone_frames"):
            if key in fields_:
                fields_[key] = tuple(fields_[key])
        try:
            return SynthSpec(phones=phones, **fields_)
        except TypeError as exc:
            raise ConfigError(f"bad synth spec: {exc}")


def default_spec(seed: int = 0, **overrides) -> SynthSpec:
    """The stock desk-scale corpus: keyword A B C with prefix and
    final-phone confusables."""
    phones = {
        "A": SynthPhone("A", "tones", freqs=(400.0, 520.0)),
        "B": SynthPhone("B", "tones", freqs=(900.0, 1150.0)),
        "C": SynthPhone("C", "tones", freqs=(1700.0, 2100.0)),
        "D": SynthPhone("D", "band_noise", band=(2600.0, 3300.0)),
        "E": SynthPhone("E", "tones", freqs=(3700.0, 4100.0)),
        "F": SynthPhone("F", "band_noise", band=(4700.0, 5500.0)),
        "X": SynthPhone("X", "tones", freqs=(6100.0, 6700.0)),
    }
    base = dict(
        phones=phones,
        keyword=["A", "B", "C"],
        confusables=[["A", "B", "D"], ["X", "B", "C"], ["D", "B", "C"]],
        fillers=["D", "E", "F", "X"],
        seed=seed,
    )
    base.update(overrides)
    return SynthSpec(**base)


# ---------------------------------------------------------------------------
# Rendering
# ---------------------------------------------------------------------------

def _render_phone(phone: SynthPhone, n_samples: int, rms: float, rng
                  ) -> np.ndarray:
    sr = audio.SAMPLE_RATE
    if phone.kind == "tones":
        t = np.arange(n_samples) / sr
        amp = rms * np.sqrt(2.0 / len(phone.freqs))
        out = np.zeros(n_samples)
        for f in phone.freqs:
            out += amp * np.sin(2.0 * np.pi * f * t + rng.uniform(0, 2 * np.pi))
        return out
    if phone.kind == "band_noise":
        white = rng.normal(0.0, 1.0, n_samples)
        spectrum = np.fft.rfft(white)
        freqs = np.fft.rfftfreq(n_samples, d=1.0 / sr)
        lo, hi = phone.band
        spectrum[(freqs < lo) | (freqs > hi)] = 0.0
        shaped = np.fft.irfft(spectrum, n=n_samples)
        level = np.sqrt(np.mean(shaped ** 2))
        if level > 0:
            shaped *= rms / level
        return shaped
    raise ConfigError(f"unknown phone kind {phone.kind!r}")


def _random_phone_seq(spec: SynthSpec, budget_frames: int, rng) -> list[str]:
    """Filler phones whose total duration reaches at least the budget."""
    seq = []
    total = 0
    lo, hi = spec.phone_frames
    while total < budget_frames:
        seq.append(spec.fillers[int(rng.integers(0, len(spec.fillers)))])
        total += int(rng.integers(lo, hi + 1))
    return seq


def _render_utterance(spec: SynthSpec, utt_id: str, phone_seq: list[str],
                      rng) -> tuple[audio.AudioBuffer, Alignment]:
    lo, hi = spec.phone_frames
    durations = [int(rng.integers(lo, hi + 1)) for _ in phone_seq]
    spans = []
    pieces = []
    frame = 0
    for i, (symbol, dur) in enumerate(zip(phone_seq, durations)):
        n = dur * FRAME + (TAIL_SAMPLES if i == len(phone_seq) - 1 else 0)
        pieces.append(_render_phone(spec.phones[symbol], n, spec.signal_rms,
                                    rng))
        spans.append((symbol, frame, frame + dur - 1))
        frame += dur
    samples = np.concatenate(pieces)
    floor = 10.0 ** (spec.noise_floor_db / 20.0)
    samples = samples + rng.normal(0.0, floor, len(samples))
    buf = audio.AudioBuffer(np.clip(samples, -1.0, 1.0).astype(np.float32))
    return buf, Alignment(utt_id, spans, frame)


def _utterance_phones(spec: SynthSpec, with_keyword: bool, center_index: int,
                      rng) -> list[str]:
    lead = int(rng.integers(*spec.lead_frames))
    tail = int(rng.integers(*spec.tail_frames))
    seq = _random_phone_seq(spec, lead, rng)
    if with_keyword:
        seq += list(spec.keyword)
    elif rng.random() < 0.5 and spec.confusables:
        seq += list(spec.confusables[center_index % len(spec.confusables)])
    else:
        seq += _random_phone_seq(spec, sum_frames(spec, rng), rng)
    seq += _random_phone_seq(spec, tail, rng)
    return seq


def sum_frames(spec: SynthSpec, rng) -> int:
    """Duration budget comparable to the keyword, for keyword-free cores."""
    lo, hi = spec.phone_frames
    return len(spec.keyword) * int(rng.integers(lo, hi + 1))


@dataclass
class ManifestRow:
    utt_id: str
    split: str           # train | test
    contains_keyword: int
    group: str           # wav/<group>/<utt_id>.wav
    frames: int = 0


def wav_path(out_dir, row_or_group, utt_id=None) -> str:
    group = getattr(row_or_group, "group", row_or_group)
    uid = utt_id if utt_id is not None else row_or_group.utt_id
    return os.path.join(out_dir, "wav", group, f"{uid}.wav")


def generate(spec: SynthSpec, out_dir) -> list[ManifestRow]:
    """Render the corpus under out_dir: wav/<group>/*.wav, alignments.tsv,
    manifest.tsv. Deterministic for a given spec (seed included).

    Negative test utterances are appended beyond test_negative_count until
    their total duration reaches min_negative_test_hours."""
    rng = np.random.default_rng(spec.seed)
    for group in (GROUP_TRAIN, GROUP_TEST_POS, GROUP_TEST_NEG):
        os.makedirs(os.path.join(out_dir, "wav", group), exist_ok=True)

    rows: list[ManifestRow] = []
    alignments: list[Alignment] = []

    def emit(utt_id, group, split, with_keyword, center_index):
        phones = _utterance_phones(spec, with_keyword, center_index, rng)
        buf, align = _render_utterance(spec, utt_id, phones, rng)
        audio.save_wav(wav_path(out_dir, group, utt_id), buf)
        alignments.append(align)
        rows.append(ManifestRow(utt_id, split, int(with_keyword), group,
                                align.total_frames))
        # hours are counted in frame-hops, matching the evaluation harness
        return align.total_frames * audio.FRAME_HOP_S

    for i in range(spec.train_count):
        emit(f"train_{i:04d}", GROUP_TRAIN, "train", True, i)
    for i in range(spec.test_positive_count):
        emit(f"testp_{i:04d}", GROUP_TEST_POS, "test", True, i)

    neg_seconds = 0.0
    i = 0
    while (i < spec.test_negative_count
           or neg_seconds < spec.min_negative_test_hours * 3600.0):
        neg_seconds += emit(f"testn_{i:04d}", GROUP_TEST_NEG, "test", False, i)
        i += 1

    write_alignments(os.path.join(out_dir, "alignments.tsv"), alignments)
    with open(os.path.join(out_dir, "manifest.tsv"), "w") as f:
        f.write(f"# seed={spec.seed}\n")
        f.write("utt_id\tsplit\tcontains_keyword\n")
        for row in rows:
            f.write(f"{row.utt_id}\t{row.split}\t{row.contains_keyword}\n")
    return rows


def read_manifest(path) -> list[ManifestRow]:
    rows = []
    with open(path) as f:
        lines = [ln.rstrip("\n") for ln in f
                 if ln.strip() and not ln.startswith("#")]
    for line in lines[1:]:
        utt_id, split, kw = line.split("\t")
        kw = int(kw)
        if split == "train":
            group = GROUP_TRAIN
        else:
            group = GROUP_TEST_POS if kw else GROUP_TEST_NEG
        rows.append(ManifestRow(utt_id, split, kw, group))
    return rows
