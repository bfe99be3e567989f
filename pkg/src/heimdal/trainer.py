"""Training: focal classification loss with a gated offset regression,
Adam with cosine annealing, and the epoch loop over mined segments.

Per segment the loss is

    L = (1 - p_t)^gamma * BCE(p, y) + (d_hat - d)^2 * I(y = 1)

with p the predicted keyword probability, p_t the probability assigned to
the true class, gamma = 4 by default, and d the start offset normalized by
the receptive field. Logs are clamped at 1e-12. Batch reduction is the
mean over segments.
"""

from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import dataclass

import numpy as np

from . import audio, mining, model, ops
from .errors import ConfigError, FormatError

GAMMA_DEFAULT = 4.0
LOG_CLAMP = 1e-12
ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8
BASE_LR = 0.01
SCHEDULE_EPOCHS = 100


@dataclass
class LossInputs:
    """Scalar loss probe: one logit/label pair plus the offset pair."""

    detection_logit: float
    true_label: int
    predicted_offset: float = 0.0
    target_offset: float = 0.0
    gamma: float = GAMMA_DEFAULT


def focal_offset_loss(logits, labels, predicted_offsets, target_offsets,
                      gamma=GAMMA_DEFAULT):
    """Vectorized loss and analytic gradients.

    Returns (per_element_loss, grad_logits, grad_offsets, cls_part,
    offset_part); all arrays share the input shape. The offset term (and
    its gradient) is exactly zero wherever the label is 0, so nan targets
    on negatives are harmless.
    """
    logits = np.asarray(logits)
    y = np.asarray(labels).astype(logits.dtype)
    d_hat = np.asarray(predicted_offsets)
    d = np.where(y > 0, np.asarray(target_offsets), 0.0).astype(logits.dtype)

    p = ops.sigmoid(logits)
    pt = y * p + (1.0 - y) * (1.0 - p)
    ptc = np.maximum(pt, LOG_CLAMP)
    one_minus = 1.0 - pt

    cls = one_minus ** gamma * (-np.log(ptc))
    diff = d_hat - d
    off = y * diff * diff
    loss = cls + off

    # d cls / d pt, including the focal factor's dependence on pt
    dcls_dpt = -(one_minus ** gamma) / ptc
    if gamma != 0.0:
        dcls_dpt = dcls_dpt + gamma * one_minus ** (gamma - 1.0) * np.log(ptc)
    dpt_dlogit = p * (1.0 - p) * (2.0 * y - 1.0)
    grad_logits = dcls_dpt * dpt_dlogit
    grad_offsets = 2.0 * y * diff
    return loss, grad_logits, grad_offsets, cls, off


def loss(inputs: LossInputs):
    """Scalar form: (value, grad wrt logit, grad wrt predicted offset)."""
    value, g_logit, g_off, _, _ = focal_offset_loss(
        np.float64(inputs.detection_logit), inputs.true_label,
        np.float64(inputs.predicted_offset), inputs.target_offset,
        inputs.gamma)
    return float(value), float(g_logit), float(g_off)


def cosine_lr(epoch: int, base_lr: float = BASE_LR,
              total: int = SCHEDULE_EPOCHS) -> float:
    """Half-cosine decay from base_lr at epoch 0 to 0 at epoch `total`."""
    if not 0 <= epoch <= total:
        raise ConfigError(f"epoch {epoch} outside schedule [0, {total}]")
    return max(0.0, 0.5 * base_lr * (1.0 + math.cos(math.pi * epoch / total)))


class Adam:
    """Standard Adam with bias correction over a dict of parameters."""

    def __init__(self, names, beta1=ADAM_BETA1, beta2=ADAM_BETA2,
                 eps=ADAM_EPS):
        self.names = list(names)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.step_count = 0
        self.m = {}
        self.v = {}

    def step(self, params: dict, grads: dict, lr: float) -> None:
        self.step_count += 1
        t = self.step_count
        bias1 = 1.0 - self.beta1 ** t
        bias2 = 1.0 - self.beta2 ** t
        for name in self.names:
            g = grads[name].astype(np.float32, copy=False)
            if name not in self.m:
                self.m[name] = np.zeros_like(g)
                self.v[name] = np.zeros_like(g)
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            update = (m / bias1) / (np.sqrt(v / bias2) + self.eps)
            params[name] -= np.float32(lr) * update


def adam_step(state: Adam, params: dict, grads: dict, lr: float) -> dict:
    state.step(params, grads, lr)
    return params


# ---------------------------------------------------------------------------
# Dataset and training loop
# ---------------------------------------------------------------------------

@dataclass
class TrainConfig:
    data_dir: str
    keyword: list[str]
    epochs: int = SCHEDULE_EPOCHS
    batch_utterances: int = 64
    seed: int = 0
    base_lr: float = BASE_LR
    gamma: float = GAMMA_DEFAULT
    augment_gain: bool = False
    augment_noise_dir: str | None = None
    snr_db_range: tuple[float, float] = (5.0, 20.0)

    @staticmethod
    def from_json(path) -> "TrainConfig":
        with open(path) as f:
            raw = json.load(f)
        try:
            raw["keyword"] = mining.parse_keyword(raw["keyword"])
            if "snr_db_range" in raw:
                raw["snr_db_range"] = tuple(raw["snr_db_range"])
            return TrainConfig(**raw)
        except (KeyError, TypeError) as exc:
            raise ConfigError(f"{path}: bad training config ({exc})")

    @property
    def cached_features(self) -> bool:
        """Featurize once up front when no augmentation is requested."""
        return not self.augment_gain and self.augment_noise_dir is None


@dataclass
class EpochLogRow:
    epoch: int
    lr: float
    mean_loss: float
    mean_cls_loss: float
    mean_offset_loss: float


def write_epoch_log(path, rows, seed=None) -> None:
    with open(path, "w", newline="") as f:
        if seed is not None:
            f.write(f"# seed={seed}\n")
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["epoch", "lr", "mean_loss", "mean_cls_loss",
                         "mean_offset_loss"])
        for row in rows:
            writer.writerow([row.epoch, f"{row.lr:.8f}",
                             f"{row.mean_loss:.6f}",
                             f"{row.mean_cls_loss:.6f}",
                             f"{row.mean_offset_loss:.6f}"])


class Dataset:
    """Training corpus access: WAVs plus one alignment TSV and a manifest.

    Expected layout under data_dir (what `heimdal synth` emits):
    wav/<group>/<utt_id>.wav, alignments.tsv, and manifest.tsv with
    columns utt_id/split/contains_keyword.
    """

    def __init__(self, data_dir, split="train"):
        from . import synth

        self.data_dir = data_dir
        manifest_path = os.path.join(data_dir, "manifest.tsv")
        align_path = os.path.join(data_dir, "alignments.tsv")
        if not os.path.exists(manifest_path):
            raise ConfigError(f"{data_dir}: missing manifest.tsv")
        self.alignments = mining.read_alignments(align_path)
        self.utt_ids = []
        self._groups = {}
        for row in synth.read_manifest(manifest_path):
            self._groups[row.utt_id] = row.group
            if row.split == split:
                self.utt_ids.append(row.utt_id)
        if not self.utt_ids:
            raise ConfigError(f"{data_dir}: no utterances in split {split!r}")
        self._audio_cache: dict[str, audio.AudioBuffer] = {}
        self._feature_cache: dict[str, np.ndarray] = {}

    def load_audio(self, utt_id) -> audio.AudioBuffer:
        if utt_id not in self._audio_cache:
            path = os.path.join(self.data_dir, "wav", self._groups[utt_id],
                                f"{utt_id}.wav")
            self._audio_cache[utt_id] = audio.load_wav(path)
        return self._audio_cache[utt_id]

    def features(self, utt_id) -> np.ndarray:
        if utt_id not in self._feature_cache:
            feats = audio.mfcc(self.load_audio(utt_id)).coeffs
            self._feature_cache[utt_id] = feats
        return self._feature_cache[utt_id]

    def alignment(self, utt_id) -> mining.Alignment:
        try:
            return self.alignments[utt_id]
        except KeyError:
            raise FormatError(f"no alignment for utterance {utt_id!r}")


def _load_noise_pool(noise_dir):
    pool = []
    for name in sorted(os.listdir(noise_dir)):
        if name.endswith(".wav"):
            pool.append(audio.load_wav(os.path.join(noise_dir, name)))
    if not pool:
        raise ConfigError(f"{noise_dir}: no WAV files for noise augmentation")
    return pool


def _utterance_features(dataset, cfg: TrainConfig, utt_id, rng, noise_pool):
    """Features for one utterance, applying on-the-fly time-domain
    augmentation when configured."""
    if cfg.cached_features:
        return dataset.features(utt_id)
    buf = dataset.load_audio(utt_id)
    if cfg.augment_gain:
        gain = float(rng.uniform(audio.GAIN_DB_MIN, audio.GAIN_DB_MAX))
        buf = audio.apply_gain_db(buf, gain)
    if noise_pool is not None:
        noise = noise_pool[int(rng.integers(0, len(noise_pool)))]
        snr = float(rng.uniform(*cfg.snr_db_range))
        buf = audio.mix_noise(buf, noise, snr)
    return audio.mfcc(buf).coeffs


def train(dataset: Dataset, model_config: model.ModelConfig,
          cfg: TrainConfig, checkpoint_path=None):
    """Full training run; returns (weights, epoch log rows).

    Deterministic for a given seed in single-threaded mode: one RNG drives
    shuffling, mining, padding, dropout, and augmentation in a fixed
    order. When checkpoint_path is set the current weights are rewritten
    after every epoch.
    """
    net = model.Model(model_config)
    r = net.receptive_field()
    weights = net.init_weights(cfg.seed)
    adam = Adam(net.trainable_names())
    rng = np.random.default_rng(cfg.seed)
    noise_pool = (_load_noise_pool(cfg.augment_noise_dir)
                  if cfg.augment_noise_dir else None)

    log_rows = []
    utt_ids = list(dataset.utt_ids)
    for epoch in range(cfg.epochs):
        lr = cosine_lr(epoch, cfg.base_lr, cfg.epochs)
        order = rng.permutation(len(utt_ids))
        sums = np.zeros(3)
        count = 0
        for lo in range(0, len(order), cfg.batch_utterances):
            chunk = [utt_ids[i] for i in order[lo:lo + cfg.batch_utterances]]
            utts = [
                mining.Utterance(
                    uid,
                    _utterance_features(dataset, cfg, uid, rng, noise_pool),
                    dataset.alignment(uid),
                )
                for uid in chunk
            ]
            batch = mining.compose_batch(utts, cfg.keyword, r, rng)
            if not batch:
                continue
            x = np.stack([w for _, w in batch])[:, None, :, :]
            labels = np.array([s.label for s, _ in batch], dtype=np.float32)
            targets = np.array([s.offset_target for s, _ in batch],
                               dtype=np.float32)

            out, cache = net.forward(weights, x, "train", rng)
            logits = out.detection_logits[:, 0, 0, 0]
            offsets = out.offsets[:, 0, 0, 0]
            per, g_logits, g_offsets, cls, off = focal_offset_loss(
                logits, labels, offsets, targets, cfg.gamma)
            n = len(batch)
            g_det = (g_logits / n).reshape(-1, 1, 1, 1).astype(np.float32)
            g_off = (g_offsets / n).reshape(-1, 1, 1, 1).astype(np.float32)
            grads = net.backward(weights, cache, g_det, g_off)
            adam.step(weights, grads, lr)

            sums += (per.sum(), cls.sum(), off.sum())
            count += n
        if count == 0:
            raise ConfigError("training produced no segments")
        log_rows.append(EpochLogRow(epoch, lr, sums[0] / count,
                                    sums[1] / count, sums[2] / count))
        if checkpoint_path is not None:
            model.save_weights(weights, checkpoint_path)
    return weights, log_rows
