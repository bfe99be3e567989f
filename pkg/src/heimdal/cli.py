"""Command-line entry point: the whole pipeline behind one executable.

Exit codes: 0 on success, 1 for usage errors, 2 for data or format
errors. All randomized stages take an explicit --seed (no time-based
defaults) and echo it into their output headers.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import audio, metrics, mining, model, streaming, synth, trainer
from .errors import HeimdalError

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(message)


def _build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="heimdal",
                     description="Streaming wake-word detection toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic keyword corpus")
    p.add_argument("--spec", required=True,
                   help="synth spec JSON, or 'default'")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None,
                   help="override the spec's seed")

    p = sub.add_parser("featurize", help="WAV directory -> feature files")
    p.add_argument("--wav", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--gain-db", type=float, default=None)
    p.add_argument("--noise", default=None, help="noise WAV directory")
    p.add_argument("--snr-db", type=float, default=None)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("mine", help="mine training segments from alignments")
    p.add_argument("--align", required=True)
    p.add_argument("--keyword", required=True, help='e.g. "A B C"')
    p.add_argument("--rf", type=int, required=True,
                   help="segment length = model receptive field (frames)")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, required=True)

    p = sub.add_parser("inspect", help="report model geometry")
    p.add_argument("--config", required=True,
                   help="config JSON path or preset name")

    p = sub.add_parser("train", help="train the detector")
    p.add_argument("--config", default=model.CANONICAL_NAME)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int, default=100)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--keyword", default=None)
    p.add_argument("--batch-utts", type=int, default=64)
    p.add_argument("--lr", type=float, default=trainer.BASE_LR)
    p.add_argument("--gamma", type=float, default=trainer.GAMMA_DEFAULT)
    p.add_argument("--augment-gain", action="store_true")
    p.add_argument("--noise", default=None,
                   help="noise WAV directory for on-the-fly mixing")
    p.add_argument("--log", default=None, help="epoch log CSV path")
    p.add_argument("--train-config", default=None,
                   help="JSON with TrainConfig fields (flags win)")

    p = sub.add_parser("eval", help="DET and localization curves")
    p.add_argument("--weights", required=True)
    p.add_argument("--config", default=model.CANONICAL_NAME)
    p.add_argument("--pos", required=True, help="positive WAV directory")
    p.add_argument("--neg", required=True, help="negative WAV directory")
    p.add_argument("--align", required=True,
                   help="alignment TSV covering the positive set")
    p.add_argument("--keyword", required=True)
    p.add_argument("--op-fa-per-hr", type=float, default=12.0)
    p.add_argument("--decode-threshold", type=float, default=0.1)
    p.add_argument("--merge-gap", type=int, default=metrics.MERGE_GAP_FRAMES)
    p.add_argument("--out-dir", default=None)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--seed", type=int, default=None)

    p = sub.add_parser("stream", help="trigger events for one WAV")
    p.add_argument("--weights", required=True)
    p.add_argument("--config", default=model.CANONICAL_NAME)
    p.add_argument("--wav", required=True)
    p.add_argument("--threshold", type=float, required=True)
    return parser


def _wavs_in(directory):
    if not os.path.isdir(directory):
        raise HeimdalError(f"{directory}: not a directory")
    names = sorted(n for n in os.listdir(directory) if n.endswith(".wav"))
    return [(os.path.splitext(n)[0], os.path.join(directory, n))
            for n in names]


def _cmd_synth(args):
    if args.spec == "default":
        spec = synth.default_spec(seed=args.seed or 0)
    else:
        spec = synth.SynthSpec.from_json(args.spec)
        if args.seed is not None:
            spec.seed = args.seed
    rows = synth.generate(spec, args.out)
    print(f"seed={spec.seed} utterances={len(rows)} out={args.out}")
    return EXIT_OK


def _cmd_featurize(args):
    os.makedirs(args.out, exist_ok=True)
    rng = np.random.default_rng(args.seed)
    noise_pool = None
    if args.noise:
        noise_pool = [audio.load_wav(path)
                      for _, path in _wavs_in(args.noise)]
        if not noise_pool:
            raise HeimdalError(f"{args.noise}: no noise WAVs")
    count = 0
    for utt_id, path in _wavs_in(args.wav):
        buf = audio.load_wav(path)
        if args.gain_db is not None:
            buf = audio.apply_gain_db(buf, args.gain_db)
        if noise_pool is not None:
            if args.snr_db is None:
                raise _UsageError("--noise requires --snr-db")
            noise = noise_pool[int(rng.integers(0, len(noise_pool)))]
            buf = audio.mix_noise(buf, noise, args.snr_db)
        audio.write_features(os.path.join(args.out, f"{utt_id}.hmft"),
                             audio.mfcc(buf))
        count += 1
    print(f"seed={args.seed} featurized={count} out={args.out}")
    return EXIT_OK


def _cmd_mine(args):
    alignments = mining.read_alignments(args.align)
    keyword = mining.parse_keyword(args.keyword)
    rng = np.random.default_rng(args.seed)
    segments = []
    for utt_id in sorted(alignments):
        segments.extend(mining.mine_utterance(alignments[utt_id], keyword,
                                              args.rf, rng))
    mining.write_segment_manifest(args.out, segments, seed=args.seed)
    positives = sum(1 for s in segments if s.label == 1)
    print(f"seed={args.seed} segments={len(segments)} positives={positives}")
    return EXIT_OK


def _cmd_inspect(args):
    config = model.load_config(args.config)
    net = model.Model(config)
    r = net.receptive_field()
    print(f"config: {config.name}")
    print(f"receptive_field: {r}")
    print(f"parameter_count: {net.param_count()}")
    print(f"warmup_frames: {r - 1}")
    print(f"{'layer':24s} {'input':>14s} {'output':>14s}")
    for name, ishape, oshape in net.shape_ledger(r):
        ins = "x".join(str(v) for v in ishape)
        outs = "x".join(str(v) for v in oshape)
        print(f"{name:24s} {ins:>14s} {outs:>14s}")
    return EXIT_OK


def _cmd_train(args):
    config = model.load_config(args.config)
    if args.train_config:
        cfg = trainer.TrainConfig.from_json(args.train_config)
        cfg.data_dir = args.data or cfg.data_dir
    else:
        if args.keyword is None:
            raise _UsageError("--keyword is required without --train-config")
        cfg = trainer.TrainConfig(data_dir=args.data,
                                  keyword=mining.parse_keyword(args.keyword))
    cfg.epochs = args.epochs
    cfg.seed = args.seed
    cfg.batch_utterances = args.batch_utts
    cfg.base_lr = args.lr
    cfg.gamma = args.gamma
    if args.augment_gain:
        cfg.augment_gain = True
    if args.noise:
        cfg.augment_noise_dir = args.noise

    dataset = trainer.Dataset(cfg.data_dir)
    weights, log_rows = trainer.train(dataset, config, cfg,
                                      checkpoint_path=args.out)
    model.save_weights(weights, args.out)
    if args.log:
        trainer.write_epoch_log(args.log, log_rows, seed=cfg.seed)
    final = log_rows[-1]
    print(f"seed={cfg.seed} epochs={cfg.epochs} "
          f"final_loss={final.mean_loss:.6f} out={args.out}")
    return EXIT_OK


def _load_eval_items(args):
    alignments = mining.read_alignments(args.align)
    keyword = mining.parse_keyword(args.keyword)
    positive_items = []
    for utt_id, path in _wavs_in(args.pos):
        feats = audio.mfcc(audio.load_wav(path))
        if utt_id not in alignments:
            raise HeimdalError(f"{utt_id}: missing alignment for positive")
        truths = [
            metrics.GroundTruthWindow(utt_id, span.start, span.end)
            for span in mining.find_keyword_spans(alignments[utt_id], keyword)
        ]
        positive_items.append((utt_id, feats.coeffs, truths))
    negative_items = []
    for utt_id, path in _wavs_in(args.neg):
        feats = audio.mfcc(audio.load_wav(path))
        negative_items.append((utt_id, feats.coeffs))
    if not positive_items:
        raise HeimdalError(f"{args.pos}: no positive WAV files")
    if not negative_items:
        raise HeimdalError(f"{args.neg}: no negative WAV files")
    return positive_items, negative_items


def _cmd_eval(args):
    config = model.load_config(args.config)
    weights = model.load_weights(args.weights)
    model.Model(config).check_weights(weights)
    positive_items, negative_items = _load_eval_items(args)

    result = metrics.evaluate_detector(
        weights, config, positive_items, negative_items,
        op_fa_per_hour=args.op_fa_per_hr,
        base_threshold=args.decode_threshold,
        merge_gap=args.merge_gap, jobs=args.jobs)

    curve = result.det
    print(f"positives={curve.total_positives} "
          f"negative_hours={result.negative_hours:.3f}")
    print(f"frr_at_{args.op_fa_per_hr:g}fa_per_hr="
          f"{curve.frr_at_operating_point:.4f}")
    print(f"operating_threshold={curve.operating_threshold:.6f}")
    print(f"iou_tpr_auc={result.iou_auc:.4f}")

    if args.out_dir:
        os.makedirs(args.out_dir, exist_ok=True)
        metrics.write_det_csv(os.path.join(args.out_dir, "det.csv"), curve,
                              seed=args.seed)
        metrics.write_iou_csv(os.path.join(args.out_dir, "iou.csv"),
                              result.iou_taus, result.iou_tprs,
                              result.iou_auc, seed=args.seed)
        metrics.write_curve_svg(
            os.path.join(args.out_dir, "det.svg"),
            [p.fa_per_hour for p in curve.points],
            [100.0 * p.frr for p in curve.points],
            "false accepts per hour", "false reject rate (%)", "DET")
        metrics.write_curve_svg(
            os.path.join(args.out_dir, "iou.svg"),
            result.iou_taus, result.iou_tprs,
            "IOU threshold", "true positive rate", "Localization")
    return EXIT_OK


def _cmd_stream(args):
    config = model.load_config(args.config)
    weights = model.load_weights(args.weights)
    model.Model(config).check_weights(weights)
    r = model.Model(config).receptive_field()
    feats = audio.mfcc(audio.load_wav(args.wav))
    scores = (streaming.stream_file(weights, config, feats.coeffs)
              if feats.num_frames >= r else [])
    events = metrics.decode_events(scores, args.threshold, r)
    print("time_s\tscore\tpredicted_start_s")
    for event in events:
        print(f"{event.peak_frame * audio.FRAME_HOP_S:.2f}\t"
              f"{event.peak_score:.6f}\t"
              f"{event.predicted_start * audio.FRAME_HOP_S:.2f}")
    return EXIT_OK


_COMMANDS = {
    "synth": _cmd_synth,
    "featurize": _cmd_featurize,
    "mine": _cmd_mine,
    "inspect": _cmd_inspect,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "stream": _cmd_stream,
}


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    try:
        return _COMMANDS[args.command](args)
    except _UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (HeimdalError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
