"""Command-line entry point: ``sedkit {stats,extract,synth,train,eval,sweep}``."""

from __future__ import annotations

import argparse
import hashlib
import logging
import math
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from pathlib import Path

from threadpoolctl import threadpool_limits

from . import __version__
from .data import annotation_files, load_corpus, write_corpus
from .eventroll import FrameParams, Vocabulary, build_vocabulary, duration_stats, parse_annotations
from .features import MelParams, NormStats, apply_norm, fit_norm, log_mel, read_wav, write_features
from .metrics import SegmentParams
from .model import load_checkpoint, save_checkpoint
from .synthgen import default_spec, format_spec, generate_clip, parse_spec
from .trainer import DEFAULT_GAMMAS, TrainConfig, evaluate_model, gamma_sweep, parse_config, train

log = logging.getLogger("sedkit")


class CliError(Exception):
    pass


def thread_count() -> int:
    raw = os.environ.get("SED_THREADS", "")
    if not raw:
        return 1
    try:
        n = int(raw)
    except ValueError:
        raise CliError(f"SED_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise CliError(f"SED_THREADS must be a positive integer, got {raw!r}")
    return n


def header(seed, config_text: str) -> str:
    digest = hashlib.sha256(config_text.encode()).hexdigest()[:12]
    return f"# sedkit {__version__} seed={seed} config={digest}\n"


class Outputs:
    """Tracks files written by a command so a failure can remove them."""

    def __init__(self):
        self.paths: list[Path] = []

    def add(self, path) -> Path:
        path = Path(path)
        self.paths.append(path)
        return path

    def write_text(self, path, text: str) -> None:
        path = self.add(path)
        tmp = path.with_name(path.name + ".part")
        tmp.write_text(text, encoding="utf-8")
        os.replace(tmp, path)

    def cleanup(self) -> None:
        for p in reversed(self.paths):
            for q in (p, p.with_name(p.name + ".part")):
                if q.is_file():
                    q.unlink()


def _emit(outputs: Outputs, dest, text: str) -> None:
    if dest is None:
        sys.stdout.write(text)
    else:
        outputs.write_text(dest, text)


# ---------------------------------------------------------------------------
# commands


def cmd_stats(args, outputs: Outputs) -> None:
    fp = FrameParams(args.window, args.hop)
    root = Path(args.annot_dir)
    if not root.is_dir():
        raise CliError(f"annotation directory {root} does not exist")
    duration = args.clip_length if args.clip_length is not None else math.inf
    anns = [parse_annotations(p.read_text(encoding="utf-8"), duration, p.stem) for p in annotation_files(root)]
    vocab = build_vocabulary(anns)
    stats = duration_stats(anns, vocab, fp)
    _emit(outputs, args.out, header(0, f"window={fp.window} hop={fp.hop}") + stats.to_tsv())


def cmd_extract(args, outputs: Outputs) -> None:
    src, dst = Path(args.wav_dir), Path(args.out_dir)
    if not src.is_dir():
        raise CliError(f"audio directory {src} does not exist")
    wavs = sorted(p for p in src.iterdir() if p.suffix.lower() == ".wav")
    p = MelParams(n_mels=args.n_mels, window=args.window, hop=args.hop)
    dst.mkdir(parents=True, exist_ok=True)

    def one(path: Path):
        x = log_mel(read_wav(path), p)
        out = outputs.add(dst / f"{path.stem}.sedf")
        write_features(out, x)
        return path.name, x.shape[0]

    with ThreadPoolExecutor(max_workers=thread_count()) as pool:
        results = list(pool.map(one, wavs))
    lines = header(0, repr(p)) + "clip\tframes\n" + "".join(f"{n}\t{k}\n" for n, k in results)
    outputs.write_text(dst / "extract.tsv", lines)


def cmd_synth(args, outputs: Outputs) -> None:
    if args.spec == "default":
        spec = default_spec()
    else:
        spec_path = Path(args.spec)
        if not spec_path.is_file():
            raise CliError(f"spec file {spec_path} does not exist")
        spec = parse_spec(spec_path.read_text(encoding="utf-8"))
    if args.seed is not None:
        spec = replace(spec, seed=args.seed)
    if args.n_clips is not None:
        spec = replace(spec, n_clips=args.n_clips)
    out = Path(args.out_dir)
    with ThreadPoolExecutor(max_workers=thread_count()) as pool:
        clips = list(pool.map(lambda i: generate_clip(spec, i), range(spec.n_clips)))
    vocab = spec.vocabulary
    for p in (out / "features", out / "annotations"):
        p.mkdir(parents=True, exist_ok=True)
    ids = [a.clip_id for _, _, a in clips]
    # register before writing so a failure mid-way removes partial files
    for cid in ids:
        outputs.add(out / "features" / f"{cid}.sedf")
        outputs.add(out / "annotations" / f"{cid}.tsv")
    outputs.add(out / "vocab.txt")
    write_corpus(out, ids, [f for f, _, _ in clips], [a for _, _, a in clips], vocab)
    spec_text = format_spec(spec)
    outputs.write_text(out / "spec.ini", spec_text)
    stats = duration_stats([a for _, _, a in clips], vocab, spec.frame)
    outputs.write_text(out / "stats.tsv", header(spec.seed, spec_text) + stats.to_tsv())


def _load_config(path) -> tuple[TrainConfig, str]:
    path = Path(path)
    if not path.is_file():
        raise CliError(f"config file {path} does not exist")
    text = path.read_text(encoding="utf-8")
    return parse_config(text), text


def _normalized(features, norm: NormStats):
    return [apply_norm(x, norm) for x in features]


def cmd_train(args, outputs: Outputs) -> None:
    cfg, cfg_text = _load_config(args.config)
    fp = FrameParams()
    corpus = load_corpus(args.data_dir, fp)
    norm = fit_norm(corpus.features)
    dataset = list(zip(_normalized(corpus.features, norm), corpus.rolls))
    eval_set = None
    if args.eval_dir:
        ev = load_corpus(args.eval_dir, fp, corpus.vocab)
        eval_set = list(zip(_normalized(ev.features, norm), ev.rolls))
    params, history = train(dataset, cfg, eval_set=eval_set, fp=fp, workers=thread_count())
    ckpt = outputs.add(args.checkpoint)
    save_checkpoint(ckpt, params, corpus.vocab.classes, extras=(norm.mean, norm.std))
    outputs.write_text(
        Path(str(args.checkpoint) + ".history.tsv"), header(cfg.seed, cfg_text) + history.to_tsv()
    )


def cmd_eval(args, outputs: Outputs) -> None:
    ckpt = Path(args.checkpoint)
    if not ckpt.is_file():
        raise CliError(f"checkpoint {ckpt} does not exist")
    params, labels, extras = load_checkpoint(ckpt)
    fp = FrameParams()
    corpus = load_corpus(args.data_dir, fp, Vocabulary(labels))
    feats = corpus.features
    if len(extras) >= 2:
        feats = _normalized(feats, NormStats(extras[0], extras[1]))
    sp = SegmentParams(args.segment_length)
    rep = evaluate_model(params, list(zip(feats, corpus.rolls)), fp, sp, args.threshold, labels)
    digest_src = hashlib.sha256(ckpt.read_bytes()).hexdigest() + f" phi={args.threshold} seg={args.segment_length}"
    head = header(0, digest_src)
    if args.out:
        outputs.write_text(args.out + ".tsv", head + rep.to_tsv())
        outputs.write_text(args.out + ".txt", head + rep.to_keyvalue())
    else:
        sys.stdout.write(head + rep.to_tsv())


def _parse_gammas(text: str) -> list[float]:
    try:
        values = [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise CliError(f"bad --gammas list {text!r}") from None
    if not values or any(v < 0 for v in values):
        raise CliError("--gammas needs one or more non-negative values")
    return values


def cmd_sweep(args, outputs: Outputs) -> None:
    cfg, cfg_text = _load_config(args.config)
    gammas = _parse_gammas(args.gammas)
    fp = FrameParams()
    corpus = load_corpus(args.data_dir, fp)
    norm = fit_norm(corpus.features)
    train_set = list(zip(_normalized(corpus.features, norm), corpus.rolls))
    if args.eval_dir:
        ev = load_corpus(args.eval_dir, fp, corpus.vocab)
        eval_set = list(zip(_normalized(ev.features, norm), ev.rolls))
    else:
        eval_set = train_set
    cfg = replace(cfg, segment_length=args.segment_length, threshold=args.threshold)
    rows = gamma_sweep(train_set, eval_set, gammas, cfg, fp, workers=thread_count())
    text = header(cfg.seed, cfg_text + args.gammas) + "gamma\tmacro_F\tmicro_F\n"
    text += "".join(f"{g:g}\t{a:.6f}\t{b:.6f}\n" for g, a, b in rows)
    _emit(outputs, args.out, text)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sedkit", description="Sound event detection toolkit")
    parser.add_argument("--version", action="version", version=f"sedkit {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("stats", help="per-class duration and frame statistics of an annotation directory")
    p.add_argument("annot_dir")
    p.add_argument("--clip-length", type=float, default=None, help="clamp events to this clip length (s)")
    p.add_argument("--window", type=float, default=0.040)
    p.add_argument("--hop", type=float, default=0.020)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("extract", help="log mel-band energies for every WAV in a directory")
    p.add_argument("wav_dir")
    p.add_argument("out_dir")
    p.add_argument("--n-mels", type=int, default=64)
    p.add_argument("--window", type=float, default=0.040)
    p.add_argument("--hop", type=float, default=0.020)
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("synth", help="generate a synthetic corpus ('default' for the built-in spec)")
    p.add_argument("spec")
    p.add_argument("out_dir")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--n-clips", type=int, default=None)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a model and write a checkpoint")
    p.add_argument("config")
    p.add_argument("data_dir")
    p.add_argument("checkpoint")
    p.add_argument("--eval-dir", default=None, help="score this corpus after every epoch")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="segment-based evaluation of a checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("data_dir")
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--segment-length", type=float, default=1.0)
    p.add_argument("--out", default=None, help="write PREFIX.tsv and PREFIX.txt instead of stdout")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="train and score one duration-robust model per gamma")
    p.add_argument("config")
    p.add_argument("data_dir")
    p.add_argument("--gammas", default=",".join(f"{g:g}" for g in DEFAULT_GAMMAS))
    p.add_argument("--eval-dir", default=None, help="evaluation corpus (defaults to the training data)")
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--segment-length", type=float, default=1.0)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    outputs = Outputs()
    try:
        # numerics stay single-threaded; SED_THREADS only sizes the worker pools
        with threadpool_limits(1):
            args.func(args, outputs)
    except (CliError, OSError, ValueError, RuntimeError) as exc:
        outputs.cleanup()
        print(f"sedkit {args.command}: error: {exc}", file=sys.stderr)
        return 1
    except BaseException:
        outputs.cleanup()
        raise
    return 0


if __name__ == "__main__":
    sys.exit(main())
