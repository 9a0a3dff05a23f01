"""On-disk corpus layout shared by the command-line tools.

A data directory holds ``features/<clip>.sedf`` and
``annotations/<clip>.tsv`` (files may also sit directly in the directory),
plus an optional ``vocab.txt`` listing one class per line. When the
vocabulary file is absent it is rebuilt from the annotations.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .eventroll import (
    ClipAnnotations,
    EventRoll,
    FrameParams,
    Vocabulary,
    build_vocabulary,
    encode_roll,
    format_annotations,
    parse_annotations,
)
from .features import read_features, write_features

__all__ = ["Corpus", "load_corpus", "write_corpus", "read_vocabulary", "ANNOTATION_SUFFIXES"]

ANNOTATION_SUFFIXES = (".tsv", ".txt", ".ann")


@dataclass
class Corpus:
    clip_ids: list[str]
    features: list[np.ndarray]
    rolls: list[EventRoll]
    annotations: list[ClipAnnotations]
    vocab: Vocabulary

    @property
    def dataset(self):
        return list(zip(self.features, self.rolls))


def _subdir(root: Path, name: str) -> Path:
    sub = root / name
    return sub if sub.is_dir() else root


def read_vocabulary(path) -> Vocabulary:
    lines = [ln.strip() for ln in Path(path).read_text(encoding="utf-8").splitlines()]
    return Vocabulary(tuple(sorted({ln for ln in lines if ln})))


def annotation_files(directory) -> list[Path]:
    d = _subdir(Path(directory), "annotations")
    return sorted(p for p in d.iterdir() if p.is_file() and p.suffix in ANNOTATION_SUFFIXES)


def load_corpus(data_dir, fp: FrameParams = FrameParams(), vocab: Vocabulary | None = None) -> Corpus:
    root = Path(data_dir)
    if not root.is_dir():
        raise FileNotFoundError(f"data directory {root} does not exist")
    feat_dir = _subdir(root, "features")
    ann_dir = _subdir(root, "annotations")
    feat_files = sorted(feat_dir.glob("*.sedf"))
    if not feat_files:
        raise FileNotFoundError(f"no .sedf feature files under {root}")
    ids, feats, anns = [], [], []
    for path in feat_files:
        x = read_features(path)
        ann_path = next((ann_dir / (path.stem + s) for s in ANNOTATION_SUFFIXES if (ann_dir / (path.stem + s)).exists()), None)
        if ann_path is None:
            raise FileNotFoundError(f"no annotation file for clip {path.stem} in {ann_dir}")
        ann = parse_annotations(ann_path.read_text(encoding="utf-8"), fp.span(x.shape[0]), path.stem)
        ids.append(path.stem)
        feats.append(x)
        anns.append(ann)
    if vocab is None:
        vocab_file = root / "vocab.txt"
        vocab = read_vocabulary(vocab_file) if vocab_file.exists() else build_vocabulary(anns)
    rolls = [encode_roll(a, vocab, fp, x.shape[0]) for a, x in zip(anns, feats)]
    return Corpus(ids, feats, rolls, anns, vocab)


def write_corpus(out_dir, clip_ids, features, annotations, vocab: Vocabulary) -> list[Path]:
    """Write features, annotations and ``vocab.txt``; returns the files created."""
    root = Path(out_dir)
    (root / "features").mkdir(parents=True, exist_ok=True)
    (root / "annotations").mkdir(parents=True, exist_ok=True)
    written = []
    for cid, x, ann in zip(clip_ids, features, annotations):
        fpath = root / "features" / f"{cid}.sedf"
        write_features(fpath, x)
        apath = root / "annotations" / f"{cid}.tsv"
        apath.write_text(format_annotations(ann), encoding="utf-8")
        written += [fpath, apath]
    vpath = root / "vocab.txt"
    vpath.write_text("".join(c + "\n" for c in vocab.classes), encoding="utf-8")
    written.append(vpath)
    return written
