"""Turn a manifest directory into arrays the trainer and evaluator consume."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError
from .imagepipe import DESK_SIZE, DatasetStats, load_image, read_manifest
from .textpipe import Vocabulary, tokenize_and_pad


@dataclass
class Split:
    """Images and captions of one split.

    ``images`` is a stack of raw [0, 1] images; ``caption_image`` maps each
    caption row to its image row.
    """

    images: np.ndarray
    image_ids: np.ndarray
    captions: np.ndarray
    caption_ids: np.ndarray
    caption_image: np.ndarray

    @property
    def num_pairs(self) -> int:
        return len(self.captions)


@dataclass
class PairedData:
    train: Split
    val: Split | None
    test: Split | None
    vocab: Vocabulary
    stats: DatasetStats
    label_of: dict[int, int]  # train identity -> class index

    @property
    def num_classes(self) -> int:
        return len(self.label_of)


def _build_split(records, root: Path, vocab: Vocabulary, length: int, size) -> Split | None:
    if not records:
        return None
    paths: dict[str, int] = {}
    images, image_ids, caps, cap_ids, cap_img = [], [], [], [], []
    for r in records:
        if r.image not in paths:
            paths[r.image] = len(images)
            images.append(load_image(root / r.image, size))
            image_ids.append(r.identity)
        caps.append(tokenize_and_pad(r.caption, vocab, length).ids)
        cap_ids.append(r.identity)
        cap_img.append(paths[r.image])
    return Split(
        np.stack(images).astype(np.float32),
        np.array(image_ids, dtype=np.int64),
        np.stack(caps),
        np.array(cap_ids, dtype=np.int64),
        np.array(cap_img, dtype=np.int64),
    )


def load_paired_data(root, length: int = 120, size=DESK_SIZE, vocab: Vocabulary | None = None) -> PairedData:
    root = Path(root)
    records = read_manifest(root / "manifest.tsv")
    if vocab is None:
        vocab_path = root / "vocab.txt"
        vocab = Vocabulary.load(vocab_path) if vocab_path.exists() else Vocabulary.from_sentences(
            r.caption for r in records if r.split == "train"
        )
    stats_path = root / "stats.json"
    stats = DatasetStats.load(stats_path) if stats_path.exists() else DatasetStats()
    splits = {name: [r for r in records if r.split == name] for name in ("train", "val", "test")}
    train = _build_split(splits["train"], root, vocab, length, size)
    if train is None:
        raise DataError(f"{root}: empty train split")
    label_of = {ident: k for k, ident in enumerate(sorted(set(train.caption_ids.tolist())))}
    return PairedData(
        train=train,
        val=_build_split(splits["val"], root, vocab, length, size),
        test=_build_split(splits["test"], root, vocab, length, size),
        vocab=vocab,
        stats=stats,
        label_of=label_of,
    )
