"""Procedural paired image/caption data with identity-level attributes.

Each identity is a (shirt color, pants color, bag) triple. Images are drawn
as flat-colored body regions with per-image jitter and noise; captions come
from a small template grammar over the same attribute words, so both
modalities carry the full attribute vector.
"""
from __future__ import annotations

import itertools
import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError
from .imagepipe import DESK_SIZE, DatasetStats, ManifestRecord, channel_stats, write_manifest, write_ppm
from .textpipe import Vocabulary, split_words

# six colors keep each value frequent among a few dozen training identities
# while still leaving 108 distinct identities
COLORS = {
    "red": (0.85, 0.10, 0.10),
    "green": (0.10, 0.65, 0.15),
    "blue": (0.10, 0.20, 0.85),
    "yellow": (0.95, 0.85, 0.10),
    "black": (0.08, 0.08, 0.08),
    "white": (0.95, 0.95, 0.95),
}
BAGS = ("none", "backpack", "handbag")
BAG_COLOR = (0.45, 0.28, 0.10)
SKIN = (0.90, 0.75, 0.60)
BACKGROUND = (0.50, 0.50, 0.50)
NOISE = 0.05

SUBJECTS = ("a person", "a man", "a woman", "the pedestrian", "this person")
VERBS = ("wearing", "dressed in", "in")
SHIRT_WORDS = ("shirt", "top", "jacket")
PANTS_WORDS = ("pants", "trousers", "jeans")
BAG_CLAUSES = {
    "none": ("with no bag", ""),
    "backpack": ("carrying a backpack", "with a backpack"),
    "handbag": ("carrying a handbag", "with a handbag"),
}

# fractional row bands
HEAD_ROWS = (0.0, 0.20)
TORSO_ROWS = (0.20, 0.55)
LEG_ROWS = (0.55, 0.90)


@dataclass(frozen=True)
class IdentitySpec:
    identity: int
    shirt: str
    pants: str
    bag: str

    @property
    def attributes(self) -> tuple[str, str, str]:
        return (self.shirt, self.pants, self.bag)


def grammar_vocabulary() -> Vocabulary:
    words = []
    for phrase in (*SUBJECTS, *VERBS, *SHIRT_WORDS, *PANTS_WORDS, *COLORS, "and a .", *BAGS):
        words.extend(split_words(phrase))
    for clauses in BAG_CLAUSES.values():
        for c in clauses:
            words.extend(split_words(c))
    return Vocabulary(words)


def render_caption(spec: IdentitySpec, rng: np.random.Generator) -> str:
    subj = SUBJECTS[rng.integers(len(SUBJECTS))]
    verb = VERBS[rng.integers(len(VERBS))]
    shirt = f"{spec.shirt} {SHIRT_WORDS[rng.integers(len(SHIRT_WORDS))]}"
    pants = f"{spec.pants} {PANTS_WORDS[rng.integers(len(PANTS_WORDS))]}"
    clothes = f"a {shirt} and {pants}" if rng.random() < 0.5 else f"{pants} and a {shirt}"
    options = BAG_CLAUSES[spec.bag]
    bag = options[rng.integers(len(options))]
    text = f"{subj} {verb} {clothes}"
    if bag:
        text += f" {bag}"
    if rng.random() < 0.5:
        text += " ."
    return text


def parse_caption(caption: str) -> tuple[str, str, str]:
    """Recover (shirt, pants, bag) from a rendered caption."""
    words = split_words(caption)
    shirt = pants = None
    for a, b in zip(words, words[1:]):
        if a in COLORS and b in SHIRT_WORDS:
            shirt = a
        elif a in COLORS and b in PANTS_WORDS:
            pants = a
    bag = "backpack" if "backpack" in words else "handbag" if "handbag" in words else "none"
    if shirt is None or pants is None:
        raise DataError(f"caption does not name both garments: {caption!r}")
    return shirt, pants, bag


def _box(img, rows, cols, color):
    h, w, _ = img.shape
    r0, r1 = (int(round(x)) for x in rows)
    c0, c1 = (int(round(x)) for x in cols)
    img[max(r0, 0) : min(r1, h), max(c0, 0) : min(c1, w)] = color


def render_image(spec: IdentitySpec, rng: np.random.Generator, size: tuple[int, int] = DESK_SIZE) -> np.ndarray:
    h, w = size
    img = np.empty((h, w, 3), np.float32)
    img[:] = BACKGROUND
    dx = rng.uniform(-0.09, 0.09) * w
    dy = rng.uniform(-0.02, 0.02) * h

    def rows(band):
        return band[0] * h + dy, band[1] * h + dy

    def cols(a, b):
        return a * w + dx, b * w + dx

    head = (HEAD_ROWS[0] * h + 0.03 * h, HEAD_ROWS[1] * h)
    _box(img, (head[0] + dy, head[1] + dy), cols(0.38, 0.62), SKIN)
    _box(img, rows(TORSO_ROWS), cols(0.30, 0.70), COLORS[spec.shirt])
    _box(img, rows(LEG_ROWS), cols(0.32, 0.48), COLORS[spec.pants])
    _box(img, rows(LEG_ROWS), cols(0.52, 0.68), COLORS[spec.pants])
    if spec.bag == "backpack":
        _box(img, (0.24 * h + dy, 0.50 * h + dy), cols(0.72, 0.88), BAG_COLOR)
    elif spec.bag == "handbag":
        _box(img, (0.50 * h + dy, 0.62 * h + dy), cols(0.10, 0.27), BAG_COLOR)
    img += rng.uniform(-NOISE, NOISE, size=img.shape).astype(np.float32)
    return np.clip(img, 0.0, 1.0)


def torso_mean(img: np.ndarray) -> np.ndarray:
    """Mean pixel over the inner torso band (robust to the jitter range)."""
    h, w, _ = img.shape
    r0, r1 = int(0.25 * h), int(0.50 * h)
    c0, c1 = int(0.40 * w), int(0.60 * w)
    return img[r0:r1, c0:c1].reshape(-1, 3).mean(axis=0)


def choose_identities(num_ids: int, num_test: int, rng: np.random.Generator, tries: int = 1000):
    space = list(itertools.product(COLORS, COLORS, BAGS))
    if num_ids > len(space):
        raise ConfigError(f"attribute space holds {len(space)} identities, {num_ids} requested")
    for _ in range(tries):
        picks = rng.choice(len(space), size=num_ids, replace=False)
        specs = [IdentitySpec(i, *space[p]) for i, p in enumerate(picks)]
        train = specs[: num_ids - num_test]
        # every attribute value must be seen in training
        if all({s.attributes[k] for s in train} >= {s.attributes[k] for s in specs} for k in range(3)):
            return specs
    raise ConfigError("could not find an identity split covering every attribute value")


@dataclass
class SyntheticDataset:
    root: Path
    records: list[ManifestRecord]
    identities: list[IdentitySpec]
    stats: DatasetStats
    seed: int

    def split(self, name: str) -> list[ManifestRecord]:
        return [r for r in self.records if r.split == name]


def _thread_count() -> int:
    try:
        return max(1, int(os.environ.get("XMM_THREADS", "1")))
    except ValueError:
        return 1


def generate_dataset(
    num_ids: int,
    imgs_per_id: int,
    captions_per_img: int,
    seed: int,
    out_dir,
    num_test: int | None = None,
    num_val: int = 0,
    size: tuple[int, int] = DESK_SIZE,
) -> SyntheticDataset:
    """Write images, manifest, vocabulary, attribute table and channel stats to ``out_dir``.

    The last ``num_test`` identities (default a third) form the test split and
    the ``num_val`` before them the validation split.
    """
    if num_ids < 2:
        raise ConfigError("need at least two identities")
    if imgs_per_id < 1 or captions_per_img < 1:
        raise ConfigError("need at least one image and one caption per identity")
    num_test = num_ids // 3 if num_test is None else num_test
    if num_test + num_val >= num_ids:
        raise ConfigError("no identities left for training")
    root = Path(out_dir)
    try:
        (root / "images").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create dataset directory {root}: {exc}") from exc

    ss = np.random.SeedSequence(seed)
    split_rng, *id_seeds = (np.random.default_rng(s) for s in ss.spawn(num_ids + 1))
    specs = choose_identities(num_ids, num_test + num_val, split_rng)
    n_train = num_ids - num_test - num_val

    def split_of(i):
        return "train" if i < n_train else "val" if i < n_train + num_val else "test"

    def build(i):
        spec, rng = specs[i], id_seeds[i]
        recs, train_imgs = [], []
        for k in range(imgs_per_id):
            img = render_image(spec, rng, size)
            rel = f"images/{spec.identity:04d}_{k}.ppm"
            write_ppm(root / rel, img)
            if split_of(i) == "train":
                # stats from the quantized pixels actually stored on disk
                train_imgs.append(np.rint(img * 255) / 255)
            for _ in range(captions_per_img):
                recs.append(ManifestRecord(spec.identity, rel, render_caption(spec, rng), split_of(i)))
        return recs, train_imgs

    with ThreadPoolExecutor(max_workers=_thread_count()) as pool:
        results = list(pool.map(build, range(num_ids)))
    records = [r for recs, _ in results for r in recs]
    mean, std = channel_stats(img for _, imgs in results for img in imgs)
    stats = DatasetStats(mean, std)

    write_manifest(root / "manifest.tsv", records)
    stats.save(root / "stats.json")
    grammar_vocabulary().save(root / "vocab.txt")
    (root / "identities.json").write_text(json.dumps([asdict(s) for s in specs], indent=1) + "\n")
    return SyntheticDataset(root, records, specs, stats, seed)
