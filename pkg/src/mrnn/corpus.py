"""Vocabulary, caption/feature ingestion and the synthetic corpus generator.

File formats handled here:

* feature file (binary): magic ``MRNF`` | version u32 LE | count u64 LE |
  dim u32 LE | per entry: id-length u16 LE, UTF-8 id bytes, dim * f32 LE.
* feature file (TSV): ``id<TAB>v1<TAB>...<TAB>vD`` per line.
* caption file: ``image_id<TAB>caption text`` per line, UTF-8.
* split file: ``image_id<TAB>{train|val|test}`` per line.
* vocab file: one token per line, line number == token index.
"""

from __future__ import annotations

import re
import struct
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .numerics import Rng

START = "##START##"
END = "##END##"
UNK = "##UNK##"
START_INDEX, END_INDEX, UNK_INDEX = 0, 1, 2
RESERVED = (START, END, UNK)

FEATURE_MAGIC = b"MRNF"
FEATURE_VERSION = 1

# Runs of alphanumerics are tokens; every other non-space character is its
# own token.  Lowercased first, so reserved "##...##" names cannot collide
# with corpus tokens (they would split at the '#' signs).
_TOKEN_RE = re.compile(r"[a-z0-9]+|[^a-z0-9\s]")


class FeatureFileError(ValueError):
    """Raised for malformed feature files (bad magic, dims, truncation)."""


def tokenize(text: str) -> list[str]:
    return _TOKEN_RE.findall(text.lower())


class Vocabulary:
    """Bijective token<->index map with fixed reserved entries.

    Index 0 is the start sign, 1 the end sign, 2 the unknown token; corpus
    tokens follow.  ``size`` is the softmax dimension of any model built on
    this vocabulary.
    """

    def __init__(self, tokens: list[str]):
        self.index_to_token = list(RESERVED) + list(tokens)
        self.token_to_index = {t: i for i, t in enumerate(self.index_to_token)}
        if len(self.token_to_index) != len(self.index_to_token):
            raise ValueError("duplicate tokens in vocabulary")

    @property
    def size(self) -> int:
        return len(self.index_to_token)

    def __len__(self) -> int:
        return len(self.index_to_token)

    def __contains__(self, token: str) -> bool:
        return token in self.token_to_index

    def index(self, token: str) -> int:
        return self.token_to_index.get(token, UNK_INDEX)

    def encode(self, text: str) -> list[int]:
        """Token indices for a raw string; unknown tokens become UNK."""
        return [self.index(t) for t in tokenize(text)]

    def decode(self, indices: list[int]) -> list[str]:
        return [self.index_to_token[i] for i in indices]


def build_vocabulary(captions: list[str], min_count: int = 1) -> Vocabulary:
    """Vocabulary over all tokens with frequency >= min_count.

    Kept tokens are ordered by descending frequency, ties broken
    lexicographically, so construction is deterministic.
    """
    if not captions:
        raise ValueError("cannot build a vocabulary from an empty caption list")
    counts = Counter()
    for text in captions:
        counts.update(tokenize(text))
    kept = sorted((t for t, c in counts.items() if c >= min_count),
                  key=lambda t: (-counts[t], t))
    return Vocabulary(kept)


def save_vocab(vocab: Vocabulary, path) -> None:
    Path(path).write_text("\n".join(vocab.index_to_token) + "\n", encoding="utf-8")


def load_vocab(path) -> Vocabulary:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if tuple(lines[:3]) != RESERVED:
        raise ValueError(f"vocab file {path} does not start with the reserved tokens")
    return Vocabulary(lines[3:])


@dataclass
class CaptionedExample:
    """One (image, caption) pair; the unit of training and evaluation.

    ``tokens`` holds vocabulary indices for the content words only; the
    start/end signs are added by the model when a sentence is framed.
    """
    image_id: str
    tokens: list[int]
    raw_text: str


class ImageFeatureStore:
    """Fixed, precomputed feature vector per image id."""

    def __init__(self, feature_dim: int):
        if feature_dim <= 0:
            raise ValueError("feature_dim must be positive")
        self.feature_dim = feature_dim
        self._entries: dict[str, np.ndarray] = {}

    def add(self, image_id: str, vec: np.ndarray) -> None:
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape != (self.feature_dim,):
            raise ValueError(
                f"feature for {image_id!r} has dim {vec.shape}, expected ({self.feature_dim},)")
        if not np.all(np.isfinite(vec)):
            raise ValueError(f"feature for {image_id!r} has NaN or infinite entries")
        self._entries[image_id] = vec

    def get(self, image_id: str) -> np.ndarray:
        try:
            return self._entries[image_id]
        except KeyError:
            raise KeyError(f"no feature vector for image id {image_id!r}") from None

    def __contains__(self, image_id: str) -> bool:
        return image_id in self._entries

    def __len__(self) -> int:
        return len(self._entries)

    def ids(self) -> list[str]:
        """All image ids in sorted order (rankings must not depend on insertion order)."""
        return sorted(self._entries)


@dataclass
class DatasetSplit:
    train: list[CaptionedExample] = field(default_factory=list)
    validation: list[CaptionedExample] = field(default_factory=list)
    test: list[CaptionedExample] = field(default_factory=list)


# ---------------------------------------------------------------------------
# feature files

def save_features(store: ImageFeatureStore, path) -> None:
    """Write the binary feature format.  Values are stored as f32."""
    with open(path, "wb") as fh:
        fh.write(FEATURE_MAGIC)
        fh.write(struct.pack("<IQI", FEATURE_VERSION, len(store), store.feature_dim))
        for image_id in store.ids():
            raw = image_id.encode("utf-8")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(store.get(image_id).astype("<f4").tobytes())


def _read_exact(fh, n: int, what: str) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise FeatureFileError(f"truncated feature file while reading {what}")
    return buf


def load_features(path) -> ImageFeatureStore:
    """Load a feature file, binary or TSV (sniffed by magic bytes)."""
    with open(path, "rb") as fh:
        head = fh.read(4)
        if head != FEATURE_MAGIC:
            return _load_features_tsv(path)
        version, count, dim = struct.unpack("<IQI", _read_exact(fh, 16, "header"))
        if version != FEATURE_VERSION:
            raise FeatureFileError(f"unsupported feature file version {version}")
        if dim == 0:
            raise FeatureFileError("feature file declares dimension 0")
        store = ImageFeatureStore(dim)
        for _ in range(count):
            (id_len,) = struct.unpack("<H", _read_exact(fh, 2, "id length"))
            image_id = _read_exact(fh, id_len, "id bytes").decode("utf-8")
            vec = np.frombuffer(_read_exact(fh, 4 * dim, f"vector for {image_id!r}"),
                                dtype="<f4").astype(np.float64)
            store.add(image_id, vec)
        if fh.read(1):
            raise FeatureFileError("trailing bytes after declared entry count")
    if len(store) != count:
        raise FeatureFileError("duplicate image ids in feature file")
    return store


def save_features_tsv(store: ImageFeatureStore, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for image_id in store.ids():
            vals = "\t".join(repr(float(v)) for v in store.get(image_id))
            fh.write(f"{image_id}\t{vals}\n")


def _load_features_tsv(path) -> ImageFeatureStore:
    store = None
    try:
        text = Path(path).read_text(encoding="utf-8")
    except UnicodeDecodeError:
        raise FeatureFileError(
            f"{path}: bad magic (not a binary feature file) and not UTF-8 TSV") from None
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line:
            continue
        parts = line.split("\t")
        if len(parts) < 2:
            raise FeatureFileError(f"{path}:{lineno}: expected id<TAB>values")
        try:
            vec = np.array([float(p) for p in parts[1:]], dtype=np.float64)
        except ValueError:
            raise FeatureFileError(f"{path}:{lineno}: non-numeric feature value") from None
        if store is None:
            store = ImageFeatureStore(len(vec))
        elif len(vec) != store.feature_dim:
            raise FeatureFileError(
                f"{path}:{lineno}: dimension {len(vec)} != {store.feature_dim}")
        store.add(parts[0], vec)
    if store is None:
        raise FeatureFileError(f"{path}: no feature rows")
    return store


# ---------------------------------------------------------------------------
# caption and split files

def load_captions(path) -> list[tuple[str, str]]:
    pairs = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            if "\t" not in line:
                raise ValueError(f"{path}:{lineno}: expected image_id<TAB>caption")
            image_id, text = line.split("\t", 1)
            pairs.append((image_id, text))
    return pairs


def save_captions(pairs: list[tuple[str, str]], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for image_id, text in pairs:
            fh.write(f"{image_id}\t{text}\n")


def load_split_map(path) -> dict[str, str]:
    labels = {"train", "val", "test"}
    split = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 2 or parts[1] not in labels:
                raise ValueError(f"{path}:{lineno}: expected image_id<TAB>{{train|val|test}}")
            image_id, label = parts
            if split.get(image_id, label) != label:
                raise ValueError(f"{path}:{lineno}: image id {image_id!r} assigned to two splits")
            split[image_id] = label
    return split


def save_split_map(split: dict[str, str], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for image_id in sorted(split):
            fh.write(f"{image_id}\t{split[image_id]}\n")


def make_example(vocab: Vocabulary, image_id: str, text: str) -> CaptionedExample:
    tokens = vocab.encode(text)
    if not tokens:
        raise ValueError(f"caption for image {image_id!r} tokenizes to nothing: {text!r}")
    return CaptionedExample(image_id, tokens, text)


def build_dataset(pairs: list[tuple[str, str]], split_map: dict[str, str],
                  vocab: Vocabulary) -> DatasetSplit:
    """Partition captions into train/val/test; every id must be in the split map."""
    out = DatasetSplit()
    buckets = {"train": out.train, "val": out.validation, "test": out.test}
    for image_id, text in pairs:
        if image_id not in split_map:
            raise ValueError(f"image id {image_id!r} missing from split file")
        buckets[split_map[image_id]].append(make_example(vocab, image_id, text))
    return out


# ---------------------------------------------------------------------------
# synthetic corpus

# Word banks for the first eight topics; past that, banks are synthesized.
_TOPIC_BANKS = [
    ("beach", ["sand", "waves", "surfer", "shells"], ["sunny", "warm", "calm"], ["rolls", "glitters", "drifts"]),
    ("mountain", ["summit", "glacier", "ridge", "pines"], ["snowy", "steep", "misty"], ["rises", "looms", "towers"]),
    ("city", ["tram", "skyline", "plaza", "vendors"], ["busy", "bright", "loud"], ["hums", "glows", "bustles"]),
    ("forest", ["ferns", "moss", "canopy", "creek"], ["green", "quiet", "damp"], ["whispers", "sways", "murmurs"]),
    ("desert", ["dunes", "cactus", "mesa", "camels"], ["dry", "golden", "vast"], ["shimmers", "bakes", "stretches"]),
    ("river", ["rapids", "ferry", "reeds", "herons"], ["wide", "muddy", "swift"], ["flows", "winds", "churns"]),
    ("market", ["stalls", "spices", "baskets", "lanterns"], ["crowded", "colorful", "noisy"], ["buzzes", "teems", "sprawls"]),
    ("stadium", ["crowd", "pitch", "banners", "floodlights"], ["packed", "roaring", "festive"], ["cheers", "erupts", "thunders"]),
]

_TEMPLATES = [
    "the {adj} {noun} {verb} near the {noun2}",
    "a {adj} {noun} {verb} by the {noun2}",
    "the {noun} and the {noun2} {verb} in the {topic}",
]


def _topic_bank(k: int):
    if k < len(_TOPIC_BANKS):
        return _TOPIC_BANKS[k]
    return (f"zone{k}",
            [f"zone{k}thing{j}" for j in "abcd"],
            [f"zone{k}look{j}" for j in "abc"],
            [f"zone{k}act{j}" for j in "abc"])


@dataclass(frozen=True)
class SynthSpec:
    """Knobs for the synthetic corpus generator."""
    n_topics: int = 4
    captions_per_image: int = 2
    noise_dim: int = 4
    feature_noise: float = 0.1
    train_frac: float = 0.8
    val_frac: float = 0.1
    min_count: int = 1


def generate_synthetic_corpus(rng: Rng, n_images: int, spec: SynthSpec = SynthSpec()
                              ) -> tuple[DatasetSplit, ImageFeatureStore, Vocabulary]:
    """Desk-scale corpus whose captions depend on the image features.

    Each image gets a topic; its feature vector is a one-hot topic block
    (slightly jittered) plus uniform noise dims, and its captions are drawn
    from topic-specific word banks, so caption content is predictable from
    the feature vector.  Fully deterministic given the rng seed.
    """
    if n_images < 2:
        raise ValueError("need at least 2 images")
    dim = spec.n_topics + spec.noise_dim
    store = ImageFeatureStore(dim)
    image_ids = [f"img{i:04d}" for i in range(n_images)]

    topics = [i % spec.n_topics for i in range(n_images)]
    rng.shuffle(topics)

    pairs = []
    for image_id, topic in zip(image_ids, topics):
        vec = np.zeros(dim)
        vec[topic] = 1.0
        vec[:spec.n_topics] += rng.uniform(-spec.feature_noise, spec.feature_noise, spec.n_topics)
        if spec.noise_dim:
            vec[spec.n_topics:] = rng.uniform(-0.5, 0.5, spec.noise_dim)
        # Round-trip through f32 so the binary feature format is bit-exact.
        store.add(image_id, vec.astype(np.float32).astype(np.float64))

        name, nouns, adjs, verbs = _topic_bank(topic)
        for _ in range(spec.captions_per_image):
            noun = nouns[rng.randint(len(nouns))]
            noun2 = nouns[rng.randint(len(nouns))]
            text = _TEMPLATES[rng.randint(len(_TEMPLATES))].format(
                adj=adjs[rng.randint(len(adjs))], noun=noun, noun2=noun2,
                verb=verbs[rng.randint(len(verbs))], topic=name)
            pairs.append((image_id, text))

    shuffled = list(image_ids)
    rng.shuffle(shuffled)
    n_train = max(1, round(spec.train_frac * n_images))
    n_val = round(spec.val_frac * n_images)
    split_map = {}
    for pos, image_id in enumerate(shuffled):
        if pos < n_train:
            split_map[image_id] = "train"
        elif pos < n_train + n_val:
            split_map[image_id] = "val"
        else:
            split_map[image_id] = "test"

    train_texts = [text for image_id, text in pairs if split_map[image_id] == "train"]
    vocab = build_vocabulary(train_texts, min_count=spec.min_count)
    dataset = build_dataset(pairs, split_map, vocab)
    return dataset, store, vocab
