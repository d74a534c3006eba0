"""Synthetic image/caption data and the dataset, vocabulary and split files.

Each image is an attribute tuple (shape, colour, size, background).  Its
feature vector is the attribute one-hot code pushed through a fixed random
projection, plus Gaussian noise.  Labeled images carry several template
captions ranging from generic ("a circle") to fully discriminative
("a small red circle on a grass").
"""
from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

SHAPES = ("circle", "square", "triangle", "star", "hexagon", "diamond",
          "cross", "heart", "ring", "arrow")
COLORS = ("red", "green", "blue", "yellow", "purple", "orange",
          "pink", "brown", "black", "white", "gray", "cyan")
SIZES = ("small", "medium", "large")
BACKGROUNDS = ("grass", "sand", "water", "snow", "road", "wall",
               "sky", "carpet", "wood", "stone")

ATTRIBUTE_FIELDS = ("shape", "color", "size", "background")

# Surface words per attribute value.  Each mention in a reference caption
# picks one uniformly, so values with many names are mentioned less
# consistently across annotators.
SYNONYMS = {
    "red": ("red", "crimson"), "green": ("green", "olive"), "blue": ("blue", "navy"),
    "yellow": ("yellow", "golden"), "purple": ("purple", "violet"), "orange": ("orange", "amber"),
    "pink": ("pink", "rose"), "brown": ("brown", "tan"), "black": ("black", "dark"),
    "white": ("white", "pale"), "gray": ("gray", "grey"), "cyan": ("cyan", "teal"),
    "small": ("small", "tiny", "little"), "medium": ("medium", "average", "mid"),
    "large": ("large", "big", "huge"),
    "sand": ("sand", "beach"), "water": ("water", "lake"), "snow": ("snow", "ice", "frost"),
    "road": ("road", "street", "asphalt"), "wall": ("wall", "brick", "plaster"),
    "sky": ("sky", "clouds", "air", "heaven"), "carpet": ("carpet", "rug", "mat", "floor"),
    "wood": ("wood", "timber", "plank", "log"), "stone": ("stone", "rock", "pebble", "gravel"),
}

GENERIC_TEMPLATE = "a {shape}"
DISCRIMINATIVE_TEMPLATE = "a {size} {color} {shape} on a {background}"
PARTIAL_TEMPLATES = (
    "a {color} {shape}",
    "a {size} {shape}",
    "a {shape} on a {background}",
    "a {size} {color} {shape}",
    "a {color} {shape} on a {background}",
)

PAD, BOS, EOS, UNK = 0, 1, 2, 3
SPECIALS = {"PAD": PAD, "BOS": BOS, "EOS": EOS, "UNK": UNK}

MIN_COUNT = 6   # rarer tokens map to UNK
T_MAX = 16      # caption truncation length


class DatasetFormatError(ValueError):
    pass


@dataclass(frozen=True)
class AttributeTuple:
    shape: str
    color: str
    size: str
    background: str

    def as_dict(self):
        return {f: getattr(self, f) for f in ATTRIBUTE_FIELDS}


@dataclass
class ImageRecord:
    id: str
    features: np.ndarray
    attrs: AttributeTuple
    captions: list = field(default_factory=list)

    @property
    def labeled(self):
        return bool(self.captions)

    def __eq__(self, other):
        if not isinstance(other, ImageRecord):
            return NotImplemented
        return (self.id == other.id and self.attrs == other.attrs
                and self.captions == other.captions
                and self.features.shape == other.features.shape
                and bool(np.all(self.features == other.features)))


@dataclass
class DatasetSplit:
    labeled: list
    unlabeled: list
    val: list
    test: list

    def as_dict(self):
        return {"labeled": list(self.labeled), "unlabeled": list(self.unlabeled),
                "val": list(self.val), "test": list(self.test)}

    def validate(self, all_ids=None):
        groups = self.as_dict()
        seen = {}
        for name, ids in groups.items():
            for i in ids:
                if i in seen:
                    raise DatasetFormatError(f"id {i!r} appears in both {seen[i]} and {name}")
                seen[i] = name
        if all_ids is not None and set(seen) != set(all_ids):
            missing = sorted(set(all_ids) - set(seen))[:5]
            extra = sorted(set(seen) - set(all_ids))[:5]
            raise DatasetFormatError(f"split does not cover the dataset (missing {missing}, unknown {extra})")


@dataclass(frozen=True)
class ShapeWorldConfig:
    n_labeled: int = 2000
    n_unlabeled: int = 2000
    n_val: int = 500
    n_test: int = 500
    d_img: int = 64
    noise: float = 0.05
    captions_per_image: int = 5
    seed: int = 0
    synonyms: bool = True
    # relative salience of shape, colour, size, background in feature space
    attribute_scales: tuple = (2.0, 1.5, 1.0, 1.0)
    shapes: tuple = SHAPES
    colors: tuple = COLORS
    sizes: tuple = SIZES
    backgrounds: tuple = BACKGROUNDS

    @property
    def inventories(self):
        return (self.shapes, self.colors, self.sizes, self.backgrounds)

    @property
    def onehot_width(self):
        return sum(len(inv) for inv in self.inventories)


def tokenize(text):
    return text.lower().split()


def attribute_onehot(attrs, config):
    code = np.zeros(config.onehot_width)
    offset = 0
    for inv, value in zip(config.inventories, (attrs.shape, attrs.color, attrs.size, attrs.background)):
        code[offset + inv.index(value)] = 1.0
        offset += len(inv)
    return code


def projection_matrix(config):
    """Fixed random map from attribute one-hot codes to feature space."""
    rng = np.random.default_rng([config.seed, 0x5EED])
    proj = rng.normal(0.0, 1.0 / math.sqrt(config.d_img), size=(config.onehot_width, config.d_img))
    scales = np.concatenate([np.full(len(inv), s) for inv, s in zip(config.inventories, config.attribute_scales)])
    return proj * scales[:, None]


def surface_word(value, rng, synonyms=True):
    names = SYNONYMS.get(value, (value,)) if synonyms else (value,)
    return names[int(rng.integers(len(names)))]


def _captions_for(attrs, rng, k, synonyms=True):
    extra = rng.choice(len(PARTIAL_TEMPLATES), size=min(k - 2, len(PARTIAL_TEMPLATES)), replace=False)
    templates = [GENERIC_TEMPLATE, DISCRIMINATIVE_TEMPLATE] + [PARTIAL_TEMPLATES[j] for j in sorted(extra)]
    order = rng.permutation(len(templates))
    out = []
    for j in order:
        fill = {f: surface_word(v, rng, synonyms) for f, v in attrs.as_dict().items()}
        out.append(tokenize(templates[j].format(**fill)))
    return out


def generate(config=ShapeWorldConfig()):
    """Generate all records: labeled, unlabeled, val, test (in that order)."""
    if any(len(inv) == 0 for inv in config.inventories):
        raise ValueError("attribute inventories must be nonempty")
    counts = (config.n_labeled, config.n_unlabeled, config.n_val, config.n_test)
    if min(counts) < 0 or sum(counts) == 0:
        raise ValueError(f"image counts must be nonnegative with a positive total, got {counts}")
    if config.d_img < config.onehot_width:
        raise ValueError(f"d_img={config.d_img} is smaller than the attribute code width {config.onehot_width}")
    if config.captions_per_image < 2:
        raise ValueError("need at least two captions per labeled image")

    proj = projection_matrix(config)
    rng = np.random.default_rng(config.seed)
    records = []
    for part, n in zip(("labeled", "unlabeled", "val", "test"), counts):
        for _ in range(n):
            attrs = AttributeTuple(*(inv[rng.integers(len(inv))] for inv in config.inventories))
            features = attribute_onehot(attrs, config) @ proj
            features = features + rng.normal(0.0, config.noise, size=config.d_img)
            captions = [] if part == "unlabeled" else _captions_for(attrs, rng, config.captions_per_image, config.synonyms)
            records.append(ImageRecord(f"img{len(records):05d}", features, attrs, captions))
    return records


def default_split(config=ShapeWorldConfig()):
    ids = [f"img{i:05d}" for i in range(config.n_labeled + config.n_unlabeled + config.n_val + config.n_test)]
    a = config.n_labeled
    b = a + config.n_unlabeled
    c = b + config.n_val
    return DatasetSplit(ids[:a], ids[a:b], ids[b:c], ids[c:])


# ---------------------------------------------------------------------------
# vocabulary
# ---------------------------------------------------------------------------

class Vocabulary:
    """Token <-> id map with fixed specials PAD=0, BOS=1, EOS=2, UNK=3."""

    def __init__(self, tokens):
        self.token_to_id = dict(SPECIALS)
        for tok, idx in tokens.items():
            if tok in SPECIALS or idx in SPECIALS.values():
                raise DatasetFormatError(f"token {tok!r} collides with a special")
            self.token_to_id[tok] = idx
        self.id_to_token = {i: t for t, i in self.token_to_id.items()}
        if sorted(self.id_to_token) != list(range(len(self.token_to_id))):
            raise DatasetFormatError("vocabulary ids must be dense and unique")

    def __len__(self):
        return len(self.token_to_id)

    def __contains__(self, token):
        return token in self.token_to_id

    def __eq__(self, other):
        return isinstance(other, Vocabulary) and self.token_to_id == other.token_to_id

    @property
    def tokens(self):
        return {t: i for t, i in self.token_to_id.items() if t not in SPECIALS}

    def encode(self, tokens, t_max=T_MAX):
        return [self.token_to_id.get(t, UNK) for t in tokens[:t_max]]

    def decode(self, ids):
        out = []
        for i in ids:
            if i == EOS:
                break
            if i in (PAD, BOS):
                continue
            out.append(self.id_to_token[int(i)])
        return out


def build_vocab(corpus, min_count=MIN_COUNT):
    """Vocabulary over a caption corpus (iterable of token lists).

    Ids go to tokens by descending count, ties broken lexicographically.
    """
    counts = Counter(tok for caption in corpus for tok in caption)
    if not counts:
        raise ValueError("cannot build a vocabulary from an empty corpus")
    kept = sorted((t for t, n in counts.items() if n >= min_count and t not in SPECIALS),
                  key=lambda t: (-counts[t], t))
    return Vocabulary({t: len(SPECIALS) + k for k, t in enumerate(kept)})


# ---------------------------------------------------------------------------
# files
# ---------------------------------------------------------------------------

_RECORD_FIELDS = {"id", "features", "attrs", "captions"}


def record_to_json(rec):
    if not np.all(np.isfinite(rec.features)):
        raise DatasetFormatError(f"record {rec.id}: non-finite feature")
    return json.dumps({"id": rec.id, "features": [float(x) for x in rec.features],
                       "attrs": rec.attrs.as_dict(), "captions": rec.captions},
                      allow_nan=False)


def record_from_json(line, lineno=None):
    where = f"line {lineno}" if lineno is not None else "record"
    try:
        obj = json.loads(line)
    except json.JSONDecodeError as exc:
        raise DatasetFormatError(f"{where}: malformed JSON ({exc.msg})") from None
    if not isinstance(obj, dict):
        raise DatasetFormatError(f"{where}: expected an object")
    if set(obj) != _RECORD_FIELDS:
        unknown = sorted(set(obj) - _RECORD_FIELDS)
        missing = sorted(_RECORD_FIELDS - set(obj))
        raise DatasetFormatError(f"{where}: unknown fields {unknown}, missing fields {missing}")
    rid = obj["id"]
    if not isinstance(rid, str):
        raise DatasetFormatError(f"{where}: id must be a string")
    feats = obj["features"]
    if not isinstance(feats, list) or not all(isinstance(x, (int, float)) and not isinstance(x, bool) for x in feats):
        raise DatasetFormatError(f"{where} ({rid}): features must be an array of numbers")
    features = np.array(feats, dtype=np.float64)
    if not np.all(np.isfinite(features)):
        raise DatasetFormatError(f"{where} ({rid}): non-finite feature value")
    attrs = obj["attrs"]
    if (not isinstance(attrs, dict) or set(attrs) != set(ATTRIBUTE_FIELDS)
            or not all(isinstance(v, str) for v in attrs.values())):
        raise DatasetFormatError(f"{where} ({rid}): attrs must hold the four attribute strings")
    caps = obj["captions"]
    if not isinstance(caps, list) or not all(
            isinstance(c, list) and all(isinstance(t, str) and t == t.lower() for t in c) for c in caps):
        raise DatasetFormatError(f"{where} ({rid}): captions must be arrays of lowercase token strings")
    return ImageRecord(rid, features, AttributeTuple(**attrs), [list(c) for c in caps])


def save_dataset(records, path):
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(record_to_json(rec) + "\n")


def load_dataset(path):
    records = []
    ids = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            rec = record_from_json(line, lineno)
            if rec.id in ids:
                raise DatasetFormatError(f"line {lineno}: duplicate id {rec.id!r}")
            ids.add(rec.id)
            records.append(rec)
    return records


def save_vocab(vocab, path, fingerprint=None):
    payload = {"specials": dict(SPECIALS), "tokens": vocab.tokens}
    if fingerprint is not None:
        payload["config_fingerprint"] = fingerprint
    Path(path).write_text(json.dumps(payload, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def load_vocab(path):
    obj = json.loads(Path(path).read_text(encoding="utf-8"))
    if not isinstance(obj, dict) or set(obj) - {"config_fingerprint"} != {"specials", "tokens"}:
        raise DatasetFormatError(f"{path}: vocabulary file needs exactly 'specials' and 'tokens'")
    if obj["specials"] != SPECIALS:
        raise DatasetFormatError(f"{path}: specials must be {SPECIALS}")
    return Vocabulary({str(t): int(i) for t, i in obj["tokens"].items()})


def save_split(split, path, fingerprint=None):
    payload = split.as_dict()
    if fingerprint is not None:
        payload["config_fingerprint"] = fingerprint
    Path(path).write_text(json.dumps(payload, indent=1) + "\n", encoding="utf-8")


def load_split(path):
    obj = json.loads(Path(path).read_text(encoding="utf-8"))
    keys = {"labeled", "unlabeled", "val", "test"}
    if not isinstance(obj, dict) or set(obj) - {"config_fingerprint"} != keys:
        raise DatasetFormatError(f"{path}: split file needs exactly the keys {sorted(keys)}")
    split = DatasetSplit(**{k: [str(i) for i in obj[k]] for k in keys})
    split.validate()
    return split


class EncodedDataset:
    """Records indexed by id with captions encoded through a vocabulary."""

    def __init__(self, records, split, vocab, t_max=T_MAX):
        split.validate([r.id for r in records])
        self.split = split
        self.vocab = vocab
        self.ids = [r.id for r in records]
        self.row = {r.id: k for k, r in enumerate(records)}
        self.features = np.array([r.features for r in records], dtype=np.float64)
        self.records = {r.id: r for r in records}
        self.refs = {r.id: [vocab.encode(c, t_max) for c in r.captions] for r in records if r.captions}
        for part in ("labeled", "val", "test"):
            unlabeled = [i for i in getattr(split, part) if i not in self.refs]
            if unlabeled:
                raise DatasetFormatError(f"{part} split contains images without captions, e.g. {unlabeled[0]}")

    def features_of(self, ids):
        return self.features[[self.row[i] for i in ids]]

    def refs_of(self, ids):
        return [self.refs[i] for i in ids]
