"""Corpus ingestion, the synthetic scene corpus, vocabulary and POS lexicon.

On-disk layout (all little-endian, UTF-8):
  manifest.json   {modalities: [{name, d_v, K, file}], captions_file,
                   lexicon_file, category_count?}
  captions.jsonl  one record per video {video_id, split, category?, captions}
  features .bin   contiguous f32, (num_videos, K, d_v), manifest video order
  lexicon.tsv     word <tab> tag
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import (
    EmptyCorpus,
    InvalidSpec,
    MissingFile,
    ShapeMismatch,
    UnknownSplit,
    UnknownToken,
)
from .model import FIRST_WORD_ID, RESERVED_TOKENS
from .model import vocab_hash as _vocab_hash

SPLITS = ("train", "val", "test")

POS_TAGS = ("noun", "verb", "adjective", "adverb", "determiner", "other")

COPULA_STOPLIST = frozenset(
    ["is", "are", "was", "were", "be", "been", "being", "am"])


class Vocabulary:
    """Token <-> id bijection with reserved ids 0..4."""

    def __init__(self, words, frequencies=None):
        self.tokens = list(RESERVED_TOKENS) + list(words)
        if len(set(self.tokens)) != len(self.tokens):
            raise UnknownToken("duplicate vocabulary entries")
        for w in words:
            if w in RESERVED_TOKENS:
                raise UnknownToken(f"reserved token {w!r} in caption vocabulary")
        self.index = {w: i for i, w in enumerate(self.tokens)}
        self.frequencies = dict(frequencies or {})

    def __len__(self):
        return len(self.tokens)

    def __contains__(self, word):
        return word in self.index

    def id(self, word):
        try:
            return self.index[word]
        except KeyError:
            raise UnknownToken(f"unknown word {word!r}") from None

    def word(self, token_id):
        return self.tokens[token_id]

    def encode(self, words):
        return [self.id(w) for w in words]

    def decode(self, ids):
        return [self.tokens[i] for i in ids]

    @property
    def words(self):
        """Caption words only (reserved entries excluded)."""
        return self.tokens[FIRST_WORD_ID:]

    def hash(self):
        return _vocab_hash(self.tokens)

    @classmethod
    def from_captions(cls, caption_lists):
        freq = {}
        for captions in caption_lists:
            for caption in captions:
                for w in caption:
                    freq[w] = freq.get(w, 0) + 1
        return cls(sorted(freq), frequencies=freq)


class PosLexicon:
    """word -> POS tag plus the copula/auxiliary stoplist."""

    def __init__(self, tags, stoplist=COPULA_STOPLIST):
        for word, tag in tags.items():
            if tag not in POS_TAGS:
                raise UnknownToken(f"bad POS tag {tag!r} for {word!r}")
        self.tags = dict(tags)
        self.stoplist = frozenset(stoplist)

    def tag(self, word):
        try:
            return self.tags[word]
        except KeyError:
            raise UnknownToken(f"word {word!r} missing from lexicon") from None

    def is_visual(self, word, pos_subset=("noun", "verb")):
        return self.tag(word) in pos_subset and word not in self.stoplist

    def validate_vocab(self, vocab: Vocabulary):
        missing = [w for w in vocab.words if w not in self.tags]
        if missing:
            raise UnknownToken(f"untagged vocabulary words: {missing}")

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            for word in sorted(self.tags):
                fh.write(f"{word}\t{self.tags[word]}\n")

    @classmethod
    def load(cls, path):
        tags = {}
        with open(path, "r", encoding="utf-8") as fh:
            for line in fh:
                line = line.rstrip("\n")
                if not line:
                    continue
                word, tag = line.split("\t")
                tags[word] = tag
        return cls(tags)


@dataclass
class VideoRecord:
    video_id: str
    features: list  # per modality, (K, d_v) float32
    captions: list  # list of token-string lists
    split: str
    category: int | None = None


@dataclass
class Corpus:
    records: list
    vocab: Vocabulary
    lexicon: PosLexicon
    modalities: list  # [{name, d_v, K}]
    category_count: int = 0
    truncated_captions: int = 0

    def split(self, name):
        if name not in SPLITS:
            raise UnknownSplit(f"unknown split {name!r}")
        return [r for r in self.records if r.split == name]

    @property
    def K(self):
        return self.modalities[0]["K"]

    @property
    def modality_dims(self):
        return tuple(m["d_v"] for m in self.modalities)


def length_distribution(captions, n_max):
    """Normalized histogram of caption lengths, clamped to n_max.

    Index j holds the share of captions of length j+1.
    """
    hist = np.zeros(n_max, dtype=np.float64)
    for caption in captions:
        n = min(len(caption), n_max)
        hist[n - 1] += 1.0
    if hist.sum() == 0:
        raise EmptyCorpus("no captions")
    return hist / hist.sum()


def features_of(records, batch_indices=None):
    """Stack per-modality feature arrays over a list of records."""
    if batch_indices is not None:
        records = [records[i] for i in batch_indices]
    n_mod = len(records[0].features)
    return [np.stack([r.features[m] for r in records]) for m in range(n_mod)]


def categories_of(records, batch_indices=None):
    if batch_indices is not None:
        records = [records[i] for i in batch_indices]
    if records[0].category is None:
        return None
    return np.array([r.category for r in records], dtype=np.int64)


# ---------------------------------------------------------------------------
# Loading / saving
# ---------------------------------------------------------------------------

def load_corpus(manifest_path, n_max=None, vocab=None):
    """Load and fully validate a corpus from its manifest.

    n_max, when given, truncates overlong captions with a warning counter.
    vocab, when given, freezes the vocabulary; unseen words are errors.
    """
    manifest_path = os.fspath(manifest_path)
    if not os.path.exists(manifest_path):
        raise MissingFile(manifest_path)
    base = os.path.dirname(manifest_path)
    with open(manifest_path, "r", encoding="utf-8") as fh:
        manifest = json.load(fh)

    def _resolve(name):
        path = os.path.join(base, name)
        if not os.path.exists(path):
            raise MissingFile(path)
        return path

    captions_path = _resolve(manifest["captions_file"])
    lexicon = PosLexicon.load(_resolve(manifest["lexicon_file"]))
    category_count = int(manifest.get("category_count", 0))

    raw_records = []
    truncated = 0
    with open(captions_path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            rec = json.loads(line)
            if rec["split"] not in SPLITS:
                raise UnknownSplit(f"line {lineno}: split {rec['split']!r}")
            captions = []
            for cap in rec["captions"]:
                words = cap.split() if isinstance(cap, str) else list(cap)
                if not words:
                    raise UnknownToken(f"line {lineno}: empty caption")
                if vocab is not None:
                    for w in words:
                        if w not in vocab:
                            raise UnknownToken(
                                f"line {lineno}: out-of-vocabulary word {w!r}")
                if n_max is not None and len(words) > n_max:
                    words = words[:n_max]
                    truncated += 1
                captions.append(words)
            category = rec.get("category")
            if category is not None:
                category = int(category)
                if not 0 <= category < max(category_count, 1):
                    raise UnknownSplit(
                        f"line {lineno}: category {category} out of range")
            raw_records.append((rec["video_id"], rec["split"], category, captions))
    if not raw_records:
        raise EmptyCorpus(captions_path)

    n_videos = len(raw_records)
    modalities = []
    feature_blocks = []
    for mod in manifest["modalities"]:
        path = _resolve(mod["file"])
        k, dv = int(mod["K"]), int(mod["d_v"])
        raw = np.fromfile(path, dtype="<f4")
        expected = n_videos * k * dv
        if raw.size != expected:
            raise ShapeMismatch(
                f"{path}: expected {expected} floats for {n_videos} videos, "
                f"got {raw.size}")
        feature_blocks.append(raw.reshape(n_videos, k, dv))
        modalities.append({"name": mod["name"], "d_v": dv, "K": k})

    records = []
    for i, (vid, split, category, captions) in enumerate(raw_records):
        feats = [block[i] for block in feature_blocks]
        records.append(VideoRecord(vid, feats, captions, split, category))

    if vocab is None:
        vocab = Vocabulary.from_captions(
            [r.captions for r in records])
    lexicon.validate_vocab(vocab)
    return Corpus(records, vocab, lexicon, modalities,
                  category_count=category_count, truncated_captions=truncated)


def save_corpus(corpus: Corpus, out_dir):
    """Write a corpus in the manifest layout; inverse of load_corpus."""
    os.makedirs(out_dir, exist_ok=True)
    modalities = []
    for m, mod in enumerate(corpus.modalities):
        fname = f"features_{mod['name']}.bin"
        block = np.stack([r.features[m] for r in corpus.records]).astype("<f4")
        block.tofile(os.path.join(out_dir, fname))
        modalities.append({"name": mod["name"], "d_v": mod["d_v"],
                           "K": mod["K"], "file": fname})
    with open(os.path.join(out_dir, "captions.jsonl"), "w", encoding="utf-8") as fh:
        for r in corpus.records:
            rec = {"video_id": r.video_id, "split": r.split,
                   "captions": [" ".join(c) for c in r.captions]}
            if r.category is not None:
                rec["category"] = r.category
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    corpus.lexicon.save(os.path.join(out_dir, "lexicon.tsv"))
    manifest = {"modalities": modalities, "captions_file": "captions.jsonl",
                "lexicon_file": "lexicon.tsv"}
    if corpus.category_count:
        manifest["category_count"] = corpus.category_count
    with open(os.path.join(out_dir, "manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    return os.path.join(out_dir, "manifest.json")


# ---------------------------------------------------------------------------
# Synthetic corpus
# ---------------------------------------------------------------------------

_SUBJECTS = [
    ("man", "guy"), ("woman", "lady"), ("girl",), ("boy",), ("dog",),
    ("cat",), ("chef",), ("player",), ("monkey",), ("musician",),
]
_VERBS = [
    ("cutting", "slicing"), ("cooking",), ("playing",), ("riding",),
    ("washing",), ("throwing",), ("reading",), ("holding",),
]
_OBJECTS = [
    ("bread",), ("guitar",), ("ball",), ("bike",), ("onion", "potato"),
    ("book",), ("car",), ("bottle",), ("piano",), ("drum",),
]
_PLACES = [("kitchen",), ("park",), ("field",), ("street",)]

_FUNCTION_WORDS = {"a": "determiner", "the": "determiner", "is": "verb",
                   "there": "other", "in": "other"}


@dataclass
class SynthSpec:
    videos_train: int = 500
    videos_val: int = 50
    videos_test: int = 100
    K: int = 8
    d_v: int = 48
    modalities: tuple = ("appearance", "motion")
    sigma: float = 0.05
    captions_min: int = 3
    captions_max: int = 10
    synonym_prob: float = 0.2
    place_prob: float = 0.5
    with_category: bool = True
    n_subjects: int = 10
    n_verbs: int = 8
    n_objects: int = 10
    n_places: int = 4

    def __post_init__(self):
        if self.videos_train < 1 or self.K < 1 or self.d_v < 1:
            raise InvalidSpec("videos_train, K and d_v must be positive")
        if not 1 <= self.captions_min <= self.captions_max:
            raise InvalidSpec("caption count range invalid")
        if self.n_subjects > len(_SUBJECTS) or self.n_verbs > len(_VERBS) \
                or self.n_objects > len(_OBJECTS) or self.n_places > len(_PLACES):
            raise InvalidSpec("concept counts exceed the built-in word lists")
        if not 0.0 <= self.synonym_prob <= 1.0 or not 0.0 <= self.place_prob <= 1.0:
            raise InvalidSpec("probabilities must lie in [0, 1]")
        n_concepts = (self.n_subjects + self.n_verbs + self.n_objects
                      + self.n_places)
        if self.d_v < n_concepts:
            raise InvalidSpec(
                f"d_v={self.d_v} < number of concepts {n_concepts}")
        self.modalities = tuple(self.modalities)
        if not 1 <= len(self.modalities) <= 2:
            raise InvalidSpec("1 or 2 modalities supported")

    @classmethod
    def from_dict(cls, d):
        known = set(cls.__dataclass_fields__)
        extra = set(d) - known
        if extra:
            raise InvalidSpec(f"unknown synth spec keys: {sorted(extra)}")
        return cls(**d)


def _caption_templates(scene, rng, spec):
    """Realize one caption for a scene as a word list."""
    subj, verb, obj, place = scene

    def pick(forms):
        if len(forms) > 1 and rng.random() < spec.synonym_prob:
            return forms[rng.integers(1, len(forms))]
        return forms[0]

    s, v, o = pick(subj), pick(verb), pick(obj)
    choices = [
        ["a", s, "is", v, "a", o],
        ["the", s, "is", v, "a", o],
        ["a", s, v, "a", o],
        ["there", "is", "a", s, v, "a", o],
    ]
    words = list(choices[rng.integers(0, len(choices))])
    if place is not None and rng.random() < spec.place_prob:
        words += ["in", "the", pick(place)]
    return words


def synth_generate(spec: SynthSpec, seed: int):
    """Procedural scene corpus: concept prototypes rendered to noisy features
    plus templated multi-reference captions. Deterministic under seed.

    Returns (corpus, scenes) where scenes maps video_id to its concept words.
    """
    subjects = _SUBJECTS[: spec.n_subjects]
    verbs = _VERBS[: spec.n_verbs]
    objects = _OBJECTS[: spec.n_objects]
    places = _PLACES[: spec.n_places]
    concepts = subjects + verbs + objects + places
    n_concepts = len(concepts)
    if spec.d_v < n_concepts:
        raise InvalidSpec(f"d_v={spec.d_v} < number of concepts {n_concepts}")

    proto_rng = ad.seeded_rng(seed, "synth", "prototypes")
    basis, _ = np.linalg.qr(proto_rng.standard_normal((spec.d_v, spec.d_v)))
    prototypes = {c: basis[i] for i, c in enumerate(concepts)}
    # minimum pairwise distance between distinct scene sums is positive by
    # construction: prototypes are orthonormal rows
    scene_counts = {}

    totals = {"train": spec.videos_train, "val": spec.videos_val,
              "test": spec.videos_test}
    records = []
    scenes = {}
    index = 0
    for split in SPLITS:
        for _ in range(totals[split]):
            rng = ad.seeded_rng(seed, "synth", "video", index)
            subj = subjects[rng.integers(0, len(subjects))]
            verb = verbs[rng.integers(0, len(verbs))]
            obj = objects[rng.integers(0, len(objects))]
            place = places[rng.integers(0, len(places))] \
                if rng.random() < spec.place_prob else None
            scene = (subj, verb, obj, place)

            appearance = prototypes[subj] + prototypes[obj]
            motion = prototypes[verb].copy()
            if place is not None:
                appearance = appearance + prototypes[place]
            modality_bases = {"appearance": appearance, "motion": motion,
                              "joint": appearance + motion}
            feats = []
            for name in spec.modalities:
                base = modality_bases.get(name)
                if base is None:
                    raise InvalidSpec(f"unknown modality {name!r}")
                noise = rng.normal(0.0, spec.sigma, size=(spec.K, spec.d_v))
                feats.append((base[None, :] + noise).astype("<f4"))

            n_caps = int(rng.integers(spec.captions_min, spec.captions_max + 1))
            captions = [_caption_templates(scene, rng, spec) for _ in range(n_caps)]
            vid = f"video{index:05d}"
            category = verbs.index(verb) if spec.with_category else None
            records.append(VideoRecord(vid, feats, captions, split, category))
            scenes[vid] = {
                "subject": list(subj), "verb": list(verb), "object": list(obj),
                "place": list(place) if place else [],
            }
            if split == "train":
                for c in (subj, verb, obj) + ((place,) if place else ()):
                    scene_counts[c] = scene_counts.get(c, 0) + 1
            index += 1

    tags = dict(_FUNCTION_WORDS)
    for group, tag in ((subjects, "noun"), (objects, "noun"), (places, "noun"),
                       (verbs, "verb")):
        for forms in group:
            for w in forms:
                tags[w] = tag
    lexicon = PosLexicon(tags)
    vocab = Vocabulary.from_captions([r.captions for r in records])
    lexicon.validate_vocab(vocab)

    modalities = [{"name": name, "d_v": spec.d_v, "K": spec.K}
                  for name in spec.modalities]
    corpus = Corpus(records, vocab, lexicon, modalities,
                    category_count=len(verbs) if spec.with_category else 0)
    return corpus, scenes
