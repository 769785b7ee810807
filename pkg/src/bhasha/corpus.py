"""Labeled instances, a small trainable subword tokenizer, dataset I/O, and a
synthetic bilingual corpus generator.

The synthetic generator builds class-indicative content words and neutral
function words per language. Low-resource (LRL) words are fresh surface forms
bijectively mapped to high-resource (HRL) words, except for a configurable
fraction that reuses the HRL surface form (the shared-script case). It makes
cross-lingual transfer measurable at desk scale: a model can only classify an
LRL sentence well if it has learned what the LRL indicator words mean, and the
returned lexicon is the only bridge for rarely-seen ones.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import ConfigError, ParseError, SchemaError

PAD_ID = 0
CLS_ID = 1
UNK_ID = 2
SPECIAL_PIECES = ["<pad>", "<cls>", "<unk>"]
SPECIAL_IDS = frozenset({PAD_ID, CLS_ID, UNK_ID})

SENTENCE_TASK = "sentence_classification"
SEQUENCE_TASK = "sequence_labeling"


@dataclass
class Instance:
    """One labeled text unit with a language tag.

    Exactly one of ``sentence_label`` / ``token_labels`` is present; which one
    is determined by the task. ``token_ids`` and ``spans`` are populated by
    :func:`encode_instance`. ``spans[k]`` gives the [start, end) token
    positions of word k (CLS occupies position 0).
    """

    id: str
    language: str  # "HRL" | "LRL"
    words: list[str]
    sentence_label: Optional[int] = None
    token_labels: Optional[list[int]] = None
    token_ids: Optional[list[int]] = None
    spans: Optional[list[tuple[int, int]]] = None

    def __post_init__(self):
        if (self.sentence_label is None) == (self.token_labels is None):
            raise SchemaError(
                f"instance {self.id}: exactly one of sentence_label/token_labels must be present"
            )
        if self.token_labels is not None and len(self.token_labels) != len(self.words):
            raise SchemaError(
                f"instance {self.id}: {len(self.token_labels)} tags for {len(self.words)} words"
            )
        if self.language not in ("HRL", "LRL"):
            raise SchemaError(f"instance {self.id}: unknown language tag {self.language!r}")


@dataclass
class Dataset:
    task: str
    label_set: list[str]
    splits: dict[str, list[Instance]] = field(default_factory=lambda: {"train": [], "validation": [], "test": []})

    def __post_init__(self):
        if self.task not in (SENTENCE_TASK, SEQUENCE_TASK):
            raise SchemaError(f"unknown task {self.task!r}")

    def all_instances(self):
        for split in ("train", "validation", "test"):
            yield from self.splits.get(split, [])


# ---------------------------------------------------------------------------
# tokenizer


class TokenizerModel:
    """Greedy longest-match subword tokenizer.

    Piece ids are fixed: PAD=0, CLS=1, UNK=2, then the inventory. Every single
    character seen at build time is a piece, so no word over the build-time
    alphabet fails to tokenize; unseen characters map to UNK.
    """

    def __init__(self, pieces: list[str]):
        if pieces[:3] != SPECIAL_PIECES:
            raise ConfigError("piece list must start with the three special pieces")
        self.pieces = list(pieces)
        self.piece_to_id = {p: i for i, p in enumerate(self.pieces)}
        if len(self.piece_to_id) != len(self.pieces):
            raise ConfigError("duplicate pieces in inventory")
        self.max_piece_len = max((len(p) for p in self.pieces[3:]), default=1)

    def __len__(self):
        return len(self.pieces)

    def encode_word(self, word: str) -> list[int]:
        """Greedy longest-match left-to-right segmentation of one word."""
        if not word:
            raise SchemaError("cannot encode an empty word")
        ids = []
        i = 0
        n = len(word)
        while i < n:
            match = None
            for j in range(min(n, i + self.max_piece_len), i, -1):
                pid = self.piece_to_id.get(word[i:j])
                if pid is not None:
                    match = (pid, j)
                    break
            if match is None:
                ids.append(UNK_ID)
                i += 1
            else:
                ids.append(match[0])
                i = match[1]
        return ids

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            for p in self.pieces:
                fh.write(p + "\n")

    @classmethod
    def load(cls, path) -> "TokenizerModel":
        with open(path, encoding="utf-8") as fh:
            pieces = [line.rstrip("\n") for line in fh if line.rstrip("\n")]
        return cls(pieces)


def build_tokenizer(words, target_vocab_size: int) -> TokenizerModel:
    """Build a piece inventory: all characters plus the most frequent
    multi-character substrings, up to ``target_vocab_size`` total pieces.

    Deterministic given input order; ties are broken by (shorter, lexicographic).
    """
    words = list(words)
    if not words:
        raise ConfigError("build_tokenizer: empty corpus")
    chars = sorted({c for w in words for c in w})
    if target_vocab_size < len(chars) + len(SPECIAL_PIECES):
        raise ConfigError(
            f"target vocab size {target_vocab_size} cannot hold "
            f"{len(chars)} characters plus {len(SPECIAL_PIECES)} specials"
        )
    counts: dict[str, int] = {}
    for w in words:
        n = len(w)
        for i in range(n):
            for j in range(i + 2, n + 1):
                sub = w[i:j]
                counts[sub] = counts.get(sub, 0) + 1
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], len(kv[0]), kv[0]))
    budget = target_vocab_size - len(SPECIAL_PIECES) - len(chars)
    multi = [s for s, _ in ranked[:budget]]
    return TokenizerModel(SPECIAL_PIECES + chars + sorted(multi))


def encode_instance(inst: Instance, tok: TokenizerModel, max_len: int) -> Instance:
    """Populate ``token_ids`` (CLS-prefixed) and word spans, in place.

    Words whose pieces would overflow ``max_len`` are dropped whole, together
    with their tags, so spans always partition the encoded positions.
    """
    ids = [CLS_ID]
    spans = []
    kept_words = []
    kept_tags = [] if inst.token_labels is not None else None
    for k, w in enumerate(inst.words):
        pieces = tok.encode_word(w)
        if len(ids) + len(pieces) > max_len:
            break
        spans.append((len(ids), len(ids) + len(pieces)))
        ids.extend(pieces)
        kept_words.append(w)
        if kept_tags is not None:
            kept_tags.append(inst.token_labels[k])
    inst.words = kept_words
    if kept_tags is not None:
        inst.token_labels = kept_tags
    inst.token_ids = ids
    inst.spans = spans
    return inst


def expand_tags_to_pieces(inst: Instance) -> list[int]:
    """Replicate each word's tag onto each of its pieces (CLS excluded)."""
    if inst.token_labels is None or inst.spans is None:
        raise SchemaError("expand_tags_to_pieces needs an encoded sequence-labeling instance")
    out = []
    for tag, (s, e) in zip(inst.token_labels, inst.spans):
        out.extend([tag] * (e - s))
    return out


def collapse_tags_from_pieces(inst: Instance, piece_tags: list[int]) -> list[int]:
    """Inverse of :func:`expand_tags_to_pieces`: first piece of each word wins."""
    return [piece_tags[s - 1] for s, _ in inst.spans]


# ---------------------------------------------------------------------------
# dataset I/O (UTF-8 JSON-lines, one instance per line)


def save_dataset(ds: Dataset, path):
    with open(path, "w", encoding="utf-8") as fh:
        header = {"task": ds.task, "label_set": ds.label_set}
        fh.write(json.dumps(header, ensure_ascii=False) + "\n")
        for split in ("train", "validation", "test"):
            for inst in ds.splits[split]:
                rec = {"id": inst.id, "split": split, "language": inst.language, "words": inst.words}
                if ds.task == SENTENCE_TASK:
                    rec["label"] = inst.sentence_label
                else:
                    rec["tags"] = inst.token_labels
                fh.write(json.dumps(rec, ensure_ascii=False) + "\n")


def load_dataset(path) -> Dataset:
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise ParseError(f"{path}: empty file (missing header line)")
    try:
        header = json.loads(lines[0])
        ds = Dataset(task=header["task"], label_set=list(header["label_set"]))
    except (json.JSONDecodeError, KeyError) as exc:
        raise ParseError(f"{path}:1: bad header: {exc}") from exc
    nlabels = len(ds.label_set)
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ParseError(f"{path}:{lineno}: {exc}") from exc
        try:
            if ds.task == SENTENCE_TASK:
                inst = Instance(id=rec["id"], language=rec["language"], words=rec["words"],
                                sentence_label=rec["label"])
                if inst.sentence_label >= nlabels:
                    raise SchemaError(f"{path}:{lineno}: label {inst.sentence_label} out of range")
            else:
                inst = Instance(id=rec["id"], language=rec["language"], words=rec["words"],
                                token_labels=rec["tags"])
                if any(t >= nlabels for t in inst.token_labels):
                    raise SchemaError(f"{path}:{lineno}: tag out of range")
            split = rec["split"]
            if split not in ds.splits:
                raise SchemaError(f"{path}:{lineno}: unknown split {split!r}")
        except KeyError as exc:
            raise ParseError(f"{path}:{lineno}: missing field {exc}") from exc
        except SchemaError as exc:
            raise SchemaError(f"{path}:{lineno}: {exc}") from exc
        ds.splits[split].append(inst)
    return ds


# ---------------------------------------------------------------------------
# synthetic bilingual corpus


@dataclass
class SyntheticSpec:
    """Configuration of the synthetic bilingual corpus generator."""

    task: str = SENTENCE_TASK
    num_classes: int = 2
    hrl_vocab_size: int = 200         # class-indicator words, split evenly over classes
    lrl_vocab_size: int = 200         # must be <= hrl_vocab_size (bijective into it)
    num_function_words: int = 12      # neutral words per language
    shared_surface_fraction: float = 0.1
    lrl_train_coverage: float = 1.0   # fraction of LRL indicator vocab seen at train time
    min_len: int = 4
    max_len: int = 9
    signal_strength: float = 0.5      # probability a content slot carries the class indicator
    hrl_sizes: tuple = (2000, 200, 300)   # train / validation / test
    lrl_sizes: tuple = (100, 100, 300)
    seed: int = 0

    def validate(self):
        if self.num_classes < 2:
            raise ConfigError("num_classes must be >= 2")
        if self.min_len < 2 or self.max_len < self.min_len:
            raise ConfigError("need max_len >= min_len >= 2")
        if not (0.0 < self.signal_strength <= 1.0):
            raise ConfigError("signal_strength must be in (0, 1]")
        if not (0.0 <= self.shared_surface_fraction <= 1.0):
            raise ConfigError("shared_surface_fraction must be in [0, 1]")
        if not (0.0 < self.lrl_train_coverage <= 1.0):
            raise ConfigError("lrl_train_coverage must be in (0, 1]")
        if self.lrl_vocab_size > self.hrl_vocab_size:
            raise ConfigError("lrl_vocab_size must not exceed hrl_vocab_size")
        if self.hrl_vocab_size < self.num_classes or self.lrl_vocab_size < self.num_classes:
            raise ConfigError("vocab sizes must cover every class")
        if any(s < 1 for s in tuple(self.hrl_sizes) + tuple(self.lrl_sizes)):
            raise ConfigError("all split sizes must be >= 1")


_HRL_ALPHABET = "abcdefghijklm"
_LRL_ALPHABET = "nopqrstuvwxyz"


def _make_word(rng: np.random.Generator, alphabet: str, taken: set, min_syl=2, max_syl=3) -> str:
    cons = alphabet[::2]
    vow = alphabet[1::2]
    while True:
        nsyl = int(rng.integers(min_syl, max_syl + 1))
        w = "".join(cons[rng.integers(len(cons))] + vow[rng.integers(len(vow))] for _ in range(nsyl))
        if w not in taken:
            taken.add(w)
            return w


def generate_synthetic(spec: SyntheticSpec):
    """Return ``(hrl Dataset, lrl Dataset, lexicon dict LRL word -> HRL word)``.

    Fully seeded and deterministic. Sentence labels are the class whose
    indicator words were planted; in the labeling task each word is tagged
    with its own class (function words get the neutral tag).
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    per_class_h = spec.hrl_vocab_size // spec.num_classes
    per_class_l = spec.lrl_vocab_size // spec.num_classes

    taken: set[str] = set()
    hrl_indicators = [[_make_word(rng, _HRL_ALPHABET, taken) for _ in range(per_class_h)]
                      for _ in range(spec.num_classes)]
    hrl_function = [_make_word(rng, _HRL_ALPHABET, taken) for _ in range(spec.num_function_words)]

    lexicon: dict[str, str] = {}
    lrl_indicators = []
    for c in range(spec.num_classes):
        words = []
        for k in range(per_class_l):
            hrl_w = hrl_indicators[c][k]
            if rng.random() < spec.shared_surface_fraction:
                w = hrl_w
            else:
                w = _make_word(rng, _LRL_ALPHABET, taken)
            words.append(w)
            lexicon[w] = hrl_w
        lrl_indicators.append(words)
    lrl_function = []
    for k in range(spec.num_function_words):
        hrl_w = hrl_function[k]
        if rng.random() < spec.shared_surface_fraction:
            w = hrl_w
        else:
            w = _make_word(rng, _LRL_ALPHABET, taken)
        lrl_function.append(w)
        lexicon[w] = hrl_w

    if spec.task == SENTENCE_TASK:
        label_set = [f"class_{c}" for c in range(spec.num_classes)]
    else:
        label_set = ["O"] + [f"class_{c}" for c in range(spec.num_classes)]

    def draw_sentence(c, length, indicators, function_words):
        """One sentence planted for class c: each slot carries a class-c
        indicator with probability signal_strength, otherwise a neutral
        function word or an other-class distractor (equal shares). The label
        is the dominating class, so sentences are redrawn until class c's
        indicators strictly dominate."""
        for _ in range(100):
            words, tags, counts = [], [], [0] * spec.num_classes
            for _ in range(length):
                r = rng.random()
                if r < spec.signal_strength:
                    cls = c
                elif r < spec.signal_strength + (1 - spec.signal_strength) / 2:
                    cls = None
                else:
                    others = [k for k in range(spec.num_classes) if k != c]
                    cls = others[int(rng.integers(len(others)))]
                if cls is None:
                    words.append(function_words[int(rng.integers(len(function_words)))])
                    tags.append(0)
                else:
                    words.append(indicators[cls][int(rng.integers(len(indicators[cls])))])
                    tags.append(cls + 1)
                    counts[cls] += 1
            if counts[c] > max(counts[:c] + counts[c + 1:], default=0):
                return words, tags
        raise ConfigError(
            "signal_strength too low to draw majority-class sentences of this length")

    def make_split(language, indicators, function_words, size, split, offset):
        out = []
        for i in range(size):
            c = int(rng.integers(spec.num_classes))
            length = int(rng.integers(spec.min_len, spec.max_len + 1))
            words, tags = draw_sentence(c, length, indicators, function_words)
            iid = f"{language.lower()}-{split}-{offset + i}"
            if spec.task == SENTENCE_TASK:
                out.append(Instance(id=iid, language=language, words=words, sentence_label=c))
            else:
                out.append(Instance(id=iid, language=language, words=words, token_labels=tags))
        return out

    def make_dataset(language, indicators, function_words, sizes):
        ds = Dataset(task=spec.task, label_set=label_set)
        for split, size in zip(("train", "validation", "test"), sizes):
            pools = indicators
            if language == "LRL" and split == "train" and spec.lrl_train_coverage < 1.0:
                # train/test vocabulary shift: evaluation sentences contain
                # indicator words never observed in the low-resource train set
                k = max(1, int(np.ceil(spec.lrl_train_coverage * per_class_l)))
                pools = [lst[:k] for lst in indicators]
            ds.splits[split] = make_split(language, pools, function_words, size, split, 0)
        return ds

    hrl = make_dataset("HRL", hrl_indicators, hrl_function, spec.hrl_sizes)
    lrl = make_dataset("LRL", lrl_indicators, lrl_function, spec.lrl_sizes)
    return hrl, lrl, lexicon


def dataset_equal(a: Dataset, b: Dataset) -> bool:
    """Structural equality (used by round-trip tests and determinism checks)."""
    if a.task != b.task or a.label_set != b.label_set:
        return False
    for split in ("train", "validation", "test"):
        xs, ys = a.splits[split], b.splits[split]
        if len(xs) != len(ys):
            return False
        for x, y in zip(xs, ys):
            if (x.id, x.language, x.words, x.sentence_label, x.token_labels) != (
                    y.id, y.language, y.words, y.sentence_label, y.token_labels):
                return False
    return True
