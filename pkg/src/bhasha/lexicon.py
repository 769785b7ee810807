"""Bilingual word-translation map and translation-based embedding
initialization for low-resource subword pieces.

The initializer transfers semantics in two averaging steps: for each LRL word
with a translation, average the HRL piece embeddings of the translation
(``e_avg``); then set each LRL piece's embedding to the mean of ``e_avg`` over
all translatable vocabulary words containing that piece. Pieces that appear
only in untranslatable words are reported uncovered and left to the caller's
default initialization.

Two accumulation modes exist because the published pseudocode of this
procedure and its prose description disagree; ``mode="prose"`` (the default)
averages over containing words, ``mode="literal"`` follows the pseudocode's
inner loop verbatim. Only the prose mode matches the worked example, so it is
the one tests certify against a brute-force oracle.
"""

from __future__ import annotations

import numpy as np

from .corpus import TokenizerModel, SPECIAL_IDS
from .errors import ParseError, SchemaError


class Lexicon:
    """LRL word -> HRL word map (single best translation per entry)."""

    def __init__(self, entries: dict[str, str] | None = None, source: str = "synthetic"):
        self.entries: dict[str, str] = dict(entries or {})
        self.source = source
        for k, v in self.entries.items():
            if " " in v or "\t" in v:
                raise SchemaError(f"lexicon entry {k!r}: multi-word translation {v!r} rejected")

    def __len__(self):
        return len(self.entries)

    def get(self, word: str):
        return self.entries.get(word)

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            for k, v in self.entries.items():
                fh.write(f"{k}\t{v}\n")


def load_lexicon(path) -> Lexicon:
    """Load a two-column TSV lexicon; ``#`` lines are comments.

    Duplicate keys are rejected (reported with both line numbers), never
    silently overwritten.
    """
    entries: dict[str, str] = {}
    first_line: dict[str, int] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\n")
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            cols = line.split("\t")
            if len(cols) != 2:
                raise ParseError(f"{path}:{lineno}: expected 2 tab-separated columns, got {len(cols)}")
            key, val = cols[0].strip(), cols[1].strip()
            if not key or not val:
                raise ParseError(f"{path}:{lineno}: empty column")
            if " " in val:
                # multi-translation entries collapse to the first listed word
                val = val.split()[0]
            if key in entries:
                raise SchemaError(
                    f"{path}: duplicate key {key!r} at lines {first_line[key]} and {lineno}")
            entries[key] = val
            first_line[key] = lineno
    return Lexicon(entries, source="file")


def tet_initialize(
    lrl_vocab_words,
    lrl_tok: TokenizerModel,
    hrl_tok: TokenizerModel,
    hrl_embeddings: np.ndarray,
    lex: Lexicon,
    mode: str = "prose",
):
    """Compute transferred embeddings for LRL pieces.

    Returns ``(vectors, report)`` where ``vectors`` maps LRL piece id -> 1-D
    array and ``report`` is the coverage summary from
    :func:`coverage_report`. Uncovered pieces are absent from ``vectors``.
    """
    if mode not in ("prose", "literal"):
        raise ValueError(f"unknown mode {mode!r}")
    vocab = list(dict.fromkeys(lrl_vocab_words))  # dedupe, keep order
    word_pieces = {w: [t for t in lrl_tok.encode_word(w) if t not in SPECIAL_IDS] for w in vocab}

    e_avg: dict[str, np.ndarray] = {}
    for w in vocab:
        trans = lex.get(w)
        if trans is None:
            continue
        hrl_pieces = [t for t in hrl_tok.encode_word(trans) if t not in SPECIAL_IDS]
        if not hrl_pieces:
            continue
        e_avg[w] = hrl_embeddings[hrl_pieces].mean(axis=0)

    all_pieces = sorted({t for ps in word_pieces.values() for t in ps})
    vectors: dict[int, np.ndarray] = {}
    if mode == "prose":
        # mean of e_avg over the translatable words containing each piece
        for t in all_pieces:
            contribs = [e_avg[w] for w in vocab if w in e_avg and t in word_pieces[w]]
            if contribs:
                vectors[t] = np.mean(contribs, axis=0)
    else:
        # pseudocode-literal: for each word w, each of its pieces collects one
        # copy of w's e_avg per vocabulary word containing the piece, and the
        # mean of those identical copies (= e_avg(w)) overwrites the slot
        for w in vocab:
            if w not in e_avg:
                continue
            for t in word_pieces[w]:
                copies = [e_avg[w] for w2 in vocab if t in word_pieces[w2]]
                vectors[t] = np.mean(copies, axis=0)

    report = coverage_report(all_pieces, vectors)
    return vectors, report


def coverage_report(all_pieces, vectors) -> dict:
    covered = [t for t in all_pieces if t in vectors]
    uncovered = [t for t in all_pieces if t not in vectors]
    total = len(all_pieces)
    return {
        "total_pieces": total,
        "covered_pieces": len(covered),
        "coverage": (len(covered) / total) if total else 0.0,
        "uncovered": uncovered,
    }
