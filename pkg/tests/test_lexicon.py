"""Tests for lexicon loading and translation-based embedding initialization,
verified against an independent brute-force oracle."""

import numpy as np
import pytest

from bhasha.corpus import SPECIAL_IDS, SPECIAL_PIECES, TokenizerModel, build_tokenizer
from bhasha.errors import ParseError, SchemaError
from bhasha.lexicon import Lexicon, coverage_report, load_lexicon, tet_initialize

# ---------------------------------------------------------------------------
# lexicon container and TSV loading


def test_lexicon_rejects_multiword_translations():
    with pytest.raises(SchemaError):
        Lexicon({"haus": "big house"})
    with pytest.raises(SchemaError):
        Lexicon({"haus": "big\thouse"})


def test_load_lexicon_comments_blank_lines_and_round_trip(tmp_path):
    p = tmp_path / "lex.tsv"
    p.write_text("# comment line\n\nkutta\tdog\nbilli\tcat\n", encoding="utf-8")
    lex = load_lexicon(p)
    assert lex.entries == {"kutta": "dog", "billi": "cat"}
    assert lex.source == "file"
    out = tmp_path / "out.tsv"
    lex.save(out)
    assert load_lexicon(out).entries == lex.entries


def test_load_lexicon_multi_translation_collapses_to_first(tmp_path):
    p = tmp_path / "lex.tsv"
    p.write_text("ghar\thouse home dwelling\n", encoding="utf-8")
    assert load_lexicon(p).entries == {"ghar": "house"}


def test_load_lexicon_duplicate_key_reports_both_lines(tmp_path):
    p = tmp_path / "lex.tsv"
    p.write_text("a\tx\nb\ty\na\tz\n", encoding="utf-8")
    with pytest.raises(SchemaError) as exc:
        load_lexicon(p)
    msg = str(exc.value)
    assert "1" in msg and "3" in msg


def test_load_lexicon_parse_errors(tmp_path):
    p = tmp_path / "bad.tsv"
    p.write_text("onlyonecolumn\n", encoding="utf-8")
    with pytest.raises(ParseError):
        load_lexicon(p)
    p.write_text("a\t\n", encoding="utf-8")
    with pytest.raises(ParseError):
        load_lexicon(p)
    p.write_text("a\tb\tc\n", encoding="utf-8")
    with pytest.raises(ParseError):
        load_lexicon(p)


# ---------------------------------------------------------------------------
# transfer initialization: brute-force oracle


def _oracle_prose(vocab, lrl_tok, hrl_tok, emb, lex):
    """Plain-double-loop reimplementation of the prose-mode initializer."""
    vocab = list(dict.fromkeys(vocab))
    e_avg = {}
    for w in vocab:
        t = lex.get(w)
        if t is None:
            continue
        ps = [i for i in hrl_tok.encode_word(t) if i not in SPECIAL_IDS]
        if ps:
            e_avg[w] = sum(emb[i] for i in ps) / len(ps)
    pieces = sorted({i for w in vocab
                     for i in lrl_tok.encode_word(w) if i not in SPECIAL_IDS})
    out = {}
    for pc in pieces:
        acc, n = 0.0, 0
        for w in vocab:
            if w in e_avg and pc in [i for i in lrl_tok.encode_word(w)
                                     if i not in SPECIAL_IDS]:
                acc = acc + e_avg[w]
                n += 1
        if n:
            out[pc] = acc / n
    return out


def test_tet_matches_oracle_on_randomized_cases():
    rng = np.random.default_rng(11)
    alphabet = "abcdef"
    for case in range(30):
        n_lrl = int(rng.integers(3, 9))
        n_hrl = int(rng.integers(3, 9))
        lrl_words = ["".join(rng.choice(list(alphabet), size=rng.integers(2, 6)))
                     for _ in range(n_lrl)]
        hrl_words = ["".join(rng.choice(list(alphabet), size=rng.integers(2, 6)))
                     for _ in range(n_hrl)]
        lrl_tok = build_tokenizer(lrl_words, 3 + len(alphabet) + int(rng.integers(0, 6)))
        hrl_tok = build_tokenizer(hrl_words, 3 + len(alphabet) + int(rng.integers(0, 6)))
        emb = rng.normal(size=(len(hrl_tok.pieces), 5))
        entries = {w: hrl_words[int(rng.integers(0, n_hrl))]
                   for w in lrl_words if rng.random() < 0.7}
        lex = Lexicon(entries)
        vectors, report = tet_initialize(lrl_words, lrl_tok, hrl_tok, emb, lex)
        oracle = _oracle_prose(lrl_words, lrl_tok, hrl_tok, emb, lex)
        assert set(vectors) == set(oracle), f"case {case}: piece coverage differs"
        for pc in oracle:
            assert np.max(np.abs(vectors[pc] - oracle[pc])) <= 1e-12
        assert report["covered_pieces"] == len(vectors)


def test_tet_shared_subword_averages_both_translations():
    """Two LRL words share a subword piece; that piece's vector must be the
    mean of both words' translation averages."""
    lrl_tok = TokenizerModel(SPECIAL_PIECES + ["antar", "bahu", "bhasika"])
    hrl_tok = TokenizerModel(SPECIAL_PIECES + ["cross", "lingual", "multi"])
    d = 4
    emb = np.arange(len(hrl_tok.pieces) * d, dtype=np.float64).reshape(-1, d)
    lex = Lexicon({"antarbhasika": "crosslingual", "bahubhasika": "multilingual"})
    vectors, report = tet_initialize(
        ["antarbhasika", "bahubhasika"], lrl_tok, hrl_tok, emb, lex)

    e_cross = emb[hrl_tok.piece_to_id["cross"]]
    e_lingual = emb[hrl_tok.piece_to_id["lingual"]]
    e_multi = emb[hrl_tok.piece_to_id["multi"]]
    e_avg_1 = (e_cross + e_lingual) / 2
    e_avg_2 = (e_multi + e_lingual) / 2

    np.testing.assert_allclose(vectors[lrl_tok.piece_to_id["antar"]], e_avg_1, atol=1e-15)
    np.testing.assert_allclose(vectors[lrl_tok.piece_to_id["bahu"]], e_avg_2, atol=1e-15)
    # shared piece: mean over both containing words
    np.testing.assert_allclose(vectors[lrl_tok.piece_to_id["bhasika"]],
                               (e_avg_1 + e_avg_2) / 2, atol=1e-15)
    assert report["coverage"] == 1.0


def test_tet_uncovered_pieces_are_reported_not_invented():
    lrl_tok = TokenizerModel(SPECIAL_PIECES + ["xx", "yy"])
    hrl_tok = TokenizerModel(SPECIAL_PIECES + ["dog"])
    emb = np.ones((len(hrl_tok.pieces), 3))
    lex = Lexicon({"xx": "dog"})  # "yy" untranslatable
    vectors, report = tet_initialize(["xx", "yy"], lrl_tok, hrl_tok, emb, lex)
    assert lrl_tok.piece_to_id["xx"] in vectors
    assert lrl_tok.piece_to_id["yy"] not in vectors
    assert report["uncovered"] == [lrl_tok.piece_to_id["yy"]]
    assert report["coverage"] == 0.5


def test_tet_literal_mode_differs_when_pieces_are_shared():
    """The pseudocode-literal accumulation overwrites shared slots instead of
    averaging, so it disagrees with prose mode exactly on shared pieces."""
    lrl_tok = TokenizerModel(SPECIAL_PIECES + ["antar", "bahu", "bhasika"])
    hrl_tok = TokenizerModel(SPECIAL_PIECES + ["cross", "lingual", "multi"])
    emb = np.arange(len(hrl_tok.pieces) * 2, dtype=np.float64).reshape(-1, 2)
    lex = Lexicon({"antarbhasika": "crosslingual", "bahubhasika": "multilingual"})
    vocab = ["antarbhasika", "bahubhasika"]
    prose, _ = tet_initialize(vocab, lrl_tok, hrl_tok, emb, lex, mode="prose")
    lit, _ = tet_initialize(vocab, lrl_tok, hrl_tok, emb, lex, mode="literal")
    shared = lrl_tok.piece_to_id["bhasika"]
    assert not np.allclose(prose[shared], lit[shared])
    for pc in (lrl_tok.piece_to_id["antar"], lrl_tok.piece_to_id["bahu"]):
        np.testing.assert_allclose(prose[pc], lit[pc])
    with pytest.raises(ValueError):
        tet_initialize(vocab, lrl_tok, hrl_tok, emb, lex, mode="bogus")


def test_coverage_report_empty_vocab():
    assert coverage_report([], {}) == {
        "total_pieces": 0, "covered_pieces": 0, "coverage": 0.0, "uncovered": []}
