import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from atytts.errors import InvalidInput
from atytts.textfront import (BOUNDARY, PAD, Lexicon, PhonemeVocabulary, detokenize, normalize_text, phonemize,
                              tokenize)

PHONES = ["aa", "b", "k", "iy", "t"]


@pytest.fixture
def lexicon():
    vocab = PhonemeVocabulary.build(PHONES)
    return Lexicon({"bat": ["b", "aa", "t"], "key": ["k", "iy"]}, vocab)


def test_normalize_text():
    assert normalize_text("  Hello,   WORLD!! it's ") == "hello world it's"
    assert normalize_text("...") == ""


def test_padding_is_id_zero_and_reserved(lexicon):
    v = lexicon.vocab
    assert len(v) == 1 + len(v.symbols)
    with pytest.raises(InvalidInput):
        v.id_of(PAD)
    with pytest.raises(InvalidInput):
        PhonemeVocabulary([PAD, "a"])
    with pytest.raises(InvalidInput):
        PhonemeVocabulary(["a", "a"])


@pytest.mark.parametrize("text", ["", "   ", "?!,."])
def test_empty_text_rejected(lexicon, text):
    with pytest.raises(InvalidInput):
        phonemize(text, lexicon)


def test_lexicon_word_maps_to_its_ids(lexicon):
    seq = phonemize("Bat", lexicon)
    assert list(seq.ids) == [lexicon.vocab.id_of(p) for p in ("b", "aa", "t")]
    assert seq.text == "Bat"


def test_boundary_between_words(lexicon):
    assert detokenize(phonemize("bat key", lexicon), lexicon.vocab) == ["b", "aa", "t", BOUNDARY, "k", "iy"]


def test_fallback_is_one_symbol_per_character(lexicon):
    seq = phonemize("abc", lexicon)
    assert len(seq) == 3
    assert detokenize(seq, lexicon.vocab) == ["#a", "#b", "#c"]


def test_detokenize_round_trip_of_entries(lexicon):
    for word, phones in lexicon.entries.items():
        assert detokenize(phonemize(word, lexicon), lexicon.vocab) == list(phones)


def test_detokenize_rejects_padding_and_out_of_range(lexicon):
    with pytest.raises(InvalidInput):
        detokenize(np.array([1, 0, 2]), lexicon.vocab)
    with pytest.raises(InvalidInput):
        detokenize(np.array([len(lexicon.vocab)]), lexicon.vocab)


@given(st.lists(st.integers(1, 37), min_size=0, max_size=40))
def test_detokenize_preserves_length_and_inverts_tokenize(ids):
    vocab = PhonemeVocabulary.build(PHONES)
    ids = [i % (len(vocab) - 1) + 1 for i in ids]
    symbols = detokenize(np.array(ids, dtype=np.int64), vocab)
    assert len(symbols) == len(ids)
    assert list(tokenize(symbols, vocab)) == ids


@given(st.text(alphabet="abkity '", min_size=1, max_size=30))
def test_phonemize_deterministic(text):
    vocab = PhonemeVocabulary.build(PHONES)
    lex = Lexicon({"bat": ["b", "aa", "t"]}, vocab)
    if not normalize_text(text):
        return
    a, b = phonemize(text, lex), phonemize(text, lex)
    np.testing.assert_array_equal(a.ids, b.ids)
    assert np.all(a.ids >= 1) and np.all(a.ids < len(vocab))


def test_persistence_round_trip(tmp_path, lexicon):
    lexicon.vocab.save(tmp_path / "vocab.txt")
    lexicon.save(tmp_path / "lex.txt")
    vocab = PhonemeVocabulary.load(tmp_path / "vocab.txt")
    assert vocab == lexicon.vocab and vocab.digest() == lexicon.vocab.digest()
    lex = Lexicon.load(tmp_path / "lex.txt", vocab)
    assert lex.entries == lexicon.entries
    lines = (tmp_path / "vocab.txt").read_text().splitlines()
    assert lines[0] == f"{PHONES[0]}\t1"
    assert (tmp_path / "lex.txt").read_text().splitlines()[0] == "bat\tb aa t"


def test_vocab_load_rejects_gaps(tmp_path):
    (tmp_path / "v.txt").write_text("a\t1\nb\t3\n")
    with pytest.raises(InvalidInput):
        PhonemeVocabulary.load(tmp_path / "v.txt")


def test_lexicon_rejects_unknown_symbols():
    with pytest.raises(InvalidInput):
        Lexicon({"x": ["zz"]}, PhonemeVocabulary.build(PHONES))
