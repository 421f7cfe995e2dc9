"""Transcript normalisation and lexicon-based phonemisation.

Words missing from the lexicon fall back to one pseudo-phoneme per
character (``#a``, ``#b``, ...).  When the vocabulary contains the boundary
symbol (``sp`` by default) it is inserted between words; the synthetic
corpus renders a short pause for it.
"""
import hashlib
import re
import string
from dataclasses import dataclass

import numpy as np

from .audio import InvalidInput

PAD = "<pad>"
BOUNDARY = "sp"
FALLBACK_CHARS = string.ascii_lowercase + "'"

_PUNCT = re.compile(r"[^\w\s']", re.UNICODE)
_SPACE = re.compile(r"\s+")


def fallback_symbol(ch):
    return "#" + ch


def normalize_text(text):
    """Lowercase, drop punctuation except apostrophes, collapse whitespace."""
    text = _PUNCT.sub(" ", text.lower()).replace("_", " ")
    return _SPACE.sub(" ", text).strip()


class PhonemeVocabulary:
    """Bijective symbol <-> id map; id 0 is reserved for padding."""

    def __init__(self, symbols):
        symbols = list(symbols)
        if PAD in symbols:
            raise InvalidInput(f"{PAD!r} is reserved")
        if len(set(symbols)) != len(symbols):
            raise InvalidInput("duplicate symbols in vocabulary")
        self._symbols = [PAD] + symbols
        self._ids = {s: i for i, s in enumerate(self._symbols)}

    @classmethod
    def build(cls, phonemes, boundary=BOUNDARY, char_fallback=True):
        symbols = list(phonemes)
        if boundary and boundary not in symbols:
            symbols.append(boundary)
        if char_fallback:
            symbols += [fallback_symbol(c) for c in FALLBACK_CHARS if fallback_symbol(c) not in symbols]
        return cls(symbols)

    def __len__(self):
        return len(self._symbols)

    def __contains__(self, symbol):
        return symbol in self._ids and symbol != PAD

    @property
    def symbols(self):
        return tuple(self._symbols[1:])

    def id_of(self, symbol):
        try:
            idx = self._ids[symbol]
        except KeyError:
            raise InvalidInput(f"unknown phoneme symbol {symbol!r}") from None
        if idx == 0:
            raise InvalidInput("padding symbol cannot be tokenized")
        return idx

    def symbol_of(self, idx):
        idx = int(idx)
        if idx <= 0 or idx >= len(self._symbols):
            raise InvalidInput(f"invalid phoneme id {idx}")
        return self._symbols[idx]

    def digest(self):
        lines = "\n".join(f"{s}\t{i}" for i, s in enumerate(self._symbols))
        return hashlib.sha256(lines.encode("utf-8")).hexdigest()

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            for i, s in enumerate(self._symbols[1:], start=1):
                fh.write(f"{s}\t{i}\n")

    @classmethod
    def load(cls, path):
        pairs = []
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                if not line.strip():
                    continue
                sym, idx = line.rstrip("\n").split("\t")
                pairs.append((int(idx), sym))
        pairs.sort()
        if [i for i, _ in pairs] != list(range(1, len(pairs) + 1)):
            raise InvalidInput(f"{path}: ids must be contiguous from 1")
        return cls([s for _, s in pairs])

    def __eq__(self, other):
        return isinstance(other, PhonemeVocabulary) and self._symbols == other._symbols


@dataclass
class PhonemeSequence:
    ids: np.ndarray
    text: str

    def __len__(self):
        return len(self.ids)


class Lexicon:
    def __init__(self, entries, vocab, boundary=BOUNDARY):
        self.entries = {w: tuple(p) for w, p in entries.items()}
        self.vocab = vocab
        self.boundary = boundary if boundary in vocab else None
        for word, phones in self.entries.items():
            if not phones:
                raise InvalidInput(f"lexicon entry {word!r} is empty")
            for p in phones:
                vocab.id_of(p)

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            for word in sorted(self.entries):
                fh.write(f"{word}\t{' '.join(self.entries[word])}\n")

    @classmethod
    def load(cls, path, vocab, boundary=BOUNDARY):
        entries = {}
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                if line.strip():
                    word, phones = line.rstrip("\n").split("\t")
                    entries[word] = phones.split()
        return cls(entries, vocab, boundary)

    def word_symbols(self, word):
        if word in self.entries:
            return list(self.entries[word])
        return [fallback_symbol(c) for c in word]

    def symbols(self, text):
        words = normalize_text(text).split()
        if not words:
            raise InvalidInput(f"nothing to phonemize in {text!r}")
        out = []
        for k, word in enumerate(words):
            if k and self.boundary:
                out.append(self.boundary)
            out.extend(self.word_symbols(word))
        return out


def tokenize(symbols, vocab):
    return np.array([vocab.id_of(s) for s in symbols], dtype=np.int64)


def phonemize(text, lexicon):
    """Map a transcript to phoneme ids using ``lexicon`` (with char fallback)."""
    return PhonemeSequence(tokenize(lexicon.symbols(text), lexicon.vocab), text)


def detokenize(p, vocab):
    ids = p.ids if isinstance(p, PhonemeSequence) else p
    return [vocab.symbol_of(i) for i in ids]
