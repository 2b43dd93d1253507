"""Tokenization and vocabulary with reserved START/STOP/UNK ids."""

import string
from collections import Counter

START = 0
STOP = 1
UNK = 2

START_WORD = "<start>"
STOP_WORD = "<stop>"
UNK_WORD = "<unk>"

# Characters stripped from token edges (ASCII punctuation).
_STRIP = string.punctuation


def tokenize(text: str) -> list[str]:
    """Lowercase, split on whitespace, strip edge punctuation, drop empties."""
    out = []
    for raw in text.lower().split():
        tok = raw.strip(_STRIP)
        if tok:
            out.append(tok)
    return out


class Vocabulary:
    """Bijection between words and ids 3..V-1; ids 0,1,2 are reserved.

    Unknown words map to UNK on lookup.
    """

    def __init__(self, words: list[str]):
        self.id_to_word = [START_WORD, STOP_WORD, UNK_WORD] + list(words)
        self.word_to_id = {w: i for i, w in enumerate(self.id_to_word)}
        if len(self.word_to_id) != len(self.id_to_word):
            raise ValueError("vocabulary contains duplicate words")

    @property
    def size(self) -> int:
        return len(self.id_to_word)

    @property
    def words(self) -> list[str]:
        """Non-reserved words in id order (what the manifest stores)."""
        return self.id_to_word[3:]

    def lookup(self, word: str) -> int:
        return self.word_to_id.get(word, UNK)

    def word(self, word_id: int) -> str:
        if not 0 <= word_id < self.size:
            raise ValueError(f"word id {word_id} out of range for V={self.size}")
        return self.id_to_word[word_id]

    def __contains__(self, word: str) -> bool:
        return word in self.word_to_id


def build_vocab(corpus: list[list[str]], min_count: int = 1) -> Vocabulary:
    """Collect words with frequency >= min_count, ids in first-appearance order."""
    if min_count < 1:
        raise ValueError("min_count must be >= 1")
    if not corpus:
        raise ValueError("cannot build a vocabulary from an empty corpus")
    counts = Counter()
    order = []
    for tokens in corpus:
        for tok in tokens:
            if tok not in counts:
                order.append(tok)
            counts[tok] += 1
    kept = [w for w in order if counts[w] >= min_count]
    return Vocabulary(kept)


def encode_caption(vocab: Vocabulary, tokens: list[str]) -> list[int]:
    """[START] + mapped ids (absent -> UNK) + [STOP]."""
    return [START] + [vocab.lookup(t) for t in tokens] + [STOP]


def decode_caption(vocab: Vocabulary, token_ids: list[int]) -> list[str]:
    """Interior words of an encoded caption (START/STOP stripped)."""
    inner = token_ids
    if inner and inner[0] == START:
        inner = inner[1:]
    if inner and inner[-1] == STOP:
        inner = inner[:-1]
    return [vocab.word(i) for i in inner]
