"""Tokenization and the token <-> index dictionary."""

import re
from collections import Counter
from typing import Dict, Iterable, List, Sequence

from .errors import ConfigError, VocabularyError

PAD, BOS, EOS, UNK = 0, 1, 2, 3
RESERVED = ("<pad>", "<bos>", "<eos>", "<unk>")

_WORDPUNCT = re.compile(r"\w+|[^\w\s]+")


def tokenize(sentence: str) -> List[str]:
    """Lowercase, split into word / punctuation runs, drop the punctuation.

    >>> tokenize("A man is Shooting.")
    ['a', 'man', 'is', 'shooting']
    """
    pieces = _WORDPUNCT.findall(sentence.lower())
    return [p for p in pieces if re.search(r"\w", p)]


class Vocabulary:
    """Bidirectional token/index map; indices 0..3 are PAD, BOS, EOS, UNK."""

    def __init__(self, tokens: Sequence[str], min_count: int = 2):
        tokens = list(tokens)
        clash = set(tokens) & set(RESERVED)
        if clash:
            raise VocabularyError(f"corpus tokens collide with reserved tokens: {sorted(clash)}")
        if len(set(tokens)) != len(tokens):
            raise VocabularyError("duplicate tokens in vocabulary")
        self.min_count = min_count
        self.itos: List[str] = list(RESERVED) + tokens
        self.stoi: Dict[str, int] = {t: i for i, t in enumerate(self.itos)}

    def __len__(self):
        return len(self.itos)

    def __contains__(self, token):
        return token in self.stoi

    def __eq__(self, other):
        return isinstance(other, Vocabulary) and self.itos == other.itos

    def index(self, token: str) -> int:
        return self.stoi.get(token, UNK)

    def token(self, index: int) -> str:
        if not 0 <= index < len(self.itos):
            raise VocabularyError(f"index {index} out of range for vocabulary of size {len(self)}")
        return self.itos[index]

    @property
    def words(self) -> List[str]:
        return self.itos[len(RESERVED):]

    def to_json(self) -> dict:
        return {"min_count": self.min_count, "tokens": self.words}

    @classmethod
    def from_json(cls, obj: dict) -> "Vocabulary":
        return cls(obj["tokens"], obj.get("min_count", 2))


def build_vocab(captions: Iterable, min_count: int = 2) -> Vocabulary:
    """Keep tokens seen strictly more than ``min_count`` times.

    ``captions`` may hold raw strings or already-tokenized lists. Index order
    is by descending frequency, then lexicographic.
    """
    counts = Counter()
    n = 0
    for cap in captions:
        toks = tokenize(cap) if isinstance(cap, str) else cap
        counts.update(toks)
        n += 1
    if n == 0:
        raise ConfigError("cannot build a vocabulary from an empty corpus")
    kept = sorted((t for t, c in counts.items() if c > min_count), key=lambda t: (-counts[t], t))
    return Vocabulary(kept, min_count)


def encode_caption(tokens: Sequence[str], vocab: Vocabulary) -> List[int]:
    return [BOS] + [vocab.index(t) for t in tokens] + [EOS]


def decode_tokens(indices: Sequence[int], vocab: Vocabulary) -> str:
    words = []
    for i in indices:
        tok = vocab.token(int(i))  # range-checks every index
        if int(i) not in (PAD, BOS, EOS):
            words.append(tok)
    return " ".join(words)
