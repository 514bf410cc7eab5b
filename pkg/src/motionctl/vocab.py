"""Fixed toy vocabulary and frozen token embeddings (the text-encoder stand-in)."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InputError

COLORS = {
    "red": (1.0, 0.0, 0.0),
    "green": (0.0, 1.0, 0.0),
    "blue": (0.0, 0.0, 1.0),
    "yellow": (1.0, 1.0, 0.0),
    "cyan": (0.0, 1.0, 1.0),
    "magenta": (1.0, 0.0, 1.0),
    "white": (1.0, 1.0, 1.0),
    "orange": (1.0, 0.5, 0.0),
}
SHAPE_WORDS = {"disk": "ball", "square": "box"}
PATH_WORDS = {"line": "drifts", "arc": "arcs", "zigzag": "zigzags", "random-walk": "wanders"}
INTENSITY_WORDS = [f"intensity-{k}" for k in range(1, 11)]

WORDS = (["a"] + list(COLORS) + list(SHAPE_WORDS.values()) + ["moves"]
         + list(PATH_WORDS.values()) + INTENSITY_WORDS)


def intensity_word(level: int) -> str:
    if not 1 <= level <= 10:
        raise InputError(f"intensity level must be in 1..10, got {level}")
    return INTENSITY_WORDS[level - 1]


@dataclass(frozen=True)
class TokenTable:
    words: tuple
    embeddings: np.ndarray  # (vocab, d)

    @property
    def ids(self) -> dict:
        return {w: k for k, w in enumerate(self.words)}

    @property
    def dim(self) -> int:
        return self.embeddings.shape[1]


def build_token_table(dim: int = 32, seed: int = 0) -> TokenTable:
    rng = np.random.default_rng(seed)
    emb = rng.standard_normal((len(WORDS), dim)).astype(np.float32)
    return TokenTable(tuple(WORDS), emb)


@dataclass
class Tokens:
    ids: np.ndarray
    embeddings: np.ndarray  # (N, d)
    phrase_indices: tuple


def tokenize(words, table: TokenTable, phrase=None) -> Tokens:
    """Map caption words to ids and embedding rows.

    ``phrase`` (string or word list) is located in the caption and its word
    positions are reported for guidance targeting.
    """
    words = list(words)
    if not words:
        raise InputError("empty caption")
    lookup = table.ids
    unknown = [w for w in words if w not in lookup]
    if unknown:
        raise InputError(f"unknown word(s) not in vocabulary: {', '.join(unknown)}")
    ids = np.array([lookup[w] for w in words], dtype=np.int64)
    idx = ()
    if phrase is not None:
        pw = phrase.split() if isinstance(phrase, str) else list(phrase)
        for start in range(len(words) - len(pw) + 1):
            if words[start:start + len(pw)] == pw:
                idx = tuple(range(start, start + len(pw)))
                break
        else:
            raise InputError(f"phrase {' '.join(pw)!r} not found in caption {' '.join(words)!r}")
    return Tokens(ids, table.embeddings[ids], idx)
