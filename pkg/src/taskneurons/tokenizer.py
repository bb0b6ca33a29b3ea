"""Word-level tokenizer built from the task corpus."""

from __future__ import annotations

import json
import re
from pathlib import Path
from typing import Iterable

LETTERS = ("A", "B", "C", "D")
SPECIALS = ("<pad>", "<unk>", "<bos>")
_SPLIT = re.compile(r"\w+|[^\w\s]")


def split_words(text: str) -> list[str]:
    """Whitespace-and-punctuation split; punctuation marks become their own tokens."""
    return _SPLIT.findall(text)


class Tokenizer:
    """Fixed vocabulary: specials, then the four option letters, then corpus words.

    Ids 0..2 are ``<pad>``, ``<unk>``, ``<bos>``; ids 3..6 are ``A``..``D``.
    """

    def __init__(self, words: Iterable[str]):
        vocab = list(SPECIALS) + list(LETTERS)
        seen = set(vocab)
        for w in words:
            if w not in seen:
                seen.add(w)
                vocab.append(w)
        self.vocab = vocab
        self.index = {w: i for i, w in enumerate(vocab)}

    @classmethod
    def from_corpus(cls, texts: Iterable[str]) -> "Tokenizer":
        words = set()
        for t in texts:
            words.update(split_words(t))
        words -= set(SPECIALS) | set(LETTERS)
        return cls(sorted(words))

    def __len__(self):
        return len(self.vocab)

    @property
    def pad_id(self) -> int:
        return 0

    @property
    def unk_id(self) -> int:
        return 1

    @property
    def bos_id(self) -> int:
        return 2

    @property
    def letter_ids(self) -> list[int]:
        return [self.index[c] for c in LETTERS]

    def encode(self, text: str, bos: bool = False) -> list[int]:
        ids = [self.index.get(w, self.unk_id) for w in split_words(text)]
        return [self.bos_id] + ids if bos else ids

    def decode(self, ids: Iterable[int]) -> str:
        return " ".join(self.vocab[i] for i in ids)

    def to_json(self) -> dict:
        return {"version": 1, "vocab": self.vocab}

    @classmethod
    def from_json(cls, obj: dict) -> "Tokenizer":
        vocab = obj["vocab"]
        if tuple(vocab[:3]) != SPECIALS or tuple(vocab[3:7]) != LETTERS:
            raise ValueError("vocabulary does not start with the reserved tokens")
        return cls(vocab[7:])

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "Tokenizer":
        return cls.from_json(json.loads(Path(path).read_text()))
