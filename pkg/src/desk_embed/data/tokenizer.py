"""Word-level lowercase tokenizer built from a corpus."""

from __future__ import annotations

import json
import re
from collections import Counter
from functools import lru_cache
from typing import Iterable

from ..encoder import TaskKind, pad_vocab

PAD, CLS, SEP, MASK, UNK = "[PAD]", "[CLS]", "[SEP]", "[MASK]", "[UNK]"
SPECIAL_TOKENS = (PAD, CLS, SEP, MASK, UNK)
# prefix words are always present so prefixed text never hits [UNK]
RESERVED_WORDS = tuple(t.value for t in TaskKind) + (":",)

_TOKEN_RE = re.compile(r"\[(?:PAD|CLS|SEP|MASK|UNK)\]|\w+|[^\w\s]")


def split_words(text: str) -> list[str]:
    return [t if t.startswith("[") and t.endswith("]") and t in SPECIAL_TOKENS else t.lower()
            for t in _TOKEN_RE.findall(text)]


def normalize(text: str) -> str:
    return " ".join(split_words(text))


class Tokenizer:
    def __init__(self, tokens: list[str]):
        if tuple(tokens[: len(SPECIAL_TOKENS)]) != SPECIAL_TOKENS:
            raise ValueError(f"vocabulary must start with {SPECIAL_TOKENS}")
        if len(set(tokens)) != len(tokens):
            raise ValueError("duplicate entries in vocabulary")
        self.tokens = list(tokens)
        self.vocab = {t: i for i, t in enumerate(self.tokens)}
        self._encode_words = lru_cache(maxsize=200_000)(self._encode_uncached)

    @classmethod
    def build(cls, texts: Iterable[str], max_size: int | None = None, min_freq: int = 1) -> "Tokenizer":
        counts: Counter[str] = Counter()
        for t in texts:
            counts.update(split_words(t))
        for w in SPECIAL_TOKENS + RESERVED_WORDS:
            counts.pop(w, None)
        ranked = sorted((w for w, c in counts.items() if c >= min_freq), key=lambda w: (-counts[w], w))
        room = None if max_size is None else max(0, max_size - len(SPECIAL_TOKENS) - len(RESERVED_WORDS))
        return cls(list(SPECIAL_TOKENS) + list(RESERVED_WORDS) + ranked[:room])

    # -- ids ------------------------------------------------------------
    @property
    def pad_id(self) -> int:
        return self.vocab[PAD]

    @property
    def cls_id(self) -> int:
        return self.vocab[CLS]

    @property
    def sep_id(self) -> int:
        return self.vocab[SEP]

    @property
    def mask_id(self) -> int:
        return self.vocab[MASK]

    @property
    def unk_id(self) -> int:
        return self.vocab[UNK]

    @property
    def special_ids(self) -> tuple[int, ...]:
        return tuple(self.vocab[t] for t in SPECIAL_TOKENS)

    @property
    def raw_vocab_size(self) -> int:
        return len(self.tokens)

    @property
    def padded_vocab_size(self) -> int:
        return pad_vocab(self.raw_vocab_size)

    def __len__(self) -> int:
        return len(self.tokens)

    # -- encode / decode ------------------------------------------------
    def _encode_uncached(self, text: str) -> tuple[int, ...]:
        unk = self.unk_id
        return tuple(self.vocab.get(w, unk) for w in split_words(text))

    def encode(self, text: str, add_special: bool = False, max_tokens: int | None = None) -> list[int]:
        """Token ids; with ``add_special`` the ids are wrapped in [CLS] ... [SEP]."""
        ids = list(self._encode_words(text))
        if add_special:
            if max_tokens is not None:
                ids = ids[: max(max_tokens - 2, 0)]
            ids = [self.cls_id] + ids + [self.sep_id]
        if max_tokens is not None:
            ids = ids[:max_tokens]
        return ids

    def decode(self, ids: Iterable[int], skip_special: bool = True) -> str:
        special = set(self.special_ids) if skip_special else set()
        return " ".join(self.tokens[i] for i in ids if i not in special)

    # -- persistence ----------------------------------------------------
    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump({"tokens": self.tokens}, fh, ensure_ascii=False)

    @classmethod
    def load(cls, path) -> "Tokenizer":
        with open(path, encoding="utf-8") as fh:
            return cls(json.load(fh)["tokens"])
