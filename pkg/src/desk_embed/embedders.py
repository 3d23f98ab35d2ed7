"""Embedding callables for filtering and mining (``list[str] -> ndarray``)."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .data.tokenizer import Tokenizer
from .encoder import Encoder, TaskKind
from .eval.retrieval import embed_corpus


class BagOfWordsEmbedder:
    """TF-IDF bag of words over a tokenizer's vocabulary.

    Stands in for an external pretrained filter model when none is available.
    Special and prefix tokens are ignored.
    """

    def __init__(self, tokenizer: Tokenizer, fit_texts: Sequence[str] | None = None):
        self.tokenizer = tokenizer
        self.size = tokenizer.raw_vocab_size
        self.idf = np.ones(self.size)
        if fit_texts:
            df = np.zeros(self.size)
            for t in fit_texts:
                df[np.unique(tokenizer.encode(t))] += 1
            self.idf = np.log((1 + len(fit_texts)) / (1 + df)) + 1.0
        self._ignore = list(tokenizer.special_ids) + [tokenizer.vocab[w] for w in ("search_query", "search_document",
                                                                                   "classification", "clustering", ":")]

    def __call__(self, texts: Sequence[str]) -> np.ndarray:
        out = np.zeros((len(texts), self.size))
        for i, t in enumerate(texts):
            ids = self.tokenizer.encode(t)
            np.add.at(out[i], ids, 1.0)
        out[:, self._ignore] = 0.0
        out *= self.idf
        # empty rows would make cosine undefined; give them a tiny constant direction
        empty = ~out.any(axis=1)
        out[empty, self.tokenizer.unk_id] = 1.0
        return out


class ModelEmbedder:
    """Wraps an encoder: texts are embedded with a fixed task prefix (or none)."""

    def __init__(self, encoder: Encoder, tokenizer: Tokenizer, task: TaskKind | str | None = None,
                 max_tokens: int = 512):
        self.encoder = encoder
        self.tokenizer = tokenizer
        self.task = TaskKind(task) if task is not None else None
        self.max_tokens = max_tokens

    def __call__(self, texts: Sequence[str]) -> np.ndarray:
        kind = self.task or TaskKind.CLUSTERING
        return embed_corpus(self.encoder, self.tokenizer, list(texts), kind, self.max_tokens,
                            prefix=self.task is not None)
