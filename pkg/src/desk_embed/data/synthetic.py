"""Synthetic corpora with shared-keyword structure for desk-scale runs.

Every item is a small "entity": a topic plus a signature of keywords drawn
from that topic's word pool.  Documents render the signature inside filler
text (along with a few off-signature topic words); queries mention part of
the signature.  Entities in the same topic share vocabulary, which makes
same-topic documents natural hard negatives.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from .pairs import TextPair

_CONSONANTS = "bdfgklmnprstvz"
_VOWELS = "aeiou"
FILLER = (
    "the a of and in to with for on by from at as is was are this that its it "
    "has have had be been more most some many into over under about also then there"
).split()
QUESTION = "what which where who how does do".split()

# source name -> (query style, task kind)
SOURCES = {
    "qa": ("question", "retrieval"),
    "titles": ("title", "clustering"),
    "rephrase": ("rephrase", "classification"),
}


def make_words(n: int, rng: np.random.Generator) -> list[str]:
    syllables = [c + v for c in _CONSONANTS for v in _VOWELS]
    combos = [a + b + c for a, b, c in itertools.product(syllables, repeat=3)]
    pick = rng.choice(len(combos), size=n, replace=False)
    return [combos[i] for i in pick]


@dataclass
class Entity:
    topic: int
    signature: list[str]
    topic_noise: list[str]


@dataclass
class SyntheticWorld:
    topics: list[list[str]]
    signature_size: int = 6
    rng: np.random.Generator = field(default_factory=lambda: np.random.default_rng(0))

    @classmethod
    def create(cls, n_topics: int = 40, words_per_topic: int = 40, signature_size: int = 6,
               seed: int = 0) -> "SyntheticWorld":
        rng = np.random.default_rng(seed)
        words = make_words(n_topics * words_per_topic, rng)
        topics = [words[t * words_per_topic:(t + 1) * words_per_topic] for t in range(n_topics)]
        return cls(topics, signature_size, rng)

    @property
    def vocabulary(self) -> list[str]:
        return [w for t in self.topics for w in t] + FILLER + QUESTION

    def entity(self) -> Entity:
        t = int(self.rng.integers(len(self.topics)))
        pool = self.topics[t]
        pick = self.rng.choice(len(pool), size=self.signature_size + 2, replace=False)
        words = [pool[i] for i in pick]
        return Entity(t, words[: self.signature_size], words[self.signature_size:])

    def _filler(self, n: int) -> list[str]:
        return [FILLER[i] for i in self.rng.integers(len(FILLER), size=n)]

    def document(self, e: Entity) -> str:
        words = list(e.signature) + list(e.topic_noise)
        self.rng.shuffle(words)
        out: list[str] = []
        for w in words:
            out += self._filler(int(self.rng.integers(1, 4)))
            out.append(w)
        out += self._filler(int(self.rng.integers(1, 3)))
        return " ".join(out)

    def query(self, e: Entity, style: str) -> str:
        sig = list(e.signature)
        if style == "question":
            kws = [sig[i] for i in self.rng.choice(len(sig), size=3, replace=False)]
            q = QUESTION[int(self.rng.integers(len(QUESTION)))]
            return f"{q} {kws[0]} {self._filler(1)[0]} {kws[1]} {kws[2]} ?"
        if style == "title":
            # one signature word is replaced by a topic-level word: weak supervision
            kws = [sig[i] for i in self.rng.choice(len(sig), size=2, replace=False)]
            return " ".join(kws + [e.topic_noise[0]])
        if style == "rephrase":
            keep = [sig[i] for i in sorted(self.rng.choice(len(sig), size=4, replace=False))]
            return " ".join(w for k in keep for w in (self._filler(1)[0], k))
        raise ValueError(f"unknown query style {style!r}")

    def pair(self, source: str, e: Entity | None = None) -> TextPair:
        style, _ = SOURCES[source]
        e = e or self.entity()
        return TextPair(self.query(e, style), self.document(e), source)

    def background(self, n: int, content_rate: float = 0.15) -> list[str]:
        out = self._filler(n)
        for i in np.nonzero(self.rng.random(n) < content_rate)[0]:
            topic = self.topics[int(self.rng.integers(len(self.topics)))]
            out[i] = topic[int(self.rng.integers(len(topic)))]
        return out

    def needle_document(self, e: Entity, length: int, tail_fraction: float = 0.1) -> str:
        """``length`` words of background with the signature inside the final ``tail_fraction``."""
        tail = max(int(length * tail_fraction), self.signature_size * 2)
        needle = self.document(e).split()[:tail]
        head = self.background(length - len(needle))
        return " ".join(head + needle)


@dataclass
class DeskCorpus:
    """Everything an end-to-end desk run needs, generated from one seed."""

    world: SyntheticWorld
    pretrain: list[TextPair]
    finetune: list[TextPair]
    heldout: list[TextPair]
    mlm_documents: list[str]
    noise_pairs: int = 0


def build_desk_corpus(n_pairs: int = 5000, heldout: int = 500, finetune_fraction: float = 0.3,
                      noise_rate: float = 0.1, seed: int = 0, **world_kwargs) -> DeskCorpus:
    """Split ``n_pairs`` generated pairs into pretrain / finetune / held-out sets.

    Held-out pairs are question-style retrieval pairs over unseen entities.
    A ``noise_rate`` share of pretraining pairs get a mismatched document,
    which consistency filtering is expected to remove.
    """
    world = SyntheticWorld.create(seed=seed, **world_kwargs)
    rng = world.rng
    held = [world.pair("qa") for _ in range(heldout)]
    n_train = n_pairs - heldout
    n_ft = int(n_train * finetune_fraction)
    finetune = [world.pair("qa") for _ in range(n_ft)]
    names = list(SOURCES)
    pretrain = [world.pair(names[int(rng.integers(len(names)))]) for _ in range(n_train - n_ft)]
    noisy = 0
    for i in np.nonzero(rng.random(len(pretrain)) < noise_rate)[0]:
        j = int(rng.integers(len(pretrain)))
        if j != i and pretrain[j].document != pretrain[i].document:
            pretrain[i] = TextPair(pretrain[i].query, pretrain[j].document, pretrain[i].source)
            noisy += 1
    docs = [p.document for p in pretrain + finetune]
    return DeskCorpus(world, pretrain, finetune, held, docs, noisy)
