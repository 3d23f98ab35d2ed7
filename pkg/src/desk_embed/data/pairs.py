"""Text pairs and their JSON-lines representation."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator


@dataclass
class TextPair:
    query: str
    document: str
    source: str = "default"
    hard_negatives: list[str] | None = field(default=None)

    def __post_init__(self):
        if not self.query or not self.document:
            raise ValueError("query and document must be non-empty")
        if self.hard_negatives is not None and self.document in self.hard_negatives:
            raise ValueError("hard_negatives must not contain the positive document")

    def to_json(self) -> dict:
        out = {"query": self.query, "document": self.document, "source": self.source}
        if self.hard_negatives is not None:
            out["hard_negatives"] = list(self.hard_negatives)
        return out

    @classmethod
    def from_json(cls, obj: dict) -> "TextPair":
        return cls(obj["query"], obj["document"], obj.get("source", "default"), obj.get("hard_negatives"))


def read_jsonl(path) -> Iterator[dict]:
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                yield json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from None


def write_jsonl(path, rows: Iterable[dict]) -> int:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    n = 0
    with open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row, ensure_ascii=False) + "\n")
            n += 1
    return n


def load_pairs(path) -> list[TextPair]:
    return [TextPair.from_json(o) for o in read_jsonl(path)]


def save_pairs(path, pairs: Iterable[TextPair]) -> int:
    return write_jsonl(path, (p.to_json() for p in pairs))


def group_by_source(pairs: Iterable[TextPair]) -> dict[str, list[TextPair]]:
    out: dict[str, list[TextPair]] = {}
    for p in pairs:
        out.setdefault(p.source, []).append(p)
    return out
