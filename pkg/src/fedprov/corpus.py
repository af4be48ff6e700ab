"""Corpus ingestion: UTF-8 text -> normalised characters -> fixed-length documents."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .lm import TokenSeq, Vocab, normalize_text, split_documents


@dataclass
class Corpus:
    vocab: Vocab
    documents: list[TokenSeq]

    def split(self, fractions: dict[str, float], seed: int = 0) -> dict[str, list[TokenSeq]]:
        """Shuffle documents once and cut them into named disjoint parts."""
        if sum(fractions.values()) > 1.0 + 1e-12:
            raise ValueError("split fractions sum to more than 1")
        order = np.random.default_rng([seed, 0x53504C54]).permutation(len(self.documents))
        out, pos = {}, 0
        for name, frac in fractions.items():
            n = int(round(frac * len(self.documents)))
            out[name] = [self.documents[i] for i in order[pos:pos + n]]
            pos += n
        return out


def builtin_text() -> str:
    """English prose shipped with CPython (the interactive help topics)."""
    from pydoc_data.topics import topics
    return "\n".join(topics[k] for k in sorted(topics))


def load_corpus(path: str | Path | None, doc_length: int = 256) -> Corpus:
    """Read and normalise a corpus; ``path=None`` uses the builtin text."""
    if path is None:
        raw = builtin_text()
    else:
        raw = Path(path).read_text(encoding="utf-8")
    text = normalize_text(raw)
    vocab = Vocab.from_text(text)
    docs = split_documents(vocab.encode(text), doc_length)
    if not docs:
        raise ValueError(f"corpus shorter than one document of {doc_length} symbols")
    return Corpus(vocab, docs)
