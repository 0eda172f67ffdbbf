"""Whitespace tokenizer with a fixed special-token registry.

Id layout: special tokens, then visual pseudo-tokens ``<|v0|>..``, then
corpus words. The last ``n_event`` visual ids form the synthetic "event"
range used to define speak-worthy seconds in tests.
"""

from __future__ import annotations

from collections import Counter
from typing import Iterable, Sequence

PAD = "<|pad|>"
UNK = "<|unk|>"
IM_START = "<|im_start|>"
IM_END = "<|im_end|>"
ROLE_SYSTEM = "<|system|>"
ROLE_USER = "<|user|>"
ROLE_ASSISTANT = "<|assistant|>"
HISTORY_START = "<|history_start|>"
HISTORY_END = "<|history_end|>"
VISION_BOS = "<|vision_bos|>"
VISION_EOS = "<|vision_eos|>"
QUERY_START = "<|query_start|>"
QUERY_END = "<|query_end|>"
FLAG = "<|FLAG|>"
SILENCE = "..."

SPECIAL_TOKENS = (
    PAD,
    UNK,
    IM_START,
    IM_END,
    ROLE_SYSTEM,
    ROLE_USER,
    ROLE_ASSISTANT,
    HISTORY_START,
    HISTORY_END,
    VISION_BOS,
    VISION_EOS,
    QUERY_START,
    QUERY_END,
    FLAG,
    SILENCE,
)


class Tokenizer:
    def __init__(self, words: Sequence[str] = (), n_visual: int = 64, n_event: int = 4):
        if not 0 <= n_event <= n_visual:
            raise ValueError("n_event must lie in [0, n_visual]")
        self.n_visual = n_visual
        self.n_event = n_event
        self.itos: list[str] = list(SPECIAL_TOKENS)
        self.visual_offset = len(self.itos)
        self.itos += [f"<|v{i}|>" for i in range(n_visual)]
        self.word_offset = len(self.itos)
        seen = set(self.itos)
        for w in words:
            if w not in seen:
                seen.add(w)
                self.itos.append(w)
        self.stoi = {s: i for i, s in enumerate(self.itos)}

    @classmethod
    def from_corpus(cls, texts: Iterable[str], min_count: int = 1, **kw) -> "Tokenizer":
        counts = Counter(w for t in texts for w in t.split())
        words = sorted(w for w, c in counts.items() if c >= min_count)
        return cls(words, **kw)

    def __len__(self) -> int:
        return len(self.itos)

    def id(self, token: str) -> int:
        return self.stoi.get(token, self.stoi[UNK])

    def encode(self, text: str | None) -> list[int]:
        if not text:
            return []
        return [self.id(w) for w in text.split()]

    def decode(self, ids: Iterable[int]) -> str:
        return " ".join(self.itos[i] for i in ids)

    def visual_id(self, v: int) -> int:
        """Map a visual pseudo-token index ``0..n_visual-1`` to its vocab id."""
        if not 0 <= v < self.n_visual:
            raise ValueError(f"visual token {v} outside [0, {self.n_visual})")
        return self.visual_offset + v

    @property
    def event_range(self) -> range:
        """Visual indices (not vocab ids) reserved for synthetic events."""
        return range(self.n_visual - self.n_event, self.n_visual)

    def is_word(self, i: int) -> bool:
        return i >= self.word_offset or i == self.stoi[UNK]

    def generation_ids(self) -> list[int]:
        """Ids the generator may emit: corpus words and end-of-message."""
        return [self.stoi[IM_END]] + list(range(self.word_offset, len(self.itos)))

    def to_dict(self) -> dict:
        return {
            "words": self.itos[self.word_offset :],
            "n_visual": self.n_visual,
            "n_event": self.n_event,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Tokenizer":
        return cls(d["words"], n_visual=d["n_visual"], n_event=d["n_event"])
