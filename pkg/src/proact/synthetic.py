"""Synthetic "event token => speak" streams.

Event state follows a two-state Markov chain so labels come in persistence
runs with occasional transitions. During event seconds some visual
pseudo-tokens are drawn from the tokenizer's event range; every other visual
token comes from the ordinary range.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .streaming import ChunkInput
from .tokenizer import Tokenizer

WORDS = (
    "nice shot wow look at that move he goes in again what a play big fight "
    "clean kill watch the left side here they come huge damage close call "
    "great timing so smooth back off push now easy win that was risky "
    "perfect dodge full health low health boss down loot time"
).split()


def synthetic_tokenizer(n_visual: int = 64, n_event: int = 4) -> Tokenizer:
    return Tokenizer(sorted(set(WORDS)), n_visual=n_visual, n_event=n_event)


@dataclass
class SyntheticStream:
    chunks: list[ChunkInput]
    labels: np.ndarray
    captions: list[str | None]

    def __len__(self) -> int:
        return len(self.chunks)


def make_stream(
    n_seconds: int,
    tok: Tokenizer,
    seed: int,
    rate: float = 0.4,
    mean_run: float = 5.0,
    visual_per_chunk: int = 4,
    event_tokens: int = 2,
    history_prob: float = 0.15,
    query_prob: float = 0.05,
    start_t: int = 0,
) -> SyntheticStream:
    rng = np.random.default_rng(seed)
    p_stop = 1.0 / mean_run
    p_start = p_stop * rate / (1.0 - rate)
    normal_hi = tok.n_visual - tok.n_event
    events = list(tok.event_range)
    words = sorted(set(WORDS))

    state = rng.random() < rate
    chunks, labels, captions = [], [], []
    for i in range(n_seconds):
        if i:
            state = (rng.random() >= p_stop) if state else (rng.random() < p_start)
        visual = rng.integers(0, normal_hi, size=visual_per_chunk).tolist()
        if state:
            slots = rng.choice(visual_per_chunk, size=min(event_tokens, visual_per_chunk), replace=False)
            for s in slots:
                visual[s] = int(rng.choice(events))
        history = " ".join(rng.choice(words, size=rng.integers(1, 4))) if rng.random() < history_prob else None
        query = " ".join(rng.choice(words, size=2)) if rng.random() < query_prob else None
        chunks.append(ChunkInput(start_t + i, visual, query, history))
        labels.append(int(state))
        captions.append(" ".join(rng.choice(words, size=rng.integers(2, 5))) if state else None)
    return SyntheticStream(chunks, np.array(labels, dtype=np.int64), captions)
