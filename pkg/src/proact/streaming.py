"""Chunk-wise decide-then-generate engine.

Every second of input becomes one user turn::

    <|im_start|> <|user|>
      <|history_start|> H <|history_end|>
      <|vision_bos|> V_t <|vision_eos|>
      <|query_start|> Q <|query_end|>
      <|FLAG|>
    <|im_end|>

followed by exactly one assistant turn: either generated words or the
silence placeholder. The response head reads the FLAG hidden state after the
user turn is prefilled and gates whether generation runs at all.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from . import tokenizer as tk
from .errors import StreamStepError
from .kvcache import SYSTEM, EvictionReport
from .model import Model, decide, find_flag, flag_hidden, response_score
from .tokenizer import Tokenizer

logger = logging.getLogger(__name__)

DEFAULT_SYSTEM_PROMPT = "you are a live game commentator"
SPEAK, SILENCE = "speak", "silence"


@dataclass
class ChunkInput:
    t: int
    visual: list[int]
    query: str | None = None
    history: str | None = None

    @classmethod
    def from_json(cls, d: dict) -> "ChunkInput":
        return cls(
            t=int(d["t"]),
            visual=[int(v) for v in d.get("visual") or []],
            query=d.get("query"),
            history=d.get("history"),
        )

    def to_json(self) -> dict:
        return {"t": self.t, "visual": list(self.visual), "query": self.query, "history": self.history}


@dataclass
class UtteranceSegment:
    text: str
    continues: bool = False
    silent: bool = False

    def __post_init__(self):
        if self.silent and (self.text != tk.SILENCE or self.continues):
            raise ValueError("a silent segment is exactly the placeholder and never continues")

    @classmethod
    def silence(cls) -> "UtteranceSegment":
        return cls(tk.SILENCE, silent=True)

    def render(self) -> str:
        return self.text + " ..." if self.continues else self.text


@dataclass
class ChunkTiming:
    cache_s: float
    forward_s: float
    chunk_s: float
    n_tokens: int

    @property
    def token_s(self) -> float | None:
        return self.forward_s / self.n_tokens if self.n_tokens else None

    def to_json(self) -> dict:
        return {
            "cache_s": self.cache_s,
            "forward_s": self.forward_s,
            "chunk_s": self.chunk_s,
            "token_s": self.token_s,
            "n_tokens": self.n_tokens,
        }


@dataclass
class StepRecord:
    t: int
    p: float
    action: str
    segment: UtteranceSegment
    timing: ChunkTiming
    evictions: list[EvictionReport] = field(default_factory=list)

    def to_json(self, timing: bool = True) -> dict:
        return {
            "t": self.t,
            "p": self.p,
            "action": self.action,
            "text": self.segment.text,
            "continues": self.segment.continues,
            "timing": self.timing.to_json() if timing else None,
        }


@dataclass
class StreamRunRecord:
    steps: list[StepRecord] = field(default_factory=list)
    tau: float = 0.3

    def __len__(self) -> int:
        return len(self.steps)

    @property
    def evictions(self) -> list[EvictionReport]:
        return [r for s in self.steps for r in s.evictions]

    def speak_seconds(self) -> list[int]:
        return [s.t for s in self.steps if s.action == SPEAK]


def serialize_chunk(chunk: ChunkInput, tok: Tokenizer) -> list[int]:
    """User content for one second; FLAG is always the last token."""
    ids = [tok.id(tk.HISTORY_START), *tok.encode(chunk.history), tok.id(tk.HISTORY_END)]
    ids += [tok.id(tk.VISION_BOS), *(tok.visual_id(v) for v in chunk.visual), tok.id(tk.VISION_EOS)]
    ids += [tok.id(tk.QUERY_START), *tok.encode(chunk.query), tok.id(tk.QUERY_END)]
    ids.append(tok.id(tk.FLAG))
    return ids


class StreamEngine:
    """One stream, one cache. Not thread-safe; weights may be shared read-only."""

    def __init__(
        self,
        model: Model,
        tok: Tokenizer,
        system_prompt: str = DEFAULT_SYSTEM_PROMPT,
        window: int | None = None,
    ):
        self.model = model
        self.tok = tok
        self.cache = model.new_cache(window)
        self.context: list[int] = []  # every token ever fed, eviction does not touch it
        self._allowed = np.array(tok.generation_ids())
        self._im_end = tok.id(tk.IM_END)
        self._continuing = False
        system = [tok.id(tk.IM_START), tok.id(tk.ROLE_SYSTEM), *tok.encode(system_prompt), self._im_end]
        model.prefill(system, self.cache, SYSTEM)
        self.context += system

    def _user_turn(self, chunk: ChunkInput) -> list[int]:
        tok = self.tok
        return [tok.id(tk.IM_START), tok.id(tk.ROLE_USER), *serialize_chunk(chunk, tok), self._im_end]

    def _assistant_prefix(self) -> list[int]:
        return [self.tok.id(tk.IM_START), self.tok.id(tk.ROLE_ASSISTANT)]

    def _feed(self, ids):
        out = self.model.prefill(ids, self.cache)
        self.context += list(ids)
        return out

    def _ingest(self, chunk: ChunkInput, assistant_len: int):
        user = self._user_turn(chunk)
        evictions = self.cache.maybe_evict(len(user) + assistant_len, self.model.freqs)
        out = self._feed(user)
        fs = flag_hidden(out.hidden, find_flag(user, self.tok.id(tk.FLAG)), chunk.t)
        return fs, evictions

    def _generate(self) -> tuple[list[int], bool]:
        budget = self.model.cfg.gen_budget
        logits = self._feed(self._assistant_prefix()).logits[-1]
        words: list[int] = []
        while True:
            allowed = self._allowed if words else self._allowed[1:]  # at least one word
            nxt = int(allowed[np.argmax(logits[allowed])])
            if nxt == self._im_end:
                self._feed([nxt])
                return words, False
            words.append(nxt)
            if len(words) == budget:
                self._feed([nxt, self._im_end])
                return words, True
            logits = self._feed([nxt]).logits[-1]

    def step(self, chunk: ChunkInput, tau: float) -> StepRecord:
        t0 = time.perf_counter()
        assistant_max = 2 + self.model.cfg.gen_budget + 1
        fs, evictions = self._ingest(chunk, assistant_max)
        t1 = time.perf_counter()
        p = float(response_score(fs, self.model.params))
        if decide(p, tau):
            words, continues = self._generate()
            seg = UtteranceSegment(self.tok.decode(words), continues=continues)
            n_tokens = len(words)
            action = SPEAK
        else:
            self._feed([*self._assistant_prefix(), self.tok.id(tk.SILENCE), self._im_end])
            seg = UtteranceSegment.silence()
            n_tokens = 0
            action = SILENCE
        t2 = time.perf_counter()
        self._continuing = seg.continues
        timing = ChunkTiming(cache_s=t1 - t0, forward_s=t2 - t1, chunk_s=t2 - t0, n_tokens=n_tokens)
        return StepRecord(chunk.t, p, action, seg, timing, evictions)

    def teacher_step(self, chunk: ChunkInput, speak: bool, target: Sequence[int]):
        """Ground-truth assistant turn in place of generation, for featurization.

        Returns ``(flag_state, lm_features, lm_targets, lm_mask)``: final-norm
        hidden states at each assistant position that predicts a content token
        or the closing ``<|im_end|>``. Silent turns are returned with mask
        False so callers can check that they are excluded.
        """
        target = list(target) if speak else [self.tok.id(tk.SILENCE)]
        turn = [*self._assistant_prefix(), *target, self._im_end]
        fs, _ = self._ingest(chunk, len(turn))
        out = self._feed(turn)
        # position i predicts token i + 1; start at the role token
        feats = out.final[1:-1]
        targets = np.array(turn[2:], dtype=np.int64)
        mask = np.full(len(targets), bool(speak))
        return fs, feats, targets, mask


def run_stream(engine: StreamEngine, chunks: Iterable[ChunkInput], tau: float) -> StreamRunRecord:
    record = StreamRunRecord(tau=tau)
    last_t = None
    for chunk in chunks:
        if last_t is not None and chunk.t <= last_t:
            raise StreamStepError(chunk.t, ValueError(f"chunks out of order after t={last_t}"))
        last_t = chunk.t
        try:
            record.steps.append(engine.step(chunk, tau))
        except Exception as exc:
            raise StreamStepError(chunk.t, exc) from exc
    return record


# -- context structure ---------------------------------------------------------


def lint_context(ids: Sequence[int], tok: Tokenizer) -> list[str]:
    """Check that a flat token stream is system, then strictly alternating
    user/assistant turns, with exactly one FLAG closing each user turn and a
    non-empty assistant turn (words or the bare placeholder) after each.

    Returns a list of problems; empty means the structure is valid.
    """
    problems = []
    im_start, im_end = tok.id(tk.IM_START), tok.id(tk.IM_END)
    roles = {tok.id(tk.ROLE_SYSTEM): "system", tok.id(tk.ROLE_USER): "user", tok.id(tk.ROLE_ASSISTANT): "assistant"}
    flag, silence = tok.id(tk.FLAG), tok.id(tk.SILENCE)

    turns = []
    i, n = 0, len(ids)
    while i < n:
        if ids[i] != im_start or i + 1 >= n or ids[i + 1] not in roles:
            problems.append(f"token {i}: expected turn header")
            return problems
        try:
            j = list(ids[i + 2 :]).index(im_end) + i + 2
        except ValueError:
            problems.append(f"token {i}: unterminated turn")
            return problems
        turns.append((roles[ids[i + 1]], list(ids[i + 2 : j])))
        i = j + 1

    if not turns or turns[0][0] != "system":
        problems.append("stream must open with a system turn")
        return problems
    expected = "user"
    for k, (role, body) in enumerate(turns[1:], start=1):
        if role != expected:
            problems.append(f"turn {k}: expected {expected}, got {role}")
        if role == "user":
            if body.count(flag) != 1 or not body or body[-1] != flag:
                problems.append(f"turn {k}: user turn must end with exactly one FLAG")
        elif role == "assistant":
            if not body:
                problems.append(f"turn {k}: empty assistant turn")
            elif silence in body and body != [silence]:
                problems.append(f"turn {k}: silence placeholder mixed with text")
            elif body != [silence] and not all(tok.is_word(t) for t in body):
                problems.append(f"turn {k}: assistant emitted non-word tokens")
        expected = "assistant" if role == "user" else "user"
    if len(turns) > 1 and turns[-1][0] != "assistant":
        problems.append("stream ends inside a user turn")
    return problems


# -- profiling -----------------------------------------------------------------

PROFILE_COLUMNS = ("Frame", "WS", "Cache", "Forward", "Chunk", "Token")


def profile_row(record: StreamRunRecord, ws: int, frame: int | None = None) -> dict:
    if not record.steps:
        raise ValueError("cannot profile an empty run")
    timings = [s.timing for s in record.steps]
    n_tok = sum(t.n_tokens for t in timings)
    gen_time = sum(t.forward_s for t in timings if t.n_tokens)
    return {
        "Frame": frame,
        "WS": ws,
        "Cache": float(np.mean([t.cache_s for t in timings])),
        "Forward": float(np.mean([t.forward_s for t in timings])),
        "Chunk": float(np.mean([t.chunk_s for t in timings])),
        "Token": gen_time / n_tok if n_tok else None,
    }


def profile_table(rows: Sequence[dict]) -> str:
    """Fixed-width table; absent values (no generated tokens) print as ``-``."""

    def fmt(v):
        if v is None:
            return "-"
        if isinstance(v, float):
            return f"{v:.6f}"
        return str(v)

    cells = [list(PROFILE_COLUMNS)] + [[fmt(r.get(c)) for c in PROFILE_COLUMNS] for r in rows]
    widths = [max(len(row[i]) for row in cells) for i in range(len(PROFILE_COLUMNS))]
    lines = ["  ".join(c.rjust(w) for c, w in zip(row, widths)) for row in cells]
    return "\n".join(lines)


# -- JSONL I/O -----------------------------------------------------------------


def read_chunks(path) -> list[ChunkInput]:
    chunks = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                chunks.append(ChunkInput.from_json(json.loads(line)))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise ValueError(f"{path}:{lineno}: bad chunk line: {exc}") from exc
    return chunks


def write_chunks(path, chunks: Iterable[ChunkInput]) -> None:
    with open(path, "w") as fh:
        for c in chunks:
            fh.write(json.dumps(c.to_json()) + "\n")


def write_run(path, record: StreamRunRecord, timing: bool = True) -> None:
    with open(path, "w") as fh:
        for s in record.steps:
            fh.write(json.dumps(s.to_json(timing=timing)) + "\n")


def read_run(path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]
