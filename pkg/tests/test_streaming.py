import numpy as np
import pytest

from proact import tokenizer as tk
from proact.errors import StreamStepError
from proact.kvcache import STREAMING
from proact.model import decide
from proact.streaming import (
    PROFILE_COLUMNS,
    SILENCE,
    SPEAK,
    ChunkInput,
    ChunkTiming,
    StepRecord,
    StreamEngine,
    StreamRunRecord,
    UtteranceSegment,
    lint_context,
    profile_row,
    profile_table,
    read_chunks,
    read_run,
    run_stream,
    serialize_chunk,
    write_chunks,
    write_run,
)
from proact.synthetic import make_stream
from oracles import KvShadow


class ShadowedModel:
    """Model proxy that mirrors every prefill and eviction into a raw-key shadow."""

    def __init__(self, model):
        self.model = model
        self.cfg, self.freqs, self.params = model.cfg, model.freqs, model.params
        self.shadow = KvShadow(model)

    def new_cache(self, window=None):
        cache = self.model.new_cache(window)
        evict = cache.maybe_evict

        def tracked(n, freqs):
            reports = evict(n, freqs)
            self.shadow.drop(reports)
            return reports

        cache.maybe_evict = tracked
        return cache

    def prefill(self, tokens, cache, segment=STREAMING, on_kv=None):
        out = self.model.prefill(tokens, cache, segment, on_kv=self.shadow.hook)
        self.shadow.commit(segment)
        return out


def test_serialize_minimal_length(tok):
    ids = serialize_chunk(ChunkInput(0, [1, 2, 3]), tok)
    assert len(ids) == 2 + 0 + 2 + 3 + 2 + 0 + 1 == 10
    assert ids[-1] == tok.id(tk.FLAG)


def test_serialize_order(tok):
    ids = serialize_chunk(ChunkInput(0, [5], query="look", history="nice shot"), tok)
    words = tok.decode(ids).split()
    assert words == [
        tk.HISTORY_START, "nice", "shot", tk.HISTORY_END,
        tk.VISION_BOS, "<|v5|>", tk.VISION_EOS,
        tk.QUERY_START, "look", tk.QUERY_END, tk.FLAG,
    ]


def test_utterance_segment_rules():
    assert UtteranceSegment.silence().text == "..."
    assert UtteranceSegment("big fight", continues=True).render() == "big fight ..."
    with pytest.raises(ValueError):
        UtteranceSegment("hello", silent=True)
    with pytest.raises(ValueError):
        UtteranceSegment("...", continues=True, silent=True)


def test_chunk_json_roundtrip(tmp_path):
    chunks = [ChunkInput(0, [1, 2]), ChunkInput(1, [], "q", "h")]
    path = tmp_path / "s.jsonl"
    write_chunks(path, chunks)
    assert read_chunks(path) == chunks


def test_read_chunks_names_bad_line(tmp_path):
    path = tmp_path / "s.jsonl"
    path.write_text('{"t": 0, "visual": []}\n{not json\n')
    with pytest.raises(ValueError, match=":2:"):
        read_chunks(path)


def stream(tok, n, seed=0):
    return make_stream(n, tok, seed).chunks


def test_tau_above_one_all_silent(model, tok):
    engine = StreamEngine(model, tok)
    rec = run_stream(engine, stream(tok, 20), tau=1.5)
    assert rec.speak_seconds() == []
    assert all(s.segment.silent and s.segment.text == "..." for s in rec.steps)
    assert lint_context(engine.context, tok) == []
    assert engine.context.count(tok.id(tk.ROLE_ASSISTANT)) == 20


def test_tau_zero_all_speak(model, tok):
    engine = StreamEngine(model, tok)
    rec = run_stream(engine, stream(tok, 15), tau=0.0)
    assert len(rec.speak_seconds()) == 15
    for s in rec.steps:
        n = len(s.segment.text.split())
        assert 1 <= n <= model.cfg.gen_budget
        assert s.segment.continues == (n == model.cfg.gen_budget)
        assert s.timing.n_tokens == n
    assert lint_context(engine.context, tok) == []


def test_silent_step_contributes_only_placeholder(model, tok):
    engine = StreamEngine(model, tok)
    before = len(engine.context)
    engine.step(ChunkInput(0, [1, 2]), tau=2.0)
    added = engine.context[before:]
    user_len = len(serialize_chunk(ChunkInput(0, [1, 2]), tok)) + 3
    assistant = added[user_len:]
    assert assistant == [tok.id(tk.IM_START), tok.id(tk.ROLE_ASSISTANT), tok.id(tk.SILENCE), tok.id(tk.IM_END)]


def test_empty_run(model, tok):
    rec = run_stream(StreamEngine(model, tok), [], tau=0.3)
    assert len(rec) == 0 and rec.evictions == []


def test_out_of_order_chunks_rejected(model, tok):
    with pytest.raises(StreamStepError) as info:
        run_stream(StreamEngine(model, tok), [ChunkInput(3, [1]), ChunkInput(2, [1])], 0.3)
    assert info.value.chunk_index == 2


def test_step_error_carries_chunk_index(model, tok):
    bad = [ChunkInput(0, [1]), ChunkInput(1, [999])]
    with pytest.raises(StreamStepError) as info:
        run_stream(StreamEngine(model, tok), bad, 0.3)
    assert info.value.chunk_index == 1


def test_long_run_with_evictions_matches_reencode(model, tok):
    proxy = ShadowedModel(model)
    engine = StreamEngine(proxy, tok, window=160)
    chunks = stream(tok, 200, seed=5)
    rec = run_stream(engine, chunks, tau=0.5)
    assert len(rec) == 200
    assert len(rec.evictions) >= 3
    assert len(engine.cache) <= 160
    assert lint_context(engine.context, tok) == []
    # decisions reproduce from the logged probabilities
    assert all((s.action == SPEAK) == decide(s.p, 0.5) for s in rec.steps)

    probe = [tok.id(tk.IM_START), tok.id(tk.ROLE_USER), *serialize_chunk(ChunkInput(200, [1, 2, 3]), tok)]
    engine.cache.maybe_evict(len(probe), model.freqs)
    oracle = proxy.shadow.reencoded(engine.cache)
    np.testing.assert_allclose(
        model.prefill(probe, engine.cache).logits, model.prefill(probe, oracle).logits, atol=1e-6, rtol=0
    )


def test_causal_feedback(model, tok):
    chunks = stream(tok, 12, seed=8)
    altered = list(chunks)
    altered[9] = ChunkInput(9, [60, 61, 62, 63], "what", "big fight")
    a = run_stream(StreamEngine(model, tok), chunks, 0.5)
    b = run_stream(StreamEngine(model, tok), altered, 0.5)
    for sa, sb in zip(a.steps[:9], b.steps[:9]):
        assert (sa.p, sa.action, sa.segment) == (sb.p, sb.action, sb.segment)


def test_run_deterministic(model, tok, tmp_path):
    chunks = stream(tok, 30, seed=3)
    paths = []
    for i in range(2):
        rec = run_stream(StreamEngine(model, tok), chunks, 0.5)
        paths.append(tmp_path / f"run{i}.jsonl")
        write_run(paths[-1], rec, timing=False)
    assert paths[0].read_bytes() == paths[1].read_bytes()


def test_run_file_fields(model, tok, tmp_path):
    rec = run_stream(StreamEngine(model, tok), stream(tok, 5), 0.0)
    path = tmp_path / "run.jsonl"
    write_run(path, rec)
    rows = read_run(path)
    assert len(rows) == 5
    assert set(rows[0]) == {"t", "p", "action", "text", "continues", "timing"}
    assert set(rows[0]["timing"]) >= {"cache_s", "forward_s", "chunk_s", "token_s"}
    assert all(v >= 0 for v in rows[0]["timing"].values() if v is not None)


def fake_record(timings):
    steps = []
    for t, (c, f, n) in enumerate(timings):
        seg = UtteranceSegment("nice", False) if n else UtteranceSegment.silence()
        steps.append(StepRecord(t, 0.5, SPEAK if n else SILENCE, seg, ChunkTiming(c, f, c + f + 0.001, n)))
    return StreamRunRecord(steps)


def test_profile_row_values():
    rec = fake_record([(0.1, 0.2, 4), (0.3, 0.05, 0), (0.2, 0.6, 2)])
    row = profile_row(rec, ws=512)
    assert row["Chunk"] == pytest.approx(np.mean([s.timing.chunk_s for s in rec.steps]), abs=1e-15)
    assert row["Cache"] == pytest.approx(0.2)
    assert row["Token"] == pytest.approx(0.8 / 6)


def test_profile_all_silent_token_absent():
    row = profile_row(fake_record([(0.1, 0.01, 0)] * 3), ws=64)
    assert row["Token"] is None
    last_line = profile_table([row]).splitlines()[-1]
    assert last_line.split()[-1] == "-"


def test_profile_table_columns():
    rows = [profile_row(fake_record([(0.1, 0.2, 3)]), ws=w) for w in (8192, 16384)]
    lines = profile_table(rows).splitlines()
    assert lines[0].split() == list(PROFILE_COLUMNS)
    assert [c for c in PROFILE_COLUMNS if c != "Frame"] == ["WS", "Cache", "Forward", "Chunk", "Token"]
    assert len(lines) == 3


def test_profile_empty_rejected():
    with pytest.raises(ValueError):
        profile_row(StreamRunRecord(), ws=1)


@pytest.mark.parametrize(
    "turns,problem",
    [
        ([("user", ["f"]), ("assistant", ["s"])], "system"),
        ([("system", []), ("assistant", ["s"])], "expected user"),
        ([("system", []), ("user", ["w"]), ("assistant", ["s"])], "FLAG"),
        ([("system", []), ("user", ["f"]), ("assistant", [])], "empty assistant"),
        ([("system", []), ("user", ["f"]), ("assistant", ["s", "w"])], "mixed"),
        ([("system", []), ("user", ["f"]), ("assistant", ["s"]), ("user", ["f"])], "ends inside"),
    ],
)
def test_lint_catches(tok, turns, problem):
    sym = {"f": tok.id(tk.FLAG), "s": tok.id(tk.SILENCE), "w": tok.id("nice")}
    role = {"system": tk.ROLE_SYSTEM, "user": tk.ROLE_USER, "assistant": tk.ROLE_ASSISTANT}
    ids = []
    for r, body in turns:
        ids += [tok.id(tk.IM_START), tok.id(role[r]), *(sym[b] for b in body), tok.id(tk.IM_END)]
    problems = lint_context(ids, tok)
    assert any(problem in p for p in problems), problems


def test_lint_unterminated(tok):
    assert lint_context([tok.id(tk.IM_START), tok.id(tk.ROLE_SYSTEM)], tok)
