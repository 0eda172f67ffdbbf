"""Command-line entry point: ``proact <subcommand>``.

Settings resolve as command-line flag, then environment (``PROACT_SEED``),
then the JSON config file (``--config`` or ``PROACT_CONFIG``), then the
built-in default. Exit codes: 0 success, 2 configuration, 3 input/output,
4 numeric failure, 1 anything else.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from . import __version__
from .data import (
    derive_labels,
    merge_captions,
    read_asr,
    segment_clips,
    split_caption,
    stratify,
    with_response_rates,
)
from .errors import CacheOverflowError, InvalidConfigError, NumericError, ProactError, StreamStepError
from .losses import LossConfig
from .metrics import GtInterval, PredTimeline, TimeDiffConfig, intervals_from_labels, metrics_report
from .model import Model, ModelConfig
from .streaming import (
    ChunkInput,
    StreamEngine,
    profile_row,
    profile_table,
    read_chunks,
    read_run,
    run_stream,
    write_chunks,
    write_run,
)
from .synthetic import make_stream, synthetic_tokenizer
from .tokenizer import Tokenizer
from .train import TrainConfig, featurize, make_clips, train_head, write_curve

logger = logging.getLogger("proact")

EXIT_OK, EXIT_OTHER, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC = 0, 1, 2, 3, 4

DEFAULTS = {
    "tau": 0.3,
    "window": None,  # None: the checkpoint's max_window
    "steps": 2000,
    "lr": 3e-3,
    "alpha": 0.2,
    "gamma": 5.0,
    "delta": 3.0,
    "penalty_alpha": 1.0,
    "omega": 0.5,
    "clip_len": 36,
    "overlap": 18,
}


class InputError(ProactError):
    """Unreadable or malformed input file."""


class Settings:
    """Flag > env > config file > default lookup."""

    def __init__(self, args: argparse.Namespace):
        self.args = args
        path = getattr(args, "config", None) or os.environ.get("PROACT_CONFIG")
        self.file: dict = {}
        if path:
            try:
                self.file = json.loads(Path(path).read_text())
            except OSError as exc:
                raise InputError(f"cannot read config {path}: {exc}") from exc
            except json.JSONDecodeError as exc:
                raise InvalidConfigError(f"config {path} is not valid JSON: {exc}") from exc
            if not isinstance(self.file, dict):
                raise InvalidConfigError(f"config {path} must hold a JSON object")

    def get(self, key: str):
        v = getattr(self.args, key, None)
        if v is not None:
            return v
        if key in self.file:
            return self.file[key]
        return DEFAULTS.get(key)

    def seed(self) -> int:
        if getattr(self.args, "seed", None) is not None:
            return self.args.seed
        env = os.environ.get("PROACT_SEED")
        if env is not None:
            try:
                return int(env)
            except ValueError as exc:
                raise InvalidConfigError(f"PROACT_SEED must be an integer, got {env!r}") from exc
        if "seed" in self.file:
            return int(self.file["seed"])
        raise InvalidConfigError("a seed is required: pass --seed, set PROACT_SEED or add it to the config")


# -- helpers -------------------------------------------------------------------


def _need_file(path) -> Path:
    p = Path(path)
    if not p.is_file():
        raise InputError(f"no such file: {p}")
    return p


def _load_json(path):
    try:
        return json.loads(_need_file(path).read_text())
    except json.JSONDecodeError as exc:
        raise InputError(f"{path}: invalid JSON: {exc}") from exc


def _read_jsonl(path) -> list[dict]:
    rows = []
    with open(_need_file(path)) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rows.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise InputError(f"{path}:{lineno}: invalid JSON: {exc}") from exc
    return rows


def _read_chunks(path) -> list[ChunkInput]:
    try:
        return read_chunks(_need_file(path))
    except ValueError as exc:
        raise InputError(str(exc)) from exc


def _load_model(path) -> tuple[Model, Tokenizer, dict]:
    try:
        model, meta = Model.load(_need_file(path))
    except (OSError, ValueError, KeyError) as exc:
        raise InputError(f"cannot load weights {path}: {exc}") from exc
    if "tokenizer" not in meta:
        raise InputError(f"{path}: checkpoint has no tokenizer entry")
    return model, Tokenizer.from_dict(meta["tokenizer"]), meta


def _write_labels_dir(out_dir: Path, labels, captions_rows) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "labels.json").write_text(json.dumps({"labels": [int(v) for v in labels]}) + "\n")
    with open(out_dir / "captions.jsonl", "w") as fh:
        for row in captions_rows:
            fh.write(json.dumps(row) + "\n")


def _read_labels_dir(d: Path, horizon: int) -> tuple[list[int], list[str | None]]:
    labels = _load_json(d / "labels.json").get("labels")
    if not isinstance(labels, list) or len(labels) != horizon:
        raise InputError(f"{d}/labels.json: expected {horizon} labels")
    captions: list[str | None] = [None] * horizon
    for row in _read_jsonl(d / "captions.jsonl"):
        t = int(row["second"])
        if 0 <= t < horizon:
            words = [w for w in str(row["text"]).split() if w != "..."]
            captions[t] = " ".join(words) or None
    return [int(v) for v in labels], captions


# -- subcommands ---------------------------------------------------------------


def cmd_init(args, cfg: Settings) -> int:
    if args.corpus:
        text = _need_file(args.corpus).read_text().split("\n")
        tok = Tokenizer.from_corpus(text)
    else:
        tok = synthetic_tokenizer()
    window = cfg.get("window") or 2048
    model = Model(ModelConfig(vocab_size=len(tok), max_window=int(window)), seed=cfg.seed())
    model.save(args.out, extra={"tokenizer": tok.to_dict(), "seed": cfg.seed()})
    print(f"wrote {args.out}: vocab={len(tok)} window={window}")
    return EXIT_OK


def cmd_synth(args, cfg: Settings) -> int:
    seed = cfg.seed()
    tok = synthetic_tokenizer()
    s = make_stream(args.seconds, tok, seed, rate=args.rate)
    out = Path(args.out_dir)
    (out / "streams").mkdir(parents=True, exist_ok=True)
    write_chunks(out / "streams" / f"{args.name}.jsonl", s.chunks)
    rows = [
        {"speaker": "assistant", "second": t, "text": c, "continues": False}
        for t, c in enumerate(s.captions)
        if c
    ]
    _write_labels_dir(out / "labels" / args.name, s.labels, rows)
    gt = [{"a": g.a, "b": g.b} for g in intervals_from_labels(s.labels)]
    (out / f"{args.name}.gt.json").write_text(json.dumps(gt) + "\n")
    print(f"wrote {args.seconds} s stream {args.name} (label rate {s.labels.mean():.3f}) to {out}")
    return EXIT_OK


def cmd_preprocess(args, cfg: Settings) -> int:
    try:
        segs = read_asr(_need_file(args.asr))
    except ValueError as exc:
        raise InputError(f"{args.asr}: {exc}") from exc
    if args.speaker:
        segs = [s for s in segs if s.speaker == args.speaker]
    caps = merge_captions(c for s in segs for c in split_caption(s))
    horizon = args.horizon if args.horizon is not None else (max((c.second for c in caps), default=-1) + 1)
    labels = derive_labels(caps, horizon)
    clips = with_response_rates(
        segment_clips(horizon, int(cfg.get("clip_len")), int(cfg.get("overlap")), source=Path(args.asr).stem),
        labels,
    )
    sampled = stratify(clips, cfg.seed()) if clips else []
    out = Path(args.out_dir)
    _write_labels_dir(out, labels, [c.to_json() for c in caps])
    manifest = {"clips": [c.to_json() for c in clips], "sampled": [c.to_json() for c in sampled]}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1) + "\n")
    print(
        f"segments={len(segs)} captions={len(caps)} seconds={horizon} "
        f"clips={len(clips)} sampled={len(sampled)}"
    )
    return EXIT_OK


def cmd_simulate(args, cfg: Settings) -> int:
    model, tok, _ = _load_model(args.weights)
    chunks = _read_chunks(args.stream)
    engine = StreamEngine(model, tok, window=cfg.get("window"))
    record = run_stream(engine, chunks, float(cfg.get("tau")))
    write_run(args.out, record, timing=not args.no_timing)
    if args.context_out:
        Path(args.context_out).write_text(json.dumps(engine.context) + "\n")
    print(
        f"{len(record)} chunks, {len(record.speak_seconds())} spoken, "
        f"{len(record.evictions)} evictions -> {args.out}"
    )
    return EXIT_OK


def cmd_train(args, cfg: Settings) -> int:
    model, tok, meta = _load_model(args.weights)
    seed = cfg.seed()
    steps = int(cfg.get("steps"))
    loss_cfg = LossConfig(gamma=float(cfg.get("gamma")), alpha=float(cfg.get("alpha")))
    curve = []
    params = model.params
    if steps > 0:
        streams = sorted(Path(args.streams).glob("*.jsonl"))
        if not streams:
            raise InputError(f"no *.jsonl streams in {args.streams}")
        feats = []
        for path in streams:
            chunks = _read_chunks(path)
            labels, captions = _read_labels_dir(Path(args.labels) / path.stem, len(chunks))
            feats.append(featurize(model, tok, chunks, labels, captions, cfg.get("window")))
            logger.info("featurized %s (%d s)", path.name, len(chunks))
        clips = make_clips(feats, int(cfg.get("clip_len")), int(cfg.get("overlap")))
        tcfg = TrainConfig(steps=steps, lr=float(cfg.get("lr")), seed=seed)
        result = train_head(params, clips, loss_cfg, tcfg)
        params, curve = result.params, result.curve
    Model(model.cfg, params).save(args.out, extra={**meta, "train_seed": seed, "steps": steps})
    if args.curve:
        write_curve(args.curve, curve)
    last = f", final total {curve[-1]['total']:.4f}" if curve else ""
    print(f"trained {steps} steps{last} -> {args.out}")
    return EXIT_OK


def _prediction_from_run(rows: list[dict]) -> PredTimeline:
    return PredTimeline.from_speak_seconds(int(r["t"]) for r in rows if r.get("action") == "speak")


def cmd_evaluate(args, cfg: Settings) -> int:
    try:
        rows = read_run(_need_file(args.run))
    except json.JSONDecodeError as exc:
        raise InputError(f"{args.run}: invalid JSON: {exc}") from exc
    raw_gt = _load_json(args.gt)
    try:
        gt = [GtInterval(int(g["a"]), int(g["b"])) for g in raw_gt]
    except (KeyError, TypeError, ValueError) as exc:
        raise InputError(f"{args.gt}: expected a list of {{\"a\", \"b\"}} objects: {exc}") from exc
    scores = None
    if args.scores:
        scores = {int(r["t"]): int(r["score"]) for r in _read_jsonl(args.scores)}
    horizon = max([int(r["t"]) + 1 for r in rows] + [g.b for g in gt] + [0])
    td = TimeDiffConfig(float(cfg.get("delta")), float(cfg.get("penalty_alpha")))
    report = metrics_report(gt, _prediction_from_run(rows), horizon, scores, td, float(cfg.get("omega")))
    text = json.dumps(report, sort_keys=True)
    if args.out:
        Path(args.out).write_text(text + "\n")
    print(text)
    return EXIT_OK


def _with_frame_tokens(chunks: list[ChunkInput], n: int) -> list[ChunkInput]:
    out = []
    for c in chunks:
        base = c.visual or [0]
        visual = [base[i % len(base)] for i in range(n)]
        out.append(ChunkInput(c.t, visual, c.query, c.history))
    return out


def cmd_profile(args, cfg: Settings) -> int:
    model, tok, _ = _load_model(args.weights)
    chunks = _read_chunks(args.stream)
    if not chunks:
        raise InputError(f"{args.stream}: empty stream")
    tau = float(cfg.get("tau"))
    frames = args.frame_tokens or [None]
    rows = []
    for frame in frames:
        stream = chunks if frame is None else _with_frame_tokens(chunks, frame)
        for ws in args.window:
            record = run_stream(StreamEngine(model, tok, window=ws), stream, tau)
            rows.append(profile_row(record, ws, frame))
    print(profile_table(rows))
    if args.out:
        Path(args.out).write_text(json.dumps(rows, indent=1) + "\n")
    return EXIT_OK


# -- parser --------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file (default: $PROACT_CONFIG)")
    common.add_argument("--seed", type=int, help="RNG seed (default: $PROACT_SEED, then config)")
    common.add_argument("-v", "--verbose", action="count", default=0)

    p = argparse.ArgumentParser(prog="proact", description="Streaming proactive response pipeline.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("init", parents=[common], help="write freshly initialized weights")
    s.add_argument("--out", required=True)
    s.add_argument("--corpus", help="text file whose words form the vocabulary (default: synthetic words)")
    s.add_argument("--window", type=int)
    s.set_defaults(func=cmd_init)

    s = sub.add_parser("synth", parents=[common], help="write a synthetic event stream with labels")
    s.add_argument("--out-dir", required=True)
    s.add_argument("--seconds", type=int, default=1000)
    s.add_argument("--name", default="synthetic")
    s.add_argument("--rate", type=float, default=0.4)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("preprocess", parents=[common], help="ASR segments to captions, labels and clips")
    s.add_argument("asr")
    s.add_argument("out_dir")
    s.add_argument("--speaker", help="keep only this speaker's segments")
    s.add_argument("--horizon", type=int, help="timeline length in seconds")
    s.add_argument("--clip-len", dest="clip_len", type=int)
    s.add_argument("--overlap", type=int)
    s.set_defaults(func=cmd_preprocess)

    s = sub.add_parser("simulate", parents=[common], help="run the streaming engine over a chunk file")
    s.add_argument("stream")
    s.add_argument("weights")
    s.add_argument("--out", required=True)
    s.add_argument("--tau", type=float, help="response threshold (default 0.3)")
    s.add_argument("--window", type=int)
    s.add_argument("--no-timing", action="store_true", help="write null timings so runs are byte-identical")
    s.add_argument("--context-out", help="also dump the full context token ids as JSON")
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("train", parents=[common], help="train the response and LM heads")
    s.add_argument("streams", help="directory of <name>.jsonl chunk files")
    s.add_argument("labels", help="directory of <name>/labels.json + captions.jsonl")
    s.add_argument("--weights", required=True, help="starting checkpoint")
    s.add_argument("--out", required=True)
    s.add_argument("--curve", help="loss CSV path")
    s.add_argument("--steps", type=int)
    s.add_argument("--lr", type=float)
    s.add_argument("--alpha", type=float)
    s.add_argument("--gamma", type=float)
    s.add_argument("--window", type=int)
    s.add_argument("--clip-len", dest="clip_len", type=int)
    s.add_argument("--overlap", type=int)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("evaluate", parents=[common], help="TimeDiff, F1 and PAUC for a run")
    s.add_argument("run")
    s.add_argument("gt")
    s.add_argument("--scores", help='judge scores JSONL {"t", "score"}')
    s.add_argument("--out")
    s.add_argument("--delta", type=float)
    s.add_argument("--penalty-alpha", dest="penalty_alpha", type=float)
    s.add_argument("--omega", type=float)
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("profile", parents=[common], help="latency table across window sizes")
    s.add_argument("stream")
    s.add_argument("weights")
    s.add_argument("--window", type=int, nargs="+", required=True)
    s.add_argument("--frame-tokens", dest="frame_tokens", type=int, nargs="+")
    s.add_argument("--tau", type=float)
    s.add_argument("--out")
    s.set_defaults(func=cmd_profile)
    return p


def _exit_code(exc: BaseException) -> int:
    if isinstance(exc, StreamStepError):
        return _exit_code(exc.cause)
    if isinstance(exc, (InvalidConfigError, CacheOverflowError)):
        return EXIT_CONFIG
    if isinstance(exc, (InputError, OSError)):
        return EXIT_IO
    if isinstance(exc, (NumericError, FloatingPointError)):
        return EXIT_NUMERIC
    return EXIT_OTHER


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args, Settings(args))
    except Exception as exc:  # noqa: BLE001 - mapped to exit codes
        code = _exit_code(exc)
        print(f"proact {args.command}: error: {exc}", file=sys.stderr)
        if code == EXIT_OTHER:
            logger.debug("unexpected failure", exc_info=True)
        return code


if __name__ == "__main__":
    sys.exit(main())
