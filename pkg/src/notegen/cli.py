"""Command line entry point: ``notegen {ingest,inspect,train,eval,generate}``.

Exit codes: 0 success, 2 usage error, 3 I/O error, 4 data error,
5 training diverged.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from .errors import DataError, Divergence, NotegenError
from .generator import SamplerConfig, emit_midi, generate
from .midi import events_to_notes, read_midi
from .tensor import make_rng
from .tokens import Vocabulary, build_vocab, corpus_windows, parse_token, tokenize
from .trainer import TrainConfig, evaluate, load_checkpoint, split_songs, train

log = logging.getLogger("notegen")

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_DATA, EXIT_DIVERGED = 0, 2, 3, 4, 5

#: dataset facts quoted for comparison by ``inspect``; never asserted
DATASET_REFERENCE = {"songs": 818, "vocab_size": 3400, "distinct_notes": 804}


class UsageError(NotegenError):
    pass


# ---------------------------------------------------------------------------
# token cache: tokens.txt holds one token per line, songs separated by a
# blank line; vocab.txt holds one token per line (line number = id)


def write_cache(cache: Path, songs: list[list[str]], sources: list[str], meta: dict) -> Vocabulary:
    cache.mkdir(parents=True, exist_ok=True)
    vocab = build_vocab(songs)
    (cache / "tokens.txt").write_text(
        "\n".join("".join(t + "\n" for t in song) for song in songs), encoding="utf-8")
    vocab.save(cache / "vocab.txt")
    (cache / "songs.tsv").write_text(
        "".join(f"{i}\t{len(s)}\t{src}\n" for i, (s, src) in enumerate(zip(songs, sources))),
        encoding="utf-8")
    (cache / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return vocab


def read_cache(cache: Path) -> tuple[list[list[str]], Vocabulary]:
    for name in ("tokens.txt", "vocab.txt"):
        if not (cache / name).is_file():
            raise FileNotFoundError(f"{cache / name} not found; run `notegen ingest` first")
    songs, cur = [], []
    for line in (cache / "tokens.txt").read_text(encoding="utf-8").split("\n"):
        if line:
            cur.append(line)
        elif cur:
            songs.append(cur)
            cur = []
    if cur:
        songs.append(cur)
    return songs, Vocabulary.load(cache / "vocab.txt")


def _tokenize_file(path: str):
    try:
        notes = events_to_notes(read_midi(path))
    except DataError as exc:
        return path, None, f"{type(exc).__name__}: {exc}", 0
    return path, tokenize(notes), None, notes.dangling_note_ons


# ---------------------------------------------------------------------------
# commands


def cmd_ingest(args) -> int:
    manifest = Path(args.manifest)
    lines = [ln.strip() for ln in manifest.read_text().splitlines()]
    paths = [str((manifest.parent / ln) if not Path(ln).is_absolute() else Path(ln))
             for ln in lines if ln and not ln.startswith("#")]
    missing = [p for p in paths if not Path(p).is_file()]
    if missing:
        raise FileNotFoundError(f"{len(missing)} manifest entries not found, first: {missing[0]}")
    if args.threads > 1:
        with ProcessPoolExecutor(args.threads) as pool:
            results = list(pool.map(_tokenize_file, paths, chunksize=8))
    else:
        results = [_tokenize_file(p) for p in paths]

    songs, sources, skipped, dangling = [], [], [], 0
    for path, toks, err, d in results:
        if toks is None:
            log.warning("skipping %s: %s", path, err)
            skipped.append(path)
        elif not toks:
            log.warning("skipping %s: no notes", path)
            skipped.append(path)
        else:
            songs.append(toks)
            sources.append(path)
            dangling += d
    if not songs:
        raise DataError("no usable MIDI files in the manifest")
    meta = {"songs": len(songs), "tokens": sum(map(len, songs)), "skipped": skipped,
            "dangling_note_ons": dangling}
    vocab = write_cache(Path(args.cache), songs, sources, meta)
    log.info("ingested %d songs (%d skipped), vocabulary %d", len(songs), len(skipped), len(vocab))
    return EXIT_OK


def corpus_stats(songs, vocab) -> dict:
    pitched = [t for t in vocab.tokens if not t.startswith("R|")]
    single = {parse_token(t)[0][0] for t in pitched if len(parse_token(t)[0]) == 1}
    return {
        "songs": len(songs),
        "tokens": sum(map(len, songs)),
        "vocab_size": len(vocab),
        "note_tokens": sum(1 for t in pitched if "." not in t.split("|")[0]),
        "chord_tokens": sum(1 for t in pitched if "." in t.split("|")[0]),
        "rest_tokens": len(vocab) - len(pitched),
        "distinct_pitches": len(single),
        "reference": DATASET_REFERENCE,
    }


def cmd_inspect(args) -> int:
    songs, vocab = read_cache(Path(args.cache))
    stats = corpus_stats(songs, vocab)
    if args.json:
        print(json.dumps(stats, sort_keys=True))
    else:
        ref = stats.pop("reference")
        for k, v in stats.items():
            extra = f"   (reference dataset: {ref[k]})" if k in ref else ""
            print(f"{k:>16}: {v}{extra}")
    return EXIT_OK


def cmd_train(args) -> int:
    config = TrainConfig.from_file(args.config, variant=args.variant, seed=args.seed,
                                   threads=args.threads, epochs=args.epochs)
    songs, vocab = read_cache(Path(args.cache))
    ids = [vocab.encode(s) for s in songs]
    out = Path(args.out)
    res = train(config, ids, vocab, out,
                on_epoch=lambda e, s, m: log.info("epoch %d %s cce=%.4f rmse=%.4f mse=%.4f",
                                                  e, s, m.cce, m.rmse, m.mse))
    log.info("checkpoint written to %s", res.checkpoint)
    return EXIT_OK


def cmd_eval(args) -> int:
    params, vocab, manifest = load_checkpoint(args.checkpoint)
    songs, _ = read_cache(Path(args.cache))
    ids = [vocab.encode(s) for s in songs]
    holdout = (manifest.get("config") or {}).get("holdout", 0.0)
    train_songs, held = split_songs(ids, holdout)
    chosen = {"all": ids, "train": train_songs, "heldout": held}[args.split]
    windows = corpus_windows(chosen, params.dims.window)
    m = evaluate(params, windows)
    line = json.dumps({"epoch": manifest.get("epoch"), "split": args.split, **m.as_dict()})
    print(line)
    if args.out:
        with open(args.out, "a") as fh:
            fh.write(line + "\n")
    return EXIT_OK


def cmd_generate(args) -> int:
    params, vocab, _ = load_checkpoint(args.checkpoint)
    L = params.dims.window
    if args.seed_midi:
        seed_tokens = tokenize(events_to_notes(read_midi(args.seed_midi)))
        if len(seed_tokens) < L:
            raise DataError(f"seed MIDI yields {len(seed_tokens)} tokens; the model needs at "
                            f"least {L} (window length)")
        seed_tokens = seed_tokens[-L:]
        seed_ids = vocab.encode(seed_tokens)
    else:
        seed_ids = make_rng(args.seed).integers(0, len(vocab), L).tolist()
        seed_tokens = vocab.decode(seed_ids)
    cfg = SamplerConfig(seed_ids, args.steps, args.strategy, args.temperature, args.seed)
    tokens = generate(params, vocab, cfg)
    if args.append:
        tokens = seed_tokens + tokens
    emit_midi(tokens, args.out, token_path=args.tokens_out)
    log.info("wrote %d tokens to %s", len(tokens), args.out)
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="notegen", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="tokenize the MIDI files listed in a manifest")
    p.add_argument("--manifest", required=True, help="text file, one MIDI path per line")
    p.add_argument("--cache", required=True, help="output token cache directory")
    p.add_argument("--threads", type=int, default=1)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("inspect", help="summarize a token cache")
    p.add_argument("--cache", required=True)
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_inspect)

    p = sub.add_parser("train", help="train a model on a token cache")
    p.add_argument("--config", required=True, help="key=value training config")
    p.add_argument("--cache", required=True)
    p.add_argument("--out", required=True, help="directory for curves and checkpoints")
    p.add_argument("--variant", choices=["lstm", "lstm_attn", "bilstm_attn_lstm"])
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--threads", type=int, default=1)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a token cache")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--cache", required=True)
    p.add_argument("--split", choices=["all", "train", "heldout"], default="all")
    p.add_argument("--out", help="append the metrics JSON line to this file")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("generate", help="continue a seed and write MIDI")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True, help="output .mid path")
    p.add_argument("--seed-midi", help="MIDI file whose last window seeds generation "
                                       "(default: random seed window)")
    p.add_argument("--steps", type=int, default=100)
    p.add_argument("--strategy", choices=["argmax", "temperature"], default="argmax")
    p.add_argument("--temperature", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0, help="RNG seed")
    p.add_argument("--append", action="store_true", help="include the seed tokens in the output")
    p.add_argument("--tokens-out", help="also write generated token strings here")
    p.set_defaults(func=cmd_generate)
    return ap


def _check_paths(args):
    for attr in ("manifest", "config", "checkpoint", "seed_midi"):
        path = getattr(args, attr, None)
        if path and not Path(path).is_file():
            raise FileNotFoundError(f"--{attr.replace('_', '-')}: {path} does not exist")
    if args.command in ("inspect", "train", "eval") and not Path(args.cache).is_dir():
        raise FileNotFoundError(f"--cache: {args.cache} is not a directory")
    if getattr(args, "threads", 1) < 1:
        raise UsageError("--threads must be >= 1")
    if getattr(args, "steps", 1) < 1:
        raise UsageError("--steps must be >= 1")


def run(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        _check_paths(args)
        return args.func(args)
    except UsageError as exc:
        log.error("%s", exc)
        return EXIT_USAGE
    except OSError as exc:
        log.error("%s", exc)
        return EXIT_IO
    except Divergence as exc:
        log.error("training diverged: %s", exc)
        return EXIT_DIVERGED
    except DataError as exc:
        log.error("%s: %s", type(exc).__name__, exc)
        return EXIT_DATA


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
