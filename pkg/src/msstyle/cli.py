"""Command-line entry point: ``msstyle prepare | train | synthesize | evaluate``.

Every command works inside a work directory::

    <work>/config.json          resolved configuration (rewritten by every command)
    <work>/corpus/              manifest, alignments and audio written by ``prepare --toy``
    <work>/cache/               feature blobs (override with $MSSTYLE_CACHE_DIR)
    <work>/train/               stage checkpoints, last.ckpt and metrics.jsonl
    <work>/synth/               synthesised mels (and optional placeholder audio)
    <work>/eval/                report.json and report.txt

Exit codes: 0 success, 2 usage or configuration error, 3 missing input,
4 invariant violation, 5 numeric failure, 6 partial evaluation report,
7 external dependency failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
import torch
from scipy.io import wavfile

from msstyle.batch import Featurizer, FeatureStats, PhonemeInventory, WindowDataset
from msstyle.config import PRESETS, RunConfig
from msstyle.corpus.io import (
    ManifestRecord,
    load_corpus,
    split_by_chapters,
    write_alignment,
    write_feature,
    write_manifest,
    write_utterance_cache,
)
from msstyle.corpus.toy import ToyCorpusSpec, generate_toy_corpus
from msstyle.errors import (
    ContractError,
    ExternalDependencyError,
    InvalidInputError,
    InvariantError,
    MissingInputError,
    NumericFailure,
)
from msstyle.evaluation import evaluate_corpus
from msstyle.model import build_model
from msstyle.training import Trainer, model_from_checkpoint, read_checkpoint

log = logging.getLogger("msstyle")

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_MISSING = 3
EXIT_INVARIANT = 4
EXIT_NUMERIC = 5
EXIT_PARTIAL = 6
EXIT_EXTERNAL = 7

CACHE_ENV = "MSSTYLE_CACHE_DIR"


class PartialResult(Exception):
    """A command finished but some items failed; carries the exit code to use."""

    def __init__(self, message, code):
        super().__init__(message)
        self.code = code


# ------------------------------------------------------------------ config
def resolve_config(args) -> RunConfig:
    work = Path(args.work_dir)
    snapshot = work / "config.json"
    if args.config:
        cfg = RunConfig.load(args.config)
    elif snapshot.exists():
        cfg = RunConfig.load(snapshot)
    else:
        cfg = RunConfig()
    cfg.work_dir = str(work)
    if args.preset and args.preset != cfg.preset:
        cfg.preset, cfg.model, cfg.schedule = args.preset, {}, {}
    if args.seed is not None:
        cfg.seed = args.seed
        cfg.schedule.pop("seed", None)
    if getattr(args, "toy", None) is not None:
        cfg.toy_utterances = args.toy
    if getattr(args, "manifest", None):
        cfg.manifest = args.manifest
    cfg.__post_init__()
    work.mkdir(parents=True, exist_ok=True)
    snapshot.write_text(json.dumps(cfg.resolved(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return cfg


def cache_dir(cfg: RunConfig) -> Path:
    return Path(os.environ.get(CACHE_ENV) or Path(cfg.work_dir) / "cache")


def manifest_path(cfg: RunConfig) -> Path:
    return Path(cfg.manifest) if cfg.manifest else Path(cfg.work_dir) / "corpus" / "manifest.jsonl"


def load_prepared(cfg: RunConfig):
    """Load the prepared corpus and split it into (train, eval) chapters."""
    report = load_corpus(manifest_path(cfg), cfg.mel_config(), cache_dir(cfg))
    if report.failures:
        for uid, err in report.failures.items():
            log.error("skipping %s: %s", uid, err)
    if not report.utterances:
        raise InvalidInputError("no loadable utterances in the corpus")
    train, held_out = split_by_chapters(report.utterances, cfg.chapter_size, cfg.eval_chapters)
    return report.utterances, train, held_out


def select_split(cfg, name: str):
    full, train, held_out = load_prepared(cfg)
    split = {"train": train, "eval": held_out, "all": full}[name]
    if not split:
        raise InvalidInputError(f"split {name!r} is empty")
    return split


# ---------------------------------------------------------------- commands
def cmd_prepare(args) -> int:
    cfg = resolve_config(args)
    cache = cache_dir(cfg)
    cache.mkdir(parents=True, exist_ok=True)
    if cfg.toy_utterances:
        corpus_dir = Path(cfg.work_dir) / "corpus"
        (corpus_dir / "align").mkdir(parents=True, exist_ok=True)
        (corpus_dir / "wav").mkdir(parents=True, exist_ok=True)
        spec = ToyCorpusSpec(chapter_size=cfg.chapter_size, mel_config=cfg.mel_config())
        utts, waves = generate_toy_corpus(cfg.seed, cfg.toy_utterances, spec, with_audio=True)
        records = []
        for i, (u, w) in enumerate(zip(utts, waves)):
            write_alignment(corpus_dir / "align" / f"{u.id}.json", u.phonemes, u.alignment)
            wavfile.write(corpus_dir / "wav" / f"{u.id}.wav", spec.mel_config.sample_rate, w)
            records.append(ManifestRecord(u.id, u.text, f"wav/{u.id}.wav", f"align/{u.id}.json", i))
        write_manifest(corpus_dir / "manifest.jsonl", records)
        cfg.manifest = None
        failures = {}
    else:
        if not cfg.manifest:
            raise ContractError("prepare needs a manifest (config 'manifest' or --manifest) or --toy N")
        report = load_corpus(cfg.manifest, cfg.mel_config())
        utts, failures = report.utterances, report.failures
    for u in utts:
        write_utterance_cache(cache, u)
    frames = sum(u.mel.n_frames for u in utts)
    print(f"prepared {len(utts)} utterances, {frames} frames -> {cache}")
    if failures:
        for uid, err in failures.items():
            print(f"FAILED {uid}: {err}", file=sys.stderr)
        raise PartialResult(f"{len(failures)} utterance(s) failed validation", EXIT_INVARIANT)
    return EXIT_OK


def _train_dir(cfg) -> Path:
    return Path(cfg.work_dir) / "train"


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    stage = args.stage
    full, train, _ = load_prepared(cfg)
    schedule = cfg.training_schedule()
    model_cfg = cfg.model_config()
    tdir = _train_dir(cfg)
    featurizer = None

    def dataset(model):
        nonlocal featurizer
        featurizer = Featurizer(model.config, model.inventory, model.stats)
        return WindowDataset(train, featurizer)

    kwargs = dict(work_dir=tdir, checkpoint_every=args.checkpoint_every)
    last = tdir / "last.ckpt"
    if args.resume:
        if not last.exists():
            raise MissingInputError(last, "checkpoint to resume from")
        saved = read_checkpoint(last).meta["trainer"]
        if saved["stage"] != stage:
            raise ContractError(f"{last} is at stage {saved['stage']}, not stage {stage}")
        model = model_from_checkpoint(last)
        trainer = Trainer.resume(last, dataset(model), schedule, **kwargs)
    elif stage == 1:
        inventory = PhonemeInventory.from_corpus(full)
        stats = FeatureStats.from_corpus(train)
        model = build_model(model_cfg, inventory, stats, seed=cfg.seed)
        (tdir / "metrics.jsonl").unlink(missing_ok=True)
        trainer = Trainer(model, dataset(model), schedule, **kwargs)
    else:
        prev = tdir / f"stage{stage - 1}.ckpt"
        if not prev.exists():
            raise MissingInputError(prev, f"stage-{stage - 1} checkpoint")
        model = model_from_checkpoint(prev)
        trainer = Trainer.resume(prev, dataset(model), schedule, **kwargs)
    trainer.run(stages=(stage,), max_steps=args.max_steps)
    st = trainer.state
    if st.stage == stage:
        print(f"stopped at step {st.step} (stage {stage}); resume with --resume")
    else:
        print(f"stage {stage} finished at step {st.step} -> {tdir / f'stage{stage}.ckpt'}")
    return EXIT_OK


def _checkpoint_arg(cfg, args) -> Path:
    path = Path(args.checkpoint) if args.checkpoint else _train_dir(cfg) / "stage3.ckpt"
    if not path.exists():
        raise MissingInputError(path, "checkpoint")
    return path


def cmd_synthesize(args) -> int:
    cfg = resolve_config(args)
    ckpt = _checkpoint_arg(cfg, args)
    model = model_from_checkpoint(ckpt).eval()
    full, _, _ = load_prepared(cfg)
    by_id = {u.id: i for i, u in enumerate(full)}
    ids = args.ids or [u.id for u in full]
    for uid in ids:
        if uid not in by_id:
            raise MissingInputError(uid, "utterance id in the manifest")
    dataset = WindowDataset(full, Featurizer(model.config, model.inventory, model.stats))
    out_dir = Path(cfg.work_dir) / "synth"
    out_dir.mkdir(parents=True, exist_ok=True)
    for uid in ids:
        with torch.no_grad():
            out = model.synthesize(dataset.batch([by_id[uid]]), "predictor")
        mel = out.mel[0, : int(out.frame_len[0])].numpy()
        write_feature(out_dir / f"{uid}.mel.bin", mel)
        if args.waveform:
            from msstyle.vocoder import griffin_lim

            mc = cfg.mel_config()
            wavfile.write(out_dir / f"{uid}.wav", mc.sample_rate, griffin_lim(mel, mc))
    print(f"synthesised {len(ids)} utterance(s) -> {out_dir}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    cfg = resolve_config(args)
    split = select_split(cfg, args.split)
    if args.ground_truth:
        report = evaluate_corpus(None, split, mode="ground_truth")
    else:
        model = model_from_checkpoint(_checkpoint_arg(cfg, args))
        report = evaluate_corpus(model, split, mode="predicted")
    out_dir = Path(cfg.work_dir) / "eval"
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "report.json").write_text(report.to_json() + "\n", encoding="utf-8")
    (out_dir / "report.txt").write_text(report.table() + "\n", encoding="utf-8")
    print(report.table())
    if report.partial:
        raise PartialResult(f"{len(report.failures)} utterance(s) failed", EXIT_PARTIAL)
    return EXIT_OK


# ------------------------------------------------------------------ parser
def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="run configuration JSON (see README for the schema)")
    common.add_argument("--preset", choices=sorted(PRESETS), help="model/schedule size preset")
    common.add_argument("--seed", type=int, help="root seed for every random stream")
    common.add_argument("--work-dir", default="work", help="run directory (default: ./work)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="msstyle", description="Multi-scale style TTS toolkit.")
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("prepare", parents=[common], help="extract and cache features")
    sp.add_argument("--toy", type=int, metavar="N", help="generate an N-utterance synthetic corpus")
    sp.add_argument("--manifest", help="corpus manifest (JSON lines)")

    sp = sub.add_parser("train", parents=[common], help="run one training stage")
    sp.add_argument("--stage", type=int, choices=(1, 2, 3), required=True)
    sp.add_argument("--resume", action="store_true", help="continue from <work>/train/last.ckpt")
    sp.add_argument("--checkpoint-every", type=int, default=100, metavar="N")
    sp.add_argument("--max-steps", type=int, metavar="N", help="stop once the global step reaches N")

    sp = sub.add_parser("synthesize", parents=[common], help="synthesise mels with predicted styles")
    sp.add_argument("--checkpoint", help="default: <work>/train/stage3.ckpt")
    sp.add_argument("--ids", nargs="+", help="utterance ids (default: all)")
    sp.add_argument("--waveform", action="store_true", help="also write Griffin-Lim placeholder audio")

    sp = sub.add_parser("evaluate", parents=[common], help="objective metrics on a split")
    sp.add_argument("--checkpoint", help="default: <work>/train/stage3.ckpt")
    sp.add_argument("--split", choices=("eval", "train", "all"), default="eval")
    sp.add_argument("--ground-truth", action="store_true", help="score references against themselves")
    return p


COMMANDS = {"prepare": cmd_prepare, "train": cmd_train, "synthesize": cmd_synthesize, "evaluate": cmd_evaluate}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_USAGE if e.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except PartialResult as e:
        print(f"error: {e}", file=sys.stderr)
        return e.code
    except MissingInputError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_MISSING
    except NumericFailure as e:
        print(f"error: {e}\n{json.dumps(e.diagnostics, indent=2)}", file=sys.stderr)
        return EXIT_NUMERIC
    except ExternalDependencyError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_EXTERNAL
    except (InvariantError, InvalidInputError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INVARIANT
    except ContractError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
