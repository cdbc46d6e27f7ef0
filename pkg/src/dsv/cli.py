"""Command-line entry point: ``dsv <command> [--config FILE] [--set section.key=value ...]``."""
import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import dump_config, load_config
from .errors import ContractViolation, DSVError

log = logging.getLogger("dsv")


# --------------------------------------------------------------------------
# run-directory layout


def _run_dir(cfg):
    d = cfg.run_dir()
    d.mkdir(parents=True, exist_ok=True)
    snap = d / "config.yaml"
    if not snap.exists():
        snap.write_text(dump_config(cfg))
    return d


def _write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _manifest(cfg):
    from .features import CorpusManifest

    path = cfg.run_dir() / "corpus" / "manifest.json"
    if not path.exists():
        raise FileNotFoundError(f"no corpus at {path}; run `dsv prepare` first")
    return CorpusManifest.load(path)


def _checkpoint(cfg, given):
    path = Path(given) if given else cfg.run_dir() / "train" / "checkpoints" / "best.ckpt"
    if not path.exists():
        raise FileNotFoundError(f"checkpoint {path} does not exist")
    return path


# --------------------------------------------------------------------------
# commands


def cmd_prepare(cfg, args):
    from .features import StftConfig, make_synthetic_corpus, prepare_audio_corpus, write_corpus

    d = cfg.data
    out = _run_dir(cfg) / "corpus"
    if (out / "manifest.json").exists() and not args.force:
        raise ContractViolation(f"corpus already prepared at {out}; pass --force to rebuild")
    audio_dir = args.audio_dir or (None if args.synthetic else d.audio_dir)
    stft = None
    if audio_dir is not None and not args.synthetic:
        stft = StftConfig(d.sample_rate, d.window_ms, d.hop_ms, None, d.n_bins)
        records = prepare_audio_corpus(audio_dir, stft, d.test_fraction, d.dev_per_speaker, cfg.seed)
    elif args.synthetic or d.synthetic:
        records = make_synthetic_corpus(
            n_speakers=d.n_speakers, sequences_per_speaker=d.sequences_per_speaker,
            frames_per_sequence=d.frames_per_sequence, F=d.feature_dim, n_content_classes=d.n_content_classes,
            seed=cfg.seed, gamma_spk=d.gamma_spk, sigma_noise=d.sigma_noise, block_len=d.block_len,
            n_test_speakers=d.n_test_speakers, dev_per_speaker=d.dev_per_speaker)
    else:
        raise ContractViolation("no data source: pass --synthetic or set data.audio_dir")
    manifest = write_corpus(records, out, L=cfg.model.segment_len, shift=d.segment_shift, m=cfg.model.m,
                            stft=stft, seed=cfg.seed)
    _write_json(out / "provenance.json", {**cfg.provenance(), "corpus_hash": manifest.corpus_hash()})
    print(out / "manifest.json")


def cmd_train(cfg, args):
    from .training import train

    manifest = _manifest(cfg)
    out = _run_dir(cfg) / "train"
    latest = out / "checkpoints" / "latest.ckpt"
    if latest.exists() and not (args.resume or args.force):
        raise ContractViolation(f"{out} already holds a training run; pass --resume to continue or --force")
    state = train(manifest, cfg.model_config(manifest.features["F"]), cfg.train_options(out), resume=args.resume)
    _write_json(out / "provenance.json", {**cfg.provenance(), "corpus_hash": manifest.corpus_hash(),
                                          "epochs": state.epoch, "best_epoch": state.best_epoch,
                                          "best_dev": state.best_dev, "stopped_early": state.stopped_early})
    print(out / "checkpoints" / "best.ckpt")


def cmd_extract(cfg, args):
    from .conversion import extract_segmental, extract_sequential, load_model

    manifest = _manifest(cfg)
    ckpt = _checkpoint(cfg, args.checkpoint)
    lm = load_model(ckpt, shift=manifest.segmentation["shift"])
    records = manifest.load_records(splits={args.split} if args.split != "all" else None)
    ids, spk, idx, vecs = [], [], [], []
    for r in records:
        if args.level == "sequential":
            f = extract_sequential(r, lm)
            ids.append(r.sequence_id), spk.append(r.speaker_id), idx.append(-1), vecs.append(f.vector)
        else:
            for f in extract_segmental(r, lm):
                ids.append(r.sequence_id), spk.append(r.speaker_id), idx.append(f.segment_index)
                vecs.append(f.vector)
    out = _run_dir(cfg) / "features"
    out.mkdir(exist_ok=True)
    path = out / f"{args.level}_{args.split}.npz"
    meta = {**cfg.provenance(), "level": args.level, "split": args.split, "checkpoint": str(ckpt)}
    np.savez(path, sequence_id=np.array(ids), speaker_id=np.array(spk), segment_index=np.array(idx),
             vectors=np.stack(vecs) if vecs else np.zeros((0, 0)), meta=json.dumps(meta, sort_keys=True))
    print(path)


def _read_pairs(path):
    pairs = []
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 2:
            raise ContractViolation(f"{path}:{n}: expected 'source_id target_id'")
        pairs.append(tuple(parts))
    if not pairs:
        raise ContractViolation(f"{path}: no conversion pairs")
    return pairs


def _grid_pairs(records):
    first = {}
    for r in sorted(records, key=lambda r: r.sequence_id):
        first.setdefault(r.speaker_id, r.sequence_id)
    return [(first[a], first[b]) for a in sorted(first) for b in sorted(first) if a != b]


def cmd_convert(cfg, args):
    from .conversion import convert_voice, griffin_lim, load_model, write_wav
    from .features import StftConfig, write_features

    manifest = _manifest(cfg)
    lm = load_model(_checkpoint(cfg, args.checkpoint), shift=manifest.segmentation["shift"])
    records = {r.sequence_id: r for r in manifest.load_records()}
    if args.pairs:
        pairs = _read_pairs(args.pairs)
    else:
        pairs = _grid_pairs([r for r in records.values() if r.split == cfg.conversion.split])
    stft = manifest.features.get("stft")
    if args.wav and stft is None:
        raise ContractViolation("--wav needs a corpus prepared from audio (no STFT settings in manifest)")
    out = _run_dir(cfg) / "converted"
    out.mkdir(exist_ok=True)
    index = []
    for src, tgt in pairs:
        for sid in (src, tgt):
            if sid not in records:
                raise ContractViolation(f"unknown sequence id {sid!r} in conversion pairs")
        spec = convert_voice(records[src], records[tgt], lm)
        name = f"{src}__to__{tgt}"
        write_features(out / f"{name}.feat", spec.astype(np.float32))
        entry = {"source": src, "target": tgt, "features": f"{name}.feat", "frames": int(spec.shape[0])}
        if args.wav:
            sc = StftConfig(**stft)
            wave = griffin_lim(spec, sc, cfg.conversion.griffin_lim_iterations, seed=cfg.seed)
            write_wav(out / f"{name}.wav", wave, sc.sample_rate)
            entry["wav"] = f"{name}.wav"
        index.append(entry)
    _write_json(out / "index.json", {**cfg.provenance(), "pairs": index})
    print(out / "index.json")


def cmd_evaluate(cfg, args):
    from .evaluation import BenchmarkOptions, disentanglement_benchmark

    manifest = _manifest(cfg)
    ckpt = _checkpoint(cfg, args.checkpoint)
    e = cfg.evaluation
    options = BenchmarkOptions(k_speaker=e.k_speaker, k_content=e.k_content, probe_kinds=tuple(e.probe_kinds),
                               split=e.split, max_probe_epochs=e.max_probe_epochs)
    report = disentanglement_benchmark(manifest, ckpt, seed=cfg.seed, options=options, run_config=cfg.snapshot())
    log_path = cfg.run_dir() / "train" / "train_log.jsonl"
    if not args.checkpoint and log_path.exists():
        report["training_log"] = [json.loads(line) for line in log_path.read_text().splitlines()]
    out = _run_dir(cfg)
    path = out / "report.json"
    _write_json(path, report)
    if args.plots:
        from .reporting import write_plots

        write_plots(report, out / "plots")
    print(path)


def cmd_report(cfg, args):
    from .reporting import format_report

    reports = [(Path(p).parent.name, json.loads(Path(p).read_text())) for p in args.reports]
    print(format_report(reports))


# --------------------------------------------------------------------------
# argument parsing


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", "-c", help="YAML run-config file")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override one config value (repeatable)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="dsv", description="Disentangled sequence representations.")
    parser.add_argument("--version", action="version", version=f"dsv {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", parents=[common], help="build a corpus manifest and feature files")
    src = p.add_mutually_exclusive_group()
    src.add_argument("--synthetic", action="store_true", help="generate the synthetic corpus")
    src.add_argument("--audio-dir", help="directory of <speaker>/<utterance>.wav files")
    p.add_argument("--force", action="store_true", help="rebuild an existing corpus")
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("train", parents=[common], help="train a model on the prepared corpus")
    p.add_argument("--resume", action="store_true", help="continue from the latest checkpoint")
    p.add_argument("--force", action="store_true", help="discard an existing run and start over")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("extract", parents=[common], help="export segmental or sequential features")
    p.add_argument("--level", choices=("segmental", "sequential"), required=True)
    p.add_argument("--split", default="test", choices=("train", "dev", "test", "all"))
    p.add_argument("--checkpoint")
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("convert", parents=[common], help="voice conversion by s-vector swap")
    what = p.add_mutually_exclusive_group(required=True)
    what.add_argument("--pairs", help="text file with one 'source_id target_id' per line")
    what.add_argument("--grid", action="store_true", help="every ordered speaker pair of the conversion split")
    p.add_argument("--wav", action="store_true", help="also write Griffin-Lim waveforms")
    p.add_argument("--checkpoint")
    p.set_defaults(func=cmd_convert)

    p = sub.add_parser("evaluate", parents=[common], help="run the benchmark and write report.json")
    p.add_argument("--checkpoint")
    p.add_argument("--plots", action="store_true", help="write SVG figures derived from the report")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("report", parents=[common], help="print report.json files as tables")
    p.add_argument("reports", nargs="+")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, args.overrides)
        args.func(cfg, args)
    except (DSVError, FileNotFoundError, ValueError, KeyError) as exc:
        msg = str(exc.args[0]) if isinstance(exc, KeyError) and exc.args else str(exc)
        print(f"error: {type(exc).__name__}: {' '.join(msg.split())}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
