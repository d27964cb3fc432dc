"""
Command-line entry point.

    lst gen-corpus    --utterances N --seed S --out corpus.ndjson [--mean-word-frames F] [--mean-sil-frames F] [--sil-prob P]
    lst gen-evalset   --config PATH --out evalset.ndjson
    lst train         --config PATH --mode lst|base|bpe --patching ... --budget ... --out DIR
    lst eval          --run DIR [--eval-set PATH]
    lst patch-inspect [--corpus PATH] [--mode M] [--p 4] [--stats] [--interleaved] [--merges PATH]
    lst plot-csv      CSV [CSV ...] --out plot.svg [--y COL ...]
    lst cluster-stats --run DIR
    lst stability     --config PATH --seeds 0 1 2 --variants lst:static base --out DIR

Exit codes: 0 success, 1 runtime error, 2 usage error, 3 invalid configuration.
"""

import argparse
import csv
import dataclasses
import json
import logging
import os
import shlex
import sys
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Sequence

from dotenv import load_dotenv

from lst import __version__
from lst import config as run_config
from lst.checkpoint import CheckpointStore
from lst.config import RunConfig
from lst.corpus import Utterance, corpus_stats, read_corpus, synth_corpus, synth_subword_map, synth_utterance, write_corpus
from lst.errors import ConfigError, LSTError
from lst.evaluator import (
    EvalReport,
    StabilityReport,
    build_eval_set,
    cluster_stats,
    evaluate,
    read_eval_set,
    stability_report,
    write_eval_set,
    write_report_csv,
)
from lst.interleave import InterleavedSequence, interleave
from lst.model import SpeechTextModel, build_model
from lst.patching import Patcher, patch_stats
from lst.plotting import plot_csv
from lst.tokenization import MergeTable, train_speech_bpe
from lst.trainer import Trainer, TrainResult
from lst.utils import substream
from lst.utils.enums import BudgetMode, ModelKind, Normalization, PatchingMode, PatchStrategy, SilenceMode

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_USAGE = 2
EXIT_CONFIG = 3

CONFIG_NAME = "config.json"
MERGES_NAME = "merges.json"
SUBWORDS_NAME = "subwords.json"
WEIGHTS_KEY = "weights"


############
# Manifest #
############
@dataclass(frozen=True)
class RunManifest:
    command: str
    argv: list[str]
    config_hash: str | None
    seed: int | None
    version: str
    created_at: str
    outputs: dict[str, str] = field(default_factory=dict)

    def write(self, directory: Path) -> Path:
        """Write once, before work starts; an existing manifest is never overwritten."""
        directory.mkdir(parents=True, exist_ok=True)
        stamp = self.created_at.replace(":", "").replace("-", "")
        path = directory / f"{self.command}-{stamp}.json"
        suffix = 1
        while path.exists():
            path = directory / f"{self.command}-{stamp}-{suffix}.json"
            suffix += 1
        with path.open("x", encoding="utf-8") as f:
            json.dump(dataclasses.asdict(self), f, indent=2)
        return path


def _write_manifest(
    command: str, argv: Sequence[str], directory: Path, outputs: dict[str, Any], cfg: RunConfig | None = None,
    seed: int | None = None,
) -> Path:
    config_hash = cfg.hash() if cfg is not None else None
    manifest = RunManifest(
        command=command,
        argv=[shlex.quote(a) for a in argv],
        config_hash=config_hash,
        seed=seed,
        version=f"{__version__}+{config_hash[:8]}" if config_hash else __version__,
        created_at=datetime.now(timezone.utc).strftime("%Y-%m-%dT%H:%M:%S.%fZ"),
        outputs={k: str(v) for k, v in outputs.items()},
    )
    return manifest.write(directory / "manifests")


###########
# Helpers #
###########
def _resolve_seed(flag: int | None, cfg: RunConfig | None) -> int:
    if flag is not None:
        return flag
    env = os.environ.get("LST_SEED")
    if env:
        try:
            return int(env)
        except ValueError as e:
            raise ConfigError(f"LST_SEED must be an integer, got {env!r}", "LST_SEED") from e
    return cfg.seed if cfg is not None else 0


def _load_config(path: str | None) -> RunConfig:
    if path is None:
        config = RunConfig()
        config.validate()
        return config
    return run_config.load(path)


def _parse_ratio(value: str) -> tuple[float, float]:
    try:
        speech, text = (float(v) for v in value.split(":"))
    except ValueError as e:
        raise argparse.ArgumentTypeError(f"expected SPEECH:TEXT, got {value!r}") from e
    return speech, text


def _apply_overrides(cfg: RunConfig, args: argparse.Namespace) -> RunConfig:
    """Command-line flags take precedence over the config file."""
    model = cfg.model
    train = cfg.train
    if getattr(args, "mode", None):
        model = dataclasses.replace(model, kind=ModelKind(args.mode))
    train_changes: dict[str, Any] = {}
    if getattr(args, "patching", None):
        train_changes["patching"] = PatchingMode.parse(args.patching)
    if getattr(args, "budget", None):
        train_changes["budget"] = BudgetMode(args.budget)
    if getattr(args, "ratio", None):
        train_changes["ratio"] = args.ratio
    if getattr(args, "steps", None):
        train_changes["total_steps"] = args.steps
        train_changes["warmup"] = min(train.warmup, max(args.steps // 10, 0))
    if train_changes:
        train = dataclasses.replace(train, **train_changes)
    cfg = cfg.replace(model=model, train=train)
    cfg.validate()
    return cfg


def _needs_subwords(cfg: RunConfig) -> bool:
    return cfg.train.patching == PatchingMode.BPE_ALIGNED or (
        cfg.train.patching in (PatchingMode.MIXED, PatchingMode.CURRICULUM)
        and cfg.train.curriculum_base == PatchStrategy.BPE_ALIGNED
    )


def _heldout(cfg: RunConfig, seed: int) -> list[Utterance]:
    return synth_corpus(cfg.eval.heldout_utterances, seed, cfg.corpus, stream=cfg.eval.stream)


def _load_run(run_dir: Path) -> tuple[RunConfig, SpeechTextModel]:
    cfg = run_config.load(run_dir / CONFIG_NAME)
    merge_table = MergeTable.load(run_dir / MERGES_NAME) if cfg.model.kind == ModelKind.BPE else None
    model = build_model(cfg.model, cfg.seed, merge_table)
    model.load_weights(CheckpointStore(root=run_dir, create=False), WEIGHTS_KEY)
    return cfg, model


def train_run(
    cfg: RunConfig,
    seed: int,
    out_dir: Path,
    *,
    corpus: list[Utterance] | None = None,
    resume: bool = False,
    handle_signals: bool = False,
) -> tuple[SpeechTextModel, TrainResult]:
    """Materialize corpus, tokenizers and eval set, then train one model into `out_dir`."""
    out_dir.mkdir(parents=True, exist_ok=True)
    cfg = cfg.replace(seed=seed)
    run_config.save(cfg, out_dir / CONFIG_NAME)
    utterances = corpus if corpus is not None else synth_corpus(cfg.n_utterances, seed, cfg.corpus)
    subword_map = None
    if _needs_subwords(cfg):
        subword_map = synth_subword_map(cfg.corpus)
        (out_dir / SUBWORDS_NAME).write_text(json.dumps(subword_map))
    merge_table = None
    if cfg.model.kind == ModelKind.BPE:
        merge_table = train_speech_bpe([u.speech_tokens for u in utterances], cfg.model.bpe_vocab, cfg.model.speech_vocab)
        merge_table.save(out_dir / MERGES_NAME)
    model = build_model(cfg.model, seed, merge_table)
    records = build_eval_set(_heldout(cfg, seed), seed, cfg.eval) if cfg.train.eval_every else []
    trainer = Trainer(
        model, cfg.train, utterances, out_dir,
        seed=seed, eval_records=records, eval_config=cfg.eval, subword_map=subword_map,
    )
    if resume:
        trainer.resume()
    if handle_signals:
        trainer.install_signal_handlers()
    return model, trainer.train()


def _report_dict(report: EvalReport) -> dict[str, Any]:
    return dataclasses.asdict(report) | {"metrics": report.metrics()}


def _emit(payload: Any) -> None:
    print(json.dumps(payload, indent=2, default=str))


###############
# Subcommands #
###############
def cmd_gen_corpus(args: argparse.Namespace, argv: Sequence[str]) -> int:
    cfg = _load_config(args.config)
    seed = _resolve_seed(args.seed, cfg)
    synth = {
        name: getattr(args, name)
        for name in ("mean_word_frames", "mean_sil_frames", "sil_prob")
        if getattr(args, name) is not None
    }
    if synth:
        cfg = cfg.replace(corpus=dataclasses.replace(cfg.corpus, **synth))
        cfg.validate()
    out = Path(args.out)
    n = args.utterances or cfg.n_utterances
    _write_manifest("gen-corpus", argv, out.parent, {"corpus": out}, cfg, seed)
    count = write_corpus(out, synth_corpus(n, seed, cfg.corpus, stream=args.stream))
    stats = corpus_stats(read_corpus(out))
    _emit({
        "utterances": count,
        "speech_tokens": stats.speech_tokens,
        "mean_word_frames": stats.mean_word_frames,
        "mean_silence_frames": stats.mean_silence_frames,
        "silence_runs": stats.silence_runs,
    })
    return EXIT_OK


def cmd_gen_evalset(args: argparse.Namespace, argv: Sequence[str]) -> int:
    cfg = _load_config(args.config)
    seed = _resolve_seed(args.seed, cfg)
    out = Path(args.out)
    _write_manifest("gen-evalset", argv, out.parent, {"evalset": out}, cfg, seed)
    out.parent.mkdir(parents=True, exist_ok=True)
    n = write_eval_set(out, build_eval_set(_heldout(cfg, seed), seed, cfg.eval))
    _emit({"records": n, "path": str(out)})
    return EXIT_OK


def cmd_train(args: argparse.Namespace, argv: Sequence[str]) -> int:
    cfg = _apply_overrides(_load_config(args.config), args)
    seed = _resolve_seed(args.seed, cfg)
    out = Path(args.out)
    _write_manifest("train", argv, out, {"run": out, "metrics": out / "metrics.csv"}, cfg, seed)
    corpus = read_corpus(args.corpus) if args.corpus else None
    model, result = train_run(cfg, seed, out, corpus=corpus, resume=args.resume, handle_signals=True)
    _emit({
        "status": result.status.value,
        "steps": result.steps,
        "last_loss": result.last_loss,
        "units": result.ledger.units,
        "savings": result.ledger.savings,
        "speech_savings": result.ledger.speech_savings,
        "speech_fraction": result.ledger.speech_fraction,
        "params": model.param_report(),
    })
    return EXIT_OK


def cmd_eval(args: argparse.Namespace, argv: Sequence[str]) -> int:
    run_dir = Path(args.run)
    cfg, model = _load_run(run_dir)
    seed = _resolve_seed(args.seed, cfg)
    out = Path(args.out) if args.out else run_dir / "eval_report.json"
    _write_manifest("eval", argv, run_dir, {"report": out, "csv": out.with_suffix(".csv")}, cfg, seed)
    records = read_eval_set(args.eval_set) if args.eval_set else build_eval_set(_heldout(cfg, seed), seed, cfg.eval)
    normalization = Normalization(args.normalization) if args.normalization else cfg.eval.normalization
    report = evaluate(model, records, normalization, workers=args.workers or cfg.eval.workers)
    out.write_text(json.dumps(_report_dict(report), indent=2))
    with out.with_suffix(".csv").open("w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["metric", "mean", "std", "n_seeds"])
        for name, value in report.metrics().items():
            writer.writerow([name, value, 0.0, 1])
    _emit(report.metrics() | {"n_records": report.n_records, "n_skipped": report.n_skipped})
    return EXIT_OK


def cmd_patch_inspect(args: argparse.Namespace, argv: Sequence[str]) -> int:
    cfg = _load_config(args.config)
    seed = _resolve_seed(args.seed, cfg)
    if args.corpus:
        utterances = read_corpus(args.corpus)
    else:
        utterances = synth_corpus(args.n, seed, cfg.corpus) if args.stats else [
            synth_utterance(seed, args.words, cfg.corpus, index=args.index)
        ]
    out_dir = Path(args.out) if args.out else Path.cwd()
    _write_manifest("patch-inspect", argv, out_dir, {}, cfg, seed)
    if args.stats:
        subword_map = synth_subword_map(cfg.corpus)
        modes = [PatchStrategy(args.mode)] if args.mode else None
        runs = [(len(u.speech_tokens), u.alignment, u.text_tokens) for u in utterances]
        payload: dict[str, Any] = {
            "utterances": len(utterances),
            "patching": patch_stats(runs, args.patch_size, subword_map, modes=modes),
        }
        if args.merges:
            table = MergeTable.load(args.merges)
            payload["bpe_compression_ratio"] = table.compression_ratio(u.speech_tokens for u in utterances)
        _emit(payload)
        return EXIT_OK
    utt = utterances[args.index if args.corpus else 0]
    patcher = Patcher(
        PatchStrategy(args.mode or PatchStrategy.ALIGNED.value),
        args.patch_size,
        SilenceMode(args.silence_mode),
        synth_subword_map(cfg.corpus),
    )
    segmentation = patcher(len(utt.speech_tokens), utt.alignment, utt.text_tokens)
    payload = {
        "words": utt.text_tokens,
        "frames": len(utt.speech_tokens),
        "spans": utt.alignment.to_list(),
        "patches": [[s.start, s.end, s.kind.value] for s in segmentation],
    }
    if args.interleaved:
        seq: InterleavedSequence = interleave(utt, substream(seed, "interleave", args.index))
        payload["interleaved"] = seq.render()
    if args.merges:
        payload["bpe_units"] = MergeTable.load(args.merges).encode(utt.speech_tokens)
    _emit(payload)
    return EXIT_OK


def cmd_plot_csv(args: argparse.Namespace, argv: Sequence[str]) -> int:
    out = Path(args.out)
    _write_manifest("plot-csv", argv, out.parent, {"plot": out})
    plot_csv(args.csv, out, x=args.x, ys=args.y, group_by=args.group_by, title=args.title)
    return EXIT_OK


def cmd_cluster_stats(args: argparse.Namespace, argv: Sequence[str]) -> int:
    run_dir = Path(args.run)
    cfg, model = _load_run(run_dir)
    seed = _resolve_seed(args.seed, cfg)
    out = run_dir / "cluster_stats.json"
    _write_manifest("cluster-stats", argv, run_dir, {"stats": out}, cfg, seed)
    utterances = synth_corpus(args.n, seed, cfg.corpus, stream=cfg.eval.stream)
    counts: dict[int, int] = {}
    for utt in utterances:
        for word in utt.text_tokens:
            counts[word] = counts.get(word, 0) + 1
    words = sorted(counts, key=lambda w: (-counts[w], w))[: args.words]
    stats = cluster_stats(model, utterances, words)
    payload = dataclasses.asdict(stats)
    out.write_text(json.dumps(payload, indent=2))
    _emit(payload)
    return EXIT_OK


def _parse_variant(value: str) -> tuple[ModelKind, PatchingMode]:
    kind, _, patching = value.partition(":")
    try:
        return ModelKind(kind), PatchingMode.parse(patching or "static")
    except ValueError as e:
        raise argparse.ArgumentTypeError(f"invalid variant {value!r}; expected KIND[:PATCHING]") from e


def cmd_stability(args: argparse.Namespace, argv: Sequence[str]) -> int:
    cfg = _apply_overrides(_load_config(args.config), args)
    out = Path(args.out)
    report_path = out / "report.csv"
    _write_manifest("stability", argv, out, {"report": report_path}, cfg, None)
    ratios = args.ratios or [cfg.train.ratio]

    def run_fn(seed: int) -> dict[str, float]:
        metrics = {}
        for kind, patching in args.variants:
            for ratio in ratios:
                name = f"{kind.value}-{patching.value}" + (f"-{ratio[0]:g}to{ratio[1]:g}" if len(ratios) > 1 else "")
                variant = cfg.replace(
                    model=dataclasses.replace(cfg.model, kind=kind),
                    train=dataclasses.replace(cfg.train, patching=patching, ratio=ratio),
                )
                variant.validate()
                model, result = train_run(variant, seed, out / name / f"seed-{seed}")
                report = evaluate(
                    model, build_eval_set(_heldout(variant, seed), seed, variant.eval),
                    variant.eval.normalization, workers=variant.eval.workers,
                )
                metrics.update({f"{name}/{k}": v for k, v in report.metrics().items()})
                metrics[f"{name}/units"] = float(result.ledger.units)
                metrics[f"{name}/savings"] = result.ledger.savings
        return metrics

    report: StabilityReport = stability_report(run_fn, args.seeds)
    write_report_csv(report_path, report)
    _emit({"report": str(report_path), "partial": report.partial, "failures": report.failures, "metrics": report.as_dict()})
    return EXIT_OK if not report.partial else EXIT_ERROR


##########
# Parser #
##########
def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lst", description="Latent speech-text transformer at desk scale")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--quiet", action="store_true", help="only log warnings and errors")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    def common(p: argparse.ArgumentParser, config: bool = True) -> None:
        if config:
            p.add_argument("--config", type=str, default=None, help="run config JSON")
        p.add_argument("--seed", type=int, default=None, help="root seed (overrides LST_SEED and the config)")

    p = sub.add_parser("gen-corpus", help="synthesize a paired speech/text corpus")
    common(p)
    p.add_argument("--out", required=True)
    p.add_argument(
        "--utterances", "--n", dest="utterances", type=int, default=None,
        help="number of utterances (default: config n_utterances)",
    )
    p.add_argument("--mean-word-frames", type=float, default=None, help="mean frames per word (default: config)")
    p.add_argument("--mean-sil-frames", type=float, default=None, help="mean frames per silence run (default: config)")
    p.add_argument("--sil-prob", type=float, default=None, help="probability of silence between words (default: config)")
    p.add_argument("--stream", default="utterance", help="substream label; use another label for held-out data")
    p.set_defaults(handler=cmd_gen_corpus)

    p = sub.add_parser("gen-evalset", help="build synthetic multiple-choice records from held-out utterances")
    common(p)
    p.add_argument("--out", required=True)
    p.set_defaults(handler=cmd_gen_evalset)

    def training_flags(p: argparse.ArgumentParser) -> None:
        p.add_argument("--patching", choices=[m.value for m in PatchingMode] + ["bpe"], default=None)
        p.add_argument("--budget", choices=[m.value for m in BudgetMode], default=None)
        p.add_argument("--ratio", type=_parse_ratio, default=None, help="speech:text token ratio, e.g. 1:2")
        p.add_argument("--steps", type=int, default=None, help="override total steps")

    p = sub.add_parser("train", help="train one model")
    common(p)
    p.add_argument("--mode", choices=[m.value for m in ModelKind], default=None)
    training_flags(p)
    p.add_argument("--corpus", default=None, help="training corpus (default: synthesize from the config)")
    p.add_argument("--resume", action="store_true", help="continue from OUT/checkpoints/latest")
    p.add_argument("--out", required=True)
    p.set_defaults(handler=cmd_train)

    p = sub.add_parser("eval", help="multiple-choice evaluation of a trained run")
    common(p, config=False)
    p.add_argument("--run", required=True, help="output directory of `train`")
    p.add_argument("--eval-set", default=None)
    p.add_argument("--normalization", choices=[m.value for m in Normalization], default=None)
    p.add_argument("--workers", type=int, default=None)
    p.add_argument("--out", default=None, help="report JSON path (default: RUN/eval_report.json)")
    p.set_defaults(handler=cmd_eval)

    p = sub.add_parser("patch-inspect", help="show segmentations, interleaving and patch statistics")
    common(p)
    p.add_argument("--corpus", default=None)
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--words", type=int, default=8, help="words of the synthesized utterance")
    p.add_argument(
        "--mode", "--strategy", dest="mode", choices=[s.value for s in PatchStrategy], default=None,
        help="segmentation to show (default: aligned); with --stats, report only this mode",
    )
    p.add_argument("--p", "--patch-size", dest="patch_size", type=int, default=4, help="static patch size")
    p.add_argument("--silence-mode", choices=[m.value for m in SilenceMode], default=SilenceMode.SEPARATE.value)
    p.add_argument("--stats", action="store_true", help="segment-count histograms and mean patch sizes per mode")
    p.add_argument("--n", type=int, default=500, help="utterances for --stats without --corpus")
    p.add_argument("--interleaved", action="store_true")
    p.add_argument("--merges", default=None, help="speech-BPE merge table")
    p.add_argument("--out", default=None, help="directory for the run manifest")
    p.set_defaults(handler=cmd_patch_inspect)

    p = sub.add_parser("plot-csv", help="render CSV columns against step to SVG")
    p.add_argument("csv", nargs="+")
    p.add_argument("--out", required=True)
    p.add_argument("--x", default="step")
    p.add_argument("--y", nargs="+", default=["loss"])
    p.add_argument("--group-by", default=None, help="one line per value of this column (e.g. modality)")
    p.add_argument("--title", default=None)
    p.set_defaults(handler=cmd_plot_csv)

    p = sub.add_parser("cluster-stats", help="patch-embedding cluster statistics of a trained LST run")
    common(p, config=False)
    p.add_argument("--run", required=True)
    p.add_argument("--n", type=int, default=200, help="held-out utterances to embed")
    p.add_argument("--words", type=int, default=20, help="most frequent words to include")
    p.set_defaults(handler=cmd_cluster_stats)

    p = sub.add_parser("stability", help="train and evaluate several variants over several seeds")
    p.add_argument("--config", default=None)
    p.add_argument("--seeds", type=int, nargs="+", required=True)
    p.add_argument("--variants", type=_parse_variant, nargs="+", default=[(ModelKind.LST, PatchingMode.STATIC)])
    p.add_argument("--ratios", type=_parse_ratio, nargs="+", default=None)
    training_flags(p)
    p.add_argument("--out", required=True)
    p.set_defaults(handler=cmd_stability)
    return parser


def _setup_logging(quiet: bool) -> None:
    logging.basicConfig(
        level=logging.WARNING if quiet else logging.INFO,
        format="[%(levelname)s] [%(filename)s] %(message)s",
        stream=sys.stderr,
        force=True,
    )


def _error(kind: str, message: str, field_path: str | None = None) -> None:
    payload = {"error": kind, "message": message}
    if field_path:
        payload["field"] = field_path
    print(json.dumps(payload), file=sys.stderr)


def dispatch(argv: Sequence[str]) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(list(argv))
    except SystemExit as e:
        return EXIT_USAGE if e.code not in (0, None) else EXIT_OK
    _setup_logging(args.quiet)
    try:
        return args.handler(args, list(argv))
    except ConfigError as e:
        _error("ConfigError", e.message, e.field)
        return EXIT_CONFIG
    except LSTError as e:
        _error(type(e).__name__, e.message)
        return EXIT_ERROR
    except Exception as e:
        logger.debug("Unhandled error", exc_info=True)
        _error(type(e).__name__, str(e))
        return EXIT_ERROR


def main() -> int:
    load_dotenv()
    return dispatch(sys.argv[1:])
