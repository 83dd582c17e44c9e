"""
Command-line front door: corpus generation, clustering, training, the
two-condition evaluation and an interactive dialogue REPL.

Usage: python -m app.cli [--config FILE] [--seed N] [--out DIR] <command> ...
"""
import argparse
import json
import sys
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

import structlog

from app.core.config import Settings, load_settings
from app.core.exceptions import ConfigError, CtxLMError
from app.core.logging import configure_logging
from app.services.corpus_service import (
    build_vocabulary,
    corpus_distribution,
    corpus_service,
    read_corpus,
    write_corpus,
)
from app.services.dialog_service import SystemAct, DialogueSession, TextChannel, dialog_service, run_session
from app.services.evaluation_service import evaluation_service, report_frame, write_report
from app.services.registry_service import MANIFEST_NAME, registry_service, save_pool
from app.services.wordclass_service import exchange_cluster, write_class_map

logger = structlog.get_logger(__name__)


def write_manifest(out: Path, command: str, settings: Settings, files: Sequence[Path]) -> Path:
    """manifest.json listing the files a command produced, relative to --out."""
    path = out / "manifest.json"
    payload = {
        "command": command,
        "seed": settings.seed,
        "files": sorted(str(Path(f).relative_to(out)) for f in files),
    }
    path.write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")
    return path


def cmd_gen_corpus(args, settings: Settings, out: Path) -> List[Path]:
    split = corpus_service.generate_split(settings)
    files = [out / "corpus.tsv", out / "train.tsv", out / "test.tsv"]
    write_corpus(files[0], sorted(split.train + split.test, key=lambda u: u.id))
    write_corpus(files[1], split.train)
    write_corpus(files[2], split.test)
    print(f"train\t{len(split.train)}\ntest\t{len(split.test)}")
    return files


def cmd_corpus_stats(args, settings: Settings, out: Path) -> List[Path]:
    corpus = read_corpus(args.input) if args.input else corpus_service.generate(settings)
    frame = corpus_distribution(corpus)
    path = out / "corpus_stats.tsv"
    frame.to_csv(path, sep="\t", index=False, lineterminator="\n")
    sys.stdout.write(frame.to_csv(sep="\t", index=False, lineterminator="\n"))
    return [path]


def cmd_cluster_words(args, settings: Settings, out: Path) -> List[Path]:
    train = read_corpus(args.input) if args.input else list(corpus_service.generate_split(settings).train)
    vocab = build_vocabulary(train, settings.min_count)
    k = args.classes if args.classes is not None else settings.num_word_classes
    result = exchange_cluster(train, k, settings.cluster_max_sweeps, seed=settings.seed, vocab=vocab)
    path = out / "classes.txt"
    write_class_map(path, result.classmap, vocab)
    print(f"classes\t{k}\nvocabulary\t{len(vocab.clusterable_ids)}\n"
          f"sweeps\t{result.sweeps}\nlog_likelihood\t{result.log_likelihood:.4f}")
    return [path]


def cmd_train(args, settings: Settings, out: Path) -> List[Path]:
    bundle = evaluation_service.build_models(settings)
    models_dir = out / "models"
    manifest = save_pool(bundle.pool, models_dir)
    classes = out / "classes.txt"
    write_class_map(classes, bundle.classmap, bundle.vocab)
    files = [manifest, classes] + sorted(models_dir.glob("*.lm"))
    for lm_class, routed in bundle.pool.routes.items():
        print(f"{lm_class.value}\t{routed.value}")
    return files


def _evaluate(args, settings: Settings, out: Path, stem: str, metrics: Sequence[str]) -> List[Path]:
    runs = args.runs if args.runs is not None else 1
    seeds = list(range(settings.seed, settings.seed + runs))
    report = evaluation_service.compare(settings, seeds, control=args.control, metrics=metrics)
    files = write_report(report, out, stem)
    sys.stdout.write(report_frame(report).to_csv(sep="\t", index=False, lineterminator="\n"))
    return files


def cmd_compare(args, settings: Settings, out: Path) -> List[Path]:
    if args.runs is None:
        args.runs = settings.runs
    return _evaluate(args, settings, out, "report", ("PP", "WA", "SU"))


def cmd_eval_pp(args, settings, out):
    return _evaluate(args, settings, out, "eval_pp", ("PP",))


def cmd_eval_rec(args, settings, out):
    return _evaluate(args, settings, out, "eval_rec", ("WA",))


def cmd_eval_su(args, settings, out):
    return _evaluate(args, settings, out, "eval_su", ("SU",))


def cmd_repl(args, settings: Settings, out: Path) -> List[Path]:
    models_dir = Path(args.models) if args.models else settings.models_dir
    if (models_dir / MANIFEST_NAME).exists():
        pool = registry_service.load(settings, models_dir)
    else:
        logger.info("training_models_in_memory", models_dir=str(models_dir))
        pool = evaluation_service.build_models(settings).pool
    session = dialog_service.session(pool, settings)

    def show(act: SystemAct, s: DialogueSession) -> None:
        print(f"S: {act.prompt}  [{act.label} | LM: {s.registry.active.value}]", flush=True)

    def read_line() -> Optional[str]:
        line = sys.stdin.readline()
        return line.rstrip("\n") if line else None

    run_session(session, TextChannel(read_line), on_act=show)
    path = out / "transcript.tsv"
    path.write_text("\n".join(session.transcript_lines()) + "\n", encoding="utf-8")
    return [path]


COMMANDS: Dict[str, Callable] = {
    "gen-corpus": cmd_gen_corpus,
    "corpus-stats": cmd_corpus_stats,
    "cluster-words": cmd_cluster_words,
    "train": cmd_train,
    "eval-pp": cmd_eval_pp,
    "eval-rec": cmd_eval_rec,
    "eval-su": cmd_eval_su,
    "compare": cmd_compare,
    "repl": cmd_repl,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ctxlm",
        description="Context-dependent word-class language models for spoken dialogue",
        formatter_class=argparse.ArgumentDefaultsHelpFormatter,
    )
    parser.add_argument("--config", type=str, default=None, help="JSON config file")
    parser.add_argument("--seed", type=int, default=None, help="Master seed, overrides the config")
    parser.add_argument("--out", type=str, default="out", help="Output directory")
    parser.add_argument("--log-level", type=str, default=None, help="Logging level")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("gen-corpus", help="Generate and split the synthetic corpus")
    stats = sub.add_parser("corpus-stats", help="Utterances and words per LM class")
    stats.add_argument("--input", type=str, default=None, help="Corpus file instead of a generated corpus")
    cluster = sub.add_parser("cluster-words", help="Exchange-algorithm word clustering")
    cluster.add_argument("--classes", type=int, default=None, help="Number of word classes")
    cluster.add_argument("--input", type=str, default=None, help="Training corpus file")
    sub.add_parser("train", help="Train the fallback and every specific LM pair")

    for name, help_text in (("eval-pp", "Perplexity comparison"),
                            ("eval-rec", "Word accuracy comparison"),
                            ("eval-su", "Sentence understanding comparison"),
                            ("compare", "Full comparison report")):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--runs", type=int, default=None, help="Number of consecutive seeds")
        p.add_argument("--control", action="store_true", help="Point both conditions at the fallback LM")
        p.add_argument("--lm-weight", type=float, default=None, help="Rescoring LM weight")

    repl = sub.add_parser("repl", help="Interactive dialogue over typed text")
    repl.add_argument("--models", type=str, default=None, help="Directory with manifest.tsv")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        settings = load_settings(args.config, seed=args.seed, log_level=args.log_level,
                                 lm_weight=getattr(args, "lm_weight", None))
        configure_logging(settings.log_level, settings.log_json)
        runs = getattr(args, "runs", None)
        if runs is not None and runs < 1:
            raise ConfigError("invalid configuration fields: runs")
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        files = COMMANDS[args.command](args, settings, out)
        write_manifest(out, args.command, settings, files)
    except CtxLMError as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 2 if isinstance(e, ConfigError) else 1
    except OSError as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
