"""``mnmt`` command line: one subcommand per pipeline stage plus ``pipeline``.

Exit status: 0 on success, 2 when an input is missing or a flag is invalid,
1 on any other failure.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

from .assemblies import ConfigError
from .bias_eval import GenderDetector, bleu, lexicon_aligner, score_bias
from .toy_corpus import ChallengeParseError, ChallengeSet, load_grammar, read_lines
from . import experiment as ex

log = logging.getLogger("mnmt")

STAGES = ("gen-corpus", "learn-bpe", "train", "translate", "bleu", "eval-bias", "probe", "analyze-attn", "report", "pipeline")


def _setup_logging() -> None:
    level = os.environ.get("MNMT_LOG", "WARNING").upper()
    if level.isdigit():
        level = int(level)
    logging.basicConfig(level=level, format="%(asctime)s %(name)s %(levelname)s %(message)s", stream=sys.stderr)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--workspace", "-w", type=Path, default=Path("workspace"), help="artifact directory (default: ./workspace)")
    common.add_argument("--manifest", type=Path, help="experiment manifest (JSON); default: <workspace>/manifest.json or the preset")
    common.add_argument("--seed", type=int, help="override the manifest seed")
    common.add_argument("--preset", choices=("desk", "paper"), help="start from this preset when no manifest is given")

    p = argparse.ArgumentParser(prog="mnmt", description="Gender bias in multilingual translation architectures, at desk scale.")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-corpus", parents=[common], help="toy parallel corpora and the challenge set")
    sub.add_parser("learn-bpe", parents=[common], help="BPE models and vocabularies per system")
    t = sub.add_parser("train", parents=[common], help="train systems")
    t.add_argument("--system", choices=ex.SYSTEM_KINDS, help="only this kind of system")
    t.add_argument("--jobs", type=int, default=ex.default_jobs(), help="parallel training processes")
    tr = sub.add_parser("translate", parents=[common], help="translate the challenge and test sets")
    tr.add_argument("--system", choices=ex.SYSTEM_KINDS)
    b = sub.add_parser("bleu", parents=[common], help="corpus BLEU of translations")
    b.add_argument("--hyp", type=Path, help="hypothesis file (with --ref: score these two files only)")
    b.add_argument("--ref", type=Path)
    e = sub.add_parser("eval-bias", parents=[common], help="Acc, delta G, delta S")
    e.add_argument("--hyp", type=Path, help="score a single translation file instead of the workspace")
    e.add_argument("--lang", help="target language of --hyp")
    e.add_argument("--challenge", type=Path, help="challenge set for --hyp (default: <workspace>/challenge/en.tsv)")
    sub.add_parser("probe", parents=[common], help="SVM probes on source embeddings")
    a = sub.add_parser("analyze-attn", parents=[common], help="coefficient of variation at the determiner step")
    a.add_argument("--layer", type=int, choices=(1, 2), help="only this decoder layer")
    sub.add_parser("report", parents=[common], help="table and figures from existing artifacts")
    pl = sub.add_parser("pipeline", parents=[common], help="run every stage in order")
    pl.add_argument("--jobs", type=int, default=ex.default_jobs())
    return p


def _workspace(args) -> ex.Workspace:
    manifest = None
    if args.manifest is not None:
        manifest = ex.ExperimentManifest.load(args.manifest)
    elif args.preset is not None:
        manifest = ex.default_manifest(args.preset)
    return ex.Workspace.open(args.workspace, manifest, args.seed)


def _eval_single(args) -> int:
    if not args.lang:
        raise ConfigError("--hyp needs --lang")
    hyp = args.hyp
    if not hyp.is_file():
        raise ex.MissingInputError(f"missing input {hyp}")
    cpath = args.challenge or args.workspace / "challenge" / "en.tsv"
    if not cpath.is_file():
        raise ex.MissingInputError(f"missing input {cpath}")
    challenge = ChallengeSet.load(cpath)
    det = GenderDetector(load_grammar(args.lang))
    rep = score_bias(read_lines(hyp), challenge, det, lexicon_aligner(det))
    print(f"Acc {rep.accuracy:.2f}  dG {rep.delta_g:.1f}  dS {rep.delta_s:.1f}  ({rep.correct}/{rep.total})")
    return 0


def run(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    cmd = args.command
    if cmd == "eval-bias" and args.hyp is not None:
        return _eval_single(args)
    if cmd == "bleu" and args.hyp is not None:
        if args.ref is None:
            raise ConfigError("--hyp needs --ref")
        for f in (args.hyp, args.ref):
            if not f.is_file():
                raise ex.MissingInputError(f"missing input {f}")
        s = bleu(read_lines(args.hyp), read_lines(args.ref))
        print(f"BLEU {s.bleu:.2f}  " + " ".join(f"p{n + 1}={p:.4f}" for n, p in enumerate(s.precisions)) + f"  BP={s.brevity_penalty:.4f}")
        return 0
    ws = _workspace(args)
    if cmd == "gen-corpus":
        ex.gen_corpus(ws)
    elif cmd == "learn-bpe":
        ex.learn_bpe(ws)
    elif cmd == "train":
        ex.train_systems(ws, args.system, jobs=max(1, args.jobs))
    elif cmd == "translate":
        ex.translate(ws, args.system)
    elif cmd == "bleu":
        for key, value in ex.bleu_scores(ws).items():
            print(f"{key}\t{value:.2f}")
    elif cmd == "eval-bias":
        for key, e in ex.eval_bias(ws).items():
            print(f"{key}\tAcc {e['accuracy']:.2f}\tdG {e['delta_g']:.1f}\tdS {e['delta_s']:.1f}\tadjacent {e['adjacent_accuracy']:.2f}")
    elif cmd == "probe":
        for key, e in ex.probe(ws).items():
            print(f"{key}\t{e['mean']:.2f} +/- {e['std']:.2f}")
    elif cmd == "analyze-attn":
        recs = ex.analyze_attn(ws, [args.layer] if args.layer else None)
        print(f"{len(recs)} c_v records -> {ws.path('attn', 'cv.csv')}")
    elif cmd == "report":
        for path in ex.report(ws):
            print(path)
    elif cmd == "pipeline":
        ex.pipeline(ws, jobs=max(1, args.jobs))
        print(f"pipeline finished: {ws.path('report')}")
    return 0


def main(argv: list[str] | None = None) -> int:
    _setup_logging()
    try:
        return run(argv)
    except (ex.MissingInputError, FileNotFoundError, ConfigError, ChallengeParseError) as exc:
        print(f"mnmt: error: {exc}", file=sys.stderr)
        return 2
    except KeyboardInterrupt:
        return 130
    except Exception as exc:  # noqa: BLE001 - last-resort diagnostic
        log.debug("internal failure", exc_info=True)
        print(f"mnmt: internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
