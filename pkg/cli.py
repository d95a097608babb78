"""
Value Identification CLI - generate, train, ensemble, evaluate and report from the shell
Every stochastic stage takes its own seed flag; every command that writes
files also writes a run manifest next to its output.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from datetime import datetime, timezone
from pathlib import Path
from typing import List, Optional

from dotenv import load_dotenv

from classify import load_classifier, save_classifier, train_baseline_classifier
from corpus import (
    DEV, PARTITIONS, TEST, TRAIN, class_distribution, format_distribution_row, load_corpus_dir,
    load_prompts, load_splits, read_text_file, save_splits, split_corpus, training_example_counts,
    audit_missing_values,
)
from ensemble import fit_weights, load_weights, save_weights
from errors import DataFormatError, InvariantError, StructuralError, UsageError, ValueIdError
from identify import (
    CONFIGS, SCOPE_GENERIC, SCOPE_PROMPT, export_scores, import_external_scores, imported_scorers,
    load_identifier, save_identifier, train_baseline_identifier,
)
from metrics import build_report, export_excel, irr_table, render_csv, render_text
from numlex import annotate, canonical, mask_values, parse_rational, scan_numbers
from pipeline import load_engine_outputs, run_engine, save_engine_outputs
from syngen import GeneratorConfig, candy_prompt, load_config, write_generated
from verify import check_solution, enumerate_solutions, feedback

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_INVARIANT = 3

EXIT_CODES = {
    UsageError: EXIT_USAGE,
    DataFormatError: EXIT_DATA,
    StructuralError: EXIT_DATA,
    FileNotFoundError: EXIT_DATA,
    InvariantError: EXIT_INVARIANT,
}

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"
MANIFEST_NAME = "manifest.json"


class _Parser(argparse.ArgumentParser):
    """ArgumentParser that raises instead of exiting"""

    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


# =============================================================================
# 1. MANIFESTS
# =============================================================================

def _sha256(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as handle:
        for block in iter(lambda: handle.read(1 << 20), b""):
            digest.update(block)
    return digest.hexdigest()


def _checksums(out: Path) -> dict:
    if out.is_dir():
        files = sorted(p for p in out.rglob("*") if p.is_file() and p.name != MANIFEST_NAME)
        return {str(p.relative_to(out)): _sha256(p) for p in files}
    return {out.name: _sha256(out)} if out.exists() else {}


def manifest_path(out: Path) -> Path:
    """DIR/manifest.json for directory outputs, <file>.manifest.json next to file outputs"""
    return out / MANIFEST_NAME if out.is_dir() else out.with_name(out.name + "." + MANIFEST_NAME)


def write_manifest(argv: List[str], args, out: Path) -> Path:
    seeds = {k: v for k, v in vars(args).items() if k.startswith("seed") and v is not None}
    inputs = {k: str(v) for k, v in vars(args).items()
              if k in ("input", "splits", "config", "classifier", "identifier", "scores", "weights", "engine") and v}
    manifest = {
        "command": args.command,
        "argv": list(argv),
        "config": str(args.config) if getattr(args, "config", None) else None,
        "seeds": seeds,
        "inputs": inputs,
        "output": str(out),
        "checksums": _checksums(out),
        "timestamp": datetime.now(timezone.utc).isoformat(),
    }
    path = manifest_path(out)
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


# =============================================================================
# 2. COMMANDS
# =============================================================================

def _members(args, corpus):
    members = [load_identifier(p) for p in args.identifier or []]
    if getattr(args, "scores", None):
        scorers = imported_scorers(import_external_scores(args.scores, corpus))
        members += [scorers[k] for k in sorted(scorers)]
    if not members:
        raise UsageError("give at least one --identifier or --scores")
    ids = [m.model_id for m in members]
    if len(set(ids)) != len(ids):
        raise StructuralError(f"duplicate member ids: {ids}")
    return members


def _split_corpus(args):
    corpus = load_corpus_dir(args.input)
    assignment = load_splits(args.splits)
    return corpus, assignment


def cmd_gen(args) -> Path:
    overrides = {"seed": args.seed}
    config = load_config(args.config, **overrides) if args.config else GeneratorConfig(
        **{k: v for k, v in overrides.items() if v is not None}).validate()
    if args.seed_raters is not None:
        logger.info("Rater simulation seed %d", args.seed_raters)
    corpus = write_generated(config, args.out, rater_seed=args.seed_raters)
    print(f"Generated {len(corpus)} responses over {len(corpus.prompts)} prompts in {args.out}")
    return Path(args.out)


def _read_texts(args) -> List[str]:
    if args.text is not None:
        return [args.text]
    return read_text_file(args.input).splitlines()


def _emit(lines: List[str], out) -> Optional[Path]:
    if out is None:
        for line in lines:
            print(line)
        return None
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text("".join(line + "\n" for line in lines), encoding="utf-8")
    return out


def cmd_normalize(args):
    annotated = [scan_numbers(text) for text in _read_texts(args)]
    for a in annotated:
        for diagnostic in a.diagnostics:
            logger.warning(diagnostic)
    return _emit([annotate(a) for a in annotated], args.out)


def cmd_mask(args):
    lines = []
    for text in _read_texts(args):
        masked = mask_values(scan_numbers(text))
        lines.append(json.dumps({"template": masked.template, "values": [canonical(v) for v in masked.values]},
                                sort_keys=True, ensure_ascii=False))
    return _emit(lines, args.out)


def cmd_split(args):
    corpus = load_corpus_dir(args.input)
    assignment = split_corpus(corpus, args.seed_split)
    out = Path(args.out)
    save_splits(assignment, corpus, out)
    sizes = dict(zip(PARTITIONS, assignment.sizes()))
    print(f"Split {len(corpus)} responses: " + ", ".join(f"{name} {sizes[name]}" for name in PARTITIONS))
    return out


def cmd_train_classifier(args):
    corpus, assignment = _split_corpus(args)
    model = train_baseline_classifier(
        corpus.subset(assignment.ids(TRAIN)), corpus.subset(assignment.ids(DEV)), args.seed_train)
    out = Path(args.out)
    save_classifier(model, out)
    print(f"Classifier saved to {out} (dev balanced accuracy {model.metadata['dev_balanced_accuracy']:.4f})")
    return out


def cmd_train_identifier(args):
    corpus, assignment = _split_corpus(args)
    model = train_baseline_identifier(
        corpus.subset(assignment.ids(TRAIN)), corpus.subset(assignment.ids(DEV)), args.seed_train,
        args.model_id, config=args.features, scope=args.scope, strict=args.strict)
    out = Path(args.out)
    save_identifier(model, out)
    print(f"Identifier {model.model_id} saved to {out} (dev accuracy {model.metadata['dev_accuracy']:.4f})")
    return out


def cmd_import_scores(args):
    corpus = load_corpus_dir(args.input)
    table = import_external_scores(args.scores, corpus)
    models = sorted({key[2] for key in table})
    print(f"{len(table)} score rows for model(s): {', '.join(models)}")
    if args.out:
        out = Path(args.out)
        export_scores(table, out)
        return out
    return None


def cmd_fit_ensemble(args):
    corpus, assignment = _split_corpus(args)
    members = _members(args, corpus)
    fitted = fit_weights(members, corpus.subset(assignment.ids(DEV)), per_slot=args.per_slot_ensemble,
                         workers=args.workers)
    out = Path(args.out)
    save_weights(fitted, out)
    fallback = sum(1 for fit in fitted.fits.values() if fit.uniform_fallback)
    print(f"Ensemble weights for {len(fitted.fits)} slot(s) saved to {out}"
          + (f" ({fallback} uniform for lack of dev data)" if fallback else ""))
    return out


def cmd_evaluate(args):
    corpus, assignment = _split_corpus(args)
    members = _members(args, corpus)
    engine = run_engine(corpus, assignment.ids(args.partition), load_classifier(args.classifier), members,
                        load_weights(args.weights), workers=args.workers)
    out = Path(args.out)
    save_engine_outputs(engine, out)
    print(f"Engine outputs for {engine['response_id'].nunique()} {args.partition} responses saved to {out}")
    return out


def cmd_report(args):
    corpus, assignment = _split_corpus(args)
    engine = load_engine_outputs(args.engine)
    report = build_report(corpus, engine, assignment.ids(args.partition), strict=args.strict_kappa)
    print("=" * 60)
    print(report.to_text())
    if not report.regressions.empty:
        print("\nENSEMBLE BELOW A MEMBER ON THIS SPLIT")
        print(render_text(report.regressions))
    if args.out is None:
        return None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "prompt_table.csv").write_text(render_csv(report.prompt_table), encoding="utf-8")
    (out / "slot_table.csv").write_text(render_csv(report.slot_table), encoding="utf-8")
    (out / "regressions.csv").write_text(render_csv(report.regressions), encoding="utf-8")
    (out / "report.txt").write_text(report.to_text() + "\n", encoding="utf-8")
    if args.excel:
        export_excel({"prompts": report.prompt_table, "slots": report.slot_table,
                      "regressions": report.regressions}, out / "report.xlsx")
    return out


def _prompt_for_verify(args):
    source = args.prompts or os.getenv("VALUEID_PROMPTS")
    if source:
        prompts = load_prompts(source)
        if args.prompt not in prompts:
            raise StructuralError(f"prompt {args.prompt} not in {source}")
        return prompts[args.prompt]
    candy = candy_prompt()
    if args.prompt != candy.prompt_id:
        raise StructuralError(f"unknown prompt {args.prompt} (give --prompts)")
    return candy


def cmd_verify(args):
    prompt = _prompt_for_verify(args)
    if prompt.constraint is None:
        raise StructuralError(f"prompt {prompt.prompt_id} has no constraint")
    if args.enumerate:
        solutions = enumerate_solutions(prompt.constraint)
        print(f"{len(solutions)} solutions")
        for solution in solutions:
            print(",".join(map(str, solution)))
    if args.values is not None:
        try:
            values = [parse_rational(v) for v in args.values.split(",")] if args.values.strip() else []
        except ValueError as exc:
            raise UsageError(f"--values: {exc}")
        diagnosis = check_solution(values, prompt.constraint, prompt.slot_ids)
        print(diagnosis)
        print(feedback(diagnosis))
    return None


def cmd_audit(args):
    corpus = load_corpus_dir(args.input)
    response_ids = None
    assignment = None
    if args.splits:
        assignment = load_splits(args.splits)
        response_ids = assignment.ids(args.partition)

    distribution = class_distribution(corpus)
    print("=" * 60)
    print("CLASS DISTRIBUTION (0 / 1 / v, %)")
    print("=" * 60)
    for prompt_id, row in distribution.iterrows():
        print(f"{prompt_id:>6}  N={int(row['N']):>6}  V={int(row['V']):>2}  "
              f"{format_distribution_row(row['zero'], row['one'], row['other'])}")
    print("\nINTER-RATER AGREEMENT")
    print(render_text(irr_table(corpus, strict=args.strict_kappa)))
    if assignment is not None:
        print("\nTRAINING EXAMPLES PER SLOT")
        print(render_text(training_example_counts(corpus, assignment).reset_index()))
    audit = audit_missing_values(corpus, response_ids)
    print("\nVALUES MISSING FROM THE TEXT")
    print(render_text(audit))
    if args.out is None:
        return None
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(render_csv(audit), encoding="utf-8")
    return out


def cmd_replay(args):
    path = Path(args.manifest)
    text = read_text_file(path)
    try:
        manifest = json.loads(text)
        argv, expected = list(manifest["argv"]), dict(manifest["checksums"])
        output, command = Path(manifest["output"]), manifest["command"]
    except (ValueError, KeyError, TypeError) as exc:
        raise DataFormatError(f"not a run manifest: {exc}", path)
    code = run(argv)
    if code != EXIT_OK:
        return code
    actual = _checksums(output)
    changed = sorted(k for k in expected if actual.get(k) != expected[k])
    if changed:
        raise InvariantError(f"replay changed {', '.join(changed)}")
    print(f"Replay of {command} reproduced {len(expected)} file(s)")
    return None


COMMANDS = {
    "gen": cmd_gen,
    "normalize": cmd_normalize,
    "mask": cmd_mask,
    "split": cmd_split,
    "train-classifier": cmd_train_classifier,
    "train-identifier": cmd_train_identifier,
    "import-scores": cmd_import_scores,
    "fit-ensemble": cmd_fit_ensemble,
    "evaluate": cmd_evaluate,
    "report": cmd_report,
    "verify": cmd_verify,
    "audit": cmd_audit,
    "replay": cmd_replay,
}


# =============================================================================
# 3. ARGUMENTS
# =============================================================================

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="valueid", description="Value identification for math short answers")
    parser.add_argument("--log-level", type=str.upper, default=os.getenv("VALUEID_LOG_LEVEL", "WARNING").upper(),
                        choices=("DEBUG", "INFO", "WARNING", "ERROR"))
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    workers = int(os.getenv("VALUEID_WORKERS", "1"))

    def corpus_args(p, splits=True):
        p.add_argument("--in", dest="input", required=True, help="corpus directory (prompts.jsonl, responses.jsonl)")
        if splits:
            p.add_argument("--splits", required=True)

    p = sub.add_parser("gen", help="generate a synthetic corpus")
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--seed-raters", type=int)
    p.add_argument("--out", required=True)

    for name, help_text in (("normalize", "annotate numbers with their canonical form"),
                            ("mask", "mask numbers and list their values")):
        p = sub.add_parser(name, help=help_text)
        source = p.add_mutually_exclusive_group(required=True)
        source.add_argument("--in", dest="input", help="text file, one response per line")
        source.add_argument("--text")
        p.add_argument("--out")

    p = sub.add_parser("split", help="70/15/15 split per prompt")
    corpus_args(p, splits=False)
    p.add_argument("--seed-split", type=int, required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("train-classifier", help="train the 0/1/v classifier")
    corpus_args(p)
    p.add_argument("--seed-train", type=int, required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("train-identifier", help="train a placeholder scorer")
    corpus_args(p)
    p.add_argument("--seed-train", type=int, required=True)
    p.add_argument("--model-id", required=True)
    p.add_argument("--features", choices=CONFIGS, default=CONFIGS[0])
    p.add_argument("--scope", choices=(SCOPE_GENERIC, SCOPE_PROMPT), default=SCOPE_GENERIC)
    p.add_argument("--strict", action="store_true", help="drop records whose value occurs twice")
    p.add_argument("--out", required=True)

    p = sub.add_parser("import-scores", help="validate externally computed scores")
    corpus_args(p, splits=False)
    p.add_argument("--scores", required=True)
    p.add_argument("--out")

    for name, help_text in (("fit-ensemble", "fit ensemble weights on the dev split"),
                            ("evaluate", "run the engine on a split")):
        p = sub.add_parser(name, help=help_text)
        corpus_args(p)
        p.add_argument("--identifier", action="append")
        p.add_argument("--scores")
        p.add_argument("--workers", type=int, default=workers)
        p.add_argument("--out", required=True)
        if name == "fit-ensemble":
            p.add_argument("--per-slot-ensemble", action=argparse.BooleanOptionalAction, default=True)
        else:
            p.add_argument("--classifier", required=True)
            p.add_argument("--weights", required=True)
            p.add_argument("--partition", choices=PARTITIONS, default=TEST)

    p = sub.add_parser("report", help="agreement tables for evaluated responses")
    corpus_args(p)
    p.add_argument("--engine", required=True)
    p.add_argument("--partition", choices=PARTITIONS, default=TEST)
    p.add_argument("--strict-kappa", action="store_true", help='render undefined kappas as "-"')
    p.add_argument("--excel", action="store_true")
    p.add_argument("--out")

    p = sub.add_parser("verify", help="check values against a prompt constraint")
    p.add_argument("--prompt", required=True)
    p.add_argument("--prompts", help="prompt file (default: $VALUEID_PROMPTS or the built-in p1)")
    p.add_argument("--values")
    p.add_argument("--enumerate", action="store_true")

    p = sub.add_parser("audit", help="class mix, rater agreement and values missing from the text")
    corpus_args(p, splits=False)
    p.add_argument("--splits")
    p.add_argument("--partition", choices=PARTITIONS, default=TRAIN)
    p.add_argument("--strict-kappa", action="store_true")
    p.add_argument("--out")

    p = sub.add_parser("replay", help="re-run a command from its manifest and compare outputs")
    p.add_argument("--manifest", required=True)
    return parser


def _exit_code(exc: BaseException) -> int:
    for kind, code in EXIT_CODES.items():
        if isinstance(exc, kind):
            return code
    return EXIT_INVARIANT


def run(argv: Optional[List[str]] = None) -> int:
    """Parse argv, run one subcommand and return its exit code"""
    load_dotenv()
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=args.log_level, format=LOG_FORMAT, stream=sys.stderr)
        out = COMMANDS[args.command](args)
        if isinstance(out, int):
            return out
        if out is not None and args.command != "replay":
            write_manifest(argv, args, Path(out))
        return EXIT_OK
    except (ValueIdError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return _exit_code(exc)
    except Exception as exc:
        logger.exception("unexpected failure in %s", argv[:1])
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INVARIANT


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
