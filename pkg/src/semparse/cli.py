"""Command-line front end: train, eval, parse, repl (and gen-arith for demo data)."""

from __future__ import annotations

import argparse
import json
import logging
import shutil
import sys
from pathlib import Path

from semparse import data_path
from semparse.grammar import GrammarError, load_grammar
from semparse.kb import (
    DatasetError, KBFormatError, load_dataset, load_kb, make_arith_domain, save_dataset,
    save_kb, tokenize,
)
from semparse.learner import TrainConfig, evaluate_detailed, train
from semparse.logic import LFSyntaxError, LogicError, execute, parse_lf
from semparse.model import Model, Params, ParamsFormatError, denote, load_params, save_params
from semparse.parser import BeamConfig, parse, render_derivation

log = logging.getLogger("semparse")

EXIT_OK, EXIT_NO_RESULT, EXIT_CONFIG, EXIT_INTERNAL = 0, 1, 2, 3


class ConfigError(Exception):
    pass


CONFIG_ERRORS = (ConfigError, GrammarError, KBFormatError, DatasetError, ParamsFormatError,
                 OSError, ValueError)


# ---------------------------------------------------------------------------
# Shared loading


def _grammar(args):
    if not args.grammar:
        raise ConfigError("--grammar is required")
    return load_grammar(args.grammar)


def _contexts(args) -> dict:
    if not args.kb:
        raise ConfigError("--kb is required")
    contexts = {}
    for path in args.kb:
        ctx = load_kb(path)
        if ctx.id in contexts:
            raise ConfigError(f"duplicate context id {ctx.id!r} ({path})")
        contexts[ctx.id] = ctx
    return contexts


def _single_context(args):
    contexts = _contexts(args)
    if len(contexts) != 1:
        raise ConfigError("parse and repl take exactly one --kb")
    return next(iter(contexts.values()))


def _params(path) -> Params:
    return load_params(path) if path else Params()


def _beam(args) -> BeamConfig:
    if args.beam < 1:
        raise ConfigError("--beam must be >= 1")
    if args.max_floating < 0:
        raise ConfigError("--max-floating must be >= 0")
    return BeamConfig(beam_size=args.beam, max_floating=args.max_floating)


def format_denotation(y) -> str:
    if y is None:
        return "-"
    if isinstance(y, LogicError):
        return f"error:{type(y).__name__}"
    return str(y)


def _print_parses(tokens, context, grammar, params, beam, topk, show) -> int:
    cache = {}
    derivs = parse(tokens, context, grammar, Model(params).scorer(tokens, context, cache), beam)
    if not derivs:
        print("no derivations")
        return EXIT_NO_RESULT
    for rank, d in enumerate(derivs[:topk], 1):
        y = denote(d.sem, context, cache)
        print(f"{rank} {d.score:.4f} {d.lf_text} {format_denotation(y)}")
        if show:
            print(render_derivation(d, tokens, 1))
    return EXIT_OK


# ---------------------------------------------------------------------------
# Commands


def cmd_train(args) -> int:
    if not args.train:
        raise ConfigError("--train is required")
    if not args.out:
        raise ConfigError("--out is required")
    beam = _beam(args)
    grammar = _grammar(args)
    contexts = _contexts(args)
    config = TrainConfig(
        epochs=args.epochs, step_size=args.lr, optimizer=args.optimizer, l1=args.l1,
        beam=beam, shuffle_seed=args.seed,
    )
    data = load_dataset(args.train, contexts)
    dev = load_dataset(args.dev, contexts) if args.dev else None
    params, metrics = train(data, grammar, config, _params(args.model))
    for row in metrics:
        print(json.dumps(row), flush=True)
    if dev is not None:
        print(json.dumps({"devAcc": _accuracy(dev, grammar, params, beam, args.jobs)}))
    save_params(params, args.out)
    log.info("wrote %s", args.out)
    return EXIT_OK


def _accuracy(ds, grammar, params, beam, jobs):
    if not ds.examples:
        return 0.0
    preds = evaluate_detailed(ds, grammar, params, beam, jobs)
    return sum(p.correct for p in preds) / len(preds)


def cmd_eval(args) -> int:
    if not args.data:
        raise ConfigError("--data is required")
    beam = _beam(args)
    grammar = _grammar(args)
    contexts = _contexts(args)
    params = _params(args.model)
    ds = load_dataset(args.data, contexts)
    if not ds.examples:
        print(f"warning: {args.data} has no examples", file=sys.stderr)
        print("accuracy 0.0")
        return EXIT_OK
    preds = evaluate_detailed(ds, grammar, params, beam, args.jobs)
    if args.verbose:
        for p in preds:
            verdict = "ok" if p.correct else "wrong"
            print(f"{verdict}\t{' '.join(p.example.utterance)}\t{p.lf_text or '-'}\t"
                  f"{format_denotation(p.denotation)}")
    print(f"accuracy {sum(p.correct for p in preds) / len(preds)}")
    return EXIT_OK


def cmd_parse(args) -> int:
    if not args.utterance:
        raise ConfigError("no utterance given")
    if args.topk < 1:
        raise ConfigError("--topk must be >= 1")
    beam = _beam(args)
    grammar = _grammar(args)
    context = _single_context(args)
    params = _params(args.model)
    tokens = tokenize(" ".join(args.utterance))
    return _print_parses(tokens, context, grammar, params, beam, args.topk,
                         args.show_derivations)


def cmd_repl(args, stdin=None) -> int:
    stdin = stdin or sys.stdin
    beam = _beam(args)
    grammar = _grammar(args)
    context = _single_context(args)
    params = _params(args.model)
    interactive = stdin.isatty()
    while True:
        if interactive:
            print("> ", end="", flush=True)
        line = stdin.readline()
        if not line:
            return EXIT_OK
        line = line.strip()
        if not line:
            continue
        if line == ":quit":
            return EXIT_OK
        if line.startswith(":lf"):
            try:
                print(format_denotation(execute(parse_lf(line[3:].strip()), context)))
            except (LFSyntaxError, LogicError) as e:
                print(f"error: {e}")
            continue
        if line.startswith(":load-model"):
            path = line[len(":load-model"):].strip()
            try:
                params = load_params(path)
                print(f"loaded {path}")
            except (OSError, ParamsFormatError) as e:
                print(f"error: {e}")
            continue
        if line.startswith(":"):
            print("commands: :lf <expr>, :load-model <path>, :quit")
            continue
        tokens = tokenize(line)
        if tokens:
            _print_parses(tokens, context, grammar, params, beam, args.topk,
                          args.show_derivations)


def cmd_gen_arith(args) -> int:
    if not args.out:
        raise ConfigError("--out is required")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    train_ds, test_ds = make_arith_domain(args.seed, args.n_train, args.n_test)
    save_kb(next(iter(train_ds.contexts.values())), out / "arith.tsv")
    save_dataset(train_ds, out / "train.jsonl")
    save_dataset(test_ds, out / "test.jsonl")
    shutil.copyfile(data_path("arith.gr"), out / "arith.gr")
    print(f"wrote {out}/arith.gr, arith.tsv, train.jsonl ({len(train_ds)}), "
          f"test.jsonl ({len(test_ds)})")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Argument parsing


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="semparse", description="Semantic parsing toolkit.")
    sub = p.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--grammar", help="grammar file")
    common.add_argument("--kb", action="append", default=[], help="KB file (repeatable)")
    common.add_argument("--model", help="weights file to load")
    common.add_argument("--beam", type=int, default=200, help="beam size K")
    common.add_argument("--max-floating", type=int, default=2)
    common.add_argument("--verbose", action="store_true")
    common.add_argument("--jobs", type=int, default=1, help="parallel evaluation workers")

    show = argparse.ArgumentParser(add_help=False)
    show.add_argument("--topk", type=int, default=1)
    show.add_argument("--show-derivations", action="store_true")

    t = sub.add_parser("train", parents=[common], help="train weights")
    t.add_argument("--train")
    t.add_argument("--dev")
    t.add_argument("--out", help="weights file to write")
    t.add_argument("--epochs", type=int, default=5)
    t.add_argument("--lr", type=float, default=0.1)
    t.add_argument("--optimizer", choices=["sgd", "adagrad"], default="sgd")
    t.add_argument("--l1", type=float, default=0.0)
    t.add_argument("--seed", type=int, default=0)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", parents=[common], help="denotation accuracy on a dataset")
    e.add_argument("--data")
    e.set_defaults(func=cmd_eval)

    q = sub.add_parser("parse", parents=[common, show], help="parse one utterance")
    q.add_argument("utterance", nargs="*")
    q.set_defaults(func=cmd_parse)

    r = sub.add_parser("repl", parents=[common, show], help="interactive loop")
    r.set_defaults(func=cmd_repl)

    g = sub.add_parser("gen-arith", help="write the synthetic arithmetic domain")
    g.add_argument("--out")
    g.add_argument("--seed", type=int, default=1)
    g.add_argument("--n-train", type=int, default=200)
    g.add_argument("--n-test", type=int, default=100)
    g.add_argument("--verbose", action="store_true")
    g.set_defaults(func=cmd_gen_arith)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return e.code if isinstance(e.code, int) else EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except CONFIG_ERRORS as e:
        print(f"semparse: error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except KeyboardInterrupt:
        return EXIT_INTERNAL
    except Exception as e:  # noqa: BLE001 - last-resort exit code
        log.exception("internal error: %s", e)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
