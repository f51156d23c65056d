"""Command line: gen, train, eval, gradcheck, decode.

Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    def __init__(self, message: str, shown: bool = False):
        super().__init__(message)
        self.shown = shown


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        raise UsageError(message, shown=True)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="cmam", description="Multi-way associative memory line recognizer toolkit")
    sub = p.add_subparsers(dest="command", parser_class=_Parser, required=True)

    g = sub.add_parser("gen", help="generate a synthetic line dataset")
    g.add_argument("--seed", type=int, required=True)
    g.add_argument("--vocab-size", type=int, default=20)
    g.add_argument("--lines", type=int, required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--min-length", type=int, default=5)
    g.add_argument("--max-length", type=int, default=25)

    t = sub.add_parser("train", help="train a model from a key = value config")
    t.add_argument("--config", required=True)

    e = sub.add_parser("eval", help="report CER / CR / AR of a checkpoint on a dataset")
    e.add_argument("--model", required=True)
    e.add_argument("--data", required=True)

    gc = sub.add_parser("gradcheck", help="finite-difference check of every differentiable op")
    gc.add_argument("--profile", choices=["tiny", "default"], default="tiny")

    d = sub.add_parser("decode", help="transcribe one PGM line image")
    d.add_argument("--model", required=True)
    d.add_argument("--image", required=True)
    d.add_argument("--vocab", help="vocab.txt (defaults to the training set's)")
    return p


def _gen(args) -> int:
    from .synth import generate_dataset
    path = generate_dataset(args.seed, args.vocab_size, args.lines, args.out, (args.min_length, args.max_length))
    print(f"wrote {args.lines} lines to {path.parent}")
    return EXIT_OK


def _train(args) -> int:
    from .config import load_config
    from .train import train
    path = Path(args.config)
    if not path.is_file():
        raise UsageError(f"config file not found: {path}")
    cfg = load_config(path)
    result = train(cfg, out=sys.stdout)
    print(f"best valid_cer {result.best_cer:.6f} at epoch {result.best_epoch}"
          + (f", checkpoint {result.checkpoint}" if result.checkpoint else ""))
    return EXIT_OK


def _eval(args) -> int:
    from .train import evaluate
    evaluate(args.model, args.data, sys.stdout)
    return EXIT_OK


def _gradcheck(args) -> int:
    from .gradcheck_suite import run_suite
    results, seconds = run_suite(args.profile, report=print)
    failed = [r for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed in {seconds:.1f} s")
    return EXIT_OK if not failed else EXIT_RUNTIME


def _decode(args) -> int:
    from .ctc import greedy_decode
    from .synth import dequantize, read_pgm, read_vocab
    from .tensor import Tensor
    from .train import restore
    model, cfg, _ = restore(args.model)
    image = dequantize(read_pgm(args.image))
    logits = model.logits(Tensor(image[None, None]))
    labels = greedy_decode(logits.data[0])
    vocab_path = Path(args.vocab) if args.vocab else (Path(cfg.train_data) / "vocab.txt" if cfg.train_data else None)
    names = read_vocab(vocab_path) if vocab_path and vocab_path.is_file() else None
    print("indices:", " ".join(map(str, labels)))
    if names is not None:
        print("glyphs:", " ".join(names[c - 1] for c in labels))
    return EXIT_OK


COMMANDS = {"gen": _gen, "train": _train, "eval": _eval, "gradcheck": _gradcheck, "decode": _decode}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return COMMANDS[args.command](args)
    except UsageError as e:
        if not e.shown:
            sys.stderr.write(f"cmam: error: {e}\n")
        return EXIT_USAGE
    except (OSError, ValueError, KeyError) as e:
        sys.stderr.write(f"cmam: error: {e}\n")
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
