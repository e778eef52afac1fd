"""``repdit`` command line.

Exit status is 0 on success; on failure a single ``error: <ErrorClass>: <message>``
line goes to stderr and the status is 1 (2 for usage errors).
"""

from __future__ import annotations

import argparse
import logging
import sys

from . import pipeline


def _int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _u64(text: str) -> int:
    v = int(text)
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError("seed must fit in an unsigned 64-bit integer")
    return v


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="repdit", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model from a JSON config")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--resume", help="checkpoint to continue from")

    p = sub.add_parser("sample", help="sample a clip from a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--prompt", type=int, required=True)
    p.add_argument("--seed", type=_u64, required=True)
    p.add_argument("--out", default=".")
    p.add_argument("--capture", action="store_true", help="also write an RPVA1 feature capture")
    p.add_argument("--attention", action="store_true", help="include attention weights in the capture")
    p.add_argument("--steps", type=_int_list)
    p.add_argument("--layers", type=_int_list)

    p = sub.add_parser("analyze", help="similarity/attention reports from a capture or checkpoint")
    p.add_argument("--in", dest="in_path", required=True)
    p.add_argument("--out", default=".")
    p.add_argument("--steps", type=_int_list)
    p.add_argument("--layers", type=_int_list)
    p.add_argument("--prompt", type=int, default=0)
    p.add_argument("--seed", type=_u64, default=0)

    p = sub.add_parser("compare", help="train baseline and cached-aggregation models and compare them")
    p.add_argument("--config", required=True)
    p.add_argument("--seeds", type=_int_list, required=True)
    p.add_argument("--out", default="compare")
    p.add_argument("--steps", type=_int_list)
    p.add_argument("--prompt", type=int, default=0)
    return parser


def run(args: argparse.Namespace) -> dict:
    if args.command == "train":
        res = pipeline.cmd_train(args.config, args.out, resume=args.resume)
        return {"checkpoint": res.checkpoint_path, "loss_log": res.log_path}
    if args.command == "sample":
        return pipeline.cmd_sample(args.ckpt, args.prompt, args.seed, args.out, capture=args.capture,
                                   steps=args.steps, layers=args.layers, attention=args.attention)
    if args.command == "analyze":
        return pipeline.cmd_analyze(args.in_path, args.out, steps=args.steps, layers=args.layers,
                                    prompt_id=args.prompt, seed=args.seed)
    if args.command == "compare":
        return pipeline.cmd_compare(args.config, args.seeds, args.out, steps=args.steps, prompt_id=args.prompt)
    raise AssertionError(args.command)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        paths = run(args)
    except Exception as exc:  # one machine-parseable line, no traceback
        message = str(exc).splitlines()[0] if str(exc) else ""
        print(f"error: {type(exc).__name__}: {message}", file=sys.stderr)
        return 1
    for key, path in paths.items():
        print(f"{key}\t{path}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
