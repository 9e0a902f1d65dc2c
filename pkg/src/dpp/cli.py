"""Command-line entry point: ``dpp <subcommand> [flags]``.

Exit codes: 0 success, 1 invalid input (config, flags, checkpoints), 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from dpp import harness
from dpp.config import dump_toml, load_config
from dpp.errors import CheckpointError, ConfigurationError

COMMANDS = {
    "gen-data": "write the synthetic corpora and database",
    "pretrain-aux": "train the language models, style classifier and naive parser",
    "pretrain-dae": "denoising pre-training of the paraphrase model",
    "cycle": "back-translation and policy-gradient training from a DAE checkpoint",
    "train-all": "every phase end to end, with evaluation and figures",
    "eval": "denotation accuracy of a checkpoint on the evaluation split",
    "ablate": "one ablation table (noise channels, cycle tasks or encoder sharing)",
    "dump-cases": "print x, predicted canonical, logical form and denotation for a few inputs",
    "baseline": "run one of the comparison systems",
    "show-config": "print the resolved configuration as TOML",
}


class _Parser(argparse.ArgumentParser):
    """argparse exits with 2 on bad usage; validation errors here map to 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(1)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="dpp", description="Two-stage unsupervised semantic parsing on a synthetic domain.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", metavar="command", parser_class=_Parser)
    sub.required = True
    for name, text in COMMANDS.items():
        sp = sub.add_parser(name, help=text)
        sp.add_argument("--config", help="TOML configuration file")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", help="run directory (default: $DPP_OUT_DIR/<command> or ./runs/<command>)")
        sp.add_argument("--checkpoint", help="checkpoint directory to start from / evaluate")
        sp.add_argument("--semi-fraction", type=float, dest="semi_fraction")
        sp.add_argument("--labels-path", dest="labels_path", help="JSONL of labeled pairs for semi-supervision")
        sp.add_argument("--embeddings-path", dest="embeddings_path", help="word vectors, one 'token v1 .. vd' per line")
        if name == "ablate":
            sp.add_argument("--axis", required=True, choices=("noise", "cycle", "shared_encoder"))
        if name == "baseline":
            sp.add_argument("--which", default="wmd_two_stage",
                            choices=("wmd_two_stage", "wmd_one_stage", "embed", "multitask_dae"))
        if name == "dump-cases":
            sp.add_argument("-n", type=int, default=10, help="number of eval inputs to dump")
    return p


def _out_dir(args) -> Path:
    if args.out:
        return Path(args.out)
    root = os.environ.get("DPP_OUT_DIR") or "runs"
    return Path(root) / args.command


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = load_config(args.config, {"seed": args.seed, "semi_fraction": args.semi_fraction,
                                        "labels_path": args.labels_path, "embeddings_path": args.embeddings_path})
        if args.command == "show-config":
            sys.stdout.write(dump_toml(cfg))
            return 0
        out = _out_dir(args)
        out.mkdir(parents=True, exist_ok=True)
        cmd = args.command
        if cmd == "gen-data":
            res = harness.run_gen_data(cfg, out)
        elif cmd == "pretrain-aux":
            res = harness.run_pretrain_aux(cfg, out)
        elif cmd == "pretrain-dae":
            res = harness.run_pretrain_dae(cfg, out, args.checkpoint)
        elif cmd == "cycle":
            res = harness.run_cycle(cfg, out, args.checkpoint)
        elif cmd == "train-all":
            res = harness.run_train_all(cfg, out)
        elif cmd == "eval":
            res = harness.run_eval(cfg, out, args.checkpoint)
        elif cmd == "ablate":
            res = harness.run_ablate(cfg, out, args.axis)
            sys.stdout.write(Path(res["table"]).read_text(encoding="utf-8"))
        elif cmd == "dump-cases":
            res = harness.run_dump_cases(cfg, out, args.checkpoint, args.n)
        else:
            res = harness.run_baseline(cfg, out, args.which, args.checkpoint)
    except (ConfigurationError, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - top-level runtime failure
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        if args.verbose:
            raise
        return 2
    print(json.dumps(res, indent=1, sort_keys=True, default=str))
    return 0


if __name__ == "__main__":
    sys.exit(main())
