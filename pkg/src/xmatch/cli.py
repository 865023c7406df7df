"""Command line entry point: ``xmatch {synth,train,eval,gradcheck,ablate}``.

Exit status is 0 on success, 2 on a usage error and 1 on any runtime failure.
"""
from __future__ import annotations

import argparse
import sys
from pathlib import Path

from . import pipeline
from .config import SCHEMA, RunConfig
from .errors import XMatchError
from .gradcheck import run_suite
from .synthdata import generate_dataset

GRADCHECK_TOLERANCE = 1e-4

# flag dest -> config key
FLAG_KEYS = {
    "seed": "seed",
    "strategy": "train.strategy",
    "pool": "model.pool",
    "gb": "model.gb",
    "length": "text.len",
    "stage1_epochs": "train.stage1_epochs",
    "stage2_epochs": "train.stage2_epochs",
    "batch": "train.batch",
    "embedding_file": "text.embedding_file",
}


class _HelpFormatter(argparse.HelpFormatter):
    """Show a default for every flag; run options show the configuration default."""

    def _get_help_string(self, action):
        text = action.help or ""
        if not action.option_strings or action.default is argparse.SUPPRESS:
            return text
        if action.required:
            return f"{text} (required)".strip()
        shown = getattr(action, "config_default", action.default)
        if shown is None:
            shown = "a third of the identities" if action.dest == "test_ids" else "none"
        elif shown in ("", []):
            shown = "none"
        return f"{text} (default: {shown})".strip()


def _kv(text: str) -> tuple[str, str]:
    if "=" not in text:
        raise argparse.ArgumentTypeError(f"expected KEY=VALUE, got {text!r}")
    key, value = text.split("=", 1)
    return key.strip(), value.strip()


def _add_run_options(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="key=value configuration file")
    p.add_argument("--set", dest="sets", type=_kv, action="append", default=[], metavar="KEY=VALUE",
                   help="override any configuration key (repeatable)")
    flags = [
        ("--seed", dict(type=int, help="top-level random seed")),
        ("--strategy", dict(type=int, choices=(1, 2, 3, 4), help="which stages update the vision path")),
        ("--pool", dict(choices=("gap", "gmp", "both"), help="spatial pooling")),
        ("--gb", dict(choices=("on", "off"), help="max gated block")),
        ("--len", dict(dest="length", type=int, help="padded caption length")),
        ("--stage1-epochs", dict(type=int, help="epochs with the vision path frozen")),
        ("--stage2-epochs", dict(type=int, help="epochs of joint fine-tuning")),
        ("--batch", dict(type=int, help="pairs per minibatch")),
        ("--embedding-file", dict(help="frozen word embedding table (.xmeb); empty means a random table")),
    ]
    for flag, kwargs in flags:
        action = p.add_argument(flag, **kwargs)
        value = SCHEMA[FLAG_KEYS[action.dest]][1]
        action.config_default = {True: "on", False: "off"}.get(value, value) if isinstance(value, bool) else value
    action = p.add_argument("--loss", choices=("cmpm", "cmpc", "both"), help="matching losses to use")
    action.config_default = "both"


def _overrides(args) -> dict[str, str]:
    out = {}
    for dest, key in FLAG_KEYS.items():
        value = getattr(args, dest, None)
        if value is not None:
            out[key] = str(value)
    if getattr(args, "loss", None):
        out["loss.cmpm"] = "on" if args.loss in ("cmpm", "both") else "off"
        out["loss.cmpc"] = "on" if args.loss in ("cmpc", "both") else "off"
    out.update(dict(args.sets))
    return out


def _print_ranks(cmc) -> None:
    for k in (1, 5, 10):
        print(f"rank-{k}: {cmc.rank(k):.4f}")


def cmd_synth(args) -> int:
    ds = generate_dataset(
        args.ids, args.images_per_id, args.captions_per_image, args.seed, args.out,
        num_test=args.test_ids, num_val=args.val_ids,
    )
    print(f"wrote {len(ds.records)} pairs for {args.ids} identities to {args.out}")
    return 0


def cmd_train(args) -> int:
    config = RunConfig.build(args.config, _overrides(args))
    log = None if args.quiet else (
        lambda r: print(f"epoch {r['epoch']:3d} stage {r['stage']} lr {r['lr']:.2e} "
                        f"loss {r['train_loss']:.4f} rank-1 {r['val_rank1']:.4f}", flush=True)
    )
    _, result = pipeline.train(config, args.data, args.out, resume=args.resume, stop_after=args.stop_after, log=log)
    print(f"checkpoint: {Path(args.out) / pipeline.CHECKPOINT_NAME} (epoch {result.checkpoint.epoch})")
    return 0


def cmd_eval(args) -> int:
    session = pipeline.session_from_checkpoint(args.checkpoint, args.data)
    result = pipeline.evaluate(session, args.split, args.out)
    _print_ranks(result.cmc)
    if result.cmc.excluded:
        print(f"excluded queries: {result.cmc.excluded}")
    return 0


def cmd_gradcheck(args) -> int:
    errors = run_suite(seed=args.seed)
    worst = 0.0
    for name, err in errors.items():
        flag = "ok" if err <= GRADCHECK_TOLERANCE else "FAIL"
        print(f"{name:24s} {err:.3e} {flag}")
        worst = max(worst, err)
    print(f"max relative error {worst:.3e}")
    return 0 if worst <= GRADCHECK_TOLERANCE else 1


def cmd_ablate(args) -> int:
    seeds = list(range(args.seed or 0, (args.seed or 0) + args.seeds))
    base = _overrides(args)
    base.pop("seed", None)
    rows = pipeline.ablate(args.axis, seeds, base, args.out, data_dir=args.data, config_file=args.config,
                           log=None if args.quiet else print)
    print("setting          rank-1  rank-5  rank-10")
    for r in rows:
        print(f"{r['setting']:16s} {r['rank1_median']:.4f}  {r['rank5_median']:.4f}  {r['rank10_median']:.4f}")
    print(f"table: {Path(args.out) / f'ablation_{args.axis}.csv'}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    fmt = _HelpFormatter
    parser = argparse.ArgumentParser(prog="xmatch", description="Text-to-image person retrieval.", formatter_class=fmt)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic paired dataset", formatter_class=fmt)
    p.add_argument("--ids", type=int, required=True, help="number of identities")
    p.add_argument("--out", type=Path, required=True, help="output directory")
    p.add_argument("--images-per-id", type=int, default=4, help="images rendered per identity")
    p.add_argument("--captions-per-image", type=int, default=2, help="captions per image")
    p.add_argument("--test-ids", type=int, help="identities held out for test")
    p.add_argument("--val-ids", type=int, default=0, help="identities held out for validation")
    p.add_argument("--seed", type=int, default=0, help="generator seed")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="two-stage training", formatter_class=fmt)
    p.add_argument("--data", type=Path, required=True, help="dataset directory with manifest.tsv")
    p.add_argument("--out", type=Path, required=True, help="run directory")
    _add_run_options(p)
    p.add_argument("--resume", type=Path, help="checkpoint to continue from")
    p.add_argument("--stop-after", type=int, help="stop after this epoch (0 writes an untrained checkpoint)")
    p.add_argument("--quiet", action="store_true", help="suppress per-epoch progress")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="rank-k evaluation of a checkpoint", formatter_class=fmt)
    p.add_argument("--checkpoint", type=Path, required=True, help="checkpoint written by train")
    p.add_argument("--data", type=Path, required=True, help="dataset directory with manifest.tsv")
    p.add_argument("--split", choices=("test", "val", "train"), default="test", help="split to rank")
    p.add_argument("--out", type=Path, help="write descriptors and the CMC report here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference gradient check of every component", formatter_class=fmt)
    p.add_argument("--seed", type=int, default=0, help="seed for the random test inputs")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("ablate", help="sweep one design axis over several seeds", formatter_class=fmt)
    p.add_argument("--axis", choices=sorted(pipeline.ABLATION_AXES), required=True, help="design axis to sweep")
    p.add_argument("--seeds", type=int, default=5, help="number of seeds")
    p.add_argument("--data", type=Path, help="dataset directory; one is generated per seed when omitted")
    p.add_argument("--out", type=Path, required=True, help="directory for runs and the comparison table")
    p.add_argument("--quiet", action="store_true", help="suppress per-epoch progress")
    _add_run_options(p)
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except (XMatchError, OSError) as exc:
        print(f"xmatch: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
