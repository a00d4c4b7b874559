"""Command-line entry point: ``ema2s <subcommand> [options]``."""

import argparse
import logging
import sys
from pathlib import Path

from .exceptions import EMA2SError, StageError

log = logging.getLogger("ema2s")


def _config(args):
    from .experiments import ExperimentConfig

    cfg = ExperimentConfig.from_yaml(args.config) if args.config else ExperimentConfig.from_dict({})
    return cfg.with_overrides(
        seed=getattr(args, "seed", None),
        variant=getattr(args, "variant", None),
        sensors=getattr(args, "sensors", None),
        out=getattr(args, "out", None),
        corpus_dir=getattr(args, "corpus", None),
    )


def cmd_gen_corpus(args):
    from .synthdata import build_corpus

    cfg = _config(args)
    manifest = build_corpus(cfg.corpus_config, cfg.out)
    print(f"wrote {manifest['n_train']} train / {manifest['n_test']} test utterances to {cfg.out}")
    for w in manifest["warnings"]:
        print(f"warning: {w}")


def cmd_train(args):
    from .experiments import train_run

    out, stage1, stage2, _, _ = train_run(_config(args))
    if stage1 is not None:
        print(f"stage 1: {stage1.step} steps, final epoch loss {stage1.epoch_losses[-1]:.6f}")
    print(f"stage 2: {stage2.step} steps, final epoch loss {stage2.epoch_losses[-1]:.6f}")
    print(f"checkpoints in {out}")


def _checkpoint_and_corpus(args):
    from .experiments import load_run_checkpoint, run_config
    from .fileio import load_checkpoint
    from .synthdata import load_corpus

    if args.checkpoint:
        ckpt = load_checkpoint(args.checkpoint)
        cfg = _config(args)
    else:
        ckpt = load_run_checkpoint(args.run)
        cfg = run_config(args.run).with_overrides(corpus_dir=args.corpus, out=args.out)
    corpus_dir = args.corpus or cfg.raw["corpus_dir"] or str(Path(args.run or ".") / "corpus")
    test = load_corpus(corpus_dir, args.split, cfg.sensors)
    return ckpt, cfg, test


def cmd_synth(args):
    from .fileio import write_mel, write_wav
    from .training import synthesize

    ckpt, cfg, test = _checkpoint_and_corpus(args)
    out = Path(args.out or (Path(args.run) / "synth" if args.run else "synth"))
    out.mkdir(parents=True, exist_ok=True)
    for ex in test.examples:
        _, mel, wave = synthesize(ex.ema, ckpt, cfg.raw["metrics"]["gl_iterations"])
        write_mel(out / f"{ex.id}.f32", mel)
        write_wav(out / f"{ex.id}.wav", wave)
    print(f"synthesized {len(test.examples)} utterances into {out}")


def cmd_eval(args):
    from .experiments import evaluate_checkpoint

    ckpt, cfg, test = _checkpoint_and_corpus(args)
    out = Path(args.out or args.run or "eval")
    report = evaluate_checkpoint(cfg, ckpt, test, out)
    agg = report.aggregate
    print(f"MCD {agg['mcd_db']:.3f} dB  STOI {agg['stoi']:.3f}  CCR {agg['ccr']:.3f}  "
          f"({agg['n']} utterances, {agg['failures']} failures)")


def cmd_ablate(args):
    from .experiments import run_ablation

    variants = [v.strip() for v in args.variants.split(",") if v.strip()]
    table = run_ablation(_config(args), variants)
    print(table.to_markdown())


def cmd_compare(args):
    from .experiments import compare_reports

    table = compare_reports(args.reports)
    print(table.to_markdown())
    if args.out:
        table.save(args.out)


def build_parser():
    parser = argparse.ArgumentParser(prog="ema2s", description="Articulatory-to-speech training and evaluation")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, variant=True):
        p.add_argument("--config", help="YAML experiment config")
        p.add_argument("--seed", type=int)
        p.add_argument("--sensors", help="'all', 'fewer' or a comma list such as UL,LL,LJ,T1")
        p.add_argument("--out", help="output directory")
        p.add_argument("--corpus", help="existing corpus directory")
        if variant:
            p.add_argument("--variant", choices=["S_I", "S_II", "S_III", "EMA2S"])

    p = sub.add_parser("gen-corpus", help="generate the synthetic corpus")
    common(p, variant=False)
    p.set_defaults(func=cmd_gen_corpus)

    p = sub.add_parser("train", help="run the training stages of one variant")
    common(p)
    p.set_defaults(func=cmd_train)

    for name, func, helptext in (("synth", cmd_synth, "synthesize a split from a checkpoint"),
                                 ("eval", cmd_eval, "synthesize and score a split")):
        p = sub.add_parser(name, help=helptext)
        common(p)
        src = p.add_mutually_exclusive_group(required=True)
        src.add_argument("--run", help="run directory produced by 'train'")
        src.add_argument("--checkpoint", help="stage-2 checkpoint file")
        p.add_argument("--split", default="test", choices=["train", "test", "all"])
        p.set_defaults(func=func)

    p = sub.add_parser("ablate", help="train and compare several variants")
    common(p, variant=False)
    p.add_argument("--variants", default="S_I,S_II,S_III,EMA2S")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("compare", help="merge saved metrics reports")
    p.add_argument("reports", nargs="*")
    p.add_argument("--out")
    p.set_defaults(func=cmd_compare)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "compare" and not args.reports:
        parser.error("compare needs at least one report path")
    try:
        args.func(args)
    except StageError as exc:
        print(f"error in stage '{exc.stage}': {exc}", file=sys.stderr)
        return 2
    except (EMA2SError, OSError) as exc:
        print(f"error in {args.command}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
