"""Command-line entry point: ``protodistill <command> [options]``.

Exit codes: 0 success, 1 validation error, 2 numerical failure.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

from . import files, pipeline
from .complexity import PromptBudget, budget_report
from .core import DivergenceError, NumericalError, ValidationError
from .synth import SynthSpec


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", help="pipeline config JSON, or a bundled preset name (B0..B7, two_stage)")
    p.add_argument("--seed", type=int, help="override the config / spec seed")
    p.add_argument("--out", default=".", help="output directory (default: current directory)")
    fmt = p.add_mutually_exclusive_group()
    fmt.add_argument("--json", dest="fmt", action="store_const", const="json", help="print JSON")
    fmt.add_argument("--table", dest="fmt", action="store_const", const="table", help="print an aligned table (default)")
    p.set_defaults(fmt="table")
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = argparse.ArgumentParser(prog="protodistill", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-synth", parents=[common], help="write a seeded synthetic dataset")
    p.add_argument("--spec", help="JSON file with SynthSpec fields (unknown keys rejected)")

    p = sub.add_parser("flag", parents=[common], help="annotate captions with the remote-sensing flag")
    p.add_argument("--captions", required=True)

    p = sub.add_parser("aggregate", parents=[common], help="build teacher text prototypes")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--captions", required=True, help="flagged caption file")

    p = sub.add_parser("train", parents=[common], help="train the prompt-tuned student")
    p.add_argument("--data", required=True)
    p.add_argument("--prototypes", help="prototype file (required when text/logit alignment is on)")

    p = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--mode", required=True, choices=pipeline.EVAL_MODES)

    p = sub.add_parser("complexity", parents=[common], help="prompt parameter and FLOPs budget")
    p.add_argument("--paper-defaults", action="store_true",
                   help="ViT-B/32 student: D=768/512, 12 layers, P=8/4, N=49/77")
    for name, default in (("d-v", 768), ("d-t", 512), ("l-v", 12), ("l-t", 12), ("p-v", 8), ("p-t", 4),
                          ("n-v", 49), ("n-t", 77), ("backbone-params", 87_849_216)):
        p.add_argument(f"--{name}", type=int, default=default)
    p.add_argument("--include-class-token", action="store_true")
    return parser


def _emit(args, report: dict, table: str) -> None:
    print(json.dumps(report, sort_keys=True, indent=2) if args.fmt == "json" else table)


def cmd_gen_synth(args) -> None:
    data = files.read_json(args.spec) if args.spec else {}
    if not isinstance(data, dict):
        raise ValidationError("spec file must be a JSON object")
    known = {f.name for f in dataclasses.fields(SynthSpec)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ValidationError(f"unknown spec keys: {unknown}")
    if args.seed is not None:
        data["seed"] = args.seed
    spec = SynthSpec(**data)
    paths = pipeline.gen_synth(spec, args.out)
    report = {name: str(path) for name, path in paths.items()}
    _emit(args, report, "\n".join(f"{k:20s} {v}" for k, v in report.items()))


def cmd_flag(args) -> None:
    cfg = pipeline.load_config(args.config, args.seed)
    pipeline.require_files([args.captions])
    annotated, summary = pipeline.flag_captions(args.captions, cfg.rules)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    files.write_caption_file(out / "captions_flagged.json", annotated)
    report = {str(k): v for k, v in summary.items()}
    lines = ["class  flagged  total   rate"] + [
        f"{k:>5}  {v['flagged']:>7}  {v['total']:>5}  {v['rate']:.2f}" for k, v in summary.items()
    ]
    _emit(args, report, "\n".join(lines))


def cmd_aggregate(args) -> None:
    cfg = pipeline.load_config(args.config, args.seed)
    protos = pipeline.aggregate(args.data, args.captions, cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    files.write_prototypes(out / "prototypes.json", protos, beta=cfg.aggregation.beta)
    report = {str(k): {"kept": len(p.kept_indices), "candidates": len(p.scores)} for k, p in protos.items()}
    lines = ["class  kept  candidates"] + [f"{k:>5}  {v['kept']:>4}  {v['candidates']:>10}" for k, v in report.items()]
    _emit(args, report, "\n".join(lines))


def cmd_train(args) -> None:
    cfg = pipeline.load_config(args.config, args.seed)
    inputs = [Path(args.data) / pipeline.LAYOUT[k] for k in ("teacher", "student", "class_tokens")]
    if args.prototypes:
        inputs.append(args.prototypes)
    pipeline.require_files(inputs)
    protos = files.read_prototypes(args.prototypes) if args.prototypes else None
    state = pipeline.run_training(args.data, cfg, protos)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg_dict = pipeline.config_to_dict(cfg)
    files.write_checkpoint(out / "checkpoint.json", cfg_dict, state.step, cfg.seed, state.model)
    files.write_loss_log(out / "loss_log.jsonl", state.loss_history)
    files.write_json(out / "config_echo.json", cfg_dict)
    last = state.loss_history[-1].as_dict() if state.loss_history else {}
    report = {"steps": state.step, "final": last, "tau_s": state.model.tau_s}
    table = f"steps {state.step}\n" + "\n".join(f"{k:24s} {v:.6f}" for k, v in last.items())
    _emit(args, report, table)


def cmd_eval(args) -> None:
    pipeline.require_files([args.checkpoint, Path(args.data) / pipeline.LAYOUT["student"]])
    ckpt = files.read_checkpoint(args.checkpoint)
    report = pipeline.evaluate(args.data, ckpt, args.mode)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    files.write_json(out / f"report_{args.mode}.json", report)
    _emit(args, report, pipeline.render_table(report))


def cmd_complexity(args) -> None:
    if args.paper_defaults:
        budget = PromptBudget.vit_b32(args.backbone_params, args.include_class_token)
    else:
        budget = PromptBudget(args.d_v, args.d_t, args.l_v, args.l_t, args.p_v, args.p_t, args.n_v, args.n_t,
                              args.backbone_params, args.include_class_token)
    rep = budget_report(budget)
    table = "\n".join([
        f"prompt parameters   {rep['prompt_params']:,}",
        f"fraction of backbone {100 * rep['param_fraction']:.3f}%  (below 1%: {rep['below_one_percent']})",
        f"vision  attention +{100 * rep['vision']['attention_overhead']:.1f}%  mlp +{100 * rep['vision']['mlp_overhead']:.1f}%",
        f"text    attention +{100 * rep['text']['attention_overhead']:.1f}%  mlp +{100 * rep['text']['mlp_overhead']:.1f}%",
    ])
    _emit(args, rep, table)


COMMANDS = {
    "gen-synth": cmd_gen_synth,
    "flag": cmd_flag,
    "aggregate": cmd_aggregate,
    "train": cmd_train,
    "eval": cmd_eval,
    "complexity": cmd_complexity,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        COMMANDS[args.command](args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except DivergenceError as exc:
        print(f"error: training diverged at step {exc.step}: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
