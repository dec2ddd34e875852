"""Command line entry point: ``perturblab <command> [flags]``.

Exit status: 0 success, 1 usage error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import checkpoint, perturb
from .data import DEFAULT_N_TEST, DEFAULT_N_TRAIN, DEFAULT_SEED, gen_split, gen_synthetic, load_dataset, save_dataset
from .ensemble import EnsembleSpec, build_components, fuse_params, fuse_scores
from .evaluate import DEFAULT_FDR, score_dataset, tdr_at_fdr
from .network import TrainConfig, default_spec, train
from .params import layer_stats, param_count
from .perturb import PerturbationSpec
from .sweep import SweepConfig, SweepError, read_rows, run_sweep, summarize

log = logging.getLogger("perturblab")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def _config(value: str | None) -> dict:
    """Inline JSON object or a path to a JSON file."""
    if value is None:
        return {}
    text = value if value.lstrip().startswith("{") else Path(value).read_text()
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise UsageError(f"--config is not valid JSON: {exc}") from exc
    if not isinstance(obj, dict):
        raise UsageError("--config must be a JSON object")
    return obj


def _dataset(args, split: str):
    if args.data:
        return load_dataset(args.data, split)
    seed = DEFAULT_SEED if args.data_seed is None else args.data_seed
    return gen_split(DEFAULT_N_TEST if split != "train" else DEFAULT_N_TRAIN, seed, split)


def _need(args, *names):
    for n in names:
        if getattr(args, n) is None:
            raise UsageError(f"--{n.replace('_', '-')} is required for {args.command}")


def cmd_gen(args):
    _need(args, "out")
    cfg = _config(args.config)
    seed = args.seed if args.seed is not None else cfg.get("seed", DEFAULT_SEED)
    tr, te = gen_synthetic(cfg.get("n_train", DEFAULT_N_TRAIN), cfg.get("n_test", DEFAULT_N_TEST), seed)
    save_dataset(args.out, tr, te)
    print(json.dumps({"train": tr.counts(), "test": te.counts(), "seed": seed}))


def cmd_train(args):
    _need(args, "out")
    cfg = _config(args.config)
    if args.seed is not None:
        cfg["seed"] = args.seed
    tcfg = TrainConfig(**cfg)
    model = train(default_spec(), _dataset(args, "train"), tcfg)
    checkpoint.save(model, args.out)
    last = model.history[-1] if model.history else {}
    print(json.dumps({"epochs_run": len(model.history), **last}))


def cmd_eval(args):
    _need(args, "model")
    model = checkpoint.load(args.model)
    data = _dataset(args, args.split)
    scores = score_dataset(model, data, str(args.model), str(args.data or f"synthetic:{args.split}"))
    if args.out:
        scores.to_csv(args.out)
    print(json.dumps(tdr_at_fdr(scores, args.fdr).to_dict()))


def cmd_perturb(args):
    _need(args, "model", "out")
    d = _config(args.config)
    if args.seed is not None:
        d["seed"] = args.seed
    spec = PerturbationSpec.from_json(d)
    checkpoint.save(perturb.apply(checkpoint.load(args.model), spec), args.out)
    print(json.dumps(spec.to_json()))


def cmd_sweep(args):
    _need(args, "config")
    d = _config(args.config)
    if args.model:
        d["model_path"] = args.model
    if args.data:
        d["data_path"] = args.data
    if args.seed is not None:
        d["master_seed"] = args.seed
    if args.fdr is not None:
        d["fdr_target"] = args.fdr
    if args.workers is not None:
        d["workers"] = args.workers
    cfg = SweepConfig.from_json(d)
    report = run_sweep(cfg, out=args.out)
    if not args.out:
        sys.stdout.write(report.csv_text())
    else:
        print(json.dumps({"rows": len(report.rows), "original_tdr": report.original.tdr, "out": args.out}))


def cmd_ensemble(args):
    _need(args, "model")
    mode = {"score": "score_level", "param": "parameter_level"}[args.mode]
    seed = args.seed if args.seed is not None else 0
    if args.config:
        spec = EnsembleSpec.from_json({"mode": mode, **_config(args.config)})
    else:
        spec = EnsembleSpec.default(mode, seed)
    model = checkpoint.load(args.model)
    data = _dataset(args, args.split)
    fdr = args.fdr if args.fdr is not None else DEFAULT_FDR
    original = tdr_at_fdr(score_dataset(model, data), fdr)
    components = build_components(model, spec)
    if spec.mode == "parameter_level":
        merged = fuse_params(components)
        result = tdr_at_fdr(score_dataset(merged, data), fdr)
        if args.out:
            checkpoint.save(merged, args.out)
    else:
        fused = fuse_scores([score_dataset(m, data) for m in components])
        result = tdr_at_fdr(fused, fdr)
        if args.out:
            fused.to_csv(args.out)
    print(json.dumps({"mode": spec.mode, "components": [c.to_json() for c in spec.components],
                      "original_tdr": original.tdr, "ensemble_tdr": result.tdr,
                      "fdr_achieved": result.fdr_achieved}))


def cmd_stats(args):
    _need(args, "model")
    model = checkpoint.load(args.model)
    stats = layer_stats(model)
    counts = param_count(model)
    if args.out:
        Path(args.out).write_text(json.dumps({
            "layers": [vars(s) for s in stats], "param_count": counts}, indent=2) + "\n")
    print(f"{'name':<10} {'count':>8} {'mean':>12} {'std':>12}")
    for s in stats:
        print(f"{s.layer_name:<10} {s.count:>8d} {s.mean:>12.6f} {s.std:>12.6f}")
    print(f"params: weights={counts['weights']} bias={counts['bias']} total={counts['total']}")


def cmd_report(args):
    _need(args, "input")
    summary = summarize(read_rows(args.input))
    text = json.dumps(summary, indent=2, sort_keys=True) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)


COMMANDS = {
    "gen": cmd_gen, "train": cmd_train, "eval": cmd_eval, "perturb": cmd_perturb,
    "sweep": cmd_sweep, "ensemble": cmd_ensemble, "stats": cmd_stats, "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="perturblab", description="Weight perturbation experiments on a toy CNN detector.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", help="inline JSON object or path to a JSON file")
        s.add_argument("--seed", type=int)
        s.add_argument("--out")
        s.add_argument("--fdr", type=float, default=None if name in ("sweep", "ensemble") else DEFAULT_FDR,
                       help="false detection rate target in percent (default 0.2)")
        if name in ("eval", "perturb", "sweep", "ensemble", "stats"):
            s.add_argument("--model", help="path to a .plab checkpoint")
        if name in ("train", "eval", "sweep", "ensemble"):
            s.add_argument("--data", help="dataset .npz written by `gen`")
            s.add_argument("--data-seed", type=int, help="synthetic data seed when --data is absent")
        if name in ("eval", "ensemble"):
            s.add_argument("--split", default="test", choices=["train", "test", "val"])
        if name == "sweep":
            s.add_argument("--workers", type=int)
        if name == "ensemble":
            s.add_argument("--mode", choices=["score", "param"], required=True)
        if name == "report":
            s.add_argument("--input", help="sweep CSV")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return 0 if exc.code in (0, None) else 1
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"perturblab {args.command}: {exc}", file=sys.stderr)
        return 1
    except SweepError as exc:
        print(f"perturblab sweep: {exc} (partial report written)", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001
        log.debug("command failed", exc_info=True)
        print(f"perturblab {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
