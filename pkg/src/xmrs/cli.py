"""Command-line entry point (``xmrs``).

Report-producing commands write a CSV and, unless ``--no-plots`` is given, a
PNG with the same stem next to it.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np

from .config import ABLATIONS, CONTRASTIVE_VARIANTS, ModelConfig, ablate, load_config
from .dataset import (
    ConfigurationError,
    DatasetError,
    generate_synthetic,
    load_dataset,
    parse_dims_arg,
    read_manifest,
    split_dataset,
    write_dataset,
)
from .metrics import evaluate
from .model import count_parameters
from .training import (
    LOG_FIELDS,
    TRACE_FIELDS,
    Trainer,
    TrainingDivergedError,
    configure_threads,
    epoch_similarity_summary,
    load_checkpoint,
    save_checkpoint,
    write_csv,
)

log = logging.getLogger("xmrs")

METRIC_FIELDS = ("acc2", "f1", "mae", "corr", "acc7")
SWEEP_FIELDS = ("swept_value",) + METRIC_FIELDS
LAMBDA_SWEEP_FIELDS = SWEEP_FIELDS + ("init_abs_diff",)
ABLATION_FIELDS = ("variant", "n_params") + METRIC_FIELDS
CONTRASTIVE_FIELDS = ("variant",) + METRIC_FIELDS
SIMILARITY_FIELDS = ("epoch", "mean_pos_sim", "mean_neg_sim")

CSV_HELP = f"""\
CSV schemas:
  training log        {', '.join(LOG_FIELDS)}
  retrieval trace     {', '.join(TRACE_FIELDS)}
  similarity summary  {', '.join(SIMILARITY_FIELDS)}
  prompt-length sweep {', '.join(SWEEP_FIELDS)}
  lambda sweep        {', '.join(LAMBDA_SWEEP_FIELDS)}
  ablation suite      {', '.join(ABLATION_FIELDS)}
  contrastive compare {', '.join(CONTRASTIVE_FIELDS)}
  results (eval)      checkpoint, split, {', '.join(METRIC_FIELDS)}, n_eval, n_excluded_zero

Set XMRS_THREADS=0 for single-threaded, deterministic runs.
"""


def _float_list(text: str) -> List[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from exc


def _int_list(text: str) -> List[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from exc


def _ablation_list(text: str) -> List[str]:
    flags = [v.strip() for v in text.split(",") if v.strip()]
    bad = [f for f in flags if f not in ABLATIONS]
    if bad:
        raise argparse.ArgumentTypeError(f"unknown ablation flag(s) {bad}; known: {', '.join(ABLATIONS)}")
    return flags


def _add_model_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("model / training (override --config)")
    g.add_argument("--config", type=Path, help="JSON file with ModelConfig fields")
    g.add_argument("--seed", type=int)
    g.add_argument("--epochs", type=int)
    g.add_argument("--batch-size", type=int)
    g.add_argument("--lr", type=float, dest="learning_rate")
    g.add_argument("--d-model", type=int)
    g.add_argument("--d-shared", type=int)
    g.add_argument("--prompt-len", type=int)
    g.add_argument("--gamma", type=float)
    g.add_argument("--lambda", type=float, dest="lam")
    g.add_argument("--temperature", type=float)
    g.add_argument("--contrastive", choices=CONTRASTIVE_VARIANTS, dest="contrastive_variant")
    g.add_argument("--ablate", type=_ablation_list, default=None, metavar="FLAGS",
                   help=f"comma-separated subset of {', '.join(ABLATIONS)}")
    g.add_argument("--dtype", choices=("float32", "float64"))


def _add_data_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data", type=Path, required=True, help="dataset directory containing manifest.json")
    p.add_argument("--eval-split", default=None, help="split to report on (default: test, else valid)")


def _add_report_flags(p: argparse.ArgumentParser, default_out: str) -> None:
    p.add_argument("--out", type=Path, default=Path(default_out), help="output directory")
    p.add_argument("--no-plots", action="store_true", help="skip PNG figures")
    p.add_argument("--repeats", type=int, default=1, help="seeds per setting; reported metrics are means")


def build_config(args) -> ModelConfig:
    base = load_config(args.config) if getattr(args, "config", None) else ModelConfig()
    overrides = {}
    for name in ("seed", "epochs", "batch_size", "learning_rate", "d_model", "d_shared", "prompt_len",
                 "gamma", "lam", "temperature", "contrastive_variant", "dtype"):
        v = getattr(args, name, None)
        if v is not None:
            overrides[name] = v
    cfg = base.replace(**overrides) if overrides else base
    if getattr(args, "ablate", None):
        cfg = ablate(cfg, args.ablate)
    return cfg


class Splits:
    def __init__(self, data_dir: Path, eval_split: Optional[str] = None):
        declared = read_manifest(data_dir).get("splits", {})
        if "train" not in declared:
            raise DatasetError(f"{data_dir}: manifest declares no train split")
        self.train = load_dataset(data_dir, "train")
        self.valid = load_dataset(data_dir, "valid") if "valid" in declared else None
        name = eval_split or ("test" if "test" in declared else "valid" if "valid" in declared else "train")
        self.eval_name = name
        self.eval = {"train": self.train, "valid": self.valid}.get(name) if name in ("train", "valid") else None
        if self.eval is None:
            self.eval = load_dataset(data_dir, name)


def _seeds(cfg: ModelConfig, repeats: int) -> List[int]:
    if repeats < 1:
        raise ConfigurationError(f"--repeats must be >= 1, got {repeats}")
    return [cfg.seed + k for k in range(repeats)]


def run_one(splits: Splits, cfg: ModelConfig, trace: bool = False, trace_ids=None):
    trainer = Trainer(splits.train, splits.valid, cfg, trace=trace, trace_ids=trace_ids).fit()
    best = trainer.best_checkpoint().build_model()
    preds = best.predict(splits.eval, best.memory_bank(splits.train))
    return evaluate(preds, splits.eval.labels), trainer


def run_repeated(splits: Splits, cfg: ModelConfig, repeats: int):
    reports, trainers = [], []
    for seed in _seeds(cfg, repeats):
        rep, tr = run_one(splits, cfg.replace(seed=seed))
        reports.append(rep)
        trainers.append(tr)
    mean = {k: float(np.mean([getattr(r, k) for r in reports])) for k in METRIC_FIELDS}
    return mean, reports, trainers


def _metric_row(values: dict) -> dict:
    return {k: repr(float(values[k])) for k in METRIC_FIELDS}


def cmd_gen_synthetic(args) -> int:
    dims = parse_dims_arg(args.dims)
    sizes = {}
    for part in args.splits.split(","):
        name, _, k = part.partition("=")
        sizes[name.strip()] = int(k)
    total = sum(sizes.values())
    if total != args.n:
        raise ConfigurationError(f"--splits sizes sum to {total}, but --n is {args.n}")
    ds = generate_synthetic(args.n, dims, args.signal, args.seed)
    for part in split_dataset(ds, sizes).values():
        write_dataset(part, args.out)
    print(json.dumps({"out": str(args.out), "splits": sizes}))
    return 0


def cmd_train(args) -> int:
    cfg = build_config(args)
    splits = Splits(args.data, args.eval_split)
    out: Path = args.out
    summaries = []
    for seed in _seeds(cfg, args.repeats):
        run_cfg = cfg.replace(seed=seed)
        run_dir = out if args.repeats == 1 else out / f"seed{seed}"
        if args.resume:
            trainer = Trainer.resume(load_checkpoint(args.resume), splits.train, splits.valid)
            run_cfg = trainer.config
        else:
            trainer = Trainer(splits.train, splits.valid, run_cfg)
        trainer.fit()
        save_checkpoint(trainer.checkpoint(), run_dir / "last.ckpt")
        best = trainer.best_checkpoint()
        save_checkpoint(best, run_dir / "best.ckpt")
        write_csv(run_dir / "train_log.csv", LOG_FIELDS, trainer.log)
        if trainer.history:
            write_csv(run_dir / "history.csv", list(trainer.history[0].keys()), trainer.history)
        if not args.no_plots and trainer.log:
            from .plots import plot_training_log

            plot_training_log(trainer.log, run_dir / "train_log.png")
        model = best.build_model()
        rep = evaluate(model.predict(splits.eval, model.memory_bank(splits.train)), splits.eval.labels)
        summary = {"seed": run_cfg.seed, "split": splits.eval_name, "n_params": count_parameters(model),
                   **rep.as_dict()}
        with open(run_dir / "report.json", "w") as fh:
            json.dump(summary, fh, indent=2)
        summaries.append(summary)
    result = summaries[0] if len(summaries) == 1 else {
        "runs": summaries,
        "mean": {k: float(np.mean([s[k] for s in summaries])) for k in METRIC_FIELDS},
        "max": {k: float(np.max([s[k] for s in summaries])) for k in METRIC_FIELDS},
    }
    if len(summaries) > 1:
        with open(out / "report.json", "w") as fh:
            json.dump(result, fh, indent=2)
    print(json.dumps(result, indent=2))
    return 0


def cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    model = ckpt.build_model()
    bank_set = load_dataset(args.data, args.bank_split)
    eval_set = load_dataset(args.data, args.split)
    rep = evaluate(model.predict(eval_set, model.memory_bank(bank_set)), eval_set.labels, acc2_mode=args.acc2_mode)
    out = rep.as_dict()
    print(json.dumps(out, indent=2))
    if args.results_csv:
        path = Path(args.results_csv)
        fields = ["checkpoint", "split", *METRIC_FIELDS, "n_eval", "n_excluded_zero"]
        new = not path.exists()
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "a", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=fields, extrasaction="ignore")
            if new:
                w.writeheader()
            w.writerow({"checkpoint": str(args.checkpoint), "split": args.split, **out})
    return 0


def _plot(args, fn, *a, **kw):
    if not args.no_plots:
        from . import plots

        getattr(plots, fn)(*a, **kw)


def cmd_ablate_suite(args) -> int:
    cfg = build_config(args)
    splits = Splits(args.data, args.eval_split)
    variants = [("full", [])] + [(f"w/o {f[3:].upper()}", [f]) for f in ABLATIONS]
    rows = []
    for name, flags in variants:
        vcfg = ablate(cfg, flags)
        mean, _, trainers = run_repeated(splits, vcfg, args.repeats)
        rows.append({"variant": name, "n_params": trainers[0].n_parameters, **_metric_row(mean)})
        log.info("%s: %s", name, rows[-1])
    write_csv(args.out / "ablation.csv", ABLATION_FIELDS, rows)
    _plot(args, "plot_bars", rows, "variant", args.out / "ablation.png", title="ablations")
    print(json.dumps(rows, indent=2))
    return 0


def cmd_sweep_prompt_len(args) -> int:
    cfg = build_config(args)
    splits = Splits(args.data, args.eval_split)
    for v in args.values:
        if v < 1:
            raise ConfigurationError(f"prompt lengths must be >= 1, got {v}")
    rows = []
    for v in args.values:
        mean, _, _ = run_repeated(splits, cfg.replace(prompt_len=v), args.repeats)
        rows.append({"swept_value": v, **_metric_row(mean)})
    write_csv(args.out / "sweep_prompt_len.csv", SWEEP_FIELDS, rows)
    _plot(args, "plot_sweep", rows, args.out / "sweep_prompt_len.png", xlabel="prompt length")
    print(json.dumps(rows, indent=2))
    return 0


def cmd_sweep_lambda(args) -> int:
    cfg = build_config(args)
    splits = Splits(args.data, args.eval_split)
    for v in args.values:
        if v < 0:
            raise ConfigurationError(f"lambda values must be >= 0, got {v}")
    rows = []
    for v in args.values:
        mean, _, trainers = run_repeated(splits, cfg.replace(lam=v), args.repeats)
        diffs = []
        for tr in trainers:
            first = tr.log[0]
            diffs.append(abs(v * float(first["l_ccrl"]) - float(first["l_msa"])))
        rows.append({"swept_value": v, **_metric_row(mean), "init_abs_diff": repr(float(np.mean(diffs)))})
    write_csv(args.out / "sweep_lambda.csv", LAMBDA_SWEEP_FIELDS, rows)
    _plot(args, "plot_sweep", rows, args.out / "sweep_lambda.png", xlabel="lambda",
          secondary="init_abs_diff", secondary_label="|lambda*l_ccrl - l_msa| at step 1")
    print(json.dumps(rows, indent=2))
    return 0


def cmd_trace_retrieval(args) -> int:
    cfg = build_config(args)
    splits = Splits(args.data, args.eval_split)
    ids = set(args.sample_ids.split(",")) if args.sample_ids else None
    trainer = Trainer(splits.train, splits.valid, cfg, trace=True, trace_ids=ids).fit()
    write_csv(args.out / "trace_retrieval.csv", TRACE_FIELDS, trainer.trace)
    summary = epoch_similarity_summary(trainer.trace, len(splits.train), cfg.batch_size)
    write_csv(args.out / "similarity_by_epoch.csv", SIMILARITY_FIELDS,
              [{k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()} for r in summary])
    _plot(args, "plot_similarity", summary, args.out / "similarity_by_epoch.png",
          title=f"retrieval similarity ({cfg.contrastive_variant})")
    print(json.dumps({"rows": len(trainer.trace), "first": summary[0] if summary else None,
                      "last": summary[-1] if summary else None}, indent=2))
    return 0


def cmd_compare_contrastive(args) -> int:
    cfg = build_config(args)
    splits = Splits(args.data, args.eval_split)
    rows = []
    for variant in args.variants:
        mean, _, _ = run_repeated(splits, cfg.replace(contrastive_variant=variant), args.repeats)
        rows.append({"variant": variant, **_metric_row(mean)})
    write_csv(args.out / "compare_contrastive.csv", CONTRASTIVE_FIELDS, rows)
    _plot(args, "plot_bars", rows, "variant", args.out / "compare_contrastive.png", title="contrastive objective")
    print(json.dumps(rows, indent=2))
    return 0


def _variants(text: str) -> List[str]:
    out = [v.strip() for v in text.split(",") if v.strip()]
    bad = [v for v in out if v not in CONTRASTIVE_VARIANTS]
    if bad:
        raise argparse.ArgumentTypeError(f"unknown variant(s) {bad}")
    return out


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="xmrs",
        description="Retrieval-augmented multimodal sentiment regression: training, evaluation and analyses.",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog=CSV_HELP,
    )
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    def add(name, fn, help_text):
        p = sub.add_parser(name, help=help_text, description=help_text, epilog=CSV_HELP,
                           formatter_class=argparse.RawDescriptionHelpFormatter)
        p.set_defaults(func=fn)
        return p

    p = add("gen-synthetic", cmd_gen_synthetic, "write a synthetic dataset directory")
    p.add_argument("--n", type=int, required=True, help="total number of samples")
    p.add_argument("--dims", required=True, help="e.g. text=8x12,visual=8x10,acoustic=8x8 (LxD)")
    p.add_argument("--signal", type=float, default=2.0, help="polarity signal strength")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--splits", default=None, help="sizes, e.g. train=200,valid=50,test=50 (default: all train)")

    p = add("train", cmd_train, "train a model; writes best/last checkpoints, log CSV and report")
    _add_data_flags(p)
    _add_model_flags(p)
    _add_report_flags(p, "runs/train")
    p.add_argument("--resume", type=Path, help="resume from a last.ckpt")

    p = add("eval", cmd_eval, "evaluate a checkpoint; prints the report as JSON")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--bank-split", default="train", help="split used as the inference memory bank")
    p.add_argument("--acc2-mode", choices=("nonzero", "all"), default="nonzero")
    p.add_argument("--results-csv", type=Path, help="append the report to this CSV")

    p = add("ablate-suite", cmd_ablate_suite, "train the full model and the four single ablations")
    _add_data_flags(p)
    _add_model_flags(p)
    _add_report_flags(p, "runs/ablation")

    p = add("sweep-prompt-len", cmd_sweep_prompt_len, "metrics versus prompt length")
    _add_data_flags(p)
    _add_model_flags(p)
    _add_report_flags(p, "runs/sweep_prompt_len")
    p.add_argument("--values", type=_int_list, default=[16, 64, 128, 256])

    p = add("sweep-lambda", cmd_sweep_lambda, "metrics versus contrastive loss weight")
    _add_data_flags(p)
    _add_model_flags(p)
    _add_report_flags(p, "runs/sweep_lambda")
    p.add_argument("--values", type=_float_list,
                   default=[0.0002, 0.0004, 0.0006, 0.0008, 0.001, 0.0012, 0.0014, 0.0016, 0.0018])

    p = add("trace-retrieval", cmd_trace_retrieval, "log retrieved positives/negatives at every step")
    _add_data_flags(p)
    _add_model_flags(p)
    _add_report_flags(p, "runs/trace")
    p.add_argument("--sample-ids", help="comma-separated sample ids to trace (default: all)")

    p = add("compare-contrastive", cmd_compare_contrastive, "contrastive objective variants side by side")
    _add_data_flags(p)
    _add_model_flags(p)
    _add_report_flags(p, "runs/compare_contrastive")
    p.add_argument("--variants", type=_variants, default=list(CONTRASTIVE_VARIANTS))
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "gen-synthetic" and args.splits is None:
        args.splits = f"train={args.n}"
    try:
        # flags are validated before any computation
        if args.command != "gen-synthetic" and hasattr(args, "config"):
            build_config(args)
        if getattr(args, "repeats", 1) < 1:
            raise ConfigurationError(f"--repeats must be >= 1, got {args.repeats}")
        configure_threads()
        return args.func(args)
    except ConfigurationError as exc:
        parser.print_usage(sys.stderr)
        print(f"xmrs {args.command}: configuration error: {exc}", file=sys.stderr)
        return 2
    except (DatasetError, TrainingDivergedError, ValueError, OSError) as exc:
        print(f"xmrs {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
