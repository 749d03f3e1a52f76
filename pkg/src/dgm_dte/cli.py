"""Command line entry points: gen-data, train, eval, ablate, sweep.

Every command is deterministic for fixed flags and seeds, writes the merged
effective configuration next to its outputs, and reports failures as a single
``error: ...`` line on stderr with a nonzero exit code.  Config files are JSON
with optional ``model``, ``generator``, ``split`` and ``shot`` sections;
command line flags override file values.
"""

from __future__ import annotations

import argparse
import csv
import json
import statistics
import sys
from dataclasses import asdict, fields, replace
from pathlib import Path

import numpy as np

from .data import (
    GeneratorConfig,
    ShotSpec,
    SplitSpec,
    balanced_resample,
    config_from_dict,
    generate_orders,
    read_orders_csv,
    shot_labels,
    split_orders,
    write_orders_csv,
)
from .graphs import assign_nodes, build_graphs
from .metrics import evaluate, report_table
from .model import (
    VARIANTS,
    DGMModel,
    ModelConfig,
    evaluate_model,
    model_config_from_dict,
    train_model,
)
from .numerics import load_checkpoint, save_checkpoint
from . import plotting

CONFIG_SECTIONS = ("model", "generator", "split", "shot")

# Desk-scale defaults: 10k synthetic orders, batch 256, 30 epochs.  The
# warehouse-scale counterpart (450k orders, batch 2048) uses the same code
# paths; only these numbers and the wall clock change.

LOG_COLUMNS = ("epoch", "train_loss", "val_mae", "val_mape", "val_ew")


class CliError(ValueError):
    pass


# -- config plumbing ---------------------------------------------------------


def _spec_from_dict(cls, d: dict, what: str):
    known = {f.name for f in fields(cls)}
    bad = set(d) - known
    if bad:
        raise CliError(f"unknown {what} option(s): {sorted(bad)}")
    return replace(cls(), **d)


def load_config_file(path) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
    except json.JSONDecodeError as exc:
        raise CliError(f"config {path}: invalid JSON ({exc})") from exc
    if not isinstance(raw, dict):
        raise CliError(f"config {path}: expected a JSON object at top level")
    bad = set(raw) - set(CONFIG_SECTIONS)
    if bad:
        raise CliError(
            f"config {path}: unknown section(s) {sorted(bad)}, "
            f"expected {list(CONFIG_SECTIONS)}"
        )
    return raw


def merged_configs(args) -> dict:
    """File sections merged with command line overrides, as plain dicts."""
    raw = load_config_file(args.config) if getattr(args, "config", None) else {}
    model_d = dict(raw.get("model", {}))
    gen_d = dict(raw.get("generator", {}))
    split_d = dict(raw.get("split", {}))
    shot_d = dict(raw.get("shot", {}))

    for flag, key in (("variant", "variant"), ("epochs", "epochs"), ("seed", "seed")):
        value = getattr(args, flag, None)
        if value is not None:
            model_d[key] = value
    if getattr(args, "tail_weight", None) is not None:
        gen_d["tail_weight"] = args.tail_weight
    return {"model": model_d, "generator": gen_d, "split": split_d, "shot": shot_d}


def build_specs(sections: dict):
    model_cfg = model_config_from_dict(sections["model"])
    gen_cfg = config_from_dict(sections["generator"])
    split_spec = _spec_from_dict(SplitSpec, sections["split"], "split")
    shot_spec = _spec_from_dict(ShotSpec, sections["shot"], "shot")
    return model_cfg, gen_cfg, split_spec, shot_spec


def write_effective_config(sections_used: dict, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(sections_used, fh, indent=2, sort_keys=True)
        fh.write("\n")


def effective_sections(model_cfg=None, gen_cfg=None, split_spec=None, shot_spec=None) -> dict:
    out = {}
    if model_cfg is not None:
        out["model"] = asdict(model_cfg)
        out["model"]["dnn_dims"] = list(model_cfg.dnn_dims)
        out["model"]["classifier_dims"] = list(model_cfg.classifier_dims)
    if gen_cfg is not None:
        out["generator"] = asdict(gen_cfg)
    if split_spec is not None:
        out["split"] = asdict(split_spec)
    if shot_spec is not None:
        out["shot"] = asdict(shot_spec)
    return out


def _config_path_for(out_path: Path) -> Path:
    return out_path.with_name(out_path.stem + ".config.json")


# -- shared data loading -------------------------------------------------------


def _load_splits(args, split_spec):
    orders = read_orders_csv(args.data)
    return split_orders(orders, split_spec)


def _write_log_csv(path, rows: list[dict]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=LOG_COLUMNS)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: repr(row[k]) if isinstance(row[k], float) else row[k]
                             for k in LOG_COLUMNS})


# -- commands -------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    sections = merged_configs(args)
    gen_d = sections["generator"]
    if args.seed is not None:
        gen_d["seed"] = args.seed
    if args.n_orders is not None:
        gen_d["n_orders"] = args.n_orders
    gen_cfg = config_from_dict(gen_d)

    orders = generate_orders(gen_cfg)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_orders_csv(out, orders)
    write_effective_config(effective_sections(gen_cfg=gen_cfg), _config_path_for(out))
    threshold = float(sections["model"].get("threshold_hours", ModelConfig.threshold_hours))
    if args.plot:
        plotting.save_label_hist(
            orders.delivery_hours, out.with_suffix(".hist.png"), threshold=threshold
        )
    tail_frac = float((orders.delivery_hours > threshold).mean())
    print(f"wrote {len(orders)} orders to {out} (tail fraction {tail_frac:.3f})")
    return 0


def cmd_train(args) -> int:
    sections = merged_configs(args)
    model_cfg, _, split_spec, shot_spec = build_specs(sections)
    train, val, _ = _load_splits(args, split_spec)
    if len(train) == 0 or len(val) == 0:
        raise CliError("train/val split is empty; check the data span and split days")

    result = train_model(model_cfg, train, val)

    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(out, result.model.params,
                    config=effective_sections(model_cfg=model_cfg)["model"])
    log_path = out.with_suffix(".log.csv")
    _write_log_csv(log_path, result.log_rows)
    if result.log_rows:
        plotting.save_training_curves(result.log_rows, out.with_suffix(".curves.png"))
    write_effective_config(
        effective_sections(model_cfg=model_cfg, split_spec=split_spec, shot_spec=shot_spec),
        _config_path_for(out),
    )
    if result.best_epoch > 0:
        print(f"trained {model_cfg.variant!r} for {model_cfg.epochs} epochs; "
              f"best val MAE {result.best_val_mae:.4f} h at epoch {result.best_epoch}")
    else:
        print(f"wrote initialised {model_cfg.variant!r} checkpoint (no training epochs)")
    print(f"checkpoint {out}, log {log_path}")
    return 0


def _model_from_checkpoint(path, sections) -> tuple[DGMModel, ModelConfig, dict]:
    arrays, stored = load_checkpoint(path)
    if stored is None:
        raise CliError(f"checkpoint {path} carries no config echo")
    merged = dict(stored)
    merged.update(sections["model"])
    model_cfg = model_config_from_dict(merged)
    return arrays, model_cfg, stored


def cmd_eval(args) -> int:
    sections = merged_configs(args)
    arrays, model_cfg, _ = _model_from_checkpoint(args.checkpoint, sections)
    _, _, split_spec, shot_spec = build_specs(sections)
    train, _, test = _load_splits(args, split_spec)
    if len(test) == 0:
        raise CliError("test split is empty; check the data span and split days")

    graphs = build_graphs(train)
    model = DGMModel(model_cfg, graphs)
    try:
        model.load_params(arrays)
    except ValueError as exc:
        raise CliError(f"checkpoint does not fit the configured model: {exc}") from exc

    eval_orders = test
    if args.balanced:
        eval_orders = balanced_resample(test, shot_spec, seed=args.seed or 0)
    shot = shot_labels(train.delivery_hours, eval_orders.delivery_hours, shot_spec)
    preds = model.predict(assign_nodes(eval_orders, graphs))
    report = evaluate(eval_orders.delivery_hours, preds, shot=shot)

    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "report.json").write_text(report.to_json(), encoding="utf-8")
    (out_dir / "report.txt").write_text(report_table(report) + "\n", encoding="utf-8")
    plotting.save_pred_scatter(eval_orders.delivery_hours, preds, out_dir / "scatter.png")
    plotting.save_error_hist(eval_orders.delivery_hours, preds, out_dir / "errors.png")
    write_effective_config(
        effective_sections(model_cfg=model_cfg, split_spec=split_spec, shot_spec=shot_spec),
        out_dir / "effective_config.json",
    )
    print(report_table(report))
    return 0


def _parse_seeds(text: str) -> list[int]:
    try:
        seeds = [int(s) for s in text.split(",") if s.strip() != ""]
    except ValueError as exc:
        raise CliError(f"bad --seeds value {text!r}: {exc}") from exc
    if not seeds:
        raise CliError("--seeds needs at least one integer")
    return seeds


def cmd_ablate(args) -> int:
    sections = merged_configs(args)
    model_cfg, _, split_spec, shot_spec = build_specs(sections)
    train, val, test = _load_splits(args, split_spec)
    seeds = _parse_seeds(args.seeds)
    shot = shot_labels(train.delivery_hours, test.delivery_hours, shot_spec)

    rows = []
    failed = []
    graphs = build_graphs(train)
    for variant in VARIANTS:
        per_seed = []
        try:
            for seed in seeds:
                cfg = replace(model_cfg, variant=variant, seed=seed)
                result = train_model(cfg, train, val, graphs=graphs)
                per_seed.append(evaluate_model(result.model, result.graphs, test, shot=shot))
        except (ValueError, RuntimeError) as exc:
            failed.append(variant)
            print(f"warning: variant {variant} failed: {exc}", file=sys.stderr)
            rows.append({"variant": variant, "status": "failed"})
            continue
        med = lambda key: statistics.median(getattr(r, key) for r in per_seed)  # noqa: E731
        row = {
            "variant": variant,
            "status": "ok",
            "mae": med("mae"),
            "mape": med("mape"),
            "ew": med("ew"),
        }
        for shot_name in ("low", "mid", "high"):
            vals = [r.per_shot[shot_name]["mae"] for r in per_seed if shot_name in r.per_shot]
            row[f"mae_{shot_name}"] = statistics.median(vals) if vals else float("nan")
        rows.append(row)

    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    columns = ["variant", "status", "mae", "mape", "ew", "mae_low", "mae_mid", "mae_high"]
    with open(out_dir / "ablation.csv", "w", encoding="utf-8", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=columns)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: repr(v) if isinstance(v, float) else v
                             for k, v in row.items()})
    ok_rows = [r for r in rows if r["status"] == "ok"]
    if ok_rows:
        plotting.save_variant_bars(
            [r["variant"] for r in ok_rows], [r["mae"] for r in ok_rows],
            out_dir / "ablation.png",
        )
    write_effective_config(
        effective_sections(model_cfg=model_cfg, split_spec=split_spec, shot_spec=shot_spec),
        out_dir / "effective_config.json",
    )

    header = f"{'variant':<10} {'status':<7} {'MAE':>9} {'MAPE':>8} {'EW':>9} " \
             f"{'MAE low':>9} {'MAE mid':>9} {'MAE high':>9}"
    print(header)
    for row in rows:
        if row["status"] == "failed":
            print(f"{row['variant']:<10} failed")
            continue
        print(f"{row['variant']:<10} {row['status']:<7} {row['mae']:>9.4f} "
              f"{row['mape']:>8.4f} {row['ew']:>9.4f} {row['mae_low']:>9.4f} "
              f"{row['mae_mid']:>9.4f} {row['mae_high']:>9.4f}")
    if failed:
        print(f"error: {len(failed)} variant(s) failed: {', '.join(failed)}",
              file=sys.stderr)
        return 3
    return 0


SWEEP_PARAMS = {"fusion-dim": "fusion_dim", "threshold-hours": "threshold_hours"}


def cmd_sweep(args) -> int:
    sections = merged_configs(args)
    model_cfg, _, split_spec, shot_spec = build_specs(sections)
    train, val, _ = _load_splits(args, split_spec)
    field_name = SWEEP_PARAMS[args.sweep]

    try:
        values = [float(v) for v in args.values.split(",") if v.strip() != ""]
    except ValueError as exc:
        raise CliError(f"bad --values entry: {exc}") from exc
    if not values:
        raise CliError("--values needs at least one number")
    deduped = []
    for v in values:
        if v in deduped:
            print(f"warning: dropping duplicate sweep value {v:g}", file=sys.stderr)
        else:
            deduped.append(v)

    rows = []
    graphs = build_graphs(train)
    for v in deduped:
        value = int(v) if field_name == "fusion_dim" else v
        if field_name == "fusion_dim" and value % model_cfg.fusion_heads:
            raise CliError(
                f"fusion_dim {value} not divisible by fusion_heads {model_cfg.fusion_heads}"
            )
        cfg = replace(model_cfg, **{field_name: value})
        result = train_model(cfg, train, val, graphs=graphs)
        rows.append({"param": args.sweep, "value": value,
                     "val_mae": result.best_val_mae, "best_epoch": result.best_epoch})

    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "sweep.csv", "w", encoding="utf-8", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["param", "value", "val_mae", "best_epoch"])
        writer.writeheader()
        for row in rows:
            writer.writerow({k: repr(v) if isinstance(v, float) else v
                             for k, v in row.items()})
    plotting.save_sweep_curve(
        args.sweep, [r["value"] for r in rows], [r["val_mae"] for r in rows],
        out_dir / "sweep.png",
    )
    write_effective_config(
        effective_sections(model_cfg=model_cfg, split_spec=split_spec, shot_spec=shot_spec),
        out_dir / "effective_config.json",
    )
    print(f"{args.sweep:>6} {'val MAE':>10}")
    for row in rows:
        print(f"{row['value']:>6g} {row['val_mae']:>10.4f}")
    return 0


# -- parser ---------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dgm-dte",
        description="Dual-graph multitask delivery time estimation, desk scale.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write a synthetic order table")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--n-orders", type=int, default=None)
    p.add_argument("--tail-weight", type=float, default=None, dest="tail_weight")
    p.add_argument("--config", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--plot", action="store_true", help="also render a label histogram")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train one variant and write a checkpoint")
    p.add_argument("--config", default=None)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--variant", choices=VARIANTS, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on the test split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--balanced", action="store_true",
                   help="evaluate on a label-balanced resample of the test split")
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="train and compare all five variants")
    p.add_argument("--config", default=None)
    p.add_argument("--data", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--seeds", default="0", help="comma separated training seeds")
    p.add_argument("--epochs", type=int, default=None)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("sweep", help="scan one hyperparameter against validation MAE")
    p.add_argument("--sweep", choices=sorted(SWEEP_PARAMS), required=True)
    p.add_argument("--values", required=True, help="comma separated values")
    p.add_argument("--config", default=None)
    p.add_argument("--data", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--epochs", type=int, default=None)
    p.set_defaults(func=cmd_sweep)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, RuntimeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
