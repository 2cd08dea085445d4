"""Command-line entry point.

    fairfed generate --config cfg.json --out data.jsonl [--set k=v]...
    fairfed train    --config cfg.json [--out DIR] [--set k=v]...
    fairfed evaluate --config cfg.json --predictions preds.csv [--out DIR]
    fairfed compare  --config cfg.json [--out DIR] [--set k=v]...

Exit codes: 0 success, 2 configuration or input error, 3 numerical failure
during a run. All artifacts are byte-stable for a fixed config; wall-clock
metadata goes to a separate run_meta.json so reruns stay comparable.
"""

from __future__ import annotations

import argparse
import csv
import json
import shutil
import sys
import time
from pathlib import Path

import numpy as np

from .adapter import save_checkpoint
from .config import ExperimentConfig, apply_overrides, default_config_dict
from .data import split
from .errors import ConfigError, DatasetFormatError, FairFedError, NumericError
from .federation import population_proportions, run_federation, run_local_only
from .linalg import derive_seed
from .metrics import (
    FairnessReport,
    Prediction,
    aggregate_reports,
    aggregate_to_csv,
    report_from_predictions,
)
from .model import predict


def _load_config(args) -> ExperimentConfig:
    with open(args.config, "r", encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{args.config}: invalid JSON ({exc.msg} at line {exc.lineno})")
    if args.set:
        doc = apply_overrides(doc, args.set)
    return ExperimentConfig.from_dict(doc)


def _site_summary(dataset) -> dict:
    summary: dict = {}
    for site in dataset.sites():
        members = dataset.site_samples(site)
        group_counts = [0] * dataset.schema.num_groups
        label_counts = [0, 0]
        for s in members:
            group_counts[s.group] += 1
            label_counts[s.label] += 1
        summary[f"site{site}"] = {
            "n": len(members),
            "groups": {
                label: group_counts[g] for g, label in enumerate(dataset.schema.groups)
            },
            "labels": {"negative": label_counts[0], "positive": label_counts[1]},
        }
    return summary


def cmd_generate(args) -> int:
    cfg = _load_config(args)
    if cfg.data.path is not None:
        raise ConfigError("data.path points at an existing file; nothing to generate")
    dataset = cfg.build_dataset(cfg.seeds[0])
    out_path = Path(args.out)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    from .data import save_jsonl

    save_jsonl(dataset, out_path)
    print(json.dumps({"path": str(out_path), "records": len(dataset), "sites": _site_summary(dataset)}, indent=2))
    return 0


def _predictions_csv(per_client: dict[str, list[Prediction]], group_labels) -> str:
    import io

    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["id", "client", "group", "label", "score"])
    for client in sorted(per_client):
        for p in per_client[client]:
            writer.writerow([p.sample_id, client, group_labels[p.group], p.label, repr(p.score)])
    return buf.getvalue()


def _run_one_seed(cfg: ExperimentConfig, backbone, seed: int):
    dataset = cfg.build_dataset(seed)
    splits = split(dataset, cfg.split_ratios, seed=derive_seed(seed, "split"))
    fed_cfg = cfg.federation_config(len(splits), seed)
    adapter_cfg = cfg.adapter_config()
    state, report = run_federation(
        fed_cfg,
        splits,
        backbone,
        adapter_cfg,
        group_labels=cfg.schema.groups,
        attribute=cfg.schema.name,
        gate_policy=cfg.gate_policy,
        threshold=cfg.threshold,
    )
    return state, report, splits, adapter_cfg


def cmd_train(args) -> int:
    cfg = _load_config(args)
    backbone = cfg.build_backbone()
    out_dir = Path(args.out) if args.out else Path(cfg.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    started = time.time()
    created: list[Path] = []
    reports: list[FairnessReport] = []
    try:
        for seed in cfg.seeds:
            seed_dir = out_dir / f"seed_{seed}"
            seed_dir.mkdir(parents=True, exist_ok=True)
            created.append(seed_dir)
            state, report, splits, adapter_cfg = _run_one_seed(cfg, backbone, seed)
            save_checkpoint(state.ema, seed_dir / "checkpoint.bin")
            with open(seed_dir / "rounds.jsonl", "w", encoding="utf-8") as fh:
                for record in state.history:
                    fh.write(json.dumps(record.to_dict()) + "\n")
            (seed_dir / "report.json").write_text(report.to_json() + "\n", encoding="utf-8")
            (seed_dir / "report.csv").write_text(report.to_csv(), encoding="utf-8")
            pi = population_proportions(splits, max(1, adapter_cfg.num_groups))
            per_client = {
                f"C{site + 1}": predict(
                    backbone,
                    state.ema,
                    splits[site].test,
                    gate_policy=cfg.gate_policy,
                    pi=pi,
                )
                for site in sorted(splits)
            }
            (seed_dir / "predictions.csv").write_text(
                _predictions_csv(per_client, cfg.schema.groups), encoding="utf-8"
            )
            reports.append(report)
    except NumericError:
        for path in created:
            shutil.rmtree(path, ignore_errors=True)
        raise
    aggregated = aggregate_reports(reports)
    (out_dir / "aggregate_report.json").write_text(
        json.dumps(aggregated, indent=2) + "\n", encoding="utf-8"
    )
    (out_dir / "aggregate_report.csv").write_text(aggregate_to_csv(aggregated), encoding="utf-8")
    meta = {"command": "train", "seeds": cfg.seeds, "started": started, "finished": time.time()}
    (out_dir / "run_meta.json").write_text(json.dumps(meta, indent=2) + "\n", encoding="utf-8")
    print(
        json.dumps(
            {
                "output_dir": str(out_dir),
                "seeds": cfg.seeds,
                "aggregate_report": str(out_dir / "aggregate_report.json"),
            },
            indent=2,
        )
    )
    return 0


def _read_predictions_csv(path, schema) -> dict[str, list[Prediction]]:
    group_index = {label: g for g, label in enumerate(schema.groups)}
    per_client: dict[str, list[Prediction]] = {}
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        required = {"id", "client", "group", "label", "score"}
        if reader.fieldnames is None or not required.issubset(set(reader.fieldnames)):
            raise DatasetFormatError(
                f"{path}:1: header must contain columns {sorted(required)}, "
                f"got {reader.fieldnames}"
            )
        for line_no, row in enumerate(reader, start=2):
            group_label = row["group"]
            if group_label not in group_index:
                raise DatasetFormatError(
                    f"{path}:{line_no}: group {group_label!r} is not in schema {list(schema.groups)}"
                )
            try:
                label = int(row["label"])
                score = float(row["score"])
            except (TypeError, ValueError):
                raise DatasetFormatError(
                    f"{path}:{line_no}: label/score must be numeric, got "
                    f"{row['label']!r}/{row['score']!r}"
                )
            if label not in (0, 1):
                raise DatasetFormatError(f"{path}:{line_no}: label must be 0 or 1, got {label}")
            if not np.isfinite(score):
                raise DatasetFormatError(f"{path}:{line_no}: non-finite score")
            per_client.setdefault(row["client"], []).append(
                Prediction(
                    sample_id=row["id"],
                    group=group_index[group_label],
                    label=label,
                    score=score,
                    logits=np.zeros(0),
                )
            )
    if not per_client:
        raise DatasetFormatError(f"{path}:2: no prediction rows")
    return per_client


def cmd_evaluate(args) -> int:
    cfg = _load_config(args)
    per_client = _read_predictions_csv(args.predictions, cfg.schema)
    report = report_from_predictions(
        per_client,
        group_labels=cfg.schema.groups,
        attribute=cfg.schema.name,
        threshold=cfg.threshold,
        gate_policy=cfg.gate_policy,
    )
    if args.out:
        out_dir = Path(args.out)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "report.json").write_text(report.to_json() + "\n", encoding="utf-8")
        (out_dir / "report.csv").write_text(report.to_csv(), encoding="utf-8")
    print(report.to_json())
    return 0


def _row_metrics_from_report(report: FairnessReport) -> dict:
    row = report.avg_row
    defined = [v for v in row.group_aucs.values() if v is not None]
    return {
        "overall_auc": row.overall_auc,
        "es_auc": row.es_auc,
        "group_aucs": dict(row.group_aucs),
        "eod": row.eod,
        "spd": row.spd,
        "group_auc_spread": (max(defined) - min(defined)) if len(defined) >= 2 else 0.0,
    }


def _mean_over_clients(reports: list[FairnessReport], group_labels) -> dict:
    rows = [_row_metrics_from_report(r) for r in reports]
    out = {
        name: float(np.mean([r[name] for r in rows]))
        for name in ("overall_auc", "es_auc", "eod", "spd", "group_auc_spread")
    }
    group_aucs = {}
    for label in group_labels:
        values = [r["group_aucs"].get(label) for r in rows]
        values = [v for v in values if v is not None]
        group_aucs[label] = float(np.mean(values)) if values else None
    out["group_aucs"] = group_aucs
    return out


def cmd_compare(args) -> int:
    cfg = _load_config(args)
    backbone = cfg.build_backbone()
    out_dir = Path(args.out) if args.out else Path(cfg.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    grid = cfg.compare_grid()
    # one training run per (variant, mode, s_init, seed); gate policies reuse it
    trained: dict[tuple, dict] = {}
    rows = []
    for cell in grid:
        per_seed = []
        for seed in cfg.seeds:
            key = (cell["variant"], cell["mode"], cell["s_init"], seed)
            if key not in trained:
                trained[key] = _train_cell(cfg, backbone, cell["variant"], cell["mode"], cell["s_init"], seed)
            run = trained[key]
            per_seed.append(_evaluate_cell(cfg, backbone, run, cell["gate_policy"]))
        cells = {}
        for name in ("overall_auc", "es_auc", "eod", "spd", "group_auc_spread"):
            values = [m[name] for m in per_seed]
            cells[name] = {"mean": float(np.mean(values)), "std": float(np.std(values))}
        for label in cfg.schema.groups:
            values = [m["group_aucs"][label] for m in per_seed if m["group_aucs"][label] is not None]
            cells[f"auc_{label}"] = (
                {"mean": float(np.mean(values)), "std": float(np.std(values))} if values else None
            )
        rows.append({**cell, "seeds": len(cfg.seeds), "cells": cells})
    comparison = {
        "attribute": cfg.schema.name,
        "group_labels": list(cfg.schema.groups),
        "seeds": cfg.seeds,
        "rows": rows,
    }
    (out_dir / "comparison.json").write_text(json.dumps(comparison, indent=2) + "\n", encoding="utf-8")
    (out_dir / "comparison.csv").write_text(_comparison_csv(comparison), encoding="utf-8")
    print(json.dumps({"output_dir": str(out_dir), "rows": len(rows)}, indent=2))
    return 0


def _train_cell(cfg: ExperimentConfig, backbone, variant: str, mode: str, s_init: str, seed: int) -> dict:
    dataset = cfg.build_dataset(seed)
    splits = split(dataset, cfg.split_ratios, seed=derive_seed(seed, "split"))
    fed_cfg = cfg.federation_config(len(splits), seed)
    adapter_cfg = cfg.adapter_config(variant=variant, s_init=s_init)
    if mode == "federated":
        state, _ = run_federation(
            fed_cfg,
            splits,
            backbone,
            adapter_cfg,
            group_labels=cfg.schema.groups,
            attribute=cfg.schema.name,
            gate_policy=cfg.gate_policy,
            threshold=cfg.threshold,
        )
        return {"mode": mode, "splits": splits, "adapter_cfg": adapter_cfg, "ema": state.ema}
    runs = run_local_only(
        fed_cfg,
        splits,
        backbone,
        adapter_cfg,
        group_labels=cfg.schema.groups,
        attribute=cfg.schema.name,
        gate_policy=cfg.gate_policy,
        threshold=cfg.threshold,
    )
    return {"mode": mode, "splits": splits, "adapter_cfg": adapter_cfg, "local_runs": runs}


def _evaluate_cell(cfg: ExperimentConfig, backbone, run: dict, gate_policy: str) -> dict:
    from .metrics import build_report

    splits = run["splits"]
    adapter_cfg = run["adapter_cfg"]
    if run["mode"] == "federated":
        pi = population_proportions(splits, max(1, adapter_cfg.num_groups))
        report = build_report(
            backbone,
            run["ema"],
            {site: splits[site].test for site in sorted(splits)},
            group_labels=cfg.schema.groups,
            attribute=cfg.schema.name,
            gate_policy=gate_policy,
            threshold=cfg.threshold,
            pi=pi,
        )
        return _row_metrics_from_report(report)
    reports = []
    for site, local_run in sorted(run["local_runs"].items()):
        pi = population_proportions({site: splits[site]}, max(1, adapter_cfg.num_groups))
        reports.append(
            build_report(
                backbone,
                local_run.adapter,
                {site: splits[site].test},
                group_labels=cfg.schema.groups,
                attribute=cfg.schema.name,
                gate_policy=gate_policy,
                threshold=cfg.threshold,
                pi=pi,
            )
        )
    return _mean_over_clients(reports, cfg.schema.groups)


def _comparison_csv(comparison: dict) -> str:
    import io

    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    labels = comparison["group_labels"]
    metric_order = (
        ["overall_auc", "es_auc"]
        + [f"auc_{g}" for g in labels]
        + ["eod", "spd", "group_auc_spread"]
    )
    writer.writerow(["variant", "mode", "s_init", "gate_policy", "seeds"] + metric_order)
    for row in comparison["rows"]:
        rendered = [row["variant"], row["mode"], row["s_init"], row["gate_policy"], row["seeds"]]
        for name in metric_order:
            cell = row["cells"].get(name)
            if cell is None:
                rendered.append("NA")
            else:
                rendered.append(f"{100.0 * cell['mean']:.1f}±{100.0 * cell['std']:.1f}")
        writer.writerow(rendered)
    return buf.getvalue()


def cmd_init_config(args) -> int:
    """Write the default benchmark config (convenience starter)."""
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(default_config_dict(), indent=2) + "\n", encoding="utf-8")
    print(json.dumps({"path": str(out)}, indent=2))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fairfed",
        description="Federated group-fairness simulation lab for low-rank adapters.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p, needs_out_file=False):
        p.add_argument("--config", required=True, help="path to the experiment JSON document")
        p.add_argument(
            "--set",
            action="append",
            default=[],
            metavar="SECTION.KEY=VALUE",
            help="override a config value (repeatable)",
        )
        if needs_out_file:
            p.add_argument("--out", required=True, help="output path")
        else:
            p.add_argument("--out", default=None, help="output directory (default: config output_dir)")

    add_common(sub.add_parser("generate", help="write a synthetic dataset file"), needs_out_file=True)
    add_common(sub.add_parser("train", help="run the federated experiment per seed"))
    evaluate = sub.add_parser("evaluate", help="score an external prediction dump")
    add_common(evaluate)
    evaluate.add_argument("--predictions", required=True, help="CSV of id,client,group,label,score")
    add_common(sub.add_parser("compare", help="run the requested variant/mode grid"))
    init_cfg = sub.add_parser("init-config", help="write the default benchmark config")
    init_cfg.add_argument("--out", required=True, help="where to write the config JSON")
    return parser


_DISPATCH = {
    "generate": cmd_generate,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "compare": cmd_compare,
    "init-config": cmd_init_config,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return _DISPATCH[args.command](args)
    except (ConfigError, DatasetFormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NumericError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except FairFedError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
