"""Performance and group-fairness metrics, plus report assembly.

AUC is the Mann-Whitney rank statistic (ties count half). The
equity-scaled AUC discounts the overall AUC by the summed absolute
deviations of group AUCs from it: overall / (1 + sum_g |overall - auc_g|).
EOD and SPD are max-minus-min gaps of the per-group true-positive and
positive-prediction rates at a fixed score threshold. Groups whose AUC or
TPR is undefined (missing a class) are flagged and excluded rather than
given a made-up number.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ConfigError, UndefinedMetricError
from .model import FairLoraState, FrozenBackbone, Prediction, predict

AVG_ROW = "Avg."


def auc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """P(score_pos > score_neg) + 0.5 P(tie) over all (pos, neg) pairs.

    Computed via midranks, which matches brute-force pair counting exactly.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise ConfigError(f"scores and labels must be equal-length vectors, got {scores.shape} vs {labels.shape}")
    n_pos = int(np.sum(labels == 1))
    n_neg = int(np.sum(labels == 0))
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError(
            f"AUC undefined: need both classes, got {n_pos} positives and {n_neg} negatives"
        )
    order = np.argsort(scores, kind="stable")
    ranks = np.empty(scores.size, dtype=np.float64)
    i = 0
    while i < scores.size:
        j = i
        while j + 1 < scores.size and scores[order[j + 1]] == scores[order[i]]:
            j += 1
        midrank = (i + j) / 2.0 + 1.0
        ranks[order[i : j + 1]] = midrank
        i = j + 1
    rank_sum_pos = float(ranks[labels == 1].sum())
    u_stat = rank_sum_pos - n_pos * (n_pos + 1) / 2.0
    return u_stat / (n_pos * n_neg)


def es_auc(overall: float, group_aucs: Sequence[float]) -> float:
    """Equity-scaled AUC: overall / (1 + sum of |overall - group| gaps)."""
    disparity = sum(abs(overall - g) for g in group_aucs)
    return overall / (1.0 + disparity)


def _by_group(predictions: Sequence[Prediction]) -> dict[int, list[Prediction]]:
    groups: dict[int, list[Prediction]] = {}
    for p in predictions:
        groups.setdefault(p.group, []).append(p)
    return groups


def group_tprs(
    predictions: Sequence[Prediction], threshold: float
) -> dict[int, float | None]:
    """True-positive rate per group; None when a group has no positives."""
    out: dict[int, float | None] = {}
    for g, preds in sorted(_by_group(predictions).items()):
        positives = [p for p in preds if p.label == 1]
        if not positives:
            out[g] = None
        else:
            hits = sum(1 for p in positives if p.score >= threshold)
            out[g] = hits / len(positives)
    return out


def eod(predictions: Sequence[Prediction], threshold: float = 0.5) -> float:
    """Largest TPR gap across groups; groups without positives are skipped."""
    tprs = [v for v in group_tprs(predictions, threshold).values() if v is not None]
    if not tprs:
        raise UndefinedMetricError("EOD undefined: no group has a positive-label sample")
    return max(tprs) - min(tprs)


def group_positive_rates(
    predictions: Sequence[Prediction], threshold: float
) -> dict[int, float]:
    out: dict[int, float] = {}
    for g, preds in sorted(_by_group(predictions).items()):
        out[g] = sum(1 for p in preds if p.score >= threshold) / len(preds)
    return out


def spd(predictions: Sequence[Prediction], threshold: float = 0.5) -> float:
    """Largest positive-prediction-rate gap across groups."""
    if not predictions:
        raise UndefinedMetricError("SPD undefined: no predictions")
    rates = list(group_positive_rates(predictions, threshold).values())
    return max(rates) - min(rates)


@dataclass
class ReportRow:
    client: str
    n: int
    overall_auc: float
    es_auc: float
    group_aucs: dict[str, float | None]
    eod: float
    spd: float
    warnings: list[str] = field(default_factory=list)


@dataclass
class FairnessReport:
    """Per-client rows plus one pooled row, all from the same global model."""

    attribute: str
    group_labels: tuple[str, ...]
    threshold: float
    gate_policy: str
    rows: list[ReportRow]
    group_sizes: dict[str, int]

    def row(self, client: str) -> ReportRow:
        for r in self.rows:
            if r.client == client:
                return r
        raise KeyError(f"no report row for client {client!r}")

    @property
    def avg_row(self) -> ReportRow:
        return self.row(AVG_ROW)

    def to_dict(self) -> dict:
        return {
            "attribute": self.attribute,
            "group_labels": list(self.group_labels),
            "threshold": self.threshold,
            "gate_policy": self.gate_policy,
            "group_sizes": self.group_sizes,
            "rows": [
                {
                    "client": r.client,
                    "n": r.n,
                    "overall_auc": r.overall_auc,
                    "es_auc": r.es_auc,
                    "group_aucs": r.group_aucs,
                    "eod": r.eod,
                    "spd": r.spd,
                    "warnings": r.warnings,
                }
                for r in self.rows
            ],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_dict(cls, data: dict) -> "FairnessReport":
        rows = [
            ReportRow(
                client=r["client"],
                n=r["n"],
                overall_auc=r["overall_auc"],
                es_auc=r["es_auc"],
                group_aucs=dict(r["group_aucs"]),
                eod=r["eod"],
                spd=r["spd"],
                warnings=list(r["warnings"]),
            )
            for r in data["rows"]
        ]
        return cls(
            attribute=data["attribute"],
            group_labels=tuple(data["group_labels"]),
            threshold=data["threshold"],
            gate_policy=data["gate_policy"],
            rows=rows,
            group_sizes=dict(data["group_sizes"]),
        )

    @classmethod
    def from_json(cls, text: str) -> "FairnessReport":
        return cls.from_dict(json.loads(text))

    def to_csv(self) -> str:
        """Table with one row per client: percentages, one decimal place."""
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        header = ["client", "overall_auc", "es_auc"]
        header += [f"auc_{label}" for label in self.group_labels]
        header += ["eod", "spd"]
        writer.writerow(header)

        def pct(value: float | None) -> str:
            return "NA" if value is None else f"{100.0 * value:.1f}"

        for r in self.rows:
            row = [r.client, pct(r.overall_auc), pct(r.es_auc)]
            row += [pct(r.group_aucs.get(label)) for label in self.group_labels]
            row += [pct(r.eod), pct(r.spd)]
            writer.writerow(row)
        return buf.getvalue()


def summarize_predictions(
    client: str,
    predictions: Sequence[Prediction],
    group_labels: tuple[str, ...],
    threshold: float,
) -> ReportRow:
    """One report row from a prediction list (model-free)."""
    predictions = list(predictions)
    if not predictions:
        raise UndefinedMetricError(f"client {client!r} has an empty evaluation set")
    warnings: list[str] = []
    overall = auc([p.score for p in predictions], [p.label for p in predictions])
    group_aucs: dict[str, float | None] = {}
    defined: list[float] = []
    by_group = _by_group(predictions)
    for g, label in enumerate(group_labels):
        preds = by_group.get(g)
        if preds is None:
            continue  # group absent from this evaluation set
        labels = [p.label for p in preds]
        if len(set(labels)) < 2:
            group_aucs[label] = None
            warnings.append(f"group {label!r}: AUC undefined (single-class sample)")
            continue
        value = auc([p.score for p in preds], labels)
        group_aucs[label] = value
        defined.append(value)
    tprs = group_tprs(predictions, threshold)
    for g, tpr in tprs.items():
        if tpr is None:
            warnings.append(f"group {group_labels[g]!r}: excluded from EOD (no positives)")
    return ReportRow(
        client=client,
        n=len(predictions),
        overall_auc=overall,
        es_auc=es_auc(overall, defined),
        group_aucs=group_aucs,
        eod=eod(predictions, threshold),
        spd=spd(predictions, threshold),
        warnings=warnings,
    )


def report_from_predictions(
    per_client_predictions: dict[str, list[Prediction]],
    group_labels: tuple[str, ...],
    attribute: str,
    threshold: float,
    gate_policy: str = "oracle_group",
) -> FairnessReport:
    """Assemble client rows plus the pooled row from raw predictions."""
    if not per_client_predictions:
        raise ConfigError("no prediction sets to report on")
    rows = [
        summarize_predictions(client, preds, group_labels, threshold)
        for client, preds in sorted(per_client_predictions.items())
    ]
    pooled: list[Prediction] = []
    for preds in per_client_predictions.values():
        pooled.extend(preds)
    rows.append(summarize_predictions(AVG_ROW, pooled, group_labels, threshold))
    sizes = {label: 0 for label in group_labels}
    for p in pooled:
        sizes[group_labels[p.group]] += 1
    return FairnessReport(
        attribute=attribute,
        group_labels=group_labels,
        threshold=threshold,
        gate_policy=gate_policy,
        rows=rows,
        group_sizes=sizes,
    )


def _mean_std(values: list[float]) -> dict[str, float]:
    arr = np.asarray(values, dtype=np.float64)
    # population std (divide by n), by convention throughout the package
    return {"mean": float(arr.mean()), "std": float(arr.std())}


def aggregate_reports(reports: Sequence[FairnessReport]) -> dict:
    """mean +/- population std of every report cell across seeds.

    Group-AUC cells undefined in a given seed are skipped; a cell is null
    only when it is undefined in every seed.
    """
    if not reports:
        raise ConfigError("no reports to aggregate")
    first = reports[0]
    rows = []
    for row in first.rows:
        client = row.client
        matching = [r.row(client) for r in reports]
        cells: dict[str, dict | None] = {}
        for name in ("overall_auc", "es_auc", "eod", "spd"):
            cells[name] = _mean_std([getattr(m, name) for m in matching])
        for label in first.group_labels:
            values = [
                m.group_aucs[label]
                for m in matching
                if m.group_aucs.get(label) is not None
            ]
            cells[f"auc_{label}"] = _mean_std(values) if values else None
        rows.append({"client": client, "n": row.n, "cells": cells})
    return {
        "attribute": first.attribute,
        "group_labels": list(first.group_labels),
        "threshold": first.threshold,
        "gate_policy": first.gate_policy,
        "num_reports": len(reports),
        "rows": rows,
    }


def aggregate_to_csv(aggregated: dict) -> str:
    """CSV rendering of :func:`aggregate_reports`, cells as 'mean±std' percents."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    labels = aggregated["group_labels"]
    metric_order = ["overall_auc", "es_auc"] + [f"auc_{g}" for g in labels] + ["eod", "spd"]
    writer.writerow(["client"] + metric_order)
    for row in aggregated["rows"]:
        rendered = [row["client"]]
        for name in metric_order:
            cell = row["cells"].get(name)
            if cell is None:
                rendered.append("NA")
            else:
                rendered.append(f"{100.0 * cell['mean']:.1f}±{100.0 * cell['std']:.1f}")
        writer.writerow(rendered)
    return buf.getvalue()


def build_report(
    backbone: FrozenBackbone,
    global_adapter: FairLoraState,
    per_client_test_sets: dict[int, list],
    group_labels: tuple[str, ...],
    attribute: str,
    gate_policy: str = "oracle_group",
    threshold: float = 0.5,
    pi: np.ndarray | None = None,
) -> FairnessReport:
    """Evaluate one global adapter on every client's test split.

    Each client row scores that client's own test set; the pooled row
    scores the exact union multiset of all test sets, so it reflects the
    global model rather than an average of rows.
    """
    if not per_client_test_sets:
        raise ConfigError("no test sets to evaluate")
    per_client: dict[str, list[Prediction]] = {}
    for client_id, samples in sorted(per_client_test_sets.items()):
        per_client[f"C{client_id + 1}"] = predict(
            backbone, global_adapter, samples, gate_policy=gate_policy, pi=pi
        )
    return report_from_predictions(per_client, group_labels, attribute, threshold, gate_policy)
