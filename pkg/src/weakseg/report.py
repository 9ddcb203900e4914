"""Experiment matrix runner and report emission (tables, records, figures)."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from weakseg.config import ExperimentConfig  # noqa: E402
from weakseg.evaluate import (  # noqa: E402
    PixelCounts,
    accumulate_counts,
    compute_metrics,
    per_image_metrics,
    pooled_metrics,
)
from weakseg.infer import binarize, sliding_window_predict  # noqa: E402
from weakseg.ingest import DatasetManifest, load_pair, read_manifest, training_split  # noqa: E402
from weakseg.smanet import load_checkpoint, save_checkpoint  # noqa: E402
from weakseg.train import train_segmentation  # noqa: E402

log = logging.getLogger(__name__)

COLUMNS = ("setup", "group", "network", "test_set", "precision", "recall", "f1",
           "delta_f1", "status", "tp", "fp", "fn", "tn")


@dataclass
class ExperimentReport:
    setup: str
    test_set: str
    network: str = ""
    group: str = ""
    precision: Optional[float] = None
    recall: Optional[float] = None
    f1: Optional[float] = None
    delta_f1: Optional[float] = None
    status: str = "ok"
    baseline: Optional[str] = None
    counts: Optional[PixelCounts] = None
    per_image: Optional[tuple] = None

    def record(self) -> dict:
        d = {k: getattr(self, k) for k in COLUMNS if hasattr(self, k)}
        c = self.counts or PixelCounts()
        d.update(tp=c.tp, fp=c.fp, fn=c.fn, tn=c.tn)
        d["baseline"] = self.baseline
        if self.per_image is not None:
            d["per_image_precision"], d["per_image_recall"], d["per_image_f1"] = self.per_image
        return d


def predict_counts(model, manifest: DatasetManifest, policy) -> Dict[str, PixelCounts]:
    records = [r for r in manifest.usable() if r.gt_path is not None]
    test = [r for r in records if r.split == "test"] or records
    counts = {}
    for rec in test:
        image, label = load_pair(manifest, rec)
        prob = sliding_window_predict(model, image, policy)
        counts[rec.id] = accumulate_counts(binarize(prob, policy.threshold), label)
    return counts


def _train_or_reuse(cfg: ExperimentConfig, out_dir: Path):
    final = out_dir / "final.pt"
    if final.exists():
        ckpt = load_checkpoint(final)
        if ckpt.metrics.get("experiment_digest") == cfg.digest():
            log.info("%s: reusing %s", cfg.name, final)
            return ckpt
    stages = [(name, training_split(read_manifest(cfg.resolve_dataset(name))), steps)
              for name, steps in cfg.stages]
    ckpt = train_segmentation(cfg.train_config(), stages, cfg.spec())
    ckpt.metrics["experiment_digest"] = cfg.digest()
    save_checkpoint(ckpt, final)
    return ckpt


def run_experiment_matrix(configs: Sequence[ExperimentConfig],
                          per_image: bool = False) -> List[ExperimentReport]:
    """Train every setup, evaluate on its test sets, fill relative deltas.

    A setup whose datasets or checkpoints are missing yields rows marked
    ``unavailable``; the remaining setups still run.
    """
    reports: List[ExperimentReport] = []
    for cfg in configs:
        out_dir = Path(cfg.output_root) / cfg.name
        try:
            ckpt = _train_or_reuse(cfg, out_dir)
            model = ckpt.build()
        except (OSError, ValueError) as exc:
            log.error("%s unavailable: %s", cfg.name, exc)
            for test_set in cfg.test_sets:
                reports.append(ExperimentReport(cfg.name, test_set, cfg.network, cfg.group,
                                                status="unavailable", baseline=cfg.baseline))
            continue
        for test_set in cfg.test_sets:
            row = ExperimentReport(cfg.name, test_set, cfg.network, cfg.group, baseline=cfg.baseline)
            try:
                counts = predict_counts(model, read_manifest(cfg.resolve_dataset(test_set)),
                                        cfg.inference)
            except (OSError, ValueError) as exc:
                log.error("%s on %s unavailable: %s", cfg.name, test_set, exc)
                row.status = "unavailable"
                reports.append(row)
                continue
            total = sum(counts.values(), PixelCounts())
            row.counts = total
            row.precision, row.recall, row.f1 = compute_metrics(total)
            if per_image:
                row.per_image = per_image_metrics(counts.values())
            reports.append(row)
    fill_deltas(reports)
    return reports


def fill_deltas(reports: List[ExperimentReport]) -> None:
    """Relative F1 (percentage points) against each row's baseline setup."""
    index = {(r.setup, r.test_set): r for r in reports}
    for r in reports:
        if r.baseline is None or r.f1 is None:
            continue
        base = index.get((r.baseline, r.test_set))
        if base is None or base.f1 is None or base.setup == r.setup:
            continue
        r.delta_f1 = round(100 * r.f1, 2) - round(100 * base.f1, 2)


# formatting -----------------------------------------------------------------

def _pct(v) -> str:
    return "--" if v is None else f"{100 * v:.2f}%"


def _delta(v) -> str:
    return "--" if v is None else f"{v:+.2f}%"


def format_table(reports: Sequence[ExperimentReport], title: str = "") -> str:
    """Aligned text tables, one per test set, with a rule between setup groups."""
    blocks = []
    test_sets = list(dict.fromkeys(r.test_set for r in reports))
    for test_set in test_sets:
        rows = [r for r in reports if r.test_set == test_set]
        width = max([len("Setup")] + [len(r.setup) for r in rows]) + 2
        header = f"{'Setup':<{width}}{'Precision':>11}{'Recall':>10}{'F1 Score':>10}{'dF1':>10}"
        rule = "-" * len(header)
        lines = [f"{title} results on {test_set}".strip(), rule, header, rule]
        group = None
        for r in rows:
            if group is not None and r.group != group:
                lines.append(rule)
            group = r.group
            if r.status != "ok":
                lines.append(f"{r.setup:<{width}}{'unavailable':>41}")
                continue
            lines.append(f"{r.setup:<{width}}{_pct(r.precision):>11}{_pct(r.recall):>10}"
                         f"{_pct(r.f1):>10}{_delta(r.delta_f1):>10}")
        lines.append(rule)
        blocks.append("\n".join(lines))
    return "\n\n".join(blocks) + "\n"


def plot_f1(reports: Sequence[ExperimentReport], path, title: str = "") -> Path:
    test_sets = list(dict.fromkeys(r.test_set for r in reports))
    setups = list(dict.fromkeys(r.setup for r in reports))
    index = {(r.setup, r.test_set): r for r in reports}
    fig, ax = plt.subplots(figsize=(max(4.0, 0.9 * len(setups) * max(len(test_sets), 1) + 2), 3.6))
    width = 0.8 / max(len(test_sets), 1)
    x = np.arange(len(setups))
    for i, test_set in enumerate(test_sets):
        vals = [100 * (index[(s, test_set)].f1 or 0.0) if (s, test_set) in index else 0.0
                for s in setups]
        ax.bar(x + i * width - 0.4 + width / 2, vals, width, label=test_set)
    ax.set_xticks(x)
    ax.set_xticklabels(setups, rotation=30, ha="right", fontsize=8)
    ax.set_ylabel("F1 score (%)")
    ax.set_ylim(0, 100)
    if title:
        ax.set_title(title)
    if len(test_sets) > 1:
        ax.legend(fontsize=8, frameon=False)
    fig.tight_layout()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_per_image(records: Sequence[dict], path) -> Path:
    fig, ax = plt.subplots(figsize=(4, 4))
    ax.scatter([r["recall"] for r in records], [r["precision"] for r in records], s=12)
    ax.set_xlabel("recall")
    ax.set_ylabel("precision")
    ax.set_xlim(0, 1.02)
    ax.set_ylim(0, 1.02)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


def _stem(path) -> Path:
    path = Path(path)
    return path.with_suffix("") if path.suffix in (".txt", ".tsv", ".jsonl") else path


def write_report(reports: Sequence[ExperimentReport], path, title: str = "",
                 extra_records: Sequence[dict] = ()) -> List[Path]:
    """Write ``.txt`` table, ``.tsv`` and ``.jsonl`` rows and an F1 figure."""
    stem = _stem(path)
    stem.parent.mkdir(parents=True, exist_ok=True)
    txt = stem.with_suffix(".txt")
    txt.write_text(format_table(reports, title), encoding="utf-8")
    records = [r.record() for r in reports]
    jsonl = stem.with_suffix(".jsonl")
    with open(jsonl, "w", encoding="utf-8") as fh:
        for rec in list(records) + list(extra_records):
            fh.write(json.dumps(rec) + "\n")
    tsv = stem.with_suffix(".tsv")
    with open(tsv, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(COLUMNS), delimiter="\t", extrasaction="ignore")
        writer.writeheader()
        for rec in records:
            writer.writerow({k: ("" if rec.get(k) is None else rec[k]) for k in COLUMNS})
    figure = plot_f1([r for r in reports if r.status == "ok"], stem.parent / f"{stem.name}_f1.png", title)
    return [txt, tsv, jsonl, figure]


def read_report_records(path) -> List[dict]:
    with open(_stem(path).with_suffix(".jsonl"), encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


__all__ = [
    "ExperimentReport",
    "fill_deltas",
    "format_table",
    "plot_f1",
    "pooled_metrics",
    "run_experiment_matrix",
    "write_report",
]
