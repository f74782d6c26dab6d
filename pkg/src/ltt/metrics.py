"""Accuracy, expected calibration error, and resource accounting."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

from . import lora

REPORT_FIELDS = ("mode", "dataset", "seed", "top1", "ece", "mean_mem_loss",
                 "mean_mae_loss", "trainable_params", "median_episode_ms")


def top1_accuracy(predictions, labels) -> float:
    if len(predictions) != len(labels):
        raise ValueError(f"length mismatch: {len(predictions)} vs {len(labels)}")
    if not predictions:
        raise ValueError("empty inputs")
    hits = sum(int(p) == int(l) for p, l in zip(predictions, labels))
    return hits / len(predictions)


@dataclass
class EceReport:
    num_bins: int
    counts: list
    confidences: list  # per-bin mean confidence, 0.0 for empty bins
    accuracies: list   # per-bin mean accuracy, 0.0 for empty bins
    total: int
    ece: float


def ece(confidences, correct_flags, num_bins: int = 20) -> EceReport:
    """Equal-width binning of (0,1]: bin k covers ((k-1)/nb, k/nb], and a
    confidence of exactly 0 lands in bin 1."""
    conf = np.asarray(confidences, dtype=np.float64)
    corr = np.asarray(correct_flags, dtype=np.float64)
    if conf.size == 0:
        raise ValueError("empty inputs")
    if conf.size != corr.size:
        raise ValueError(f"length mismatch: {conf.size} vs {corr.size}")
    if conf.min() < 0.0 or conf.max() > 1.0:
        raise ValueError("confidences must lie in [0, 1]")
    edges = np.array([k / num_bins for k in range(num_bins + 1)])
    bins = np.searchsorted(edges, conf, side="left")
    bins = np.clip(bins, 1, num_bins)
    m = conf.size
    counts, confs, accs = [], [], []
    total_gap = 0.0
    for k in range(1, num_bins + 1):
        sel = bins == k
        cnt = int(sel.sum())
        counts.append(cnt)
        if cnt == 0:
            confs.append(0.0)
            accs.append(0.0)
            continue
        c = float(conf[sel].mean())
        a = float(corr[sel].mean())
        confs.append(c)
        accs.append(a)
        total_gap += (cnt / m) * abs(a - c)
    return EceReport(num_bins, counts, confs, accs, m, total_gap)


def resource_report(cfg, model, episodes) -> dict:
    """Parameter counts plus tape/time figures from executed episodes."""
    if cfg.mode == "zero_shot":
        trainable = 0
    elif cfg.mode == "full_tune":
        n = model.vit.num_layers
        trainable = sum(
            model.params[f"img.layers.{i}.attn.{t}"].data.size
            for i in (n - 2, n - 1)
            for t in ("wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo"))
    else:
        trainable = lora.trainable_parameter_count(cfg.lora, model.vit.embed_dim,
                                                   model.vit.num_layers)
    total = sum(p.data.size for p in model.param_list()) + \
        (trainable if cfg.mode not in ("zero_shot", "full_tune") else 0)
    wall = [ep.wall_ms for ep in episodes]
    peak = max((ep.peak_tape_nodes for ep in episodes), default=0)
    return {
        "trainable_params": int(trainable),
        "total_params": int(total),
        "peak_tape_nodes": int(peak),
        "wall_ms_per_episode": float(np.median(wall)) if wall else 0.0,
    }


def report_csv_rows(reports: list[dict]) -> str:
    """One CSV row per (mode, dataset, seed) report record."""
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=REPORT_FIELDS, extrasaction="ignore")
    writer.writeheader()
    for rec in reports:
        writer.writerow({k: rec.get(k) for k in REPORT_FIELDS})
    return buf.getvalue()
