"""Counterfactual quality metrics and their aggregation.

Scales used in every report:

* actionability: 100 x mean absolute per-pixel difference on [0, 1] images
* ssim: Gaussian-window SSIM (11x11, sigma 1.5, K1=0.01, K2=0.03, L=1) x 100
* cpg: |f(x) - f(x_cf)| on probabilities
* scls: |d(x) - d(x_cf)| on artifact-detector probabilities
"""
from __future__ import annotations

import csv
import json
import math
from collections import defaultdict
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
import torch
import torch.nn.functional as F

METRICS = ("actionability", "ssim", "cpg", "scls")
AGGREGATE_HEADER = ("classifier", "dataset", "metric", "mean", "std", "count")

DEFINITIONS = {
    "actionability": "100 * mean(|x - x_cf|) over pixels, images in [0,1]",
    "ssim": "100 * SSIM, gaussian window 11x11 sigma 1.5, C1=(0.01*1)^2, C2=(0.03*1)^2, valid region mean",
    "cpg": "|f(x) - f(x_cf)|, f = disease-classifier probability",
    "scls": "|d(x) - d(x_cf)|, d = artifact-detector probability",
}

WINDOW_SIZE = 11
WINDOW_SIGMA = 1.5
K1, K2 = 0.01, 0.03


def _check_pair(x, x_cf):
    x = np.asarray(x, dtype=np.float64)
    x_cf = np.asarray(x_cf, dtype=np.float64)
    if x.shape != x_cf.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {x_cf.shape}")
    return x, x_cf


def actionability(x, x_cf) -> float:
    x, x_cf = _check_pair(x, x_cf)
    return float(100.0 * np.abs(x - x_cf).mean())


def _gaussian_window(size=WINDOW_SIZE, sigma=WINDOW_SIGMA) -> torch.Tensor:
    coords = torch.arange(size, dtype=torch.float64) - (size - 1) / 2
    g = torch.exp(-coords ** 2 / (2 * sigma ** 2))
    g = g / g.sum()
    return torch.outer(g, g)[None, None]


def ssim_batch(x, y, data_range: float = 1.0) -> np.ndarray:
    """SSIM x 100 for each pair in two (N, H, W) stacks."""
    x = torch.as_tensor(np.asarray(x, dtype=np.float64))
    y = torch.as_tensor(np.asarray(y, dtype=np.float64))
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch: {tuple(x.shape)} vs {tuple(y.shape)}")
    if x.ndim == 2:
        x, y = x[None], y[None]
    if min(x.shape[-2:]) < WINDOW_SIZE:
        raise ValueError(f"images smaller than the {WINDOW_SIZE}x{WINDOW_SIZE} SSIM window")
    x, y = x[:, None], y[:, None]
    w = _gaussian_window()
    c1, c2 = (K1 * data_range) ** 2, (K2 * data_range) ** 2

    mu_x, mu_y = F.conv2d(x, w), F.conv2d(y, w)
    sxx = F.conv2d(x * x, w) - mu_x ** 2
    syy = F.conv2d(y * y, w) - mu_y ** 2
    sxy = F.conv2d(x * y, w) - mu_x * mu_y
    num = (2 * mu_x * mu_y + c1) * (2 * sxy + c2)
    den = (mu_x ** 2 + mu_y ** 2 + c1) * (sxx + syy + c2)
    return (100.0 * (num / den).mean(dim=(1, 2, 3))).numpy()


def ssim(x, x_cf) -> float:
    x, x_cf = _check_pair(x, x_cf)
    return float(ssim_batch(x, x_cf)[0])


def _prob(model, image) -> float:
    from .classifiers import predict_proba

    return float(predict_proba(model, np.asarray(image)[None])[0])


def cpg(f, x, x_cf) -> float:
    """|f(x) - f(x_cf)|. ``f`` may be a classifier or a precomputed pair of probabilities."""
    return abs(_prob(f, x) - _prob(f, x_cf))


def scls(d, x, x_cf) -> float:
    """Spurious-correlation latching score |d(x) - d(x_cf)| for artifact detector d."""
    if d is None or getattr(d, "input_side", None) is None:
        raise ValueError("scls needs a trained artifact detector")
    return abs(_prob(d, x) - _prob(d, x_cf))


def probability_gap(p, p_cf) -> np.ndarray:
    """Elementwise |p - p_cf|; shared by CPG and SCLS on precomputed probabilities."""
    return np.abs(np.asarray(p, dtype=np.float64) - np.asarray(p_cf, dtype=np.float64))


@dataclass
class PairMetrics:
    actionability: float
    ssim: float
    cpg: float
    scls: float


@dataclass
class AggregateRow:
    keys: tuple
    metric: str
    mean: float
    std: float
    count: int


def aggregate(records: Iterable[Mapping], keys: Sequence[str] = ("classifier", "dataset"),
              metrics: Sequence[str] = METRICS) -> list[AggregateRow]:
    """Mean and population std of each metric per group, independent of input order.

    Values are summed with ``math.fsum`` so the result does not depend on the
    order in which records arrive.
    """
    grouped = defaultdict(lambda: defaultdict(list))
    for rec in records:
        k = tuple(rec[name] for name in keys)
        for m in metrics:
            if m in rec and rec[m] is not None:
                grouped[k][m].append(float(rec[m]))
    rows = []
    for k in sorted(grouped):
        for m in metrics:
            vals = grouped[k][m]
            if not vals:
                continue
            n = len(vals)
            mean = math.fsum(vals) / n
            var = math.fsum((v - mean) ** 2 for v in vals) / n
            rows.append(AggregateRow(k, m, mean, math.sqrt(var), n))
    if not rows:
        raise ValueError("nothing to aggregate")
    return rows


def write_aggregate_csv(rows: Sequence[AggregateRow], path: str | Path, digits: int = 6):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(AGGREGATE_HEADER)
        for r in rows:
            classifier, dataset = r.keys[:2]
            w.writerow([classifier, dataset, r.metric, f"{r.mean:.{digits}f}", f"{r.std:.{digits}f}", r.count])


def write_pair_records(records: Iterable[Mapping], path: str | Path):
    """One JSON object per line."""
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def read_pair_records(path: str | Path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def rows_to_dicts(rows: Sequence[AggregateRow]) -> list[dict]:
    return [{**asdict(r), "keys": list(r.keys)} for r in rows]
