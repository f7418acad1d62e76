"""Depth evaluation measures over valid, depth-capped pixels.

The evaluation set is {valid AND 0 < gt <= cap}. Reports carry the raw
per-pixel sums so shards can be merged before finalizing.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, asdict, field

import numpy as np

DELTA_BASE = 1.25


@dataclass
class EvalReport:
    silog: float
    sq_rel: float
    abs_rel: float
    rmse: float
    rmse_log: float
    log10_err: float
    delta1: float
    delta2: float
    delta3: float
    n_valid: int
    cap: float
    irmse: float | None = None

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    def table_line(self) -> str:
        """One row in the conventional column order:
        Abs Rel, Sq Rel, RMSE, RMSE log, d1, d2, d3."""
        cols = (self.abs_rel, self.sq_rel, self.rmse, self.rmse_log,
                self.delta1, self.delta2, self.delta3)
        return " ".join(f"{c:.4f}" for c in cols)


@dataclass
class MetricAccumulator:
    """Running per-pixel sums; merge shards with ``update``/``merge`` and
    finalize with ``report``."""

    cap: float
    n: int = 0
    sums: dict = field(default_factory=lambda: {
        "sq": 0.0, "abs_rel": 0.0, "sq_rel": 0.0, "log_e": 0.0, "log_e_sq": 0.0,
        "log10_abs": 0.0, "inv_sq": 0.0, "d1": 0, "d2": 0, "d3": 0,
    })

    def update(self, pred: np.ndarray, gt: np.ndarray, mask: np.ndarray):
        pred = np.asarray(pred, dtype=np.float64)
        gt = np.asarray(gt, dtype=np.float64)
        if pred.shape != gt.shape or pred.shape != np.shape(mask):
            raise ValueError("pred, gt, and mask must share one shape")
        sel = np.asarray(mask, dtype=bool) & (gt > 0.0) & (gt <= self.cap)
        p = pred[sel]
        g = gt[sel]
        if p.size and np.any(p <= 0.0):
            raise ValueError("non-positive prediction at an evaluated pixel")
        d = p - g
        e = np.log(p) - np.log(g)
        ratio = np.maximum(p / g, g / p)
        s = self.sums
        # fsum keeps every per-pixel sum exactly rounded, so the report is
        # invariant to pixel order.
        s["sq"] += math.fsum(d ** 2)
        s["abs_rel"] += math.fsum(np.abs(d) / g)
        s["sq_rel"] += math.fsum(d ** 2 / g)
        s["log_e"] += math.fsum(e)
        s["log_e_sq"] += math.fsum(e ** 2)
        s["log10_abs"] += math.fsum(np.abs(np.log10(p) - np.log10(g)))
        s["inv_sq"] += math.fsum((1.0 / p - 1.0 / g) ** 2)
        s["d1"] += int((ratio < DELTA_BASE).sum())
        s["d2"] += int((ratio < DELTA_BASE ** 2).sum())
        s["d3"] += int((ratio < DELTA_BASE ** 3).sum())
        self.n += int(p.size)

    def merge(self, other: "MetricAccumulator"):
        if other.cap != self.cap:
            raise ValueError("cannot merge accumulators with different caps")
        for key in self.sums:
            self.sums[key] += other.sums[key]
        self.n += other.n

    def report(self, include_irmse: bool = False) -> EvalReport:
        if self.n < 1:
            raise ValueError("empty evaluation set")
        n = self.n
        s = self.sums
        silog_sq = s["log_e_sq"] / n - (s["log_e"] / n) ** 2
        return EvalReport(
            silog=math.sqrt(max(silog_sq, 0.0)),
            sq_rel=s["sq_rel"] / n,
            abs_rel=s["abs_rel"] / n,
            rmse=math.sqrt(s["sq"] / n),
            rmse_log=math.sqrt(s["log_e_sq"] / n),
            log10_err=s["log10_abs"] / n,
            delta1=s["d1"] / n,
            delta2=s["d2"] / n,
            delta3=s["d3"] / n,
            n_valid=n,
            cap=float(self.cap),
            irmse=math.sqrt(s["inv_sq"] / n) if include_irmse else None,
        )


def compute_metrics(pred: np.ndarray, gt: np.ndarray, mask: np.ndarray,
                    cap: float) -> EvalReport:
    """All evaluation measures for one prediction set under a depth cap."""
    acc = MetricAccumulator(cap=float(cap))
    acc.update(pred, gt, mask)
    return acc.report()
