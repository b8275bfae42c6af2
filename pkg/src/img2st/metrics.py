"""Evaluation metrics for predicted expression grids.

SSIM-ST is windowed structural similarity applied gene by gene to the
H' x W' expression maps. Pearson correlation is reported alongside it but
flagged as degenerate, rather than emitted, when either side has (near)
zero variance, which is the common case for sparse HD genes.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "SsimConfig",
    "MetricsReport",
    "mse",
    "mae",
    "pcc",
    "ssim_map",
    "ssim_st",
    "mean_expression_profile",
    "evaluate",
    "write_report_csv",
    "PCC_VARIANCE_FLOOR",
]

PCC_VARIANCE_FLOOR = 1e-12
RANGE_FLOOR = 1e-3


@dataclass(frozen=True)
class SsimConfig:
    window: int = 7
    k1: float = 0.01
    k2: float = 0.03
    # None -> per-gene max over both maps (floored at 1e-3); a float fixes L
    dynamic_range: float | None = None

    def __post_init__(self):
        if self.window < 3 or self.window % 2 == 0:
            raise ValueError("SSIM window must be odd and >= 3")
        if self.k1 <= 0 or self.k2 <= 0:
            raise ValueError("k1 and k2 must be positive")


def _stack(grids, masks=None):
    """Normalise inputs to (N, C, H', W') values and (N, H', W') masks."""
    g = np.asarray(grids, dtype=np.float64)
    if g.ndim == 3:
        g = g[None]
    if masks is None:
        m = np.ones((g.shape[0],) + g.shape[2:], dtype=bool)
    else:
        m = np.asarray(masks, dtype=bool)
        if m.ndim == 2:
            m = m[None]
    if g.ndim != 4 or m.shape != (g.shape[0],) + g.shape[2:]:
        raise ValueError(f"grids {g.shape} and masks {m.shape} are inconsistent")
    return g, m


def _per_gene_cells(pred, truth, mask):
    p, m = _stack(pred, mask)
    t, _ = _stack(truth, mask)
    if p.shape != t.shape:
        raise ValueError(f"prediction {p.shape} and truth {t.shape} differ in shape")
    # (C, n_valid_cells)
    return p.transpose(1, 0, 2, 3)[:, m], t.transpose(1, 0, 2, 3)[:, m]


def mse(pred, truth, mask=None):
    """Per-gene mean squared error over valid cells, and its mean over genes."""
    p, t = _per_gene_cells(pred, truth, mask)
    if p.shape[1] == 0:
        raise ValueError("no valid cells")
    per_gene = np.mean((p - t) ** 2, axis=1)
    return per_gene, float(per_gene.mean())


def mae(pred, truth, mask=None):
    p, t = _per_gene_cells(pred, truth, mask)
    if p.shape[1] == 0:
        raise ValueError("no valid cells")
    per_gene = np.mean(np.abs(p - t), axis=1)
    return per_gene, float(per_gene.mean())


def pcc(pred, truth) -> float | None:
    """Pearson correlation, or ``None`` when either variance is below 1e-12.

    ``None`` is the degeneracy flag: near-constant vectors (e.g. an all-zero
    gene) make the denominator vanish and the correlation meaningless.
    """
    x = np.asarray(pred, dtype=np.float64).ravel()
    y = np.asarray(truth, dtype=np.float64).ravel()
    if x.size != y.size:
        raise ValueError(f"length mismatch: {x.size} vs {y.size}")
    if x.size < 2:
        raise ValueError("pcc needs at least 2 values")
    dx, dy = x - x.mean(), y - y.mean()
    vx, vy = np.mean(dx * dx), np.mean(dy * dy)
    if vx < PCC_VARIANCE_FLOOR or vy < PCC_VARIANCE_FLOOR:
        return None
    r = float(np.sum(dx * dy) / math.sqrt(np.sum(dx * dx) * np.sum(dy * dy)))
    return max(-1.0, min(1.0, r))


def _window_stats(a: np.ndarray, b: np.ndarray, w: int):
    wa = sliding_window_view(a, (w, w))
    wb = sliding_window_view(b, (w, w))
    mu_a = wa.mean(axis=(-2, -1))
    mu_b = wb.mean(axis=(-2, -1))
    da = wa - mu_a[..., None, None]
    db = wb - mu_b[..., None, None]
    var_a = (da * da).mean(axis=(-2, -1))
    var_b = (db * db).mean(axis=(-2, -1))
    cov = (da * db).mean(axis=(-2, -1))
    return mu_a, mu_b, var_a, var_b, cov


def ssim_map(pred, truth, config: SsimConfig = SsimConfig(), window: int | None = None) -> np.ndarray:
    """Valid-mode SSIM over uniform ``window x window`` windows of two 2-D maps.

    Means, variances and covariance use population (1/n) normalisation;
    C1 = (k1 L)^2 and C2 = (k2 L)^2 with L the configured dynamic range.
    """
    x = np.asarray(pred, dtype=np.float64)
    y = np.asarray(truth, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 2:
        raise ValueError(f"ssim_map expects two equal 2-D maps, got {x.shape} and {y.shape}")
    w = window or config.window
    if min(x.shape) < w:
        raise ValueError(f"map {x.shape} is smaller than the {w}x{w} window")
    if config.dynamic_range is None:
        dr = max(float(x.max()), float(y.max()), RANGE_FLOOR)
    else:
        dr = float(config.dynamic_range)
    c1 = (config.k1 * dr) ** 2
    c2 = (config.k2 * dr) ** 2
    mu_x, mu_y, var_x, var_y, cov = _window_stats(x, y, w)
    num = (2 * mu_x * mu_y + c1) * (2 * cov + c2)
    den = (mu_x ** 2 + mu_y ** 2 + c1) * (var_x + var_y + c2)
    return np.clip(num / den, -1.0, 1.0)


def _effective_window(config: SsimConfig, h: int, w: int) -> int:
    size = min(config.window, h, w)
    if size % 2 == 0:
        size -= 1
    if size < 3:
        raise ValueError(f"grids of {h}x{w} are too small for a 3x3 SSIM window")
    return size


def ssim_st(pred, truth, mask=None, config: SsimConfig = SsimConfig()):
    """Per-gene SSIM-ST and its mean over genes.

    For each gene the SSIM map of every region is computed (masked cells set
    to zero on both sides) and all window values are averaged. The window
    shrinks to the largest odd size fitting grids smaller than the configured
    one. The dynamic range is taken per gene over the whole set of regions.
    """
    p, m = _stack(pred, mask)
    t, _ = _stack(truth, mask)
    if p.shape != t.shape:
        raise ValueError(f"prediction {p.shape} and truth {t.shape} differ in shape")
    p = p * m[:, None]
    t = t * m[:, None]
    n, c, h, w = p.shape
    win = _effective_window(config, h, w)
    per_gene = np.empty(c)
    for g in range(c):
        if config.dynamic_range is None:
            dr = max(float(p[:, g].max()), float(t[:, g].max()), RANGE_FLOOR)
            cfg = SsimConfig(config.window, config.k1, config.k2, dr)
        else:
            cfg = config
        per_gene[g] = np.mean([ssim_map(p[r, g], t[r, g], cfg, window=win) for r in range(n)])
    return per_gene, float(per_gene.mean())


def mean_expression_profile(pred, truth, mask=None):
    """Per-gene means over all valid cells, ordered by truth mean descending.

    Returns ``(order, truth_means, pred_means)`` where the means are already
    in the returned gene order.
    """
    p, t = _per_gene_cells(pred, truth, mask)
    if p.shape[1] == 0:
        raise ValueError("no valid cells in any grid")
    tm, pm = t.mean(axis=1), p.mean(axis=1)
    order = np.lexsort((np.arange(len(tm)), -tm))
    return order, tm[order], pm[order]


@dataclass
class MetricsReport:
    genes: list[str]
    mse: np.ndarray
    mae: np.ndarray
    pcc: np.ndarray  # NaN where degenerate
    pcc_degenerate: np.ndarray
    ssim_st: np.ndarray
    aggregate: dict = field(default_factory=dict)

    @property
    def degenerate_count(self) -> int:
        return int(self.pcc_degenerate.sum())


def evaluate(pred, truth, mask=None, genes: Sequence[str] | None = None,
             config: SsimConfig = SsimConfig()) -> MetricsReport:
    """All metrics for a set of predicted grids against the truth."""
    p, t = _per_gene_cells(pred, truth, mask)
    n_genes = p.shape[0]
    genes = list(genes) if genes is not None else [f"gene{g}" for g in range(n_genes)]
    mse_g, mse_a = mse(pred, truth, mask)
    mae_g, mae_a = mae(pred, truth, mask)
    ssim_g, ssim_a = ssim_st(pred, truth, mask, config)
    r = [pcc(p[g], t[g]) for g in range(n_genes)]
    degenerate = np.array([v is None for v in r])
    pcc_g = np.array([np.nan if v is None else v for v in r])
    pcc_a = float(pcc_g[~degenerate].mean()) if (~degenerate).any() else float("nan")
    return MetricsReport(
        genes, mse_g, mae_g, pcc_g, degenerate, ssim_g,
        aggregate={
            "mse": mse_a, "mae": mae_a, "pcc": pcc_a, "ssim_st": ssim_a,
            "pcc_degenerate": int(degenerate.sum()),
        },
    )


def _fmt(v: float) -> str:
    return "" if v is None or (isinstance(v, float) and math.isnan(v)) else repr(float(v))


def write_report_csv(report: MetricsReport, path) -> None:
    """``gene,mse,mae,pcc,pcc_degenerate,ssim_st`` plus an ``__aggregate__`` row.

    Degenerate PCC cells are left empty; the aggregate row's ``pcc_degenerate``
    column holds the number of flagged genes.
    """
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["gene", "mse", "mae", "pcc", "pcc_degenerate", "ssim_st"])
        for i, g in enumerate(report.genes):
            w.writerow([
                g, _fmt(report.mse[i]), _fmt(report.mae[i]), _fmt(report.pcc[i]),
                int(report.pcc_degenerate[i]), _fmt(report.ssim_st[i]),
            ])
        a = report.aggregate
        w.writerow([
            "__aggregate__", _fmt(a["mse"]), _fmt(a["mae"]), _fmt(a["pcc"]),
            a["pcc_degenerate"], _fmt(a["ssim_st"]),
        ])
