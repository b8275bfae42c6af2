"""Hybrid training objective: masked MSE plus a regional InfoNCE term."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "LossConfig",
    "LossBreakdown",
    "regression_loss",
    "regression_loss_grad",
    "contrastive_loss",
    "contrastive_loss_grad",
    "total_loss",
]

NORM_EPS = 1e-12


@dataclass(frozen=True)
class LossConfig:
    lam: float = 0.25
    tau: float = 0.07
    negative_scope: str = "region"

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lambda must be non-negative")
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if self.negative_scope not in ("region", "batch"):
            raise ValueError("negative_scope must be 'region' or 'batch'")


@dataclass(frozen=True)
class LossBreakdown:
    l_reg: float
    l_contrast: float
    l_total: float
    valid_cell_count: int


def _batched(pred, truth, mask):
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if pred.shape != truth.shape:
        raise ValueError(f"prediction {pred.shape} and truth {truth.shape} differ in shape")
    squeeze = pred.ndim == 3
    if squeeze:
        pred, truth = pred[None], truth[None]
    if mask is None:
        mask = np.ones((pred.shape[0],) + pred.shape[2:], dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    if mask.ndim == 2:
        mask = mask[None]
    if mask.shape != (pred.shape[0],) + pred.shape[2:]:
        raise ValueError(f"mask {mask.shape} does not match grids {pred.shape}")
    return pred, truth, mask, squeeze


def regression_loss(pred, truth, mask=None) -> float:
    """Mean squared error over all genes and valid cells."""
    return regression_loss_grad(pred, truth, mask)[0]


def regression_loss_grad(pred, truth, mask=None):
    """``(loss, dloss/dpred)``; grids are (C, H', W') or batched (N, C, H', W')."""
    p, t, m, squeeze = _batched(pred, truth, mask)
    n_valid = int(m.sum())
    if n_valid == 0:
        raise ValueError("regression loss needs at least one valid cell")
    denom = p.shape[1] * n_valid
    diff = (p - t) * m[:, None]
    loss = float(np.sum(diff.astype(np.float64) ** 2) / denom)
    grad = (2.0 / denom) * diff
    return loss, (grad[0] if squeeze else grad).astype(p.dtype, copy=False)


def _unit(x: np.ndarray, what: str):
    norms = np.linalg.norm(x, axis=-1, keepdims=True)
    if np.any(norms < NORM_EPS):
        raise ValueError(f"{what} embedding with zero norm; cosine similarity undefined")
    return x / norms, norms


def _info_nce(img: np.ndarray, exp: np.ndarray, tau: float):
    """Per-anchor InfoNCE for matched rows of (n, d) arrays, plus d/d img."""
    u, norms = _unit(img, "image")
    v, _ = _unit(exp, "expression")
    logits = (u @ v.T) / tau
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1))
    n = img.shape[0]
    per_cell = log_norm - np.diag(shifted)
    soft = np.exp(shifted - log_norm[:, None])
    g_logits = (soft - np.eye(n)) / tau  # per-cell loss wrt its row of logits
    g_u = g_logits @ v
    # project out the radial component: d(x/|x|) = (I - u u^T) / |x|
    g_img = (g_u - np.sum(g_u * u, axis=1, keepdims=True) * u) / norms
    return per_cell, g_img


def _cells(emb: np.ndarray) -> np.ndarray:
    """(N, d, H', W') -> (N, H'*W', d)."""
    n, d = emb.shape[:2]
    return emb.reshape(n, d, -1).transpose(0, 2, 1)


def contrastive_loss(img_embeddings, exp_embeddings, mask=None, config: LossConfig = LossConfig()) -> float:
    return contrastive_loss_grad(img_embeddings, exp_embeddings, mask, config)[0]


def contrastive_loss_grad(img_embeddings, exp_embeddings, mask=None, config: LossConfig = LossConfig()):
    """InfoNCE between per-cell image and expression embeddings.

    Embeddings are (d, H', W') or batched (N, d, H', W'). For each valid cell
    the positive is the expression embedding at the same cell; negatives are
    the other valid cells of the same region (``negative_scope="region"``) or
    of the whole batch (``"batch"``). The positive sits in the denominator.
    Returns ``(loss, dloss/d img_embeddings)``; with region scope the loss is
    the mean over regions of each region's mean over valid cells.
    """
    img = np.asarray(img_embeddings)
    exp = np.asarray(exp_embeddings)
    if img.shape != exp.shape:
        raise ValueError(f"embedding grids differ: {img.shape} vs {exp.shape}")
    squeeze = img.ndim == 3
    if squeeze:
        img, exp = img[None], exp[None]
    if mask is None:
        mask = np.ones((img.shape[0],) + img.shape[2:], dtype=bool)
    mask = np.asarray(mask, dtype=bool).reshape(img.shape[0], -1)

    dtype = img.dtype
    ci = _cells(img.astype(np.float64))
    ce = _cells(exp.astype(np.float64))
    grad = np.zeros_like(ci)

    if config.negative_scope == "batch":
        valid = mask.reshape(-1)
        if valid.sum() < 2:
            raise ValueError("contrastive loss needs at least 2 valid cells")
        flat_i = ci.reshape(-1, ci.shape[-1])
        per, g = _info_nce(flat_i[valid], ce.reshape(-1, ce.shape[-1])[valid], config.tau)
        loss = float(per.mean())
        gflat = np.zeros_like(flat_i)
        gflat[valid] = g / valid.sum()
        grad = gflat.reshape(ci.shape)
    else:
        regions = [r for r in range(ci.shape[0]) if mask[r].sum() >= 2]
        if not regions:
            raise ValueError("contrastive loss needs a region with at least 2 valid cells")
        loss = 0.0
        for r in regions:
            v = mask[r]
            per, g = _info_nce(ci[r][v], ce[r][v], config.tau)
            loss += float(per.mean())
            grad[r][v] = g / (v.sum() * len(regions))
        loss /= len(regions)

    n, d, h, w = img.shape
    grad = grad.transpose(0, 2, 1).reshape(n, d, h, w).astype(dtype, copy=False)
    return loss, (grad[0] if squeeze else grad)


def total_loss(pred, truth, img_emb, exp_emb, mask=None, config: LossConfig = LossConfig()) -> LossBreakdown:
    """``l_reg + lam * l_contrast``, with both terms reported."""
    l_reg = regression_loss(pred, truth, mask)
    l_con = contrastive_loss(img_emb, exp_emb, mask, config)
    n_valid = int(np.asarray(mask).sum()) if mask is not None else int(np.prod(np.shape(pred)[-2:]))
    return LossBreakdown(l_reg, l_con, l_reg + config.lam * l_con, n_valid)
