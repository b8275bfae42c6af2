"""Epoch throughput of the one-to-one and image-to-image settings on identical bins."""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass

import numpy as np
from threadpoolctl import threadpool_limits

from . import autograd as ag
from .data import BinTable, GenePanel, tile_regions, tile_spots
from .estimator import init_output_head
from .model import (
    ModelConfig,
    init_params,
    init_spot_params,
    pretrain_expression_encoder,
    region_forward_macs,
    spot_forward_macs,
)
from .training import TrainConfig, stack_regions, train_arrays, train_spots

__all__ = [
    "BenchReport",
    "bench",
    "bench_fingerprint",
    "full_scale_mac_ratio",
    "format_table",
    "reports_to_json",
]

SETTINGS = ("one_to_one", "image_to_image")


@dataclass(frozen=True)
class BenchReport:
    setting: str
    wall_seconds_per_epoch: float
    forward_passes: int  # per epoch
    multiply_accumulate_count: int  # forward MACs per epoch
    speedup_vs_one_to_one: float
    dataset_fingerprint: str

    def __post_init__(self):
        if self.setting not in SETTINGS:
            raise ValueError(f"unknown setting {self.setting!r}")
        if self.forward_passes <= 0 or self.multiply_accumulate_count <= 0:
            raise ValueError("forward passes and MAC counts must be positive")


def bench_fingerprint(table: BinTable, bin_rows, panel: GenePanel | None) -> str:
    """Hash of the bin ids actually covered plus the gene panel."""
    h = hashlib.sha256()
    h.update(json.dumps(sorted(table.bin_ids[int(i)] for i in bin_rows)).encode())
    if panel is not None:
        h.update(json.dumps([int(i) for i in panel.indices]).encode())
    return h.hexdigest()[:16]


def full_scale_mac_ratio(gene_count: int = 250, base_width: int = 64) -> float:
    """One-to-one over image-to-image forward MACs for one 448 px region.

    The region model maps 448 px to a 14 x 14 grid (six encoder levels, one
    decoder level); the one-to-one model runs 196 times on 112 px patches.
    """
    cfg = ModelConfig(gene_count=gene_count, input_px=448, base_width=base_width,
                      enc_depth=6, dec_depth=1)
    return 196 * spot_forward_macs(cfg, 112) / region_forward_macs(cfg)


def bench(
    table: BinTable,
    image_source,
    expression: np.ndarray,
    panel: GenePanel | None = None,
    region_px: int = 64,
    bins_per_side: int = 4,
    spot_px: int = 56,
    model: ModelConfig | None = None,
    train: TrainConfig | None = None,
    epochs: int = 2,
    threads: int = 1,
    pretrain_epochs: int = 50,
):
    """Train both settings for ``epochs`` epochs on the same bins and time them.

    ``expression`` is the panel-selected, normalised (n_bins, C) matrix.
    Data is tiled before the clock starts. Returns
    ``(one_to_one, image_to_image)`` reports.
    """
    if epochs < 1:
        raise ValueError("bench needs at least one epoch")
    regions = tile_regions(table, image_source, region_px, bins_per_side, expression=expression)
    spots = tile_spots(table, image_source, spot_px, expression=expression)
    region_bins = np.concatenate([s.bin_rows[s.bin_rows >= 0] for s in regions]) if regions else []
    spot_bins = [s.bin_index for s in spots]
    fp_regions = bench_fingerprint(table, region_bins, panel)
    fp_spots = bench_fingerprint(table, spot_bins, panel)
    if fp_regions != fp_spots:
        raise ValueError("one-to-one and image-to-image settings cover different bin sets")

    n_genes = expression.shape[1]
    cfg = model or ModelConfig(gene_count=n_genes, input_px=region_px)
    if cfg.gene_count != n_genes or cfg.input_px != region_px:
        raise ValueError("model config does not match the data")
    if cfg.output_px != bins_per_side:
        raise ValueError(f"model output side {cfg.output_px} != bins_per_side {bins_per_side}")
    tc = train or TrainConfig(lr0=0.1, batch_size=8)
    tc = TrainConfig(**{**tc.__dict__, "epochs": epochs, "patience": epochs + 1})

    images, grids, masks = stack_regions(regions)
    patches = np.stack([s.image for s in spots])
    targets = np.stack([s.expression for s in spots])

    with threadpool_limits(threads):
        params = init_params(cfg, tc.seed)
        pretrain_expression_encoder(
            params, grids.transpose(0, 2, 3, 1)[masks], pretrain_epochs, tc.seed
        )
        init_output_head(params, grids, masks, tc.seed)
        _, log_i2i = train_arrays(params, images, grids, masks, tc)

        sparams = init_spot_params(cfg, spot_px, tc.seed)
        sparams.tensors["spot.w"][:] = 0
        sparams.tensors["spot.b"] = targets.mean(axis=0).astype(ag.get_dtype())
        _, log_oto = train_spots(sparams, patches, targets, tc)

    sec_i2i = float(np.mean([e.seconds for e in log_i2i.epochs]))
    sec_oto = float(np.mean([e.seconds for e in log_oto.epochs]))
    oto = BenchReport(
        "one_to_one", sec_oto, len(spots),
        len(spots) * spot_forward_macs(cfg, spot_px), 1.0, fp_spots,
    )
    i2i = BenchReport(
        "image_to_image", sec_i2i, len(regions),
        len(regions) * region_forward_macs(cfg), sec_oto / sec_i2i, fp_regions,
    )
    return oto, i2i


def reports_to_json(reports, full_scale_ratio: float | None = None) -> str:
    doc = {"reports": [asdict(r) for r in reports]}
    oto = next(r for r in reports if r.setting == "one_to_one")
    i2i = next(r for r in reports if r.setting == "image_to_image")
    doc["mac_ratio"] = oto.multiply_accumulate_count / i2i.multiply_accumulate_count
    if full_scale_ratio is not None:
        doc["full_scale_mac_ratio"] = full_scale_ratio
    return json.dumps(doc, indent=2, sort_keys=True)


def format_table(reports) -> str:
    head = f"{'setting':<16}{'s/epoch':>10}{'passes':>9}{'MACs/epoch':>16}{'speedup':>9}"
    rows = [head, "-" * len(head)]
    for r in reports:
        rows.append(
            f"{r.setting:<16}{r.wall_seconds_per_epoch:>10.3f}{r.forward_passes:>9d}"
            f"{r.multiply_accumulate_count:>16d}{r.speedup_vs_one_to_one:>9.2f}"
        )
    return "\n".join(rows)
