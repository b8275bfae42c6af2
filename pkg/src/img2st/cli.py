"""``img2st`` command line: synth, prepare, train, eval, bench, export-maps.

Exit codes: 0 on success, 1 on invalid input or data, 2 on usage errors.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np
from PIL import Image
from threadpoolctl import threadpool_limits

from . import autograd as ag
from .bench import bench, format_table, full_scale_mac_ratio, reports_to_json
from .data import (
    DESK_SCALE,
    DataFormatError,
    TileImageSource,
    bins_per_side_for,
    load_bin_table,
    normalize_counts,
    read_grid,
    save_bin_table,
    select_gene_panel,
    split_train_test,
    synth_slide,
    tile_regions,
    write_grid,
)
from .estimator import Img2STRegressor
from .metrics import evaluate, mean_expression_profile, write_report_csv
from .losses import LossConfig
from .model import ModelConfig, load_checkpoint, save_checkpoint
from .training import TrainConfig, predict, write_trainlog_csv

logger = logging.getLogger("img2st")

PX_PER_UM = DESK_SCALE["px_per_um"]


class CliError(Exception):
    """Validation failure reported with exit code 1."""


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------

def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _load_prepared(data: Path, split: str | None = None):
    meta_path = data / "prepare.json"
    if not meta_path.exists():
        raise CliError(f"{data} is not a prepared dataset (no prepare.json)")
    meta = json.loads(meta_path.read_text())
    images = np.load(data / "images.npy")
    grids = [read_grid(data / "grids" / f"{i:05d}.ist") for i in range(len(images))]
    with open(data / "regions.tsv") as fh:
        splits = [row["split"] for row in csv.DictReader(fh, delimiter="\t")]
    if len(splits) != len(images):
        raise CliError("regions.tsv does not match images.npy")
    with open(data / "panel.tsv") as fh:
        genes = [row["gene_name"] for row in csv.DictReader(fh, delimiter="\t")]
    idx = np.arange(len(images))
    if split is not None:
        idx = np.array([i for i, s in enumerate(splits) if s == split], dtype=int)
        if len(idx) == 0:
            raise CliError(f"no regions in split {split!r}")
    y = np.stack([grids[i].values for i in idx])
    m = np.stack([grids[i].valid_mask for i in idx])
    return meta, images[idx], y, m, idx, genes


def _predictions(args, data: Path, images: np.ndarray, idx: np.ndarray):
    if args.checkpoint:
        params = load_checkpoint(args.checkpoint)
        with ag.precision(args.precision):
            params = params.astype(ag.get_dtype())
            return predict(params, images, args.batch)
    pred_dir = Path(args.pred)
    return np.stack([read_grid(pred_dir / f"{i:05d}.ist").values for i in idx])


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_synth(args) -> int:
    out = Path(args.out)
    bps = bins_per_side_for(args.region_px, args.resolution, PX_PER_UM)
    table, src = synth_slide(
        args.seed, args.regions, genes=args.genes, region_px=args.region_px,
        bins_per_side=bps, bin_size_um=float(args.resolution),
    )
    save_bin_table(table, out)
    src.save_tiles(out / "tiles", args.region_px)
    _write_json(out / "slide.json", {
        "seed": args.seed,
        "regions": args.regions,
        "genes": args.genes,
        "bin_size_um": float(args.resolution),
        "px_per_um": PX_PER_UM,
        "region_px": args.region_px,
        "bins_per_side": bps,
        "image_shape": list(src.shape),
    })
    print(f"wrote {table.n_bins} bins and a {src.shape[1]}x{src.shape[0]} px slide to {out}")
    return 0


def _load_slide(slide: Path, resolution: float):
    meta_path = slide / "slide.json"
    meta = json.loads(meta_path.read_text()) if meta_path.exists() else {}
    if meta and meta.get("bin_size_um") != resolution:
        raise CliError(f"slide has {meta['bin_size_um']} um bins but --resolution is {resolution}")
    table = load_bin_table(slide / "genes.tsv", slide / "bins.tsv", slide / "matrix.tsv", resolution)
    return table, TileImageSource(slide / "tiles"), meta


def cmd_prepare(args) -> int:
    slide, out = Path(args.slide), Path(args.out)
    table, src, _ = _load_slide(slide, float(args.resolution))
    bps = bins_per_side_for(args.region_px, args.resolution, PX_PER_UM)
    panel = select_gene_panel(table, args.genes)
    expr = normalize_counts(table.dense_counts(panel.indices))
    regions = tile_regions(table, src, args.region_px, bps, expression=expr)
    train, test = split_train_test(regions, args.train_ratio, args.seed)
    in_train = {id(s) for s in train}

    (out / "grids").mkdir(parents=True, exist_ok=True)
    np.save(out / "images.npy", np.stack([s.image for s in regions]).astype(np.float32))
    with open(out / "regions.tsv", "w") as fh:
        fh.write("index\torigin_x\torigin_y\tvalid_cells\tsplit\n")
        for i, s in enumerate(regions):
            write_grid(s.expression, out / "grids" / f"{i:05d}.ist")
            split = "train" if id(s) in in_train else "test"
            fh.write(f"{i}\t{s.origin[0]}\t{s.origin[1]}\t{int(s.expression.valid_mask.sum())}\t{split}\n")
    with open(out / "panel.tsv", "w") as fh:
        fh.write("gene_index\tgene_name\tmean_count\n")
        for i, name, mean in zip(panel.indices, panel.names, panel.means):
            fh.write(f"{i}\t{name}\t{float(mean)!r}\n")
    _write_json(out / "prepare.json", {
        "region_px": args.region_px,
        "bins_per_side": bps,
        "bin_size_um": float(args.resolution),
        "genes": args.genes,
        "seed": args.seed,
        "train_ratio": args.train_ratio,
    })
    print(f"prepared {len(regions)} regions ({len(train)} train, {len(test)} test) in {out}")
    return 0


def _depths(region_px: int, bins_per_side: int, enc_depth: int):
    ratio = region_px // bins_per_side
    levels = ratio.bit_length() - 1
    if 2 ** levels != ratio:
        raise CliError(f"region_px/bins_per_side = {ratio} is not a power of two")
    if levels > enc_depth:
        raise CliError(f"enc_depth {enc_depth} cannot reduce {region_px} px to {bins_per_side} bins")
    return enc_depth, enc_depth - levels


def cmd_train(args) -> int:
    data, out = Path(args.data), Path(args.out)
    meta, x, y, m, _, _ = _load_prepared(data, "train")
    _, xt, yt, mt, _, _ = _load_prepared(data, "test")
    le, ld = _depths(meta["region_px"], meta["bins_per_side"], args.enc_depth)
    est = Img2STRegressor(
        base_width=args.base_width, enc_depth=le, dec_depth=ld, lam=args.lam, tau=args.tau,
        lr=args.lr, batch_size=args.batch, epochs=args.epochs, precision=args.precision,
        random_state=args.seed, pretrain_epochs=args.pretrain_epochs,
    )
    est.fit(x, y, m, eval_set=(xt, yt, mt))
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(est.log_.best_params, out / "checkpoint.istc")
    write_trainlog_csv(est.log_, out / "trainlog.csv")
    last = est.log_.epochs[-1]
    print(f"trained {len(est.log_.epochs)} epochs; final l_total={last.l_total:.6f}; "
          f"best test epoch {est.log_.best_epoch}")
    return 0


def cmd_eval(args) -> int:
    if bool(args.checkpoint) == bool(args.pred):
        raise CliError("give exactly one of --checkpoint or --pred")
    data = Path(args.data)
    _, x, y, m, idx, genes = _load_prepared(data, None if args.split == "all" else args.split)
    pred = _predictions(args, data, x, idx)
    if pred.shape != y.shape:
        raise CliError(f"predictions {pred.shape} do not match truth {y.shape}")
    report = evaluate(pred, y, m, genes)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_report_csv(report, out)
    a = report.aggregate
    print(f"mse={a['mse']:.6f} mae={a['mae']:.6f} ssim_st={a['ssim_st']:.6f} "
          f"pcc_degenerate={a['pcc_degenerate']}")
    return 0


def _to_pgm16(values: np.ndarray, path: Path):
    lo, hi = float(values.min()), float(values.max())
    scale = (values - lo) / (hi - lo) if hi > lo else np.zeros_like(values)
    Image.fromarray(np.rint(scale * 65535).astype(np.uint16)).save(path, format="PPM")
    return lo, hi


def cmd_export_maps(args) -> int:
    if bool(args.checkpoint) == bool(args.pred):
        raise CliError("give exactly one of --checkpoint or --pred")
    data, out = Path(args.data), Path(args.out)
    _, x, y, m, idx, genes = _load_prepared(data, None if args.split == "all" else args.split)
    pred = _predictions(args, data, x, idx)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "ranges.tsv", "w") as fh:
        fh.write("file\tmin\tmax\n")
        for k, r in enumerate(idx):
            for g, name in enumerate(genes):
                for kind, grid in (("pred", pred[k, g]), ("truth", y[k, g])):
                    fname = f"region{int(r):05d}_{name}_{kind}.pgm"
                    lo, hi = _to_pgm16(np.asarray(grid, dtype=np.float64), out / fname)
                    fh.write(f"{fname}\t{lo!r}\t{hi!r}\n")
    order, tm, pm = mean_expression_profile(pred, y, m)
    with open(out / "mean_profile.csv", "w") as fh:
        fh.write("rank,gene,truth_mean,pred_mean\n")
        for rank, (g, t, p) in enumerate(zip(order, tm, pm)):
            fh.write(f"{rank},{genes[g]},{float(t)!r},{float(p)!r}\n")
    print(f"exported {2 * len(idx) * len(genes)} maps to {out}")
    return 0


def cmd_bench(args) -> int:
    if args.slide:
        table, src, meta = _load_slide(Path(args.slide), float(args.resolution))
        region_px = meta.get("region_px", args.region_px)
    else:
        region_px = args.region_px
        bps = bins_per_side_for(region_px, args.resolution, PX_PER_UM)
        table, src = synth_slide(args.seed, args.regions, genes=args.genes, region_px=region_px,
                                 bins_per_side=bps, bin_size_um=float(args.resolution))
    bps = bins_per_side_for(region_px, args.resolution, PX_PER_UM)
    panel = select_gene_panel(table, args.genes)
    expr = normalize_counts(table.dense_counts(panel.indices))
    le, ld = _depths(region_px, bps, args.enc_depth)
    cfg = ModelConfig(gene_count=args.genes, input_px=region_px, base_width=args.base_width,
                      enc_depth=le, dec_depth=ld)
    tc = TrainConfig(lr0=args.lr, batch_size=args.batch, seed=args.seed,
                     loss=LossConfig(args.lam, args.tau))
    spot_px = int(round(args.spot_um * PX_PER_UM))
    with ag.precision(args.precision):
        reports = bench(table, src, expr, panel, region_px, bps, spot_px, cfg, tc,
                        epochs=args.epochs, threads=args.threads)
    doc = reports_to_json(reports, full_scale_mac_ratio())
    if args.out:
        Path(args.out).write_text(doc + "\n")
    print(format_table(reports))
    print(doc)
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def _common(p: argparse.ArgumentParser, *names: str) -> None:
    opts = {
        "resolution": dict(type=int, choices=(8, 16), default=8, help="bin size in um"),
        "region-px": dict(type=int, default=DESK_SCALE["region_px"], dest="region_px"),
        "genes": dict(type=int, default=DESK_SCALE["genes"], help="gene panel size K"),
        "lambda": dict(type=float, default=0.25, dest="lam", help="contrastive weight"),
        "tau": dict(type=float, default=0.07, help="InfoNCE temperature"),
        "seed": dict(type=int, default=0),
        "epochs": dict(type=int, default=40),
        "batch": dict(type=int, default=8),
        "threads": dict(type=int, default=1, help="BLAS threads"),
        "precision": dict(choices=("f32", "f64"), default="f32"),
    }
    for n in names:
        p.add_argument(f"--{n}", **opts[n])


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="img2st", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic slide")
    p.add_argument("--out", required=True)
    p.add_argument("--regions", type=int, default=64)
    _common(p, "resolution", "region-px", "genes", "seed")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("prepare", help="tile a slide into region images and expression grids")
    p.add_argument("--slide", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--train-ratio", type=float, default=0.8)
    _common(p, "resolution", "region-px", "genes", "seed")
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("train", help="train on a prepared dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--lr", type=float, default=0.1)
    p.add_argument("--base-width", type=int, default=8)
    p.add_argument("--enc-depth", type=int, default=5)
    p.add_argument("--pretrain-epochs", type=int, default=300)
    _common(p, "lambda", "tau", "seed", "epochs", "batch", "threads", "precision")
    p.set_defaults(func=cmd_train)

    for name, func, helptext in (
        ("eval", cmd_eval, "write a metrics CSV"),
        ("export-maps", cmd_export_maps, "write 16-bit PGM maps and the mean profile"),
    ):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--data", required=True)
        p.add_argument("--checkpoint")
        p.add_argument("--pred", help="directory of NNNNN.ist predicted grids")
        p.add_argument("--split", choices=("train", "test", "all"), default="test")
        p.add_argument("--out", required=True)
        _common(p, "batch", "threads", "precision")
        p.set_defaults(func=func)

    p = sub.add_parser("bench", help="time one-to-one against image-to-image training")
    p.add_argument("--slide", help="slide directory (default: synthesise one)")
    p.add_argument("--regions", type=int, default=32)
    p.add_argument("--spot-um", type=float, default=28.0, help="one-to-one patch side in um")
    p.add_argument("--lr", type=float, default=0.1)
    p.add_argument("--base-width", type=int, default=8)
    p.add_argument("--enc-depth", type=int, default=5)
    p.add_argument("--out", help="also write the JSON report here")
    _common(p, "resolution", "region-px", "genes", "lambda", "tau", "seed", "epochs",
            "batch", "threads", "precision")
    p.set_defaults(func=cmd_bench, epochs=2)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        with threadpool_limits(getattr(args, "threads", 1)):
            return args.func(args)
    except (CliError, DataFormatError, ValueError, FileNotFoundError, FloatingPointError) as exc:
        print(f"img2st: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
