"""HD spatial transcriptomics data: bin tables, gene panels and region tiling.

A slide is a :class:`BinTable` (bins on a square lattice with sparse raw
counts) plus an image source. Tiling turns it into :class:`RegionSample`
objects (image region + dense C x H' x W' expression grid) for the
image-to-image setting, or :class:`SpotSample` objects (one patch per bin)
for the one-to-one baseline.
"""
from __future__ import annotations

import csv
import hashlib
import json
import math
import re
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

__all__ = [
    "FULL_SCALE",
    "DESK_SCALE",
    "BinTable",
    "GenePanel",
    "ExpressionGrid",
    "RegionSample",
    "SpotSample",
    "ArrayImageSource",
    "TileImageSource",
    "load_bin_table",
    "save_bin_table",
    "select_gene_panel",
    "normalize_counts",
    "bins_per_side_for",
    "tile_regions",
    "tile_spots",
    "synth_slide",
    "split_train_test",
    "write_grid",
    "read_grid",
    "fingerprint",
]

ALLOWED_BIN_SIZES_UM = (8.0, 16.0)

FULL_SCALE = {"region_px": 448, "px_per_um": 4.0, "genes": 250, "spot_px": 112}
DESK_SCALE = {"region_px": 64, "px_per_um": 2.0, "genes": 8, "spot_px": 56}

GRID_MAGIC = b"IST1"


class DataFormatError(ValueError):
    """Raised for malformed input files; the message carries file and line."""


@dataclass(frozen=True)
class BinTable:
    bin_ids: list[str]
    array_row: np.ndarray
    array_col: np.ndarray
    pixel_x: np.ndarray
    pixel_y: np.ndarray
    # sparse (bin_index, gene_index, count) triplets
    bin_index: np.ndarray
    gene_index: np.ndarray
    counts: np.ndarray
    gene_names: list[str]
    bin_size_um: float = 8.0

    def __post_init__(self):
        n = len(self.bin_ids)
        for name in ("array_row", "array_col", "pixel_x", "pixel_y"):
            if len(getattr(self, name)) != n:
                raise ValueError(f"{name} has {len(getattr(self, name))} entries for {n} bins")
        if not (len(self.bin_index) == len(self.gene_index) == len(self.counts)):
            raise ValueError("triplet arrays differ in length")
        if float(self.bin_size_um) not in ALLOWED_BIN_SIZES_UM:
            raise ValueError(
                f"bin_size_um must be 8 or 16, got {self.bin_size_um} "
                "(2 um bins are too sparse to model)"
            )
        if len(self.counts):
            if self.bin_index.min() < 0 or self.bin_index.max() >= n:
                raise ValueError("triplet bin_index out of range")
            if self.gene_index.min() < 0 or self.gene_index.max() >= len(self.gene_names):
                raise ValueError("triplet gene_index out of range")
            if self.counts.min() < 0:
                raise ValueError("negative raw count in matrix")
        seen: dict[tuple[int, int], int] = {}
        for i, rc in enumerate(zip(self.array_row.tolist(), self.array_col.tolist())):
            if rc in seen:
                raise ValueError(
                    f"duplicate grid coordinate (array_row={rc[0]}, array_col={rc[1]}) "
                    f"for bins {self.bin_ids[seen[rc]]!r} and {self.bin_ids[i]!r}"
                )
            seen[rc] = i

    @property
    def n_bins(self) -> int:
        return len(self.bin_ids)

    @property
    def n_genes(self) -> int:
        return len(self.gene_names)

    def dense_counts(self, genes: Sequence[int] | None = None) -> np.ndarray:
        """(n_bins, n_genes) raw counts; duplicate triplets are summed."""
        dense = np.zeros((self.n_bins, self.n_genes), dtype=np.float64)
        np.add.at(dense, (self.bin_index, self.gene_index), self.counts)
        if genes is not None:
            dense = dense[:, np.asarray(genes, dtype=int)]
        return dense

    def gene_means(self) -> np.ndarray:
        if self.n_bins == 0:
            return np.zeros(self.n_genes)
        totals = np.zeros(self.n_genes)
        np.add.at(totals, self.gene_index, self.counts)
        return totals / self.n_bins


@dataclass(frozen=True)
class GenePanel:
    indices: np.ndarray
    means: np.ndarray
    names: list[str] = field(default_factory=list)

    def __len__(self):
        return len(self.indices)


@dataclass
class ExpressionGrid:
    """Dense log-normalised expression for one region, plus its tissue mask."""

    values: np.ndarray  # (C, H', W')
    valid_mask: np.ndarray  # (H', W') bool

    def __post_init__(self):
        if self.values.ndim != 3 or self.valid_mask.shape != self.values.shape[1:]:
            raise ValueError(
                f"grid values {self.values.shape} and mask {self.valid_mask.shape} disagree"
            )


@dataclass
class RegionSample:
    image: np.ndarray  # (3, H, W) in [0, 1]
    expression: ExpressionGrid
    origin: tuple[int, int]  # (pixel_x, pixel_y) of the top-left corner
    bin_rows: np.ndarray = field(default_factory=lambda: np.zeros((0, 0), dtype=int))


@dataclass
class SpotSample:
    image: np.ndarray  # (3, P, P) in [0, 1]
    expression: np.ndarray  # (C,)
    bin_index: int
    clipped: bool = False


# ---------------------------------------------------------------------------
# TSV io
# ---------------------------------------------------------------------------

def _read_tsv(path: Path, header: list[str]):
    with open(path, newline="") as fh:
        reader = csv.reader(fh, delimiter="\t")
        try:
            got = next(reader)
        except StopIteration:
            raise DataFormatError(f"{path}: empty file, expected header {header}") from None
        if got != header:
            raise DataFormatError(f"{path}:1: expected header {header}, got {got}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise DataFormatError(
                    f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}"
                )
            yield lineno, row


def load_bin_table(genes_path, bins_path, matrix_path, bin_size_um: float = 8.0) -> BinTable:
    genes = [row[0] for _, row in _read_tsv(Path(genes_path), ["gene_name"])]

    bin_ids, rows, cols, xs, ys = [], [], [], [], []
    bins_header = ["bin_id", "array_row", "array_col", "pixel_x", "pixel_y"]
    for lineno, row in _read_tsv(Path(bins_path), bins_header):
        try:
            bin_ids.append(row[0])
            rows.append(int(row[1]))
            cols.append(int(row[2]))
            xs.append(float(row[3]))
            ys.append(float(row[4]))
        except ValueError as exc:
            raise DataFormatError(f"{bins_path}:{lineno}: {exc}") from None

    bi, gi, ct = [], [], []
    for lineno, row in _read_tsv(Path(matrix_path), ["bin_index", "gene_index", "count"]):
        try:
            b, g, c = int(row[0]), int(row[1]), int(row[2])
        except ValueError as exc:
            raise DataFormatError(f"{matrix_path}:{lineno}: {exc}") from None
        if not 0 <= b < len(bin_ids):
            raise ValueError(f"{matrix_path}:{lineno}: bin_index {b} out of range")
        if not 0 <= g < len(genes):
            raise ValueError(f"{matrix_path}:{lineno}: gene_index {g} out of range")
        if c < 0:
            raise ValueError(f"{matrix_path}:{lineno}: negative count {c}")
        bi.append(b)
        gi.append(g)
        ct.append(c)

    return BinTable(
        bin_ids=bin_ids,
        array_row=np.asarray(rows, dtype=np.int64),
        array_col=np.asarray(cols, dtype=np.int64),
        pixel_x=np.asarray(xs, dtype=np.float64),
        pixel_y=np.asarray(ys, dtype=np.float64),
        bin_index=np.asarray(bi, dtype=np.int64),
        gene_index=np.asarray(gi, dtype=np.int64),
        counts=np.asarray(ct, dtype=np.int64),
        gene_names=genes,
        bin_size_um=bin_size_um,
    )


def save_bin_table(table: BinTable, directory) -> tuple[Path, Path, Path]:
    """Write ``genes.tsv``, ``bins.tsv`` and ``matrix.tsv`` into ``directory``."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    paths = d / "genes.tsv", d / "bins.tsv", d / "matrix.tsv"
    with open(paths[0], "w") as fh:
        fh.write("gene_name\n")
        fh.writelines(f"{g}\n" for g in table.gene_names)
    with open(paths[1], "w") as fh:
        fh.write("bin_id\tarray_row\tarray_col\tpixel_x\tpixel_y\n")
        for i in range(table.n_bins):
            fh.write(
                f"{table.bin_ids[i]}\t{table.array_row[i]}\t{table.array_col[i]}\t"
                f"{float(table.pixel_x[i])!r}\t{float(table.pixel_y[i])!r}\n"
            )
    with open(paths[2], "w") as fh:
        fh.write("bin_index\tgene_index\tcount\n")
        for b, g, c in zip(table.bin_index, table.gene_index, table.counts):
            fh.write(f"{b}\t{g}\t{c}\n")
    return paths


# ---------------------------------------------------------------------------
# panel + normalisation
# ---------------------------------------------------------------------------

def select_gene_panel(table: BinTable, k: int) -> GenePanel:
    """The ``k`` genes with highest mean raw count; ties go to the lower index."""
    if not 1 <= k <= table.n_genes:
        raise ValueError(f"panel size k={k} outside [1, {table.n_genes}]")
    means = table.gene_means()
    order = np.lexsort((np.arange(len(means)), -means))[:k]
    return GenePanel(
        indices=order,
        means=means[order],
        names=[table.gene_names[i] for i in order],
    )


def normalize_counts(raw) -> np.ndarray:
    """log(1 + count), elementwise."""
    raw = np.asarray(raw, dtype=np.float64)
    if np.any(raw < 0):
        raise ValueError("raw counts must be non-negative")
    return np.log1p(raw)


# ---------------------------------------------------------------------------
# image sources
# ---------------------------------------------------------------------------

class ArrayImageSource:
    """Whole slide held in memory as an (H, W, 3) uint8 array."""

    def __init__(self, pixels: np.ndarray):
        pixels = np.asarray(pixels)
        if pixels.ndim != 3 or pixels.shape[2] != 3:
            raise ValueError(f"expected (H, W, 3) pixels, got {pixels.shape}")
        self.pixels = pixels

    @property
    def shape(self) -> tuple[int, int]:
        return self.pixels.shape[0], self.pixels.shape[1]

    def read(self, x0: int, y0: int, width: int, height: int) -> tuple[np.ndarray, bool]:
        """Crop (height, width, 3); zero-padded outside the slide, flagged ``True``."""
        h, w = self.shape
        out = np.zeros((height, width, 3), dtype=np.uint8)
        xa, ya = max(x0, 0), max(y0, 0)
        xb, yb = min(x0 + width, w), min(y0 + height, h)
        if xb > xa and yb > ya:
            out[ya - y0:yb - y0, xa - x0:xb - x0] = self.pixels[ya:yb, xa:xb]
        clipped = x0 < 0 or y0 < 0 or x0 + width > w or y0 + height > h
        return out, clipped

    def save_tiles(self, directory, tile_px: int) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        h, w = self.shape
        for y in range(0, h, tile_px):
            for x in range(0, w, tile_px):
                tile, _ = self.read(x, y, tile_px, tile_px)
                Image.fromarray(tile, mode="RGB").save(d / f"tile_{x}_{y}.ppm")


_TILE_RE = re.compile(r"tile_(\d+)_(\d+)\.ppm$")


class TileImageSource(ArrayImageSource):
    """Slide stitched from ``tile_<x>_<y>.ppm`` files indexed by pixel origin."""

    def __init__(self, directory):
        tiles = {}
        for path in sorted(Path(directory).glob("tile_*.ppm")):
            m = _TILE_RE.search(path.name)
            if m:
                with Image.open(path) as im:
                    tiles[int(m.group(1)), int(m.group(2))] = np.asarray(im.convert("RGB"))
        if not tiles:
            super().__init__(np.zeros((0, 0, 3), dtype=np.uint8))
            return
        h = max(y + t.shape[0] for (x, y), t in tiles.items())
        w = max(x + t.shape[1] for (x, y), t in tiles.items())
        pixels = np.zeros((h, w, 3), dtype=np.uint8)
        for (x, y), t in tiles.items():
            pixels[y:y + t.shape[0], x:x + t.shape[1]] = t
        super().__init__(pixels)


# ---------------------------------------------------------------------------
# tiling
# ---------------------------------------------------------------------------

def bins_per_side_for(region_px: int, bin_size_um: float, px_per_um: float = 4.0) -> int:
    """Bins along one side of a region; 448 px at 4 px/um gives 14 (8 um) or 7 (16 um)."""
    pitch = bin_size_um * px_per_um
    n = region_px / pitch
    if abs(n - round(n)) > 1e-9 or round(n) < 1:
        raise ValueError(f"region of {region_px} px is not a whole number of {pitch} px bins")
    return int(round(n))


def _to_unit(pixels: np.ndarray) -> np.ndarray:
    return (pixels.astype(np.float32) / 255.0).transpose(2, 0, 1)


def tile_regions(
    table: BinTable,
    image_source: ArrayImageSource,
    region_px: int,
    bins_per_side: int,
    expression: np.ndarray | None = None,
) -> list[RegionSample]:
    """Cut the slide into non-overlapping regions and grid their bins.

    ``expression`` is the (n_bins, C) matrix to place in the grids (already
    panel-selected and normalised); by default all genes, log-normalised.
    Every bin is assigned by its centre to one region and, within it, to the
    cell whose centre is nearest. Only regions holding at least one bin are
    returned, in row-major order of their origins.
    """
    if region_px % bins_per_side:
        raise ValueError(f"region_px={region_px} not divisible by bins_per_side={bins_per_side}")
    if expression is None:
        expression = normalize_counts(table.dense_counts())
    pitch = region_px // bins_per_side
    h, w = image_source.shape
    x, y = table.pixel_x, table.pixel_y
    outside = (x < 0) | (y < 0) | (x >= w) | (y >= h)
    if np.any(outside):
        i = int(np.flatnonzero(outside)[0])
        raise ValueError(
            f"bin {table.bin_ids[i]!r} centre ({x[i]}, {y[i]}) lies outside the {w}x{h} image"
        )

    reg_col = np.floor(x / region_px).astype(int)
    reg_row = np.floor(y / region_px).astype(int)
    cell_c = np.clip(np.floor((x - reg_col * region_px) / pitch).astype(int), 0, bins_per_side - 1)
    cell_r = np.clip(np.floor((y - reg_row * region_px) / pitch).astype(int), 0, bins_per_side - 1)
    # distance to the cell centre decides collisions
    dist = np.hypot(
        x - (reg_col * region_px + (cell_c + 0.5) * pitch),
        y - (reg_row * region_px + (cell_r + 0.5) * pitch),
    )

    samples = []
    dropped = 0
    n_genes = expression.shape[1]
    for rr, rc in sorted(set(zip(reg_row.tolist(), reg_col.tolist()))):
        members = np.flatnonzero((reg_row == rr) & (reg_col == rc))
        members = members[np.lexsort((x[members], y[members], dist[members]))]
        values = np.zeros((n_genes, bins_per_side, bins_per_side), dtype=np.float32)
        mask = np.zeros((bins_per_side, bins_per_side), dtype=bool)
        owner = np.full((bins_per_side, bins_per_side), -1, dtype=int)
        for b in members:
            i, j = cell_r[b], cell_c[b]
            if mask[i, j]:
                dropped += 1
                continue
            mask[i, j] = True
            owner[i, j] = b
            values[:, i, j] = expression[b]
        ox, oy = rc * region_px, rr * region_px
        pixels, _ = image_source.read(ox, oy, region_px, region_px)
        samples.append(
            RegionSample(
                image=_to_unit(pixels),
                expression=ExpressionGrid(values, mask),
                origin=(ox, oy),
                bin_rows=owner,
            )
        )
    if dropped:
        warnings.warn(f"{dropped} bin(s) collided with a nearer bin in the same cell and were dropped")
    return samples


def tile_spots(
    table: BinTable,
    image_source: ArrayImageSource,
    patch_px: int = 112,
    expression: np.ndarray | None = None,
) -> list[SpotSample]:
    """One ``patch_px`` square crop centred on every bin (one-to-one setting)."""
    if patch_px < 1:
        raise ValueError("patch_px must be positive")
    if expression is None:
        expression = normalize_counts(table.dense_counts())
    h, w = image_source.shape
    samples = []
    for b in range(table.n_bins):
        cx, cy = table.pixel_x[b], table.pixel_y[b]
        if not (0 <= cx < w and 0 <= cy < h):
            raise ValueError(f"bin {table.bin_ids[b]!r} centre lies outside the image")
        x0 = int(math.floor(cx - patch_px / 2 + 0.5))
        y0 = int(math.floor(cy - patch_px / 2 + 0.5))
        pixels, clipped = image_source.read(x0, y0, patch_px, patch_px)
        samples.append(
            SpotSample(
                image=_to_unit(pixels),
                expression=np.asarray(expression[b], dtype=np.float32),
                bin_index=b,
                clipped=clipped,
            )
        )
    return samples


# ---------------------------------------------------------------------------
# synthetic slides
# ---------------------------------------------------------------------------

def _planted_counts(bin_means: np.ndarray, n_genes: int) -> np.ndarray:
    """Counts from per-bin channel means in [0, 1], shape (n_bins, 3).

    Gene g reads channel ``g % 3`` with scale ``40 / (1 + g // 3)``; every
    fourth gene is gated to zero below a 0.5 intensity, which gives the
    sparse, mostly-zero genes typical of HD data.
    """
    counts = np.zeros((bin_means.shape[0], n_genes), dtype=np.int64)
    for g in range(n_genes):
        channel = bin_means[:, g % 3]
        level = channel
        if g % 4 == 3:
            level = np.where(channel > 0.5, 2.0 * (channel - 0.5), 0.0)
        counts[:, g] = np.floor(40.0 / (1 + g // 3) * level).astype(np.int64)
    return counts


def _bin_channel_means(pixels: np.ndarray, x0: np.ndarray, y0: np.ndarray, pitch: int) -> np.ndarray:
    out = np.empty((len(x0), 3))
    for i, (x, y) in enumerate(zip(x0, y0)):
        out[i] = pixels[y:y + pitch, x:x + pitch].reshape(-1, 3).mean(axis=0) / 255.0
    return out


def synth_slide(
    seed: int,
    n_regions: int,
    genes: int = 8,
    planted_rule: str = "channel_mean",
    region_px: int = 64,
    bins_per_side: int = 4,
    bin_size_um: float = 8.0,
    dropout: float = 0.05,
):
    """Synthetic slide whose bin colours determine expression.

    Regions are laid out on a near-square grid. Each bin's pixel block gets a
    smoothly varying base colour plus per-pixel texture; raw counts follow the
    ``channel_mean`` rule (see :func:`planted_counts_from_image`) evaluated on
    the emitted uint8 pixels, so the rule can be re-derived from the image.
    A ``dropout`` fraction of bins is removed to mimic tissue gaps.

    Returns ``(BinTable, ArrayImageSource)``.
    """
    if planted_rule != "channel_mean":
        raise ValueError(f"unknown planted rule {planted_rule!r}")
    if n_regions < 0 or genes < 1 or not 0 <= dropout < 1:
        raise ValueError("invalid synth_slide parameters")
    if region_px % bins_per_side:
        raise ValueError("region_px must be divisible by bins_per_side")
    rng = np.random.default_rng(seed)
    gene_names = [f"GENE{g:03d}" for g in range(genes)]
    if n_regions == 0:
        empty = np.zeros(0, dtype=np.int64)
        table = BinTable([], empty, empty, empty.astype(float), empty.astype(float),
                         empty, empty, empty, gene_names, bin_size_um)
        return table, ArrayImageSource(np.zeros((0, 0, 3), dtype=np.uint8))

    pitch = region_px // bins_per_side
    cols = int(math.ceil(math.sqrt(n_regions)))
    rows = int(math.ceil(n_regions / cols))
    gh, gw = rows * bins_per_side, cols * bins_per_side

    # smooth colour field on the bin lattice: coarse noise, bilinearly refined
    coarse = rng.uniform(0.0, 1.0, size=(rows + 1, cols + 1, 3))
    yy = (np.arange(gh) + 0.5) / bins_per_side
    xx = (np.arange(gw) + 0.5) / bins_per_side
    y0 = np.minimum(np.floor(yy).astype(int), rows - 1)
    x0 = np.minimum(np.floor(xx).astype(int), cols - 1)
    fy = (yy - y0)[:, None, None]
    fx = (xx - x0)[None, :, None]
    field_ = (
        coarse[y0][:, x0] * (1 - fy) * (1 - fx)
        + coarse[y0 + 1][:, x0] * fy * (1 - fx)
        + coarse[y0][:, x0 + 1] * (1 - fy) * fx
        + coarse[y0 + 1][:, x0 + 1] * fy * fx
    )
    field_ = np.clip(0.6 * field_ + 0.4 * rng.uniform(0.0, 1.0, size=field_.shape), 0, 1)

    base = np.repeat(np.repeat(field_, pitch, axis=0), pitch, axis=1) * 220.0 + 20.0
    texture = rng.normal(0.0, 12.0, size=base.shape)
    pixels = np.clip(np.rint(base + texture), 0, 255).astype(np.uint8)

    # background outside the requested regions
    present = np.zeros((rows, cols), dtype=bool)
    present.flat[:n_regions] = True
    for r in range(rows):
        for c in range(cols):
            if not present[r, c]:
                pixels[r * region_px:(r + 1) * region_px, c * region_px:(c + 1) * region_px] = 255

    gr, gc = np.meshgrid(np.arange(gh), np.arange(gw), indexing="ij")
    gr, gc = gr.ravel(), gc.ravel()
    keep = present[gr // bins_per_side, gc // bins_per_side]
    keep &= rng.uniform(size=keep.shape) >= dropout
    gr, gc = gr[keep], gc[keep]

    means = _bin_channel_means(pixels, gc * pitch, gr * pitch, pitch)
    dense = _planted_counts(means, genes)
    b, g = np.nonzero(dense)
    table = BinTable(
        bin_ids=[f"r{r:04d}c{c:04d}" for r, c in zip(gr, gc)],
        array_row=gr.astype(np.int64),
        array_col=gc.astype(np.int64),
        pixel_x=(gc * pitch + pitch / 2.0).astype(np.float64),
        pixel_y=(gr * pitch + pitch / 2.0).astype(np.float64),
        bin_index=b.astype(np.int64),
        gene_index=g.astype(np.int64),
        counts=dense[b, g],
        gene_names=gene_names,
        bin_size_um=bin_size_um,
    )
    return table, ArrayImageSource(pixels)


def planted_counts_from_image(
    table: BinTable, image_source: ArrayImageSource, pitch: int
) -> np.ndarray:
    """Re-evaluate the ``channel_mean`` rule from the image; (n_bins, n_genes)."""
    x0 = np.rint(table.pixel_x - pitch / 2.0).astype(int)
    y0 = np.rint(table.pixel_y - pitch / 2.0).astype(int)
    return _planted_counts(_bin_channel_means(image_source.pixels, x0, y0, pitch), table.n_genes)


# ---------------------------------------------------------------------------
# splitting, grid io, fingerprints
# ---------------------------------------------------------------------------

def split_train_test(samples: Sequence, ratio: float = 0.8, seed: int = 0):
    """Seeded shuffle, then the first ``round(ratio * n)`` samples train."""
    if not 0 < ratio < 1:
        raise ValueError(f"ratio must lie in (0, 1), got {ratio}")
    n = len(samples)
    if n < 2:
        raise ValueError("need at least 2 samples to split")
    order = np.random.default_rng(seed).permutation(n)
    n_train = min(max(int(round(ratio * n)), 1), n - 1)
    return [samples[i] for i in order[:n_train]], [samples[i] for i in order[n_train:]]


def write_grid(grid: ExpressionGrid, path) -> None:
    """``IST1`` little-endian: u32 C, H', W'; f32 values; u8 mask."""
    c, h, w = grid.values.shape
    with open(path, "wb") as fh:
        fh.write(GRID_MAGIC)
        fh.write(struct.pack("<III", c, h, w))
        fh.write(np.ascontiguousarray(grid.values, dtype="<f4").tobytes())
        fh.write(np.ascontiguousarray(grid.valid_mask, dtype=np.uint8).tobytes())


def read_grid(path) -> ExpressionGrid:
    raw = Path(path).read_bytes()
    if raw[:4] != GRID_MAGIC:
        raise DataFormatError(f"{path}: bad magic {raw[:4]!r}")
    c, h, w = struct.unpack_from("<III", raw, 4)
    n = c * h * w
    expected = 16 + 4 * n + h * w
    if len(raw) != expected:
        raise DataFormatError(f"{path}: expected {expected} bytes, found {len(raw)}")
    values = np.frombuffer(raw, dtype="<f4", count=n, offset=16).reshape(c, h, w)
    mask = np.frombuffer(raw, dtype=np.uint8, count=h * w, offset=16 + 4 * n).reshape(h, w)
    return ExpressionGrid(values.astype(np.float32), mask.astype(bool))


def fingerprint(table: BinTable, panel: GenePanel | None = None) -> str:
    h = hashlib.sha256()
    h.update(json.dumps(sorted(table.bin_ids)).encode())
    if panel is not None:
        h.update(json.dumps([int(i) for i in panel.indices]).encode())
    return h.hexdigest()[:16]
