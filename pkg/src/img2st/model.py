"""Asymmetric UNet mapping a region image to a C x H' x W' expression grid.

The encoder halves resolution ``enc_depth`` times; the decoder climbs back
only ``dec_depth`` levels, so the output sits at ``input_px / 2**(enc_depth -
dec_depth)``, one cell per bin. A per-cell linear projection of the last
decoder feature map provides the image embeddings aligned against a frozen
two-layer expression encoder.
"""
from __future__ import annotations

import json
import struct
import warnings
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autograd as ag
from .autograd import get_dtype

__all__ = [
    "ModelConfig",
    "ModelParams",
    "ForwardActivations",
    "init_params",
    "forward",
    "backward",
    "encode_expression",
    "pretrain_expression_encoder",
    "spot_forward",
    "spot_backward",
    "init_spot_params",
    "spot_depth",
    "region_forward_macs",
    "spot_forward_macs",
    "save_checkpoint",
    "load_checkpoint",
]

CHECKPOINT_MAGIC = b"ISTC"
# images arrive in [0, 1]; the network sees them centred on zero
INPUT_SHIFT = 0.5


@dataclass(frozen=True)
class ModelConfig:
    gene_count: int
    input_px: int = 64
    in_channels: int = 3
    base_width: int = 8
    enc_depth: int = 5
    dec_depth: int = 1
    embed_dim: int = 16
    exp_hidden: int = 32
    kernel_size: int = 3

    def __post_init__(self):
        if self.gene_count < 1 or self.base_width < 1 or self.embed_dim < 1:
            raise ValueError("gene_count, base_width and embed_dim must be >= 1")
        if not 0 <= self.dec_depth <= self.enc_depth:
            raise ValueError(f"need 0 <= dec_depth <= enc_depth, got {self.dec_depth}, {self.enc_depth}")
        if self.input_px % (2 ** self.enc_depth):
            raise ValueError(
                f"input_px={self.input_px} is not divisible by 2**enc_depth={2 ** self.enc_depth}"
            )
        if self.kernel_size % 2 == 0:
            raise ValueError("kernel_size must be odd")

    @property
    def output_px(self) -> int:
        return self.input_px // 2 ** (self.enc_depth - self.dec_depth)

    def channels(self, level: int) -> int:
        """Channels of encoder feature F_level (F_0 is the image)."""
        if level == 0:
            return self.in_channels
        return min(self.base_width * 2 ** (level - 1), 8 * self.base_width)

    def decoder_channels(self, level: int) -> int:
        """Channels of decoder feature D_level (D_0 is the bottleneck)."""
        if level == 0:
            return self.channels(self.enc_depth)
        skip = self.enc_depth - level
        return self.channels(skip) if skip >= 1 else self.base_width

    @property
    def feature_channels(self) -> int:
        return self.decoder_channels(self.dec_depth)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ModelParams:
    config: ModelConfig
    tensors: dict[str, np.ndarray]
    frozen: frozenset = field(default_factory=frozenset)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def names(self) -> list[str]:
        return list(self.tensors)

    def trainable(self) -> list[str]:
        return [n for n in self.tensors if n not in self.frozen]

    def copy(self) -> "ModelParams":
        return ModelParams(self.config, {k: v.copy() for k, v in self.tensors.items()}, self.frozen)

    def astype(self, dtype) -> "ModelParams":
        return ModelParams(
            self.config, {k: v.astype(dtype) for k, v in self.tensors.items()}, self.frozen
        )


def _param_shapes(config: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    k = config.kernel_size
    shapes = []
    for level in range(1, config.enc_depth + 1):
        cin, cout = config.channels(level - 1), config.channels(level)
        shapes += [
            (f"enc{level}.conv1.w", (cout, cin, k, k)), (f"enc{level}.conv1.b", (cout,)),
            (f"enc{level}.conv2.w", (cout, cout, k, k)), (f"enc{level}.conv2.b", (cout,)),
        ]
    for level in range(1, config.dec_depth + 1):
        cin = config.decoder_channels(level - 1)
        cout = config.decoder_channels(level)
        cskip = config.channels(config.enc_depth - level)
        shapes += [
            (f"dec{level}.up.w", (cout, cin, k, k)), (f"dec{level}.up.b", (cout,)),
            (f"dec{level}.conv1.w", (cout, cout + cskip, k, k)), (f"dec{level}.conv1.b", (cout,)),
            (f"dec{level}.conv2.w", (cout, cout, k, k)), (f"dec{level}.conv2.b", (cout,)),
        ]
    feat, c, d, h = config.feature_channels, config.gene_count, config.embed_dim, config.exp_hidden
    shapes += [
        ("out.w", (c, feat, 1, 1)), ("out.b", (c,)),
        ("proj.w", (d, feat)), ("proj.b", (d,)),
        ("exp.fc1.w", (h, c)), ("exp.fc1.b", (h,)),
        ("exp.fc2.w", (d, h)), ("exp.fc2.b", (d,)),
    ]
    return shapes


def _kaiming_uniform(rng: np.random.Generator, shape: tuple[int, ...], dtype) -> np.ndarray:
    fan_in = int(np.prod(shape[1:]))
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def init_params(config: ModelConfig, seed: int = 0) -> ModelParams:
    """Kaiming-uniform weights (bound sqrt(6 / fan_in)) and zero biases.

    The expression encoder starts frozen with random weights; replace it with
    :func:`pretrain_expression_encoder` before training for a meaningful target.
    """
    rng = np.random.default_rng(seed)
    dtype = get_dtype()
    tensors = {}
    for name, shape in _param_shapes(config):
        if name.endswith(".b"):
            tensors[name] = np.zeros(shape, dtype=dtype)
        else:
            tensors[name] = _kaiming_uniform(rng, shape, dtype)
    frozen = frozenset(n for n in tensors if n.startswith("exp."))
    return ModelParams(config, tensors, frozen)


# ---------------------------------------------------------------------------
# forward / backward
# ---------------------------------------------------------------------------

@dataclass
class ForwardActivations:
    encoder: list[np.ndarray]  # F_1 .. F_Le
    decoder: list[np.ndarray]  # D_1 .. D_Ld
    pred: np.ndarray  # (N, C, H', W')
    img_embeddings: np.ndarray  # (N, d, H', W')
    cache: dict = field(default_factory=dict, repr=False)


def _conv_block(x, w, b, cache, key):
    pad = w.shape[2] // 2
    cols = ag._im2col(x, w.shape[2], 1, pad)
    pre = ag.conv2d_forward(x, w, b, 1, pad, cols=cols)
    cache[key] = (x, cols, pre)
    return ag.relu_forward(pre)


def _conv_block_back(grad, w, cache, key, grads, wname, bname):
    x, cols, pre = cache[key]
    grad = ag.relu_backward(grad, pre)
    gx, gw, gb = ag.conv2d_backward(x, w, grad, 1, w.shape[2] // 2, cols=cols)
    grads[wname] = grads.get(wname, 0) + gw
    grads[bname] = grads.get(bname, 0) + gb
    return gx


def _as_batch(images: np.ndarray) -> np.ndarray:
    images = np.asarray(images)
    if images.ndim == 3:
        images = images[None]
    if images.ndim != 4:
        raise ValueError(f"expected (N, 3, H, W) images, got shape {images.shape}")
    return images


def _encode(params: ModelParams, x: np.ndarray, depth: int, cache: dict) -> list[np.ndarray]:
    p = params.tensors
    feats = []
    for level in range(1, depth + 1):
        h = _conv_block(x, p[f"enc{level}.conv1.w"], p[f"enc{level}.conv1.b"], cache, ("enc", level, 1))
        h = _conv_block(h, p[f"enc{level}.conv2.w"], p[f"enc{level}.conv2.b"], cache, ("enc", level, 2))
        x, argmax = ag.maxpool2x2_forward(h)
        cache[("pool", level)] = argmax
        feats.append(x)
    return feats


def _encode_back(params: ModelParams, grads_f: dict, depth: int, cache: dict, grads: dict):
    """``grads_f[level]`` is dL/dF_level; returns nothing (image grad unused)."""
    p = params.tensors
    g = None
    for level in range(depth, 0, -1):
        if level in grads_f:
            g = grads_f[level] if g is None else g + grads_f[level]
        if g is None:
            continue
        g = ag.maxpool2x2_backward(g, cache[("pool", level)])
        g = _conv_block_back(g, p[f"enc{level}.conv2.w"], cache, ("enc", level, 2), grads,
                             f"enc{level}.conv2.w", f"enc{level}.conv2.b")
        g = _conv_block_back(g, p[f"enc{level}.conv1.w"], cache, ("enc", level, 1), grads,
                             f"enc{level}.conv1.w", f"enc{level}.conv1.b")


def forward(params: ModelParams, images: np.ndarray) -> ForwardActivations:
    """Run the UNet on (N, 3, H, W) or (3, H, W) images."""
    cfg = params.config
    x = _as_batch(images)
    if x.shape[1] != cfg.in_channels or x.shape[2] != cfg.input_px or x.shape[3] != cfg.input_px:
        raise ValueError(
            f"model expects ({cfg.in_channels}, {cfg.input_px}, {cfg.input_px}) images, "
            f"got {x.shape[1:]}"
        )
    p = params.tensors
    x = x.astype(p["out.w"].dtype) - INPUT_SHIFT
    cache: dict = {}
    feats = _encode(params, x, cfg.enc_depth, cache)
    levels = [x] + feats  # levels[l] == F_l

    d = feats[-1]
    decoded = []
    for level in range(1, cfg.dec_depth + 1):
        up = ag.upsample_bilinear2x_forward(d)
        u = _conv_block(up, p[f"dec{level}.up.w"], p[f"dec{level}.up.b"], cache, ("dec", level, 0))
        skip = levels[cfg.enc_depth - level]
        if skip.shape[2:] != u.shape[2:]:
            raise AssertionError(f"skip {skip.shape} does not match upsampled {u.shape}")
        cat = ag.concat_channels(u, skip)
        h = _conv_block(cat, p[f"dec{level}.conv1.w"], p[f"dec{level}.conv1.b"], cache, ("dec", level, 1))
        d = _conv_block(h, p[f"dec{level}.conv2.w"], p[f"dec{level}.conv2.b"], cache, ("dec", level, 2))
        decoded.append(d)

    pred = ag.conv2d_forward(d, p["out.w"], p["out.b"])
    cells = d.transpose(0, 2, 3, 1)  # (N, H', W', F)
    emb = ag.linear_forward(cells, p["proj.w"], p["proj.b"]).transpose(0, 3, 1, 2)
    cache["final"] = d
    return ForwardActivations(feats, decoded, pred, emb, cache)


def backward(
    params: ModelParams,
    acts: ForwardActivations,
    grad_pred: np.ndarray,
    grad_emb: np.ndarray | None = None,
) -> dict[str, np.ndarray]:
    """Gradients of a scalar loss for every trainable parameter.

    ``grad_pred`` is dL/dY-hat and ``grad_emb`` dL/d(image embeddings). Frozen
    parameters never receive gradients.
    """
    cfg = params.config
    p = params.tensors
    cache = acts.cache
    d = cache["final"]
    grads: dict[str, np.ndarray] = {}

    gd, grads["out.w"], grads["out.b"] = ag.conv2d_backward(d, p["out.w"], grad_pred)
    if grad_emb is not None:
        cells = d.transpose(0, 2, 3, 1)
        gcells, grads["proj.w"], grads["proj.b"] = ag.linear_backward(
            cells, p["proj.w"], grad_emb.transpose(0, 2, 3, 1)
        )
        gd = gd + gcells.transpose(0, 3, 1, 2)
    else:
        grads["proj.w"] = np.zeros_like(p["proj.w"])
        grads["proj.b"] = np.zeros_like(p["proj.b"])

    grads_f: dict[int, np.ndarray] = {}
    for level in range(cfg.dec_depth, 0, -1):
        gd = _conv_block_back(gd, p[f"dec{level}.conv2.w"], cache, ("dec", level, 2), grads,
                              f"dec{level}.conv2.w", f"dec{level}.conv2.b")
        gcat = _conv_block_back(gd, p[f"dec{level}.conv1.w"], cache, ("dec", level, 1), grads,
                                f"dec{level}.conv1.w", f"dec{level}.conv1.b")
        gu, gskip = ag.split_channels(gcat, cfg.decoder_channels(level))
        skip_level = cfg.enc_depth - level
        if skip_level >= 1:
            grads_f[skip_level] = grads_f.get(skip_level, 0) + gskip
        gup = _conv_block_back(gu, p[f"dec{level}.up.w"], cache, ("dec", level, 0), grads,
                               f"dec{level}.up.w", f"dec{level}.up.b")
        gd = ag.upsample_bilinear2x_backward(gup)
    grads_f[cfg.enc_depth] = grads_f.get(cfg.enc_depth, 0) + gd

    _encode_back(params, grads_f, cfg.enc_depth, cache, grads)
    return {n: grads[n].astype(p[n].dtype, copy=False) for n in params.trainable()}


# ---------------------------------------------------------------------------
# expression encoder
# ---------------------------------------------------------------------------

def encode_expression(params: ModelParams, y: np.ndarray) -> np.ndarray:
    """Frozen 2-layer MLP ``fc2(relu(fc1(y)))`` over the last axis (length C)."""
    y = np.asarray(y)
    ag.check_finite(y, "expression vector")
    p = params.tensors
    y = y.astype(p["exp.fc1.w"].dtype, copy=False)
    h = ag.relu_forward(ag.linear_forward(y, p["exp.fc1.w"], p["exp.fc1.b"]))
    return ag.linear_forward(h, p["exp.fc2.w"], p["exp.fc2.b"])


def pretrain_expression_encoder(
    params: ModelParams,
    vectors: np.ndarray,
    epochs: int = 300,
    seed: int = 0,
    lr: float = 1e-2,
) -> list[float]:
    """Fit the expression encoder as half of a symmetric autoencoder, then freeze it.

    The decoder (``d -> hidden -> C``) is discarded after training. Full-batch
    Adam on the reconstruction MSE. Returns the reconstruction loss per epoch,
    with the loss at initialisation as element 0.
    """
    y = np.asarray(vectors, dtype=np.float64).reshape(-1, params.config.gene_count)
    if y.shape[0] < 2:
        raise ValueError("need at least 2 expression vectors to pretrain the encoder")
    ag.check_finite(y, "expression vectors")
    if np.all(y == y[0]):
        warnings.warn("all expression vectors are identical; encoder will be degenerate")
    cfg = params.config
    c, h, d = cfg.gene_count, cfg.exp_hidden, cfg.embed_dim
    rng = np.random.default_rng(seed)
    w = {
        "e1": _kaiming_uniform(rng, (h, c), np.float64), "b1": np.zeros(h),
        "e2": _kaiming_uniform(rng, (d, h), np.float64), "b2": np.zeros(d),
        "d1": _kaiming_uniform(rng, (h, d), np.float64), "c1": np.zeros(h),
        "d2": _kaiming_uniform(rng, (c, h), np.float64), "c2": np.zeros(c),
    }
    m1 = {k: np.zeros_like(v) for k, v in w.items()}
    m2 = {k: np.zeros_like(v) for k, v in w.items()}
    beta1, beta2 = 0.9, 0.999
    history = []
    for epoch in range(epochs + 1):
        a1 = y @ w["e1"].T + w["b1"]
        h1 = np.maximum(a1, 0)
        z = h1 @ w["e2"].T + w["b2"]
        a2 = z @ w["d1"].T + w["c1"]
        h2 = np.maximum(a2, 0)
        rec = h2 @ w["d2"].T + w["c2"]
        diff = rec - y
        history.append(float(np.mean(diff ** 2)))
        if epoch == epochs:
            break
        g_rec = 2.0 * diff / diff.size
        g = {"d2": g_rec.T @ h2, "c2": g_rec.sum(0)}
        g_a2 = (g_rec @ w["d2"]) * (a2 > 0)
        g["d1"], g["c1"] = g_a2.T @ z, g_a2.sum(0)
        g_z = g_a2 @ w["d1"]
        g["e2"], g["b2"] = g_z.T @ h1, g_z.sum(0)
        g_a1 = (g_z @ w["e2"]) * (a1 > 0)
        g["e1"], g["b1"] = g_a1.T @ y, g_a1.sum(0)
        t = epoch + 1
        for k in w:
            m1[k] = beta1 * m1[k] + (1 - beta1) * g[k]
            m2[k] = beta2 * m2[k] + (1 - beta2) * g[k] ** 2
            step = lr * (m1[k] / (1 - beta1 ** t)) / (np.sqrt(m2[k] / (1 - beta2 ** t)) + 1e-8)
            w[k] -= step
    dtype = params.tensors["exp.fc1.w"].dtype
    params.tensors["exp.fc1.w"] = w["e1"].astype(dtype)
    params.tensors["exp.fc1.b"] = w["b1"].astype(dtype)
    params.tensors["exp.fc2.w"] = w["e2"].astype(dtype)
    params.tensors["exp.fc2.b"] = w["b2"].astype(dtype)
    params.frozen = params.frozen | {"exp.fc1.w", "exp.fc1.b", "exp.fc2.w", "exp.fc2.b"}
    return history


# ---------------------------------------------------------------------------
# one-to-one baseline: shared encoder trunk + global pooled head
# ---------------------------------------------------------------------------

def spot_depth(config: ModelConfig, patch_px: int) -> int:
    """Encoder levels usable on a ``patch_px`` patch (each level halves it)."""
    depth = 0
    size = patch_px
    while depth < config.enc_depth and size % 2 == 0 and size >= 2:
        size //= 2
        depth += 1
    return depth


def init_spot_params(config: ModelConfig, patch_px: int, seed: int = 0) -> ModelParams:
    """Encoder trunk of :func:`init_params` plus a linear head on pooled features."""
    full = init_params(config, seed)
    depth = spot_depth(config, patch_px)
    keep = {k: v for k, v in full.tensors.items() if k.startswith("enc") and int(k[3]) <= depth}
    rng = np.random.default_rng(seed + 1)
    feat = config.channels(depth)
    keep["spot.w"] = _kaiming_uniform(rng, (config.gene_count, feat), get_dtype())
    keep["spot.b"] = np.zeros(config.gene_count, dtype=get_dtype())
    return ModelParams(config, keep, frozenset())


def spot_forward(params: ModelParams, patches: np.ndarray):
    """(N, 3, P, P) patches -> ((N, C) predictions, cache)."""
    x = _as_batch(patches).astype(params["spot.w"].dtype) - INPUT_SHIFT
    depth = spot_depth(params.config, x.shape[2])
    cache: dict = {}
    feats = _encode(params, x, depth, cache)
    f = feats[-1] if feats else x
    pooled = f.mean(axis=(2, 3))
    cache["pooled"] = pooled
    cache["fshape"] = f.shape
    cache["depth"] = depth
    return ag.linear_forward(pooled, params["spot.w"], params["spot.b"]), cache


def spot_backward(params: ModelParams, cache: dict, grad_pred: np.ndarray) -> dict[str, np.ndarray]:
    grads: dict[str, np.ndarray] = {}
    gpool, grads["spot.w"], grads["spot.b"] = ag.linear_backward(
        cache["pooled"], params["spot.w"], grad_pred
    )
    n, c, h, w = cache["fshape"]
    gf = np.broadcast_to(gpool[:, :, None, None] / (h * w), (n, c, h, w))
    depth = cache["depth"]
    if depth:
        _encode_back(params, {depth: gf}, depth, cache, grads)
    return {n_: grads[n_].astype(params[n_].dtype, copy=False) for n_ in params.trainable()}


# ---------------------------------------------------------------------------
# analytic multiply-accumulate counts (forward pass)
# ---------------------------------------------------------------------------

def _conv_macs(size: int, cin: int, cout: int, k: int) -> int:
    return size * size * cin * cout * k * k


def _encoder_macs(config: ModelConfig, px: int, depth: int) -> int:
    k = config.kernel_size
    total = 0
    for level in range(1, depth + 1):
        size = px // 2 ** (level - 1)
        cin, cout = config.channels(level - 1), config.channels(level)
        total += _conv_macs(size, cin, cout, k) + _conv_macs(size, cout, cout, k)
    return total


def region_forward_macs(config: ModelConfig) -> int:
    """MACs of one region forward pass (convs, output head and projection)."""
    k = config.kernel_size
    total = _encoder_macs(config, config.input_px, config.enc_depth)
    for level in range(1, config.dec_depth + 1):
        size = config.input_px // 2 ** (config.enc_depth - level)
        cin, cout = config.decoder_channels(level - 1), config.decoder_channels(level)
        cskip = config.channels(config.enc_depth - level)
        # bilinear upsampling: 4 taps per output element
        total += 4 * size * size * cin
        total += _conv_macs(size, cin, cout, k)
        total += _conv_macs(size, cout + cskip, cout, k)
        total += _conv_macs(size, cout, cout, k)
    cells = config.output_px ** 2
    feat = config.feature_channels
    total += cells * feat * config.gene_count + cells * feat * config.embed_dim
    return total


def spot_forward_macs(config: ModelConfig, patch_px: int) -> int:
    """MACs of one spot forward pass (trunk, global pooling, linear head)."""
    depth = spot_depth(config, patch_px)
    total = _encoder_macs(config, patch_px, depth)
    out = patch_px // 2 ** depth
    feat = config.channels(depth)
    return total + out * out * feat + feat * config.gene_count


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(params: ModelParams, path) -> None:
    """``ISTC``: u32 length + JSON config block, f32 params in declaration order, CRC32."""
    header = {
        "config": params.config.to_dict(),
        "frozen": sorted(params.frozen),
        "names": params.names(),
    }
    block = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    body = bytearray(CHECKPOINT_MAGIC)
    body += struct.pack("<I", len(block)) + block
    for name in params.names():
        body += np.ascontiguousarray(params[name], dtype="<f4").tobytes()
    body += struct.pack("<I", zlib.crc32(bytes(body)) & 0xFFFFFFFF)
    Path(path).write_bytes(bytes(body))


def load_checkpoint(path) -> ModelParams:
    raw = Path(path).read_bytes()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not an ISTC checkpoint")
    (crc,) = struct.unpack("<I", raw[-4:])
    if zlib.crc32(raw[:-4]) & 0xFFFFFFFF != crc:
        raise ValueError(f"{path}: checksum mismatch")
    (n,) = struct.unpack_from("<I", raw, 4)
    header = json.loads(raw[8:8 + n])
    config = ModelConfig(**header["config"])
    names = header["names"]
    shapes = dict(_param_shapes(config))
    unknown = [nm for nm in names if nm not in shapes]
    if unknown:
        raise ValueError(f"{path}: unknown parameters {unknown}")
    offset = 8 + n
    dtype = get_dtype()
    tensors = {}
    for name in names:
        shape = shapes[name]
        count = int(np.prod(shape))
        tensors[name] = (
            np.frombuffer(raw, dtype="<f4", count=count, offset=offset).reshape(shape).astype(dtype)
        )
        offset += 4 * count
    if offset != len(raw) - 4:
        raise ValueError(f"{path}: trailing bytes after parameters")
    return ModelParams(config, tensors, frozenset(header["frozen"]))
