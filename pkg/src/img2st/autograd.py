"""Dense NCHW layers with explicit forward and backward passes.

Every layer is a pair of plain functions operating on numpy arrays. Backward
functions take the upstream gradient and return gradients for the inputs and
parameters; nothing is recorded on a tape because the network topology is
fixed and the model module wires the passes together itself.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "precision",
    "set_precision",
    "get_dtype",
    "check_finite",
    "conv2d_forward",
    "conv2d_backward",
    "maxpool2x2_forward",
    "maxpool2x2_backward",
    "upsample_bilinear2x_forward",
    "upsample_bilinear2x_backward",
    "relu_forward",
    "relu_backward",
    "concat_channels",
    "split_channels",
    "linear_forward",
    "linear_backward",
    "gradcheck",
]

_DTYPES = {"f32": np.float32, "f64": np.float64}
_state = {"dtype": np.float32}


def set_precision(name: str) -> None:
    """Select the working float type globally (``"f32"`` or ``"f64"``)."""
    if name not in _DTYPES:
        raise ValueError(f"precision must be one of {sorted(_DTYPES)}, got {name!r}")
    _state["dtype"] = _DTYPES[name]


def get_dtype() -> type:
    return _state["dtype"]


@contextlib.contextmanager
def precision(name: str):
    previous = _state["dtype"]
    set_precision(name)
    try:
        yield
    finally:
        _state["dtype"] = previous


def check_finite(array: np.ndarray, name: str = "tensor") -> None:
    if not np.all(np.isfinite(array)):
        bad = int(np.size(array) - np.count_nonzero(np.isfinite(array)))
        raise FloatingPointError(f"{name} contains {bad} non-finite value(s)")


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------

def _conv_out_size(size: int, k: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - k) // stride + 1


def _im2col(x: np.ndarray, k: int, stride: int, padding: int) -> np.ndarray:
    """Rows are output positions (n, i, j); columns are (c, ki, kj)."""
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    n, c, ho, wo = win.shape[:4]
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * k * k)


def _check_conv_shapes(x: np.ndarray, weight: np.ndarray, stride: int, padding: int):
    if x.ndim != 4:
        raise ValueError(f"conv2d expects a 4-axis (N, C, H, W) input, got shape {x.shape}")
    if weight.ndim != 4 or weight.shape[2] != weight.shape[3]:
        raise ValueError(f"conv2d expects a square (Cout, Cin, K, K) weight, got {weight.shape}")
    if x.shape[1] != weight.shape[1]:
        raise ValueError(
            f"input has {x.shape[1]} channels but weight expects {weight.shape[1]}"
        )
    if stride < 1 or padding < 0:
        raise ValueError(f"invalid stride={stride} / padding={padding}")
    k = weight.shape[2]
    ho = _conv_out_size(x.shape[2], k, stride, padding)
    wo = _conv_out_size(x.shape[3], k, stride, padding)
    if ho <= 0 or wo <= 0:
        raise ValueError(
            f"conv2d output would be empty: input {x.shape[2:]} kernel {k} "
            f"stride {stride} padding {padding}"
        )
    return k, ho, wo


def conv2d_forward(
    x: np.ndarray,
    weight: np.ndarray,
    bias: np.ndarray | None,
    stride: int = 1,
    padding: int = 0,
    cols: np.ndarray | None = None,
) -> np.ndarray:
    """Cross-correlation of ``x`` (N, Cin, H, W) with ``weight`` (Cout, Cin, K, K).

    Pass ``cols`` to reuse an im2col buffer computed by :func:`_im2col`.
    """
    k, ho, wo = _check_conv_shapes(x, weight, stride, padding)
    if cols is None:
        cols = _im2col(x, k, stride, padding)
    cout = weight.shape[0]
    out = cols @ weight.reshape(cout, -1).T
    if bias is not None:
        out += bias
    return out.reshape(x.shape[0], ho, wo, cout).transpose(0, 3, 1, 2)


def conv2d_backward(
    x: np.ndarray,
    weight: np.ndarray,
    grad_out: np.ndarray,
    stride: int = 1,
    padding: int = 0,
    cols: np.ndarray | None = None,
):
    """Return ``(grad_x, grad_weight, grad_bias)`` for :func:`conv2d_forward`."""
    k, ho, wo = _check_conv_shapes(x, weight, stride, padding)
    n, cin, h, w = x.shape
    cout = weight.shape[0]
    if grad_out.shape != (n, cout, ho, wo):
        raise ValueError(
            f"upstream gradient shape {grad_out.shape} does not match conv output "
            f"{(n, cout, ho, wo)}"
        )
    if cols is None:
        cols = _im2col(x, k, stride, padding)
    g = grad_out.transpose(0, 2, 3, 1).reshape(-1, cout)
    grad_w = (g.T @ cols).reshape(weight.shape)
    grad_b = g.sum(axis=0)
    dcols = (g @ weight.reshape(cout, -1)).reshape(n, ho, wo, cin, k, k)
    dxp = np.zeros((n, cin, h + 2 * padding, w + 2 * padding), dtype=dcols.dtype)
    for ki in range(k):
        for kj in range(k):
            dxp[:, :, ki:ki + stride * ho:stride, kj:kj + stride * wo:stride] += (
                dcols[:, :, :, :, ki, kj].transpose(0, 3, 1, 2)
            )
    grad_x = dxp[:, :, padding:padding + h, padding:padding + w]
    return grad_x, grad_w, grad_b


# ---------------------------------------------------------------------------
# pooling / resampling / pointwise
# ---------------------------------------------------------------------------

def maxpool2x2_forward(x: np.ndarray):
    """2x2 max pooling with stride 2. Returns ``(out, argmax)``."""
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ValueError(f"maxpool2x2 needs even spatial extents, got {h}x{w}")
    blocks = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    blocks = blocks.reshape(n, c, h // 2, w // 2, 4)
    argmax = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, argmax[..., None], axis=-1)[..., 0]
    return out, argmax


def maxpool2x2_backward(grad_out: np.ndarray, argmax: np.ndarray) -> np.ndarray:
    n, c, ho, wo = grad_out.shape
    blocks = np.zeros((n, c, ho, wo, 4), dtype=grad_out.dtype)
    np.put_along_axis(blocks, argmax[..., None], grad_out[..., None], axis=-1)
    blocks = blocks.reshape(n, c, ho, wo, 2, 2).transpose(0, 1, 2, 4, 3, 5)
    return blocks.reshape(n, c, 2 * ho, 2 * wo)


def _bilinear_matrix(size: int, dtype) -> np.ndarray:
    """(2*size, size) interpolation matrix, half-pixel centres, edge clamped."""
    m = np.zeros((2 * size, size), dtype=dtype)
    for i in range(2 * size):
        src = min(max((i + 0.5) / 2.0 - 0.5, 0.0), size - 1)
        lo = int(np.floor(src))
        hi = min(lo + 1, size - 1)
        frac = src - lo
        m[i, lo] += 1.0 - frac
        m[i, hi] += frac
    return m


def upsample_bilinear2x_forward(x: np.ndarray) -> np.ndarray:
    uh = _bilinear_matrix(x.shape[2], x.dtype)
    uw = _bilinear_matrix(x.shape[3], x.dtype)
    return np.einsum("ih,nchw,jw->ncij", uh, x, uw, optimize=True)


def upsample_bilinear2x_backward(grad_out: np.ndarray) -> np.ndarray:
    uh = _bilinear_matrix(grad_out.shape[2] // 2, grad_out.dtype)
    uw = _bilinear_matrix(grad_out.shape[3] // 2, grad_out.dtype)
    return np.einsum("ih,ncij,jw->nchw", uh, grad_out, uw, optimize=True)


def relu_forward(x):
    return np.maximum(x, 0)


def relu_backward(grad_out: np.ndarray, x: np.ndarray) -> np.ndarray:
    return grad_out * (x > 0)


def concat_channels(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.ndim != b.ndim or a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ValueError(f"cannot concat channels of {a.shape} and {b.shape}")
    return np.concatenate([a, b], axis=1)


def split_channels(x: np.ndarray, first: int):
    """Inverse of :func:`concat_channels`; also splits its gradient."""
    return x[:, :first], x[:, first:]


def linear_forward(x: np.ndarray, weight: np.ndarray, bias: np.ndarray | None) -> np.ndarray:
    """``x @ weight.T + bias`` over the last axis; weight is (out, in)."""
    if x.shape[-1] != weight.shape[1]:
        raise ValueError(f"linear expects {weight.shape[1]} input features, got {x.shape[-1]}")
    out = x @ weight.T
    if bias is not None:
        out = out + bias
    return out


def linear_backward(x: np.ndarray, weight: np.ndarray, grad_out: np.ndarray):
    x2 = x.reshape(-1, x.shape[-1])
    g2 = grad_out.reshape(-1, grad_out.shape[-1])
    return grad_out @ weight, g2.T @ x2, g2.sum(axis=0)


# ---------------------------------------------------------------------------
# finite differences
# ---------------------------------------------------------------------------

def gradcheck(
    closure: Callable[[], tuple[float, Sequence[np.ndarray]]],
    params: Sequence[np.ndarray],
    epsilon: float = 1e-6,
    max_entries: int | None = None,
    seed: int = 0,
    reference: tuple[Callable, Sequence[np.ndarray]] | None = None,
) -> float:
    """Compare analytic gradients against central finite differences.

    ``closure()`` evaluates the scalar at the current contents of ``params``
    and returns ``(value, grads)`` with one gradient per parameter. Entries are
    perturbed in place and restored afterwards.

    The error for one parameter tensor is
    ``||analytic - numeric|| / max(||analytic||, ||numeric||, 1e-8)`` taken
    over the checked entries; the maximum over tensors is returned. With
    ``max_entries`` set, at most that many entries per tensor are sampled.

    ``reference=(closure64, params64)`` takes the finite differences on a
    separate higher-precision copy of the same function. This is how 32-bit
    backward passes are checked: f32 rounding swamps any step small enough
    to stay clear of ReLU and max-pool kinks.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    value, analytic = closure()
    if not np.isfinite(value):
        raise FloatingPointError("closure returned a non-finite value")
    analytic = [np.array(g, dtype=np.float64, copy=True) for g in analytic]
    if len(analytic) != len(params):
        raise ValueError(f"closure returned {len(analytic)} gradients for {len(params)} params")
    num_closure, num_params = reference if reference is not None else (closure, params)
    if len(num_params) != len(params):
        raise ValueError("reference must perturb the same number of parameters")
    rng = np.random.default_rng(seed)
    worst = 0.0
    for p, g in zip(num_params, analytic):
        if p.shape != g.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {p.shape}")
        flat = p.reshape(-1)
        if flat.base is None and p.size:
            raise ValueError("parameters must be contiguous so they can be perturbed in place")
        idx = np.arange(p.size)
        if max_entries is not None and p.size > max_entries:
            idx = np.sort(rng.choice(p.size, size=max_entries, replace=False))
        numeric = np.empty(idx.size)
        for n, i in enumerate(idx):
            orig = flat[i].copy()
            flat[i] = orig + epsilon
            plus, _ = num_closure()
            flat[i] = orig - epsilon
            minus, _ = num_closure()
            flat[i] = orig
            if not (np.isfinite(plus) and np.isfinite(minus)):
                raise FloatingPointError("closure returned a non-finite value")
            # the step actually applied, after rounding to the parameter dtype
            step = float(flat.dtype.type(orig + epsilon)) - float(flat.dtype.type(orig - epsilon))
            numeric[n] = (float(plus) - float(minus)) / step
        a = g.reshape(-1)[idx]
        denom = max(np.linalg.norm(a), np.linalg.norm(numeric), 1e-8)
        worst = max(worst, float(np.linalg.norm(a - numeric) / denom))
    return worst
