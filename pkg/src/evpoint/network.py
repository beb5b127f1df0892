"""The feature network: shared encoder, detector head, descriptor head.

Everything is plain numpy, float32 in normal operation; a float64 input
tensor (with float64 parameters) runs the identical code path in double
precision, which is what the finite-difference gradient checks use.
Convolutions run as im2col plus a matmul; the backward pass is
hand-derived per layer (convolution, ReLU, 2x2 max-pool with
first-maximum tie routing, softmax).

Architecture (3x3 kernels pad 1 unless noted, ReLU after every encoder
conv and after each head's first conv):

    encoder: 1 -> 64 -> 64, pool, 64 -> 64, pool, 64 -> 128 -> 128,
             pool, 128 -> 128 -> 128
    detector head: 128 -> 256 (3x3) -> 65 (1x1, logits)
    descriptor head: 128 -> 256 (3x3) -> 256 (1x1, raw descriptors)

The 65th detector channel is the "no interest point in this 8x8 cell"
bin dropped when the heatmap is assembled.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

CELL = 8  # pixels per output cell along each axis
DESC_DIM = 256
DUSTBIN = 64  # detector channel meaning "no keypoint in this cell"

# name, in channels, out channels, kernel size
LAYER_SPECS: tuple[tuple[str, int, int, int], ...] = (
    ("conv1a", 1, 64, 3),
    ("conv1b", 64, 64, 3),
    ("conv2a", 64, 64, 3),
    ("conv2b", 64, 64, 3),
    ("conv3a", 64, 128, 3),
    ("conv3b", 128, 128, 3),
    ("conv4a", 128, 128, 3),
    ("conv4b", 128, 128, 3),
    ("cPa", 128, 256, 3),
    ("semi", 256, 65, 1),
    ("dDa", 128, 256, 3),
    ("desc", 256, DESC_DIM, 1),
)

_ENCODER = ("conv1a", "conv1b", "conv2a", "conv2b",
            "conv3a", "conv3b", "conv4a", "conv4b")
_POOL_AFTER = {"conv1b": "pool1", "conv2b": "pool2", "conv3b": "pool3"}

DETECTOR_HEAD_LAYERS = ("cPa", "semi")
DESCRIPTOR_HEAD_LAYERS = ("dDa", "desc")


@dataclass
class ConvParams:
    """One convolution's kernel (cout, cin, k, k) and bias (cout,)."""

    w: np.ndarray
    b: np.ndarray


class WeightSet:
    """The network's parameters, shape-checked against the fixed layout."""

    def __init__(self, layers: dict[str, ConvParams]):
        for name, cin, cout, k in LAYER_SPECS:
            if name not in layers:
                raise ValueError(f"missing layer {name}")
            p = layers[name]
            if p.w.shape != (cout, cin, k, k):
                raise ValueError(
                    f"layer {name}: kernel shape {p.w.shape}, "
                    f"expected {(cout, cin, k, k)}"
                )
            if p.b.shape != (cout,):
                raise ValueError(f"layer {name}: bias shape {p.b.shape}")
            if not (np.isfinite(p.w).all() and np.isfinite(p.b).all()):
                raise ValueError(f"layer {name}: non-finite parameters")
        if set(layers) != {s[0] for s in LAYER_SPECS}:
            extra = set(layers) - {s[0] for s in LAYER_SPECS}
            raise ValueError(f"unexpected layers: {sorted(extra)}")
        self._layers = {name: layers[name] for name, *_ in LAYER_SPECS}

    def __getitem__(self, name: str) -> ConvParams:
        return self._layers[name]

    def items(self):
        return self._layers.items()

    def copy(self) -> "WeightSet":
        return WeightSet(
            {n: ConvParams(p.w.copy(), p.b.copy()) for n, p in self.items()}
        )


@dataclass
class NetworkOutput:
    semi: np.ndarray      # (N, 65, H/8, W/8) detector logits
    desc_raw: np.ndarray  # (N, 256, H/8, W/8) unnormalized descriptors


def init_weights(rng: np.random.Generator) -> WeightSet:
    """Gaussian kernels scaled by sqrt(2 / fan_in), zero biases."""
    layers = {}
    for name, cin, cout, k in LAYER_SPECS:
        std = np.sqrt(2.0 / (cin * k * k))
        w = (rng.standard_normal((cout, cin, k, k)) * std).astype(np.float32)
        b = np.zeros(cout, dtype=np.float32)
        layers[name] = ConvParams(w, b)
    return WeightSet(layers)


def _im2col(x: np.ndarray, k: int, pad: int) -> np.ndarray:
    n, c, h, w = x.shape
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    oh, ow = h + 2 * pad - k + 1, w + 2 * pad - k + 1
    cols = np.empty((n, c, k, k, oh, ow), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, :, i, j] = x[:, :, i:i + oh, j:j + ow]
    return cols.reshape(n, c * k * k, oh * ow)


def _col2im(gcols: np.ndarray, x_shape, k: int, pad: int) -> np.ndarray:
    n, c, h, w = x_shape
    oh, ow = h + 2 * pad - k + 1, w + 2 * pad - k + 1
    gx = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=gcols.dtype)
    g6 = gcols.reshape(n, c, k, k, oh, ow)
    for i in range(k):
        for j in range(k):
            gx[:, :, i:i + oh, j:j + ow] += g6[:, :, i, j]
    if pad:
        gx = gx[:, :, pad:pad + h, pad:pad + w]
    return gx


def _conv_forward(p: ConvParams, x: np.ndarray) -> np.ndarray:
    cout, cin, k, _ = p.w.shape
    pad = (k - 1) // 2
    cols = _im2col(x, k, pad)
    y = np.matmul(p.w.reshape(cout, -1)[None], cols)
    n, _, h, w = x.shape
    return y.reshape(n, cout, h, w) + p.b[None, :, None, None]


def _conv_backward(p: ConvParams, x: np.ndarray, gy: np.ndarray):
    cout, cin, k, _ = p.w.shape
    pad = (k - 1) // 2
    n = x.shape[0]
    gy2 = gy.reshape(n, cout, -1)
    gb = gy2.sum(axis=(0, 2))
    cols = _im2col(x, k, pad)  # recomputed; cheaper than caching it
    gw = np.tensordot(gy2, cols, axes=([0, 2], [0, 2])).reshape(p.w.shape)
    gcols = np.matmul(p.w.reshape(cout, -1).T[None], gy2)
    gx = _col2im(gcols, x.shape, k, pad)
    return gx, gw.astype(x.dtype), gb.astype(x.dtype)


def _maxpool2(x: np.ndarray):
    n, c, h, w = x.shape
    blocks = (
        x.reshape(n, c, h // 2, 2, w // 2, 2)
        .transpose(0, 1, 2, 4, 3, 5)
        .reshape(n, c, h // 2, w // 2, 4)
    )
    # argmax returns the first maximum, i.e. row-major order within the block
    idx = blocks.argmax(axis=-1)
    y = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]
    return y, idx.astype(np.int8)


def _maxpool2_backward(idx: np.ndarray, x_shape, gy: np.ndarray) -> np.ndarray:
    n, c, h, w = x_shape
    g = np.zeros((n, c, h // 2, w // 2, 4), dtype=gy.dtype)
    np.put_along_axis(g, idx[..., None].astype(np.int64), gy[..., None], axis=-1)
    return (
        g.reshape(n, c, h // 2, w // 2, 2, 2)
        .transpose(0, 1, 2, 4, 3, 5)
        .reshape(n, c, h, w)
    )


def frame_to_tensor(frame: np.ndarray) -> np.ndarray:
    """uint8 (H, W) frame to a (1, 1, H, W) float32 tensor in [0, 1]."""
    if frame.ndim != 2:
        raise ValueError("expected a single-channel frame")
    return (frame.astype(np.float32) / 255.0)[None, None]


def forward(w: WeightSet, x: np.ndarray) -> tuple[NetworkOutput, dict]:
    """Run the network on an (N, 1, H, W) tensor, H and W divisible by 8.

    Returns the two head outputs plus the cache of intermediate
    activations that backward() consumes.
    """
    x = np.asarray(x)
    if x.dtype != np.float64:
        x = x.astype(np.float32)
    if x.ndim != 4 or x.shape[1] != 1:
        raise ValueError("input must be (N, 1, H, W)")
    if x.shape[2] % CELL or x.shape[3] % CELL or min(x.shape[2:]) < CELL:
        raise ValueError("H and W must be multiples of 8 and at least 8")
    cache: dict = {}
    a = x
    for name in _ENCODER:
        cache[name + "_in"] = a
        a = np.maximum(_conv_forward(w[name], a), 0.0)
        cache[name + "_out"] = a
        if name in _POOL_AFTER:
            tag = _POOL_AFTER[name]
            cache[tag + "_shape"] = a.shape
            a, idx = _maxpool2(a)
            cache[tag + "_idx"] = idx
    cache["encoded"] = a

    cache["cPa_in"] = a
    det = np.maximum(_conv_forward(w["cPa"], a), 0.0)
    cache["cPa_out"] = det
    semi = _conv_forward(w["semi"], det)

    cache["dDa_in"] = a
    dsc = np.maximum(_conv_forward(w["dDa"], a), 0.0)
    cache["dDa_out"] = dsc
    desc_raw = _conv_forward(w["desc"], dsc)

    return NetworkOutput(semi=semi, desc_raw=desc_raw), cache


def forward_frame(w: WeightSet, frame: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Convenience single-frame forward: returns (semi, desc_raw), no batch axis."""
    out, _ = forward(w, frame_to_tensor(frame))
    return out.semi[0], out.desc_raw[0]


def backward(
    w: WeightSet,
    cache: dict,
    grad_semi: np.ndarray | None,
    grad_desc_raw: np.ndarray | None,
) -> dict[str, ConvParams]:
    """Propagate head gradients back to every parameter.

    Either head gradient may be None, meaning zero. Returns a dict of
    per-layer gradients shaped like the parameters themselves.
    """
    enc = cache["encoded"]
    dtype = enc.dtype
    grads: dict[str, ConvParams] = {}
    g_enc = np.zeros_like(enc)

    if grad_semi is not None:
        gs = np.asarray(grad_semi, dtype=dtype)
        g_det, gw, gb = _conv_backward(w["semi"], cache["cPa_out"], gs)
        grads["semi"] = ConvParams(gw, gb)
        g_det *= cache["cPa_out"] > 0
        g, gw, gb = _conv_backward(w["cPa"], cache["cPa_in"], g_det)
        grads["cPa"] = ConvParams(gw, gb)
        g_enc += g
    else:
        for name, cin, cout, k in LAYER_SPECS:
            if name in DETECTOR_HEAD_LAYERS:
                grads[name] = ConvParams(
                    np.zeros((cout, cin, k, k), dtype),
                    np.zeros(cout, dtype),
                )

    if grad_desc_raw is not None:
        gd = np.asarray(grad_desc_raw, dtype=dtype)
        g_dsc, gw, gb = _conv_backward(w["desc"], cache["dDa_out"], gd)
        grads["desc"] = ConvParams(gw, gb)
        g_dsc *= cache["dDa_out"] > 0
        g, gw, gb = _conv_backward(w["dDa"], cache["dDa_in"], g_dsc)
        grads["dDa"] = ConvParams(gw, gb)
        g_enc += g
    else:
        for name, cin, cout, k in LAYER_SPECS:
            if name in DESCRIPTOR_HEAD_LAYERS:
                grads[name] = ConvParams(
                    np.zeros((cout, cin, k, k), dtype),
                    np.zeros(cout, dtype),
                )

    g = g_enc
    for name in reversed(_ENCODER):
        if name in _POOL_AFTER:
            tag = _POOL_AFTER[name]
            g = _maxpool2_backward(cache[tag + "_idx"], cache[tag + "_shape"], g)
        g = g * (cache[name + "_out"] > 0)
        g, gw, gb = _conv_backward(w[name], cache[name + "_in"], g)
        grads[name] = ConvParams(gw, gb)
    return grads


def sgd_step(w: WeightSet, grads: dict[str, ConvParams], lr: float) -> WeightSet:
    """Plain gradient descent: w - lr * grad, new WeightSet returned."""
    new = {}
    for name, p in w.items():
        g = grads[name]
        if not (np.isfinite(g.w).all() and np.isfinite(g.b).all()):
            raise ValueError(f"non-finite gradient for layer {name}")
        new[name] = ConvParams(
            (p.w - lr * g.w).astype(p.w.dtype),
            (p.b - lr * g.b).astype(p.b.dtype),
        )
    return WeightSet(new)


def zero_grads() -> dict[str, ConvParams]:
    return {
        name: ConvParams(
            np.zeros((cout, cin, k, k), np.float32), np.zeros(cout, np.float32)
        )
        for name, cin, cout, k in LAYER_SPECS
    }


def accumulate_grads(
    acc: dict[str, ConvParams], grads: dict[str, ConvParams], scale: float = 1.0
) -> None:
    for name, g in grads.items():
        acc[name].w += scale * g.w
        acc[name].b += scale * g.b


def softmax_channels(z: np.ndarray, axis: int = 0) -> np.ndarray:
    """Numerically stable softmax along one axis, dtype-preserving."""
    z = np.asarray(z)
    if z.dtype not in (np.float32, np.float64):
        z = z.astype(np.float32)
    m = z.max(axis=axis, keepdims=True)
    e = np.exp(z - m)
    return e / e.sum(axis=axis, keepdims=True)


def detector_heatmap(semi: np.ndarray) -> np.ndarray:
    """Turn (65, Hc, Wc) logits into an (8 Hc, 8 Wc) probability map.

    Softmax runs over the 65 channels per cell; the no-keypoint bin is
    dropped and the 64 survivors tile each 8x8 cell row-major.
    """
    if semi.ndim != 3 or semi.shape[0] != DUSTBIN + 1:
        raise ValueError("expected (65, Hc, Wc) logits")
    p = softmax_channels(semi.astype(np.float64), axis=0)
    hc, wc = semi.shape[1], semi.shape[2]
    nodust = p[:DUSTBIN]
    return (
        nodust.reshape(CELL, CELL, hc, wc)
        .transpose(2, 0, 3, 1)
        .reshape(hc * CELL, wc * CELL)
    )


def _catmull_rom_weights(f: np.ndarray) -> np.ndarray:
    """Weights over the 4 neighboring nodes for fractional offsets f."""
    f2 = f * f
    f3 = f2 * f
    return np.stack(
        [
            0.5 * (-f3 + 2.0 * f2 - f),
            0.5 * (3.0 * f3 - 5.0 * f2 + 2.0),
            0.5 * (-3.0 * f3 + 4.0 * f2 + f),
            0.5 * (f3 - f2),
        ],
        axis=-1,
    )


def interpolation_matrix(coords: np.ndarray, n_cells: int) -> np.ndarray:
    """Rows of cubic interpolation weights over a clamped cell grid.

    coords are positions in cell units; indices outside [0, n_cells)
    clamp to the border, so border weights pile up there.
    """
    coords = np.asarray(coords, dtype=np.float64)
    i0 = np.floor(coords).astype(np.int64)
    wts = _catmull_rom_weights(coords - i0)
    mat = np.zeros((coords.size, n_cells), dtype=np.float32)
    rows = np.arange(coords.size)
    for k in range(4):
        idx = np.clip(i0 - 1 + k, 0, n_cells - 1)
        np.add.at(mat, (rows, idx), wts[:, k].astype(np.float32))
    return mat


def pixel_to_cell(coord) -> np.ndarray:
    """Map full-resolution pixel coordinates to cell-grid coordinates.

    Cell i is centered at pixel 8 i + 3.5, so the inverse is (x - 3.5) / 8.
    """
    return (np.asarray(coord, dtype=np.float64) - 3.5) / CELL


@lru_cache(maxsize=16)
def _axis_matrices(hc: int, wc: int) -> tuple[np.ndarray, np.ndarray]:
    ry = interpolation_matrix(pixel_to_cell(np.arange(hc * CELL)), hc)
    rx = interpolation_matrix(pixel_to_cell(np.arange(wc * CELL)), wc)
    return ry, rx


def dense_descriptors(desc_raw: np.ndarray) -> np.ndarray:
    """Upsample (256, Hc, Wc) raw descriptors to (H, W, 256) unit vectors.

    Bicubic interpolation with cell centers at pixel 8 i + 3.5 on each
    axis and border clamping, then per-pixel L2 normalization.
    """
    if desc_raw.ndim != 3:
        raise ValueError("expected (C, Hc, Wc)")
    _, hc, wc = desc_raw.shape
    ry, rx = _axis_matrices(hc, wc)
    t = np.tensordot(ry, desc_raw.astype(np.float32), axes=(1, 1))  # (H, C, Wc)
    t = np.tensordot(t, rx, axes=(2, 1))                            # (H, C, W)
    out = t.transpose(0, 2, 1)
    norms = np.sqrt((out * out).sum(axis=2, keepdims=True))
    return out / np.maximum(norms, 1e-12)


def l2_normalize_cells(d: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Unit-normalize (C, Hc, Wc) descriptors along channels; returns norms too."""
    n = np.sqrt((d.astype(np.float64) ** 2).sum(axis=0, keepdims=True))
    n = np.maximum(n, 1e-12)
    return d / n, n


def l2_normalize_backward(
    unit: np.ndarray, norms: np.ndarray, g_unit: np.ndarray
) -> np.ndarray:
    """Chain a gradient on unit vectors back through the normalization."""
    dot = (g_unit * unit).sum(axis=0, keepdims=True)
    return (g_unit - unit * dot) / norms
