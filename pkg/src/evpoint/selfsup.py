"""Self-supervised training: pseudo-labels and the two loss functions.

The detector is bootstrapped without annotations: a classical corner
detector is run over many random warps of each frame, the responses are
warped back and averaged (consensus suppresses the warping artifacts),
and the averaged map is thresholded into per-cell one-hot labels.

The descriptor needs no labels at all: the three frames of a triplet
cover the same scene at the same center time, so cells at the same
location are positives and everything else is a negative, enforced with
a double-margin hinge on descriptor dot products.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from .events import EventStream, TripletConfig, centered_window, triplet_windows
from .geometry import HomographySampleConfig, sample_homography, warp_frame
from .network import (
    CELL,
    WeightSet,
    accumulate_grads,
    backward,
    forward,
    init_weights,
    l2_normalize_backward,
    l2_normalize_cells,
    sgd_step,
    softmax_channels,
    zero_grads,
)
from .representation import Representation, encode_window
from .util import parallel_map

N_CHANNELS = 65  # 64 cell positions + 1 no-keypoint bin


@dataclass(frozen=True)
class FocalParams:
    alpha: float = 0.75
    gamma: float = 2.0
    tau_train: float = 0.005

    def __post_init__(self) -> None:
        if not 0.0 < self.alpha < 1.0:
            raise ValueError("alpha must be in (0, 1)")
        if self.gamma < 0.0:
            raise ValueError("gamma must be nonnegative")
        if not 0.0 < self.tau_train < 1.0:
            raise ValueError("tau_train must be in (0, 1)")


@dataclass(frozen=True)
class HingeParams:
    lam: float = 0.001
    m_p: float = 1.0
    m_n: float = 0.2
    epsilon: float = 8.0
    lambda_side: str = "positive"  # which hinge term lam multiplies

    def __post_init__(self) -> None:
        if not self.m_p > self.m_n >= 0.0:
            raise ValueError("need m_p > m_n >= 0")
        if self.epsilon <= 0.0:
            raise ValueError("epsilon must be positive")
        if self.lambda_side not in ("positive", "negative"):
            raise ValueError("lambda_side must be 'positive' or 'negative'")


@dataclass(frozen=True)
class LossWeights:
    w_h: float = 0.5
    w_m: float = 0.5
    w_l: float = 1.0

    def __post_init__(self) -> None:
        if min(self.w_h, self.w_m, self.w_l) <= 0.0:
            raise ValueError("scale weights must be positive")


# ---------------------------------------------------------------------------
# bootstrap detector


def _gaussian_blur(img: np.ndarray, sigma: float) -> np.ndarray:
    r = max(1, int(3.0 * sigma + 0.5))
    x = np.arange(-r, r + 1, dtype=np.float64)
    k = np.exp(-(x * x) / (2.0 * sigma * sigma))
    k /= k.sum()
    pad = np.pad(img, ((r, r), (0, 0)), mode="reflect")
    out = np.zeros_like(img)
    for i, kv in enumerate(k):
        out += kv * pad[i:i + img.shape[0]]
    pad = np.pad(out, ((0, 0), (r, r)), mode="reflect")
    out = np.zeros_like(img)
    for i, kv in enumerate(k):
        out += kv * pad[:, i:i + img.shape[1]]
    return out


def harris_corners(
    frame: np.ndarray,
    k: float = 0.04,
    sigma: float = 1.5,
    max_points: int = 512,
    quality: float = 0.01,
) -> tuple[np.ndarray, np.ndarray]:
    """Corner positions and scores in [0, 1], strongest first.

    Central-difference gradients, Gaussian-windowed structure tensor,
    det - k trace^2 response, 3x3 local maxima above quality * peak,
    truncated to max_points.
    """
    img = frame.astype(np.float64) / 255.0
    gy, gx = np.gradient(img)
    a = _gaussian_blur(gx * gx, sigma)
    b = _gaussian_blur(gy * gy, sigma)
    c = _gaussian_blur(gx * gy, sigma)
    r = (a * b - c * c) - k * (a + b) ** 2

    peak = r.max() if r.size else 0.0
    if peak <= 1e-12:
        return np.zeros((0, 2)), np.zeros(0)
    neigh = np.full_like(r, -np.inf)
    h, w = r.shape
    for dy in (-1, 0, 1):
        for dx in (-1, 0, 1):
            if dy == 0 and dx == 0:
                continue
            ys = slice(max(0, dy), h + min(0, dy))
            xs = slice(max(0, dx), w + min(0, dx))
            ys_s = slice(max(0, -dy), h + min(0, -dy))
            xs_s = slice(max(0, -dx), w + min(0, -dx))
            neigh[ys, xs] = np.maximum(neigh[ys, xs], r[ys_s, xs_s])
    keep = (r >= neigh) & (r > quality * peak)
    ys, xs = np.nonzero(keep)
    scores = r[ys, xs] / peak
    order = np.argsort(-scores, kind="stable")[:max_points]
    pts = np.stack([xs[order], ys[order]], axis=1).astype(np.float64)
    return pts, scores[order]


def base_detect(frame: np.ndarray, detector=None) -> tuple[np.ndarray, np.ndarray]:
    """Run the bootstrap detector; any (frame) -> (points, scores) callable."""
    if detector is None:
        detector = harris_corners
    pts, scores = detector(frame)
    pts = np.asarray(pts, dtype=np.float64).reshape(-1, 2)
    scores = np.clip(np.asarray(scores, dtype=np.float64).reshape(-1), 0.0, 1.0)
    return pts, scores


# ---------------------------------------------------------------------------
# pseudo-labels


def homographic_adaptation(
    frame: np.ndarray,
    detector,
    n_h: int,
    cfg: HomographySampleConfig,
    rng: np.random.Generator,
    threads: int | None = None,
) -> np.ndarray:
    """Aggregate detector responses over n_h homographic views.

    The first view is the identity; the rest are sampled from cfg. Each
    view's detections are splatted into a point map, warped back, and
    averaged per pixel over the views that actually observed the pixel.
    Output values stay in [0, 1].
    """
    if n_h < 1:
        raise ValueError("need at least one view")
    hh, ww = frame.shape
    warps = [np.eye(3)]
    warps += [sample_homography(cfg, rng) for _ in range(n_h - 1)]

    def one_view(h):
        warped, wmask = warp_frame(h, frame, fill=0)
        pts, scores = base_detect(warped, detector)
        pmap = np.zeros((hh, ww), dtype=np.float64)
        if pts.size:
            xi = np.clip(np.floor(pts[:, 0] + 0.5).astype(np.int64), 0, ww - 1)
            yi = np.clip(np.floor(pts[:, 1] + 0.5).astype(np.int64), 0, hh - 1)
            np.maximum.at(pmap, (yi, xi), scores)
        hinv = np.linalg.inv(h)
        back, bmask = warp_frame(hinv, pmap, fill=0.0)
        seen, _ = warp_frame(hinv, wmask.astype(np.float64), fill=0.0)
        ok = bmask & (seen > 0.999)
        return back, ok

    agg = np.zeros((hh, ww), dtype=np.float64)
    cnt = np.zeros((hh, ww), dtype=np.float64)
    for back, ok in parallel_map(one_view, warps, threads):
        agg[ok] += back[ok]
        cnt[ok] += 1.0
    return agg / np.maximum(cnt, 1.0)


def binarize_labels(agg: np.ndarray, tau_train: float) -> np.ndarray:
    """Threshold an aggregated map into per-cell one-hot labels.

    Returns (65, Hc, Wc): channel r * 8 + c marks the winning pixel
    offset inside the cell (highest response above tau_train, ties to
    the smallest offset), channel 64 marks an empty cell.
    """
    h, w = agg.shape
    if h % CELL or w % CELL:
        raise ValueError("map dimensions must be multiples of 8")
    hc, wc = h // CELL, w // CELL
    cells = (
        agg.reshape(hc, CELL, wc, CELL).transpose(0, 2, 1, 3).reshape(hc, wc, 64)
    )
    candidate = cells > tau_train
    best = np.where(candidate, cells, -1.0).argmax(axis=2)
    channel = np.where(candidate.any(axis=2), best, 64)
    label = np.zeros((hc, wc, N_CHANNELS), dtype=np.float32)
    np.put_along_axis(label, channel[..., None], 1.0, axis=2)
    return label.transpose(2, 0, 1)


# ---------------------------------------------------------------------------
# detector loss


def focal_loss(
    p_softmax: np.ndarray,
    label: np.ndarray,
    fp: FocalParams,
    printed_form: bool = False,
) -> tuple[float, np.ndarray]:
    """Class-balanced focal loss over the 65 channels, plus logit gradient.

    The gradient is taken with respect to the logits that produced
    p_softmax, composed through the softmax Jacobian. Probabilities are
    clamped to [1e-6, 1 - 1e-6] inside the loss. printed_form swaps in
    a sign-flipped variant kept only for comparison; it is not usable
    for training.
    """
    p = np.asarray(p_softmax, dtype=np.float64)
    if p.shape != label.shape or p.shape[0] != N_CHANNELS:
        raise ValueError("probability and label shapes must match, 65 channels")
    lo = 1e-6
    pc = np.clip(p, lo, 1.0 - lo)
    pos = label > 0.5
    a, g = fp.alpha, fp.gamma

    if printed_form:
        elem = np.where(
            pos,
            a * (1.0 - pc) ** g * np.log1p(-pc),
            (1.0 - a) * pc**g * np.log(pc),
        )
        dldp = np.where(
            pos,
            -a * (1.0 - pc) ** (g - 1.0) * (g * np.log1p(-pc) + 1.0),
            (1.0 - a) * pc ** (g - 1.0) * (g * np.log(pc) + 1.0),
        )
    else:
        elem = np.where(
            pos,
            -a * (1.0 - pc) ** g * np.log(pc),
            -(1.0 - a) * pc**g * np.log1p(-pc),
        )
        dldp = np.where(
            pos,
            a * g * (1.0 - pc) ** (g - 1.0) * np.log(pc) - a * (1.0 - pc) ** g / pc,
            (1.0 - a) * pc**g / (1.0 - pc)
            - (1.0 - a) * g * pc ** (g - 1.0) * np.log1p(-pc),
        )
    dldp = dldp * ((p > lo) & (p < 1.0 - lo))  # clamp is flat outside

    scale = 1.0 / p.size
    loss = float(elem.sum() * scale)
    dldp *= scale
    # chain through softmax: dz = p * (g - <g, p>) per cell
    grad_z = p * (dldp - (dldp * p).sum(axis=0, keepdims=True))
    return loss, grad_z


def detector_loss(
    semis,
    label: np.ndarray,
    lw: LossWeights,
    fp: FocalParams,
) -> tuple[float, list[np.ndarray]]:
    """Weighted focal loss over the three scales against one shared label.

    semis are the (65, Hc, Wc) logits for (F_h, F_m, F_l), in that
    order. Returns the scalar and the per-scale logit gradients.
    """
    weights = (lw.w_h, lw.w_m, lw.w_l)
    if len(semis) != 3:
        raise ValueError("expected logits for exactly three scales")
    total = 0.0
    grads = []
    for z, wt in zip(semis, weights):
        p = softmax_channels(np.asarray(z, dtype=np.float64), axis=0)
        loss, gz = focal_loss(p, label, fp)
        total += wt * loss
        grads.append(wt * gz)
    return total, grads


# ---------------------------------------------------------------------------
# descriptor loss


def correspondence_mask(cells: tuple[int, int], hp: HingeParams) -> np.ndarray:
    """Cell-pair correspondence under the center-distance threshold.

    Cell (i, j) has its center at full-resolution pixel (8 j + 3.5,
    8 i + 3.5); two cells correspond when their centers are strictly
    closer than epsilon. Returns a (Hc Wc, Hc Wc) boolean matrix.
    """
    hc, wc = cells
    ii, jj = np.meshgrid(np.arange(hc), np.arange(wc), indexing="ij")
    centers = np.stack([ii.ravel(), jj.ravel()], axis=1).astype(np.float64) * CELL
    diff = centers[:, None, :] - centers[None, :, :]
    d2 = (diff * diff).sum(axis=2)
    return d2 < hp.epsilon * hp.epsilon


def hinge_loss(
    d1: np.ndarray,
    d2: np.ndarray,
    s: np.ndarray,
    hp: HingeParams,
) -> tuple[float, np.ndarray, np.ndarray]:
    """Double-margin hinge on all cell-pair dot products.

    Corresponding pairs are pulled above m_p, everything else pushed
    below m_n; lam multiplies the side hp.lambda_side names. The sum is
    normalized by the squared cell count. Inputs are unit-norm (C, Hc,
    Wc) grids; gradients are returned for both.
    """
    c, hc, wc = d1.shape
    if d2.shape != d1.shape:
        raise ValueError("descriptor grids must share a shape")
    k = hc * wc
    if s.shape != (k, k):
        raise ValueError("mask shape must be (cells, cells)")
    x1 = d1.reshape(c, k).T.astype(np.float64)
    x2 = d2.reshape(c, k).T.astype(np.float64)
    gram = x1 @ x2.T

    lam_p = hp.lam if hp.lambda_side == "positive" else 1.0
    lam_n = hp.lam if hp.lambda_side == "negative" else 1.0
    pos_active = s & (gram < hp.m_p)
    neg_active = (~s) & (gram > hp.m_n)
    norm = 1.0 / (k * k)
    loss = norm * (
        lam_p * (hp.m_p - gram[pos_active]).sum()
        + lam_n * (gram[neg_active] - hp.m_n).sum()
    )
    dgram = norm * (lam_n * neg_active - lam_p * pos_active)
    g1 = (dgram @ x2).T.reshape(c, hc, wc)
    g2 = (dgram.T @ x1).T.reshape(c, hc, wc)
    return float(loss), g1, g2


_PAIRS = ((0, 1), (0, 2), (1, 2))  # (h, m), (h, l), (m, l)


def descriptor_loss(
    grids,
    masks,
    lw: LossWeights,
    hp: HingeParams,
) -> tuple[float, list[np.ndarray]]:
    """Pairwise hinge losses over the triplet, geometric-mean weighted.

    grids are unit-norm (C, Hc, Wc) grids for (h, m, l). masks is one
    correspondence matrix shared by all pairs or a sequence of three in
    pair order (h, m), (h, l), (m, l).
    """
    grids = list(grids)
    if len(grids) != 3:
        raise ValueError("expected three descriptor grids")
    if isinstance(masks, np.ndarray):
        masks = (masks, masks, masks)
    weights = (lw.w_h, lw.w_m, lw.w_l)
    total = 0.0
    grads = [np.zeros_like(g, dtype=np.float64) for g in grids]
    for (i, j), mask in zip(_PAIRS, masks):
        wt = float(np.sqrt(weights[i] * weights[j]))
        loss, gi, gj = hinge_loss(grids[i], grids[j], mask, hp)
        total += wt * loss
        grads[i] += wt * gi
        grads[j] += wt * gj
    return total, grads


# ---------------------------------------------------------------------------
# training loops


@dataclass(frozen=True)
class TrainConfig:
    """Everything the training loops need besides the data.

    The homography bounds for label adaptation are stored with a
    placeholder frame size and re-sized to each labeled frame.
    """

    lr: float = 0.001
    batch_size: int = 8
    epochs: int = 10
    n_homographies: int = 32
    crop_width: int = 320
    crop_height: int = 240
    representation: Representation = Representation.TENCODE
    focal: FocalParams = field(default_factory=FocalParams)
    hinge: HingeParams = field(default_factory=HingeParams)
    loss_weights: LossWeights = field(default_factory=LossWeights)
    triplet: TripletConfig = field(default_factory=TripletConfig)
    adaptation: HomographySampleConfig = field(
        default_factory=lambda: HomographySampleConfig(width=64, height=64)
    )


@dataclass
class TrainResult:
    weights: WeightSet
    epoch_losses: list[float]


def _crop_bounds(rng, full: int, crop: int) -> tuple[int, int]:
    size = min(crop, full)
    size -= size % CELL
    size = max(size, CELL)
    lo = 0 if full == size else int(rng.integers(0, (full - size) // CELL + 1)) * CELL
    return lo, size


def _encode_triplet_frames(stream, t_base, cfg, rng):
    w_h, w_m, w_l = triplet_windows(t_base, cfg.triplet, rng)
    rep = cfg.representation
    return (
        encode_window(stream, w_h, rep),
        encode_window(stream, w_m, rep),
        encode_window(stream, w_l, rep),
    )


def _stack_frames(frames) -> np.ndarray:
    x = np.stack([f.astype(np.float32) / 255.0 for f in frames])
    return x[:, None]


def make_labels(
    dataset,
    cfg: TrainConfig,
    rng: np.random.Generator,
    detector=None,
    threads: int | None = None,
) -> list[np.ndarray]:
    """Pseudo-label every sample's low-scale frame, once per dataset."""
    labels = []
    for stream, t_base in dataset:
        w_l = centered_window(t_base, cfg.triplet.dt_l)
        frame = encode_window(stream, w_l, cfg.representation)
        warp_cfg = dataclasses.replace(
            cfg.adaptation, width=frame.shape[1], height=frame.shape[0]
        )
        agg = homographic_adaptation(
            frame, detector, cfg.n_homographies, warp_cfg, rng, threads
        )
        labels.append(binarize_labels(agg, cfg.focal.tau_train))
    return labels


def train_detector(
    dataset,
    cfg: TrainConfig,
    rng: np.random.Generator,
    init: WeightSet | None = None,
    detector=None,
    threads: int | None = None,
    labels: list[np.ndarray] | None = None,
) -> TrainResult:
    """Train the detector head (and encoder) against adaptation labels.

    dataset is a sequence of (EventStream, t_base) samples. Each epoch
    re-draws the triplet windows and crops; labels are fixed per sample.
    Gradients are averaged over each batch before the step.
    """
    samples = list(dataset)
    if not samples:
        raise ValueError("empty dataset")
    weights = init if init is not None else init_weights(rng)
    if labels is None:
        labels = make_labels(samples, cfg, rng, detector, threads)

    history = []
    for _ in range(cfg.epochs):
        order = rng.permutation(len(samples))
        total = 0.0
        for start in range(0, len(order), cfg.batch_size):
            batch = order[start:start + cfg.batch_size]
            acc = zero_grads()
            for si in batch:
                stream, t_base = samples[si]
                frames = _encode_triplet_frames(stream, t_base, cfg, rng)
                oy, ch = _crop_bounds(rng, frames[0].shape[0], cfg.crop_height)
                ox, cw = _crop_bounds(rng, frames[0].shape[1], cfg.crop_width)
                x = _stack_frames([f[oy:oy + ch, ox:ox + cw] for f in frames])
                lab = labels[si][
                    :, oy // CELL:(oy + ch) // CELL, ox // CELL:(ox + cw) // CELL
                ]
                out, cache = forward(weights, x)
                loss, gsem = detector_loss(list(out.semi), lab,
                                           cfg.loss_weights, cfg.focal)
                grads = backward(
                    weights, cache, np.stack(gsem).astype(np.float32), None
                )
                accumulate_grads(acc, grads, 1.0 / len(batch))
                total += loss
            weights = sgd_step(weights, acc, cfg.lr)
        history.append(total / len(samples))
    return TrainResult(weights, history)


def train_descriptor(
    dataset,
    cfg: TrainConfig,
    base: WeightSet,
    rng: np.random.Generator,
    threads: int | None = None,
) -> TrainResult:
    """Train the descriptor head (and encoder) on triplet correspondence.

    The detector head receives no gradient, so its parameters stay at
    the detector-stage values while the shared encoder keeps learning.
    """
    samples = list(dataset)
    if not samples:
        raise ValueError("empty dataset")
    weights = base
    mask_cache: dict[tuple[int, int], np.ndarray] = {}

    history = []
    for _ in range(cfg.epochs):
        order = rng.permutation(len(samples))
        total = 0.0
        for start in range(0, len(order), cfg.batch_size):
            batch = order[start:start + cfg.batch_size]
            acc = zero_grads()
            for si in batch:
                stream, t_base = samples[si]
                frames = _encode_triplet_frames(stream, t_base, cfg, rng)
                oy, ch = _crop_bounds(rng, frames[0].shape[0], cfg.crop_height)
                ox, cw = _crop_bounds(rng, frames[0].shape[1], cfg.crop_width)
                x = _stack_frames([f[oy:oy + ch, ox:ox + cw] for f in frames])
                out, cache = forward(weights, x)
                hc, wc = out.desc_raw.shape[2], out.desc_raw.shape[3]
                if (hc, wc) not in mask_cache:
                    mask_cache[(hc, wc)] = correspondence_mask((hc, wc), cfg.hinge)
                units, norms = zip(*(l2_normalize_cells(d) for d in out.desc_raw))
                loss, gunits = descriptor_loss(
                    units, mask_cache[(hc, wc)], cfg.loss_weights, cfg.hinge
                )
                graw = np.stack(
                    [
                        l2_normalize_backward(u, n, gu)
                        for u, n, gu in zip(units, norms, gunits)
                    ]
                ).astype(np.float32)
                grads = backward(weights, cache, None, graw)
                accumulate_grads(acc, grads, 1.0 / len(batch))
                total += loss
            weights = sgd_step(weights, acc, cfg.lr)
        history.append(total / len(samples))
    return TrainResult(weights, history)
