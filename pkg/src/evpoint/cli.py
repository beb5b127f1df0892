"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 data error. Every randomized
command takes --seed and is reproducible; --threads (or the
EVPOINT_THREADS variable) caps internal parallelism without changing
results.
"""

from __future__ import annotations

import argparse
import dataclasses
import sys
import time

import numpy as np

from . import io as eio
from .events import TemporalWindow, centered_window
from .evaluation import disparity_precision, iou_matching_score, reprojection_eval
from .features import FeaturePipeline, match as match_features
from .geometry import DegenerateGeometryError
from .network import forward, frame_to_tensor, init_weights
from .representation import (
    Representation,
    encode_tencode,
    encode_window,
    to_grayscale,
)
from .selfsup import focal_loss, hinge_loss, train_detector, train_descriptor
from .synth import generate


class _Parser(argparse.ArgumentParser):
    """argparse that exits 1 (not 2) on usage errors, per the contract."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _sigma_list(text: str) -> list[float]:
    try:
        values = [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad sigma list {text!r}")
    if not values:
        raise argparse.ArgumentTypeError("empty sigma list")
    return values


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="evpoint", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="generate a synthetic event stream")
    p.add_argument("--config", help="config file with a [scene] section")
    p.add_argument("--out", default="events.evs")
    p.add_argument("--seed", type=int, help="overrides the scene seed")
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("encode", help="encode one time window as a frame")
    p.add_argument("--events", required=True)
    p.add_argument("--t-base", type=int, required=True, help="window center, us")
    p.add_argument("--dt", type=int, required=True, help="window length, us")
    p.add_argument("--rep", default="tencode",
                   choices=[r.value for r in Representation])
    p.add_argument("--out", help="default frame.ppm / frame.pgm by --rep")
    p.set_defaults(func=_cmd_encode)

    p = sub.add_parser("train-detector", help="stage-one training")
    p.add_argument("--events", required=True, nargs="+")
    p.add_argument("--config")
    p.add_argument("--out", default="weights.epw")
    p.add_argument("--init", help="warm-start weight file")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--samples", type=int, default=8, help="windows per stream")
    p.add_argument("--threads", type=int)
    p.set_defaults(func=_cmd_train_detector)

    p = sub.add_parser("train-descriptor", help="stage-two training")
    p.add_argument("--events", required=True, nargs="+")
    p.add_argument("--config")
    p.add_argument("--weights", required=True, help="stage-one weights")
    p.add_argument("--out", default="weights-desc.epw")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--samples", type=int, default=8)
    p.add_argument("--threads", type=int)
    p.set_defaults(func=_cmd_train_descriptor)

    p = sub.add_parser("detect", help="extract features from one frame")
    p.add_argument("--weights", required=True)
    p.add_argument("--frame", required=True)
    p.add_argument("--tau", type=float, default=0.015)
    p.add_argument("--nms", type=float, default=4.0)
    p.add_argument("--max-count", type=int)
    p.add_argument("--out", default="features.epf")
    p.set_defaults(func=_cmd_detect)

    p = sub.add_parser("match", help="match two feature files")
    p.add_argument("--a", required=True)
    p.add_argument("--b", required=True)
    p.add_argument("--mode", default="mutual", choices=["nn", "mutual"])
    p.add_argument("--ratio", type=float)
    p.add_argument("--out", default="matches.csv")
    p.set_defaults(func=_cmd_match)

    p = sub.add_parser("eval-reproj", help="homography reprojection error")
    p.add_argument("--events", required=True)
    p.add_argument("--t1", type=int, required=True)
    p.add_argument("--t2", type=int, required=True)
    p.add_argument("--dt", type=int, default=10_000)
    p.add_argument("--weights", required=True)
    p.add_argument("--mask", help="planar mask as PGM, nonzero = on-plane")
    p.add_argument("--rep", default="tencode",
                   choices=[r.value for r in Representation])
    p.add_argument("--tau", type=float, default=0.015)
    p.add_argument("--nms", type=float, default=4.0)
    p.add_argument("--ransac-threshold", type=float, default=2.0)
    p.add_argument("--ransac-iters", type=int, default=2000)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_eval_reproj)

    p = sub.add_parser("eval-disparity", help="stereo matching precision")
    p.add_argument("--matches", required=True)
    p.add_argument("--disparity", required=True)
    p.add_argument("--sigma", type=_sigma_list, default=[3.0, 6.0, 9.0],
                   help="comma-separated pixel tolerances")
    p.set_defaults(func=_cmd_eval_disparity)

    p = sub.add_parser("eval-iou", help="mask-membership matching score")
    p.add_argument("--matches", required=True)
    p.add_argument("--mask-a", required=True)
    p.add_argument("--mask-b", required=True)
    p.set_defaults(func=_cmd_eval_iou)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_gradcheck)

    p = sub.add_parser("bench", help="encoder + forward throughput")
    p.add_argument("--frame", required=True)
    p.add_argument("--iters", type=int, default=10)
    p.add_argument("--weights", help="random init when omitted")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_bench)

    return parser


# ---------------------------------------------------------------------------
# commands


def _cmd_synth(args) -> int:
    cfg = eio.load_config(args.config).scene if args.config else eio.ConfigBundle().scene
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    seq = generate(cfg)
    eio.write_events(args.out, seq.events)
    print(f"{args.out}: {len(seq.events)} events, "
          f"{cfg.width}x{cfg.height}, {cfg.duration_us} us")
    return 0


def _cmd_encode(args) -> int:
    stream = eio.read_events(args.events)
    rep = Representation(args.rep)
    window = centered_window(args.t_base, args.dt)
    if rep is Representation.TENCODE:
        # full-color output; the grayscale path is for the network input
        sub = stream.slice(window)
        t_max = sub.latest_timestamp(window)
        frame = encode_tencode(
            sub, window.t_end if t_max is None else t_max, window.dt
        )
        out = args.out or "frame.ppm"
    else:
        frame = encode_window(stream, window, rep)
        out = args.out or "frame.pgm"
    eio.write_frame(out, frame)
    print(f"{out}: {frame.shape[1]}x{frame.shape[0]}")
    return 0


def _dataset_from_files(paths, triplet_cfg, per_file: int, rng):
    """Evenly spaced window centers inside each stream's usable span."""
    dataset = []
    margin = triplet_cfg.dt_h_range[1]
    for path in paths:
        stream = eio.read_events(path)
        if len(stream) == 0:
            raise eio.FormatError(f"{path}: empty stream")
        t_last = int(stream.t[-1])
        lo, hi = margin, t_last - margin // 2
        if hi < lo:
            raise eio.FormatError(f"{path}: stream too short for the windows")
        for t_base in np.linspace(lo, hi, per_file):
            dataset.append((stream, int(t_base)))
    return dataset


def _cmd_train_detector(args) -> int:
    bundle = eio.load_config(args.config) if args.config else eio.ConfigBundle()
    rng = np.random.default_rng(args.seed)
    dataset = _dataset_from_files(args.events, bundle.train.triplet,
                                  args.samples, rng)
    init = eio.load_weights(args.init) if args.init else None
    result = train_detector(dataset, bundle.train, rng, init=init,
                            threads=args.threads)
    eio.save_weights(args.out, result.weights)
    losses = ",".join(f"{v:.6f}" for v in result.epoch_losses)
    print(f"{args.out}: detector trained, epoch losses [{losses}]")
    return 0


def _cmd_train_descriptor(args) -> int:
    bundle = eio.load_config(args.config) if args.config else eio.ConfigBundle()
    rng = np.random.default_rng(args.seed)
    dataset = _dataset_from_files(args.events, bundle.train.triplet,
                                  args.samples, rng)
    base = eio.load_weights(args.weights)
    result = train_descriptor(dataset, bundle.train, base, rng,
                              threads=args.threads)
    eio.save_weights(args.out, result.weights)
    losses = ",".join(f"{v:.6f}" for v in result.epoch_losses)
    print(f"{args.out}: descriptor trained, epoch losses [{losses}]")
    return 0


def _load_gray(path) -> np.ndarray:
    frame = eio.read_frame(path)
    return to_grayscale(frame) if frame.ndim == 3 else frame


def _cmd_detect(args) -> int:
    weights = eio.load_weights(args.weights)
    frame = _load_gray(args.frame)
    pipeline = FeaturePipeline(weights, args.tau, args.nms, args.max_count)
    feats = pipeline.features(frame)
    eio.write_features(args.out, feats)
    print(f"{args.out}: {len(feats)} keypoints")
    return 0


def _cmd_match(args) -> int:
    fa = eio.read_features(args.a)
    fb = eio.read_features(args.b)
    mode = "mutual_nn" if args.mode == "mutual" else "nn"
    matches = match_features(fa, fb, mode=mode, ratio=args.ratio)
    eio.write_matches(args.out, matches)
    print(f"{args.out}: {len(matches)} matches")
    return 0


def _cmd_eval_reproj(args) -> int:
    stream = eio.read_events(args.events)
    weights = eio.load_weights(args.weights)
    pipeline = FeaturePipeline(weights, args.tau, args.nms)
    mask = None
    if args.mask:
        mask = eio.read_frame(args.mask)
        if mask.ndim == 3:
            raise eio.FormatError("planar mask must be single-channel")
        mask = mask > 0
    err = reprojection_eval(
        stream, args.t1, args.t2, pipeline, dt=args.dt, planar_mask=mask,
        representation=Representation(args.rep),
        ransac_threshold=args.ransac_threshold,
        ransac_iters=args.ransac_iters,
        rng=np.random.default_rng(args.seed),
    )
    print("reprojection_error_px: " + ("none" if err is None else f"{err:.6f}"))
    return 0


def _cmd_eval_disparity(args) -> int:
    matches = eio.read_matches(args.matches)
    dmap = eio.read_disparity(args.disparity)
    for sigma in args.sigma:
        p = disparity_precision(matches, dmap, sigma)
        print(f"precision@{sigma:g}: " + ("none" if p is None else f"{p:.6f}"))
    return 0


def _cmd_eval_iou(args) -> int:
    matches = eio.read_matches(args.matches)
    mask_a = _load_gray(args.mask_a) > 0
    mask_b = _load_gray(args.mask_b) > 0
    score = iou_matching_score(matches, mask_a, mask_b)
    print("iou_score: " + ("none" if score is None else f"{score:.6f}"))
    return 0


# ---------------------------------------------------------------------------
# gradcheck


def _fd_check(f, x: np.ndarray, grad: np.ndarray, coords, h: float) -> float:
    """Max relative error of central differences against grad at coords."""
    worst = 0.0
    for c in coords:
        orig = x[c]
        x[c] = orig + h
        hi = f()
        x[c] = orig - h
        lo = f()
        x[c] = orig
        fd = (hi - lo) / (2.0 * h)
        denom = max(abs(fd), abs(grad[c]), 1e-8)
        worst = max(worst, abs(fd - grad[c]) / denom)
    return worst


def _gradcheck_focal(rng) -> float:
    from .selfsup import FocalParams
    from .network import softmax_channels

    z = rng.normal(size=(65, 3, 4))
    label = np.zeros_like(z)
    label[rng.integers(0, 65, size=12).reshape(3, 4),
          np.arange(3)[:, None], np.arange(4)[None, :]] = 1.0
    fp = FocalParams()
    _, grad = focal_loss(softmax_channels(z, axis=0), label, fp)
    coords = [tuple(rng.integers(0, s) for s in z.shape) for _ in range(24)]
    return _fd_check(
        lambda: focal_loss(softmax_channels(z, axis=0), label, fp)[0],
        z, grad, coords, 1e-6,
    )


def _gradcheck_hinge(rng) -> float:
    from .selfsup import HingeParams, correspondence_mask

    c, hc, wc = 16, 3, 4
    d1 = rng.normal(size=(c, hc, wc))
    d2 = rng.normal(size=(c, hc, wc))
    for d in (d1, d2):
        d /= np.sqrt((d * d).sum(axis=0, keepdims=True))
    hp = HingeParams(epsilon=12.0)
    s = correspondence_mask((hc, wc), hp)
    _, g1, g2 = hinge_loss(d1, d2, s, hp)
    coords = [tuple(rng.integers(0, n) for n in d1.shape) for _ in range(24)]
    err1 = _fd_check(lambda: hinge_loss(d1, d2, s, hp)[0], d1, g1, coords, 1e-6)
    err2 = _fd_check(lambda: hinge_loss(d1, d2, s, hp)[0], d2, g2, coords, 1e-6)
    return max(err1, err2)


def _gradcheck_network(rng) -> float:
    from .network import ConvParams, WeightSet, backward

    # double precision runs the same code path with usable FD headroom
    w32 = init_weights(rng)
    weights = WeightSet({
        n: ConvParams(p.w.astype(np.float64), p.b.astype(np.float64))
        for n, p in w32.items()
    })
    x = rng.uniform(0.0, 1.0, size=(1, 1, 16, 16))
    out, cache = forward(weights, x)
    gs = rng.normal(size=out.semi.shape)
    gd = rng.normal(size=out.desc_raw.shape)
    grads = backward(weights, cache, gs, gd)

    def loss() -> float:
        o, _ = forward(weights, x)
        return float((o.semi * gs).sum() + (o.desc_raw * gd).sum())

    worst = 0.0
    for name, _params in weights.items():
        w = weights[name].w
        g = grads[name].w
        flat = rng.choice(w.size, size=4, replace=False)
        coords = [np.unravel_index(i, w.shape) for i in flat]
        worst = max(worst, _fd_check(loss, w, g, coords, 1e-6))
    return worst


def _cmd_gradcheck(args) -> int:
    rng = np.random.default_rng(args.seed)
    checks = [
        ("focal_loss", _gradcheck_focal(rng), 1e-3),
        ("hinge_loss", _gradcheck_hinge(rng), 1e-3),
        ("network_backward", _gradcheck_network(rng), 1e-3),
    ]
    failed = False
    for name, err, tol in checks:
        ok = err < tol
        failed |= not ok
        print(f"{name}: max_rel_err={err:.2e} tol={tol:.0e} "
              f"{'PASS' if ok else 'FAIL'}")
    return 2 if failed else 0


def _cmd_bench(args) -> int:
    frame = _load_gray(args.frame)
    weights = (eio.load_weights(args.weights) if args.weights
               else init_weights(np.random.default_rng(args.seed)))
    x = frame_to_tensor(frame)
    forward(weights, x)  # warm-up
    start = time.perf_counter()
    for _ in range(args.iters):
        x = frame_to_tensor(frame)
        forward(weights, x)
    elapsed = time.perf_counter() - start
    per = elapsed / max(args.iters, 1)
    print(f"forward: {per * 1e3:.2f} ms/frame ({1.0 / per:.1f} fps) "
          f"over {args.iters} iters at {frame.shape[1]}x{frame.shape[0]}")
    return 0


def run(argv) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except (eio.FormatError, DegenerateGeometryError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run(sys.argv[1:]))


if __name__ == "__main__":
    main()
