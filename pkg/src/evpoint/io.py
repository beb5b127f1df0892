"""Bit-exact file formats: event streams, frames, weights, features,
matches, disparity maps, label grids, and the text config.

All binary layouts are little-endian and uncompressed. Readers raise
FormatError on anything malformed instead of crashing or returning
partial data.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .events import EventStream, TripletConfig
from .evaluation import DisparityMap
from .features import FeatureSet
from .geometry import HomographySampleConfig, Match
from .network import DESC_DIM, LAYER_SPECS, ConvParams, WeightSet
from .representation import Representation
from .selfsup import (
    N_CHANNELS,
    FocalParams,
    HingeParams,
    LossWeights,
    TrainConfig,
)
from .synth import MotionParams, SceneConfig


class FormatError(Exception):
    """A file failed validation: bad magic, truncation, bad values."""


def _read_bytes(path) -> bytes:
    try:
        return Path(path).read_bytes()
    except OSError as exc:
        raise FormatError(f"cannot read {path}: {exc}") from exc


# ---------------------------------------------------------------------------
# event streams

EVENT_MAGIC = b"EVS1"
EVENT_VERSION = 1
_EVENT_HEADER = struct.Struct("<4sHHHQ")  # magic, version, width, height, count
_EVENT_RECORD = np.dtype(
    [("x", "<u2"), ("y", "<u2"), ("t", "<i8"), ("p", "<i1"), ("pad", "u1", 3)]
)


def write_events(path, stream: EventStream) -> None:
    """Write a stream; `.csv` paths get the text codec, others binary."""
    if str(path).endswith(".csv"):
        _write_events_csv(path, stream)
        return
    if stream.width > 0xFFFF or stream.height > 0xFFFF:
        raise FormatError("geometry exceeds the u16 header fields")
    rec = np.zeros(len(stream), dtype=_EVENT_RECORD)
    rec["x"], rec["y"], rec["t"], rec["p"] = stream.x, stream.y, stream.t, stream.p
    header = _EVENT_HEADER.pack(
        EVENT_MAGIC, EVENT_VERSION, stream.width, stream.height, len(stream)
    )
    Path(path).write_bytes(header + rec.tobytes())


def read_events(path) -> EventStream:
    """Read either codec back; the binary magic decides which."""
    raw = _read_bytes(path)
    if raw[:4] == EVENT_MAGIC:
        return _parse_events_binary(raw)
    if raw[:1] == b"#":
        return _parse_events_csv(raw)
    raise FormatError("not an event file: bad magic")


def _parse_events_binary(raw: bytes) -> EventStream:
    if len(raw) < _EVENT_HEADER.size:
        raise FormatError("truncated event header")
    magic, version, width, height, count = _EVENT_HEADER.unpack_from(raw)
    if version != EVENT_VERSION:
        raise FormatError(f"unsupported event file version {version}")
    if len(raw) != _EVENT_HEADER.size + count * _EVENT_RECORD.itemsize:
        raise FormatError("event payload length does not match header count")
    rec = np.frombuffer(raw, dtype=_EVENT_RECORD, offset=_EVENT_HEADER.size)
    return _checked_stream(width, height, rec["x"], rec["y"], rec["t"], rec["p"])


def _checked_stream(width, height, x, y, t, p) -> EventStream:
    x, y = np.asarray(x, np.int64), np.asarray(y, np.int64)
    t, p = np.asarray(t, np.int64), np.asarray(p, np.int64)
    if width <= 0 or height <= 0:
        raise FormatError("nonpositive geometry")
    if x.size and (x.min() < 0 or x.max() >= width or y.min() < 0 or y.max() >= height):
        raise FormatError("event coordinates outside the frame")
    if not np.isin(p, (-1, 1)).all():
        raise FormatError("polarity must be -1 or +1")
    if x.size > 1 and (np.diff(t) < 0).any():
        raise FormatError("timestamps out of order")
    return EventStream(int(width), int(height), x, y, t, p)


def _write_events_csv(path, stream: EventStream) -> None:
    lines = [f"# {stream.width},{stream.height}"]
    lines += [
        f"{x},{y},{t},{p}"
        for x, y, t, p in zip(stream.x, stream.y, stream.t, stream.p)
    ]
    Path(path).write_text("\n".join(lines) + "\n")


def _parse_events_csv(raw: bytes) -> EventStream:
    try:
        text = raw.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise FormatError("event CSV is not valid UTF-8") from exc
    lines = [ln.strip() for ln in text.splitlines() if ln.strip()]
    if not lines or not lines[0].startswith("#"):
        raise FormatError("event CSV must start with a '# width,height' line")
    try:
        width, height = (int(v) for v in lines[0][1:].split(","))
    except ValueError as exc:
        raise FormatError("bad geometry line in event CSV") from exc
    cols = [[], [], [], []]
    for ln in lines[1:]:
        parts = ln.split(",")
        if len(parts) != 4:
            raise FormatError(f"bad event line: {ln!r}")
        try:
            vals = [int(v) for v in parts]
        except ValueError as exc:
            raise FormatError(f"bad event line: {ln!r}") from exc
        for c, v in zip(cols, vals):
            c.append(v)
    return _checked_stream(width, height, *cols)


# ---------------------------------------------------------------------------
# frames (binary PPM/PGM)


def write_frame(path, frame: np.ndarray) -> None:
    """uint8 (H, W) as PGM P5, uint8 (H, W, 3) as PPM P6."""
    frame = np.asarray(frame)
    if frame.dtype != np.uint8:
        raise FormatError("frames are written as uint8")
    if frame.ndim == 2:
        magic = b"P5"
    elif frame.ndim == 3 and frame.shape[2] == 3:
        magic = b"P6"
    else:
        raise FormatError(f"unsupported frame shape {frame.shape}")
    h, w = frame.shape[:2]
    Path(path).write_bytes(magic + f"\n{w} {h}\n255\n".encode() + frame.tobytes())


def _netpbm_tokens(raw: bytes, n: int) -> tuple[list[int], int]:
    """First n whitespace/comment-delimited header tokens and the payload
    offset (one byte past the single whitespace ending the last token)."""
    tokens, i, cur = [], 0, b""
    while len(tokens) < n:
        if i >= len(raw):
            raise FormatError("truncated frame header")
        c = raw[i:i + 1]
        if c == b"#":
            while i < len(raw) and raw[i:i + 1] != b"\n":
                i += 1
        elif c.isspace():
            if cur:
                tokens.append(cur)
                cur = b""
                if len(tokens) == n:
                    return [_header_int(tk) for tk in tokens], i + 1
        else:
            cur += c
        i += 1
    raise FormatError("truncated frame header")


def _header_int(token: bytes) -> int:
    if not token.isdigit():
        raise FormatError(f"bad header token {token!r}")
    return int(token)


def read_frame(path) -> np.ndarray:
    raw = _read_bytes(path)
    if raw[:2] == b"P5":
        channels = 1
    elif raw[:2] == b"P6":
        channels = 3
    else:
        raise FormatError("not a P5/P6 frame file")
    (w, h, maxval), offset = _netpbm_tokens(raw[2:], 3)
    offset += 2
    if maxval != 255:
        raise FormatError(f"unsupported maxval {maxval}")
    if w <= 0 or h <= 0:
        raise FormatError("nonpositive frame geometry")
    payload = raw[offset:]
    if len(payload) != w * h * channels:
        raise FormatError("frame payload length mismatch")
    pixels = np.frombuffer(payload, dtype=np.uint8)
    return pixels.reshape((h, w) if channels == 1 else (h, w, 3)).copy()


# ---------------------------------------------------------------------------
# network weights

WEIGHT_MAGIC = b"EPW1"
WEIGHT_VERSION = 1
_WEIGHT_HEADER = struct.Struct("<4sHH")  # magic, version, record count


def save_weights(path, weights: WeightSet) -> None:
    """Kernel and bias records per layer; biases stored as (cout,1,1,1)."""
    records = []
    for name, params in weights.items():
        records.append((f"{name}.weight", params.w))
        records.append((f"{name}.bias", params.b.reshape(-1, 1, 1, 1)))
    blob = [_WEIGHT_HEADER.pack(WEIGHT_MAGIC, WEIGHT_VERSION, len(records))]
    for name, arr in records:
        encoded = name.encode("utf-8")
        blob.append(struct.pack("<H", len(encoded)))
        blob.append(encoded)
        blob.append(struct.pack("<4I", *arr.shape))
        blob.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(blob))


def load_weights(path) -> WeightSet:
    raw = _read_bytes(path)
    if raw[:4] != WEIGHT_MAGIC:
        raise FormatError("not a weight file: bad magic")
    if len(raw) < _WEIGHT_HEADER.size:
        raise FormatError("truncated weight header")
    _, version, n_records = _WEIGHT_HEADER.unpack_from(raw)
    if version != WEIGHT_VERSION:
        raise FormatError(f"unsupported weight file version {version}")
    offset = _WEIGHT_HEADER.size
    arrays: dict[str, np.ndarray] = {}
    for _ in range(n_records):
        try:
            (name_len,) = struct.unpack_from("<H", raw, offset)
            offset += 2
            name = raw[offset:offset + name_len].decode("utf-8")
            if len(raw) < offset + name_len:
                raise FormatError("truncated weight record name")
            offset += name_len
            shape = struct.unpack_from("<4I", raw, offset)
            offset += 16
            # Python-int product: a numpy prod would wrap on adversarial
            # u32 dims and sneak past the length check below.
            size = math.prod(shape)
            end = offset + 4 * size
            if end > len(raw):
                raise FormatError("truncated weight payload")
            arr = np.frombuffer(raw[offset:end], dtype="<f4").reshape(shape)
            offset = end
        except (struct.error, UnicodeDecodeError) as exc:
            raise FormatError("malformed weight record") from exc
        if name in arrays:
            raise FormatError(f"duplicate weight record {name!r}")
        arrays[name] = arr
    if offset != len(raw):
        raise FormatError("trailing bytes after weight records")
    return _weights_from_records(arrays)


def _weights_from_records(arrays: dict[str, np.ndarray]) -> WeightSet:
    layers = {}
    for name, cin, cout, k in LAYER_SPECS:
        for suffix, want in ((".weight", (cout, cin, k, k)), (".bias", (cout, 1, 1, 1))):
            key = name + suffix
            if key not in arrays:
                raise FormatError(f"missing record {key!r}")
            if arrays[key].shape != want:
                raise FormatError(
                    f"layer {name}: {suffix[1:]} shape {arrays[key].shape}, "
                    f"expected {want}"
                )
        layers[name] = ConvParams(
            arrays[name + ".weight"].astype(np.float32),
            arrays[name + ".bias"].reshape(-1).astype(np.float32),
        )
    known = {f"{n}{s}" for n, *_ in LAYER_SPECS for s in (".weight", ".bias")}
    extra = set(arrays) - known
    if extra:
        raise FormatError(f"unknown weight records {sorted(extra)}")
    try:
        return WeightSet(layers)
    except ValueError as exc:
        raise FormatError(str(exc)) from exc


# ---------------------------------------------------------------------------
# feature sets

FEATURE_MAGIC = b"EPF1"
FEATURE_VERSION = 1
_FEATURE_HEADER = struct.Struct("<4sHHHIH")  # magic, ver, w, h, count, dim


def write_features(path, feats: FeatureSet) -> None:
    header = _FEATURE_HEADER.pack(
        FEATURE_MAGIC, FEATURE_VERSION, feats.width, feats.height,
        len(feats), feats.descriptors.shape[1] if len(feats) else DESC_DIM,
    )
    body = (
        np.ascontiguousarray(feats.points, "<f8").tobytes()
        + np.ascontiguousarray(feats.scores, "<f8").tobytes()
        + np.ascontiguousarray(feats.descriptors, "<f4").tobytes()
    )
    Path(path).write_bytes(header + body)


def read_features(path) -> FeatureSet:
    raw = _read_bytes(path)
    if raw[:4] != FEATURE_MAGIC:
        raise FormatError("not a feature file: bad magic")
    if len(raw) < _FEATURE_HEADER.size:
        raise FormatError("truncated feature header")
    _, version, w, h, count, dim = _FEATURE_HEADER.unpack_from(raw)
    if version != FEATURE_VERSION:
        raise FormatError(f"unsupported feature file version {version}")
    want = _FEATURE_HEADER.size + count * (16 + 8 + 4 * dim)
    if len(raw) != want:
        raise FormatError("feature payload length mismatch")
    o = _FEATURE_HEADER.size
    pts = np.frombuffer(raw, "<f8", count * 2, o).reshape(count, 2).copy()
    o += 16 * count
    scores = np.frombuffer(raw, "<f8", count, o).copy()
    o += 8 * count
    desc = np.frombuffer(raw, "<f4", count * dim, o).reshape(count, dim).copy()
    try:
        return FeatureSet(pts, scores, desc, w, h)
    except ValueError as exc:
        raise FormatError(str(exc)) from exc


# ---------------------------------------------------------------------------
# matches (text)


def write_matches(path, matches) -> None:
    lines = ["# xa,ya,xb,yb,score"]
    lines += [
        f"{float(m.a[0])!r},{float(m.a[1])!r},"
        f"{float(m.b[0])!r},{float(m.b[1])!r},{float(m.score)!r}"
        for m in matches
    ]
    Path(path).write_text("\n".join(lines) + "\n")


def read_matches(path) -> list[Match]:
    raw = _read_bytes(path)
    try:
        text = raw.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise FormatError("match file is not valid UTF-8") from exc
    out = []
    for ln in text.splitlines():
        ln = ln.strip()
        if not ln or ln.startswith("#"):
            continue
        parts = ln.split(",")
        if len(parts) != 5:
            raise FormatError(f"bad match line: {ln!r}")
        try:
            xa, ya, xb, yb, score = (float(v) for v in parts)
        except ValueError as exc:
            raise FormatError(f"bad match line: {ln!r}") from exc
        out.append(Match(a=(xa, ya), b=(xb, yb), score=score))
    return out


# ---------------------------------------------------------------------------
# disparity maps

DISPARITY_MAGIC = b"EPD1"
DISPARITY_VERSION = 1
_DISPARITY_HEADER = struct.Struct("<4sHHH")  # magic, version, width, height


def write_disparity(path, dmap: DisparityMap) -> None:
    values = np.where(dmap.valid, dmap.values, np.nan).astype("<f4")
    h, w = values.shape
    header = _DISPARITY_HEADER.pack(DISPARITY_MAGIC, DISPARITY_VERSION, w, h)
    Path(path).write_bytes(header + np.ascontiguousarray(values).tobytes())


def read_disparity(path) -> DisparityMap:
    raw = _read_bytes(path)
    if raw[:4] != DISPARITY_MAGIC:
        raise FormatError("not a disparity file: bad magic")
    if len(raw) < _DISPARITY_HEADER.size:
        raise FormatError("truncated disparity header")
    _, version, w, h = _DISPARITY_HEADER.unpack_from(raw)
    if version != DISPARITY_VERSION:
        raise FormatError(f"unsupported disparity file version {version}")
    if len(raw) != _DISPARITY_HEADER.size + 4 * w * h:
        raise FormatError("disparity payload length mismatch")
    values = (
        np.frombuffer(raw, "<f4", w * h, _DISPARITY_HEADER.size)
        .reshape(h, w).astype(np.float64)
    )
    valid = np.isfinite(values)
    if values[valid].size and values[valid].min() < 0:
        raise FormatError("negative disparity values")
    return DisparityMap(values=values, valid=valid)


# ---------------------------------------------------------------------------
# label grids

LABEL_MAGIC = b"EPL1"
LABEL_VERSION = 1
_LABEL_HEADER = struct.Struct("<4sHHH")  # magic, version, hc, wc


def write_labels(path, labels: np.ndarray) -> None:
    if labels.ndim != 3 or labels.shape[0] != N_CHANNELS:
        raise FormatError(f"labels must be ({N_CHANNELS}, Hc, Wc)")
    _, hc, wc = labels.shape
    header = _LABEL_HEADER.pack(LABEL_MAGIC, LABEL_VERSION, hc, wc)
    Path(path).write_bytes(
        header + np.ascontiguousarray(labels, "<f4").tobytes()
    )


def read_labels(path) -> np.ndarray:
    raw = _read_bytes(path)
    if raw[:4] != LABEL_MAGIC:
        raise FormatError("not a label file: bad magic")
    if len(raw) < _LABEL_HEADER.size:
        raise FormatError("truncated label header")
    _, version, hc, wc = _LABEL_HEADER.unpack_from(raw)
    if version != LABEL_VERSION:
        raise FormatError(f"unsupported label file version {version}")
    if len(raw) != _LABEL_HEADER.size + 4 * N_CHANNELS * hc * wc:
        raise FormatError("label payload length mismatch")
    labels = (
        np.frombuffer(raw, "<f4", N_CHANNELS * hc * wc, _LABEL_HEADER.size)
        .reshape(N_CHANNELS, hc, wc).copy()
    )
    if not ((labels == 0) | (labels == 1)).all():
        raise FormatError("labels must be binary")
    if not (labels.sum(axis=0) == 1).all():
        raise FormatError("labels must be one-hot per cell")
    return labels


# ---------------------------------------------------------------------------
# config text


@dataclass(frozen=True)
class EvalConfig:
    """Detection and model-fitting settings for the evaluation commands."""

    tau: float = 0.015
    nms_radius: float = 4.0
    max_count: int | None = None
    dt: int = 10_000
    ransac_threshold: float = 2.0
    ransac_iters: int = 2000


@dataclass
class ConfigBundle:
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    scene: SceneConfig = field(default_factory=SceneConfig)


def _parse_scalar(text: str, kind):
    try:
        if kind is int:
            return int(text)
        if kind is float:
            return float(text)
    except ValueError as exc:
        raise FormatError(f"bad numeric value {text!r}") from exc
    return text


_TRAINING_KEYS = {
    "lr": float, "batch_size": int, "epochs": int, "n_homographies": int,
    "crop_width": int, "crop_height": int, "representation": str,
    "alpha": float, "gamma": float, "tau_train": float,
    "lambda": float, "m_p": float, "m_n": float, "epsilon": float,
    "lambda_side": str, "w_h": float, "w_m": float, "w_l": float,
    "dt_l": int, "dt_m_min": int, "dt_m_max": int,
    "dt_h_min": int, "dt_h_max": int,
}
_HOMOGRAPHY_KEYS = {
    "max_translation": float, "max_rotation": float,
    "scale_min": float, "scale_max": float, "max_perspective": float,
}
_EVAL_KEYS = {
    "tau": float, "nms_radius": float, "max_count": int, "dt": int,
    "ransac_threshold": float, "ransac_iters": int,
}
_SCENE_KEYS = {
    "width": int, "height": int, "pattern": str, "duration": int,
    "contrast": float, "step": int, "noise": float, "seed": int,
    "dx": float, "dy": float, "angle": float, "scale": float,
    "px": float, "py": float,
}
_SECTIONS = {
    "training": _TRAINING_KEYS, "homography": _HOMOGRAPHY_KEYS,
    "eval": _EVAL_KEYS, "scene": _SCENE_KEYS,
}


def load_config(path) -> ConfigBundle:
    """Parse `key = value` lines under [training]/[homography]/[eval]/[scene].

    Keys before any section header count as [training]. Unknown sections
    and unknown keys are errors; an empty file yields every default.
    """
    raw = _read_bytes(path)
    try:
        text = raw.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise FormatError("config is not valid UTF-8") from exc

    section = "training"
    values: dict[str, dict[str, object]] = {name: {} for name in _SECTIONS}
    for lineno, ln in enumerate(text.splitlines(), start=1):
        ln = ln.strip()
        if not ln or ln.startswith("#"):
            continue
        if ln.startswith("[") and ln.endswith("]"):
            section = ln[1:-1].strip()
            if section not in _SECTIONS:
                raise FormatError(f"line {lineno}: unknown section [{section}]")
            continue
        if "=" not in ln:
            raise FormatError(f"line {lineno}: expected key = value")
        key, _, val = ln.partition("=")
        key, val = key.strip(), val.strip()
        keys = _SECTIONS[section]
        if key not in keys:
            raise FormatError(f"line {lineno}: unknown key {key!r} in [{section}]")
        values[section][key] = _parse_scalar(val, keys[key])
    return _assemble_config(values)


def _assemble_config(values: dict[str, dict[str, object]]) -> ConfigBundle:
    tr, ho, ev, sc = (values[s] for s in ("training", "homography", "eval", "scene"))
    try:
        focal = FocalParams(
            alpha=tr.get("alpha", 0.75),
            gamma=tr.get("gamma", 2.0),
            tau_train=tr.get("tau_train", 0.005),
        )
        hinge = HingeParams(
            lam=tr.get("lambda", 0.001),
            m_p=tr.get("m_p", 1.0),
            m_n=tr.get("m_n", 0.2),
            epsilon=tr.get("epsilon", 8.0),
            lambda_side=tr.get("lambda_side", "positive"),
        )
        weights = LossWeights(
            w_h=tr.get("w_h", 0.5), w_m=tr.get("w_m", 0.5), w_l=tr.get("w_l", 1.0)
        )
        base_triplet = TripletConfig()
        triplet = TripletConfig(
            dt_l=tr.get("dt_l", base_triplet.dt_l),
            dt_m_range=(
                tr.get("dt_m_min", base_triplet.dt_m_range[0]),
                tr.get("dt_m_max", base_triplet.dt_m_range[1]),
            ),
            dt_h_range=(
                tr.get("dt_h_min", base_triplet.dt_h_range[0]),
                tr.get("dt_h_max", base_triplet.dt_h_range[1]),
            ),
        )
        base_adapt = HomographySampleConfig(width=64, height=64)
        adaptation = replace(
            base_adapt,
            max_translation=ho.get("max_translation", base_adapt.max_translation),
            max_rotation=ho.get("max_rotation", base_adapt.max_rotation),
            scale_range=(
                ho.get("scale_min", base_adapt.scale_range[0]),
                ho.get("scale_max", base_adapt.scale_range[1]),
            ),
            max_perspective=ho.get("max_perspective", base_adapt.max_perspective),
        )
        train = TrainConfig(
            lr=tr.get("lr", 0.001),
            batch_size=tr.get("batch_size", 8),
            epochs=tr.get("epochs", 10),
            n_homographies=tr.get("n_homographies", 32),
            crop_width=tr.get("crop_width", 320),
            crop_height=tr.get("crop_height", 240),
            representation=Representation(tr.get("representation", "tencode")),
            focal=focal,
            hinge=hinge,
            loss_weights=weights,
            triplet=triplet,
            adaptation=adaptation,
        )
        eval_cfg = EvalConfig(
            tau=ev.get("tau", 0.015),
            nms_radius=ev.get("nms_radius", 4.0),
            max_count=ev.get("max_count", None),
            dt=ev.get("dt", 10_000),
            ransac_threshold=ev.get("ransac_threshold", 2.0),
            ransac_iters=ev.get("ransac_iters", 2000),
        )
        base_scene = SceneConfig()
        end = MotionParams(
            dx=sc.get("dx", base_scene.motion_end.dx),
            dy=sc.get("dy", base_scene.motion_end.dy),
            angle=sc.get("angle", base_scene.motion_end.angle),
            scale=sc.get("scale", base_scene.motion_end.scale),
            px=sc.get("px", base_scene.motion_end.px),
            py=sc.get("py", base_scene.motion_end.py),
        )
        scene = SceneConfig(
            width=sc.get("width", base_scene.width),
            height=sc.get("height", base_scene.height),
            pattern=sc.get("pattern", base_scene.pattern),
            motion_end=end,
            duration_us=sc.get("duration", base_scene.duration_us),
            contrast=sc.get("contrast", base_scene.contrast),
            step_us=sc.get("step", base_scene.step_us),
            noise_rate=sc.get("noise", base_scene.noise_rate),
            seed=sc.get("seed", base_scene.seed),
        )
    except ValueError as exc:
        raise FormatError(f"bad config value: {exc}") from exc
    return ConfigBundle(train=train, eval=eval_cfg, scene=scene)
