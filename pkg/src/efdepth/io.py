"""On-disk formats: event text files, PGM frames, depth rasters, dataset dirs.

Dataset layout, one directory per sequence:

    <root>/<seq>/frames/%06d.pgm      8-bit binary PGM, scaled to [0,1] on load
    <root>/<seq>/events.csv           "t,x,y,p" per line, t ascending, '#' comments
    <root>/<seq>/depth/%06d.f32       little-endian float32, row-major
    <root>/<seq>/depth/%06d.json      {width, height, space, alpha, d_max}
    <root>/<seq>/meta.json            {resolution, frame_period_us, alpha, d_max, threshold_C}
"""

from __future__ import annotations

import json
import os
from typing import Iterable

import numpy as np

from .errors import DataError
from .events import EventStream, make_stream
from .objectives import DepthRaster


# -- event text format ------------------------------------------------------


def load_events(path) -> EventStream:
    """Parse 't,x,y,p' lines; reject malformed input with line numbers."""
    ts, xs, ys, ps = [], [], [], []
    with open(path, "r") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split(",")
            if len(parts) != 4:
                raise DataError(f"{path}:{lineno}: expected 4 comma-separated fields")
            try:
                t, x, y, p = (int(v) for v in parts)
            except ValueError:
                raise DataError(f"{path}:{lineno}: non-integer field") from None
            if p not in (-1, 1):
                raise DataError(f"{path}:{lineno}: polarity must be -1 or 1, got {p}")
            if t < 0 or x < 0 or y < 0:
                raise DataError(f"{path}:{lineno}: negative value")
            if ts and t < ts[-1]:
                raise DataError(f"{path}:{lineno}: timestamps not ascending")
            ts.append(t)
            xs.append(x)
            ys.append(y)
            ps.append(p)
    return make_stream(ts, xs, ys, ps)


def save_events(path, stream: EventStream) -> None:
    with open(path, "w") as f:
        f.write("# t,x,y,p\n")
        for i in range(len(stream)):
            f.write(f"{stream.t[i]},{stream.x[i]},{stream.y[i]},{stream.p[i]}\n")


# -- PGM frames -------------------------------------------------------------


def read_pgm(path) -> np.ndarray:
    """Binary 8-bit PGM (P5) -> float64 image in [0,1]."""
    with open(path, "rb") as f:
        blob = f.read()
    if not blob.startswith(b"P5"):
        raise DataError(f"{path}: not a binary PGM (P5) file")
    # header: magic, width, height, maxval as whitespace-separated tokens,
    # with '#' comments allowed between them
    tokens = []
    pos = 2
    while len(tokens) < 3:
        while pos < len(blob) and blob[pos : pos + 1].isspace():
            pos += 1
        if pos < len(blob) and blob[pos : pos + 1] == b"#":
            while pos < len(blob) and blob[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(blob) and not blob[pos : pos + 1].isspace():
            pos += 1
        tokens.append(blob[start:pos])
    pos += 1  # the single whitespace after maxval
    try:
        width, height, maxval = (int(t) for t in tokens)
    except ValueError:
        raise DataError(f"{path}: malformed PGM header") from None
    if maxval != 255:
        raise DataError(f"{path}: expected maxval 255, got {maxval}")
    if len(blob) - pos < width * height:
        raise DataError(f"{path}: truncated pixel data")
    data = np.frombuffer(blob, dtype=np.uint8, count=width * height, offset=pos)
    return data.reshape(height, width).astype(np.float64) / 255.0


def write_pgm(path, image: np.ndarray) -> None:
    """Float image in [0,1] -> binary 8-bit PGM."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2:
        raise DataError(f"expected a 2-d image, got shape {img.shape}")
    q = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    h, w = q.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(q.tobytes())


# -- depth rasters ----------------------------------------------------------


def save_depth_raster(path_f32, raster: DepthRaster) -> None:
    """Write <name>.f32 plus its JSON sidecar. Invalid pixels encode as NaN."""
    if raster.alpha is None or raster.d_max is None:
        raise DataError("raster must carry alpha and d_max for export")
    h, w = raster.data.shape
    data = raster.data.astype("<f4").copy()
    data[~raster.valid] = np.nan
    with open(path_f32, "wb") as f:
        f.write(data.tobytes())
    sidecar = {
        "width": int(w),
        "height": int(h),
        "space": raster.space,
        "alpha": float(raster.alpha),
        "d_max": float(raster.d_max),
    }
    with open(_sidecar_path(path_f32), "w") as f:
        json.dump(sidecar, f, indent=2)
        f.write("\n")


def _sidecar_path(path_f32) -> str:
    base, ext = os.path.splitext(str(path_f32))
    return base + ".json"


def load_depth_raster(path_f32) -> DepthRaster:
    with open(_sidecar_path(path_f32), "r") as f:
        sidecar = json.load(f)
    for key in ("width", "height", "space", "alpha", "d_max"):
        if key not in sidecar:
            raise DataError(f"{_sidecar_path(path_f32)}: missing key {key!r}")
    w, h = int(sidecar["width"]), int(sidecar["height"])
    raw = np.fromfile(path_f32, dtype="<f4")
    if raw.size != w * h:
        raise DataError(f"{path_f32}: expected {w * h} float32 values, found {raw.size}")
    data = raw.reshape(h, w).astype(np.float64)
    valid = np.isfinite(data)
    if sidecar["space"] == "meters":
        valid &= data > 0
    data[~valid] = 0.0
    return DepthRaster(
        data=data,
        valid=valid,
        space=str(sidecar["space"]),
        alpha=float(sidecar["alpha"]),
        d_max=float(sidecar["d_max"]),
    )


# -- dataset directories ----------------------------------------------------


def write_sequence_dir(
    seq_dir,
    frames: Iterable[np.ndarray],
    events: EventStream,
    depths: Iterable[DepthRaster],
    meta: dict,
) -> None:
    os.makedirs(os.path.join(seq_dir, "frames"), exist_ok=True)
    os.makedirs(os.path.join(seq_dir, "depth"), exist_ok=True)
    for k, frame in enumerate(frames):
        write_pgm(os.path.join(seq_dir, "frames", f"{k:06d}.pgm"), frame)
    save_events(os.path.join(seq_dir, "events.csv"), events)
    for k, raster in enumerate(depths):
        save_depth_raster(os.path.join(seq_dir, "depth", f"{k:06d}.f32"), raster)
    with open(os.path.join(seq_dir, "meta.json"), "w") as f:
        json.dump(meta, f, indent=2)
        f.write("\n")


def load_sequence_dir(seq_dir) -> dict:
    """Load one sequence directory -> {frames, events, depths, meta}."""
    meta_path = os.path.join(seq_dir, "meta.json")
    if not os.path.isfile(meta_path):
        raise DataError(f"{seq_dir}: missing meta.json")
    with open(meta_path) as f:
        meta = json.load(f)
    for key in ("resolution", "frame_period_us", "alpha", "d_max", "threshold_C"):
        if key not in meta:
            raise DataError(f"{meta_path}: missing key {key!r}")
    frame_dir = os.path.join(seq_dir, "frames")
    if not os.path.isdir(frame_dir):
        raise DataError(f"{seq_dir}: missing frames/ directory")
    frame_files = sorted(os.listdir(frame_dir))
    frames = np.stack([read_pgm(os.path.join(frame_dir, name)) for name in frame_files])
    events = load_events(os.path.join(seq_dir, "events.csv"))
    depth_dir = os.path.join(seq_dir, "depth")
    depth_files = sorted(n for n in os.listdir(depth_dir) if n.endswith(".f32"))
    if len(depth_files) != len(frame_files):
        raise DataError(
            f"{seq_dir}: {len(frame_files)} frames but {len(depth_files)} depth rasters"
        )
    depths = [load_depth_raster(os.path.join(depth_dir, name)) for name in depth_files]
    return {"frames": frames, "events": events, "depths": depths, "meta": meta}


def list_sequence_dirs(root) -> list[str]:
    if not os.path.isdir(root):
        raise DataError(f"dataset root {root} does not exist")
    seqs = sorted(
        os.path.join(root, name)
        for name in os.listdir(root)
        if os.path.isfile(os.path.join(root, name, "meta.json"))
    )
    if not seqs:
        raise DataError(f"dataset root {root} contains no sequence directories")
    return seqs


def convert_external_sequence(recording_path, out_seq_dir):
    """Placeholder for ingesting real recordings into the dataset layout.

    The intended mapping: decode the recording's frames to 8-bit grayscale
    PGM at the sensor resolution; dump the raw event stream as ascending
    't,x,y,p' text with t in integer microseconds; align dense depth to
    frames by nearest timestamp (frames, depth, and events are rarely
    synchronous on real rigs) and write one .f32 + .json raster per kept
    frame; record resolution, nominal frame period, the log-depth
    parameters, and the sensor contrast threshold in meta.json. Frames
    without a depth partner within half a frame period should be dropped
    and the drop count reported.
    """
    raise NotImplementedError("external dataset conversion is a documented stub")
