"""Motion intensity: dense Farneback flow, clip-level intensity, quantised
levels, the intensity embedding, and fusion with the text tokens."""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
from scipy import ndimage

from . import numcore as nc
from .errors import ConfigError, FormatError, InputError, StorageError

LUMA = np.array([0.299, 0.587, 0.114])
FUSION_MODES = ("token_concat", "global_add", "text_word", "none")


@dataclass(frozen=True)
class FlowParams:
    pyr_scale: float = 0.5
    levels: int = 3
    winsize: int = 15
    iterations: int = 3
    poly_n: int = 5
    poly_sigma: float = 1.1


def to_gray(frames: np.ndarray) -> np.ndarray:
    frames = np.asarray(frames, dtype=np.float64)
    return frames @ LUMA if frames.shape[-1] == 3 else frames


# -- Farneback --------------------------------------------------------------

def _poly_basis(n: int, sigma: float):
    x = np.arange(-n, n + 1, dtype=np.float64)
    g = np.exp(-x * x / (2 * sigma * sigma))
    g /= g.sum()
    # weighted normal matrix for the basis (1, x, y, x^2, y^2, xy)
    yy, xx = np.meshgrid(x, x, indexing="ij")
    basis = np.stack([np.ones_like(xx), xx, yy, xx * xx, yy * yy, xx * yy]).reshape(6, -1)
    w = np.outer(g, g).reshape(-1)
    gram = (basis * w) @ basis.T
    return x, g, np.linalg.inv(gram)


def poly_expand(img: np.ndarray, n: int, sigma: float) -> np.ndarray:
    """Per-pixel quadratic fit f ~ c + b.x + x'Ax under Gaussian applicability.

    Returns ``(H, W, 5)`` with channels (bx, by, axx, ayy, axy); x runs along
    columns and y along rows.
    """
    x, g, ginv = _poly_basis(n, sigma)

    def sep(kx, ky):
        tmp = ndimage.correlate1d(img, kx, axis=1, mode="nearest")
        return ndimage.correlate1d(tmp, ky, axis=0, mode="nearest")

    r = np.stack([sep(g, g), sep(x * g, g), sep(g, x * g), sep(x * x * g, g),
                  sep(g, x * x * g), sep(x * g, x * g)], axis=-1)
    p = r @ ginv.T
    return p[..., 1:]


def _resize(img: np.ndarray, shape) -> np.ndarray:
    h, w = img.shape[:2]
    oh, ow = shape
    ys = np.clip((np.arange(oh) + 0.5) * h / oh - 0.5, 0, h - 1)
    xs = np.clip((np.arange(ow) + 0.5) * w / ow - 0.5, 0, w - 1)
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    if img.ndim == 2:
        return ndimage.map_coordinates(img, [yy, xx], order=1, mode="nearest")
    return np.stack([ndimage.map_coordinates(img[..., c], [yy, xx], order=1, mode="nearest")
                     for c in range(img.shape[-1])], axis=-1)


def _bilinear_shift(img: np.ndarray, flow: np.ndarray) -> np.ndarray:
    """Sample ``img`` (H, W, C) at ``(x + u, y + v)`` with edge clamping."""
    h, w = flow.shape[:2]
    y = np.clip(np.arange(h)[:, None] + flow[..., 1], 0, h - 1)
    x = np.clip(np.arange(w)[None, :] + flow[..., 0], 0, w - 1)
    y0 = np.minimum(np.floor(y).astype(np.intp), h - 2) if h > 1 else np.zeros_like(y, np.intp)
    x0 = np.minimum(np.floor(x).astype(np.intp), w - 2) if w > 1 else np.zeros_like(x, np.intp)
    fy = (y - y0)[..., None]
    fx = (x - x0)[..., None]
    y1, x1 = np.minimum(y0 + 1, h - 1), np.minimum(x0 + 1, w - 1)
    top = img[y0, x0] * (1 - fx) + img[y0, x1] * fx
    bot = img[y1, x0] * (1 - fx) + img[y1, x1] * fx
    return top * (1 - fy) + bot * fy


def _update_flow(r0, r1, flow, winsize):
    r1w = _bilinear_shift(r1, flow)
    a11 = 0.5 * (r0[..., 2] + r1w[..., 2])
    a22 = 0.5 * (r0[..., 3] + r1w[..., 3])
    a12 = 0.25 * (r0[..., 4] + r1w[..., 4])
    dx, dy = flow[..., 0], flow[..., 1]
    b1 = -0.5 * (r1w[..., 0] - r0[..., 0]) + a11 * dx + a12 * dy
    b2 = -0.5 * (r1w[..., 1] - r0[..., 1]) + a12 * dx + a22 * dy
    m = np.stack([a11 * a11 + a12 * a12, a12 * (a11 + a22), a12 * a12 + a22 * a22,
                  a11 * b1 + a12 * b2, a12 * b1 + a22 * b2], axis=-1)
    m = ndimage.uniform_filter(m, size=(winsize, winsize, 1), mode="nearest")
    g11, g12, g22, h1, h2 = np.moveaxis(m, -1, 0)
    idet = 1.0 / (g11 * g22 - g12 * g12 + 1e-3)
    return np.stack([(g22 * h1 - g12 * h2) * idet, (g11 * h2 - g12 * h1) * idet], axis=-1)


def _expansions(img: np.ndarray, params: FlowParams) -> list:
    """Polynomial expansions of one grayscale frame, coarsest pyramid level first."""
    n = params.poly_n // 2
    # 0..255 intensities keep the solver's regulariser on the usual scale
    img = img * 255.0
    out = []
    for k in range(params.levels - 1, -1, -1):
        scale = params.pyr_scale ** k
        shape = (max(1, round(img.shape[0] * scale)), max(1, round(img.shape[1] * scale)))
        if min(shape) < params.poly_n:
            continue
        im = img
        if k > 0:
            im = _resize(ndimage.gaussian_filter(img, (1.0 / scale - 1.0) * 0.5, mode="nearest"), shape)
        out.append(poly_expand(im, n, params.poly_sigma))
    return out


def _flow_from_expansions(e0: list, e1: list, params: FlowParams) -> np.ndarray:
    flow = None
    for r0, r1 in zip(e0, e1):
        shape = r0.shape[:2]
        flow = np.zeros(shape + (2,)) if flow is None else _resize(flow, shape) / params.pyr_scale
        for _ in range(params.iterations):
            flow = _update_flow(r0, r1, flow, params.winsize)
    return flow


def _check_frames(prev, nxt, params):
    if prev.shape != nxt.shape or prev.ndim != 2:
        raise InputError(f"frames must be equal-sized 2-D images, got {prev.shape} and {nxt.shape}")
    if min(prev.shape) < params.poly_n:
        raise InputError(f"frame {prev.shape} smaller than polynomial neighbourhood {params.poly_n}")


def farneback_flow(prev: np.ndarray, nxt: np.ndarray, params: FlowParams = FlowParams()) -> np.ndarray:
    """Dense flow ``(H, W, 2)`` of (u, v) pixels such that ``nxt(x + u, y + v) ~ prev(x, y)``."""
    prev, nxt = to_gray(prev), to_gray(nxt)
    _check_frames(prev, nxt, params)
    return _flow_from_expansions(_expansions(prev, params), _expansions(nxt, params), params)


def video_intensity(frames: np.ndarray, params: FlowParams = FlowParams()) -> float:
    """Mean flow magnitude over every consecutive frame pair and pixel (px/frame)."""
    frames = np.asarray(frames)
    if frames.shape[0] < 2:
        raise InputError("motion intensity needs at least two frames")
    gray = to_gray(frames)
    _check_frames(gray[0], gray[1], params)
    exps = [_expansions(g, params) for g in gray]
    mags = [np.hypot(*np.moveaxis(_flow_from_expansions(exps[k], exps[k + 1], params), -1, 0)).mean()
            for k in range(len(gray) - 1)]
    return float(np.mean(mags))


# -- levels -----------------------------------------------------------------

@dataclass(frozen=True)
class IntensityLevel:
    level: int
    raw: float


def continuous_level(raw: float, lo: float, hi: float) -> float:
    if not lo < hi:
        raise ConfigError(f"calibration needs lo < hi, got ({lo}, {hi})")
    return 1.0 + 9.0 * (raw - lo) / (hi - lo)


def quantize_intensity(raw: float, lo: float, hi: float) -> IntensityLevel:
    level = int(np.floor(continuous_level(raw, lo, hi) + 0.5))
    return IntensityLevel(min(10, max(1, level)), float(raw))


def calibrate(raws, lo_pct: float = 1.0, hi_pct: float = 99.0) -> tuple:
    raws = np.asarray(raws, dtype=np.float64)
    lo, hi = np.percentile(raws, [lo_pct, hi_pct])
    if hi <= lo:
        hi = lo + 1e-6
    return float(lo), float(hi)


def annotate_dataset(clips, calibration, static_floor: float = 0.05,
                     params: FlowParams = FlowParams(), precomputed: bool = False) -> list:
    """Label clips with ``{"clip", "raw", "level"}`` records.

    ``clips`` yields ``(clip_id, loader)``; the loader returns frames (or the
    raw intensity when ``precomputed``). Failing clips produce an
    ``{"clip", "error"}`` record and the rest continue.
    """
    lo, hi = calibration
    out = []
    for clip_id, loader in clips:
        try:
            raw = float(loader()) if precomputed else video_intensity(loader(), params)
        except Exception as exc:  # noqa: BLE001 - recorded per clip
            out.append({"clip": clip_id, "error": f"{type(exc).__name__}: {exc}"})
            continue
        level = 1 if raw < static_floor else quantize_intensity(raw, lo, hi).level
        out.append({"clip": clip_id, "raw": round(raw, 6), "level": level})
    return out


def write_labels(path, labels):
    try:
        with open(path, "w") as fh:
            for rec in labels:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
    except OSError as exc:
        raise StorageError(f"cannot write labels {path}: {exc}") from exc


def read_labels(path) -> list:
    try:
        return [json.loads(x) for x in Path(path).read_text().splitlines() if x.strip()]
    except OSError as exc:
        raise StorageError(f"cannot read labels {path}: {exc}") from exc


_FLOW_HEADER = struct.Struct("<4sII")


def write_flow(path, flow: np.ndarray):
    h, w = flow.shape[:2]
    with open(path, "wb") as fh:
        fh.write(_FLOW_HEADER.pack(b"MFLW", w, h))
        fh.write(np.ascontiguousarray(flow, dtype="<f4").tobytes())


def read_flow(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    magic, w, h = _FLOW_HEADER.unpack_from(raw)
    if magic != b"MFLW":
        raise FormatError(f"{path} is not a flow dump")
    return np.frombuffer(raw, dtype="<f4", offset=_FLOW_HEADER.size).reshape(h, w, 2).copy()


# -- embedding and fusion ---------------------------------------------------

def encode_intensity(level, table):
    """Intensity embedding, duplicated: ``(..., 2, d)`` rows equal to ``table[level - 1]``.

    ``level`` may be an int or an integer array (one per batch item); ``table``
    may be an array or a traced tensor.
    """
    lv = np.asarray(level)
    if np.any(lv < 1) or np.any(lv > 10) or not np.issubdtype(lv.dtype, np.integer):
        raise InputError(f"intensity level must be an integer in 1..10, got {level}")
    idx = np.stack([lv - 1, lv - 1], axis=-1)
    if isinstance(table, nc.Tensor):
        return nc.take(table, idx, axis=0)
    return np.asarray(table)[idx]


@dataclass
class Conditioning:
    """Cross-attention tokens plus an optional global vector.

    ``tokens`` is ``(B, N, d)``; ``text_count`` is how many leading rows are
    text. ``phrase_indices`` are token positions of the guided object phrase.
    """

    tokens: object
    mode: str
    text_count: int
    global_vec: Optional[object] = None
    phrase_indices: tuple = ()

    @property
    def token_count(self) -> int:
        return self.tokens.shape[-2]


def fuse_conditioning(c_t, c_m, mode: str, phrase_indices: tuple = ()) -> Conditioning:
    """Combine text tokens ``(B, N, d)`` with the intensity pair ``(B, 2, d)``.

    ``token_concat`` appends the pair as two extra tokens; ``global_add`` keeps
    the text tokens and carries the pooled pair as a global vector; for
    ``text_word`` the intensity word is already part of ``c_t`` (``c_m`` is
    ignored), and ``none`` uses text alone.
    """
    if mode not in FUSION_MODES:
        raise ConfigError(f"fusion mode must be one of {FUSION_MODES}, got {mode!r}")
    n = c_t.shape[-2]
    if mode == "token_concat":
        return Conditioning(nc.concat([c_t, c_m], axis=-2), mode, n, None, phrase_indices)
    if mode == "global_add":
        return Conditioning(nc.as_tensor(c_t), mode, n, nc.mean(c_m, axis=-2), phrase_indices)
    return Conditioning(nc.as_tensor(c_t), mode, n, None, phrase_indices)
