"""Procedural moving-shape clips, datasets on disk, and the fixed pixel/latent codec.

Pixel coordinates are continuous: pixel column ``k`` covers ``[k, k+1)`` and a
frame spans ``[0, W] x [0, H]``. Frames are float arrays ``(L, H, W, 3)`` in [0, 1].
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import InputError, StorageError
from .vocab import COLORS, PATH_WORDS, SHAPE_WORDS

SHAPES = tuple(SHAPE_WORDS)
PATHS = tuple(PATH_WORDS)
BACKGROUNDS = ("flat", "textured")
SUPERSAMPLE = 4


@dataclass(frozen=True)
class ClipSpec:
    shape: str = "disk"
    color: str = "red"
    size: float = 16.0
    path: str = "line"
    speed: float = 2.0
    frames: int = 8
    width: int = 64
    height: int = 64
    background: str = "flat"
    seed: int = 0

    def validate(self):
        if self.shape not in SHAPES:
            raise InputError(f"shape must be one of {SHAPES}, got {self.shape!r}")
        if self.color not in COLORS:
            raise InputError(f"unknown color {self.color!r}")
        if self.path not in PATHS:
            raise InputError(f"path must be one of {PATHS}, got {self.path!r}")
        if self.background not in BACKGROUNDS:
            raise InputError(f"background must be one of {BACKGROUNDS}, got {self.background!r}")
        if self.speed < 0 or self.size <= 0 or self.frames < 1:
            raise InputError(f"invalid clip spec {self}")
        if self.size > min(self.width, self.height):
            raise InputError(f"shape of size {self.size} cannot fit a {self.width}x{self.height} frame")

    @property
    def rgb(self):
        return COLORS[self.color]

    @property
    def caption(self) -> list:
        return ["a", self.color, SHAPE_WORDS[self.shape], PATH_WORDS[self.path]]

    @property
    def phrase(self) -> str:
        return f"{self.color} {SHAPE_WORDS[self.shape]}"


@dataclass
class Clip:
    spec: ClipSpec
    frames: np.ndarray
    trajectory: np.ndarray  # (L, 2) centres (x, y) in pixels
    caption: list
    clip_id: str = ""


def _path_offsets(spec: ClipSpec, rng) -> np.ndarray:
    """Centre offsets from the start point, one per frame."""
    n, s = spec.frames, spec.speed
    i = np.arange(n, dtype=np.float64)
    if spec.path == "line":
        th = rng.uniform(0, 2 * np.pi)
        return np.stack([i * s * np.cos(th), i * s * np.sin(th)], axis=1)
    if spec.path == "arc":
        radius = rng.uniform(10.0, 20.0)
        sign = rng.choice([-1.0, 1.0])
        phi0 = rng.uniform(0, 2 * np.pi)
        # chord between consecutive points equals the step, so spacing is exactly `speed`
        omega = sign * 2 * np.arcsin(min(1.0, s / (2 * radius)))
        ang = phi0 + omega * i
        pts = radius * np.stack([np.cos(ang), np.sin(ang)], axis=1)
        return pts - pts[0]
    if spec.path == "zigzag":
        th = rng.uniform(0, 2 * np.pi)
        turns = np.where((np.arange(1, n) // 2) % 2 == 0, 1.0, -1.0)
        ang = th + turns * np.pi / 4
    else:  # random-walk
        ang = rng.uniform(0, 2 * np.pi, size=n - 1)
    steps = s * np.stack([np.cos(ang), np.sin(ang)], axis=1)
    return np.vstack([np.zeros((1, 2)), np.cumsum(steps, axis=0)])


def _plan_trajectory(spec: ClipSpec, rng) -> np.ndarray:
    half = spec.size / 2.0
    for _ in range(64):
        off = _path_offsets(spec, rng)
        lo = np.array([half, half]) - off.min(axis=0)
        hi = np.array([spec.width - half, spec.height - half]) - off.max(axis=0)
        if np.all(hi >= lo):
            return rng.uniform(lo, hi) + off
    raise InputError(f"shape leaves the frame for every sampled path under {spec}")


def textured_background(width: int, height: int, seed: int, scale: float = 3.0) -> np.ndarray:
    """Periodic smoothed noise in [0.15, 0.65]; built in the Fourier domain so it
    can be translated by arbitrary sub-pixel amounts exactly (see ``translate``)."""
    rng = np.random.default_rng(seed)
    spec = np.fft.fft2(rng.standard_normal((height, width)))
    fy = np.fft.fftfreq(height)[:, None]
    fx = np.fft.fftfreq(width)[None, :]
    spec *= np.exp(-2 * (np.pi * scale) ** 2 * (fx ** 2 + fy ** 2))
    img = np.fft.ifft2(spec).real
    img = (img - img.min()) / (img.max() - img.min())
    return 0.15 + 0.5 * img


def translate(img: np.ndarray, dx: float, dy: float) -> np.ndarray:
    """Periodic translation by (dx, dy) pixels: ``out(x, y) = img(x - dx, y - dy)``."""
    h, w = img.shape[:2]
    fy = np.fft.fftfreq(h)[:, None]
    fx = np.fft.fftfreq(w)[None, :]
    phase = np.exp(-2j * np.pi * (fx * dx + fy * dy))
    if img.ndim == 3:
        phase = phase[..., None]
    return np.fft.ifft2(np.fft.fft2(img, axes=(0, 1)) * phase, axes=(0, 1)).real


def gen_panning_clip(frames: int, width: int, height: int, velocity, seed: int = 0) -> np.ndarray:
    """Whole-frame textured translation at constant ``velocity`` px/frame (RGB)."""
    base = textured_background(width, height, seed)
    vx, vy = velocity
    out = np.stack([translate(base, k * vx, k * vy) for k in range(frames)])
    return np.repeat(np.clip(out, 0, 1)[..., None], 3, axis=-1)


def _coverage(spec: ClipSpec, cx: float, cy: float) -> np.ndarray:
    ss = SUPERSAMPLE
    ys = (np.arange(spec.height * ss) + 0.5) / ss
    xs = (np.arange(spec.width * ss) + 0.5) / ss
    r = spec.size / 2.0
    if spec.shape == "disk":
        inside = (xs[None, :] - cx) ** 2 + (ys[:, None] - cy) ** 2 <= r * r
    else:
        inside = (np.abs(xs[None, :] - cx) <= r) & (np.abs(ys[:, None] - cy) <= r)
    return inside.reshape(spec.height, ss, spec.width, ss).mean(axis=(1, 3))


def render(spec: ClipSpec, trajectory: np.ndarray) -> np.ndarray:
    if spec.background == "flat":
        bg = np.zeros((spec.height, spec.width, 3))
    else:
        bg = np.repeat(textured_background(spec.width, spec.height, spec.seed)[..., None], 3, axis=-1)
    color = np.asarray(spec.rgb, dtype=np.float64)
    frames = np.empty((spec.frames, spec.height, spec.width, 3))
    for k, (cx, cy) in enumerate(trajectory):
        a = _coverage(spec, cx, cy)[..., None]
        frames[k] = bg * (1 - a) + color * a
    return frames


def gen_clip(spec: ClipSpec) -> Clip:
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    traj = _plan_trajectory(spec, rng)
    return Clip(spec, render(spec, traj), traj, spec.caption)


# -- codec ------------------------------------------------------------------

def _interp_matrix(n_out: int, n_in: int) -> np.ndarray:
    """Bilinear (half-pixel aligned, edge-clamped) resampling matrix."""
    f = n_out / n_in
    src = np.clip((np.arange(n_out) + 0.5) / f - 0.5, 0, n_in - 1)
    i0 = np.floor(src).astype(int)
    i1 = np.minimum(i0 + 1, n_in - 1)
    w1 = src - i0
    m = np.zeros((n_out, n_in))
    m[np.arange(n_out), i0] += 1 - w1
    m[np.arange(n_out), i1] += w1
    return m


def encode(frames: np.ndarray, factor: int = 4) -> np.ndarray:
    """``(..., H, W, 3)`` pixels -> ``(..., 3, H/f, W/f)`` latents in [-1, 1]."""
    frames = np.asarray(frames, dtype=np.float64)
    h, w = frames.shape[-3:-1]
    if h % factor or w % factor:
        raise InputError(f"frame extents {w}x{h} not divisible by codec factor {factor}")
    lead = frames.shape[:-3]
    pooled = frames.reshape(lead + (h // factor, factor, w // factor, factor, 3)).mean(axis=(-4, -2))
    return np.moveaxis(2.0 * pooled - 1.0, -1, -3)


def decode(latents: np.ndarray, factor: int = 4) -> np.ndarray:
    """Inverse of ``encode`` up to the pooling loss; output clamped to [0, 1]."""
    latents = np.asarray(latents, dtype=np.float64)
    h, w = latents.shape[-2:]
    uy = _interp_matrix(h * factor, h)
    ux = _interp_matrix(w * factor, w)
    up = uy @ latents @ ux.T
    return np.clip((np.moveaxis(up, -3, -1) + 1.0) / 2.0, 0.0, 1.0)


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    mse = float(np.mean((np.asarray(a) - np.asarray(b)) ** 2))
    return float("inf") if mse == 0 else 10 * math.log10(1.0 / mse)


# -- datasets ---------------------------------------------------------------

@dataclass
class DatasetConfig:
    count: int = 100
    seed: int = 0
    speed_min: float = 0.0
    speed_max: float = 4.0
    strata: int = 10
    colors: tuple = ("red", "green", "blue")
    shapes: tuple = ("disk",)
    paths: tuple = ("line",)
    background: str = "flat"
    size: float = 16.0
    frames: int = 8
    width: int = 64
    height: int = 64

    def validate(self):
        if self.count < 10:
            raise InputError(f"count must be at least 10, got {self.count}")
        if not 0 <= self.speed_min <= self.speed_max:
            raise InputError(f"speed range invalid: speed_min={self.speed_min}, speed_max={self.speed_max}")
        if self.strata < 1:
            raise InputError(f"strata must be positive, got {self.strata}")
        for c in self.colors:
            if c not in COLORS:
                raise InputError(f"colors: unknown color {c!r}")


@dataclass
class Dataset:
    config: DatasetConfig
    clips: list
    labels: list = field(default_factory=list)
    calibration: tuple = (0.0, 1.0)

    def manifest(self) -> list:
        return [{"clip": c.clip_id, "spec": asdict(c.spec), "caption": c.caption,
                 "trajectory": np.round(c.trajectory, 6).tolist()} for c in self.clips]


def stratified_speeds(cfg: DatasetConfig, rng) -> np.ndarray:
    edges = np.linspace(cfg.speed_min, cfg.speed_max, cfg.strata + 1)
    per = np.full(cfg.strata, cfg.count // cfg.strata)
    per[: cfg.count % cfg.strata] += 1
    return np.concatenate([rng.uniform(edges[k], edges[k + 1], size=per[k]) for k in range(cfg.strata)])


def build_dataset(cfg: DatasetConfig, out_dir=None, calibration=None, flow_params=None) -> Dataset:
    """Generate clips with stratified speeds and attach flow-derived intensity labels.

    Calibration defaults to the 1st/99th percentile of the clips' raw intensities.
    """
    from . import mim

    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    speeds = stratified_speeds(cfg, rng)
    clips = []
    for k, speed in enumerate(speeds):
        spec = ClipSpec(shape=str(rng.choice(cfg.shapes)), color=str(rng.choice(cfg.colors)),
                        size=cfg.size, path=str(rng.choice(cfg.paths)), speed=float(speed),
                        frames=cfg.frames, width=cfg.width, height=cfg.height,
                        background=cfg.background, seed=int(rng.integers(2 ** 31)))
        clip = gen_clip(spec)
        clip.clip_id = f"clip_{k:05d}"
        clips.append(clip)
    params = flow_params or mim.FlowParams()
    raws = {c.clip_id: mim.video_intensity(c.frames, params) for c in clips}
    if calibration is None:
        calibration = mim.calibrate(list(raws.values()))
    labels = mim.annotate_dataset([(c.clip_id, (lambda r=raws[c.clip_id]: r)) for c in clips],
                                  calibration, precomputed=True)
    ds = Dataset(cfg, clips, labels, tuple(calibration))
    if out_dir is not None:
        write_dataset(ds, out_dir)
    return ds


def save_png(path, frame: np.ndarray):
    arr = np.round(np.clip(frame, 0, 1) * 255).astype(np.uint8)
    Image.fromarray(arr).save(path, optimize=False)


def load_png(path) -> np.ndarray:
    return np.asarray(Image.open(path).convert("RGB"), dtype=np.float64) / 255.0


def write_dataset(ds: Dataset, out_dir):
    from . import mim

    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        for clip, rec in zip(ds.clips, ds.manifest()):
            d = out / clip.clip_id
            d.mkdir(exist_ok=True)
            for k, frame in enumerate(clip.frames):
                save_png(d / f"frame_{k:04d}.png", frame)
            (d / "clip.json").write_text(json.dumps(rec, sort_keys=True, indent=1))
        with open(out / "manifest.jsonl", "w") as fh:
            for rec in ds.manifest():
                rec = dict(rec, dir=rec["clip"])
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
        mim.write_labels(out / "labels.jsonl", ds.labels)
        (out / "calibration.json").write_text(json.dumps({"lo": ds.calibration[0], "hi": ds.calibration[1]}))
    except OSError as exc:
        raise StorageError(f"cannot write dataset to {out}: {exc}") from exc


def load_clip_frames(clip_dir) -> np.ndarray:
    files = sorted(Path(clip_dir).glob("frame_*.png"))
    if not files:
        raise StorageError(f"no frames in {clip_dir}")
    return np.stack([load_png(f) for f in files])


def read_manifest(root) -> list:
    path = Path(root) / "manifest.jsonl"
    try:
        return [json.loads(line) for line in path.read_text().splitlines() if line.strip()]
    except OSError as exc:
        raise StorageError(f"cannot read manifest {path}: {exc}") from exc
