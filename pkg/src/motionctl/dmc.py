"""Training-free directional control: steer an object's cross-attention into
per-frame boxes by gradient updates on the noisy latent during sampling."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import numcore as nc
from .diffusion import LatentVideo, sample
from .errors import ConfigError, ContractError, InputError, NumericError, StorageError


@dataclass
class Trajectory:
    """Keypoints ``(frame, x, y)`` with 1-based frames, in pixel coordinates."""

    keypoints: list
    frames: int
    width: int
    height: int
    token_indices: tuple = ()

    def validate(self):
        if not self.keypoints:
            raise InputError("trajectory needs at least one keypoint")
        fr = [k[0] for k in self.keypoints]
        if any(b <= a for a, b in zip(fr, fr[1:])):
            raise InputError(f"keypoint frames must be strictly increasing, got {fr}")
        if fr[0] < 1 or fr[-1] > self.frames:
            raise InputError(f"keypoint frames must lie in 1..{self.frames}, got {fr}")
        for f, x, y in self.keypoints:
            if not (0 <= x < self.width and 0 <= y < self.height):
                raise InputError(f"keypoint ({x}, {y}) at frame {f} is outside the "
                                 f"{self.width}x{self.height} frame")

    def points(self) -> np.ndarray:
        self.validate()
        return interpolate_trajectory(self.keypoints, self.frames)


def interpolate_trajectory(keypoints, frames: int) -> np.ndarray:
    """Per-frame ``(L, 2)`` points: linear between keypoints, constant outside them."""
    kp = np.asarray(keypoints, dtype=np.float64).reshape(-1, 3)
    if len(np.unique(kp[:, 0])) != len(kp):
        raise InputError(f"duplicate keypoint frames in {kp[:, 0].tolist()}")
    kp = kp[np.argsort(kp[:, 0])]
    i = np.arange(1, frames + 1)
    return np.stack([np.interp(i, kp[:, 0], kp[:, 1]), np.interp(i, kp[:, 0], kp[:, 2])], axis=1)


def cell_mask(box, width: int, height: int, grid) -> np.ndarray:
    """Cells of an ``(h, w)`` grid whose centres fall inside the closed pixel box."""
    gh, gw = grid
    fx, fy = width / gw, height / gh
    cx = fx * np.arange(gw) + fx / 2
    cy = fy * np.arange(gh) + fy / 2
    x0, y0, x1, y1 = box
    return ((cy[:, None] >= y0) & (cy[:, None] <= y1)) & ((cx[None, :] >= x0) & (cx[None, :] <= x1))


@dataclass
class BoxTrack:
    """Per-frame pixel boxes ``(x0, y0, x1, y1)`` and their latent masks."""

    boxes: np.ndarray
    dx: float
    dy: float
    width: int
    height: int
    factor: int
    masks: np.ndarray = field(default=None)   # (L, H/f, W/f) bool
    points: np.ndarray = field(default=None)

    def masks_at(self, grid) -> np.ndarray:
        """Masks on another grid (e.g. a pooled attention layer); a frame whose box
        covers no cell centre falls back to the cell containing the point."""
        gh, gw = grid
        out = np.stack([cell_mask(b, self.width, self.height, grid) for b in self.boxes])
        for i in np.flatnonzero(~out.any(axis=(1, 2))):
            x, y = self.points[i]
            out[i, min(gh - 1, int(y * gh / self.height)), min(gw - 1, int(x * gw / self.width))] = True
        return out


def expand_to_boxes(points, dx: float, dy: float, width: int, height: int, factor: int) -> BoxTrack:
    if dx <= 0 or dy <= 0:
        raise InputError(f"box tolerances must be positive, got dx={dx}, dy={dy}")
    if factor < 1 or int(factor) != factor:
        raise InputError(f"downsample factor must be a positive integer, got {factor}")
    if width % factor or height % factor:
        raise InputError(f"frame {width}x{height} not divisible by factor {factor}")
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    outside = (pts[:, 0] < 0) | (pts[:, 0] >= width) | (pts[:, 1] < 0) | (pts[:, 1] >= height)
    if outside.any():
        k = int(np.flatnonzero(outside)[0])
        raise InputError(f"point {tuple(pts[k])} at frame {k + 1} is outside the frame; box would be empty")
    boxes = np.stack([np.clip(pts[:, 0] - dx, 0, width), np.clip(pts[:, 1] - dy, 0, height),
                      np.clip(pts[:, 0] + dx, 0, width), np.clip(pts[:, 1] + dy, 0, height)], axis=1)
    track = BoxTrack(boxes, dx, dy, width, height, int(factor), points=pts)
    track.masks = track.masks_at((height // factor, width // factor))
    return track


# -- energies ---------------------------------------------------------------

def _phrase_column(maps, token_indices):
    idx = np.asarray(token_indices, dtype=np.int64)
    if idx.size == 0:
        raise InputError("no object tokens selected for guidance")
    if idx.min() < 0 or idx.max() >= maps.shape[-1]:
        raise InputError(f"token indices {idx.tolist()} outside the {maps.shape[-1]} conditioning tokens")
    return nc.mean(nc.take(maps, idx, axis=-1), axis=-1)


def energy(attn, mask, token_indices) -> nc.Tensor:
    """In-box deficit ``(1 - inside/total)^2`` for one frame's ``(U, N)`` map."""
    return frame_energies(nc.reshape(nc.as_tensor(attn), (1,) + tuple(np.shape(attn))),
                          np.reshape(mask, (1, -1)), token_indices)[0]


def frame_energies(maps, masks, token_indices) -> nc.Tensor:
    """Vectorised energy for maps ``(..., L, U, N)`` and masks ``(L, U)``; returns ``(..., L)``."""
    maps = nc.as_tensor(maps)
    col = _phrase_column(maps, token_indices)
    masks = np.asarray(masks, dtype=bool).reshape(col.shape[-2:])
    total = col.data.sum(axis=-1)
    if np.any(total <= 0):
        raise NumericError("object attention column sums to zero; cannot normalise the energy")
    inside = nc.sum_(col * masks.astype(col.data.dtype), axis=-1)
    return nc.square(1.0 - inside / nc.sum_(col, axis=-1))


def temporal_smoothness(maps) -> nc.Tensor:
    """Mean over consecutive frames of ``||A_i - A_{i-1}||^2``; maps are ``(..., L, U, N)``.

    Leading axes are summed, so a batch gives the sum of per-item values.
    """
    if isinstance(maps, (list, tuple)):
        shapes = {np.shape(m.data if isinstance(m, nc.Tensor) else m) for m in maps}
        if len(shapes) > 1:
            raise ContractError(f"attention maps differ in shape across frames: {sorted(shapes)}")
        shape = shapes.pop()
        maps = nc.concat([nc.reshape(nc.as_tensor(m), (1,) + shape) for m in maps], axis=0)
    maps = nc.as_tensor(maps)
    frames = maps.shape[-3] if maps.ndim >= 3 else 1
    if frames < 2:
        return nc.Tensor(0.0)
    lead = (slice(None),) * (maps.ndim - 3)
    diff = nc.slice_(maps, lead + (slice(1, None),)) - nc.slice_(maps, lead + (slice(None, -1),))
    return nc.sum_squares(diff) * (1.0 / (frames - 1))


@dataclass
class GuidanceConfig:
    eta: float = 0.1
    lam: float = 0.1
    t_final: int = 41
    inner_iters: int = 1
    layers: tuple = ("mid", "up")
    smoothness_once_per_layer: bool = False

    def validate(self, steps: int | None = None):
        if self.eta < 0 or self.lam < 0:
            raise ConfigError(f"eta and lam must be >= 0, got eta={self.eta}, lam={self.lam}")
        if self.inner_iters < 1:
            raise ConfigError(f"inner_iters must be >= 1, got {self.inner_iters}")
        if not self.layers:
            raise ConfigError("guidance needs at least one attention layer")
        if self.t_final < 1 or (steps is not None and self.t_final > steps):
            raise ConfigError(f"final guidance timestep must be in 1..{steps}, got {self.t_final}")

    def guided_count(self, steps: int) -> int:
        return steps - self.t_final + 1


def guidance_objective(records: dict, track: BoxTrack, token_indices, lam: float,
                       layers=("mid", "up"), smoothness_once_per_layer: bool = False) -> nc.Tensor:
    """Sum over layers and frames of energy plus ``lam`` times the layer's smoothness.

    Read literally the smoothness term sits inside the frame sum, so it is
    counted once per frame; ``smoothness_once_per_layer`` counts it once.
    """
    total = None
    for name in layers:
        if name not in records:
            raise ContractError(f"no attention record for guidance layer {name!r}")
        rec = records[name]
        masks = track.masks_at(rec.grid).reshape(track.boxes.shape[0], -1)
        frames = rec.maps.shape[-3]
        if frames != masks.shape[0]:
            raise ContractError(f"box track has {masks.shape[0]} frames, attention has {frames}")
        term = nc.sum_(frame_energies(rec.maps, masks, token_indices))
        if lam:
            weight = lam * (1 if smoothness_once_per_layer else frames)
            term = term + temporal_smoothness(rec.maps) * weight
        total = term if total is None else total + term
    return total


def guidance_update(z, grad, eta: float, sigma: float, source: str = "objective") -> np.ndarray:
    grad = np.asarray(grad)
    if grad.shape != np.shape(z):
        raise ContractError(f"gradient shape {grad.shape} does not match latent shape {np.shape(z)}")
    if not np.all(np.isfinite(grad)):
        raise NumericError(f"non-finite guidance gradient from {source}")
    return z - (sigma * sigma * eta) * grad


def objective_gradient(model, z, t, cond, track, token_indices, cfg: GuidanceConfig):
    """Objective value, its gradient w.r.t. the latent, and the attention records."""
    zt = nc.Tensor(z, requires_grad=True)
    with nc.tracing():
        _, records = model.predict_noise(zt, t, cond, records_only=cfg.layers)
        obj = guidance_objective(records, track, token_indices, cfg.lam, cfg.layers,
                                 cfg.smoothness_once_per_layer)
        grad = nc.backward(obj, [zt])[0]
    if not np.all(np.isfinite(grad)):
        for name in cfg.layers:
            with nc.tracing():
                _, rec = model.predict_noise(zt, t, cond, records_only=cfg.layers)
                part = guidance_objective(rec, track, token_indices, cfg.lam, (name,),
                                          cfg.smoothness_once_per_layer)
                if not np.all(np.isfinite(nc.backward(part, [zt])[0])):
                    raise NumericError(f"non-finite guidance gradient from layer {name!r} at t={t}")
    return obj.item(), grad, records


class GuidanceTrace:
    """Per-update log of the objective, written as CSV."""

    FIELDS = ("t", "iteration", "objective", "grad_norm", "displacement")

    def __init__(self):
        self.rows = []

    def add(self, **row):
        self.rows.append(row)

    def write(self, path):
        try:
            with open(path, "w", newline="") as fh:
                w = csv.DictWriter(fh, fieldnames=self.FIELDS)
                w.writeheader()
                for r in self.rows:
                    w.writerow({k: (f"{v:.6g}" if isinstance(v, float) else v) for k, v in r.items()})
        except OSError as exc:
            raise StorageError(f"cannot write guidance trace {path}: {exc}") from exc


@dataclass
class SampleResult:
    latent: LatentVideo
    final_records: dict      # attention records from the t = 1 denoiser call


def guided_sample(model, cond, track: BoxTrack, token_indices, cfg: GuidanceConfig, schedule,
                  seed, shape=None, trace: GuidanceTrace | None = None) -> SampleResult:
    """Ancestral sampling with latent updates at every timestep from T down to ``t_final``.

    ``seed`` may be a list (independent batch items sharing ``track``).
    """
    cfg.validate(schedule.steps)
    shape = shape or (model.config.frames, model.config.channels, model.config.height, model.config.width)
    final = {}

    def denoise(z, t, c):
        eps, records = model.predict_noise(z, t, c)
        if t == 1:
            final.update(records)
        return eps.data

    def hook(z, t):
        if t < cfg.t_final or cfg.eta == 0:
            return z
        sigma = schedule.sigma(t)
        for it in range(cfg.inner_iters):
            obj, grad, _ = objective_gradient(model, z, t, cond, track, token_indices, cfg)
            z_new = guidance_update(z, grad, cfg.eta, sigma)
            if trace is not None:
                trace.add(t=t, iteration=it, objective=obj, grad_norm=float(np.linalg.norm(grad)),
                          displacement=float(np.linalg.norm(z_new - z)))
            z = z_new
        return z

    out = sample(denoise, cond, schedule, seed, shape, guidance=hook)
    return SampleResult(out, final)


# -- trajectory files ---------------------------------------------------------

_TRAJ_FIELDS = {"object", "token_indices", "keypoints", "dx", "dy", "frame_width", "frame_height"}


@dataclass
class TrajectorySpec:
    object: str
    keypoints: list
    dx: float
    dy: float
    frame_width: int
    frame_height: int
    token_indices: tuple | None = None


def load_trajectory_spec(path) -> TrajectorySpec:
    try:
        raw = json.loads(Path(path).read_text())
    except OSError as exc:
        raise StorageError(f"cannot read trajectory file {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise InputError(f"trajectory file {path} is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise InputError("trajectory file must hold a JSON object")
    unknown = sorted(set(raw) - _TRAJ_FIELDS)
    if unknown:
        raise InputError(f"unknown trajectory field(s): {', '.join(unknown)}")
    missing = sorted(_TRAJ_FIELDS - {"token_indices"} - set(raw))
    if missing:
        raise InputError(f"trajectory file lacks field(s): {', '.join(missing)}")
    try:
        kps = [(int(k["frame"]), float(k["x"]), float(k["y"])) for k in raw["keypoints"]]
    except (KeyError, TypeError, ValueError) as exc:
        raise InputError(f"keypoints must be objects with frame, x, y: {exc}") from exc
    ti = raw.get("token_indices")
    return TrajectorySpec(str(raw["object"]), kps, float(raw["dx"]), float(raw["dy"]),
                          int(raw["frame_width"]), int(raw["frame_height"]),
                          tuple(int(i) for i in ti) if ti is not None else None)
