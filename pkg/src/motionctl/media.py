"""Frame sequences and byte-reproducible GIFs."""
from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

from .errors import StorageError
from .synthdata import save_png

GIF_DELAY_MS = 120  # GIF stores centiseconds


def global_palette() -> np.ndarray:
    """Fixed 6x6x6 colour cube plus 40 greys: 256 RGB entries."""
    steps = np.linspace(0, 255, 6)
    cube = np.stack(np.meshgrid(steps, steps, steps, indexing="ij"), axis=-1).reshape(-1, 3)
    greys = np.repeat(np.linspace(0, 255, 42)[1:-1, None], 3, axis=1)
    return np.round(np.concatenate([cube, greys])).astype(np.uint8)


PALETTE = global_palette()


def quantize(frame: np.ndarray) -> np.ndarray:
    """Nearest palette index per pixel, no dithering. ``frame`` is float RGB in [0, 1]."""
    rgb = np.round(np.clip(frame, 0, 1) * 255).reshape(-1, 3).astype(np.int32)
    pal = PALETTE.astype(np.int32)
    d = (rgb ** 2).sum(1)[:, None] - 2 * rgb @ pal.T + (pal ** 2).sum(1)[None, :]
    return d.argmin(axis=1).astype(np.uint8).reshape(frame.shape[:2])


def write_gif(path, frames: np.ndarray, delay_ms: int = GIF_DELAY_MS):
    flat = PALETTE.reshape(-1).tolist()
    images = []
    for f in frames:
        im = Image.fromarray(quantize(f))  # uint8 2-D array -> mode "L"
        im = im.convert("P")
        im.putpalette(flat)
        images.append(im)
    try:
        images[0].save(path, save_all=True, append_images=images[1:], duration=delay_ms, loop=0,
                       optimize=False, disposal=1)
    except OSError as exc:
        raise StorageError(f"cannot write {path}: {exc}") from exc


def write_frames(out_dir, frames: np.ndarray) -> list:
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        paths = []
        for i, f in enumerate(frames):
            paths.append(out / f"frame_{i:04d}.png")
            save_png(paths[-1], f)
    except OSError as exc:
        raise StorageError(f"cannot write frames to {out}: {exc}") from exc
    return paths


def write_media(out_dir, frames: np.ndarray) -> Path:
    write_frames(out_dir, frames)
    gif = Path(out_dir) / "out.gif"
    write_gif(gif, frames)
    return gif
