"""Trajectory and motion metrics for generated clips, plus attention heatmaps."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from . import mim
from .errors import ContractError, InputError, StorageError

METRIC_COLUMNS = ("run_id", "seed", "mIoU", "AP50", "CD", "motion_alignment")


@dataclass(frozen=True)
class Detection:
    box: tuple | None    # (x0, y0, x1, y1) pixel edges, or None when absent
    area: int = 0


def detect_blob(frame: np.ndarray, color, threshold: float = 0.5) -> Detection:
    """Tight box around the largest 4-connected region of pixels whose RGB
    distance to ``color`` is below ``threshold``."""
    if not 0 < threshold < 1:
        raise InputError(f"threshold must be in (0, 1), got {threshold}")
    dist = np.linalg.norm(np.asarray(frame, dtype=np.float64) - np.asarray(color, dtype=np.float64), axis=-1)
    labels, count = ndimage.label(dist < threshold)
    if count == 0:
        return Detection(None, 0)
    sizes = np.bincount(labels.ravel())[1:]
    best = int(np.argmax(sizes)) + 1
    ys, xs = np.nonzero(labels == best)
    return Detection((int(xs.min()), int(ys.min()), int(xs.max()) + 1, int(ys.max()) + 1), int(sizes[best - 1]))


def _check_box(b):
    if b[2] <= b[0] or b[3] <= b[1]:
        raise InputError(f"empty box {tuple(b)}")


def iou(a, b) -> float:
    _check_box(a)
    _check_box(b)
    iw = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    ih = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = iw * ih
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return float(inter / union)


@dataclass
class DirectionScores:
    mIoU: float
    AP50: float
    CD: float
    per_frame_iou: list
    per_frame_cd: list


def evaluate_direction(detections, target_boxes, width: int, height: int) -> DirectionScores:
    """Per-frame IoU and diagonal-normalised centroid distance against target boxes.

    An absent detection scores IoU 0 and distance 1 on that frame.
    """
    target_boxes = np.asarray(target_boxes, dtype=np.float64)
    if len(detections) != len(target_boxes):
        raise ContractError(f"{len(detections)} detections for {len(target_boxes)} target frames")
    diag = float(np.hypot(width, height))
    ious, cds = [], []
    for det, tb in zip(detections, target_boxes):
        box = det.box if isinstance(det, Detection) else det
        if box is None:
            ious.append(0.0)
            cds.append(1.0)
            continue
        ious.append(iou(box, tb))
        ca = np.array([(box[0] + box[2]) / 2, (box[1] + box[3]) / 2])
        cb = np.array([(tb[0] + tb[2]) / 2, (tb[1] + tb[3]) / 2])
        cds.append(min(1.0, float(np.linalg.norm(ca - cb)) / diag))
    ious_a = np.array(ious)
    return DirectionScores(float(ious_a.mean()), float((ious_a >= 0.5).mean()), float(np.mean(cds)), ious, cds)


def motion_alignment(frames: np.ndarray, target_level: int, calibration,
                     params: mim.FlowParams = mim.FlowParams()) -> float:
    """|continuous level of the measured flow - target| / 9; the level is capped at 10 only."""
    raw = mim.video_intensity(frames, params)
    return alignment_from_raw(raw, target_level, calibration)


def alignment_from_raw(raw: float, target_level: int, calibration) -> float:
    level = min(10.0, mim.continuous_level(raw, *calibration))
    return abs(level - target_level) / 9.0


# -- reports ----------------------------------------------------------------

def write_metrics(path, rows, aggregate: bool = True):
    """CSV with ``METRIC_COLUMNS``; an ``all`` row holds column means when requested."""
    rows = list(rows)
    try:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(METRIC_COLUMNS)
            for r in rows:
                w.writerow([r.get("run_id", ""), r.get("seed", "")] + [_fmt(r.get(k)) for k in METRIC_COLUMNS[2:]])
            if aggregate and rows:
                means = []
                for k in METRIC_COLUMNS[2:]:
                    vals = [r[k] for r in rows if r.get(k) is not None]
                    means.append(_fmt(float(np.mean(vals))) if vals else "")
                w.writerow(["all", ""] + means)
    except OSError as exc:
        raise StorageError(f"cannot write metrics {path}: {exc}") from exc


def _fmt(v):
    return "" if v is None else f"{v:.6f}"


def read_metrics(path) -> list:
    try:
        with open(path, newline="") as fh:
            return list(csv.DictReader(fh))
    except OSError as exc:
        raise StorageError(f"cannot read metrics {path}: {exc}") from exc


# -- attention heatmaps -------------------------------------------------------

def heatmap_image(col: np.ndarray) -> np.ndarray:
    """Scale a 2-D map so its maximum is 255; a constant map becomes mid-gray."""
    col = np.asarray(col, dtype=np.float64)
    lo, hi = col.min(), col.max()
    if hi - lo <= 1e-12 * max(1.0, abs(hi)):
        return np.full(col.shape, 128, dtype=np.uint8)
    return np.round(255 * (col - lo) / (hi - lo)).astype(np.uint8)


def attention_heatmap_export(records: dict, out_dir, tokens, step: int = 0, item: int = 0) -> list:
    """Write ``attn_L{layer}_f{frame}_t{token}_s{step}.png`` per layer, frame and token,
    plus ``attn_sheet_s{step}.png`` tiling them all; returns the written paths."""
    if not records:
        raise InputError("no attention records to export")
    out = Path(out_dir)
    written, tiles = [], []
    try:
        out.mkdir(parents=True, exist_ok=True)
        for layer in sorted(records):
            rec = records[layer]
            maps = rec.maps.data if hasattr(rec.maps, "data") else np.asarray(rec.maps)
            maps = maps[item]
            gh, gw = rec.grid
            for i in range(maps.shape[0]):
                row = []
                for n in tokens:
                    img = heatmap_image(maps[i, :, n].reshape(gh, gw))
                    path = out / f"attn_L{layer}_f{i + 1}_t{n}_s{step}.png"
                    Image.fromarray(img).save(path, optimize=False)
                    written.append(path)
                    row.append(np.kron(img, np.ones((16 // gh, 16 // gw), dtype=np.uint8))
                               if 16 % gh == 0 and gh <= 16 else img)
                tiles.append(np.concatenate(row, axis=1))
        width = max(t.shape[1] for t in tiles)
        sheet = np.concatenate([np.pad(t, ((0, 0), (0, width - t.shape[1]))) for t in tiles], axis=0)
        Image.fromarray(sheet).save(out / f"attn_sheet_s{step}.png", optimize=False)
    except OSError as exc:
        raise StorageError(f"cannot write heatmaps to {out}: {exc}") from exc
    return written
