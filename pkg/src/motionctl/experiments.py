"""Sweeps shared by the CLI, the scripts and the acceptance tests."""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import diffusion, dmc, evalkit, mim
from . import synthdata as sd
from .denoiser import (Denoiser, DenoiserConfig, Optimizer, OptimizerConfig, TrainingSet, fit,
                       text_tokens_for)
from .errors import InputError
from .vocab import COLORS, TokenTable, build_token_table

DEFAULT_WORDS = ("a", "red", "ball", "drifts")
DEFAULT_PHRASE = "red ball"


@dataclass
class Prompt:
    words: tuple = DEFAULT_WORDS
    level: int = 5
    phrase: str | None = DEFAULT_PHRASE

    @property
    def color(self):
        hits = [w for w in self.words if w in COLORS]
        return COLORS[hits[0]] if hits else None


def condition_for(model: Denoiser, table: TokenTable, prompt: Prompt):
    """Conditioning and the object token indices (within the fused token list)."""
    tok = text_tokens_for(list(prompt.words), prompt.level, model.config.fusion, table, phrase=prompt.phrase)
    cond = model.condition(tok.embeddings[None], prompt.level, tok.phrase_indices, None)
    return cond, tok.phrase_indices


def sweep_track(seed: int, frames: int = 8, width: int = 64, height: int = 64, span: float = 24.0,
                dx: float = 12.0, dy: float = 12.0, factor: int = 4) -> dmc.BoxTrack:
    """A straight target path through the frame centre; its heading turns with the seed."""
    angle = 2.0 * np.pi * ((seed * 0.618034) % 1.0)
    u = np.array([np.cos(angle), np.sin(angle)])
    c = np.array([width / 2.0, height / 2.0])
    pts = dmc.interpolate_trajectory([(1, *(c - u * span / 2)), (frames, *(c + u * span / 2))], frames)
    return dmc.expand_to_boxes(pts, dx, dy, width, height, factor)


def decode_batch(latent) -> np.ndarray:
    values = latent.values if hasattr(latent, "values") else latent
    values = np.asarray(values)
    if values.ndim == 4:
        values = values[None]
    return np.stack([sd.decode(v) for v in values])


def run_guided(model, cond, idx, track, cfg: dmc.GuidanceConfig, schedule, seeds, trace=None):
    """Guided (or, with ``eta = 0``, plain) sampling for a list of seeds sharing one track."""
    return dmc.guided_sample(model, cond, track, idx, cfg, schedule, list(seeds), trace=trace)


def direction_scores(frames, track: dmc.BoxTrack, color, threshold: float = 0.5):
    dets = [evalkit.detect_blob(f, color, threshold) for f in frames]
    return evalkit.evaluate_direction(dets, track.boxes, track.width, track.height)


def final_smoothness(records: dict, layers, item: int) -> float:
    """Sum over layers of the mean squared change of attention between consecutive frames."""
    return float(sum(dmc.temporal_smoothness(records[g].maps.data[item]).item() for g in layers))


def guided_steps_sweep(model, table, schedule, base: dmc.GuidanceConfig, counts, seeds,
                       prompt: Prompt = Prompt(), dx: float = 12.0, dy: float = 12.0, include_unguided=True):
    """Direction-control scores per (guided-step count, seed); count 0 is unguided."""
    cond, idx = condition_for(model, table, prompt)
    rows = []
    grid = [0] if include_unguided else []
    for count in grid + list(counts):
        cfg = replace(base, eta=0.0 if count == 0 else base.eta,
                      t_final=schedule.steps if count == 0 else schedule.steps - count + 1)
        for seed in seeds:
            track = _track_for(model, seed, dx, dy)
            res = run_guided(model, cond, idx, track, cfg, schedule, [seed])
            s = direction_scores(decode_batch(res.latent)[0], track, prompt.color)
            rows.append({"guided_steps": count, "seed": seed, "mIoU": s.mIoU, "AP50": s.AP50, "CD": s.CD})
    return rows


def lambda_sweep(model, table, schedule, base: dmc.GuidanceConfig, lams, seeds, prompt: Prompt = Prompt(),
                 dx: float = 12.0, dy: float = 12.0):
    cond, idx = condition_for(model, table, prompt)
    rows = []
    for lam in lams:
        cfg = replace(base, lam=lam)
        for seed in seeds:
            track = _track_for(model, seed, dx, dy)
            res = run_guided(model, cond, idx, track, cfg, schedule, [seed])
            s = direction_scores(decode_batch(res.latent)[0], track, prompt.color)
            rows.append({"lam": lam, "seed": seed, "smoothness": final_smoothness(res.final_records, cfg.layers, 0),
                         "mIoU": s.mIoU})
    return rows


def eta_sweep(model, table, schedule, base: dmc.GuidanceConfig, etas, seeds, prompt: Prompt = Prompt(),
              dx: float = 12.0, dy: float = 12.0):
    cond, idx = condition_for(model, table, prompt)
    rows = []
    for eta in etas:
        cfg = replace(base, eta=eta)
        for seed in seeds:
            track = _track_for(model, seed, dx, dy)
            res = run_guided(model, cond, idx, track, cfg, schedule, [seed])
            s = direction_scores(decode_batch(res.latent)[0], track, prompt.color)
            rows.append({"eta": eta, "seed": seed, "mIoU": s.mIoU, "AP50": s.AP50, "CD": s.CD})
    return rows


def intensity_sweep(model, table, schedule, levels, clips_per_level: int, calibration,
                    words=DEFAULT_WORDS, seed0: int = 0, flow: mim.FlowParams = mim.FlowParams()):
    """Measured raw flow and alignment error of unguided clips per conditioning level."""
    rows = []
    shape = (model.config.frames, model.config.channels, model.config.height, model.config.width)
    for level in levels:
        cond, _ = condition_for(model, table, Prompt(tuple(words), level, None))
        seeds = [seed0 + 1000 * level + k for k in range(clips_per_level)]
        frames = decode_batch(diffusion.sample(model, cond, schedule, seeds, shape))
        for s, f in zip(seeds, frames):
            raw = mim.video_intensity(f, flow)
            rows.append({"level": level, "seed": s, "raw": raw,
                         "motion_alignment": evalkit.alignment_from_raw(raw, level, calibration)})
    return rows


def _track_for(model, seed, dx, dy):
    c = model.config
    return sweep_track(seed, c.frames, 4 * c.width, 4 * c.height, dx=dx, dy=dy, factor=4)


def group_mean(rows, key, value):
    out = {}
    for r in rows:
        out.setdefault(r[key], []).append(r[value])
    return {k: float(np.mean(v)) for k, v in out.items()}


def group_median(rows, key, value):
    out = {}
    for r in rows:
        out.setdefault(r[key], []).append(r[value])
    return {k: float(np.median(v)) for k, v in out.items()}


def training_set(latents, captions, levels, fusion: str, table: TokenTable) -> TrainingSet:
    text = [text_tokens_for(c, lv, fusion, table).embeddings for c, lv in zip(captions, levels)]
    if len({t.shape for t in text}) > 1:
        raise InputError("captions of different lengths cannot share a batch")
    return TrainingSet(np.asarray(latents, dtype=np.float32), np.stack(text).astype(np.float32),
                       np.asarray(levels, dtype=np.int64))


def dataset_training_set(ds: sd.Dataset, fusion: str, table: TokenTable):
    lat = np.stack([sd.encode(c.frames) for c in ds.clips])
    return training_set(lat, [c.caption for c in ds.clips], [r["level"] for r in ds.labels], fusion, table)


# -- the toy training recipe -------------------------------------------------------

@dataclass
class ToyRecipe:
    """Data and optimisation settings shared by the acceptance suite and the scripts."""

    count: int = 200
    data_seed: int = 0
    object_size: float = 24.0
    colors: tuple = ("red",)
    steps: int = 2000
    batch_size: int = 4
    lr: float = 2e-3
    train_seed: int = 0
    token_seed: int = 0

    def dataset_config(self) -> sd.DatasetConfig:
        return sd.DatasetConfig(count=self.count, seed=self.data_seed, size=self.object_size,
                                colors=self.colors)


def toy_dataset(recipe: ToyRecipe) -> sd.Dataset:
    return sd.build_dataset(recipe.dataset_config())


def train_toy(fusion: str, recipe: ToyRecipe, ds: sd.Dataset | None = None, log=None, **model_kw) -> Denoiser:
    ds = ds if ds is not None else toy_dataset(recipe)
    table = build_token_table(32, recipe.token_seed)
    model = Denoiser(DenoiserConfig(fusion=fusion, **model_kw))
    opt = Optimizer(OptimizerConfig(lr=recipe.lr, decay_steps=recipe.steps))
    schedule = diffusion.build_schedule(*model.config.schedule)
    fit(model, dataset_training_set(ds, fusion, table), schedule, opt, recipe.steps, recipe.batch_size,
        recipe.train_seed, log=log)
    return model
