"""Command-line entry point: synth, annotate, train, generate, eval, ablate, dump-attn.

Exit codes: 0 success, 2 config/input, 3 I/O, 4 numeric failure, 5 format/version.
"""
from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import diffusion, dmc, evalkit, experiments, media, mim
from . import synthdata as sd
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import RunConfig, load_config, write_resolved
from .denoiser import Denoiser, Optimizer, fit
from .errors import ConfigError, InputError, MotionCtlError, StorageError
from .vocab import build_token_table


def _config(args, extra: dict | None = None) -> RunConfig:
    return load_config(args.config, args.set or (), extra)


def _dataset_cfg_extra(args) -> dict:
    data = {}
    for key in ("count", "seed", "speed_min", "speed_max"):
        v = getattr(args, key, None)
        if v is not None:
            data[key] = v
    return {"data": data} if data else {}


# -- synth / annotate -----------------------------------------------------------

def cmd_synth(args) -> int:
    cfg = _config(args, _dataset_cfg_extra(args))
    out = Path(args.out)
    ds = sd.build_dataset(cfg.data, calibration=cfg.mim.calibration, flow_params=cfg.mim.flow)
    sd.write_dataset(ds, out)
    write_resolved(cfg, out)
    print(f"wrote {len(ds.clips)} clips to {out} (calibration lo={ds.calibration[0]:.4f} hi={ds.calibration[1]:.4f})")
    return 0


def _clip_dirs(root: Path) -> list:
    return [(row["clip"], root / row["dir"]) for row in sd.read_manifest(root)]


def cmd_annotate(args) -> int:
    cfg = _config(args)
    root = Path(args.data)
    clips = _clip_dirs(root)
    flow = cfg.mim.flow
    raws = {}
    for cid, d in clips:
        try:
            raws[cid] = mim.video_intensity(sd.load_clip_frames(d), flow)
        except MotionCtlError:
            continue
    calibration = cfg.mim.calibration or mim.calibrate(list(raws.values()))
    sources = [(cid, (lambda c=cid: raws[c]) if cid in raws else (lambda d=d: mim.video_intensity(
        sd.load_clip_frames(d), flow))) for cid, d in clips]
    labels = mim.annotate_dataset(sources, calibration, cfg.mim.static_floor, flow, precomputed=True)
    out = Path(args.out) if args.out else root / "labels.jsonl"
    mim.write_labels(out, labels)
    if args.dump_flow:
        fdir = Path(args.dump_flow)
        fdir.mkdir(parents=True, exist_ok=True)
        for cid, d in clips:
            frames = mim.to_gray(sd.load_clip_frames(d))
            for i in range(len(frames) - 1):
                mim.write_flow(fdir / f"{cid}_f{i + 1}.flow", mim.farneback_flow(frames[i], frames[i + 1], flow))
    bad = sum("error" in r for r in labels)
    print(f"labelled {len(labels) - bad} clips ({bad} errors) -> {out}; calibration {tuple(calibration)}")
    return 0


# -- train ------------------------------------------------------------------------

def load_training_data(root: Path, fusion: str, table):
    rows = sd.read_manifest(root)
    labels = {r["clip"]: r for r in mim.read_labels(root / "labels.jsonl")}
    lat, caps, levels = [], [], []
    for row in rows:
        lab = labels.get(row["clip"])
        if lab is None or "error" in lab:
            continue
        lat.append(sd.encode(sd.load_clip_frames(root / row["dir"])))
        caps.append(row["caption"])
        levels.append(lab["level"])
    if not lat:
        raise InputError(f"no labelled clips in {root}")
    cal_path = root / "calibration.json"
    try:
        cal = json.loads(cal_path.read_text())
    except OSError as exc:
        raise StorageError(f"cannot read {cal_path}: {exc}") from exc
    return experiments.training_set(lat, caps, levels, fusion, table), (cal["lo"], cal["hi"])


def cmd_train(args) -> int:
    extra = {}
    if args.fusion:
        extra.setdefault("model", {})["fusion"] = args.fusion
    if args.steps is not None:
        extra.setdefault("train", {})["steps"] = args.steps
    cfg = _config(args, extra)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_resolved(cfg, out)
    table = build_token_table(cfg.model.token_dim, cfg.token_seed)
    if args.resume:
        ck = load_checkpoint(args.resume)
        if ck.model.config.fusion != cfg.model.fusion:
            raise ConfigError(f"checkpoint fusion {ck.model.config.fusion!r} != configured {cfg.model.fusion!r}")
        model, start = ck.model, ck.step
        opt = ck.optimizer or Optimizer(cfg.train.optimizer)
    else:
        model, start, opt = Denoiser(cfg.model), 0, Optimizer(cfg.train.optimizer)
    data, calibration = load_training_data(Path(args.data), cfg.model.fusion, table)
    schedule = cfg.schedule.build()
    loss_path = out / "loss.csv"
    mode = "a" if args.resume and loss_path.exists() else "w"
    total = cfg.train.steps
    try:
        with open(loss_path, mode, newline="") as fh:
            w = csv.writer(fh)
            if mode == "w":
                w.writerow(["step", "loss"])
            done = 0
            while done < total:
                chunk = min(cfg.train.checkpoint_every - (start + done) % cfg.train.checkpoint_every, total - done)
                losses = fit(model, data, schedule, opt, chunk, cfg.train.batch_size, cfg.train.seed, start + done)
                for k, loss in enumerate(losses):
                    w.writerow([start + done + k + 1, f"{loss:.8g}"])
                fh.flush()
                done += chunk
                save_checkpoint(out / f"step_{start + done:06d}.mjto",
                                Checkpoint(model, start + done, calibration, opt, {"token_seed": cfg.token_seed}))
    except OSError as exc:
        raise StorageError(f"cannot write {loss_path}: {exc}") from exc
    final = out / "final.mjto"
    save_checkpoint(final, Checkpoint(model, start + total, calibration, opt, {"token_seed": cfg.token_seed}))
    print(f"trained {total} steps (now at step {start + total}) -> {final}")
    return 0


# -- generate -----------------------------------------------------------------------

def _prompt(args, level) -> experiments.Prompt:
    words = tuple(args.prompt.split())
    phrase = args.phrase
    if phrase is None:
        guess = [w for w in words if w in ("ball", "box", "star")]
        colors = [i for i, w in enumerate(words[:-1]) if words[i + 1] in ("ball", "box", "star")]
        phrase = f"{words[colors[0]]} {words[colors[0] + 1]}" if colors else (guess[0] if guess else None)
    return experiments.Prompt(words, level, phrase)


def _track_from_file(path, cfg: RunConfig, model: Denoiser):
    spec = dmc.load_trajectory_spec(path)
    w, h = 4 * model.config.width, 4 * model.config.height
    if (spec.frame_width, spec.frame_height) != (w, h):
        raise InputError(f"trajectory frame {spec.frame_width}x{spec.frame_height} != model frame {w}x{h}")
    traj = dmc.Trajectory(spec.keypoints, model.config.frames, w, h)
    track = dmc.expand_to_boxes(traj.points(), spec.dx, spec.dy, w, h, 4)
    return spec, track


def cmd_generate(args) -> int:
    extra = {}
    if args.eta is not None:
        extra["guidance"] = {"eta": args.eta}
    cfg = _config(args, extra)
    ck = load_checkpoint(args.ckpt)
    model = ck.model
    table = build_token_table(model.config.token_dim, ck.extra.get("token_seed", cfg.token_seed))
    schedule = diffusion.build_schedule(*model.config.schedule, cfg.schedule.sigma_mode)
    cfg.guidance.validate(schedule.steps)
    level = args.level
    if not 1 <= level <= 10:
        raise InputError(f"intensity level must be in 1..10, got {level}")
    prompt = _prompt(args, level)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_resolved(cfg, out)
    run = {"seed": args.seed, "level": level, "prompt": list(prompt.words), "color": prompt.color,
           "calibration": list(ck.calibration), "checkpoint": str(args.ckpt)}
    guided = args.trajectory is not None
    if guided:
        spec, track = _track_from_file(args.trajectory, cfg, model)
        if spec.token_indices is not None:
            prompt = replace(prompt, phrase=None)
        cond, idx = experiments.condition_for(model, table, prompt)
        idx = tuple(spec.token_indices) if spec.token_indices is not None else idx
        if not idx:
            raise InputError("no object phrase found in the prompt; pass --phrase or token_indices")
        trace = dmc.GuidanceTrace()
        res = dmc.guided_sample(model, cond, track, idx, cfg.guidance.core(), schedule, args.seed, trace=trace)
        if trace.rows:
            trace.write(out / "trace.csv")
        run["target_boxes"] = np.round(track.boxes, 6).tolist()
        run["token_indices"] = list(idx)
    else:
        cond, idx = experiments.condition_for(model, table, replace(prompt, phrase=None))
        track = dmc.expand_to_boxes([[0.0, 0.0]] * model.config.frames, 1, 1, 4 * model.config.width,
                                    4 * model.config.height, 4)
        res = dmc.guided_sample(model, cond, track, (0,), replace(cfg.guidance.core(), eta=0.0), schedule, args.seed)
    frames = experiments.decode_batch(res.latent)[0]
    media.write_media(out, frames)
    if args.dump_attn:
        tokens = range(cond.token_count)
        evalkit.attention_heatmap_export({g: res.final_records[g] for g in cfg.guidance.layers},
                                         out / "attn", tokens, step=1)
    (out / "run.json").write_text(json.dumps(run, indent=1, sort_keys=True) + "\n")
    print(f"wrote {len(frames)} frames and out.gif to {out}")
    return 0


def cmd_dump_attn(args) -> int:
    """Attention heatmaps of an unguided sample at selected timesteps."""
    cfg = _config(args)
    ck = load_checkpoint(args.ckpt)
    model = ck.model
    table = build_token_table(model.config.token_dim, ck.extra.get("token_seed", cfg.token_seed))
    schedule = diffusion.build_schedule(*model.config.schedule, cfg.schedule.sigma_mode)
    prompt = replace(_prompt(args, args.level), phrase=None)
    cond, _ = experiments.condition_for(model, table, prompt)
    steps = set(args.steps) if args.steps else {schedule.steps, (schedule.steps + 1) // 2, 1}
    bad = [t for t in steps if not 1 <= t <= schedule.steps]
    if bad:
        raise ConfigError(f"timesteps {bad} outside 1..{schedule.steps}")
    out = Path(args.out)
    layers = tuple(args.layers) if args.layers else cfg.guidance.layers
    tokens = range(cond.token_count)
    count = 0

    def denoise(z, t, c):
        nonlocal count
        eps, records = model.predict_noise(z, t, c)
        if t in steps:
            count += len(evalkit.attention_heatmap_export({g: records[g] for g in layers}, out, tokens, step=t))
        return eps.data

    shape = (model.config.frames, model.config.channels, model.config.height, model.config.width)
    diffusion.sample(denoise, cond, schedule, args.seed, shape)
    print(f"wrote {count} heatmaps to {out}")
    return 0


# -- eval -----------------------------------------------------------------------------

def evaluate_run(run_dir: Path, threshold: float = 0.5) -> dict:
    try:
        run = json.loads((run_dir / "run.json").read_text())
    except OSError as exc:
        raise StorageError(f"cannot read {run_dir / 'run.json'}: {exc}") from exc
    frames = sd.load_clip_frames(run_dir)
    row = {"run_id": run_dir.name, "seed": run.get("seed", "")}
    if "target_boxes" in run:
        boxes = np.asarray(run["target_boxes"])
        h, w = frames.shape[1:3]
        dets = [evalkit.detect_blob(f, run["color"], threshold) for f in frames]
        s = evalkit.evaluate_direction(dets, boxes, w, h)
        row.update(mIoU=s.mIoU, AP50=s.AP50, CD=s.CD)
    if "level" in run and "calibration" in run:
        row["motion_alignment"] = evalkit.motion_alignment(frames, run["level"], run["calibration"])
    return row


def cmd_eval(args) -> int:
    runs = [Path(r) for r in args.runs]
    if not runs:
        raise InputError("no runs to evaluate")
    for r in runs:
        if not r.is_dir():
            raise StorageError(f"run directory {r} does not exist")
    rows = [evaluate_run(r) for r in runs]
    evalkit.write_metrics(args.out, rows)
    print(f"evaluated {len(rows)} runs -> {args.out}")
    return 0


# -- ablate -----------------------------------------------------------------------------

def _write_sweep(path: Path, rows: list, key: str, metrics: list):
    cols = [key, "seed"] + metrics
    try:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(cols)
            for r in rows:
                w.writerow([r[key], r["seed"]] + [f"{r[m]:.6f}" for m in metrics])
            for value in dict.fromkeys(r[key] for r in rows):
                sub = [r for r in rows if r[key] == value]
                w.writerow([value, "mean"] + [f"{np.mean([r[m] for r in sub]):.6f}" for m in metrics])
                w.writerow([value, "median"] + [f"{np.median([r[m] for r in sub]):.6f}" for m in metrics])
    except OSError as exc:
        raise StorageError(f"cannot write {path}: {exc}") from exc


def cmd_ablate(args) -> int:
    cfg = _config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_resolved(cfg, out)
    ab = cfg.ablate
    seeds = list(ab.seeds)
    base = cfg.guidance.core()
    if args.sweep == "fusion":
        if not args.ckpt:
            raise InputError("fusion sweep needs one --ckpt per fusion mode")
        rows = []
        for path in args.ckpt:
            ck = load_checkpoint(path)
            table = build_token_table(ck.model.config.token_dim, ck.extra.get("token_seed", cfg.token_seed))
            schedule = diffusion.build_schedule(*ck.model.config.schedule, cfg.schedule.sigma_mode)
            for r in experiments.intensity_sweep(ck.model, table, schedule, ab.levels, ab.clips_per_level,
                                                 ck.calibration, flow=cfg.mim.flow):
                rows.append(dict(r, fusion=ck.model.config.fusion, seed=r["seed"]))
        _write_sweep(out / "sweep_fusion.csv", rows, "fusion", ["level", "raw", "motion_alignment"])
        print(f"fusion sweep over {len(args.ckpt)} checkpoints -> {out / 'sweep_fusion.csv'}")
        return 0
    if not args.ckpt or len(args.ckpt) != 1:
        raise InputError(f"{args.sweep} sweep needs exactly one --ckpt")
    ck = load_checkpoint(args.ckpt[0])
    model = ck.model
    table = build_token_table(model.config.token_dim, ck.extra.get("token_seed", cfg.token_seed))
    schedule = diffusion.build_schedule(*model.config.schedule, cfg.schedule.sigma_mode)
    kw = dict(dx=cfg.guidance.dx, dy=cfg.guidance.dy)
    if args.sweep == "guided_steps":
        rows = experiments.guided_steps_sweep(model, table, schedule, base, ab.guided_counts, seeds, **kw)
        _write_sweep(out / "sweep_guided_steps.csv", rows, "guided_steps", ["mIoU", "AP50", "CD"])
    elif args.sweep == "lambda":
        rows = experiments.lambda_sweep(model, table, schedule, base, ab.lams, seeds, **kw)
        _write_sweep(out / "sweep_lambda.csv", rows, "lam", ["smoothness", "mIoU"])
    else:
        rows = experiments.eta_sweep(model, table, schedule, base, ab.etas, seeds, **kw)
        _write_sweep(out / "sweep_eta.csv", rows, "eta", ["mIoU", "AP50", "CD"])
    print(f"{args.sweep} sweep: {len(rows)} runs -> {out}")
    return 0


# -- parser ---------------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="motionctl", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="JSON run config")
        sp.add_argument("--set", action="append", metavar="SECTION.FIELD=VALUE",
                        help="override a config field (repeatable; flags win over the file)")
        return sp

    s = common(sub.add_parser("synth", help="render a synthetic dataset with intensity labels"))
    s.add_argument("--out", required=True)
    s.add_argument("--count", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--speed-min", dest="speed_min", type=float)
    s.add_argument("--speed-max", dest="speed_max", type=float)
    s.set_defaults(func=cmd_synth)

    s = common(sub.add_parser("annotate", help="re-label a dataset on disk from optical flow"))
    s.add_argument("--data", required=True)
    s.add_argument("--out", help="labels file (default DATA/labels.jsonl)")
    s.add_argument("--dump-flow", dest="dump_flow", help="directory for per-frame-pair flow fields")
    s.set_defaults(func=cmd_annotate)

    s = common(sub.add_parser("train", help="train the noise predictor"))
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--fusion", choices=mim.FUSION_MODES)
    s.add_argument("--steps", type=int)
    s.add_argument("--resume", help="checkpoint to continue from")
    s.set_defaults(func=cmd_train)

    def sampling(sp):
        sp.add_argument("--ckpt", required=True)
        sp.add_argument("--prompt", default="a red ball drifts")
        sp.add_argument("--phrase", help="object phrase inside the prompt (default: '<color> <shape>')")
        sp.add_argument("--level", type=int, default=5)
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--out", required=True)

    s = common(sub.add_parser("generate", help="sample a clip, optionally steered along a trajectory"))
    sampling(s)
    s.add_argument("--trajectory", help="*.traj.json target path")
    s.add_argument("--eta", type=float, help="guidance strength (overrides guidance.eta)")
    s.add_argument("--dump-attn", dest="dump_attn", action="store_true")
    s.set_defaults(func=cmd_generate)

    s = common(sub.add_parser("dump-attn", help="attention heatmaps at chosen sampling steps"))
    sampling(s)
    s.add_argument("--steps", type=int, nargs="*")
    s.add_argument("--layers", nargs="*")
    s.set_defaults(func=cmd_dump_attn)

    s = common(sub.add_parser("eval", help="score generated runs against their targets"))
    s.add_argument("runs", nargs="*")
    s.add_argument("--out", default="metrics.csv")
    s.set_defaults(func=cmd_eval)

    s = common(sub.add_parser("ablate", help="run one ablation sweep"))
    s.add_argument("--sweep", required=True, choices=("guided_steps", "lambda", "eta", "fusion"))
    s.add_argument("--ckpt", action="append")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_ablate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except MotionCtlError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
