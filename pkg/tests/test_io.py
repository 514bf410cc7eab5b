import json
import struct

import numpy as np
import pytest
from PIL import Image

from motionctl import media
from motionctl.checkpoint import MAGIC, Checkpoint, load_checkpoint, save_checkpoint
from motionctl.config import RunConfig, load_config, parse_override, write_resolved
from motionctl.denoiser import Denoiser, DenoiserConfig, Optimizer, OptimizerConfig
from motionctl.errors import ConfigError, FormatError, InputError, StorageError


def _tiny():
    return Denoiser(DenoiserConfig(height=8, width=8, frames=4, fusion="global_add", init_seed=3))


# -- checkpoints -------------------------------------------------------------

def test_checkpoint_roundtrip_is_bit_exact(tmp_path):
    model = _tiny()
    opt = Optimizer(OptimizerConfig())
    opt.update(model.params, {k: np.ones_like(v) for k, v in model.params.items()})
    save_checkpoint(tmp_path / "a.mjto", Checkpoint(model, 17, (0.1, 2.5), opt, {"token_seed": 4}))
    ck = load_checkpoint(tmp_path / "a.mjto")
    assert ck.step == 17 and ck.calibration == (0.1, 2.5) and ck.extra == {"token_seed": 4}
    assert ck.model.config == model.config
    assert ck.model.params.keys() == model.params.keys()
    for k, v in model.params.items():
        assert ck.model.params[k].tobytes() == v.tobytes()
    for k, v in opt.state.items():
        assert np.asarray(ck.optimizer.state[k], dtype=np.float32).tobytes() == np.asarray(v, dtype=np.float32).tobytes()
    save_checkpoint(tmp_path / "b.mjto", ck)
    assert (tmp_path / "a.mjto").read_bytes() == (tmp_path / "b.mjto").read_bytes()


def test_checkpoint_rejects_bad_magic_version_and_dims(tmp_path):
    model = _tiny()
    save_checkpoint(tmp_path / "a.mjto", Checkpoint(model))
    raw = (tmp_path / "a.mjto").read_bytes()
    assert raw[:4] == MAGIC
    (tmp_path / "magic.mjto").write_bytes(b"XXXX" + raw[4:])
    (tmp_path / "ver.mjto").write_bytes(raw[:4] + struct.pack("<I", 99) + raw[8:])
    for name in ("magic", "ver"):
        with pytest.raises(FormatError):
            load_checkpoint(tmp_path / f"{name}.mjto")
    hlen = struct.unpack_from("<I", raw, 8)[0]
    header = json.loads(raw[12:12 + hlen])
    header["model"]["dim"] = 16
    head = json.dumps(header, sort_keys=True).encode()
    (tmp_path / "dims.mjto").write_bytes(raw[:8] + struct.pack("<I", len(head)) + head + raw[12 + hlen:])
    with pytest.raises(FormatError):
        load_checkpoint(tmp_path / "dims.mjto")
    with pytest.raises(StorageError):
        load_checkpoint(tmp_path / "missing.mjto")


# -- config --------------------------------------------------------------------

def test_defaults_validate_and_sync_schedule():
    cfg = RunConfig().validate()
    assert cfg.model.schedule == (cfg.schedule.steps, cfg.schedule.beta_start, cfg.schedule.beta_end)


def test_file_then_overrides(tmp_path):
    (tmp_path / "c.json").write_text(json.dumps({"guidance": {"eta": 2.0, "layers": ["up"]}, "seed": 3}))
    cfg = load_config(tmp_path / "c.json", ["guidance.eta=7.5", "train.optimizer.kind=sgd"])
    assert cfg.guidance.eta == 7.5 and cfg.guidance.layers == ("up",) and cfg.seed == 3
    assert cfg.train.optimizer.kind == "sgd"
    out = write_resolved(cfg, tmp_path / "run")
    again = load_config(out)
    assert again.to_dict() == cfg.to_dict()


@pytest.mark.parametrize("override, field", [
    ("guidance.etaa=1", "guidance.etaa"),
    ("data.speed_min=5", "speed_min"),
    ("guidance.t_final=80", "final guidance timestep"),
    ("model.fusion=concat", "fusion"),
    ("train.steps=1.5", "train.steps"),
    ("mim.calibration=[2, 1]", "mim.calibration"),
])
def test_invalid_fields_are_named(override, field):
    with pytest.raises((ConfigError, InputError), match=field.replace(".", r"\.")):
        load_config(None, [override])


def test_override_parsing():
    assert parse_override("a.b=[1, 2]") == (["a", "b"], [1, 2])
    assert parse_override("a=text") == (["a"], "text")
    with pytest.raises(ConfigError):
        parse_override("novalue")


def test_unreadable_or_broken_config(tmp_path):
    with pytest.raises(StorageError):
        load_config(tmp_path / "nope.json")
    (tmp_path / "bad.json").write_text("{")
    with pytest.raises(ConfigError):
        load_config(tmp_path / "bad.json")


# -- media ------------------------------------------------------------------------

def _frames(seed=0):
    return np.random.default_rng(seed).uniform(size=(4, 24, 24, 3))


def test_gif_bytes_reproducible(tmp_path):
    media.write_gif(tmp_path / "a.gif", _frames())
    media.write_gif(tmp_path / "b.gif", _frames())
    assert (tmp_path / "a.gif").read_bytes() == (tmp_path / "b.gif").read_bytes()
    im = Image.open(tmp_path / "a.gif")
    assert im.n_frames == 4 and im.info["duration"] == media.GIF_DELAY_MS


def test_palette_colours_survive_exactly(tmp_path):
    f = np.zeros((2, 8, 8, 3))
    f[0, :4] = (1.0, 0.0, 0.0)
    f[1, 4:] = (0.0, 0.0, 1.0)
    media.write_gif(tmp_path / "c.gif", f)
    im = Image.open(tmp_path / "c.gif")
    first = np.asarray(im.convert("RGB"))
    assert (first[:4] == (255, 0, 0)).all() and (first[4:] == 0).all()
    im.seek(1)
    assert (np.asarray(im.convert("RGB"))[4:] == (0, 0, 255)).all()


def test_quantize_picks_nearest_palette_entry():
    f = _frames(1)[0]
    idx = media.quantize(f)
    rgb = np.round(f * 255).reshape(-1, 3)
    d = ((rgb[:, None, :] - media.PALETTE[None].astype(float)) ** 2).sum(-1)
    assert (d[np.arange(len(rgb)), idx.ravel()] == d.min(axis=1)).all()


def test_write_media_layout(tmp_path):
    media.write_media(tmp_path, _frames())
    assert sorted(p.name for p in tmp_path.iterdir()) == [
        "frame_0000.png", "frame_0001.png", "frame_0002.png", "frame_0003.png", "out.gif"]
