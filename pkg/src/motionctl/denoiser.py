"""Toy spatio-temporal noise predictor with exposed cross-attention maps.

Layout (G = latent grid):
  conv-in -> down: res, cross-attn @G -> pool -> res @G/2 -> pool
  -> mid: res, cross-attn, temporal attn, res @G/4
  -> up: upsample + skip, res, cross-attn, temporal attn @G/2
  -> upsample + skip, temporal attn, res @G -> conv-out.
Every res block adds a projection of the timestep embedding after its norm.
The quarter-resolution bottleneck gives every output cell a view of the whole
frame. Attention is single-head.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import diffusion, mim
from . import numcore as nc
from .errors import ConfigError, InvalidShapeError, NumericError
from .vocab import TokenTable, intensity_word, tokenize

ATTN_LAYERS = ("down", "mid", "up")
RES_BLOCKS = ("down", "down2", "mid", "mid2", "up", "up2")
TEMPORAL_STAGES = ("mid", "up", "up2")
OUTPUT_MODES = ("v", "eps")
LOSS_MODES = ("v", "eps")


@dataclass
class DenoiserConfig:
    channels: int = 3
    dim: int = 32
    token_dim: int = 32
    height: int = 16
    width: int = 16
    frames: int = 8
    max_frames: int = 16
    fusion: str = "token_concat"
    guidance_layers: tuple = ("mid", "up")
    temporal_stages: tuple = TEMPORAL_STAGES
    causal: bool = False
    fps: float = 8.0
    init_seed: int = 0
    # "v": eps_hat = sqrt(1-ab) z + sqrt(ab) F, so network error shrinks at high noise.
    # "eps": eps_hat = F.  Both train on the same noise MSE.
    output: str = "v"
    # "eps": plain noise MSE.  "v": noise MSE divided by alpha_bar_t, i.e. the MSE of F
    # against v = sqrt(ab) eps - sqrt(1-ab) z0, which keeps high-noise steps in play.
    loss: str = "v"
    # "ramp": level rows start evenly spaced along one random direction, so nearby
    # levels begin with nearby embeddings; "normal": independent rows
    intensity_init: str = "ramp"
    schedule: tuple = (50, 2e-3, 0.2)
    temporal_conv: bool = True   # kernel-3 conv over frames inside every res block

    def validate(self):
        if self.output not in OUTPUT_MODES:
            raise ConfigError(f"output must be one of {OUTPUT_MODES}, got {self.output!r}")
        if self.intensity_init not in ("ramp", "normal"):
            raise ConfigError(f"intensity_init must be 'ramp' or 'normal', got {self.intensity_init!r}")
        if self.loss not in LOSS_MODES:
            raise ConfigError(f"loss must be one of {LOSS_MODES}, got {self.loss!r}")
        if len(self.schedule) != 3:
            raise ConfigError(f"schedule must be (steps, beta_start, beta_end), got {self.schedule!r}")
        if self.fusion not in mim.FUSION_MODES:
            raise ConfigError(f"fusion must be one of {mim.FUSION_MODES}, got {self.fusion!r}")
        if self.height % 4 or self.width % 4:
            raise ConfigError(f"latent grid {self.height}x{self.width} must be divisible by 4")
        if not 1 <= self.frames <= self.max_frames:
            raise ConfigError(f"frames must be in 1..{self.max_frames}, got {self.frames}")
        if "mid" not in self.temporal_stages or any(s not in TEMPORAL_STAGES for s in self.temporal_stages):
            raise ConfigError(f"temporal_stages must include 'mid' and be drawn from {TEMPORAL_STAGES}, "
                              f"got {self.temporal_stages}")
        bad = [g for g in self.guidance_layers if g not in ATTN_LAYERS]
        if bad:
            raise ConfigError(f"unknown guidance layer(s) {bad}; choose from {ATTN_LAYERS}")


def _param_shapes(cfg: DenoiserConfig) -> dict:
    d, dt, c = cfg.dim, cfg.token_dim, cfg.channels
    shapes = {
        "conv_in.w": (3, 3, c, d), "conv_in.b": (d,),
        "temb.w1": (d + 1, d), "temb.b1": (d,), "temb.w2": (d, d), "temb.b2": (d,),
        "global.w": (dt, d), "global.b": (d,),
        "up.merge.w": (3, 3, 2 * d, d), "up.merge.b": (d,),
        "up2.merge.w": (3, 3, 2 * d, d), "up2.merge.b": (d,),
        "out.norm.g": (d,), "out.norm.b": (d,),
        "conv_out.w": (3, 3, d, c), "conv_out.b": (c,),
        "intensity.table": (10, dt),
    }
    for s in (f"{stage}.temporal" for stage in cfg.temporal_stages):
        shapes.update({
            f"{s}.norm.g": (d,), f"{s}.norm.b": (d,),
            f"{s}.q": (d, d), f"{s}.k": (d, d), f"{s}.v": (d, d),
            f"{s}.o.w": (d, d), f"{s}.o.b": (d,),
            f"{s}.rel_bias": (2 * cfg.max_frames - 1,),
        })
    for s in RES_BLOCKS:
        shapes.update({
            f"{s}.res.norm.g": (d,), f"{s}.res.norm.b": (d,),
            f"{s}.res.temb.w": (d, d), f"{s}.res.temb.b": (d,),
            f"{s}.res.conv.w": (3, 3, d, d), f"{s}.res.conv.b": (d,),
        })
        if cfg.temporal_conv:
            shapes[f"{s}.res.tconv.w"] = (3 * d, d)
    for s in ATTN_LAYERS:
        shapes.update({
            f"{s}.attn.norm.g": (d,), f"{s}.attn.norm.b": (d,),
            f"{s}.attn.q": (d, d), f"{s}.attn.k": (dt, d), f"{s}.attn.v": (dt, d),
            f"{s}.attn.o.w": (d, d), f"{s}.attn.o.b": (d,),
        })
    return shapes


def init_params(cfg: DenoiserConfig) -> dict:
    """Fan-in scaled uniform weights; zero biases, conv-out and temporal convs; unit norms."""
    cfg.validate()
    rng = np.random.default_rng(cfg.init_seed)
    params = {}
    for name, shape in sorted(_param_shapes(cfg).items()):
        if name.endswith(".norm.g"):
            arr = np.ones(shape)
        elif name == "intensity.table":
            arr = rng.standard_normal(shape)
            if cfg.intensity_init == "ramp":
                base, axis = arr[0], arr[1] / np.linalg.norm(arr[1])
                arr = base + np.outer(np.linspace(-1.5, 1.5, shape[0]), axis) * np.sqrt(shape[1])
        elif len(shape) == 1 or name.startswith("conv_out") or name.endswith(("rel_bias", "tconv.w")):
            arr = np.zeros(shape)
        else:
            fan_in = int(np.prod(shape[:-1]))
            bound = np.sqrt(3.0 / fan_in)
            arr = rng.uniform(-bound, bound, size=shape)
        params[name] = arr.astype(np.float32)
    return params


def timestep_features(t, dim: int, fps: float) -> np.ndarray:
    """Sinusoidal embedding of integer timesteps with a scaled fps feature appended."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-np.log(1000.0) * np.arange(half) / half)
    ang = t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang), np.full((len(t), 1), fps / 10.0)], axis=1)


@dataclass
class AttentionRecord:
    """Row-stochastic attention of one layer: ``maps`` is ``(B, L, U, N)``
    over the layer's ``grid`` of U = h*w cells and N tokens."""

    layer: str
    maps: nc.Tensor
    grid: tuple

    def frame(self, i: int, item: int = 0) -> np.ndarray:
        return self.maps.data[item, i]


@dataclass
class Denoiser:
    config: DenoiserConfig
    params: dict = field(default=None)

    def __post_init__(self):
        self.config.validate()
        self.config.schedule = tuple(self.config.schedule)
        self.schedule = diffusion.build_schedule(*self.config.schedule)
        if self.params is None:
            self.params = init_params(self.config)
        shapes = _param_shapes(self.config)
        for name, shape in shapes.items():
            if name not in self.params or self.params[name].shape != shape:
                raise ConfigError(f"parameter {name} missing or mis-shaped (expected {shape})")

    # -- conditioning ------------------------------------------------------

    def condition(self, text_tokens, levels=None, phrase_indices=(), table=None) -> mim.Conditioning:
        """Fuse ``(B, N, d)`` text embeddings with per-item intensity levels."""
        text = nc.as_tensor(text_tokens)
        if text.ndim == 2:
            text = nc.reshape(text, (1,) + text.shape)
        if text.shape[-1] != self.config.token_dim:
            raise ConfigError(f"token embedding dim {text.shape[-1]} != configured {self.config.token_dim}")
        mode = self.config.fusion
        c_m = None
        if mode in ("token_concat", "global_add"):
            if levels is None:
                raise ConfigError(f"fusion {mode} needs an intensity level")
            lv = np.broadcast_to(np.asarray(levels, dtype=np.int64), (text.shape[0],))
            c_m = mim.encode_intensity(lv, table if table is not None else self.params["intensity.table"])
        return mim.fuse_conditioning(text, c_m, mode, tuple(phrase_indices))

    # -- forward -----------------------------------------------------------

    def _wrap(self, trainable: bool) -> dict:
        return {k: nc.Tensor(v, requires_grad=trainable) for k, v in self.params.items()}

    def _res(self, p, s, h, e):
        """Pre-norm residual conv; ``e`` is the per-item ``(B, d)`` timestep embedding."""
        b, d = e.shape
        x = nc.group_norm(h, p[f"{s}.res.norm.g"], p[f"{s}.res.norm.b"])
        shift = nc.reshape(nc.linear(nc.silu(e), p[f"{s}.res.temb.w"], p[f"{s}.res.temb.b"]), (b, 1, 1, 1, d))
        x = nc.silu(nc.reshape(nc.reshape(x, (b, -1) + h.shape[1:]) + shift, h.shape))
        out = h + nc.conv2d_same(x, p[f"{s}.res.conv.w"], p[f"{s}.res.conv.b"])
        if self.config.temporal_conv:
            out = out + self.temporal_conv(x, p[f"{s}.res.tconv.w"], b, self.config.causal)
        return out

    @staticmethod
    def temporal_conv(x, w, batch, causal=False):
        """Zero-padded kernel-3 convolution along the frame axis at every cell;
        causal mode shifts the window so frame i sees only frames i-2..i."""
        n, gh, gw, d = x.shape
        x = nc.reshape(x, (batch, n // batch, gh * gw, d))
        pad = np.zeros((batch, 1, gh * gw, d), dtype=x.data.dtype)
        xp = nc.concat([pad, pad, x] if causal else [pad, x, pad], axis=1)
        frames = n // batch
        taps = [nc.slice_(xp, (slice(None), slice(k, k + frames))) for k in range(3)]
        return nc.reshape(nc.linear(nc.concat(taps, axis=-1), w), (n, gh, gw, d))

    def spatial_cross_attention(self, p, s, h, tokens, batch):
        """Per-frame cross-attention; returns the residual output and the map record."""
        n, gh, gw, d = h.shape
        x = nc.group_norm(h, p[f"{s}.attn.norm.g"], p[f"{s}.attn.norm.b"])
        q = nc.reshape(nc.linear(x, p[f"{s}.attn.q"]), (batch, n // batch, gh * gw, d))
        k = nc.reshape(nc.linear(tokens, p[f"{s}.attn.k"]), (batch, 1) + tokens.shape[-2:-1] + (d,))
        v = nc.reshape(nc.linear(tokens, p[f"{s}.attn.v"]), (batch, 1) + tokens.shape[-2:-1] + (d,))
        a = nc.softmax_rows(nc.matmul(q, nc.transpose(k, (0, 1, 3, 2))) * (1.0 / np.sqrt(d)))
        o = nc.linear(nc.matmul(a, v), p[f"{s}.attn.o.w"], p[f"{s}.attn.o.b"])
        return h + nc.reshape(o, h.shape), AttentionRecord(s, a, (gh, gw))

    def temporal_attention(self, p, m, batch, name: str = "mid.temporal"):
        """Attention across frames at each cell, with a learned relative-offset bias."""
        n, gh, gw, d = m.shape
        frames = n // batch
        x = nc.group_norm(m, p[f"{name}.norm.g"], p[f"{name}.norm.b"])
        x = nc.transpose(nc.reshape(x, (batch, frames, gh * gw, d)), (0, 2, 1, 3))
        q, k, v = (nc.linear(x, p[f"{name}.{w}"]) for w in "qkv")
        off = np.arange(frames)[None, :] - np.arange(frames)[:, None] + self.config.max_frames - 1
        scores = nc.matmul(q, nc.transpose(k, (0, 1, 3, 2))) * (1.0 / np.sqrt(d))
        scores = scores + nc.take(p[f"{name}.rel_bias"], off, axis=0)
        if self.config.causal:
            scores = scores + np.triu(np.full((frames, frames), -1e9), k=1)
        o = nc.linear(nc.matmul(nc.softmax_rows(scores), v), p[f"{name}.o.w"], p[f"{name}.o.b"])
        o = nc.reshape(nc.transpose(o, (0, 2, 1, 3)), m.shape)
        return m + o

    def predict_noise(self, z, t, cond: mim.Conditioning, params: dict | None = None, records_only=None):
        """Noise estimate for latents ``(B, L, C, H, W)`` (or one video ``(L, C, H, W)``).

        Returns ``(eps_hat, records)`` with one ``AttentionRecord`` per
        cross-attention layer. ``params`` overrides the wrapped parameters
        (used by training to pass traced leaves). With ``records_only`` set to
        a tuple of layer names the pass stops once those records exist and
        ``eps_hat`` is None.
        """
        cfg = self.config
        z = nc.as_tensor(z)
        single = z.ndim == 4
        if single:
            z = nc.reshape(z, (1,) + z.shape)
        b, frames, c, hh, ww = z.shape
        if (c, hh, ww) != (cfg.channels, cfg.height, cfg.width) or frames > cfg.max_frames:
            raise InvalidShapeError(f"latent shape {z.shape} does not match model config")
        tokens = nc.as_tensor(cond.tokens)
        if tokens.shape[-1] != cfg.token_dim:
            raise ConfigError(f"token embedding dim {tokens.shape[-1]} != configured {cfg.token_dim}")
        if tokens.shape[0] != b:
            if tokens.shape[0] != 1:
                raise InvalidShapeError(f"conditioning batch {tokens.shape[0]} != latent batch {b}")
            tokens = nc.concat([tokens] * b, axis=0) if b > 1 else tokens
        p = params if params is not None else self._wrap(False)

        x = nc.reshape(nc.transpose(z, (0, 1, 3, 4, 2)), (b * frames, hh, ww, c))
        h = nc.conv2d_same(x, p["conv_in.w"], p["conv_in.b"])
        tt = np.broadcast_to(np.asarray(t), (b,))
        feats = timestep_features(tt, cfg.dim, cfg.fps)
        e = nc.linear(nc.silu(nc.linear(feats, p["temb.w1"], p["temb.b1"])), p["temb.w2"], p["temb.b2"])
        if cond.global_vec is not None:
            g = nc.as_tensor(cond.global_vec)
            if g.shape[0] != b:
                g = nc.concat([g] * b, axis=0)
            e = e + nc.linear(g, p["global.w"], p["global.b"])
        h = nc.reshape(nc.reshape(h, (b, frames, hh, ww, cfg.dim)) + nc.reshape(e, (b, 1, 1, 1, cfg.dim)),
                       (b * frames, hh, ww, cfg.dim))

        records = {}
        h = self._res(p, "down", h, e)
        h, records["down"] = self.spatial_cross_attention(p, "down", h, tokens, b)
        h2 = self._res(p, "down2", nc.avg_pool2(h), e)
        m = self._res(p, "mid", nc.avg_pool2(h2), e)
        m, records["mid"] = self.spatial_cross_attention(p, "mid", m, tokens, b)
        if records_only is not None and set(records_only) <= set(records):
            return None, records
        m = self._res(p, "mid2", self.temporal_attention(p, m, b), e)
        u = nc.conv2d_same(nc.concat([nc.upsample2(m), h2], axis=-1), p["up.merge.w"], p["up.merge.b"])
        u = self._res(p, "up", u, e)
        u, records["up"] = self.spatial_cross_attention(p, "up", u, tokens, b)
        if records_only is not None and set(records_only) <= set(records):
            return None, records
        if "up" in cfg.temporal_stages:
            u = self.temporal_attention(p, u, b, "up.temporal")
        u = nc.conv2d_same(nc.concat([nc.upsample2(u), h], axis=-1), p["up2.merge.w"], p["up2.merge.b"])
        if "up2" in cfg.temporal_stages:
            u = self.temporal_attention(p, u, b, "up2.temporal")
        u = self._res(p, "up2", u, e)
        out = nc.conv2d_same(nc.silu(nc.group_norm(u, p["out.norm.g"], p["out.norm.b"])),
                             p["conv_out.w"], p["conv_out.b"])
        eps = nc.transpose(nc.reshape(out, (b, frames, hh, ww, c)), (0, 1, 4, 2, 3))
        if cfg.output == "v":
            ab = np.array([self.schedule.ab(int(k)) for k in tt]).reshape(b, 1, 1, 1, 1)
            eps = z * np.sqrt(1.0 - ab) + eps * np.sqrt(ab)
        if single:
            eps = nc.reshape(eps, eps.shape[1:])
        return eps, records

    def __call__(self, z, t, cond) -> np.ndarray:
        return self.predict_noise(z, t, cond)[0].data


# -- training ---------------------------------------------------------------

@dataclass
class OptimizerConfig:
    kind: str = "adam"
    lr: float = 1e-3
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_norm: float = 1.0
    decay_steps: int = 0          # cosine decay to lr * final_frac over this many updates; 0 = constant
    final_frac: float = 0.1

    def rate(self, k: float) -> float:
        if self.decay_steps <= 0:
            return self.lr
        c = 0.5 * (1 + np.cos(np.pi * min(k, self.decay_steps) / self.decay_steps))
        return self.lr * (self.final_frac + (1 - self.final_frac) * c)

    def validate(self):
        if self.kind not in ("sgd", "adam"):
            raise ConfigError(f"optimizer kind must be 'sgd' or 'adam', got {self.kind!r}")
        if self.lr < 0:
            raise ConfigError(f"learning rate must be >= 0, got {self.lr}")
        if self.decay_steps < 0 or not 0 <= self.final_frac <= 1:
            raise ConfigError(f"need decay_steps >= 0 and final_frac in [0, 1], got "
                              f"{self.decay_steps}, {self.final_frac}")


class Optimizer:
    """Gradient descent with momentum, or Adam; state is a flat dict of arrays."""

    def __init__(self, config: OptimizerConfig, state: dict | None = None):
        config.validate()
        self.config = config
        self.state = state if state is not None else {"step": np.zeros(1, np.float32)}

    def update(self, params: dict, grads: dict):
        cfg = self.config
        if cfg.lr == 0:
            return
        self.state["step"] = self.state["step"] + 1
        k = float(self.state["step"][0])
        lr = cfg.rate(k - 1)
        for name, g in grads.items():
            if cfg.kind == "sgd":
                vel = self.state.setdefault(f"m.{name}", np.zeros_like(params[name]))
                vel *= cfg.momentum
                vel += g
                params[name] = (params[name] - lr * vel).astype(np.float32)
            else:
                m = self.state.setdefault(f"m.{name}", np.zeros_like(params[name]))
                v = self.state.setdefault(f"v.{name}", np.zeros_like(params[name]))
                m *= cfg.beta1
                m += (1 - cfg.beta1) * g
                v *= cfg.beta2
                v += (1 - cfg.beta2) * g * g
                mhat = m / (1 - cfg.beta1 ** k)
                vhat = v / (1 - cfg.beta2 ** k)
                params[name] = (params[name] - lr * mhat / (np.sqrt(vhat) + cfg.eps)).astype(np.float32)


@dataclass
class Batch:
    z0: np.ndarray          # (B, L, C, H, W)
    text: np.ndarray        # (B, N, d) frozen token embeddings
    levels: np.ndarray      # (B,) ints in 1..10


def train_step(model: Denoiser, batch: Batch, schedule, opt: Optimizer, seed) -> float:
    """One noise-prediction step; returns the pre-update loss (weighted per ``config.loss``)."""
    rng = np.random.default_rng(seed)
    b = batch.z0.shape[0]
    t = rng.integers(1, schedule.steps + 1, size=b)
    eps = rng.standard_normal(batch.z0.shape)
    ab = schedule.alpha_bar[t - 1].reshape((b,) + (1,) * (batch.z0.ndim - 1))
    zt = np.sqrt(ab) * batch.z0 + np.sqrt(1 - ab) * eps
    try:
        p = model._wrap(True)
        with nc.tracing():
            cond = model.condition(batch.text, batch.levels, table=p["intensity.table"])
            eps_hat, _ = model.predict_noise(zt, t, cond, params=p)
            err = nc.square(eps_hat - eps)
            if model.config.loss == "v":
                err = err * (1.0 / ab)
            loss = nc.mean(err)
    except NumericError as exc:
        raise NumericError(f"{exc}; {_diagnostics(model.params)}") from exc
    names = sorted(p)
    grads = dict(zip(names, nc.backward(loss, [p[n] for n in names])))
    gnorm = float(np.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads.values())))
    lv = loss.item()
    if not np.isfinite(lv) or not np.isfinite(gnorm):
        raise NumericError(f"non-finite loss {lv} (grad norm {gnorm}); {_diagnostics(model.params)}")
    clip = opt.config.clip_norm
    if clip and gnorm > clip:
        grads = {k: g * (clip / gnorm) for k, g in grads.items()}
    opt.update(model.params, grads)
    return lv


def _diagnostics(params: dict) -> str:
    norms = {k: float(np.linalg.norm(v)) for k, v in params.items()}
    worst = sorted(norms.items(), key=lambda kv: -kv[1])[:3]
    return "largest parameter norms: " + ", ".join(f"{k}={v:.3g}" for k, v in worst)


def text_tokens_for(words, level, fusion: str, table: TokenTable, phrase=None):
    """Token embeddings for a caption; ``text_word`` fusion appends the intensity word."""
    words = list(words)
    if fusion == "text_word":
        words = words + [intensity_word(int(level))]
    return tokenize(words, table, phrase)


@dataclass
class TrainingSet:
    """Encoded clips with their frozen text embeddings and intensity labels."""

    latents: np.ndarray     # (M, L, C, H, W)
    text: np.ndarray        # (M, N, d)
    levels: np.ndarray      # (M,)

    def batch(self, idx) -> Batch:
        return Batch(self.latents[idx], self.text[idx], self.levels[idx])


def fit(model: Denoiser, data: TrainingSet, schedule, opt: Optimizer, steps: int,
        batch_size: int = 4, seed: int = 0, start: int = 0, log=None) -> list:
    """Run ``steps`` training steps from step index ``start``; returns the losses.

    Batch composition and noise draws depend only on ``(seed, step)``, so a
    resumed run replays the same stream as an uninterrupted one.
    """
    losses = []
    m = len(data.latents)
    for k in range(start, start + steps):
        rng = np.random.default_rng([seed, k, 0])
        idx = rng.choice(m, size=min(batch_size, m), replace=False)
        losses.append(train_step(model, data.batch(idx), schedule, opt, [seed, k, 1]))
        if log is not None:
            log(k, losses[-1])
    return losses
