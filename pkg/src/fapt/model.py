"""Channel-table predictor: forward pipeline and the optional dynamic-prompt path.

Stages: per-sample normalisation and real/imag split, shared encoder
(two down-sampling blocks, flatten, linear, LeakyReLU) followed by K-head
attention, input projection to ``F x d_model``, a frozen pre-LN transformer
stack with trainable Q/V low-rank adapters, output projection to
``F x 2 x N x M`` and complex re-assembly after denormalisation.
"""

import math
from dataclasses import asdict, dataclass, fields, replace
from typing import List, Optional

import numpy as np

from .io import (FLAG_ADAPTER, FLAG_BUFFER, FLAG_TRAINABLE, TensorEntry, read_checkpoint,
                 write_checkpoint)
from .nn import (MLP, ConfigError, DownSampling, LayerNorm, LeakyReLU, Linear, LoRALinear,
                 Module, MultiHeadAttention, Parameter, TransformerBlock)
from .scenario import SIGMA_FLOOR

PAD_TOKEN = 256
VOCAB_SIZE = 257
TASK_TEXT = "task: forecast the next {f} channel tables of all fluid-antenna ports from the last {t}"
DATASET_TEXT = "data: {n}x{m} port tables, multipath LoS channel, moving UE"


class DimensionError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    t_in: int = 8
    f_out: int = 8
    n: int = 20
    m: int = 10
    d_model: int = 64
    n_heads: int = 4
    n_layers: int = 2
    d_hidden: int = 256
    lora_rank: int = 4
    prompt_enabled: bool = False
    prompt_len: int = 96
    dtype: str = "float64"
    out_hidden: int = 0
    seed: int = 0
    frozen_seed: int = 0

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if self.lora_rank < 1:
            raise ConfigError("lora_rank must be >= 1")
        if self.n < 4 or self.m < 4:
            raise ConfigError("port table must be at least 4x4 for two halvings")
        if self.t_in < 1 or self.f_out < 1 or self.n_layers < 1:
            raise ConfigError("t_in, f_out and n_layers must be >= 1")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype}")
        if self.prompt_enabled and self.prompt_len < 1:
            raise ConfigError("prompt_len must be >= 1")

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    @property
    def reduced(self):
        return math.ceil(math.ceil(self.n / 2) / 2), math.ceil(math.ceil(self.m / 2) / 2)

    @property
    def output_hidden(self) -> int:
        return self.out_hidden or self.d_hidden

    def with_(self, **kw) -> "ModelConfig":
        return replace(self, **kw)

    @classmethod
    def full_scale(cls, **kw) -> "ModelConfig":
        base = dict(t_in=8, f_out=8, n=100, m=50, d_model=768, n_heads=8, n_layers=6,
                    d_hidden=2048, lora_rank=4)
        base.update(kw)
        return cls(**base)

    @classmethod
    def from_dict(cls, d) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class PromptContext:
    task_text: str
    dataset_text: str
    stats: tuple
    text: str
    token_ids: Optional[np.ndarray] = None
    embedded: Optional[np.ndarray] = None


# ---------------------------------------------------------------------------
# stages
# ---------------------------------------------------------------------------

def preprocess(past: np.ndarray, dtype=np.float64):
    """Batched normalisation ``(B, T, N, M)`` complex -> real, imag, mu (B,), sigma (B,)."""
    past = np.asarray(past)
    if past.ndim != 4 or not np.iscomplexobj(past):
        raise DimensionError(f"expected complex (B, T, N, M) input, got {past.dtype} {past.shape}")
    x = past.astype(np.complex128)
    mu = x.mean(axis=(1, 2, 3))
    xc = x - mu[:, None, None, None]
    sigma = np.sqrt(0.5 * np.mean(xc.real**2 + xc.imag**2, axis=(1, 2, 3)))
    sigma = np.maximum(sigma, SIGMA_FLOOR)
    xn = xc / sigma[:, None, None, None]
    return xn.real.astype(dtype), xn.imag.astype(dtype), mu, sigma


def assemble_output(y: np.ndarray, mu, sigma) -> np.ndarray:
    """``(B, F, 2, N, M)`` real -> denormalised complex ``(B, F, N, M)``."""
    y = np.asarray(y, dtype=np.float64)
    mu = np.asarray(mu).reshape(-1, 1, 1, 1)
    sigma = np.asarray(sigma, dtype=np.float64).reshape(-1, 1, 1, 1)
    return sigma * (y[:, :, 0] + 1j * y[:, :, 1]) + mu


class EncoderBlock(Module):
    def __init__(self, cfg: ModelConfig, rng):
        super().__init__()
        dt = cfg.np_dtype
        self.down1 = DownSampling(cfg.t_in, rng, dtype=dt)
        self.down2 = DownSampling(cfg.t_in, rng, dtype=dt)
        rn, rm = cfg.reduced
        self.proj = Linear(rn * rm, cfg.d_model, rng, dtype=dt)
        self.act = LeakyReLU()

    def forward(self, x):
        h = self.down2.forward(self.down1.forward(x))
        self._shape = h.shape
        b, t = h.shape[:2]
        return self.act.forward(self.proj.forward(h.reshape(b, t, -1)))

    def backward(self, dy):
        dh = self.proj.backward(self.act.backward(dy)).reshape(self._shape)
        return self.down1.backward(self.down2.backward(dh))


class SharedModule(Module):
    """Encoder + attention applied with the same weights to real and imaginary parts."""

    def __init__(self, cfg: ModelConfig, rng):
        super().__init__()
        self.encoder = EncoderBlock(cfg, rng)
        self.attn = MultiHeadAttention(cfg.d_model, cfg.n_heads, rng, dtype=cfg.np_dtype)

    def forward(self, real, imag):
        b = real.shape[0]
        z = np.concatenate([real, imag], axis=0)
        a = self.attn.forward(self.encoder.forward(z))
        return np.stack([a[:b], a[b:]], axis=2)

    def backward(self, dx):
        da = np.concatenate([dx[:, :, 0], dx[:, :, 1]], axis=0)
        dz = self.encoder.backward(self.attn.backward(da))
        b = dx.shape[0]
        return dz[:b], dz[b:]


class InputProjection(Module):
    """``(B, T, 2, d)`` -> ``(B, F, d)``: per-row two-layer map, then a learned 2T -> F mix."""

    def __init__(self, cfg: ModelConfig, rng):
        super().__init__()
        dt = cfg.np_dtype
        self.mlp = MLP(cfg.d_model, cfg.d_hidden, cfg.d_model, rng, dtype=dt)
        self.mix = Linear(2 * cfg.t_in, cfg.f_out, rng, dtype=dt)

    def forward(self, x):
        b, t, two, d = x.shape
        rows = self.mlp.forward(x.reshape(b, t * two, d))
        return self.mix.forward(rows.transpose(0, 2, 1)).transpose(0, 2, 1)

    def backward(self, dy):
        drows = self.mix.backward(dy.transpose(0, 2, 1)).transpose(0, 2, 1)
        dx = self.mlp.backward(drows)
        b, rows, d = dx.shape
        return dx.reshape(b, rows // 2, 2, d)


class Backbone(Module):
    """Frozen positional embedding + pre-LN blocks + final LayerNorm."""

    def __init__(self, cfg: ModelConfig, rng, max_len: int):
        super().__init__()
        dt = cfg.np_dtype
        self.pos = Parameter((0.01 * rng.standard_normal((max_len, cfg.d_model))).astype(dt),
                             trainable=False)
        self.blocks: List[TransformerBlock] = []
        for i in range(cfg.n_layers):
            blk = TransformerBlock(cfg.d_model, cfg.n_heads, rng, lora_rank=cfg.lora_rank,
                                   n_layers=cfg.n_layers, dtype=dt)
            setattr(self, f"h{i}", blk)
            self.blocks.append(blk)
        self.ln_f = LayerNorm(cfg.d_model, trainable=False, dtype=dt)

    def forward(self, x):
        h = x + self.pos.value[: x.shape[1]]
        for blk in self.blocks:
            h = blk.forward(h)
        return self.ln_f.forward(h)

    def backward(self, dy):
        dh = self.ln_f.backward(dy)
        for blk in reversed(self.blocks):
            dh = blk.backward(dh)
        return dh


class OutputProjection(Module):
    def __init__(self, cfg: ModelConfig, rng):
        super().__init__()
        self.cfg = cfg
        self.mlp = MLP(cfg.d_model, cfg.output_hidden, 2 * cfg.n * cfg.m, rng, dtype=cfg.np_dtype)

    def forward(self, x):
        b, f, _ = x.shape
        return self.mlp.forward(x).reshape(b, f, 2, self.cfg.n, self.cfg.m)

    def backward(self, dy):
        b, f = dy.shape[:2]
        return self.mlp.backward(dy.reshape(b, f, -1))


# ---------------------------------------------------------------------------
# prompt path
# ---------------------------------------------------------------------------

def _fmt(v: float) -> str:
    return f"{v:.6g}"


def build_prompt(past: np.ndarray, cfg: ModelConfig) -> PromptContext:
    """Dynamic prompt for one ``(T, N, M)`` raw (unnormalised) input sample.

    Statistics are taken over the entry moduli and placed first so truncation
    to ``prompt_len`` tokens drops static text before the live numbers.
    """
    mag = np.abs(np.asarray(past, dtype=np.complex128)).ravel()
    stats = (float(mag.max()), float(mag.min()), float(mag.mean()), float(mag.std()),
             float(np.median(mag)))
    task = TASK_TEXT.format(f=cfg.f_out, t=cfg.t_in)
    data = DATASET_TEXT.format(n=cfg.n, m=cfg.m)
    stat_text = "max {} min {} mean {} std {} median {}".format(*map(_fmt, stats))
    return PromptContext(task, data, stats, f"{stat_text}; {task}; {data}")


def tokenize(text: str, length: int) -> np.ndarray:
    """Byte-level token ids padded with :data:`PAD_TOKEN` or truncated to ``length``."""
    ids = np.full(length, PAD_TOKEN, dtype=np.int64)
    raw = np.frombuffer(text.encode("utf-8"), dtype=np.uint8)[:length]
    ids[: raw.size] = raw
    return ids


class PromptEncoder(Module):
    """Frozen byte embedding table plus a trainable two-layer per-token map.

    The second layer starts at zero so the initial prompt rows are exactly zero.
    """

    def __init__(self, cfg: ModelConfig, frozen_rng, rng):
        super().__init__()
        dt = cfg.np_dtype
        self.embedding = Parameter((0.02 * frozen_rng.standard_normal((VOCAB_SIZE, cfg.d_model))).astype(dt),
                                   trainable=False)
        self.mlp = MLP(cfg.d_model, cfg.d_model, cfg.d_model, rng, dtype=dt, zero_out=True)

    def embed(self, token_ids: np.ndarray) -> np.ndarray:
        return self.embedding.value[token_ids]

    def forward(self, embedded):
        return self.mlp.forward(embedded)

    def backward(self, dy):
        return self.mlp.backward(dy)


def tokenize_and_embed(text: str, table: np.ndarray, length: int) -> np.ndarray:
    return table[tokenize(text, length)]


# ---------------------------------------------------------------------------
# full model
# ---------------------------------------------------------------------------

class PortLLM(Module):
    """Channel-table predictor: complex ``(B, T, N, M)`` -> complex ``(B, F, N, M)``.

    Frozen weights (backbone, positional and token embeddings) are drawn from
    ``cfg.frozen_seed``; every trainable tensor, including the adapters' ``A``
    matrices, from ``cfg.seed``.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        frozen_rng = np.random.default_rng(np.random.SeedSequence(cfg.frozen_seed, spawn_key=(7,)))
        rng = np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=(11,)))
        max_len = cfg.f_out + (cfg.prompt_len if cfg.prompt_enabled else 0)
        self.shared = SharedModule(cfg, rng)
        self.in_proj = InputProjection(cfg, rng)
        self.backbone = Backbone(cfg, frozen_rng, max_len)
        self.out_proj = OutputProjection(cfg, rng)
        if cfg.prompt_enabled:
            self.prompt = PromptEncoder(cfg, frozen_rng, rng)
        else:
            self.prompt = None
        adapter_rng = np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=(13,)))
        for mod in self.backbone.modules():
            if isinstance(mod, LoRALinear):
                a = mod.lora_a.value
                a[...] = (0.02 * adapter_rng.standard_normal(a.shape)).astype(a.dtype)

    # -- helpers -----------------------------------------------------------
    def adapters(self):
        return [m for m in self.modules() if isinstance(m, LoRALinear)]

    def check_input(self, past):
        c = self.cfg
        if past.ndim == 3:
            past = past[None]
        if past.shape[1:] != (c.t_in, c.n, c.m):
            raise DimensionError(
                f"model expects (B, {c.t_in}, {c.n}, {c.m}) inputs, got {tuple(past.shape)}")
        return past

    def prompt_tokens(self, past):
        return np.stack([tokenize(build_prompt(p, self.cfg).text, self.cfg.prompt_len) for p in past])

    # -- forward / backward ------------------------------------------------
    def forward(self, past, adapters: bool = True):
        """Predict future tables. ``adapters=False`` runs the frozen path only."""
        past = self.check_input(np.asarray(past))
        c = self.cfg
        dt = c.np_dtype
        real, imag, mu, sigma = preprocess(past, dt)
        x = self.shared.forward(real, imag)
        xt = self.in_proj.forward(x)
        for ad in self.adapters():
            ad.enabled = adapters
        self._lp = 0
        if self.prompt is not None:
            emb = self.prompt.embed(self.prompt_tokens(past))
            if adapters:
                prows = self.prompt.forward(emb)
            else:
                prows = np.zeros_like(emb)
            self._lp = prows.shape[1]
            xt = np.concatenate([prows.astype(dt, copy=False), xt], axis=1)
        h = self.backbone.forward(xt)
        y = self.out_proj.forward(h[:, self._lp:])
        self._mu, self._sigma = mu, sigma
        self._batch, self._hlen = past.shape[0], h.shape[1]
        return assemble_output(y, mu, sigma)

    def backward(self, d_real, d_imag):
        """Backpropagate ``dL/dRe(S_hat)`` and ``dL/dIm(S_hat)``; fills parameter grads."""
        dt = self.cfg.np_dtype
        s = self._sigma.reshape(-1, 1, 1, 1)
        dy = np.stack([s * d_real, s * d_imag], axis=2).astype(dt)
        dh_tail = self.out_proj.backward(dy)
        dh = np.zeros((self._batch, self._hlen, self.cfg.d_model), dtype=dt)
        dh[:, self._lp:] = dh_tail
        dxt = self.backbone.backward(dh)
        if self._lp:
            self.prompt.backward(dxt[:, : self._lp])
            dxt = dxt[:, self._lp:]
        dx = self.in_proj.backward(dxt)
        self.shared.backward(dx)

    def predict(self, past, batch_size: int = 256):
        """Inference-mode prediction in chunks; restores the previous mode."""
        was_training = self.training
        self.eval()
        past = self.check_input(np.asarray(past))
        out = [self.forward(past[i:i + batch_size]) for i in range(0, past.shape[0], batch_size)]
        self.train(was_training)
        if not out:
            c = self.cfg
            return np.zeros((0, c.f_out, c.n, c.m), np.complex128)
        return np.concatenate(out, axis=0)

    def __call__(self, history, steps=None, offset=0):
        """Predictor plug-in contract: ``(history (B,T,N,M), steps) -> (B,F,N,M)``."""
        if steps is not None and steps != self.cfg.f_out:
            raise DimensionError(f"model predicts {self.cfg.f_out} steps, {steps} requested")
        return self.predict(history)

    # -- persistence -------------------------------------------------------
    def entries(self):
        out = []
        for name, p in self.named_parameters():
            flags = (FLAG_TRAINABLE if p.trainable else 0) | (FLAG_ADAPTER if p.adapter else 0)
            out.append(TensorEntry(name, p.value, flags))
        for name, b in self.named_buffers():
            out.append(TensorEntry(name, np.asarray(b), FLAG_BUFFER))
        return out

    def save(self, path) -> None:
        write_checkpoint(path, asdict(self.cfg), self.entries())

    @classmethod
    def load(cls, path) -> "PortLLM":
        config, entries = read_checkpoint(path)
        model = cls(ModelConfig.from_dict(config))
        model.load_entries(entries)
        return model

    def load_entries(self, entries) -> None:
        params = dict(self.named_parameters())
        buffers = dict(self.named_buffers())
        expected = set(params) | set(buffers)
        missing = expected - set(entries)
        extra = set(entries) - expected
        if missing or extra:
            raise DimensionError(f"checkpoint mismatch: missing {sorted(missing)}, extra {sorted(extra)}")
        for name, e in entries.items():
            if name in params:
                p = params[name]
                if p.value.shape != e.value.shape:
                    raise DimensionError(f"{name}: checkpoint shape {e.value.shape} vs model {p.value.shape}")
                p.value[...] = e.value
            else:
                self.set_buffer(name, e.value.astype(self.cfg.np_dtype))

    def trainable_parameters(self):
        return [(n, p) for n, p in self.named_parameters() if p.trainable]
