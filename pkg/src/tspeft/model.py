"""Chronos-style forecasting model.

Mean-scaling + uniform binning tokenizer in front of a T5-flavoured
encoder-decoder transformer (pre-LN, learned absolute position embeddings,
output head tied to the token embedding). Every parameter lives in a flat
registry that classifies it for the PEFT machinery.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numerics as nm
from .errors import ConfigError, DataError
from .numerics import Rng, Tensor

CONTEXT_LEN = 72
HORIZON_LEN = 36


# ---------------------------------------------------------------------------
# tokenizer
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TokenizerConfig:
    n_bins: int = 128
    bin_low: float = -10.0
    bin_high: float = 10.0

    def __post_init__(self):
        if self.n_bins < 2:
            raise ConfigError("n_bins must be >= 2")
        if not self.bin_low < self.bin_high:
            raise ConfigError("bin_low must be < bin_high")

    @property
    def pad_id(self) -> int:
        return self.n_bins

    @property
    def eos_id(self) -> int:
        return self.n_bins + 1

    @property
    def vocab_size(self) -> int:
        return self.n_bins + 2  # PAD + EOS

    @property
    def bin_width(self) -> float:
        return (self.bin_high - self.bin_low) / self.n_bins


def tokenize(series, cfg: TokenizerConfig) -> tuple[np.ndarray, float]:
    """Mean-abs scale a series and map each value to a uniform bin id.

    Returns (token ids, scale). scale falls back to 1.0 for an all-zero
    series so the mapping stays defined.
    """
    x = np.asarray(series, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise DataError("tokenize: input contains NaN/Inf")
    s = float(np.mean(np.abs(x)))
    if s == 0.0:
        s = 1.0
    v = np.clip(x / s, cfg.bin_low, cfg.bin_high)
    ids = np.floor((v - cfg.bin_low) / cfg.bin_width).astype(np.int64)
    return np.clip(ids, 0, cfg.n_bins - 1), s


def detokenize(tokens, scale: float, cfg: TokenizerConfig) -> np.ndarray:
    """Map token ids back to bin-center values; special ids clamp to bins."""
    ids = np.clip(np.asarray(tokens, dtype=np.int64), 0, cfg.n_bins - 1)
    return (cfg.bin_low + (ids + 0.5) * cfg.bin_width) * scale


# ---------------------------------------------------------------------------
# model config
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 64
    n_heads: int = 4
    n_encoder_layers: int = 2
    n_decoder_layers: int = 2
    d_ff: int = 128
    tokenizer: TokenizerConfig = field(default_factory=TokenizerConfig)
    include_linear_bias: bool = True
    context_len: int = CONTEXT_LEN
    horizon_len: int = HORIZON_LEN

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ConfigError("d_model must be divisible by n_heads")

    @property
    def vocab_size(self) -> int:
        return self.tokenizer.vocab_size


# Dimensions follow the published T5-efficient family backing the Chronos
# variants; used by parameter counting for reproducing the count tables.
_CHRONOS_TOK = TokenizerConfig(n_bins=4094)  # vocab 4096 with PAD/EOS

PRESETS: dict[str, ModelConfig] = {
    "tiny": ModelConfig(256, 4, 4, 4, 1024, _CHRONOS_TOK),
    "small": ModelConfig(512, 8, 6, 6, 2048, _CHRONOS_TOK),
    "base": ModelConfig(768, 12, 12, 12, 3072, _CHRONOS_TOK),
    "large": ModelConfig(1024, 16, 24, 24, 4096, _CHRONOS_TOK),
    "desk": ModelConfig(64, 2, 2, 2, 128),
}


def preset(name: str) -> ModelConfig:
    try:
        return PRESETS[name]
    except KeyError:
        raise ConfigError(f"unknown preset {name!r}; choose one of {sorted(PRESETS)}")


# ---------------------------------------------------------------------------
# parameter registry
# ---------------------------------------------------------------------------


@dataclass
class ParamInfo:
    name: str
    tensor: Tensor
    kind: str           # attn_q | attn_k | attn_v | attn_o | layernorm | embedding | ff
    is_bias: bool = False
    attn_ln: bool = False   # layer norm directly in front of an attention sub-block
    final_ln: bool = False


class Linear:
    """y = x W^T + b with W stored (d_out, d_in)."""

    def __init__(self, name, d_in, d_out, rng: Rng, kind: str, bias: bool):
        bound = 1.0 / np.sqrt(d_in)
        self.name = name
        self.w = Tensor(rng.uniform(-bound, bound, (d_out, d_in)))
        self.b = Tensor(np.zeros(d_out)) if bias else None
        self.kind = kind

    def __call__(self, x: Tensor, extra=None) -> Tensor:
        y = nm.matmul(x, nm.transpose(self.w, (1, 0)))
        if extra is not None:
            y = y + extra(x)
        if self.b is not None:
            y = y + self.b
        return y

    def params(self):
        yield ParamInfo(self.name + ".w", self.w, self.kind)
        if self.b is not None:
            yield ParamInfo(self.name + ".b", self.b, self.kind, is_bias=True)


class LayerNorm:
    def __init__(self, name, d, attn_ln=False, final_ln=False):
        self.name = name
        self.g = Tensor(np.ones(d))
        self.b = Tensor(np.zeros(d))
        self.attn_ln = attn_ln
        self.final_ln = final_ln

    def __call__(self, x: Tensor) -> Tensor:
        return nm.layer_norm(x, self.g, self.b)

    def params(self):
        yield ParamInfo(self.name + ".g", self.g, "layernorm",
                        attn_ln=self.attn_ln, final_ln=self.final_ln)
        yield ParamInfo(self.name + ".b", self.b, "layernorm", is_bias=True,
                        attn_ln=self.attn_ln, final_ln=self.final_ln)


class Attention:
    """Multi-head attention with Q/K/V/O projections of size d_model x d_model."""

    def __init__(self, name, cfg: ModelConfig, rng: Rng):
        self.name = name
        self.n_heads = cfg.n_heads
        self.d_head = cfg.d_model // cfg.n_heads
        bias = cfg.include_linear_bias
        self.q = Linear(name + ".q", cfg.d_model, cfg.d_model, rng.child("q"), "attn_q", bias)
        self.k = Linear(name + ".k", cfg.d_model, cfg.d_model, rng.child("k"), "attn_k", bias)
        self.v = Linear(name + ".v", cfg.d_model, cfg.d_model, rng.child("v"), "attn_v", bias)
        self.o = Linear(name + ".o", cfg.d_model, cfg.d_model, rng.child("o"), "attn_o", bias)

    def _split(self, x: Tensor, b, t) -> Tensor:
        x = nm.reshape(x, (b, t, self.n_heads, self.d_head))
        return nm.transpose(x, (0, 2, 1, 3))

    def __call__(self, x_q: Tensor, x_kv: Tensor, mask=None, paths=None) -> Tensor:
        paths = paths or {}
        b, tq = x_q.shape[0], x_q.shape[1]
        tk = x_kv.shape[1]
        q = self._split(self.q(x_q, paths.get(self.q.name)), b, tq)
        k = self._split(self.k(x_kv, paths.get(self.k.name)), b, tk)
        v = self._split(self.v(x_kv, paths.get(self.v.name)), b, tk)
        scores = nm.scale(nm.matmul(q, nm.transpose(k, (0, 1, 3, 2))),
                          1.0 / np.sqrt(self.d_head))
        if mask is not None:
            scores = scores + mask
        ctx = nm.matmul(nm.softmax(scores), v)
        ctx = nm.reshape(nm.transpose(ctx, (0, 2, 1, 3)), (b, tq, -1))
        return self.o(ctx, paths.get(self.o.name))

    def params(self):
        for lin in (self.q, self.k, self.v, self.o):
            yield from lin.params()

    def projections(self):
        return {"q": self.q, "k": self.k, "v": self.v, "o": self.o}


class FeedForward:
    def __init__(self, name, cfg: ModelConfig, rng: Rng):
        bias = cfg.include_linear_bias
        self.wi = Linear(name + ".wi", cfg.d_model, cfg.d_ff, rng.child("wi"), "ff", bias)
        self.wo = Linear(name + ".wo", cfg.d_ff, cfg.d_model, rng.child("wo"), "ff", bias)

    def __call__(self, x: Tensor) -> Tensor:
        return self.wo(nm.relu(self.wi(x)))

    def params(self):
        yield from self.wi.params()
        yield from self.wo.params()


class EncoderLayer:
    def __init__(self, name, cfg, rng):
        self.ln_attn = LayerNorm(name + ".ln_attn", cfg.d_model, attn_ln=True)
        self.attn = Attention(name + ".attn", cfg, rng.child("attn"))
        self.ln_ff = LayerNorm(name + ".ln_ff", cfg.d_model)
        self.ff = FeedForward(name + ".ff", cfg, rng.child("ff"))

    def __call__(self, x, paths):
        h = self.ln_attn(x)
        x = x + self.attn(h, h, paths=paths)
        return x + self.ff(self.ln_ff(x))

    def params(self):
        yield from self.ln_attn.params()
        yield from self.attn.params()
        yield from self.ln_ff.params()
        yield from self.ff.params()


class DecoderLayer:
    def __init__(self, name, cfg, rng):
        self.ln_self = LayerNorm(name + ".ln_self", cfg.d_model, attn_ln=True)
        self.self_attn = Attention(name + ".self_attn", cfg, rng.child("self"))
        self.ln_cross = LayerNorm(name + ".ln_cross", cfg.d_model, attn_ln=True)
        self.cross_attn = Attention(name + ".cross_attn", cfg, rng.child("cross"))
        self.ln_ff = LayerNorm(name + ".ln_ff", cfg.d_model)
        self.ff = FeedForward(name + ".ff", cfg, rng.child("ff"))

    def __call__(self, x, enc_out, causal_mask, paths):
        h = self.ln_self(x)
        x = x + self.self_attn(h, h, mask=causal_mask, paths=paths)
        x = x + self.cross_attn(self.ln_cross(x), enc_out, paths=paths)
        return x + self.ff(self.ln_ff(x))

    def params(self):
        yield from self.ln_self.params()
        yield from self.self_attn.params()
        yield from self.ln_cross.params()
        yield from self.cross_attn.params()
        yield from self.ln_ff.params()
        yield from self.ff.params()


@dataclass
class ForecastResult:
    """K sampled trajectories plus their per-step (lower) median."""

    samples: np.ndarray   # (n_samples, horizon)
    point: np.ndarray     # (horizon,)


def lower_median(values: np.ndarray, axis=0) -> np.ndarray:
    """Order-statistic median; the lower middle element for even counts."""
    v = np.sort(np.asarray(values, dtype=np.float64), axis=axis)
    n = v.shape[axis]
    return np.take(v, (n - 1) // 2, axis=axis)


class ForecastModel:
    """Encoder-decoder transformer over tokenized series.

    ``adapter_paths`` maps a projection parameter's weight name to a callable
    ``f(x) -> Tensor`` whose output is added to the projection output; this
    is the factored compute path used by the additive PEFT adapters.
    """

    def __init__(self, cfg: ModelConfig, rng: Rng):
        self.cfg = cfg
        d = cfg.d_model
        bound = 1.0 / np.sqrt(d)
        self.embedding = Tensor(rng.child("emb").uniform(-bound, bound,
                                                         (cfg.vocab_size, d)))
        self.enc_pos = Tensor(rng.child("enc_pos").uniform(-bound, bound,
                                                           (cfg.context_len, d)))
        self.dec_pos = Tensor(rng.child("dec_pos").uniform(-bound, bound,
                                                           (cfg.horizon_len, d)))
        self.enc_layers = [EncoderLayer(f"enc.{i}", cfg, rng.child(f"enc{i}"))
                           for i in range(cfg.n_encoder_layers)]
        self.dec_layers = [DecoderLayer(f"dec.{i}", cfg, rng.child(f"dec{i}"))
                           for i in range(cfg.n_decoder_layers)]
        self.enc_final_ln = LayerNorm("enc.final_ln", d, final_ln=True)
        self.dec_final_ln = LayerNorm("dec.final_ln", d, final_ln=True)
        self.adapter_paths: dict = {}

    # -- registry ----------------------------------------------------------

    def param_infos(self) -> list[ParamInfo]:
        infos = [
            ParamInfo("embedding", self.embedding, "embedding"),
            ParamInfo("enc.pos", self.enc_pos, "embedding"),
            ParamInfo("dec.pos", self.dec_pos, "embedding"),
        ]
        for layer in self.enc_layers + self.dec_layers:
            infos.extend(layer.params())
        infos.extend(self.enc_final_ln.params())
        infos.extend(self.dec_final_ln.params())
        names = [i.name for i in infos]
        assert len(names) == len(set(names)), "registry names must be unique"
        return infos

    def registry(self) -> dict[str, ParamInfo]:
        return {i.name: i for i in self.param_infos()}

    def n_params(self) -> int:
        return sum(i.tensor.size for i in self.param_infos())

    def attention_projections(self) -> dict[str, Linear]:
        """All Q/K/V/O projection Linears keyed by a stable block path."""
        out = {}
        for layer in self.enc_layers:
            for role, lin in layer.attn.projections().items():
                out[lin.name] = lin
        for layer in self.dec_layers:
            for attn in (layer.self_attn, layer.cross_attn):
                for role, lin in attn.projections().items():
                    out[lin.name] = lin
        return out

    # -- forward -----------------------------------------------------------

    def _check_ids(self, ids: np.ndarray):
        if ids.size and (ids.min() < 0 or ids.max() >= self.cfg.vocab_size):
            raise IndexError(f"token id out of range [0, {self.cfg.vocab_size})")

    def encode(self, ctx_ids: np.ndarray) -> Tensor:
        ctx_ids = np.asarray(ctx_ids, dtype=np.int64)
        self._check_ids(ctx_ids)
        t = ctx_ids.shape[-1]
        x = nm.embedding(self.embedding, ctx_ids) + nm.embedding(
            self.enc_pos, np.arange(t))
        for layer in self.enc_layers:
            x = layer(x, self.adapter_paths)
        return self.enc_final_ln(x)

    def decode(self, enc_out: Tensor, dec_input_ids: np.ndarray,
               last_only: bool = False) -> Tensor:
        """Logits over the vocab for each position of the shifted decoder input.

        ``last_only`` restricts the final norm and head to the last position
        (an inference shortcut for autoregressive sampling; positions are
        independent past the last decoder layer, so the values agree).
        """
        dec_input_ids = np.asarray(dec_input_ids, dtype=np.int64)
        self._check_ids(dec_input_ids)
        t = dec_input_ids.shape[-1]
        x = nm.embedding(self.embedding, dec_input_ids) + nm.embedding(
            self.dec_pos, np.arange(t))
        mask = Tensor(np.triu(np.full((t, t), -1e9), k=1))
        for layer in self.dec_layers:
            x = layer(x, enc_out, mask, self.adapter_paths)
        if last_only:
            x = Tensor(x.data[:, -1:, :])
        x = self.dec_final_ln(x)
        return nm.matmul(x, nm.transpose(self.embedding, (1, 0)))  # tied head

    def forward(self, context_tokens, decoder_tokens) -> Tensor:
        """Next-token logits for every decoder position.

        Position t of the result conditions only on decoder tokens < t (the
        input is shifted right internally, starting from PAD), so the logits
        at t are the model's prediction for decoder_tokens[t].
        """
        ctx = np.atleast_2d(np.asarray(context_tokens, dtype=np.int64))
        dec = np.atleast_2d(np.asarray(decoder_tokens, dtype=np.int64))
        self._check_ids(dec)
        pad = self.cfg.tokenizer.pad_id
        dec_in = np.concatenate(
            [np.full((dec.shape[0], 1), pad, dtype=np.int64), dec[:, :-1]], axis=1)
        logits = self.decode(self.encode(ctx), dec_in)
        if np.asarray(decoder_tokens).ndim == 1:
            logits = nm.reshape(logits, logits.shape[1:])
        return logits


def sample_forecast(model: ForecastModel, context, n_samples: int,
                    rng: Rng) -> ForecastResult:
    """Autoregressive categorical sampling (temperature 1.0), median point.

    All samples advance together as one batch; each step redecodes the
    growing prefix (no KV cache at desk scale).
    """
    if n_samples < 1:
        raise ConfigError("n_samples must be >= 1")
    return sample_forecast_many(model, [context], n_samples, [rng])[0]


def encode_contexts(model: ForecastModel, contexts) -> tuple[Tensor, np.ndarray]:
    """Tokenize and encode several contexts once; reused across sampling runs."""
    cfg = model.cfg
    ids = np.empty((len(contexts), cfg.context_len), dtype=np.int64)
    scales = np.empty(len(contexts))
    for i, ctx in enumerate(contexts):
        ids[i], scales[i] = tokenize(ctx, cfg.tokenizer)
    return model.encode(ids), scales


def sample_from_encoded(model: ForecastModel, enc_out: Tensor,
                        scales: np.ndarray, n_samples: int,
                        rngs) -> list[ForecastResult]:
    """Autoregressive sampling for several pre-encoded windows at once.

    ``rngs`` supplies one independent stream per window, so each window's
    draws depend only on its own stream, not on which windows share the
    decode batch.
    """
    cfg = model.cfg
    tok = cfg.tokenizer
    n_win = enc_out.shape[0]
    if len(rngs) != n_win:
        raise ConfigError("need exactly one rng per window")
    enc_rep = Tensor(np.repeat(enc_out.data, n_samples, axis=0))
    dec_in = np.full((n_win * n_samples, 1), tok.pad_id, dtype=np.int64)
    draws = np.empty((n_win, n_samples, cfg.horizon_len), dtype=np.int64)
    for t in range(cfg.horizon_len):
        logits = model.decode(enc_rep, dec_in, last_only=True).data[:, -1, :]
        z = logits - logits.max(axis=-1, keepdims=True)
        p = np.exp(z)
        p /= p.sum(axis=-1, keepdims=True)
        p = p.reshape(n_win, n_samples, -1)
        for i, rng in enumerate(rngs):
            draws[i, :, t] = rng.categorical(p[i])
        if t + 1 < cfg.horizon_len:
            dec_in = np.concatenate(
                [dec_in, draws[:, :, t].reshape(-1, 1)], axis=1)
    results = []
    for i in range(n_win):
        samples = detokenize(draws[i], scales[i], tok)
        results.append(ForecastResult(samples=samples,
                                      point=lower_median(samples, axis=0)))
    return results


def sample_forecast_many(model: ForecastModel, contexts, n_samples: int,
                         rngs) -> list[ForecastResult]:
    """sample_forecast for several windows at once, one decode batch per step."""
    if len(contexts) != len(rngs):
        raise ConfigError("need exactly one rng per context")
    enc_out, scales = encode_contexts(model, contexts)
    return sample_from_encoded(model, enc_out, scales, n_samples, rngs)
