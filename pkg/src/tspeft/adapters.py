"""PEFT adapters over a ForecastModel.

Selective methods (BitFit, LN tuning) pick a subset of existing parameters
to unfreeze. Additive methods (LoRA, VeRA, FourierFT) keep the base frozen
and add a factored side path to every targeted attention projection; their
update can be merged into the base weights for adapter-free inference.
Parameter counting has a closed form that must agree with a live attach.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numerics as nm
from .errors import ConfigError, ContractError
from .model import ForecastModel, ModelConfig
from .numerics import Rng, Tensor

METHODS = ("bitfit", "lntuning", "lora", "vera", "fourierft", "fullft", "zeroshot")
ADDITIVE = ("lora", "vera", "fourierft")
TARGETS = ("q", "k", "v", "o")


@dataclass(frozen=True)
class AdapterConfig:
    method: str
    target_matrices: tuple = TARGETS
    rank: int = 0                  # 0 = method default (LoRA 2, VeRA 16)
    n_coefficients: int = 50
    alpha: float = 300.0
    shared_seed: int = 0
    bitfit_scope: str = "all-bias"       # or "final-norm-only"
    lntuning_scope: str = "attention"    # or "all"

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}; one of {METHODS}")
        if self.rank == 0:
            object.__setattr__(self, "rank", 16 if self.method == "vera" else 2)
        bad = [t for t in self.target_matrices if t not in TARGETS]
        if bad:
            raise ConfigError(f"unknown target matrices {bad}")
        if self.method in ("lora", "vera") and self.rank < 1:
            raise ConfigError("rank must be >= 1")
        if self.method == "fourierft":
            if self.n_coefficients < 1:
                raise ConfigError("n_coefficients must be >= 1")
            if self.alpha <= 0:
                raise ConfigError("alpha must be > 0")
        if self.bitfit_scope not in ("all-bias", "final-norm-only"):
            raise ConfigError(f"unknown bitfit scope {self.bitfit_scope!r}")
        if self.lntuning_scope not in ("attention", "all"):
            raise ConfigError(f"unknown lntuning scope {self.lntuning_scope!r}")


@dataclass
class AdapterState:
    cfg: AdapterConfig
    learnables: dict = field(default_factory=dict)       # name -> Tensor
    frozen: dict = field(default_factory=dict)           # name -> np.ndarray
    targets: list = field(default_factory=list)          # adapted projection names
    selected: list = field(default_factory=list)         # selective: param names
    merged: bool = False

    @property
    def method(self) -> str:
        return self.cfg.method

    def n_trainable(self) -> int:
        return sum(t.size for t in self.learnables.values())


def _targeted_projections(model: ForecastModel, cfg: AdapterConfig) -> dict:
    """Targeted Q/K/V/O Linears keyed by projection name, in registry order."""
    out = {}
    for name, lin in model.attention_projections().items():
        role = lin.kind.removeprefix("attn_")
        if role in cfg.target_matrices:
            out[name] = lin
    if not out:
        raise ConfigError("no attention projections matched target_matrices")
    return out


def freeze_all(model: ForecastModel):
    for info in model.param_infos():
        info.tensor.requires_grad = False
        info.tensor.grad = None


def _select(model: ForecastModel, cfg: AdapterConfig) -> list:
    infos = model.param_infos()
    if cfg.method == "bitfit":
        if cfg.bitfit_scope == "final-norm-only":
            return [i for i in infos if i.final_ln and i.is_bias
                    and i.name.startswith("dec.")]
        return [i for i in infos if i.is_bias]
    if cfg.method == "lntuning":
        if cfg.lntuning_scope == "all":
            return [i for i in infos if i.kind == "layernorm"]
        return [i for i in infos if i.kind == "layernorm" and i.attn_ln]
    if cfg.method == "fullft":
        return infos
    return []


def _fourier_entries(cfg: AdapterConfig, d_out: int, d_in: int) -> tuple:
    """Frozen spectral entry locations, shared by every adapted layer."""
    flat = Rng(cfg.shared_seed).child("fourier_entries").choice_without_replacement(
        d_out * d_in, cfg.n_coefficients)
    flat = np.sort(flat)
    return flat // d_in, flat % d_in


def fourier_delta(c: Tensor, rows: np.ndarray, cols: np.ndarray,
                  shape: tuple, alpha: float) -> Tensor:
    """alpha * Real(IDFT2(S)) for the sparse spectral matrix S[rows, cols] = c.

    Uses the 1/(d_out*d_in) inverse normalization; gradient w.r.t. c is
    alpha * Real(IDFT2(grad))[rows, cols] (the transform is linear).
    """
    s = np.zeros(shape, dtype=np.float64)
    s[rows, cols] = c.data
    dw = alpha * np.fft.ifft2(s).real

    def bwd(g):
        return (alpha * np.fft.ifft2(g).real[rows, cols],)

    return nm.custom_op(dw, (c,), bwd)


class _LoraPath:
    def __init__(self, a: Tensor, b: Tensor):
        self.a, self.b = a, b

    def __call__(self, x: Tensor) -> Tensor:
        return nm.matmul(nm.matmul(x, nm.transpose(self.a, (1, 0))),
                         nm.transpose(self.b, (1, 0)))


class _VeraPath:
    def __init__(self, a: Tensor, b: Tensor, lam_d: Tensor, lam_b: Tensor):
        self.a, self.b, self.lam_d, self.lam_b = a, b, lam_d, lam_b

    def __call__(self, x: Tensor) -> Tensor:
        h = nm.mul(nm.matmul(x, nm.transpose(self.a, (1, 0))), self.lam_d)
        return nm.mul(nm.matmul(h, nm.transpose(self.b, (1, 0))), self.lam_b)


class _FourierPath:
    def __init__(self, c: Tensor, rows, cols, shape, alpha):
        self.c, self.rows, self.cols, self.shape, self.alpha = c, rows, cols, shape, alpha

    def __call__(self, x: Tensor) -> Tensor:
        dw = fourier_delta(self.c, self.rows, self.cols, self.shape, self.alpha)
        return nm.matmul(x, nm.transpose(dw, (1, 0)))


def attach(model: ForecastModel, cfg: AdapterConfig, rng: Rng) -> AdapterState:
    """Freeze the base model and install the method's trainable state."""
    freeze_all(model)
    model.adapter_paths = {}
    state = AdapterState(cfg=cfg)

    if cfg.method in ("bitfit", "lntuning", "fullft", "zeroshot"):
        for info in _select(model, cfg):
            info.tensor.requires_grad = True
            state.selected.append(info.name)
        return state

    projections = _targeted_projections(model, cfg)
    state.targets = list(projections)

    if cfg.method == "lora":
        for name, lin in projections.items():
            d_out, d_in = lin.w.shape
            bound = 1.0 / np.sqrt(d_in)
            a = Tensor(rng.child(f"{name}.A").uniform(-bound, bound, (cfg.rank, d_in)),
                       requires_grad=True)
            b = Tensor(np.zeros((d_out, cfg.rank)), requires_grad=True)
            state.learnables[f"{name}.lora_a"] = a
            state.learnables[f"{name}.lora_b"] = b
            model.adapter_paths[name] = _LoraPath(a, b)

    elif cfg.method == "vera":
        # one frozen (A, B) pair reused by every adapted matrix of this shape
        d_out, d_in = next(iter(projections.values())).w.shape
        bound = 1.0 / np.sqrt(d_in)
        shared = Rng(cfg.shared_seed)
        a_data = shared.child("vera_a").uniform(-bound, bound, (cfg.rank, d_in))
        b_data = shared.child("vera_b").uniform(-bound, bound, (d_out, cfg.rank))
        state.frozen["vera_a"] = a_data
        state.frozen["vera_b"] = b_data
        state.frozen["target_shape"] = np.array([d_out, d_in])
        a, b = Tensor(a_data), Tensor(b_data)
        for name, lin in projections.items():
            if lin.w.shape != (d_out, d_in):
                raise ContractError("VeRA shared factors require equal target shapes")
            lam_d = Tensor(np.full(cfg.rank, 0.1), requires_grad=True)
            lam_b = Tensor(np.zeros(d_out), requires_grad=True)
            state.learnables[f"{name}.lambda_d"] = lam_d
            state.learnables[f"{name}.lambda_b"] = lam_b
            model.adapter_paths[name] = _VeraPath(a, b, lam_d, lam_b)

    else:  # fourierft
        d_out, d_in = next(iter(projections.values())).w.shape
        if cfg.n_coefficients > d_out * d_in:
            raise ConfigError("n_coefficients exceeds the spectral grid size")
        rows, cols = _fourier_entries(cfg, d_out, d_in)
        state.frozen["fourier_rows"] = rows
        state.frozen["fourier_cols"] = cols
        state.frozen["target_shape"] = np.array([d_out, d_in])
        for name, lin in projections.items():
            if lin.w.shape != (d_out, d_in):
                raise ContractError("FourierFT shared entries require equal target shapes")
            c = Tensor(np.zeros(cfg.n_coefficients), requires_grad=True)
            state.learnables[f"{name}.coeffs"] = c
            model.adapter_paths[name] = _FourierPath(c, rows, cols,
                                                     (d_out, d_in), cfg.alpha)
    return state


def delta(state: AdapterState, target: str) -> Tensor:
    """The dense weight update for one adapted projection."""
    if state.method not in ADDITIVE:
        raise ContractError(f"{state.method} is a selective method; it has no delta")
    if target not in state.targets:
        raise ContractError(f"{target!r} was not adapted")
    cfg = state.cfg
    if state.method == "lora":
        a = state.learnables[f"{target}.lora_a"]
        b = state.learnables[f"{target}.lora_b"]
        return nm.matmul(b, a)
    if state.method == "vera":
        a, b = state.frozen["vera_a"], state.frozen["vera_b"]
        lam_d = state.learnables[f"{target}.lambda_d"]
        lam_b = state.learnables[f"{target}.lambda_b"]
        left = nm.mul(nm.mul(Tensor(b), lam_d), nm.reshape(lam_b, (-1, 1)))
        return nm.matmul(left, Tensor(a))
    c = state.learnables[f"{target}.coeffs"]
    rows, cols = state.frozen["fourier_rows"], state.frozen["fourier_cols"]
    return fourier_delta(c, rows, cols, _target_shape(state, target), cfg.alpha)


def _target_shape(state: AdapterState, target: str) -> tuple:
    # all adapted projections share one shape, recorded at attach time
    return tuple(int(x) for x in state.frozen["target_shape"])


def merge(model: ForecastModel, state: AdapterState) -> ForecastModel:
    """Fold every delta into the base weights and drop the adapter path."""
    if state.method not in ADDITIVE:
        raise ContractError("merge is only defined for additive methods")
    if state.merged:
        raise ContractError("adapter already merged")
    projections = model.attention_projections()
    for target in state.targets:
        projections[target].w.data += delta(state, target).data
    model.adapter_paths = {}
    state.merged = True
    return model


def unmerge(model: ForecastModel, state: AdapterState) -> ForecastModel:
    if state.method not in ADDITIVE:
        raise ContractError("unmerge is only defined for additive methods")
    if not state.merged:
        raise ContractError("adapter is not merged")
    projections = model.attention_projections()
    paths = {}
    for target in state.targets:
        projections[target].w.data -= delta(state, target).data
        paths[target] = _make_path(state, target)
    model.adapter_paths = paths
    state.merged = False
    return model


def _make_path(state: AdapterState, target: str):
    cfg = state.cfg
    if state.method == "lora":
        return _LoraPath(state.learnables[f"{target}.lora_a"],
                         state.learnables[f"{target}.lora_b"])
    if state.method == "vera":
        return _VeraPath(Tensor(state.frozen["vera_a"]), Tensor(state.frozen["vera_b"]),
                         state.learnables[f"{target}.lambda_d"],
                         state.learnables[f"{target}.lambda_b"])
    c = state.learnables[f"{target}.coeffs"]
    return _FourierPath(c, state.frozen["fourier_rows"], state.frozen["fourier_cols"],
                        _target_shape(state, target), cfg.alpha)


def trainable_params(model: ForecastModel, state: AdapterState) -> list:
    """(name, tensor) pairs the optimizer may update, in stable order."""
    out = [(i.name, i.tensor) for i in model.param_infos() if i.tensor.requires_grad]
    out.extend(sorted(state.learnables.items()))
    return out


# ---------------------------------------------------------------------------
# parameter counting
# ---------------------------------------------------------------------------


@dataclass
class ParameterBudgetReport:
    method: str
    total: int
    millions: float
    breakdown: dict
    notes: str = ""

    def display(self) -> str:
        return f"{self.total} ({format_millions(self.total)}M)"


def format_millions(count: int) -> str:
    """Millions at 3 significant figures, trailing zeros stripped."""
    m = count / 1e6
    if m == 0:
        return "0"
    from math import floor, log10
    digits = 2 - floor(log10(abs(m)))
    text = f"{round(m, digits):.{max(digits, 0)}f}"
    return text.rstrip("0").rstrip(".") if "." in text else text


def _attention_positions(mcfg: ModelConfig) -> int:
    """Encoder self-attn + decoder self-attn + decoder cross-attn blocks."""
    return mcfg.n_encoder_layers + 2 * mcfg.n_decoder_layers


def full_param_count(mcfg: ModelConfig) -> int:
    """Closed-form total parameter count of a freshly built model."""
    d, dff, v = mcfg.d_model, mcfg.d_ff, mcfg.vocab_size
    lb = 1 if mcfg.include_linear_bias else 0
    attn = 4 * (d * d + lb * d)
    ff = d * dff + lb * dff + dff * d + lb * d
    ln = 2 * d
    enc = mcfg.n_encoder_layers * (attn + ff + 2 * ln)
    dec = mcfg.n_decoder_layers * (2 * attn + ff + 3 * ln)
    emb = v * d + (mcfg.context_len + mcfg.horizon_len) * d
    return emb + enc + dec + 2 * ln  # head is tied to the embedding


def count_trainable_params(cfg: AdapterConfig, mcfg: ModelConfig) -> ParameterBudgetReport:
    """Exact trainable-parameter count; must equal the live registry count."""
    d, dff = mcfg.d_model, mcfg.d_ff
    matrices = _attention_positions(mcfg) * len(cfg.target_matrices)
    breakdown: dict[str, int] = {}
    notes = ""

    if cfg.method == "lora":
        breakdown["lora factors"] = matrices * cfg.rank * (d + d)
    elif cfg.method == "vera":
        breakdown["scaling vectors"] = matrices * (cfg.rank + d)
    elif cfg.method == "fourierft":
        breakdown["spectral coefficients"] = matrices * cfg.n_coefficients
    elif cfg.method == "bitfit":
        if cfg.bitfit_scope == "final-norm-only":
            breakdown["decoder final-norm bias"] = d
            notes = "paper-matching scope: one bias vector of length d_model"
        else:
            lb = 1 if mcfg.include_linear_bias else 0
            breakdown["attention biases"] = _attention_positions(mcfg) * 4 * d * lb
            breakdown["ff biases"] = (mcfg.n_encoder_layers + mcfg.n_decoder_layers) \
                * (dff + d) * lb
            breakdown["layer-norm biases"] = (2 * mcfg.n_encoder_layers
                                              + 3 * mcfg.n_decoder_layers + 2) * d
    elif cfg.method == "lntuning":
        if cfg.lntuning_scope == "all":
            n_ln = 2 * mcfg.n_encoder_layers + 3 * mcfg.n_decoder_layers + 2
        else:
            n_ln = mcfg.n_encoder_layers + 2 * mcfg.n_decoder_layers
        breakdown["layer-norm scale+bias"] = n_ln * 2 * d
        notes = "nearest convention to the published counts; not asserted exact"
    elif cfg.method == "fullft":
        breakdown["all parameters"] = full_param_count(mcfg)
    else:  # zeroshot
        breakdown["none"] = 0

    total = sum(breakdown.values())
    return ParameterBudgetReport(cfg.method, total, total / 1e6, breakdown, notes)
