"""Optimization and experiment orchestration.

Adam over the trainable parameter set, teacher-forced cross-entropy
pretraining on the source domain (the desk-scale stand-in for foundation
pre-training), PEFT fine-tuning with a learning-rate grid selected on
validation MSE, and the rank / coefficient sweep harness.
"""

from __future__ import annotations

import sys
from dataclasses import dataclass, field, replace

import numpy as np

from . import adapters, metrics
from . import numerics as nm
from .adapters import AdapterConfig, AdapterState, ParameterBudgetReport
from .errors import ConfigError, DataError, TrainingDivergence
from .model import ForecastModel, ModelConfig, tokenize
from .numerics import Rng, Tensor

LR_GRID = (1e-2, 1e-3, 1e-4, 1e-5)

VERA_RANK_AXIS = (1, 2, 4, 8, 16, 32)
FOURIER_N_AXIS = (25, 50, 100, 200)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float | None = None      # None -> grid search
    lr_grid: tuple = LR_GRID
    batch_size: int = 16
    max_steps: int = 200
    eval_every: int = 50
    patience: int = 5                       # early-stop patience, in evals
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    # validation-selection protocol (cheap); final test eval uses the full one
    val_n_samples: int = 5
    val_max_windows: int = 8
    test_n_samples: int = 20
    test_n_runs: int = 10

    def __post_init__(self):
        if self.learning_rate is not None and self.learning_rate <= 0:
            raise ConfigError("learning_rate must be > 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")


class Adam:
    """Standard Adam with bias correction over (name, Tensor) pairs."""

    def __init__(self, params, cfg: TrainConfig):
        self.params = list(params)
        self.cfg = cfg
        self.t = 0
        self.m = {name: np.zeros_like(p.data) for name, p in self.params}
        self.v = {name: np.zeros_like(p.data) for name, p in self.params}

    def step(self, lr: float):
        cfg = self.cfg
        self.t += 1
        bc1 = 1.0 - cfg.beta1 ** self.t
        bc2 = 1.0 - cfg.beta2 ** self.t
        for name, p in self.params:
            g = p.grad
            if g is None:
                continue
            if not np.all(np.isfinite(g)):
                raise TrainingDivergence(f"non-finite gradient in {name!r}")
            m = self.m[name]
            v = self.v[name]
            m *= cfg.beta1
            m += (1 - cfg.beta1) * g
            v *= cfg.beta2
            v += (1 - cfg.beta2) * g * g
            p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + cfg.eps)

    def zero_grad(self):
        for _, p in self.params:
            p.grad = None


def adam_step(params, state: Adam, lr: float):
    """One optimizer step over pre-populated gradients."""
    state.step(lr)
    state.zero_grad()
    return state


# ---------------------------------------------------------------------------
# batching
# ---------------------------------------------------------------------------


def _tokenize_windows(windows, tok_cfg):
    ctx = np.empty((len(windows), len(windows[0].context)), dtype=np.int64)
    tgt = np.empty((len(windows), len(windows[0].horizon)), dtype=np.int64)
    for i, w in enumerate(windows):
        ids, s = tokenize(w.context, tok_cfg)
        ctx[i] = ids
        # horizon tokens reuse the context scale (the decoder's frame of reference)
        v = np.clip(np.asarray(w.horizon) / s, tok_cfg.bin_low, tok_cfg.bin_high)
        raw = np.floor((v - tok_cfg.bin_low) / tok_cfg.bin_width).astype(np.int64)
        tgt[i] = np.clip(raw, 0, tok_cfg.n_bins - 1)
    return ctx, tgt


def _batches(n: int, batch_size: int, rng: Rng):
    order = rng.shuffle(list(range(n)))
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def teacher_forced_loss(model: ForecastModel, ctx_ids, tgt_ids) -> Tensor:
    logits = model.forward(ctx_ids, tgt_ids)
    b, t, v = logits.shape
    return nm.softmax_cross_entropy(nm.reshape(logits, (b * t, v)),
                                    tgt_ids.reshape(-1))


# ---------------------------------------------------------------------------
# training loops
# ---------------------------------------------------------------------------


@dataclass
class TrainLog:
    events: list = field(default_factory=list)

    def log(self, **kv):
        self.events.append(kv)

    def to_text(self) -> str:
        return "\n".join(
            " ".join(f"{k}={v}" for k, v in ev.items()) for ev in self.events
        ) + "\n"


def _train(model: ForecastModel, state: AdapterState | None, windows, val_windows,
           cfg: TrainConfig, lr: float, log: TrainLog, rng: Rng):
    """Shared loop: minimize teacher-forced CE, early-stop on validation MSE."""
    tok = model.cfg.tokenizer
    ctx, tgt = _tokenize_windows(windows, tok)
    if state is not None:
        params = adapters.trainable_params(model, state)
    else:
        params = [(i.name, i.tensor) for i in model.param_infos()
                  if i.tensor.requires_grad]
    opt = Adam(params, cfg)

    best_val = np.inf
    best_snapshot = None
    evals_since_best = 0
    step = 0
    while step < cfg.max_steps:
        for idx in _batches(len(windows), cfg.batch_size, rng.child(f"epoch.{step}")):
            loss = teacher_forced_loss(model, ctx[idx], tgt[idx])
            if not np.isfinite(loss.data):
                raise TrainingDivergence(f"loss diverged at step {step}")
            opt.zero_grad()
            nm.backward(loss)
            opt.step(lr)
            opt.zero_grad()
            step += 1
            if step % cfg.eval_every == 0 or step == cfg.max_steps:
                val_mse = _validation_mse(model, val_windows, cfg, rng)
                log.log(step=step, loss=round(float(loss.data), 6), lr=lr,
                        val_mse=val_mse)
                if val_mse < best_val:
                    best_val = val_mse
                    best_snapshot = {n: p.data.copy() for n, p in params}
                    evals_since_best = 0
                else:
                    evals_since_best += 1
                if evals_since_best >= cfg.patience:
                    step = cfg.max_steps
            if step >= cfg.max_steps:
                break
    if best_snapshot is not None:
        for name, p in params:
            p.data = best_snapshot[name].copy()
    return best_val


def _validation_mse(model, val_windows, cfg: TrainConfig, rng: Rng) -> float:
    vw = sorted(val_windows, key=lambda w: w.key())[:cfg.val_max_windows]
    report = metrics.evaluate(model, vw, rng.child("val"),
                              n_samples=cfg.val_n_samples, n_runs=1)
    return report.mse_raw


def pretrain(model: ForecastModel, dataset, cfg: TrainConfig) -> TrainLog:
    """Full-parameter training on the source domain ("zero-shot" stand-in)."""
    for info in model.param_infos():
        info.tensor.requires_grad = True
    log = TrainLog()
    lr = cfg.learning_rate or 1e-3
    rng = Rng(cfg.seed).child("pretrain")
    _train(model, None, dataset.train, dataset.val, cfg, lr, log, rng)
    return log


@dataclass
class FinetuneResult:
    state: AdapterState
    model: ForecastModel
    chosen_lr: float | None
    report: metrics.MetricReport
    budget: ParameterBudgetReport
    log: TrainLog


def finetune(base_model_factory, adapter_cfg: AdapterConfig, dataset,
             cfg: TrainConfig) -> FinetuneResult:
    """Run the LR grid, pick by validation MSE, evaluate the winner on test.

    ``base_model_factory`` returns a fresh copy of the pretrained base model
    (e.g. ``lambda: serialize.load_model(path)``), so every grid point and
    the frozen base stay untouched by other grid points.
    """
    log = TrainLog()
    budget = adapters.count_trainable_params(adapter_cfg, _model_cfg(base_model_factory))
    rng = Rng(cfg.seed)

    if adapter_cfg.method == "zeroshot":
        model = base_model_factory()
        state = adapters.attach(model, adapter_cfg,
                                Rng(adapter_cfg.shared_seed).child("attach"))
        report = metrics.evaluate(model, dataset.test, rng.child("test"),
                                  n_samples=cfg.test_n_samples, n_runs=cfg.test_n_runs)
        log.log(event="zeroshot-eval", mse=report.mse_raw)
        return FinetuneResult(state, model, None, report, budget, log)

    grid = (cfg.learning_rate,) if cfg.learning_rate is not None else cfg.lr_grid
    best = None
    for lr in grid:
        model = base_model_factory()
        state = adapters.attach(model, adapter_cfg,
                                Rng(adapter_cfg.shared_seed).child("attach"))
        try:
            val = _train(model, state, dataset.train, dataset.val, cfg, lr, log,
                         rng.child(f"lr.{lr:g}"))
        except TrainingDivergence:
            log.log(event="diverged", lr=lr)
            continue
        log.log(event="grid-point", lr=lr, val_mse=val)
        if best is None or val < best[0]:
            best = (val, lr, model, state)
    if best is None:
        raise TrainingDivergence("every learning rate diverged")
    _, lr, model, state = best
    log.log(event="selected", lr=lr)
    report = metrics.evaluate(model, dataset.test, rng.child("test"),
                              n_samples=cfg.test_n_samples, n_runs=cfg.test_n_runs)
    live = state.n_trainable() if state.learnables else sum(
        model.registry()[n].tensor.size for n in state.selected)
    if live != budget.total:
        raise ConfigError(f"live trainable count {live} != closed form {budget.total}")
    return FinetuneResult(state, model, lr, report, budget, log)


def _model_cfg(base_model_factory) -> ModelConfig:
    cfg = getattr(base_model_factory, "model_config", None)
    return cfg if cfg is not None else base_model_factory().cfg


# ---------------------------------------------------------------------------
# sweeps
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ExperimentSpec:
    adapter: AdapterConfig
    train: TrainConfig
    sweep_axis: str = "none"        # none | vera_rank | fourier_n
    sweep_values: tuple = ()

    def __post_init__(self):
        admissible = {"none": (), "vera_rank": VERA_RANK_AXIS,
                      "fourier_n": FOURIER_N_AXIS}
        if self.sweep_axis not in admissible:
            raise ConfigError(f"unknown sweep axis {self.sweep_axis!r}")
        values = self.sweep_values or admissible[self.sweep_axis]
        bad = [v for v in values if self.sweep_axis != "none"
               and v not in admissible[self.sweep_axis]]
        if bad:
            raise ConfigError(f"values {bad} not admissible for {self.sweep_axis}")
        object.__setattr__(self, "sweep_values", tuple(values))


def sweep(spec: ExperimentSpec, base_model_factory, dataset) -> list[dict]:
    """One finetune per axis value; rows ordered by axis value."""
    points = spec.sweep_values or (None,)
    rows = []
    for value in sorted(points, key=lambda v: (v is None, v)):
        acfg = spec.adapter
        if spec.sweep_axis == "vera_rank":
            acfg = replace(acfg, rank=value)
        elif spec.sweep_axis == "fourier_n":
            acfg = replace(acfg, n_coefficients=value)
        result = finetune(base_model_factory, acfg, dataset, spec.train)
        rows.append({
            "axis_value": value,
            "mse_x1e-4": result.report.mse_norm,
            "dtw_x1e-3": result.report.dtw_norm,
            "mape_percent": result.report.mape_percent,
            "params_m": adapters.format_millions(result.budget.total),
            "params": result.budget.total,
        })
    return rows
