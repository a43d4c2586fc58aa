"""Command-line entry point.

Subcommands: generate, preprocess, pretrain, finetune, evaluate, sweep,
count-params. Options resolve as flags > config file > defaults; every
command echoes its effective configuration into the run directory so a run
can be reproduced from its own artifacts.
"""

from __future__ import annotations

import argparse
import csv
import sys
from pathlib import Path

from . import __version__, adapters, metrics, pipeline, serialize, trainer
from .adapters import AdapterConfig
from .errors import ConfigError, DataError, TspeftError
from .model import ForecastModel, preset
from .numerics import Rng
from .trainer import TrainConfig


def _read_config_file(path) -> dict[str, str]:
    """Flat key = value lines; [section] headers prefix keys with 'section.'."""
    values: dict[str, str] = {}
    section = ""
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip() + "."
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
        key, _, value = line.partition("=")
        values[section + key.strip()] = value.strip()
    return values


class RunConfig:
    """Resolved options for one command: flags > file > defaults."""

    def __init__(self, args: argparse.Namespace):
        self.file_values = _read_config_file(args.config) if args.config else {}
        self.args = args

    def get(self, key: str, default=None, cast=str):
        flag = key.replace(".", "_").replace("-", "_")
        val = getattr(self.args, flag, None)
        if val is None:
            val = self.file_values.get(key)
        if val is None:
            return default
        try:
            return cast(val)
        except (TypeError, ValueError):
            raise ConfigError(f"bad value {val!r} for {key}")

    def echo(self, out_dir: Path, resolved: dict):
        lines = [f"# tspeft {__version__} effective config"]
        lines += [f"{k} = {v}" for k, v in sorted(resolved.items())]
        (out_dir / "config.txt").write_text("\n".join(lines) + "\n")


def _out_dir(cfg: RunConfig) -> Path:
    out = Path(cfg.get("out-dir", "run"))
    out.mkdir(parents=True, exist_ok=True)
    return out


def _adapter_config(cfg: RunConfig) -> AdapterConfig:
    method = cfg.get("adapter.method")
    if method is None:
        raise ConfigError("adapter method is required (--method)")
    kwargs = {"method": method.lower()}
    targets = cfg.get("adapter.targets")
    if targets:
        kwargs["target_matrices"] = tuple(t.strip().lower() for t in targets.split(","))
    for key, name, cast in (("adapter.rank", "rank", int),
                            ("adapter.n", "n_coefficients", int),
                            ("adapter.alpha", "alpha", float),
                            ("adapter.shared-seed", "shared_seed", int),
                            ("adapter.bitfit-scope", "bitfit_scope", str),
                            ("adapter.lntuning-scope", "lntuning_scope", str)):
        val = cfg.get(key, cast=cast)
        if val is not None:
            kwargs[name] = val
    return AdapterConfig(**kwargs)


def _train_config(cfg: RunConfig) -> TrainConfig:
    kwargs = {}
    for key, name, cast in (("train.lr", "learning_rate", float),
                            ("train.batch-size", "batch_size", int),
                            ("train.max-steps", "max_steps", int),
                            ("train.eval-every", "eval_every", int),
                            ("train.patience", "patience", int),
                            ("train.test-n-samples", "test_n_samples", int),
                            ("train.test-n-runs", "test_n_runs", int)):
        val = cfg.get(key, cast=cast)
        if val is not None:
            kwargs[name] = val
    kwargs["seed"] = cfg.get("seed", 0, int)
    return TrainConfig(**kwargs)


def _write_report(out: Path, report: metrics.MetricReport):
    (out / "report.txt").write_text(report.to_text())
    with open(out / "report.csv", "w", newline="") as fh:
        csv.writer(fh).writerows(report.to_rows())


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_generate(cfg: RunConfig) -> int:
    out = _out_dir(cfg)
    n = cfg.get("data.patients", 30, int)
    domain = cfg.get("data.domain", "source")
    seed = cfg.get("seed", 0, int)
    records = pipeline.generate_synthetic(n, Rng(seed).child("generate"), domain)
    pipeline.write_csv(out / "data.csv", records)
    anchors = pipeline.synthetic_anchors(n, domain)
    with open(out / "anchors.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["patient_id", "anchor_time"])
        for pid, times in sorted(anchors.items()):
            for t in times:
                writer.writerow([pid, t])
    cfg.echo(out, {"command": "generate", "data.patients": n,
                   "data.domain": domain, "seed": seed})
    print(f"wrote {len(records)} records for {n} patients to {out / 'data.csv'}")
    return 0


def _read_anchors(path) -> dict[str, list[int]]:
    anchors: dict[str, list[int]] = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["patient_id", "anchor_time"]:
            raise DataError(f"{path}: expected header patient_id,anchor_time")
        for row in reader:
            if row:
                anchors.setdefault(row[0].strip(), []).append(int(row[1]))
    return anchors


def cmd_preprocess(cfg: RunConfig) -> int:
    out = _out_dir(cfg)
    data = cfg.get("data.csv")
    anchors_path = cfg.get("data.anchors")
    if not data or not anchors_path:
        raise ConfigError("preprocess requires --data-csv and --data-anchors")
    seed = cfg.get("seed", 0, int)
    width = cfg.get("data.lowpass-width", 5, int)
    records, rejects = pipeline.ingest_csv(data)
    if rejects:
        (out / "rejects.txt").write_text(
            "\n".join(f"line {ln}: {reason}" for ln, reason in rejects) + "\n")
    ds = pipeline.build_dataset(records, _read_anchors(anchors_path),
                                Rng(seed), lowpass_width=width)
    serialize.save_dataset(out / "dataset.bin", ds)
    cfg.echo(out, {"command": "preprocess", "data.csv": data,
                   "data.anchors": anchors_path, "data.lowpass-width": width,
                   "seed": seed})
    counts = {k: len(v) for k, v in ds.splits().items()}
    print(f"windows {counts}, {len(rejects)} rejected rows -> {out / 'dataset.bin'}")
    return 0


def cmd_pretrain(cfg: RunConfig) -> int:
    out = _out_dir(cfg)
    dataset_path = cfg.get("data.dataset")
    if not dataset_path:
        raise ConfigError("pretrain requires --data-dataset")
    preset_name = cfg.get("model.preset", "desk")
    tcfg = _train_config(cfg)
    ds = serialize.load_dataset(dataset_path)
    model = ForecastModel(preset(preset_name), Rng(tcfg.seed).child("init"))
    log = trainer.pretrain(model, ds, tcfg)
    serialize.save_model(out / "base.ckpt", model)
    (out / "train.log").write_text(log.to_text())
    cfg.echo(out, {"command": "pretrain", "model.preset": preset_name,
                   "data.dataset": dataset_path, "seed": tcfg.seed,
                   "train.max-steps": tcfg.max_steps})
    print(f"pretrained {preset_name} -> {out / 'base.ckpt'}")
    return 0


def cmd_finetune(cfg: RunConfig) -> int:
    out = _out_dir(cfg)
    base = cfg.get("model.base")
    dataset_path = cfg.get("data.dataset")
    if not base or not dataset_path:
        raise ConfigError("finetune requires --model-base and --data-dataset")
    acfg = _adapter_config(cfg)
    tcfg = _train_config(cfg)
    ds = serialize.load_dataset(dataset_path)
    factory = lambda: serialize.load_model(base)  # noqa: E731
    result = trainer.finetune(factory, acfg, ds, tcfg)
    serialize.save_adapter(out / "adapter.ckpt", result.state)
    _write_report(out, result.report)
    (out / "train.log").write_text(result.log.to_text())
    (out / "budget.txt").write_text(
        f"{result.budget.display()}\n"
        + "".join(f"{k}: {v}\n" for k, v in result.budget.breakdown.items()))
    cfg.echo(out, {"command": "finetune", "adapter.method": acfg.method,
                   "model.base": base, "data.dataset": dataset_path,
                   "seed": tcfg.seed, "chosen-lr": result.chosen_lr})
    print(f"{acfg.method}: lr={result.chosen_lr} params={result.budget.display()} "
          f"mse(x1e-4)={result.report.mse_norm:.4f}")
    return 0


def cmd_evaluate(cfg: RunConfig) -> int:
    out = _out_dir(cfg)
    base = cfg.get("model.base")
    dataset_path = cfg.get("data.dataset")
    if not base or not dataset_path:
        raise ConfigError("evaluate requires --model-base and --data-dataset")
    seed = cfg.get("seed", 0, int)
    n_samples = cfg.get("eval.n-samples", 20, int)
    n_runs = cfg.get("eval.n-runs", 10, int)
    ds = serialize.load_dataset(dataset_path)
    model = serialize.load_model(base)
    adapter_path = cfg.get("model.adapter")
    if adapter_path:
        serialize.load_adapter(adapter_path, model)
    report = metrics.evaluate(model, ds.test, Rng(seed).child("test"),
                              n_samples=n_samples, n_runs=n_runs)
    _write_report(out, report)
    cfg.echo(out, {"command": "evaluate", "model.base": base,
                   "model.adapter": adapter_path or "", "seed": seed,
                   "eval.n-samples": n_samples, "eval.n-runs": n_runs})
    print(report.to_text(), end="")
    return 0


def cmd_sweep(cfg: RunConfig) -> int:
    out = _out_dir(cfg)
    base = cfg.get("model.base")
    dataset_path = cfg.get("data.dataset")
    axis = cfg.get("sweep.axis")
    if not base or not dataset_path or not axis:
        raise ConfigError("sweep requires --model-base, --data-dataset, --sweep-axis")
    acfg = _adapter_config(cfg)
    spec = trainer.ExperimentSpec(adapter=acfg, train=_train_config(cfg),
                                  sweep_axis=axis)
    ds = serialize.load_dataset(dataset_path)
    factory = lambda: serialize.load_model(base)  # noqa: E731
    rows = trainer.sweep(spec, factory, ds)
    with open(out / "sweep.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["axis_value", "mse_x1e-4", "dtw_x1e-3",
                         "mape_percent", "params_m", "params"])
        for row in rows:
            writer.writerow([row["axis_value"], repr(row["mse_x1e-4"]),
                             repr(row["dtw_x1e-3"]), repr(row["mape_percent"]),
                             row["params_m"], row["params"]])
    cfg.echo(out, {"command": "sweep", "sweep.axis": axis,
                   "adapter.method": acfg.method, "model.base": base,
                   "data.dataset": dataset_path, "seed": cfg.get("seed", 0, int)})
    print(f"{len(rows)} sweep rows -> {out / 'sweep.csv'}")
    return 0


def cmd_count_params(cfg: RunConfig) -> int:
    preset_name = cfg.get("model.preset")
    if not preset_name:
        raise ConfigError("count-params requires --preset")
    acfg = _adapter_config(cfg)
    report = adapters.count_trainable_params(acfg, preset(preset_name))
    print(report.display())
    return 0


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tspeft",
                                     description="PEFT toolkit for time-series "
                                                 "forecasting transformers")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="key = value config file")
        p.add_argument("--seed", dest="seed")
        p.add_argument("--out-dir", dest="out_dir")

    p = sub.add_parser("generate", help="write a synthetic vitals CSV")
    common(p)
    p.add_argument("--patients", dest="data_patients")
    p.add_argument("--domain", dest="data_domain", choices=["source", "shifted"])

    p = sub.add_parser("preprocess", help="CSV -> windowed, scaled, split dataset")
    common(p)
    p.add_argument("--data", dest="data_csv")
    p.add_argument("--anchors", dest="data_anchors")
    p.add_argument("--lowpass-width", dest="data_lowpass_width")

    def train_flags(p):
        p.add_argument("--lr", dest="train_lr")
        p.add_argument("--batch-size", dest="train_batch_size")
        p.add_argument("--max-steps", dest="train_max_steps")
        p.add_argument("--eval-every", dest="train_eval_every")
        p.add_argument("--patience", dest="train_patience")
        p.add_argument("--test-n-samples", dest="train_test_n_samples")
        p.add_argument("--test-n-runs", dest="train_test_n_runs")

    def adapter_flags(p):
        p.add_argument("--method", dest="adapter_method")
        p.add_argument("--rank", dest="adapter_rank")
        p.add_argument("--n", dest="adapter_n")
        p.add_argument("--alpha", dest="adapter_alpha")
        p.add_argument("--targets", dest="adapter_targets")
        p.add_argument("--shared-seed", dest="adapter_shared_seed")
        p.add_argument("--bitfit-scope", dest="adapter_bitfit_scope")
        p.add_argument("--lntuning-scope", dest="adapter_lntuning_scope")

    p = sub.add_parser("pretrain", help="train a fresh model on a source dataset")
    common(p)
    train_flags(p)
    p.add_argument("--dataset", dest="data_dataset")
    p.add_argument("--preset", dest="model_preset")

    p = sub.add_parser("finetune", help="PEFT fine-tuning over the LR grid")
    common(p)
    train_flags(p)
    adapter_flags(p)
    p.add_argument("--base", dest="model_base")
    p.add_argument("--dataset", dest="data_dataset")

    p = sub.add_parser("evaluate", help="evaluate a (possibly adapted) checkpoint")
    common(p)
    p.add_argument("--base", dest="model_base")
    p.add_argument("--adapter", dest="model_adapter")
    p.add_argument("--dataset", dest="data_dataset")
    p.add_argument("--n-samples", dest="eval_n_samples")
    p.add_argument("--n-runs", dest="eval_n_runs")

    p = sub.add_parser("sweep", help="hyperparameter sweep (vera_rank | fourier_n)")
    common(p)
    train_flags(p)
    adapter_flags(p)
    p.add_argument("--base", dest="model_base")
    p.add_argument("--dataset", dest="data_dataset")
    p.add_argument("--axis", dest="sweep_axis")

    p = sub.add_parser("count-params", help="closed-form trainable parameter count")
    common(p)
    adapter_flags(p)
    p.add_argument("--preset", dest="model_preset")
    return p


_COMMANDS = {
    "generate": cmd_generate,
    "preprocess": cmd_preprocess,
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "evaluate": cmd_evaluate,
    "sweep": cmd_sweep,
    "count-params": cmd_count_params,
}


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        cfg = RunConfig(args)
        return _COMMANDS[args.command](cfg)
    except ConfigError as exc:
        print(f"config-error: {exc}", file=sys.stderr)
        return 2
    except TspeftError as exc:
        print(f"{type(exc).__name__.lower()}: {exc}", file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print(f"missing-file: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
