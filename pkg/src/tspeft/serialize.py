"""Single-file binary formats for model weights, adapter checkpoints and
processed datasets.

Layout shared by all three: an 8-byte magic, a u32 format version, a u32
length-prefixed JSON header, then payload blocks. Every float is a
little-endian 64-bit value, so files round-trip bit-exactly.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict

import numpy as np

from .adapters import AdapterConfig, AdapterState, attach
from .errors import DataError
from .model import ForecastModel, ModelConfig, TokenizerConfig
from .numerics import Rng, Tensor
from .pipeline import Scaler, SplitDataset, VitalsWindow

FORMAT_VERSION = 1
MODEL_MAGIC = b"TSPEFTMW"
ADAPTER_MAGIC = b"TSPEFTAD"
DATASET_MAGIC = b"TSPEFTDS"


def _write_header(fh, magic: bytes, header: dict):
    fh.write(magic)
    fh.write(struct.pack("<I", FORMAT_VERSION))
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    fh.write(struct.pack("<I", len(blob)))
    fh.write(blob)


def _read_header(fh, magic: bytes) -> dict:
    got = fh.read(8)
    if got != magic:
        raise DataError(f"bad magic {got!r}, expected {magic!r}")
    version, = struct.unpack("<I", fh.read(4))
    if version != FORMAT_VERSION:
        raise DataError(f"unsupported format version {version}")
    n, = struct.unpack("<I", fh.read(4))
    return json.loads(fh.read(n).decode("utf-8"))


def _write_block(fh, name: str, arr: np.ndarray):
    nb = name.encode("utf-8")
    fh.write(struct.pack("<I", len(nb)))
    fh.write(nb)
    fh.write(struct.pack("<I", arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}q", *arr.shape))
    fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def _read_block(fh) -> tuple[str, np.ndarray]:
    raw = fh.read(4)
    if not raw:
        raise EOFError
    n, = struct.unpack("<I", raw)
    name = fh.read(n).decode("utf-8")
    ndim, = struct.unpack("<I", fh.read(4))
    shape = struct.unpack(f"<{ndim}q", fh.read(8 * ndim))
    count = int(np.prod(shape)) if ndim else 1
    data = np.frombuffer(fh.read(8 * count), dtype="<f8").reshape(shape)
    return name, data.astype(np.float64)


def _read_blocks(fh, expected: int) -> dict[str, np.ndarray]:
    return dict(_read_block(fh) for _ in range(expected))


# ---------------------------------------------------------------------------
# model weights
# ---------------------------------------------------------------------------


def _model_config_dict(cfg: ModelConfig) -> dict:
    d = asdict(cfg)
    d["tokenizer"] = asdict(cfg.tokenizer)
    return d


def _model_config_from_dict(d: dict) -> ModelConfig:
    tok = TokenizerConfig(**d.pop("tokenizer"))
    return ModelConfig(tokenizer=tok, **d)


def save_model(path, model: ForecastModel):
    infos = model.param_infos()
    with open(path, "wb") as fh:
        _write_header(fh, MODEL_MAGIC, {
            "config": _model_config_dict(model.cfg),
            "n_blocks": len(infos),
        })
        for info in infos:
            _write_block(fh, info.name, info.tensor.data)


def load_model(path) -> ForecastModel:
    with open(path, "rb") as fh:
        header = _read_header(fh, MODEL_MAGIC)
        cfg = _model_config_from_dict(header["config"])
        model = ForecastModel(cfg, Rng(0))
        blocks = _read_blocks(fh, header["n_blocks"])
    for info in model.param_infos():
        if info.name not in blocks:
            raise DataError(f"missing parameter block {info.name!r}")
        if blocks[info.name].shape != info.tensor.shape:
            raise DataError(f"shape mismatch for {info.name!r}")
        info.tensor.data = blocks[info.name].copy()
    return model


# ---------------------------------------------------------------------------
# adapter checkpoints
# ---------------------------------------------------------------------------


def save_adapter(path, state: AdapterState):
    names = sorted(state.learnables)
    with open(path, "wb") as fh:
        _write_header(fh, ADAPTER_MAGIC, {
            "adapter_config": {**asdict(state.cfg),
                               "target_matrices": list(state.cfg.target_matrices)},
            "selected": state.selected,
            "n_blocks": len(names),
        })
        for name in names:
            _write_block(fh, name, state.learnables[name].data)


def load_adapter(path, model: ForecastModel) -> AdapterState:
    """Attach the stored adapter to a fresh base model and restore learnables."""
    with open(path, "rb") as fh:
        header = _read_header(fh, ADAPTER_MAGIC)
        d = header["adapter_config"]
        d["target_matrices"] = tuple(d["target_matrices"])
        cfg = AdapterConfig(**d)
        blocks = _read_blocks(fh, header["n_blocks"])
    state = attach(model, cfg, Rng(cfg.shared_seed).child("attach"))
    if set(blocks) != set(state.learnables):
        raise DataError("adapter checkpoint does not match the model configuration")
    for name, data in blocks.items():
        tensor = state.learnables[name]
        if data.shape != tensor.shape:
            raise DataError(f"shape mismatch for {name!r}")
        tensor.data = data.copy()
    return state


# ---------------------------------------------------------------------------
# processed datasets
# ---------------------------------------------------------------------------


def save_dataset(path, ds: SplitDataset):
    header = {
        "scaler": {v: list(b) for v, b in (ds.scaler.bounds if ds.scaler else {}).items()},
        "ratio": list(ds.ratio),
        "counts": {name: len(ws) for name, ws in ds.splits().items()},
    }
    with open(path, "wb") as fh:
        _write_header(fh, DATASET_MAGIC, header)
        for name, ws in ds.splits().items():
            for w in ws:
                _write_block(fh, f"{name}|{w.patient_id}|{w.vital}|{w.anchor_time}",
                             np.concatenate([w.context, w.horizon]))


def load_dataset(path) -> SplitDataset:
    from .model import CONTEXT_LEN
    with open(path, "rb") as fh:
        header = _read_header(fh, DATASET_MAGIC)
        parts = {"train": [], "val": [], "test": []}
        total = sum(header["counts"].values())
        for _ in range(total):
            key, data = _read_block(fh)
            split, pid, vital, anchor = key.split("|")
            parts[split].append(VitalsWindow(pid, vital, int(anchor),
                                             data[:CONTEXT_LEN], data[CONTEXT_LEN:]))
    scaler = Scaler({v: tuple(b) for v, b in header["scaler"].items()}) \
        if header["scaler"] else None
    return SplitDataset(parts["train"], parts["val"], parts["test"],
                        scaler=scaler, ratio=tuple(header["ratio"]))
