"""Mini-batch Adam training, evaluation and checkpoint persistence."""
from __future__ import annotations

import json
import math
import os
import struct
import zlib
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from .errors import ConfigMismatch, CorruptFile, Divergence, EmptyDataset, ShapeMismatch, VersionMismatch
from .model import ASCNet, ModelConfig, Parameters, init_params, validate_params
from .signals import MetricsReport, SegmentSet, derive_seed, metrics_row

CKPT_MAGIC = b"ASCCKPT1"
CKPT_VERSION = 1


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 32
    max_epochs: int = 50
    early_stop_patience: int = 10
    grad_clip: float | None = 5.0
    seed: int = 0
    shuffle: bool = True

    def __post_init__(self):
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("beta1 and beta2 must lie in (0, 1)")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.max_epochs < 0:
            raise ValueError("max_epochs must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0

    @classmethod
    def zeros_like(cls, weights: dict[str, np.ndarray]) -> "AdamState":
        return cls({k: np.zeros_like(w) for k, w in weights.items()},
                   {k: np.zeros_like(w) for k, w in weights.items()}, 0)


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState,
              cfg: TrainConfig) -> None:
    """One bias-corrected Adam update, in place on ``params`` and ``state``."""
    state.t += 1
    t = state.t
    b1, b2 = cfg.beta1, cfg.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, theta in params.items():
        g = grads[name]
        if g.shape != theta.shape:
            raise ShapeMismatch(f"{name}: grad {g.shape} vs param {theta.shape}")
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        theta -= cfg.learning_rate * (m / c1) / (np.sqrt(v / c2) + cfg.eps)


def clip_global_norm(grads: dict[str, np.ndarray], max_norm: float | None) -> float:
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if max_norm is not None and norm > max_norm:
        f = max_norm / norm
        for g in grads.values():
            g *= f
    return norm


@dataclass
class Checkpoint:
    model_config: ModelConfig
    train_config: TrainConfig
    params: Parameters
    adam: AdamState
    epoch: int = 0
    history: list[dict] = field(default_factory=list)
    best_params: Parameters | None = None
    best_val: float = math.inf
    best_epoch: int = 0
    bad_epochs: int = 0
    rng_state: dict | None = None

    @property
    def eval_params(self) -> Parameters:
        return self.best_params if self.best_params is not None else self.params


def _val_loss(model: ASCNet, data: SegmentSet, batch_size: int) -> float:
    noisy, clean = data.arrays()
    total = 0.0
    for i in range(0, len(noisy), batch_size):
        out = model.forward(noisy[i:i + batch_size], "eval").data
        total += float(np.sum((out - clean[i:i + batch_size]) ** 2))
    return total / clean.size


def new_checkpoint(model_cfg: ModelConfig, train_cfg: TrainConfig) -> Checkpoint:
    params = init_params(model_cfg, derive_seed(train_cfg.seed, "init") & 0xFFFFFFFF)
    rng = np.random.Generator(np.random.PCG64(derive_seed(train_cfg.seed, "shuffle")))
    return Checkpoint(model_cfg, train_cfg, params, AdamState.zeros_like(params.weights),
                      rng_state=rng.bit_generator.state)


def train(train_set: SegmentSet, val_set: SegmentSet, model_cfg: ModelConfig,
          train_cfg: TrainConfig, resume: Checkpoint | None = None,
          log: Callable[[str], None] | None = None) -> tuple[Checkpoint, list[dict]]:
    """Train until ``train_cfg.max_epochs`` total epochs or early stopping.

    Returns the final checkpoint (current weights, optimizer state and the
    best-validation weights) and the per-epoch history. Passing ``resume``
    continues a previous run exactly where it stopped.
    """
    if len(train_set) == 0 or len(val_set) == 0:
        raise EmptyDataset("training and validation sets must be non-empty")
    if train_set.length != model_cfg.segment_length or val_set.length != model_cfg.segment_length:
        raise ConfigMismatch(
            f"segment length {train_set.length} does not match model length {model_cfg.segment_length}"
        )
    ckpt = new_checkpoint(model_cfg, train_cfg) if resume is None else resume
    if resume is not None:
        if resume.model_config != model_cfg:
            raise ConfigMismatch("resume checkpoint was trained with a different model config")
        ckpt.train_config = train_cfg
    model = ASCNet(model_cfg, ckpt.params)
    rng = np.random.Generator(np.random.PCG64())
    rng.bit_generator.state = ckpt.rng_state
    noisy, clean = train_set.arrays()
    n = len(noisy)
    bs = train_cfg.batch_size
    deepest = model_cfg.segment_length // model_cfg.stride ** model_cfg.n_blocks

    while ckpt.epoch < train_cfg.max_epochs and ckpt.bad_epochs < train_cfg.early_stop_patience:
        order = rng.permutation(n) if train_cfg.shuffle else np.arange(n)
        total = 0.0
        for start in range(0, n, bs):
            idx = order[start:start + bs]
            if len(idx) * deepest < 2:
                # batch norm needs two values per channel at the deepest stage
                continue
            loss, grads = model.loss_and_grads(noisy[idx], clean[idx], "train")
            if not math.isfinite(loss):
                raise Divergence(ckpt.adam.t + 1, loss)
            clip_global_norm(grads, train_cfg.grad_clip)
            adam_step(ckpt.params.weights, grads, ckpt.adam, train_cfg)
            total += loss * len(idx)
        train_loss = total / n
        val_loss = _val_loss(model, val_set, bs)
        if not math.isfinite(val_loss):
            raise Divergence(ckpt.adam.t, val_loss)
        ckpt.epoch += 1
        ckpt.history.append({"epoch": ckpt.epoch, "train_loss": train_loss, "val_loss": val_loss})
        if val_loss < ckpt.best_val:
            ckpt.best_val = val_loss
            ckpt.best_epoch = ckpt.epoch
            ckpt.best_params = ckpt.params.copy()
            ckpt.bad_epochs = 0
        else:
            ckpt.bad_epochs += 1
        if log:
            log(f"epoch {ckpt.epoch}: train {train_loss:.6f} val {val_loss:.6f}")
    ckpt.rng_state = rng.bit_generator.state
    return ckpt, list(ckpt.history)


# ---------------------------------------------------------------- evaluation

def evaluate(ckpt: Checkpoint | None, test_set: SegmentSet,
             denoiser: Callable[[np.ndarray], np.ndarray] | None = None,
             batch_size: int = 64) -> MetricsReport:
    """Metrics per (record, noise kind, input SNR), over that group's concatenated segments.

    ``denoiser`` overrides the model (e.g. identity or oracle stubs).
    """
    noisy, clean = test_set.arrays()
    if denoiser is None:
        if ckpt is None:
            raise ValueError("need a checkpoint or a denoiser")
        if ckpt.model_config.segment_length != test_set.length:
            raise ConfigMismatch(
                f"checkpoint expects length {ckpt.model_config.segment_length}, data has {test_set.length}"
            )
        model = ASCNet(ckpt.model_config, ckpt.eval_params.copy())
        estimate = model.predict(noisy, batch_size)
    else:
        estimate = np.asarray(denoiser(noisy), dtype=np.float64)
    groups: dict[tuple, list[int]] = {}
    for i, s in enumerate(test_set.segments):
        groups.setdefault((s.record_id, s.noise.label, float(s.noise.target_snr_db)), []).append(i)
    rows = []
    for (rid, kind, snr), idx in sorted(groups.items()):
        rows.append(metrics_row(rid, kind, snr, clean[idx].ravel(), noisy[idx].ravel(),
                                estimate[idx].ravel()))
    return MetricsReport(rows)


# ---------------------------------------------------------------- persistence

def _tensor_table(ckpt: Checkpoint) -> list[tuple[str, np.ndarray]]:
    table = [(f"param/{k}", v) for k, v in ckpt.params.weights.items()]
    table += [(f"buffer/{k}", v) for k, v in ckpt.params.buffers.items()]
    table += [(f"adam_m/{k}", v) for k, v in ckpt.adam.m.items()]
    table += [(f"adam_v/{k}", v) for k, v in ckpt.adam.v.items()]
    if ckpt.best_params is not None:
        table += [(f"best/{k}", v) for k, v in ckpt.best_params.weights.items()]
        table += [(f"best_buffer/{k}", v) for k, v in ckpt.best_params.buffers.items()]
    return table


def checkpoint_bytes(ckpt: Checkpoint, version: int = CKPT_VERSION) -> bytes:
    table = _tensor_table(ckpt)
    header = {
        "format_version": version,
        "model_config": ckpt.model_config.to_dict(),
        "train_config": ckpt.train_config.to_dict(),
        "epoch": ckpt.epoch,
        "adam_t": ckpt.adam.t,
        "history": ckpt.history,
        "best_val": ckpt.best_val if math.isfinite(ckpt.best_val) else None,
        "best_epoch": ckpt.best_epoch,
        "bad_epochs": ckpt.bad_epochs,
        "rng_state": ckpt.rng_state,
        "tensors": [{"name": name, "shape": list(arr.shape)} for name, arr in table],
    }
    hjson = json.dumps(header, sort_keys=True).encode()
    body = bytearray(CKPT_MAGIC)
    body += struct.pack("<IQ", version, len(hjson))
    body += hjson
    for _, arr in table:
        body += np.ascontiguousarray(arr, dtype="<f8").tobytes()
    body += struct.pack("<I", zlib.crc32(bytes(body[len(CKPT_MAGIC) + 12:])))
    return bytes(body)


def save_checkpoint(ckpt: Checkpoint, path: str | os.PathLike) -> None:
    """Layout: magic, u32 version, u64 header length, JSON header, f64 tensors, u32 CRC32.

    The CRC covers the JSON header and the tensor payload.
    """
    path = os.fspath(path)
    tmp = f"{path}.tmp{os.getpid()}"
    with open(tmp, "wb") as fh:
        fh.write(checkpoint_bytes(ckpt))
    os.replace(tmp, path)


def checkpoint_from_bytes(blob: bytes) -> Checkpoint:
    if len(blob) < len(CKPT_MAGIC) + 12 or blob[:len(CKPT_MAGIC)] != CKPT_MAGIC:
        raise CorruptFile("not a checkpoint (bad magic or truncated)")
    version, hlen = struct.unpack_from("<IQ", blob, len(CKPT_MAGIC))
    if version != CKPT_VERSION:
        raise VersionMismatch(f"checkpoint version {version}, expected {CKPT_VERSION}")
    start = len(CKPT_MAGIC) + 12
    if len(blob) < start + hlen + 4:
        raise CorruptFile("checkpoint truncated")
    (crc,) = struct.unpack_from("<I", blob, len(blob) - 4)
    if zlib.crc32(blob[start:-4]) != crc:
        raise CorruptFile("checkpoint checksum mismatch")
    try:
        header = json.loads(blob[start:start + hlen])
    except ValueError as exc:
        raise CorruptFile(f"bad checkpoint header: {exc}") from None
    offset = start + hlen
    arrays: dict[str, np.ndarray] = {}
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        if offset + 8 * count > len(blob) - 4:
            raise CorruptFile("checkpoint truncated")
        arrays[entry["name"]] = np.frombuffer(blob, dtype="<f8", count=count, offset=offset) \
            .astype(np.float64).reshape(shape)
        offset += 8 * count
    if offset != len(blob) - 4:
        raise CorruptFile("trailing bytes in checkpoint")

    def group(prefix):
        return {k[len(prefix):]: v for k, v in arrays.items() if k.startswith(prefix)}

    model_cfg = ModelConfig.from_dict(header["model_config"])
    params = Parameters(group("param/"), group("buffer/"))
    validate_params(model_cfg, params)
    best = None
    if any(k.startswith("best/") for k in arrays):
        best = Parameters(group("best/"), group("best_buffer/"))
    return Checkpoint(
        model_config=model_cfg,
        train_config=TrainConfig.from_dict(header["train_config"]),
        params=params,
        adam=AdamState(group("adam_m/"), group("adam_v/"), header["adam_t"]),
        epoch=header["epoch"],
        history=header["history"],
        best_params=best,
        best_val=math.inf if header["best_val"] is None else header["best_val"],
        best_epoch=header["best_epoch"],
        bad_epochs=header["bad_epochs"],
        rng_state=header["rng_state"],
    )


def load_checkpoint(path: str | os.PathLike) -> Checkpoint:
    with open(path, "rb") as fh:
        return checkpoint_from_bytes(fh.read())
