"""Weighted-loss training, pretrain/fine-tune workflow and checkpoints."""

from __future__ import annotations

import dataclasses
import json
import logging
import math
import os
import struct
import zlib
from collections import Counter
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from . import tensor as T
from .datasets import (SSD_ALPHABET, SSP_ALPHABET, BalancedBatchIterator, DatasetManifest,
                       group_by_species, one_hot_batch)
from .model import CircFormerMoE, ModelConfig

log = logging.getLogger(__name__)

DEFAULT_SCHEDULES = {"ssd": (285.0, 10), "ssp": (10.0, 5)}
FALLBACK_SSD_WEIGHT = 285.0


class TrainingError(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass
class TrainConfig:
    task: str = "ssd"
    epochs: int = 10
    batch_size: int = 20
    lr: float = 1e-3
    pos_weight: float | None = None
    pos_weight_epochs: int | None = None
    seed: int = 0
    species: tuple[str, ...] | None = None
    clip_norm: float = 5.0
    batches_per_epoch: int | None = None

    def __post_init__(self):
        self.task = self.task.lower()
        if self.task not in DEFAULT_SCHEDULES:
            raise ValueError(f"unknown task {self.task!r}")
        w, n = DEFAULT_SCHEDULES[self.task]
        if self.pos_weight is None:
            self.pos_weight = w
        if self.pos_weight_epochs is None:
            self.pos_weight_epochs = min(n, self.epochs)
        if self.pos_weight < 1:
            raise ValueError("pos_weight must be >= 1")
        if self.pos_weight_epochs > self.epochs:
            raise ValueError("weight schedule longer than training")
        if self.species is not None:
            self.species = tuple(self.species)


def pos_weight_from_manifest(manifest: DatasetManifest | None) -> float:
    """Rounded N/P ratio of an SSD manifest, falling back to 285."""
    if manifest is None or not math.isfinite(manifest.ratio) or manifest.ratio < 1:
        return FALLBACK_SSD_WEIGHT
    return float(round(manifest.ratio))


def scheduled_pos_weight(config: TrainConfig, epoch: int) -> float:
    """Configured weight for epochs 0..n-1, then 1.0."""
    return float(config.pos_weight) if epoch < config.pos_weight_epochs else 1.0


def weighted_bce_loss(logits, labels, w_pos: float = 1.0) -> T.Tensor:
    return T.weighted_bce_with_logits(T.as_tensor(logits), labels, w_pos)


@dataclass
class EpochStats:
    epoch: int
    task: str
    loss: float
    grad_norm: float
    w_pos: float
    steps: int
    species_counts: dict[str, int] = field(default_factory=dict)

    def log_line(self) -> str:
        counts = ",".join(f"{k}:{v}" for k, v in sorted(self.species_counts.items()))
        return (f"epoch={self.epoch}\ttask={self.task}\tloss={self.loss:.6f}\t"
                f"w_pos={self.w_pos:g}\tgrad_norm={self.grad_norm:.6f}\tsteps={self.steps}\t"
                f"counts={counts}")


def encode_batch(batch: Sequence, task: str, dtype=np.float32):
    """One-hot inputs, labels and species ids for a list of samples."""
    species = [s.species for s in batch]
    if task == "ssd":
        x = one_hot_batch([s.window for s in batch], SSD_ALPHABET, dtype)
        y = np.zeros(x.shape[:2], dtype=dtype)
        for i, s in enumerate(batch):
            y[i, list(s.label_positions)] = 1
    else:
        x = one_hot_batch([s.sequence for s in batch], SSP_ALPHABET, dtype)
        y = np.array([s.label for s in batch], dtype=dtype)
    return x, y, species


def forward_task(model: CircFormerMoE, x, species, task: str):
    return model.forward_ssd(x, species) if task == "ssd" else model.forward_ssp(x, species)


def train_epoch(model: CircFormerMoE, batches: Iterable[Sequence], config: TrainConfig,
                epoch: int = 0, optimizer: T.Adam | None = None) -> EpochStats:
    """One optimizer pass over ``batches`` using the scheduled positive weight."""
    optimizer = optimizer or T.Adam(model.parameters(), lr=config.lr)
    w_pos = scheduled_pos_weight(config, epoch)
    losses, norms, counts = [], [], Counter()
    for step, batch in enumerate(batches):
        x, y, species = encode_batch(batch, config.task, model.dtype)
        logits = forward_task(model, x, species, config.task)
        loss = weighted_bce_loss(logits, y, w_pos)
        if not np.isfinite(loss.item()):
            mix = dict(Counter(species))
            raise TrainingError(f"non-finite loss at epoch {epoch} batch {step}; species mix {mix}")
        model.zero_grad()
        T.backward(loss)
        norms.append(T.clip_grad_norm(model.parameters(), config.clip_norm))
        optimizer.step()
        losses.append(loss.item())
        counts.update(species)
    return EpochStats(epoch, config.task, float(np.mean(losses)) if losses else float("nan"),
                      float(np.mean(norms)) if norms else 0.0, w_pos, len(losses), dict(counts))


def fit(model: CircFormerMoE, samples: Sequence, config: TrainConfig,
        callback: Callable[[EpochStats], None] | None = None,
        start_epoch: int = 0) -> list[EpochStats]:
    """Train for ``config.epochs`` epochs of species-balanced batches."""
    pools = group_by_species(samples)
    if config.species is not None:
        missing = [s for s in config.species if s not in pools]
        if missing:
            raise TrainingError(f"no training samples for species {missing}")
        pools = {s: pools[s] for s in config.species}
    it = BalancedBatchIterator(pools, config.batch_size, config.seed, config.batches_per_epoch)
    optimizer = T.Adam(model.parameters(), lr=config.lr)
    history = []
    for epoch in range(start_epoch, start_epoch + config.epochs):
        stats = train_epoch(model, it.epoch(epoch), config, epoch, optimizer)
        log.info(stats.log_line())
        history.append(stats)
        if callback:
            callback(stats)
    return history


def build_ssp_model(ssd_model: CircFormerMoE) -> CircFormerMoE:
    """Copy of an SSD-trained model with the 6-channel SSP embedding seeded from it."""
    model = ssd_model.copy()
    model.reset_ssp_embedding()
    return model


def pretrain_then_finetune(ssd_samples: Sequence, ssp_samples: Sequence | None,
                           model_config: ModelConfig, pretrain: TrainConfig,
                           finetune_ssd: TrainConfig | None = None,
                           finetune_ssp: TrainConfig | None = None,
                           species: Sequence[str] | None = None,
                           pretrained: CircFormerMoE | None = None,
                           out_dir: str | None = None) -> dict:
    """Pretrain SSD on all species, then fine-tune per species for SSD and SSP.

    Returns ``{"pretrain": model, ("ssd", sp): model, ("ssp", sp): model}``.
    SSP models start from the pretrained SSD backbone.  Pass ``pretrained``
    to skip the pretraining stage.
    """
    results: dict = {}
    if pretrained is None:
        if pretrain is None:
            raise TrainingError("fine-tuning requested without a pretrained model")
        pretrained = CircFormerMoE(model_config)
        fit(pretrained, ssd_samples, pretrain)
    results["pretrain"] = pretrained
    species = list(species or model_config.species)
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        save_checkpoint(pretrained, os.path.join(out_dir, "pretrain.cfme"))
    for sp in species:
        if finetune_ssd is not None:
            m = pretrained.copy()
            fit(m, ssd_samples, dataclasses.replace(finetune_ssd, species=(sp,)))
            results[("ssd", sp)] = m
            if out_dir:
                save_checkpoint(m, os.path.join(out_dir, f"ssd_{sp}.cfme"))
        if finetune_ssp is not None and ssp_samples is not None:
            m = build_ssp_model(pretrained)
            fit(m, ssp_samples, dataclasses.replace(finetune_ssp, species=(sp,)))
            results[("ssp", sp)] = m
            if out_dir:
                save_checkpoint(m, os.path.join(out_dir, f"ssp_{sp}.cfme"))
    return results


# ---------------------------------------------------------------- checkpoints

MAGIC = b"CFME"
VERSION = 1


def _u32(n: int) -> bytes:
    return struct.pack("<I", n)


def save_checkpoint(model: CircFormerMoE, path, progress: Mapping | None = None,
                    rng_state: Mapping | None = None) -> None:
    """Write MAGIC, version, config text, parameter records, CRC-32."""
    meta = {"model": json.loads(model.config.to_json()),
            "progress": dict(progress or {}), "rng": dict(rng_state or {"seed": model.config.seed})}
    cfg = json.dumps(meta, sort_keys=True).encode("utf-8")
    parts = [MAGIC, _u32(VERSION), _u32(len(cfg)), cfg, _u32(len(model.params))]
    for name, p in model.params.items():
        nb = name.encode("utf-8")
        parts += [_u32(len(nb)), nb, _u32(p.ndim)] + [_u32(d) for d in p.shape]
        parts.append(np.ascontiguousarray(p.data, dtype="<f4").tobytes())
    body = b"".join(parts)
    with open(path, "wb") as fh:
        fh.write(body + _u32(zlib.crc32(body)))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError("truncated checkpoint")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def read_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 12 or raw[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    body, crc = raw[:-4], struct.unpack("<I", raw[-4:])[0]
    if zlib.crc32(body) != crc:
        raise CheckpointError(f"{path}: integrity check failed (CRC mismatch)")
    r = _Reader(body)
    r.take(4)
    version = r.u32()
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    meta = json.loads(r.take(r.u32()).decode("utf-8"))
    params = {}
    for _ in range(r.u32()):
        name = r.take(r.u32()).decode("utf-8")
        shape = tuple(r.u32() for _ in range(r.u32()))
        n = int(np.prod(shape)) if shape else 1
        params[name] = np.frombuffer(r.take(4 * n), dtype="<f4").reshape(shape).copy()
    if r.pos != len(body):
        raise CheckpointError(f"{path}: trailing bytes after parameter records")
    return meta, params


def load_checkpoint(path, species: Sequence[str] | None = None, dtype=None) -> CircFormerMoE:
    """Rebuild the model; ``species`` (if given) must all be present in the checkpoint."""
    meta, params = read_checkpoint(path)
    config = ModelConfig.from_dict(meta["model"])
    if species is not None:
        missing = [s for s in species if s not in config.species]
        if missing:
            raise CheckpointError(f"{path}: checkpoint lacks species {missing}")
    model = CircFormerMoE(config, dtype=dtype)
    try:
        model.load_state_dict(params)
    except (KeyError, ValueError) as exc:
        raise CheckpointError(f"{path}: parameters do not match embedded config: {exc}") from exc
    return model


def checkpoint_meta(path) -> dict:
    return read_checkpoint(path)[0]
