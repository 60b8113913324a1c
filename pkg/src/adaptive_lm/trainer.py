"""Training loop with gradient accumulation, and the checkpoint container.

Checkpoint layout (all integers little-endian)::

    magic   8 bytes  b"ALMCKPT\\0"
    version u32      currently 1
    hlen    u64      byte length of the JSON header
    header  hlen bytes of UTF-8 JSON
    data    raw little-endian array blobs; header offsets are relative to here

The header lists every distinct parameter under its canonical path, the
alias table (alias path -> canonical path), optimizer velocities keyed by
canonical path, the schedule step, the batch-iterator position, the dropout
generator state and the configuration text.
"""
from __future__ import annotations

import io
import json
import logging
import math
import os
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, TextIO

import numpy as np

from . import tensor as T
from .config import RunConfig
from .data import BatchIterator
from .optim import LrSchedule, Nesterov, NonFiniteError, clip_gradients

log = logging.getLogger(__name__)

MAGIC = b"ALMCKPT\0"
VERSION = 1
_PREFIX = struct.Struct("<8sIQ")
_DTYPES = {"float32": "<f4", "float64": "<f8"}


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    params: dict[str, np.ndarray]
    aliases: dict[str, str]
    velocity: dict[str, np.ndarray] = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    @property
    def config(self) -> RunConfig:
        return RunConfig.parse(self.meta["config"])


def _blob_entries(arrays: dict[str, np.ndarray], out: io.BytesIO, start: int) -> tuple[list[dict], int]:
    entries = []
    offset = start
    for name, arr in arrays.items():
        code = _DTYPES.get(arr.dtype.name)
        if code is None:
            raise CheckpointError(f"cannot store dtype {arr.dtype} for {name}")
        raw = np.ascontiguousarray(arr, dtype=code).tobytes()
        entries.append({"name": name, "dtype": code, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        out.write(raw)
        offset += len(raw)
    return entries, offset


def write_checkpoint(path, ckpt: Checkpoint) -> None:
    """Write atomically: a crash mid-write never clobbers the previous file."""
    data = io.BytesIO()
    params, end = _blob_entries(ckpt.params, data, 0)
    velocity, _ = _blob_entries(ckpt.velocity, data, end)
    header = dict(ckpt.meta)
    header.update({"byte_order": "little", "params": params, "aliases": ckpt.aliases, "velocity": velocity})
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(_PREFIX.pack(MAGIC, VERSION, len(blob)))
        fh.write(blob)
        fh.write(data.getbuffer())
    os.replace(tmp, path)


def read_checkpoint(path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if len(raw) < _PREFIX.size:
        raise CheckpointError(f"{path}: truncated checkpoint")
    magic, version, hlen = _PREFIX.unpack_from(raw)
    if magic != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(raw[_PREFIX.size : _PREFIX.size + hlen].decode("utf-8"))
    base = _PREFIX.size + hlen

    def arrays(entries):
        out = {}
        for e in entries:
            lo = base + e["offset"]
            arr = np.frombuffer(raw, dtype=e["dtype"], count=e["nbytes"] // np.dtype(e["dtype"]).itemsize, offset=lo)
            out[e["name"]] = arr.reshape(e["shape"]).astype(np.dtype(e["dtype"]).newbyteorder("="))
        return out

    params = arrays(header.pop("params"))
    velocity = arrays(header.pop("velocity"))
    aliases = header.pop("aliases")
    header.pop("byte_order", None)
    return Checkpoint(params, aliases, velocity, header)


def model_checkpoint(model, optimizer: Nesterov | None = None, meta: dict | None = None) -> Checkpoint:
    named = list(model.named_parameters())
    params = {n: p.data for n, p in named}
    velocity = {}
    if optimizer is not None:
        index = {id(p): n for n, p in named}
        velocity = {index[id(p)]: v for p, v in zip(optimizer.params, optimizer.velocity)}
    info = {"config": model.config.dump(), "vocab_size": model.vocab_size}
    words = getattr(model.input_layer, "words", None)
    if words is not None:
        info["words"] = list(words)
    info.update(meta or {})
    return Checkpoint(params, model.sharing_graph(), velocity, info)


def restore_model(model, ckpt: Checkpoint) -> None:
    """Copy weights in place and re-link every alias to its canonical tensor."""
    for alias, canonical in ckpt.aliases.items():
        model.set_path(alias, model.get_path(canonical))
    named = dict(model.named_parameters())
    missing = sorted(set(named) ^ set(ckpt.params))
    if missing:
        raise CheckpointError("parameter names differ from the checkpoint: " + ", ".join(missing[:10]))
    for name, p in named.items():
        src = ckpt.params[name]
        if src.shape != p.data.shape:
            raise CheckpointError(f"{name}: checkpoint shape {src.shape} != model shape {p.data.shape}")
        p.data[...] = src
    graph = model.sharing_graph()
    if graph != ckpt.aliases:
        raise CheckpointError(f"sharing graph differs after load: {graph} vs {ckpt.aliases}")


def load_model(path, build: Callable | None = None):
    """Rebuild a model from a checkpoint's own configuration snapshot."""
    from .model import LanguageModel

    ckpt = read_checkpoint(path)
    build = build or LanguageModel
    model = build(ckpt.config, ckpt.meta["vocab_size"], ckpt.meta.get("words"))
    restore_model(model, ckpt)
    return model, ckpt


# ---------------------------------------------------------------------------


@dataclass
class StepResult:
    step: int
    lr: float
    loss: float
    gnorm: float
    tokens: int
    seconds: float

    def log_line(self) -> str:
        wps = self.tokens / self.seconds if self.seconds > 0 else 0.0
        return f"{self.step}\t{self.lr:.6g}\t{self.loss:.6f}\t{self.gnorm:.6g}\t{wps:.1f}"


class Trainer:
    """Owns the model parameters, optimizer state and data position for one run."""

    def __init__(
        self,
        model,
        iterator: BatchIterator,
        cfg: RunConfig | None = None,
        schedule: LrSchedule | None = None,
        log_stream: TextIO | None = None,
    ):
        self.model = model
        self.iterator = iterator
        self.cfg = cfg or model.config
        self.schedule = schedule or LrSchedule.from_config(self.cfg)
        self.optimizer = Nesterov(model.parameters(), self.cfg["optim.momentum"])
        self.accumulation = self.cfg["optim.accumulation_steps"]
        self.clip = self.cfg["optim.clip"]
        self.step = 0
        self.best_valid = math.inf
        self.log_stream = log_stream

    def train_step(self) -> StepResult:
        """One parameter update from ``accumulation`` batches.

        Summed token losses are back-propagated batch by batch, then the
        accumulated gradient is divided by the token count of all batches.
        """
        started = time.perf_counter()
        self.model.train()
        params = self.optimizer.params
        for p in params:
            p.grad = None
        total_loss = 0.0
        tokens = 0
        for _ in range(self.accumulation):
            batch = next(self.iterator)
            loss = self.model.loss(batch, reduction="sum")
            value = loss.item()
            if not math.isfinite(value):
                raise NonFiniteError(f"non-finite loss {value} at step {self.step}")
            T.backward(loss)
            total_loss += value
            tokens += batch.n_tokens
        grads = [np.zeros_like(p.data) if p.grad is None else p.grad / tokens for p in params]
        grads, norm = clip_gradients(grads, self.clip)
        lr = self.schedule.lr_at(self.step)
        self.optimizer.step(grads, lr)
        for p in params:
            p.grad = None
        self.step += 1
        return StepResult(self.step, lr, total_loss / tokens, norm, tokens, time.perf_counter() - started)

    def run(
        self,
        total_steps: int,
        checkpoint_path=None,
        best_path=None,
        valid_fn: Callable | None = None,
        on_step: Callable[[StepResult], None] | None = None,
    ) -> list[StepResult]:
        """Train until ``self.step == total_steps``.

        A non-finite loss or gradient aborts the run; the last checkpoint
        written stays on disk untouched.
        """
        cfg = self.cfg
        history = []
        window: list[StepResult] = []
        while self.step < total_steps:
            result = self.train_step()
            history.append(result)
            window.append(result)
            if on_step is not None:
                on_step(result)
            if self.step % cfg["train.log_interval"] == 0 or self.step == total_steps:
                self._log(window)
                window = []
            if valid_fn is not None and (self.step % cfg["train.valid_interval"] == 0 or self.step == total_steps):
                loss = valid_fn(self.model)
                log.info("step %d valid loss %.4f ppl %.2f", self.step, loss, math.exp(min(loss, 700)))
                if loss < self.best_valid:
                    self.best_valid = loss
                    if best_path is not None:
                        self.save(best_path)
            if checkpoint_path is not None and (
                self.step % cfg["train.save_interval"] == 0 or self.step == total_steps
            ):
                self.save(checkpoint_path)
        return history

    def _log(self, window: list[StepResult]) -> None:
        if not window or self.log_stream is None:
            return
        last = window[-1]
        merged = StepResult(
            last.step,
            last.lr,
            sum(r.loss * r.tokens for r in window) / sum(r.tokens for r in window),
            last.gnorm,
            sum(r.tokens for r in window),
            sum(r.seconds for r in window),
        )
        self.log_stream.write(merged.log_line() + "\n")
        self.log_stream.flush()

    # -- persistence ----------------------------------------------------------
    def checkpoint(self) -> Checkpoint:
        meta = {
            "step": self.step,
            "optimizer_steps": self.optimizer.steps,
            "momentum": self.optimizer.momentum,
            "iterator": self.iterator.state_dict(),
            "rng": self.model._rng.bit_generator.state if self.model._rng is not None else None,
            "best_valid": None if math.isinf(self.best_valid) else self.best_valid,
        }
        return model_checkpoint(self.model, self.optimizer, meta)

    def save(self, path) -> None:
        write_checkpoint(path, self.checkpoint())

    def load(self, source) -> None:
        ckpt = source if isinstance(source, Checkpoint) else read_checkpoint(source)
        restore_model(self.model, ckpt)
        self.optimizer = Nesterov(self.model.parameters(), ckpt.meta["momentum"])
        index = {id(p): n for n, p in self.model.named_parameters()}
        for p, v in zip(self.optimizer.params, self.optimizer.velocity):
            v[...] = ckpt.velocity[index[id(p)]]
        self.optimizer.steps = ckpt.meta["optimizer_steps"]
        self.step = ckpt.meta["step"]
        self.iterator.load_state_dict(ckpt.meta["iterator"])
        if ckpt.meta.get("rng") is not None:
            rng = np.random.default_rng()
            rng.bit_generator.state = ckpt.meta["rng"]
            self.model.set_rng(rng)
        best = ckpt.meta.get("best_valid")
        self.best_valid = math.inf if best is None else best


def train_loop(model, iterator: BatchIterator, cfg: RunConfig, total_steps: int, **kwargs) -> list[StepResult]:
    return Trainer(model, iterator, cfg, log_stream=kwargs.pop("log_stream", None)).run(total_steps, **kwargs)
