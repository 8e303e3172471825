"""Training loop and checkpoint persistence.

The loop is deterministic given the config seed: the batch for step t is a
pure function of (seed, t), so a resumed run sees exactly the batches the
uninterrupted run would have and continues bit-for-bit where it stopped.

Checkpoints are a small binary container ("LPCK"): magic, u32 version, u32
tensor count, then per tensor a u16 name length, UTF-8 name, u8 rank, u32
dims and a little-endian float32 payload, followed by a JSON metadata
trailer that runs to end of file.  Writes go to a temp file renamed into
place, so a crash never leaves a half-written checkpoint behind.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
import os
import struct
import tempfile
from typing import Callable, Optional

import numpy as np

from lpsynth.model import Model, ModelConfig
from lpsynth import nn

log = logging.getLogger(__name__)

MAGIC = b"LPCK"
FORMAT_VERSION = 1


class VersionError(Exception):
    """Checkpoint was written by an incompatible format version."""


class CorruptionError(Exception):
    """Checkpoint bytes do not match their declared layout."""


class DivergenceError(Exception):
    """Training loss became non-finite."""


@dataclasses.dataclass(frozen=True)
class TrainConfig:
    steps: int
    batch_size: int = 32
    lr: float = 1e-3
    warmup_steps: int = 1_000
    clip_norm: float = 1.0
    pretrain_steps: int = -1  # -1 = min(10_000, 10% of steps)
    eval_every: int = 0  # 0 disables periodic eval
    seed: int = 0
    model: ModelConfig = dataclasses.field(default_factory=ModelConfig)

    def __post_init__(self):
        if self.pretrain_steps < 0:
            object.__setattr__(
                self, "pretrain_steps", min(10_000, self.steps // 10))
        if not self.steps > self.pretrain_steps >= 0:
            raise ValueError(
                f"need steps > pretrain_steps >= 0, "
                f"got {self.steps} / {self.pretrain_steps}")
        if self.batch_size < 1:
            raise ValueError(f"bad batch size {self.batch_size}")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["model"] = self.model.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        d["model"] = ModelConfig.from_dict(d["model"])
        return cls(**d)


# ---------------------------------------------------------------------------
# checkpoint container


def save_checkpoint(path: str, tensors: dict[str, np.ndarray],
                    meta: dict) -> None:
    """Write the LPCK container atomically."""
    blob = bytearray()
    blob += MAGIC
    blob += struct.pack("<II", FORMAT_VERSION, len(tensors))
    for name, arr in tensors.items():
        # asarray, not ascontiguousarray: the latter promotes rank-0 to rank-1
        arr = np.asarray(arr, dtype="<f4")
        encoded = name.encode("utf-8")
        if len(encoded) > 0xFFFF:
            raise ValueError(f"tensor name too long: {name[:40]}...")
        if arr.ndim > 0xFF:
            raise ValueError(f"rank {arr.ndim} exceeds format limit")
        blob += struct.pack("<H", len(encoded)) + encoded
        blob += struct.pack("<B", arr.ndim)
        blob += struct.pack(f"<{arr.ndim}I", *arr.shape)
        blob += arr.tobytes()
    blob += json.dumps(meta).encode("utf-8")

    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(blob)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CorruptionError(
                f"truncated checkpoint: wanted {n} bytes at offset {self.pos}, "
                f"file has {len(self.data)}")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path: str) -> tuple[dict[str, np.ndarray], dict]:
    """Read and validate an LPCK container."""
    with open(path, "rb") as fh:
        data = fh.read()
    r = _Reader(data)
    if r.take(len(MAGIC)) != MAGIC:
        raise CorruptionError("bad magic: not an LPCK checkpoint")
    (version, count) = r.unpack("<II")
    if version != FORMAT_VERSION:
        raise VersionError(
            f"checkpoint format v{version}, this build reads v{FORMAT_VERSION}")
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = r.unpack("<H")
        name = r.take(name_len).decode("utf-8")
        (rank,) = r.unpack("<B")
        dims = r.unpack(f"<{rank}I")
        n = int(np.prod(dims, dtype=np.int64)) if rank else 1
        payload = r.take(4 * n)
        tensors[name] = np.frombuffer(payload, dtype="<f4").reshape(dims).copy()
    try:
        meta = json.loads(r.data[r.pos :].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptionError(f"unreadable metadata trailer: {exc}") from exc
    if not isinstance(meta, dict):
        raise CorruptionError("metadata trailer is not a JSON object")
    return tensors, meta


def save_train_state(path: str, model: Model, opt: nn.Adam, step: int,
                     cfg: TrainConfig) -> None:
    named = model.named_parameters()
    tensors = dict(named)
    name_of = {id(t): n for n, t in named.items()}
    for p, m, v in zip(opt.params, opt.m, opt.v):
        tensors[f"__opt_m__.{name_of[id(p)]}"] = m
        tensors[f"__opt_v__.{name_of[id(p)]}"] = v
    meta = {
        "config": cfg.to_dict(),
        "step": step,
        "opt_t": opt.t,
    }
    save_checkpoint(path, {k: t.data if hasattr(t, "data") else t
                           for k, t in tensors.items()}, meta)


def _restore_model_tensors(model: Model, tensors: dict[str, np.ndarray]) -> None:
    for name, param in model.named_parameters().items():
        if name not in tensors:
            raise CorruptionError(f"checkpoint missing tensor {name!r}")
        arr = tensors[name]
        if arr.shape != param.data.shape:
            raise CorruptionError(
                f"tensor {name!r} has shape {arr.shape}, "
                f"model expects {param.data.shape}")
        param.data = arr.astype(param.data.dtype)


def load_model(path: str) -> tuple[Model, dict]:
    """Rebuild a model (weights and codebook) from a checkpoint."""
    tensors, meta = load_checkpoint(path)
    cfg = TrainConfig.from_dict(meta["config"])
    model = Model(cfg.model, np.random.default_rng(0))
    _restore_model_tensors(model, tensors)
    return model, meta


def load_train_state(path: str) -> tuple[Model, nn.Adam, int, TrainConfig]:
    tensors, meta = load_checkpoint(path)
    cfg = TrainConfig.from_dict(meta["config"])
    model = Model(cfg.model, np.random.default_rng(0))
    _restore_model_tensors(model, tensors)
    opt = nn.Adam(model.parameters(), lr=cfg.lr, warmup_steps=cfg.warmup_steps,
                  clip_norm=cfg.clip_norm)
    name_of = {id(p): n for n, p in model.named_parameters().items()}
    for i, param in enumerate(opt.params):
        for prefix, slot in (("__opt_m__.", opt.m), ("__opt_v__.", opt.v)):
            key = prefix + name_of[id(param)]
            if key not in tensors:
                raise CorruptionError(f"checkpoint missing tensor {key!r}")
            slot[i] = tensors[key].astype(param.data.dtype)
    opt.t = int(meta["opt_t"])
    return model, opt, int(meta["step"]), cfg


# ---------------------------------------------------------------------------
# training loop


def codebook_usage_entropy(ids: np.ndarray, k: int) -> float:
    """Entropy (nats) of the batch assignment histogram; 0 when degenerate."""
    if ids.size == 0:
        return 0.0
    counts = np.bincount(ids.reshape(-1), minlength=k).astype(np.float64)
    p = counts / counts.sum()
    nz = p[p > 0]
    return float(-(nz * np.log(nz)).sum())


class _BatchSchedule:
    """Epoch-permuted minibatches as a pure function of (seed, step).

    Each epoch's permutation is drawn from a generator seeded by
    (seed, epoch), so a resumed run sees exactly the batches the
    uninterrupted run would have, with no generator state to persist.
    Batches never straddle epochs; a short tail is dropped.
    """

    def __init__(self, n: int, batch_size: int, seed: int):
        self.n = n
        self.batch_size = min(batch_size, n)
        self.per_epoch = n // self.batch_size
        self.seed = seed
        self._epoch = -1
        self._order = np.empty(0, dtype=np.int64)

    def indices(self, step: int) -> np.ndarray:
        epoch, slot = divmod(step, self.per_epoch)
        if epoch != self._epoch:
            self._order = np.random.default_rng(
                (self.seed, epoch)).permutation(self.n)
            self._epoch = epoch
        return self._order[slot * self.batch_size
                           : (slot + 1) * self.batch_size]


@dataclasses.dataclass
class TrainResult:
    model: Model
    optimizer: nn.Adam
    step: int
    history: list[dict]


def train(cfg: TrainConfig, train_tasks, eval_tasks=None, *,
          metrics_path: Optional[str] = None,
          checkpoint_path: Optional[str] = None,
          resume_from: Optional[str] = None,
          eval_fn: Optional[Callable] = None) -> TrainResult:
    """Run compute_loss + Adam + EMA per batch until cfg.steps.

    eval_fn(model, eval_tasks) -> float is called every cfg.eval_every steps
    when provided.  Raises DivergenceError the first time the total loss is
    non-finite.  With resume_from, training continues from the stored step;
    a checkpoint already at cfg.steps is a no-op.
    """
    if not train_tasks:
        raise ValueError("empty training set")
    if resume_from is not None:
        model, opt, start_step, stored_cfg = load_train_state(resume_from)
        # the step target may be extended on resume; everything that shapes
        # the model, the update rule, or the loss schedule must match
        if dataclasses.replace(stored_cfg, steps=cfg.steps,
                               eval_every=cfg.eval_every) != cfg:
            raise ValueError("resume config does not match checkpoint config")
    else:
        model = Model(cfg.model, np.random.default_rng(cfg.seed))
        opt = nn.Adam(model.parameters(), lr=cfg.lr,
                      warmup_steps=cfg.warmup_steps, clip_norm=cfg.clip_norm)
        start_step = 0
    schedule = _BatchSchedule(len(train_tasks), cfg.batch_size, cfg.seed)

    history: list[dict] = []
    writer = None
    fh = None
    fields = ["step", "total", "autoencoder", "latent", "end_to_end",
              "commitment", "grad_norm", "codebook_entropy", "eval_accuracy"]
    if metrics_path is not None:
        fresh = start_step == 0 or not os.path.exists(metrics_path)
        fh = open(metrics_path, "w" if fresh else "a", newline="")
        writer = csv.DictWriter(fh, fieldnames=fields)
        if fresh:
            writer.writeheader()

    try:
        for step in range(start_step, cfg.steps):
            batch = [train_tasks[i] for i in schedule.indices(step)]
            parts, aux = model.compute_loss(batch, step,
                                            pretrain_steps=cfg.pretrain_steps)
            total = float(parts.total.data)
            if not math.isfinite(total):
                raise DivergenceError(f"non-finite loss {total} at step {step}")
            model.zero_grad()
            parts.total.backward()
            grad_norm = opt.step()
            mask = aux["latent_mask"]
            ids = aux["latent_ids"][mask]
            model.codebook.ema_update(aux["encoded"][mask], ids)

            row = dict(parts.as_floats())
            row["step"] = step
            row["grad_norm"] = grad_norm
            row["codebook_entropy"] = codebook_usage_entropy(ids, cfg.model.k)
            row["eval_accuracy"] = ""
            if (eval_fn is not None and cfg.eval_every
                    and (step + 1) % cfg.eval_every == 0):
                row["eval_accuracy"] = eval_fn(model, eval_tasks or [])
            history.append(row)
            if writer is not None:
                writer.writerow(row)
                fh.flush()
            if step % 100 == 0:
                log.info("step %d loss %.4f (ae %.4f lat %.4f e2e %.4f "
                         "commit %.4f)", step, total, parts.autoencoder,
                         parts.latent, parts.end_to_end, parts.commitment)
    finally:
        if fh is not None:
            fh.close()

    end_step = max(start_step, cfg.steps)
    if checkpoint_path is not None:
        save_train_state(checkpoint_path, model, opt, end_step, cfg)
    return TrainResult(model=model, optimizer=opt, step=end_step,
                       history=history)
