"""The synthesizer networks and their joint training loss.

Three Transformer components share one spec encoder:

* a program encoder that compresses a T-token program into S = ceil(T/2^ell)
  continuous vectors (a Transformer encoder followed by ell stride-2
  convolutions), each quantized against a codebook;
* a latent predictor that autoregressively models the quantized code given
  the I/O examples (output classes: K codebook indices plus EOS);
* a program decoder with two parallel cross-attention streams — one over the
  per-example spec encodings (max-pooled late), one over the latent code —
  whose outputs are concatenated and projected to program-token logits.

I/O examples never mix before the late max-pools, so every model output is
invariant to example order.  The codebook is EMA-maintained and receives no
gradient from any path here.  Latent sequences are handled in two id spaces:
the latent *vocabulary* space (0/1/2 reserved, code k at id k+3) for
serialization and predictor inputs, and the predictor *class* space
(code k at k, EOS at K) for its output distribution.
"""

from __future__ import annotations

import dataclasses
import math
from typing import Optional

import numpy as np

from lpsynth import dsl, taskgen
from lpsynth import nn
from lpsynth.nn import Tensor
from lpsynth.nn import tensor as tz
from lpsynth.vq import Codebook, ShapeError

DEFAULT_CODEBOOK = {"full": 40, "toy": 10}


@dataclasses.dataclass(frozen=True)
class ModelConfig:
    dialect: str = "full"
    embed_dim: int = 128
    hidden_dim: int = 512
    n_layers: int = 3
    n_heads: int = 4
    ell: int = 2
    k: int = 0  # 0 = dialect default
    baseline: bool = False  # deterministic zero in place of the latent stream

    def __post_init__(self):
        if self.dialect not in dsl.DIALECTS:
            raise ValueError(f"unknown dialect {self.dialect!r}")
        if self.k == 0:
            object.__setattr__(self, "k", DEFAULT_CODEBOOK[self.dialect])
        if self.embed_dim % self.n_heads != 0:
            raise ValueError(
                f"embed_dim {self.embed_dim} not divisible by {self.n_heads} heads")
        if self.ell < 0:
            raise ValueError(f"negative compression factor {self.ell}")
        if self.k < 2:
            raise ValueError(f"codebook size must be >= 2, got {self.k}")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


@dataclasses.dataclass
class LossParts:
    """Eq-style decomposition; total is the graph node to backpropagate."""

    total: Tensor
    autoencoder: float
    latent: float
    end_to_end: float
    commitment: float

    def as_floats(self) -> dict[str, float]:
        return {
            "total": float(self.total.data),
            "autoencoder": self.autoencoder,
            "latent": self.latent,
            "end_to_end": self.end_to_end,
            "commitment": self.commitment,
        }


class SpecCache:
    """Frozen per-task spec encodings reused across beam-search steps."""

    __slots__ = ("e", "keep")

    def __init__(self, e: np.ndarray, keep: np.ndarray):
        self.e = e        # (N, Lo, D)
        self.keep = keep  # (N, Lo) bool


class _Stack(nn.Module):
    """n pre-norm Transformer layers with a final LayerNorm."""

    def __init__(self, cfg: ModelConfig, rng, *, cross: bool):
        self.layers = [
            nn.TransformerLayer(cfg.embed_dim, cfg.n_heads, cfg.hidden_dim,
                                rng, cross=cross)
            for _ in range(cfg.n_layers)
        ]
        self.ln = nn.LayerNorm(cfg.embed_dim)

    def __call__(self, x, *, self_keep=None, memory=None, memory_keep=None):
        for layer in self.layers:
            x = layer(x, self_keep=self_keep, memory=memory,
                      memory_keep=memory_keep)
        return self.ln(x)


def _pad_keep(ids: np.ndarray) -> np.ndarray:
    """Key mask hiding padding: (B, L) -> (B, 1, 1, L)."""
    return (ids != taskgen.PAD_ID)[:, None, None, :]


def _causal_keep(ids: np.ndarray) -> np.ndarray:
    """Causal + padding key mask: (B, L) -> (B, 1, L, L)."""
    return nn.causal_mask(ids.shape[1])[None, None] & _pad_keep(ids)


class Model(nn.Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.char_vocab = taskgen.char_vocab()
        self.program_vocab = taskgen.program_vocab(cfg.dialect)
        d = cfg.embed_dim
        n_prog = len(self.program_vocab)

        self.char_embed = nn.Embedding(len(self.char_vocab), d, rng)
        self.input_enc = _Stack(cfg, rng, cross=False)
        self.output_enc = _Stack(cfg, rng, cross=True)

        self.prog_embed_enc = nn.Embedding(n_prog, d, rng)
        self.prog_enc = _Stack(cfg, rng, cross=False)
        self.convs = [nn.Conv1dHalf(d, d, rng) for _ in range(cfg.ell)]
        self.codebook = Codebook(cfg.k, d, rng)

        self.latent_specials = nn.Embedding(len(taskgen.SPECIALS), d, rng)
        self.predictor = _Stack(cfg, rng, cross=True)
        self.predictor_head = nn.Linear(d, cfg.k + 1, rng)

        self.prog_embed_dec = nn.Embedding(n_prog, d, rng)
        self.dec_spec = _Stack(cfg, rng, cross=True)
        self.dec_latent = _Stack(cfg, rng, cross=True)
        self.out_proj = nn.Linear(2 * d, n_prog, rng)

        self.pretrain_embed = nn.Embedding(n_prog, d, rng)

    # -- shared pieces -------------------------------------------------------

    @property
    def eos_class(self) -> int:
        """Predictor class index reserved for end-of-code."""
        return self.cfg.k

    def _positions(self, x: Tensor) -> Tensor:
        length, d = x.shape[-2], x.shape[-1]
        pos = nn.sinusoidal_positions(length, d).astype(tz.default_dtype())
        return x * math.sqrt(d) + Tensor(pos)

    def _embed_chars(self, ids: np.ndarray) -> Tensor:
        return self._positions(nn.embedding(self.char_embed.table, ids))

    # -- spec encoder ---------------------------------------------------------

    def encode_spec(self, input_ids: np.ndarray,
                    output_ids: np.ndarray) -> tuple[Tensor, np.ndarray]:
        """Per-example encodings.

        input_ids/output_ids: (B, N, L) padded id arrays.  Returns
        (E: (B, N, Lo, D), keep: (B, N, Lo) bool).  Examples are processed
        independently; permuting them permutes E identically.
        """
        if input_ids.ndim != 3 or output_ids.ndim != 3:
            raise ShapeError("expected (batch, examples, length) id arrays")
        if input_ids.shape[:2] != output_ids.shape[:2]:
            raise ShapeError("input/output example counts disagree")
        b, n, li = input_ids.shape
        lo = output_ids.shape[2]
        flat_in = input_ids.reshape(b * n, li)
        flat_out = output_ids.reshape(b * n, lo)

        enc_in = self.input_enc(self._embed_chars(flat_in),
                                self_keep=_pad_keep(flat_in))
        e = self.output_enc(self._embed_chars(flat_out),
                            self_keep=_pad_keep(flat_out),
                            memory=enc_in, memory_keep=_pad_keep(flat_in))
        keep = (flat_out != taskgen.PAD_ID).reshape(b, n, lo)
        return e.reshape(b, n, lo, -1), keep

    # -- program encoder ------------------------------------------------------

    def latent_length(self, t: int) -> int:
        return max(1, math.ceil(t / (2 ** self.cfg.ell)))

    def program_encode(self, prog_ids: np.ndarray
                       ) -> tuple[Tensor, np.ndarray, np.ndarray]:
        """Continuous latents for content-token programs.

        prog_ids: (B, T) content ids (no BOS/EOS), PAD-padded.  Returns
        (latents (B, S, D), assigned codebook ids (B, S), valid (B, S) bool)
        with per-sequence S_i = ceil(T_i / 2^ell).  Padded positions carry
        zeros and arbitrary ids; mask before use.
        """
        if prog_ids.ndim != 2:
            raise ShapeError("expected a (batch, tokens) id array")
        t_lens = (prog_ids != taskgen.PAD_ID).sum(axis=1)
        if np.any(t_lens == 0):
            raise ShapeError("empty program in batch")
        x = self._positions(nn.embedding(self.prog_embed_enc.table, prog_ids))
        x = self.prog_enc(x, self_keep=_pad_keep(prog_ids))

        lens = t_lens.copy()
        mask = prog_ids != taskgen.PAD_ID
        for conv in self.convs:
            # zero padding so each sequence encodes independently of batch shape
            x = x * Tensor(mask[..., None].astype(x.data.dtype))
            x = conv(x)
            lens = -(-lens // 2)
            mask = np.arange(x.shape[1])[None, :] < lens[:, None]
        x = x * Tensor(mask[..., None].astype(x.data.dtype))
        ids = self.codebook.assign(x.data)
        return x, ids, mask

    # -- latent predictor -----------------------------------------------------

    def _embed_latent_prefix(self, prefix: np.ndarray) -> Tensor:
        """Prefix in latent-vocab space; code rows come from the codebook
        read-only, specials from a learned table."""
        special = nn.embedding(self.latent_specials.table,
                               np.minimum(prefix, len(taskgen.SPECIALS) - 1))
        rows = self.codebook.rows.data
        code = rows[np.clip(prefix - len(taskgen.SPECIALS), 0, self.cfg.k - 1)]
        is_special = (prefix < len(taskgen.SPECIALS))[..., None]
        dtype = tz.default_dtype()
        emb = special * Tensor(is_special.astype(dtype)) \
            + Tensor(code * ~is_special)
        return self._positions(emb)

    def predictor_logits(self, e: Tensor, e_keep: np.ndarray,
                         prefix: np.ndarray) -> Tensor:
        """Next-code logits: (B, P) vocab-space prefix -> (B, P, K+1).

        Causal over the prefix; cross-attends each example separately, then
        max-pools over examples before the head.
        """
        b, n, lo, d = e.shape
        if prefix.ndim != 2 or prefix.shape[0] != b:
            raise ShapeError(f"prefix batch mismatch: {prefix.shape} vs {b}")
        p = prefix.shape[1]
        x = self._embed_latent_prefix(prefix)
        tiled = (x.reshape(b, 1, p, d) * Tensor(np.ones((1, n, 1, 1), x.data.dtype))
                 ).reshape(b * n, p, d)
        h = self.predictor(
            tiled,
            self_keep=np.repeat(_causal_keep(prefix), n, axis=0),
            memory=e.reshape(b * n, lo, d),
            memory_keep=e_keep.reshape(b * n, lo)[:, None, None, :])
        pooled = h.reshape(b, n, p, d).amax(axis=1)
        return self.predictor_head(pooled)

    # -- program decoder ------------------------------------------------------

    def decoder_logits(self, e: Tensor, e_keep: np.ndarray,
                       z: Optional[Tensor], z_keep: Optional[np.ndarray],
                       prefix: np.ndarray) -> Tensor:
        """Program-token logits from the two-stream decoder.

        prefix: (B, P) BOS-led program ids.  z: (B, S, D) latent memory or
        None for the no-latent baseline (the latent stream contributes an
        exact zero and nothing is backpropagated through it).
        """
        b, n, lo, d = e.shape
        if prefix.ndim != 2 or prefix.shape[0] != b:
            raise ShapeError(f"prefix batch mismatch: {prefix.shape} vs {b}")
        p = prefix.shape[1]
        x = self._positions(nn.embedding(self.prog_embed_dec.table, prefix))
        causal = _causal_keep(prefix)

        spec_stream = self.dec_spec(
            (x.reshape(b, 1, p, d) * Tensor(np.ones((1, n, 1, 1), x.data.dtype))
             ).reshape(b * n, p, d),
            self_keep=np.repeat(causal, n, axis=0),
            memory=e.reshape(b * n, lo, d),
            memory_keep=e_keep.reshape(b * n, lo)[:, None, None, :])
        pooled = spec_stream.reshape(b, n, p, d).amax(axis=1)

        if self.cfg.baseline or z is None or z.shape[1] == 0:
            latent_stream = Tensor(np.zeros_like(pooled.data))
        else:
            latent_stream = self.dec_latent(
                x, self_keep=causal, memory=z,
                memory_keep=z_keep[:, None, None, :])
        return self.out_proj(tz.concat([pooled, latent_stream], axis=-1))

    # -- training loss --------------------------------------------------------

    def prepare_batch(self, tasks, with_programs: bool = True) -> dict:
        """Pad and frame a batch of tasks into id arrays."""
        if not tasks:
            raise ShapeError("empty batch")
        n = len(tasks[0].inputs)
        if any(len(t.inputs) != n for t in tasks):
            raise ShapeError("tasks in one batch must share the example count")
        enc = lambda s: taskgen.encode_string(s, self.char_vocab)
        inputs = [enc(s) for t in tasks for s in t.inputs]
        outputs = [enc(s) for t in tasks for s in t.outputs]
        b = len(tasks)
        out = {
            "inputs": taskgen.pad_batch(inputs).reshape(b, n, -1),
            "outputs": taskgen.pad_batch(outputs).reshape(b, n, -1),
        }
        if with_programs:
            if any(t.program is None for t in tasks):
                raise ShapeError("training batch requires ground-truth programs")
            content = [
                [self.program_vocab.id(tok) for tok in taskgen.program_tokens(t.program)]
                for t in tasks
            ]
            out["prog_content"] = taskgen.pad_batch(content)
            out["prog_in"] = taskgen.pad_batch(
                [[taskgen.BOS_ID] + ids for ids in content])
            out["prog_tgt"] = taskgen.pad_batch(
                [ids + [taskgen.EOS_ID] for ids in content])
        return out

    def _block_averaged_latents(self, prog_content: np.ndarray,
                                s_max: int) -> Tensor:
        """Pretraining surrogate: program-token embeddings mean-pooled over
        blocks of 2^ell, EOS-padded per sequence to a block multiple."""
        block = 2 ** self.cfg.ell
        b, t = prog_content.shape
        lens = (prog_content != taskgen.PAD_ID).sum(axis=1)
        ids = np.full((b, s_max * block), taskgen.PAD_ID, dtype=prog_content.dtype)
        ids[:, :t] = prog_content
        cols = np.arange(s_max * block)[None, :]
        valid_blocks = -(-lens // block) * block
        ids[(cols >= lens[:, None]) & (cols < valid_blocks[:, None])] = taskgen.EOS_ID
        emb = nn.embedding(self.pretrain_embed.table, ids)
        d = emb.shape[-1]
        return emb.reshape(b, s_max, block, d).mean(axis=2)

    def compute_loss(self, tasks, step: int, pretrain_steps: int = 10_000,
                     frozen: Optional[dict] = None) -> tuple[LossParts, dict]:
        """Teacher-forced joint loss over a batch of solved tasks.

        Returns (parts, aux); aux carries the encoder outputs, assignments
        and validity mask the trainer needs for EMA updates and codebook
        usage metrics.  Before `pretrain_steps` the decoder consumes
        block-averaged token embeddings instead of quantized codes and the
        end-to-end term is off; latent-prediction and commitment stay on.

        `frozen` (the aux of a prior identical call) linearizes the
        quantizer around that reference point: assignments are pinned and
        the straight-through output becomes enc + const.  This is the
        surrogate whose gradient the estimator reports, and the only form a
        finite-difference check can agree with — the raw quantizer is
        piecewise constant in the encoder.
        """
        arrays = self.prepare_batch(tasks)
        e, e_keep = self.encode_spec(arrays["inputs"], arrays["outputs"])

        enc, lat_ids, lat_mask = self.program_encode(arrays["prog_content"])
        if frozen is not None:
            if frozen["latent_ids"].shape != lat_ids.shape:
                raise ShapeError(
                    f"frozen ids {frozen['latent_ids'].shape} "
                    f"vs batch {lat_ids.shape}")
            lat_ids = frozen["latent_ids"]
        b, s_max = lat_ids.shape
        flat_valid = enc.reshape(b * s_max, -1)[lat_mask.reshape(-1)]
        commitment = self.codebook.commitment_loss(
            flat_valid, ids=lat_ids[lat_mask])

        # teacher-forced latent prediction against the quantized assignments
        n_special = len(taskgen.SPECIALS)
        s_lens = lat_mask.sum(axis=1)
        lp_prefix = np.full((b, s_max + 1), taskgen.PAD_ID, dtype=np.int64)
        lp_prefix[:, 0] = taskgen.BOS_ID
        lp_prefix[:, 1:][lat_mask] = lat_ids[lat_mask] + n_special
        lp_targets = np.full((b, s_max + 1), -1, dtype=np.int64)
        lp_targets[:, :s_max][lat_mask] = lat_ids[lat_mask]
        lp_targets[np.arange(b), s_lens] = self.eos_class
        lp_logits = self.predictor_logits(e, e_keep, lp_prefix)
        latent_part = tz.softmax_cross_entropy(lp_logits, lp_targets,
                                               ignore_id=-1)

        pretraining = step < pretrain_steps
        if pretraining:
            z_ae = self._block_averaged_latents(arrays["prog_content"], s_max)
        elif frozen is not None:
            offset = self.codebook.rows.data[lat_ids] - frozen["encoded"]
            z_ae = enc + Tensor(offset)
        else:
            z_ae, _ = self.codebook.straight_through(enc, ids=lat_ids)
        ae_logits = self.decoder_logits(e, e_keep, z_ae, lat_mask,
                                        arrays["prog_in"])
        ae_part = tz.softmax_cross_entropy(ae_logits, arrays["prog_tgt"])

        if pretraining:
            e2e_part = None
        else:
            probs = nn.softmax(lp_logits, axis=-1)[:, :s_max, : self.cfg.k]
            denom = probs.sum(axis=-1, keepdims=True) + 1e-9
            z_soft = self.codebook.soft_mix(probs / denom)
            e2e_logits = self.decoder_logits(e, e_keep, z_soft, lat_mask,
                                             arrays["prog_in"])
            e2e_part = tz.softmax_cross_entropy(e2e_logits, arrays["prog_tgt"])

        total = ae_part + latent_part + commitment
        if e2e_part is not None:
            total = total + e2e_part
        parts = LossParts(
            total=total,
            autoencoder=float(ae_part.data),
            latent=float(latent_part.data),
            end_to_end=0.0 if e2e_part is None else float(e2e_part.data),
            commitment=float(commitment.data),
        )
        aux = {
            "encoded": enc.data,
            "latent_ids": lat_ids,
            "latent_mask": lat_mask,
        }
        return parts, aux

    # -- inference ------------------------------------------------------------

    def encode_task(self, task) -> SpecCache:
        """Spec encodings for one task, detached for reuse during search."""
        with nn.no_grad():
            arrays = self.prepare_batch([task], with_programs=False)
            e, keep = self.encode_spec(arrays["inputs"], arrays["outputs"])
        return SpecCache(e.data[0], keep[0])

    def _tile_cache(self, cache: SpecCache, h: int) -> tuple[Tensor, np.ndarray]:
        n, lo, d = cache.e.shape
        e = np.broadcast_to(cache.e, (h, n, lo, d))
        keep = np.broadcast_to(cache.keep, (h, n, lo))
        return Tensor(e), keep

    def latent_logprobs(self, cache: SpecCache,
                        prefixes: np.ndarray) -> np.ndarray:
        """Next-step log-probs over predictor classes for H same-length
        prefixes in latent-vocab space: (H, P) -> (H, K+1)."""
        with nn.no_grad():
            e, keep = self._tile_cache(cache, prefixes.shape[0])
            logits = self.predictor_logits(e, keep, prefixes)
        return tz.log_softmax_np(logits.data[:, -1, :])

    def program_logprobs(self, cache: SpecCache, code: np.ndarray,
                         prefixes: np.ndarray) -> np.ndarray:
        """Next-step log-probs over program tokens given a latent code.

        code: (S,) predictor-class ids (no EOS); prefixes: (H, P) BOS-led
        program ids.  Returns (H, V).
        """
        h = prefixes.shape[0]
        with nn.no_grad():
            e, keep = self._tile_cache(cache, h)
            if code.size == 0:
                z, z_keep = None, None
            else:
                rows = self.codebook.rows.data[code]
                z = Tensor(np.broadcast_to(rows, (h,) + rows.shape))
                z_keep = np.ones((h, code.size), dtype=bool)
            logits = self.decoder_logits(e, keep, z, z_keep, prefixes)
        return tz.log_softmax_np(logits.data[:, -1, :])
