"""Text encoder over search text and behavior descriptions.

Hashed-vocabulary tokens, learned positional embeddings, a small transformer
stack, masked mean pooling, and a projection into the shared embedding space.
Pretrained with whole-token MLM over the hashed vocabulary. The same encoder
architecture (with separate parameters) serves as the description/demand
tower during alignment, where it also accepts learnable prefix vectors.
"""

from __future__ import annotations

import hashlib
import re
from dataclasses import asdict, dataclass, field

import numpy as np

from . import nn
from .errors import ConfigError, DimensionError, TrainingDiverged
from .nn import tensor as T
from .nn.tensor import Tensor


def stable_token_hash(token: str, vocab: int) -> int:
    """Platform-fixed hash (blake2b) of a token into [0, vocab)."""
    digest = hashlib.blake2b(token.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little") % vocab


_DROP_CHARS = str.maketrans("", "", "$,'")
_NON_WORD = re.compile(r"[^a-z0-9 ]")


def normalize_words(text: str) -> list[str]:
    """Lower-case, strip punctuation, split on whitespace."""
    text = text.lower().translate(_DROP_CHARS)
    return _NON_WORD.sub(" ", text).split()


@dataclass
class TextConfig:
    dim: int = 32
    depth: int = 2
    heads: int = 4
    ff_hidden: int = 64
    vocab_bits: int = 15
    max_len: int = 64
    mask_rate: float = 0.15
    batch_size: int = 64
    steps: int = 300
    lr0: float = 4e-4
    lr_min: float = 1e-5
    weight_decay: float = 0.01

    @property
    def vocab(self) -> int:
        return 1 << self.vocab_bits

    @property
    def mask_id(self) -> int:
        return self.vocab

    @property
    def pad_id(self) -> int:
        return self.vocab + 1

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, d: dict) -> "TextConfig":
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})


def tokenize(text: str, config: TextConfig) -> list[int]:
    """Deterministic hashed token ids, truncated to max_len."""
    words = normalize_words(text)[: config.max_len]
    return [stable_token_hash(w, config.vocab) for w in words]


@dataclass
class TextParams:
    embed: Tensor            # (vocab+2, d): trailing rows are MASK and PAD
    pos: Tensor              # (max_len, d)
    layers: list[nn.TransformerLayer]
    final_ln: nn.LayerNorm
    pool: nn.Linear
    null_text: Tensor        # (d,) returned exactly for empty input
    mlm_head: Tensor         # (d, vocab), bias-free


def init_text_params(config: TextConfig, rng: np.random.Generator,
                     dtype=np.float32) -> TextParams:
    return TextParams(
        embed=nn.normal_init((config.vocab + 2, config.dim), rng, std=0.02, dtype=dtype),
        pos=nn.normal_init((config.max_len, config.dim), rng, std=0.02, dtype=dtype),
        layers=[nn.init_transformer_layer(config.dim, config.ff_hidden, rng, dtype=dtype)
                for _ in range(config.depth)],
        final_ln=nn.init_layernorm(config.dim, dtype=dtype),
        pool=nn.init_linear(config.dim, config.dim, rng, dtype=dtype),
        null_text=nn.normal_init((config.dim,), rng, std=0.02, dtype=dtype),
        mlm_head=nn.xavier_uniform((config.dim, config.vocab), rng, dtype=dtype),
    )


def _pad_batch(ids_batch: list[list[int]], config: TextConfig) -> tuple[np.ndarray, np.ndarray]:
    max_len = max((len(ids) for ids in ids_batch), default=0)
    max_len = max(max_len, 1)
    padded = np.full((len(ids_batch), max_len), config.pad_id, dtype=np.int64)
    valid = np.zeros((len(ids_batch), max_len), dtype=np.float64)
    for i, ids in enumerate(ids_batch):
        if any(t >= config.vocab + 2 for t in ids):    # vocab, MASK, PAD are legal
            raise ConfigError("token id outside hashed vocabulary")
        padded[i, : len(ids)] = ids
        valid[i, : len(ids)] = 1.0
    return padded, valid


def _token_states(padded: np.ndarray, valid: np.ndarray, params: TextParams,
                  config: TextConfig):
    """Transformer token outputs (B, L, d) with pads masked out of attention."""
    dtype = params.embed.data.dtype
    b, length = padded.shape
    if length > config.max_len:
        raise DimensionError(f"sequence length {length} exceeds max_len {config.max_len}")
    x = T.add(T.take_rows(params.embed, padded), params.pos[:length])
    attn_mask = ((1.0 - valid) * -1e9).astype(dtype).reshape(b, 1, 1, length)
    for layer in params.layers:
        x = nn.transformer_layer(x, layer, config.heads, mask=attn_mask)
    return nn.layernorm(x, params.final_ln)


def encode_text_batch(ids_batch: list[list[int]], params: TextParams,
                      config: TextConfig) -> Tensor:
    """Batched encoding; rows with no tokens map exactly to the null vector."""
    padded, valid = _pad_batch(ids_batch, config)
    states = _token_states(padded, valid, params, config)
    dtype = params.embed.data.dtype
    counts = valid.sum(axis=1, keepdims=True)
    weights = (valid / np.maximum(counts, 1.0)).astype(dtype)
    pooled = T.tsum(T.mul(states, Tensor(weights[..., None])), axis=1)
    projected = nn.linear(pooled, params.pool)
    nonempty = (counts > 0).astype(dtype)
    return T.add(T.mul(projected, Tensor(nonempty)),
                 T.mul(params.null_text, Tensor(1.0 - nonempty)))


def encode_text(ids: list[int], params: TextParams, config: TextConfig,
                prefix: Tensor | None = None) -> Tensor:
    """Single-sequence encoding; `prefix` prepends learnable vectors (prompt)."""
    if not ids and prefix is None:
        return params.null_text
    dtype = params.embed.data.dtype
    p = 0 if prefix is None else prefix.shape[0]
    ids = list(ids)[: config.max_len - p]
    parts = []
    if prefix is not None:
        parts.append(prefix)
    if ids:
        parts.append(T.take_rows(params.embed, np.asarray(ids, dtype=np.int64)))
    x = parts[0] if len(parts) == 1 else T.concat(parts, axis=0)
    length = x.shape[0]
    x = T.add(x, params.pos[:length])
    x = T.reshape(x, (1, length, config.dim))
    for layer in params.layers:
        x = nn.transformer_layer(x, layer, config.heads)
    x = nn.layernorm(x, params.final_ln)
    pooled = T.tmean(x, axis=1)
    return T.reshape(nn.linear(pooled, params.pool), (config.dim,))


def mask_tokens(ids: list[int], rate: float, rng: np.random.Generator,
                config: TextConfig) -> tuple[list[int], list[int]]:
    """Whole-token masking of ~rate of the positions, at least one."""
    if not ids:
        return [], []
    count = max(1, int(round(rate * len(ids))))
    positions = sorted(rng.choice(len(ids), size=count, replace=False).tolist())
    masked = list(ids)
    for p in positions:
        masked[p] = config.mask_id
    return masked, positions


def mlm_loss_batch(ids_batch: list[list[int]], params: TextParams, config: TextConfig,
                   rng: np.random.Generator):
    """Mean cross-entropy over masked positions, vocabulary-wide softmax."""
    masked_batch, targets, flat_positions = [], [], []
    width = max(max((len(i) for i in ids_batch), default=1), 1)
    for row, ids in enumerate(ids_batch):
        masked, positions = mask_tokens(ids, config.mask_rate, rng, config)
        masked_batch.append(masked)
        for p in positions:
            targets.append(ids[p])
            flat_positions.append(row * width + p)
    padded, valid = _pad_batch(masked_batch, config)
    states = _token_states(padded, valid, params, config)
    flat = T.reshape(states, (padded.shape[0] * padded.shape[1], config.dim))
    picked = T.take_rows(flat, np.asarray(flat_positions, dtype=np.int64))
    logits = T.matmul(picked, params.mlm_head)
    return T.cross_entropy_logits(logits, np.arange(len(targets)), targets)


def pretrain_text(corpus: list[str], config: TextConfig, seed: int):
    """MLM pretraining over the corpus; returns (params, trace rows)."""
    corpus_ids = [tokenize(text, config) for text in corpus]
    corpus_ids = [ids for ids in corpus_ids if ids]
    if not corpus_ids:
        raise ConfigError("text pretraining corpus is empty after tokenization")
    rng = np.random.default_rng([seed, 0x7E27])
    params = init_text_params(config, rng)
    opt = nn.AdamW(nn.collect_tensors(params).values(), lr=config.lr0,
                   weight_decay=config.weight_decay)
    trace = []
    for step in range(config.steps):
        batch_idx = rng.choice(len(corpus_ids), size=min(config.batch_size, len(corpus_ids)),
                               replace=False)
        batch = [corpus_ids[i] for i in batch_idx]
        loss = mlm_loss_batch(batch, params, config, rng)
        value = loss.item()
        if not np.isfinite(value):
            raise TrainingDiverged("text MLM loss is not finite", step=step,
                                   batch=batch_idx.tolist())
        opt.zero_grad()
        nn.backward(loss)
        lr = nn.cosine_decay_lr(step, config.steps, config.lr0, config.lr_min)
        opt.step(lr=lr)
        trace.append({"step": step, "loss": value, "lr": lr})
    return params, trace


def text_checkpoint_payload(params: TextParams, config: TextConfig):
    return nn.collect_tensors(params), {"kind": "text", "config": config.to_json()}


def text_params_from_checkpoint(hyper: dict, arrays: dict) -> tuple[TextParams, TextConfig]:
    config = TextConfig.from_json(hyper["config"])
    params = init_text_params(config, np.random.default_rng(0))
    nn.assign_tensors(params, arrays)
    return params, config
