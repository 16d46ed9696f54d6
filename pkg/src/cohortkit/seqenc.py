"""Behavioral-sequence encoder.

Per-window token multisets (paybill, page-click, miniprogram, all modality
tagged into one hashed vocabulary) are embedded, mean-pooled, and lifted by a
feedforward into window vectors z_t; a GRU aggregates them causally into
context vectors c_t. Pretraining asks the last context vector to pick out its
own future windows among in-batch candidates (InfoNCE over cosine similarity
with a learned temperature), plus a cyclic KL penalty pulling context vectors
at the periodicity lag together.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import nn
from .errors import ConfigError, TrainingDiverged
from .nn import tensor as T
from .nn.tensor import Tensor
from .textenc import stable_token_hash

SEQ_MODALITIES = ("paybill", "spm", "miniprogram")


@dataclass
class SeqConfig:
    dim: int = 32
    ff_hidden: int = 64
    vocab_bits: int = 15
    total_windows: int = 9
    context_windows: int = 5
    future_windows: int = 4
    cycle: int = 2
    lambda_cyc: float = 0.1
    temperature_init: float = 0.07
    in_batch_negatives: bool = True
    anchor_all: bool = False
    batch_size: int = 64
    steps: int = 500
    lr0: float = 4e-4
    lr_min: float = 1e-5
    weight_decay: float = 0.01

    def __post_init__(self):
        if self.context_windows + self.future_windows != self.total_windows:
            raise ConfigError("context + future must equal total windows")
        if not 1 <= self.cycle < self.total_windows:
            raise ConfigError(f"cycle {self.cycle} outside [1, {self.total_windows})")
        if self.lambda_cyc < 0:
            raise ConfigError("lambda_cyc must be >= 0")
        if self.future_windows < 1:
            raise ConfigError("future window count must be >= 1")

    @property
    def vocab(self) -> int:
        return 1 << self.vocab_bits

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, d: dict) -> "SeqConfig":
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})


@dataclass
class SeqParams:
    embed: Tensor                 # (vocab, d)
    null_window: Tensor           # (d,) exact output for all-empty windows
    ff: nn.FeedForward
    gru: nn.GruParams
    proj_z: nn.Linear
    proj_c: nn.Linear
    log_temp: Tensor              # scalar, exp() is the similarity temperature


def init_seq_params(config: SeqConfig, rng: np.random.Generator, dtype=np.float32) -> SeqParams:
    d = config.dim
    return SeqParams(
        embed=nn.normal_init((config.vocab, d), rng, std=0.02, dtype=dtype),
        null_window=nn.normal_init((d,), rng, std=0.02, dtype=dtype),
        ff=nn.init_feedforward(d, config.ff_hidden, rng, dtype=dtype),
        gru=nn.init_gru(d, d, rng, dtype=dtype),
        proj_z=nn.init_linear(d, d, rng, dtype=dtype),
        proj_c=nn.init_linear(d, d, rng, dtype=dtype),
        log_temp=Tensor(np.log(np.asarray(config.temperature_init, dtype=dtype)),
                        requires_grad=True),
    )


def window_token_ids(events, windows: int, config: SeqConfig) -> list[list[int]]:
    """Hashed, modality-tagged token ids per window (1..windows)."""
    per_window: list[list[int]] = [[] for _ in range(windows)]
    for e in events:
        if e.modality in SEQ_MODALITIES and e.window <= windows:
            for tok in e.tokens():
                per_window[e.window - 1].append(
                    stable_token_hash(f"{e.modality}:{tok}", config.vocab))
    return per_window


def pad_windows(users_window_ids: list[list[list[int]]]) -> tuple[np.ndarray, np.ndarray]:
    """(B, W, L) id array plus validity mask, zero-padded."""
    b = len(users_window_ids)
    w = max(len(u) for u in users_window_ids)
    l = max((len(win) for u in users_window_ids for win in u), default=1)
    l = max(l, 1)
    ids = np.zeros((b, w, l), dtype=np.int64)
    valid = np.zeros((b, w, l), dtype=np.float64)
    for i, user in enumerate(users_window_ids):
        for j, win in enumerate(user):
            ids[i, j, : len(win)] = win
            valid[i, j, : len(win)] = 1.0
    return ids, valid


def encode_windows(ids: np.ndarray, valid: np.ndarray, params: SeqParams) -> Tensor:
    """(B, W, L) ids -> (B, W, d) window vectors; empty windows hit the null vector."""
    dtype = params.embed.data.dtype
    emb = T.take_rows(params.embed, ids)
    counts = valid.sum(axis=-1, keepdims=True)
    weights = (valid / np.maximum(counts, 1.0)).astype(dtype)
    mean = T.tsum(T.mul(emb, Tensor(weights[..., None])), axis=2)
    lifted = nn.feedforward(mean, params.ff)
    nonempty = (counts > 0).astype(dtype)
    return T.add(T.mul(lifted, Tensor(nonempty)),
                 T.mul(params.null_window, Tensor(1.0 - nonempty)))


def encode_window(token_lists: dict[str, list[str]], params: SeqParams,
                  config: SeqConfig) -> Tensor:
    """Single-window encoding from raw modality-tagged token strings."""
    ids = []
    for modality in SEQ_MODALITIES:
        for tok in token_lists.get(modality, []):
            ids.append(stable_token_hash(f"{modality}:{tok}", config.vocab))
    if not ids:
        return params.null_window
    arr = np.asarray([[ids]], dtype=np.int64)
    valid = np.ones_like(arr, dtype=np.float64)
    return T.reshape(encode_windows(arr, valid, params), (config.dim,))


def aggregate(z: Tensor, params: SeqParams) -> Tensor:
    """GRU over windows from a zero initial state; c_t sees only z_1..z_t."""
    single = z.ndim == 2
    if single:
        z = T.reshape(z, (1, *z.shape))
    b, w, d = z.shape
    h = Tensor(np.zeros((b, d), dtype=z.data.dtype))
    states = []
    for t in range(w):
        h = nn.gru_step(z[:, t, :], h, params.gru)
        states.append(T.reshape(h, (b, 1, d)))
    c = T.concat(states, axis=1)
    return T.reshape(c, (w, d)) if single else c


def cpc_loss(c: Tensor, z_future: Tensor, log_temp: Tensor,
             in_batch_negatives: bool = True) -> Tensor:
    """InfoNCE: the last context vector must identify each of its own future
    window vectors among candidates (its own future slots, plus every
    future slot of the other batch users when in-batch negatives are on).
    """
    if c.ndim == 2:
        c = T.reshape(c, (1, *c.shape))
    if z_future.ndim == 2:
        z_future = T.reshape(z_future, (1, *z_future.shape))
    b, _, d = c.shape
    f = z_future.shape[1]
    if f < 1:
        raise ConfigError("cpc_loss needs at least one future window")
    anchors = T.l2_normalize(c[:, -1, :], axis=-1)
    z_hat = T.l2_normalize(z_future, axis=-1)
    inv_temp = T.exp(T.neg(log_temp))
    rows = np.repeat(np.arange(b), f)
    if in_batch_negatives:
        flat = T.reshape(z_hat, (b * f, d))
        logits = T.mul(T.matmul(anchors, T.transpose(flat, (1, 0))), inv_temp)
        cols = (np.arange(b)[:, None] * f + np.arange(f)[None, :]).reshape(-1)
        return T.cross_entropy_logits(logits, rows, cols)
    logits = T.mul(T.matmul(T.reshape(anchors, (b, 1, d)), T.transpose(z_hat, (0, 2, 1))),
                   inv_temp)
    cols = np.tile(np.arange(f), b)
    return T.cross_entropy_logits(T.reshape(logits, (b, f)), rows, cols)


def cyclic_kl(c_t: Tensor, c_lag: Tensor) -> Tensor:
    """KL(softmax(c_t) || softmax(c_lag)); softmax makes the quantity well
    defined on raw embeddings and non-negative."""
    if c_t.shape != c_lag.shape:
        raise ConfigError(f"cyclic_kl shapes disagree: {c_t.shape} vs {c_lag.shape}")
    p = T.softmax(c_t, axis=-1)
    return T.tsum(T.mul(p, T.sub(T.log_softmax(c_t, axis=-1), T.log_softmax(c_lag, axis=-1))))


def cyclic_kl_mean(c: Tensor, cycle: int) -> Tensor:
    """Mean KL over all in-context pairs (t, t+cycle), batched."""
    b, w, d = c.shape
    if w <= cycle:
        return Tensor(np.zeros((), dtype=c.data.dtype))
    p_logits = T.reshape(c[:, : w - cycle, :], (b * (w - cycle), d))
    q_logits = T.reshape(c[:, cycle:, :], (b * (w - cycle), d))
    p = T.softmax(p_logits, axis=-1)
    kl = T.tsum(T.mul(p, T.sub(T.log_softmax(p_logits, axis=-1),
                               T.log_softmax(q_logits, axis=-1))), axis=-1)
    return T.tmean(kl)


def _project(x: Tensor, layer: nn.Linear) -> Tensor:
    shape = x.shape
    flat = T.reshape(x, (-1, shape[-1])) if x.ndim > 2 else x
    out = nn.linear(flat, layer)
    return T.reshape(out, (*shape[:-1], layer.w.shape[1])) if x.ndim > 2 else out


def sequence_forward(ids: np.ndarray, valid: np.ndarray, params: SeqParams,
                     config: SeqConfig):
    """Window vectors, context vectors, projected anchors and futures."""
    z = encode_windows(ids, valid, params)
    ctx = config.context_windows
    c = aggregate(z[:, :ctx, :], params)
    z_fut = _project(z[:, ctx:, :], params.proj_z)
    c_proj = _project(c, params.proj_c)
    return z, c, z_fut, c_proj


def pretrain_sequence(users, config: SeqConfig, seed: int):
    """CPC + cyclic-KL pretraining; returns (params, trace rows)."""
    token_ids = [window_token_ids(u.events, config.total_windows, config) for u in users]
    rng = np.random.default_rng([seed, 0x5EC])
    params = init_seq_params(config, rng)
    opt = nn.AdamW(nn.collect_tensors(params).values(), lr=config.lr0,
                   weight_decay=config.weight_decay)
    trace = []
    for step in range(config.steps):
        batch_idx = rng.choice(len(users), size=min(config.batch_size, len(users)),
                               replace=False)
        ids, valid = pad_windows([token_ids[i] for i in batch_idx])
        _, c, z_fut, c_proj = sequence_forward(ids, valid, params, config)
        contrastive = cpc_loss(c_proj, z_fut, params.log_temp,
                               in_batch_negatives=config.in_batch_negatives)
        kl = cyclic_kl_mean(c, config.cycle)
        loss = T.add(contrastive, T.mul(kl, config.lambda_cyc)) if config.lambda_cyc > 0 \
            else contrastive
        cl_val, kl_val = contrastive.item(), kl.item()
        if not np.isfinite(cl_val + kl_val):
            raise TrainingDiverged("sequence pretraining loss is not finite", step=step,
                                   batch=batch_idx.tolist())
        opt.zero_grad()
        nn.backward(loss)
        lr = nn.cosine_decay_lr(step, config.steps, config.lr0, config.lr_min)
        opt.step(lr=lr)
        _clamp_temperature(params.log_temp)
        trace.append({"step": step, "cpc": cl_val, "cyclic_kl": kl_val, "lr": lr})
    return params, trace


def _clamp_temperature(log_temp: Tensor):
    np.clip(log_temp.data, np.log(1e-3), np.log(10.0), out=log_temp.data)


def user_embedding(user, params: SeqParams, config: SeqConfig,
                   context_windows: int | None = None) -> Tensor:
    """Mean of the context vectors over the visible windows, then projection."""
    ctx = context_windows if context_windows is not None else config.context_windows
    if ctx < 1:
        raise ConfigError("user_embedding needs at least one context window")
    ids_list = window_token_ids([e for e in user.events if e.window <= ctx], ctx, config)
    ids, valid = pad_windows([ids_list])
    z = encode_windows(ids, valid, params)
    c = aggregate(z, params)
    pooled = T.tmean(c, axis=1)
    return T.reshape(_project(pooled, params.proj_c), (config.dim,))


def cpc_discrimination(users, params: SeqParams, config: SeqConfig, seed: int) -> float:
    """Fraction of users whose own futures score higher than a shuffled user's."""
    rng = np.random.default_rng([seed, 0xD15C])
    token_ids = [window_token_ids(u.events, config.total_windows, config) for u in users]
    with T.no_grad():
        ids, valid = pad_windows(token_ids)
        _, _, z_fut, c_proj = sequence_forward(ids, valid, params, config)
        anchors = T.l2_normalize(c_proj[:, -1, :], axis=-1).data
        futures = T.l2_normalize(z_fut, axis=-1).data
    perm = rng.permutation(len(users))
    fix = np.nonzero(perm == np.arange(len(users)))[0]
    for i in fix:  # pair any fixed point with its neighbor
        j = (i + 1) % len(users)
        perm[i], perm[j] = perm[j], perm[i]
    wins = 0
    for i in range(len(users)):
        own = float(np.mean(futures[i] @ anchors[i]))
        other = float(np.mean(futures[perm[i]] @ anchors[i]))
        wins += int(own > other)
    return wins / len(users)


def heldout_cyclic_kl(users, params: SeqParams, config: SeqConfig) -> float:
    token_ids = [window_token_ids(u.events, config.total_windows, config) for u in users]
    with T.no_grad():
        ids, valid = pad_windows(token_ids)
        z = encode_windows(ids, valid, params)
        c = aggregate(z[:, : config.context_windows, :], params)
        return cyclic_kl_mean(c, config.cycle).item()


def seq_checkpoint_payload(params: SeqParams, config: SeqConfig):
    return nn.collect_tensors(params), {"kind": "seq", "config": config.to_json()}


def seq_params_from_checkpoint(hyper: dict, arrays: dict) -> tuple[SeqParams, SeqConfig]:
    config = SeqConfig.from_json(hyper["config"])
    params = init_seq_params(config, np.random.default_rng(0))
    nn.assign_tensors(params, arrays)
    return params, config
