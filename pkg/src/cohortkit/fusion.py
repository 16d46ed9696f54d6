"""Stage-two training: cross-attention fusion of the three modality
embeddings, a description/demand text tower, and the contrastive user-text
alignment objective.

The fused vector starts from the sequence embedding and repeatedly attends
over the modality set {sequence, tabular, search-text} with residuals and
feedforwards; the description tower shares the text-encoder architecture
with its own parameters (warm-started from the pretrained text checkpoint).
"""

from __future__ import annotations

import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import nn, seqenc, tabenc, textenc
from .errors import ConfigError, DimensionError, InputError, TrainingDiverged
from .nn import tensor as T
from .nn.tensor import Tensor


@dataclass
class FusionConfig:
    dim: int = 32
    layers: int = 5
    heads: int = 4
    ff_hidden: int = 64
    temperature_init: float = 0.07
    symmetric: bool = True
    part_sentence_rate: float = 0.3      # train on single-category sub-sentences this often
    batch_size: int = 64
    steps: int = 400
    lr0: float = 4e-4
    lr_min: float = 1e-5
    weight_decay: float = 0.01
    unfreeze_encoders: bool = False
    eval_interval: int = 100
    recall_k: int = 50

    def __post_init__(self):
        if self.layers < 1:
            raise ConfigError("fusion needs at least one cross-attention layer")
        if self.batch_size < 2:
            raise ConfigError("contrastive alignment needs batch size >= 2")

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, d: dict) -> "FusionConfig":
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})


@dataclass
class CrossAttnLayer:
    attn: nn.AttentionParams
    ln_q: nn.LayerNorm
    ln_kv: nn.LayerNorm
    ff: nn.FeedForward
    ln_ff: nn.LayerNorm


@dataclass
class FusionParams:
    layers: list[CrossAttnLayer]
    out_proj: nn.Linear
    log_temp: Tensor


def init_fusion_params(config: FusionConfig, rng: np.random.Generator,
                       dtype=np.float32) -> FusionParams:
    d = config.dim
    layers = []
    for _ in range(config.layers):
        attn = nn.init_attention(d, rng, dtype=dtype)
        # Start near uniform attention with identity value routing so every
        # modality reaches the fused state before training reweights them.
        attn.wq.data *= 0.1
        attn.wk.data *= 0.1
        attn.wv.data = np.eye(d, dtype=dtype)
        attn.wo.data = (0.5 * np.eye(d)).astype(dtype)
        layers.append(CrossAttnLayer(
            attn=attn,
            ln_q=nn.init_layernorm(d, dtype=dtype),
            ln_kv=nn.init_layernorm(d, dtype=dtype),
            ff=nn.init_feedforward(d, config.ff_hidden, rng, dtype=dtype),
            ln_ff=nn.init_layernorm(d, dtype=dtype),
        ))
    out_proj = nn.init_linear(d, d, rng, dtype=dtype)
    out_proj.w.data = np.eye(d, dtype=dtype)       # pass the fused state through at init
    return FusionParams(
        layers=layers,
        out_proj=out_proj,
        log_temp=Tensor(np.log(np.asarray(config.temperature_init, dtype=dtype)),
                        requires_grad=True),
    )


def fuse(e_v, e_tab, e_r, params: FusionParams, heads: int = 4,
         return_weights: bool = False):
    """Cross-attention fusion; accepts (d,) vectors or (B, d) batches."""
    tensors = [t if isinstance(t, Tensor) else Tensor(t) for t in (e_v, e_tab, e_r)]
    single = tensors[0].ndim == 1
    if single:
        tensors = [T.reshape(t, (1, t.shape[0])) for t in tensors]
    d = tensors[0].shape[-1]
    if any(t.shape != tensors[0].shape for t in tensors):
        raise DimensionError("modality embeddings must share shape")
    b = tensors[0].shape[0]
    kv = T.concat([T.reshape(t, (b, 1, d)) for t in tensors], axis=1)
    state = T.reshape(tensors[0], (b, 1, d))
    weights = []
    for layer in params.layers:
        q = nn.layernorm(state, layer.ln_q)
        k = nn.layernorm(kv, layer.ln_kv)
        attended, w = nn.attention(q, k, k, layer.attn, heads, return_weights=True)
        weights.append(w)
        state = T.add(state, attended)
        state = T.add(state, nn.feedforward(nn.layernorm(state, layer.ln_ff), layer.ff))
    out = nn.linear(T.reshape(state, (b, d)), params.out_proj)
    if single:
        out = T.reshape(out, (d,))
    if return_weights:
        return out, weights
    return out


def clip_loss(e_f: Tensor, e_q: Tensor, log_temp: Tensor, symmetric: bool = True) -> Tensor:
    """Contrastive user-text alignment: diagonal pairs are positives, cosine
    similarities scaled by the learned temperature, both directions averaged."""
    if e_f.ndim != 2 or e_q.ndim != 2 or e_f.shape != e_q.shape:
        raise DimensionError(f"expected matching (B, d) matrices, got {e_f.shape}, {e_q.shape}")
    b = e_f.shape[0]
    if b < 2:
        raise ConfigError("contrastive alignment needs at least 2 pairs in a batch")
    f_hat = T.l2_normalize(e_f, axis=-1)
    q_hat = T.l2_normalize(e_q, axis=-1)
    logits = T.mul(T.matmul(f_hat, T.transpose(q_hat, (1, 0))), T.exp(T.neg(log_temp)))
    diag = np.arange(b)
    user_to_text = T.cross_entropy_logits(logits, diag, diag)
    if not symmetric:
        return user_to_text
    text_to_user = T.cross_entropy_logits(T.transpose(logits, (1, 0)), diag, diag)
    return T.mul(T.add(user_to_text, text_to_user), 0.5)


@dataclass
class AlignedModel:
    """Everything needed to embed users and demands after alignment."""

    seq_params: seqenc.SeqParams
    seq_config: seqenc.SeqConfig
    tab_params: tabenc.TabParams
    tab_schema: tabenc.ColumnSchema
    tab_config: tabenc.TabConfig
    text_params: textenc.TextParams
    text_config: textenc.TextConfig
    desc_params: textenc.TextParams
    desc_config: textenc.TextConfig
    fusion_params: FusionParams
    fusion_config: FusionConfig
    context_windows: int = 7

    def encode_description(self, text: str, prefix: Tensor | None = None) -> Tensor:
        ids = textenc.tokenize(text, self.desc_config)
        return textenc.encode_text(ids, self.desc_params, self.desc_config, prefix=prefix)

    def desc_tower_digest(self) -> str:
        return nn.params_digest(self.desc_params)

    def trainable_alignment_tensors(self) -> dict[str, Tensor]:
        out = nn.collect_tensors(self.fusion_params, "fusion")
        out.update(nn.collect_tensors(self.desc_params, "desc"))
        return out

    def all_tensors(self) -> dict[str, Tensor]:
        out = {}
        out.update(nn.collect_tensors(self.seq_params, "seq"))
        out.update(nn.collect_tensors(self.tab_params, "tab"))
        out.update(nn.collect_tensors(self.text_params, "text"))
        out.update(nn.collect_tensors(self.desc_params, "desc"))
        out.update(nn.collect_tensors(self.fusion_params, "fusion"))
        return out

    def save(self, path):
        hyper = {
            "kind": "aligned",
            "context_windows": self.context_windows,
            "seq_config": self.seq_config.to_json(),
            "tab_config": self.tab_config.to_json(),
            "tab_schema": self.tab_schema.to_json(),
            "text_config": self.text_config.to_json(),
            "desc_config": self.desc_config.to_json(),
            "fusion_config": self.fusion_config.to_json(),
        }
        nn.save_checkpoint(path, self.all_tensors(), hyper)

    @classmethod
    def load(cls, path) -> "AlignedModel":
        hyper, arrays = nn.load_checkpoint(path)
        if hyper.get("kind") != "aligned":
            raise InputError(f"{path} is not an aligned checkpoint")
        rng = np.random.default_rng(0)
        seq_config = seqenc.SeqConfig.from_json(hyper["seq_config"])
        tab_config = tabenc.TabConfig.from_json(hyper["tab_config"])
        tab_schema = tabenc.ColumnSchema.from_json(hyper["tab_schema"])
        text_config = textenc.TextConfig.from_json(hyper["text_config"])
        desc_config = textenc.TextConfig.from_json(hyper["desc_config"])
        fusion_config = FusionConfig.from_json(hyper["fusion_config"])
        model = cls(
            seq_params=seqenc.init_seq_params(seq_config, rng),
            seq_config=seq_config,
            tab_params=tabenc.init_tab_params(tab_schema, tab_config, rng),
            tab_schema=tab_schema,
            tab_config=tab_config,
            text_params=textenc.init_text_params(text_config, rng),
            text_config=text_config,
            desc_params=textenc.init_text_params(desc_config, rng),
            desc_config=desc_config,
            fusion_params=init_fusion_params(fusion_config, rng),
            fusion_config=fusion_config,
            context_windows=hyper["context_windows"],
        )
        nn.assign_tensors(model.seq_params, _strip(arrays, "seq."))
        nn.assign_tensors(model.tab_params, _strip(arrays, "tab."))
        nn.assign_tensors(model.text_params, _strip(arrays, "text."))
        nn.assign_tensors(model.desc_params, _strip(arrays, "desc."))
        nn.assign_tensors(model.fusion_params, _strip(arrays, "fusion."))
        return model


def _strip(arrays: dict, prefix: str) -> dict:
    return {k[len(prefix):]: v for k, v in arrays.items() if k.startswith(prefix)}


def modality_embeddings(users, model: AlignedModel, batch: int = 256):
    """Frozen-encoder embeddings for every user: (E_v, E_tab, E_r) float32
    matrices plus null-substitution flags."""
    ctx = model.context_windows
    n = len(users)
    d = model.fusion_config.dim
    e_v = np.zeros((n, d), dtype=np.float32)
    e_tab = np.zeros((n, d), dtype=np.float32)
    e_r = np.zeros((n, d), dtype=np.float32)
    flags = {"null_search": [], "null_sequences": []}
    with T.no_grad():
        for lo in range(0, n, batch):
            chunk = users[lo:lo + batch]
            ids_list = [seqenc.window_token_ids(
                [e for e in u.events if e.window <= ctx], ctx, model.seq_config)
                for u in chunk]
            ids, valid = seqenc.pad_windows(ids_list)
            z = seqenc.encode_windows(ids, valid, model.seq_params)
            c = seqenc.aggregate(z, model.seq_params)
            pooled = T.tmean(c, axis=1)
            e_v[lo:lo + len(chunk)] = nn.linear(pooled, model.seq_params.proj_c).data
            cat, cont = tabenc.rows_to_arrays([u.tabular for u in chunk], model.tab_schema)
            e_tab[lo:lo + len(chunk)] = tabenc.encode_tables(
                cat, cont, model.tab_params, model.tab_schema, model.tab_config).data
            token_batches = [textenc.tokenize(u.search_text, model.text_config) for u in chunk]
            e_r[lo:lo + len(chunk)] = textenc.encode_text_batch(
                token_batches, model.text_params, model.text_config).data
            for idx, (u, toks) in enumerate(zip(chunk, token_batches)):
                if not toks:
                    flags["null_search"].append(u.user_id)
                if not any(ids_list[idx]):
                    flags["null_sequences"].append(u.user_id)
    return e_v, e_tab, e_r, flags


def fuse_users(e_v: np.ndarray, e_tab: np.ndarray, e_r: np.ndarray,
               model: AlignedModel) -> np.ndarray:
    with T.no_grad():
        return fuse(Tensor(e_v), Tensor(e_tab), Tensor(e_r), model.fusion_params,
                    model.fusion_config.heads).data.copy()


def recall_at_k(e_f: np.ndarray, e_q: np.ndarray, k: int) -> float:
    """Fraction of texts whose own user lands in the text's top-k user list."""
    f = e_f / np.maximum(np.linalg.norm(e_f, axis=1, keepdims=True), 1e-12)
    q = e_q / np.maximum(np.linalg.norm(e_q, axis=1, keepdims=True), 1e-12)
    sims = q @ f.T
    hits = 0
    for i in range(sims.shape[0]):
        top = np.argpartition(-sims[i], min(k, sims.shape[1] - 1))[:k]
        hits += int(i in top)
    return hits / sims.shape[0]


def train_alignment(train_users, eval_users, model: AlignedModel, config: FusionConfig,
                    seed: int):
    """Contrastive alignment of fused user embeddings with their future-window
    descriptions. Returns (model, trace, probe_rows); modality encoders stay
    frozen unless config.unfreeze_encoders."""
    from .synthworld.templates import render_description_parts

    rng = np.random.default_rng([seed, 0xA116])
    desc_ids = [textenc.tokenize(u.description, model.desc_config) for u in train_users]
    # Single-category sub-sentences: matching a bare sentence to its user
    # forces every modality channel through fusion, and puts demand-style
    # short queries in-distribution for the description tower.
    part_ids = []
    for u in train_users:
        parts = render_description_parts(
            [e for e in u.events if e.window > model.context_windows])
        part_ids.append([textenc.tokenize(s, model.desc_config)
                         for s in parts.values()] or None)
    e_v, e_tab, e_r, _ = modality_embeddings(train_users, model)
    eval_ids = [textenc.tokenize(u.description, model.desc_config) for u in eval_users]
    ev_v, ev_tab, ev_r, _ = modality_embeddings(eval_users, model)

    tensors = model.trainable_alignment_tensors()
    if config.unfreeze_encoders:
        tensors.update(nn.collect_tensors(model.seq_params, "seq"))
        tensors.update(nn.collect_tensors(model.tab_params, "tab"))
        tensors.update(nn.collect_tensors(model.text_params, "text"))
    opt = nn.AdamW(tensors.values(), lr=config.lr0, weight_decay=config.weight_decay)

    trace, probes = [], []

    def run_probe(step):
        with T.no_grad():
            e_f = fuse_users(ev_v, ev_tab, ev_r, model)
            e_q = np.stack([model.encode_description(u.description).data
                            for u in eval_users])
        probes.append({"step": step, "recall_at_k": recall_at_k(e_f, e_q, config.recall_k),
                       "k": config.recall_k, "pool": len(eval_users)})

    for step in range(config.steps):
        batch_idx = rng.choice(len(train_users), size=min(config.batch_size, len(train_users)),
                               replace=False)
        if config.unfreeze_encoders:
            bv, bt, br, _ = modality_embeddings([train_users[i] for i in batch_idx], model)
            e_f = fuse(Tensor(bv), Tensor(bt), Tensor(br), model.fusion_params, config.heads)
        else:
            e_f = fuse(Tensor(e_v[batch_idx]), Tensor(e_tab[batch_idx]),
                       Tensor(e_r[batch_idx]), model.fusion_params, config.heads)
        texts = []
        for i in batch_idx:
            if part_ids[i] and rng.random() < config.part_sentence_rate:
                texts.append(part_ids[i][int(rng.integers(len(part_ids[i])))])
            else:
                texts.append(desc_ids[i])
        e_q = textenc.encode_text_batch(texts, model.desc_params, model.desc_config)
        loss = clip_loss(e_f, e_q, model.fusion_params.log_temp, symmetric=config.symmetric)
        value = loss.item()
        if not np.isfinite(value):
            raise TrainingDiverged("alignment loss is not finite", step=step,
                                   batch=batch_idx.tolist())
        opt.zero_grad()
        nn.backward(loss)
        lr = nn.cosine_decay_lr(step, config.steps, config.lr0, config.lr_min)
        opt.step(lr=lr)
        np.clip(model.fusion_params.log_temp.data, np.log(1e-3), np.log(10.0),
                out=model.fusion_params.log_temp.data)
        trace.append({"step": step, "loss": value, "lr": lr})
        if eval_users and (step % config.eval_interval == 0):
            run_probe(step)
    if eval_users:
        run_probe(config.steps)
    return model, trace, probes


def embed_all_users(users, model: AlignedModel):
    """L2-normalized fused embedding per user, ordered by user id, plus the
    id map with null-substitution flags."""
    ordered = sorted(users, key=lambda u: u.user_id)
    e_v, e_tab, e_r, flags = modality_embeddings(ordered, model)
    e_f = fuse_users(e_v, e_tab, e_r, model)
    norms = np.linalg.norm(e_f, axis=1, keepdims=True)
    zero_rows = np.nonzero(norms.reshape(-1) < 1e-12)[0]
    norms = np.maximum(norms, 1e-12)
    matrix = (e_f / norms).astype(np.float32)
    id_map = {"user_ids": [u.user_id for u in ordered],
              "flags": {k: v for k, v in flags.items() if v}}
    if zero_rows.size:
        id_map["flags"]["zero_norm"] = [ordered[i].user_id for i in zero_rows]
    return matrix, id_map


def save_embeddings(path, matrix: np.ndarray):
    matrix = np.asarray(matrix, dtype="<f4")
    if matrix.ndim != 2:
        raise DimensionError("embeddings matrix must be 2-D")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(struct.pack("<II", matrix.shape[0], matrix.shape[1]))
        fh.write(matrix.tobytes())


def load_embeddings(path) -> np.ndarray:
    blob = Path(path).read_bytes()
    n, d = struct.unpack("<II", blob[:8])
    return np.frombuffer(blob[8:], dtype="<f4", count=n * d).reshape(n, d).copy()
