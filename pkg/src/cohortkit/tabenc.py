"""Tabular encoder.

Categorical cells become value embeddings summed with a column-identity
embedding; continuous cells are z-scored and lifted by a shared MLP token
builder plus their column embedding. A position-free transformer mixes the
column tokens and mean pooling produces the row embedding. Pretraining
combines masked-feature recovery (per-column classifier heads) with
replaced-value detection (per-column binary heads).
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import nn
from .errors import ConfigError, InputError, SchemaError, TrainingDiverged
from .nn import tensor as T
from .nn.tensor import Tensor


@dataclass
class ColumnSchema:
    categorical: list[tuple[str, int]]      # (name, cardinality)
    continuous: list[str]
    cont_mean: np.ndarray
    cont_std: np.ndarray

    def __post_init__(self):
        for name, card in self.categorical:
            if card < 2:
                raise ConfigError(f"column {name!r}: cardinality must be >= 2")
        self.cont_mean = np.asarray(self.cont_mean, dtype=np.float64)
        self.cont_std = np.maximum(np.asarray(self.cont_std, dtype=np.float64), 1e-6)

    @property
    def n_cat(self) -> int:
        return len(self.categorical)

    @property
    def n_cols(self) -> int:
        return len(self.categorical) + len(self.continuous)

    def to_json(self) -> dict:
        return {"categorical": [{"name": n, "cardinality": c} for n, c in self.categorical],
                "continuous": list(self.continuous),
                "cont_mean": self.cont_mean.tolist(), "cont_std": self.cont_std.tolist()}

    @classmethod
    def from_json(cls, d: dict) -> "ColumnSchema":
        return cls(categorical=[(c["name"], c["cardinality"]) for c in d["categorical"]],
                   continuous=list(d["continuous"]),
                   cont_mean=np.asarray(d["cont_mean"]), cont_std=np.asarray(d["cont_std"]))


def fit_schema(categorical: list[tuple[str, int]], continuous: list[str], rows) -> ColumnSchema:
    """Normalization stats come from the rows given here (the training split)."""
    values = np.array([[r.cont[name] for name in continuous] for r in rows], dtype=np.float64)
    if values.size == 0:
        mean, std = np.zeros(len(continuous)), np.ones(len(continuous))
    else:
        mean, std = values.mean(axis=0), values.std(axis=0)
    return ColumnSchema(categorical=list(categorical), continuous=list(continuous),
                        cont_mean=mean, cont_std=std)


def rows_to_arrays(rows, schema: ColumnSchema) -> tuple[np.ndarray, np.ndarray]:
    cat = np.zeros((len(rows), schema.n_cat), dtype=np.int64)
    cont = np.zeros((len(rows), len(schema.continuous)), dtype=np.float64)
    for i, r in enumerate(rows):
        for j, (name, card) in enumerate(schema.categorical):
            v = r.cat[name]
            if not 0 <= v < card:
                raise SchemaError(f"column {name!r}: value {v} outside cardinality {card}")
            cat[i, j] = v
        for j, name in enumerate(schema.continuous):
            v = r.cont[name]
            if not np.isfinite(v):
                raise InputError(f"column {name!r}: non-finite value {v}")
            cont[i, j] = v
    return cat, cont


@dataclass
class TabConfig:
    dim: int = 32
    depth: int = 4
    heads: int = 4
    ff_hidden: int = 64
    mask_rate: float = 0.30
    replace_rate: float = 0.30
    lambda_mlm: float = 0.6
    lambda_rtd: float = 0.4
    reduce: str = "sum"              # per-row reduction over masked cells: sum | mean
    batch_size: int = 128
    steps: int = 400
    lr0: float = 4e-4
    lr_min: float = 1e-5
    weight_decay: float = 0.01

    def __post_init__(self):
        if self.reduce not in ("sum", "mean"):
            raise ConfigError(f"reduce must be sum or mean, got {self.reduce!r}")

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, d: dict) -> "TabConfig":
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})


@dataclass
class TabParams:
    col_embed: Tensor                   # (n_cols, d) column identities
    value_tables: list[Tensor]          # per cat column: (cardinality+1, d); last row = MASK
    cont_lift: nn.Linear                # 1 -> dim
    cont_drop: nn.Linear                # dim -> dim
    layers: list[nn.TransformerLayer]
    mlm_heads: list[nn.Linear]          # per cat column: d -> cardinality
    rtd_heads: list[nn.Linear]          # per cat column: d -> 1


def init_tab_params(schema: ColumnSchema, config: TabConfig, rng: np.random.Generator,
                    dtype=np.float32) -> TabParams:
    d = config.dim
    return TabParams(
        col_embed=nn.normal_init((schema.n_cols, d), rng, std=0.02, dtype=dtype),
        value_tables=[nn.normal_init((card + 1, d), rng, std=0.02, dtype=dtype)
                      for _, card in schema.categorical],
        cont_lift=nn.init_linear(1, d, rng, dtype=dtype),
        cont_drop=nn.init_linear(d, d, rng, dtype=dtype),
        layers=[nn.init_transformer_layer(d, config.ff_hidden, rng, dtype=dtype)
                for _ in range(config.depth)],
        mlm_heads=[nn.init_linear(d, card, rng, dtype=dtype) for _, card in schema.categorical],
        rtd_heads=[nn.init_linear(d, 1, rng, dtype=dtype) for _ in schema.categorical],
    )


def column_states(cat: np.ndarray, cont: np.ndarray, params: TabParams,
                  schema: ColumnSchema, config: TabConfig) -> Tensor:
    """Transformer outputs per column token, shape (B, n_cols, d)."""
    b = cat.shape[0]
    d = config.dim
    tokens = []
    for j in range(schema.n_cat):
        value = T.take_rows(params.value_tables[j], cat[:, j])
        tokens.append(T.reshape(T.add(value, params.col_embed[j]), (b, 1, d)))
    if schema.continuous:
        z = (cont - schema.cont_mean) / schema.cont_std
        z = Tensor(z[..., None].astype(params.col_embed.data.dtype))       # (B, nc, 1)
        lifted = nn.linear(T.tanh(nn.linear(z, params.cont_lift)), params.cont_drop)
        ident = T.reshape(params.col_embed[schema.n_cat:], (1, len(schema.continuous), d))
        tokens.append(T.add(lifted, ident))
    x = T.concat(tokens, axis=1)
    for layer in params.layers:
        x = nn.transformer_layer(x, layer, config.heads)
    return x


def encode_tables(cat: np.ndarray, cont: np.ndarray, params: TabParams,
                  schema: ColumnSchema, config: TabConfig) -> Tensor:
    return T.tmean(column_states(cat, cont, params, schema, config), axis=1)


def encode_table(row, params: TabParams, schema: ColumnSchema, config: TabConfig) -> Tensor:
    cat, cont = rows_to_arrays([row], schema)
    return T.reshape(encode_tables(cat, cont, params, schema, config), (config.dim,))


def mask_features(cat_row: np.ndarray, mask_rate: float, rng: np.random.Generator,
                  schema: ColumnSchema) -> tuple[np.ndarray, list[int]]:
    """Mask round(rate * n_cat) categorical cells (at least one) with the
    reserved per-column MASK id."""
    if schema.n_cat < 1:
        raise ConfigError("masking needs at least one categorical column")
    count = max(1, int(round(mask_rate * schema.n_cat)))
    positions = sorted(rng.choice(schema.n_cat, size=count, replace=False).tolist())
    masked = cat_row.copy()
    for j in positions:
        masked[j] = schema.categorical[j][1]        # MASK id == cardinality
    return masked, positions


def replace_features(cat_row: np.ndarray, replace_rate: float, rng: np.random.Generator,
                     schema: ColumnSchema) -> tuple[np.ndarray, np.ndarray]:
    """Independently swap each cell for a uniform draw over the other values."""
    if schema.n_cat < 1:
        raise ConfigError("replacement needs at least one categorical column")
    corrupted = cat_row.copy()
    indicators = np.zeros(schema.n_cat, dtype=np.int64)
    for j, (_, card) in enumerate(schema.categorical):
        if rng.random() < replace_rate:
            draw = int(rng.integers(card - 1))
            corrupted[j] = draw + 1 if draw >= cat_row[j] else draw
            indicators[j] = 1
    return corrupted, indicators


def _ce_for_column(states: Tensor, head: nn.Linear, rows: np.ndarray, col: int,
                   targets: np.ndarray) -> Tensor:
    picked = T.take_rows(T.reshape(states[:, col, :], (states.shape[0], states.shape[2])), rows)
    logits = nn.linear(picked, head)
    return T.cross_entropy_logits(logits, np.arange(len(targets)), targets, reduction="sum")


def mlm_loss_batch(masked_cat: np.ndarray, original_cat: np.ndarray, mask: np.ndarray,
                   cont: np.ndarray, params: TabParams, schema: ColumnSchema,
                   config: TabConfig) -> Tensor:
    """Cross-entropy of each masked cell's column head; per-row sum (or mean),
    then mean over the batch."""
    b = masked_cat.shape[0]
    states = column_states(masked_cat, cont, params, schema, config)
    pieces = []
    for j in range(schema.n_cat):
        rows = np.nonzero(mask[:, j])[0]
        if rows.size == 0:
            continue
        pieces.append(_ce_for_column(states, params.mlm_heads[j], rows, j,
                                     original_cat[rows, j]))
    if not pieces:
        raise ConfigError("mlm loss needs a non-empty mask set")
    total = pieces[0]
    for p in pieces[1:]:
        total = T.add(total, p)
    if config.reduce == "mean":
        return T.div(total, float(mask.sum()))
    return T.div(total, float(b))


def mlm_loss(masked_row, original_row, params: TabParams, schema: ColumnSchema,
             config: TabConfig, mask_positions: list[int]) -> Tensor:
    """Single-row surface: sum of masked-cell cross-entropies."""
    masked_cat, cont = rows_to_arrays([masked_row], _schema_with_mask_ids(schema))
    original_cat, _ = rows_to_arrays([original_row], schema)
    mask = np.zeros((1, schema.n_cat), dtype=bool)
    mask[0, mask_positions] = True
    return mlm_loss_batch(masked_cat, original_cat, mask, cont, params, schema, config)


def _schema_with_mask_ids(schema: ColumnSchema) -> ColumnSchema:
    # Accepts the reserved MASK id (== cardinality) during validation.
    return ColumnSchema(categorical=[(n, c + 1) for n, c in schema.categorical],
                        continuous=schema.continuous, cont_mean=schema.cont_mean,
                        cont_std=schema.cont_std)


def rtd_logits(corrupted_cat: np.ndarray, cont: np.ndarray, params: TabParams,
               schema: ColumnSchema, config: TabConfig) -> Tensor:
    states = column_states(corrupted_cat, cont, params, schema, config)
    cols = []
    for j in range(schema.n_cat):
        token = T.reshape(states[:, j, :], (states.shape[0], config.dim))
        cols.append(nn.linear(token, params.rtd_heads[j]))
    return T.concat(cols, axis=1)          # (B, n_cat)


def rtd_loss_batch(corrupted_cat: np.ndarray, indicators: np.ndarray, cont: np.ndarray,
                   params: TabParams, schema: ColumnSchema, config: TabConfig) -> Tensor:
    """Per-column binary cross-entropy, summed over columns, mean over batch.

    Stable form: BCE(logit, y) = softplus(logit) - y * logit.
    """
    logits = rtd_logits(corrupted_cat, cont, params, schema, config)
    y = Tensor(indicators.astype(logits.data.dtype))
    bce = T.sub(T.softplus(logits), T.mul(y, logits))
    return T.tmean(T.tsum(bce, axis=1))


def rtd_loss(corrupted_row, indicators: np.ndarray, params: TabParams,
             schema: ColumnSchema, config: TabConfig) -> Tensor:
    if len(indicators) != schema.n_cat:
        raise ConfigError("indicator length must equal categorical column count")
    cat, cont = rows_to_arrays([corrupted_row], schema)
    return rtd_loss_batch(cat, np.asarray(indicators)[None, :], cont, params, schema, config)


def pretrain_tabular(rows, schema: ColumnSchema, config: TabConfig, seed: int):
    """Joint MLM + RTD pretraining; corruptions are drawn independently."""
    cat, cont = rows_to_arrays(rows, schema)
    rng = np.random.default_rng([seed, 0x7AB])
    params = init_tab_params(schema, config, rng)
    opt = nn.AdamW(nn.collect_tensors(params).values(), lr=config.lr0,
                   weight_decay=config.weight_decay)
    trace = []
    for step in range(config.steps):
        batch_idx = rng.choice(len(rows), size=min(config.batch_size, len(rows)),
                               replace=False)
        bc, bx = cat[batch_idx], cont[batch_idx]
        masked = bc.copy()
        mask = np.zeros_like(bc, dtype=bool)
        for i in range(bc.shape[0]):
            masked[i], positions = mask_features(bc[i], config.mask_rate, rng, schema)
            mask[i, positions] = True
        mlm = mlm_loss_batch(masked, bc, mask, bx, params, schema, config)
        if config.lambda_rtd > 0:
            corrupted = bc.copy()
            indicators = np.zeros_like(bc)
            for i in range(bc.shape[0]):
                corrupted[i], indicators[i] = replace_features(
                    bc[i], config.replace_rate, rng, schema)
            rtd = rtd_loss_batch(corrupted, indicators, bx, params, schema, config)
        else:
            rtd = Tensor(np.zeros((), dtype=np.float32))
        loss = T.add(T.mul(mlm, config.lambda_mlm), T.mul(rtd, config.lambda_rtd))
        mlm_val, rtd_val = mlm.item(), rtd.item()
        if not np.isfinite(mlm_val + rtd_val):
            raise TrainingDiverged("tabular pretraining loss is not finite", step=step,
                                   batch=batch_idx.tolist())
        opt.zero_grad()
        nn.backward(loss)
        lr = nn.cosine_decay_lr(step, config.steps, config.lr0, config.lr_min)
        opt.step(lr=lr)
        trace.append({"step": step, "mlm": mlm_val, "rtd": rtd_val, "lr": lr})
    return params, trace


def masked_prediction_accuracy(rows, schema: ColumnSchema, params: TabParams,
                               config: TabConfig, seed: int) -> dict[int, float]:
    """Held-out masked-value accuracy per column (one masked cell per row)."""
    cat, cont = rows_to_arrays(rows, schema)
    rng = np.random.default_rng([seed, 0xACC])
    hits: dict[int, list[int]] = {j: [] for j in range(schema.n_cat)}
    with T.no_grad():
        masked = cat.copy()
        cols = rng.integers(schema.n_cat, size=len(rows))
        for i, j in enumerate(cols):
            masked[i, j] = schema.categorical[j][1]
        states = column_states(masked, cont, params, schema, config)
        for j in range(schema.n_cat):
            rows_j = np.nonzero(cols == j)[0]
            if rows_j.size == 0:
                continue
            picked = T.take_rows(T.reshape(states[:, j, :], (len(rows), config.dim)), rows_j)
            logits = nn.linear(picked, params.mlm_heads[j]).data
            pred = logits.argmax(axis=1)
            hits[j].extend((pred == cat[rows_j, j]).astype(int).tolist())
    return {j: float(np.mean(v)) for j, v in hits.items() if v}


def majority_baseline(rows, schema: ColumnSchema) -> dict[int, float]:
    cat, _ = rows_to_arrays(rows, schema)
    out = {}
    for j in range(schema.n_cat):
        counts = np.bincount(cat[:, j], minlength=schema.categorical[j][1])
        out[j] = float(counts.max() / counts.sum())
    return out


def rtd_detection_scores(rows, schema: ColumnSchema, params: TabParams, config: TabConfig,
                         seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Pooled per-cell replacement logits and indicators on held-out rows."""
    cat, cont = rows_to_arrays(rows, schema)
    rng = np.random.default_rng([seed, 0x12D])
    corrupted = cat.copy()
    indicators = np.zeros_like(cat)
    for i in range(cat.shape[0]):
        corrupted[i], indicators[i] = replace_features(cat[i], config.replace_rate, rng, schema)
    with T.no_grad():
        logits = rtd_logits(corrupted, cont, params, schema, config).data
    return logits.reshape(-1), indicators.reshape(-1)


def tab_checkpoint_payload(params: TabParams, schema: ColumnSchema, config: TabConfig):
    return nn.collect_tensors(params), {"kind": "tab", "config": config.to_json(),
                                        "schema": schema.to_json()}


def tab_params_from_checkpoint(hyper: dict, arrays: dict):
    config = TabConfig.from_json(hyper["config"])
    schema = ColumnSchema.from_json(hyper["schema"])
    params = init_tab_params(schema, config, np.random.default_rng(0))
    nn.assign_tensors(params, arrays)
    return params, schema, config
