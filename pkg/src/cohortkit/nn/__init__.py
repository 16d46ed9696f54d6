from .tensor import (
    Tensor, no_grad, backward, add, sub, mul, div, neg, matmul, exp, log, tanh,
    sigmoid, relu, softplus, sqrt, square, tsum, tmean, reshape, transpose,
    concat, stack, take_rows, gather_last, softmax, log_softmax, logsumexp,
    cross_entropy_logits, cosine_similarity, l2_normalize, getitem,
)
from .optim import AdamW, OptimizerState, adamw_step, cosine_decay_lr
from .gradcheck import grad_check, as_f64
from .layers import (
    Linear, FeedForward, LayerNorm, AttentionParams, GruParams, TransformerLayer,
    init_linear, init_feedforward, init_layernorm, init_attention, init_gru,
    init_transformer_layer, linear, feedforward, layernorm, attention, gru_step,
    transformer_layer, xavier_uniform, normal_init, zeros_param, ones_param,
    collect_tensors, assign_tensors, params_digest,
)
from .checkpoint import save_checkpoint, load_checkpoint, MAGIC, FORMAT_VERSION
