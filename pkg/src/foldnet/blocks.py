"""Encoder building blocks: simplified Conformer/Transformer layers, token
embedding with sinusoidal positions, output projection, and a one-block
teacher-forced decoder used by the multitask loss."""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .autodiff import (
    LOG_ZERO,
    Tensor,
    add,
    affine,
    constant,
    depthwise_conv1d,
    embedding,
    layer_norm,
    masked_fill,
    matmul,
    multihead_mix,
    multihead_scores,
    parameter,
    scale,
    softmax,
    swish,
)

BLOCK_KINDS = ("conformer", "transformer")


@dataclass(frozen=True)
class BlockConfig:
    d_model: int
    n_heads: int
    d_ffn: int
    conv_kernel: int = 3
    block_kind: str = "conformer"

    def __post_init__(self):
        if self.d_model <= 0 or self.n_heads <= 0 or self.d_ffn <= 0:
            raise ValueError("BlockConfig: dimensions must be positive")
        if self.d_model % self.n_heads != 0:
            raise ValueError(
                f"BlockConfig: d_model {self.d_model} not divisible by "
                f"n_heads {self.n_heads}")
        if self.conv_kernel <= 0 or self.conv_kernel % 2 == 0:
            raise ValueError(
                f"BlockConfig: conv_kernel {self.conv_kernel} must be odd")
        if self.block_kind not in BLOCK_KINDS:
            raise ValueError(
                f"BlockConfig: unknown block_kind {self.block_kind!r}")


@dataclass
class BlockParams:
    """Named parameter tensors for one block, tied to its configuration."""

    config: BlockConfig
    tensors: dict[str, Tensor] = field(default_factory=dict)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]


def _dense(rng, n_in: int, n_out: int) -> Tensor:
    return parameter(rng.normal(0.0, n_in ** -0.5, size=(n_in, n_out)))


def _bias(n: int) -> Tensor:
    return parameter(np.zeros(n))


def _norm_pair(t: dict, prefix: str, d: int) -> None:
    t[f"{prefix}.gain"] = parameter(np.ones(d))
    t[f"{prefix}.bias"] = parameter(np.zeros(d))


def _ffn_group(t: dict, prefix: str, rng, d: int, f: int) -> None:
    t[f"{prefix}.w1"] = _dense(rng, d, f)
    t[f"{prefix}.b1"] = _bias(f)
    t[f"{prefix}.w2"] = _dense(rng, f, d)
    t[f"{prefix}.b2"] = _bias(d)


def _attention_group(t: dict, prefix: str, rng, d: int) -> None:
    for name in ("wq", "wk", "wv", "wo"):
        t[f"{prefix}.{name}"] = _dense(rng, d, d)
    # No key bias: softmax cancels a constant shift per score row exactly,
    # so the parameter would be unidentifiable.
    for name in ("bq", "bv", "bo"):
        t[f"{prefix}.{name}"] = _bias(d)


def init_block_params(config: BlockConfig, rng) -> BlockParams:
    d, f, k = config.d_model, config.d_ffn, config.conv_kernel
    t: dict[str, Tensor] = {}
    if config.block_kind == "conformer":
        _norm_pair(t, "ffn1_norm", d)
        _ffn_group(t, "ffn1", rng, d, f)
        _norm_pair(t, "mhsa_norm", d)
        _attention_group(t, "mhsa", rng, d)
        _norm_pair(t, "conv_norm", d)
        t["conv.pw_in_w"] = _dense(rng, d, d)
        t["conv.pw_in_b"] = _bias(d)
        t["conv.dw_w"] = parameter(rng.normal(0.0, k ** -0.5, size=(k, d)))
        t["conv.dw_b"] = _bias(d)
        t["conv.ln_gain"] = parameter(np.ones(d))
        t["conv.ln_bias"] = parameter(np.zeros(d))
        t["conv.pw_out_w"] = _dense(rng, d, d)
        t["conv.pw_out_b"] = _bias(d)
        _norm_pair(t, "ffn2_norm", d)
        _ffn_group(t, "ffn2", rng, d, f)
    else:
        _norm_pair(t, "mhsa_norm", d)
        _attention_group(t, "mhsa", rng, d)
        _norm_pair(t, "ffn_norm", d)
        _ffn_group(t, "ffn", rng, d, f)
    _norm_pair(t, "final_norm", d)
    return BlockParams(config=config, tensors=t)


def block_param_count(config: BlockConfig) -> int:
    """Closed-form number of scalars in one block."""
    d, f, k = config.d_model, config.d_ffn, config.conv_kernel
    ffn = 2 * d * f + f + d
    norm = 2 * d
    mhsa = 4 * d * d + 3 * d
    if config.block_kind == "conformer":
        conv = 2 * (d * d + d) + (k * d + d) + norm
        return 2 * ffn + mhsa + conv + 5 * norm
    return ffn + mhsa + 3 * norm


def _norm(params, prefix: str, x: Tensor) -> Tensor:
    return layer_norm(x, params[f"{prefix}.gain"], params[f"{prefix}.bias"])


def _ffn(params, prefix: str, x: Tensor) -> Tensor:
    h = swish(affine(x, params[f"{prefix}.w1"], params[f"{prefix}.b1"]))
    return affine(h, params[f"{prefix}.w2"], params[f"{prefix}.b2"])


def attention(params, prefix: str, q_in: Tensor, kv_in: Tensor,
              n_heads: int, mask=None) -> Tensor:
    """Multi-head scaled dot-product attention over 2-D (time, width) inputs."""
    q = affine(q_in, params[f"{prefix}.wq"], params[f"{prefix}.bq"])
    k = matmul(kv_in, params[f"{prefix}.wk"])
    v = affine(kv_in, params[f"{prefix}.wv"], params[f"{prefix}.bv"])
    scores = multihead_scores(q, k, n_heads)
    if mask is not None:
        scores = masked_fill(scores, mask, LOG_ZERO)
    mixed = multihead_mix(softmax(scores), v, n_heads)
    return affine(mixed, params[f"{prefix}.wo"], params[f"{prefix}.bo"])


def _conv_module(params, x: Tensor) -> Tensor:
    h = affine(x, params["conv.pw_in_w"], params["conv.pw_in_b"])
    h = add(depthwise_conv1d(h, params["conv.dw_w"]), params["conv.dw_b"])
    h = layer_norm(h, params["conv.ln_gain"], params["conv.ln_bias"])
    h = swish(h)
    return affine(h, params["conv.pw_out_w"], params["conv.pw_out_b"])


def _check_width(params: BlockParams, x: Tensor, op: str) -> None:
    d = params.config.d_model
    if x.data.ndim != 2 or x.shape[1] != d:
        raise ValueError(
            f"{op}: input width {tuple(x.shape)} does not match d_model {d}")


def conformer_block_forward(params: BlockParams, x: Tensor,
                            train_mode: bool = False) -> Tensor:
    """Macaron block: half FFN, self-attention, convolution, half FFN."""
    _check_width(params, x, "conformer_block_forward")
    h = add(x, scale(_ffn(params, "ffn1", _norm(params, "ffn1_norm", x)), 0.5))
    hn = _norm(params, "mhsa_norm", h)
    h = add(h, attention(params, "mhsa", hn, hn, params.config.n_heads))
    h = add(h, _conv_module(params, _norm(params, "conv_norm", h)))
    h = add(h, scale(_ffn(params, "ffn2", _norm(params, "ffn2_norm", h)), 0.5))
    return _norm(params, "final_norm", h)


def transformer_block_forward(params: BlockParams, x: Tensor,
                              train_mode: bool = False) -> Tensor:
    """Pre-norm residual self-attention followed by a full-scale FFN."""
    _check_width(params, x, "transformer_block_forward")
    xn = _norm(params, "mhsa_norm", x)
    h = add(x, attention(params, "mhsa", xn, xn, params.config.n_heads))
    h = add(h, _ffn(params, "ffn", _norm(params, "ffn_norm", h)))
    return _norm(params, "final_norm", h)


def block_forward(params: BlockParams, x: Tensor,
                  train_mode: bool = False) -> Tensor:
    if params.config.block_kind == "conformer":
        return conformer_block_forward(params, x, train_mode)
    return transformer_block_forward(params, x, train_mode)


# ---------------------------------------------------------------------------
# Frontend / head / decoder
# ---------------------------------------------------------------------------

@lru_cache(maxsize=64)
def _position_table(t: int, d: int):
    pos = np.arange(t)[:, None]
    idx = np.arange(d)[None, :]
    angle = pos / np.power(10000.0, (2 * (idx // 2)) / d)
    pe = np.where(idx % 2 == 0, np.sin(angle), np.cos(angle))
    pe.setflags(write=False)
    return pe


def sinusoidal_positions(t: int, d: int) -> Tensor:
    """Fixed interleaved sin/cos position encoding; row 0 is [0,1,0,1,...]."""
    return constant(_position_table(t, d))


def init_token_frontend(vocab_size: int, d_model: int, rng) -> dict[str, Tensor]:
    """Embedding over vocabulary {0: noise, 1..V: content tokens}."""
    table = rng.normal(0.0, d_model ** -0.5, size=(vocab_size + 1, d_model))
    return {"table": parameter(table)}


def init_feature_frontend(input_dim: int, d_model: int, rng) -> dict[str, Tensor]:
    return {"proj_w": _dense(rng, input_dim, d_model), "proj_b": _bias(d_model)}


def embed_inputs(x, frontend: dict[str, Tensor]) -> Tensor:
    """Token lookup or linear feature projection, plus position encoding."""
    if "table" in frontend:
        ids = np.asarray(x, dtype=np.int64)
        if ids.ndim != 1:
            raise ValueError(
                f"embed_inputs: token input must be 1-D, got {ids.shape}")
        h = embedding(frontend["table"], ids)
    else:
        feats = constant(np.asarray(x, dtype=np.float64))
        h = affine(feats, frontend["proj_w"], frontend["proj_b"])
    t, d = h.shape
    return add(h, sinusoidal_positions(t, d))


def init_head(d_model: int, vocab_size: int, rng) -> dict[str, Tensor]:
    """Affine map onto vocab_size + 1 outputs; index 0 is the CTC blank."""
    return {"w": _dense(rng, d_model, vocab_size + 1),
            "b": _bias(vocab_size + 1)}


def project_logits(h: Tensor, head: dict[str, Tensor]) -> Tensor:
    return affine(h, head["w"], head["b"])


# Decoder token space: 0 = start-of-sequence (never predicted),
# 1..V = content tokens, V+1 = end-of-sequence.
SOS_ID = 0


def decoder_eos_id(vocab_size: int) -> int:
    return vocab_size + 1


def init_decoder_params(config: BlockConfig, vocab_size: int, rng) -> BlockParams:
    d, f = config.d_model, config.d_ffn
    n_cls = vocab_size + 2
    t: dict[str, Tensor] = {}
    t["table"] = parameter(rng.normal(0.0, d ** -0.5, size=(n_cls, d)))
    _norm_pair(t, "self_norm", d)
    _attention_group(t, "self", rng, d)
    _norm_pair(t, "cross_norm", d)
    _attention_group(t, "cross", rng, d)
    _norm_pair(t, "ffn_norm", d)
    _ffn_group(t, "ffn", rng, d, f)
    _norm_pair(t, "final_norm", d)
    t["out_w"] = _dense(rng, d, n_cls)
    t["out_b"] = _bias(n_cls)
    return BlockParams(config=config, tensors=t)


def decoder_param_count(config: BlockConfig, vocab_size: int) -> int:
    d, f = config.d_model, config.d_ffn
    n_cls = vocab_size + 2
    ffn = 2 * d * f + f + d
    mhsa = 4 * d * d + 3 * d
    return n_cls * d + 2 * mhsa + ffn + 4 * 2 * d + d * n_cls + n_cls


def toy_decoder_forward(enc: Tensor, target_prefix, params: BlockParams) -> Tensor:
    """One causally-masked block over a teacher-forced prefix.

    Returns next-token logits of shape (len(prefix), vocab + 2).
    """
    prefix = list(target_prefix)
    if not prefix:
        raise ValueError("toy_decoder_forward: empty target prefix")
    if prefix[0] != SOS_ID:
        raise ValueError(
            f"toy_decoder_forward: prefix must begin with start token "
            f"{SOS_ID}, got {prefix[0]}")
    d = params.config.d_model
    h = add(embedding(params["table"], prefix), sinusoidal_positions(len(prefix), d))
    causal = np.triu(np.ones((len(prefix), len(prefix)), dtype=bool), k=1)
    hn = _norm(params, "self_norm", h)
    h = add(h, attention(params, "self", hn, hn,
                         params.config.n_heads, mask=causal))
    h = add(h, attention(params, "cross",
                         _norm(params, "cross_norm", h), enc,
                         params.config.n_heads))
    h = add(h, _ffn(params, "ffn", _norm(params, "ffn_norm", h)))
    h = _norm(params, "final_norm", h)
    return affine(h, params["out_w"], params["out_b"])
