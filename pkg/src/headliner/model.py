"""Decoder-only autoregressive transformer on numpy, with exact gradients.

Architecture choices, relative to the original transformer decoder:

 * layer normalization at the input of each sublayer plus one final layer
   norm after the last block (instead of post-residual norms),
 * learned positional embeddings,
 * GELU activation (exact Gaussian CDF form, not the tanh approximation),
 * residual-path output projections initialized from N(0, 0.02/sqrt(n))
   where n is the number of residual branches (two per layer),
 * no dropout,
 * output projection tied to the token embedding.

Forward and backward passes are written out by hand so that
:func:`loss_and_grads` returns exact derivatives of the masked mean NLL,
verifiable against central finite differences at 64-bit precision.
Parameters live in a plain ``dict[str, np.ndarray]`` with a documented
fixed ordering (:func:`param_names`) used by checkpointing.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf

_LN_EPS = 1e-5
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)

Parameters = dict[str, np.ndarray]


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int
    d_model: int
    n_heads: int
    context: int = 512
    vocab_size: int = 0
    seed: int = 0

    def __post_init__(self):
        if self.n_layers < 1:
            raise ValueError("n_layers must be >= 1")
        if self.context < 1:
            raise ValueError("context must be >= 1")
        if self.vocab_size < 1:
            raise ValueError("vocab_size must be >= 1")
        if self.d_model % self.n_heads != 0:
            raise ValueError("n_heads must divide d_model")


def param_names(config: ModelConfig) -> list[str]:
    """Canonical parameter order, shared by init and checkpoint layout."""
    names = ["tok_emb", "pos_emb"]
    for i in range(config.n_layers):
        p = f"layers.{i}."
        names += [
            p + "ln1.g", p + "ln1.b",
            p + "attn.wq", p + "attn.bq",
            p + "attn.wk", p + "attn.bk",
            p + "attn.wv", p + "attn.bv",
            p + "attn.wo", p + "attn.bo",
            p + "ln2.g", p + "ln2.b",
            p + "mlp.w1", p + "mlp.b1",
            p + "mlp.w2", p + "mlp.b2",
        ]
    names += ["ln_f.g", "ln_f.b"]
    return names


def param_shape(name: str, config: ModelConfig) -> tuple[int, ...]:
    d = config.d_model
    leaf = name.rsplit(".", 1)[-1]
    if name == "tok_emb":
        return (config.vocab_size, d)
    if name == "pos_emb":
        return (config.context, d)
    if leaf in ("g", "b"):
        return (d,)
    if leaf in ("wq", "wk", "wv", "wo"):
        return (d, d)
    if leaf in ("bq", "bk", "bv", "bo"):
        return (d,)
    if leaf == "w1":
        return (d, 4 * d)
    if leaf == "b1":
        return (4 * d,)
    if leaf == "w2":
        return (4 * d, d)
    if leaf == "b2":
        return (d,)
    raise ValueError(f"unknown parameter {name!r}")


_RESIDUAL_LEAVES = ("attn.wo", "mlp.w2")


def residual_init_std(config: ModelConfig) -> float:
    """Init std for residual-path projections: 0.02 / sqrt(2 * n_layers)."""
    return 0.02 / math.sqrt(2 * config.n_layers)


def init(config: ModelConfig, dtype=np.float32) -> Parameters:
    """Initialize parameters deterministically from ``config.seed``."""
    rng = np.random.default_rng(config.seed)
    std_res = residual_init_std(config)
    params: Parameters = {}
    for name in param_names(config):
        shape = param_shape(name, config)
        leaf = name.rsplit(".", 1)[-1]
        if leaf == "g":
            arr = np.ones(shape)
        elif leaf in ("b", "bq", "bk", "bv", "bo", "b1", "b2"):
            arr = np.zeros(shape)
        elif any(name.endswith(r) for r in _RESIDUAL_LEAVES):
            arr = rng.normal(0.0, std_res, shape)
        else:
            arr = rng.normal(0.0, 0.02, shape)
        params[name] = arr.astype(dtype)
    return params


def gelu(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + erf(x * (1.0 / math.sqrt(2.0))))


def gelu_grad(x: np.ndarray) -> np.ndarray:
    phi = np.exp(-0.5 * x * x) * _INV_SQRT_2PI
    cdf = 0.5 * (1.0 + erf(x * (1.0 / math.sqrt(2.0))))
    return cdf + x * phi


def _layer_norm_forward(x, g, b):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + np.asarray(_LN_EPS, dtype=x.dtype))
    xhat = xc * inv
    return g * xhat + b, (xhat, inv)


def _layer_norm_backward(dy, g, cache):
    xhat, inv = cache
    dg = (dy * xhat).sum(axis=tuple(range(dy.ndim - 1)))
    db = dy.sum(axis=tuple(range(dy.ndim - 1)))
    dxhat = dy * g
    mean_dxhat = dxhat.mean(axis=-1, keepdims=True)
    mean_dxhat_xhat = (dxhat * xhat).mean(axis=-1, keepdims=True)
    dx = inv * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat)
    return dx, dg, db


def _softmax(x: np.ndarray) -> np.ndarray:
    m = np.max(x, axis=-1, keepdims=True)
    e = np.exp(x - m)
    return e / e.sum(axis=-1, keepdims=True)


def _as_batch(tokens) -> tuple[np.ndarray, bool]:
    ids = np.asarray(tokens)
    if ids.ndim == 1:
        return ids[None, :], True
    if ids.ndim == 2:
        return ids, False
    raise ValueError("tokens must be a 1-D sequence or a 2-D batch")


def _check_ids(ids: np.ndarray, config: ModelConfig) -> None:
    if ids.shape[1] < 1:
        raise ValueError("sequence length must be >= 1")
    if ids.shape[1] > config.context:
        raise ValueError(
            f"sequence length {ids.shape[1]} exceeds context {config.context}"
        )
    if ids.min() < 0 or ids.max() >= config.vocab_size:
        raise ValueError("token id out of range for the vocabulary")


def _forward(params: Parameters, ids: np.ndarray, config: ModelConfig,
             keep_cache: bool):
    R, L = ids.shape
    d, H = config.d_model, config.n_heads
    hd = d // H
    dtype = params["tok_emb"].dtype
    scale = np.asarray(1.0 / math.sqrt(hd), dtype=dtype)

    causal = np.triu(np.full((L, L), -np.inf, dtype=dtype), k=1)

    x = params["tok_emb"][ids] + params["pos_emb"][:L]
    caches = []
    for i in range(config.n_layers):
        p = f"layers.{i}."
        a, ln1c = _layer_norm_forward(x, params[p + "ln1.g"], params[p + "ln1.b"])
        q = a @ params[p + "attn.wq"] + params[p + "attn.bq"]
        k = a @ params[p + "attn.wk"] + params[p + "attn.bk"]
        v = a @ params[p + "attn.wv"] + params[p + "attn.bv"]
        q = q.reshape(R, L, H, hd).transpose(0, 2, 1, 3)
        k = k.reshape(R, L, H, hd).transpose(0, 2, 1, 3)
        v = v.reshape(R, L, H, hd).transpose(0, 2, 1, 3)
        scores = q @ k.transpose(0, 1, 3, 2) * scale + causal
        att = _softmax(scores)
        ctx = (att @ v).transpose(0, 2, 1, 3).reshape(R, L, d)
        proj = ctx @ params[p + "attn.wo"] + params[p + "attn.bo"]
        x_mid = x + proj
        m, ln2c = _layer_norm_forward(
            x_mid, params[p + "ln2.g"], params[p + "ln2.b"]
        )
        u = m @ params[p + "mlp.w1"] + params[p + "mlp.b1"]
        gu = gelu(u)
        f = gu @ params[p + "mlp.w2"] + params[p + "mlp.b2"]
        x_out = x_mid + f
        if keep_cache:
            caches.append(
                dict(a=a, ln1c=ln1c, q=q, k=k, v=v, att=att, ctx=ctx,
                     ln2c=ln2c, m=m, u=u, gu=gu)
            )
        x = x_out

    hf, lnfc = _layer_norm_forward(x, params["ln_f.g"], params["ln_f.b"])
    logits = hf @ params["tok_emb"].T
    cache = dict(ids=ids, layers=caches, hf=hf, lnfc=lnfc, scale=scale)
    return logits, cache


def forward(params: Parameters, tokens, config: ModelConfig) -> np.ndarray:
    """Next-token logits for every position; causal by construction.

    Accepts a single sequence (returns ``(L, V)``) or a batch of rows
    (returns ``(R, L, V)``).
    """
    ids, squeeze = _as_batch(tokens)
    _check_ids(ids, config)
    logits, _ = _forward(params, ids, config, keep_cache=False)
    return logits[0] if squeeze else logits


def log_probs(params: Parameters, tokens, config: ModelConfig) -> np.ndarray:
    """Log-softmax of :func:`forward`, same shape conventions."""
    logits = forward(params, tokens, config)
    m = logits.max(axis=-1, keepdims=True)
    shifted = logits - m
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def loss_and_grads(
    params: Parameters,
    tokens,
    loss_mask,
    config: ModelConfig,
) -> tuple[float, Parameters]:
    """Masked mean next-token NLL and its exact parameter gradients.

    ``loss_mask`` selects target positions: entry ``t`` gates the
    prediction of ``tokens[t + 1]``, so it is one shorter than the
    sequence. At least one position must be selected.
    """
    ids, _ = _as_batch(tokens)
    _check_ids(ids, config)
    mask = np.asarray(loss_mask, dtype=bool)
    if mask.ndim == 1:
        mask = mask[None, :]
    R, L = ids.shape
    if mask.shape != (R, L - 1):
        raise ValueError(f"loss_mask shape {mask.shape} != {(R, L - 1)}")
    n_masked = int(mask.sum())
    if n_masked == 0:
        raise ValueError("loss_mask selects no positions: no training signal")

    logits, cache = _forward(params, ids, config, keep_cache=True)
    dtype = logits.dtype
    d, H = config.d_model, config.n_heads
    hd = d // H

    # Masked mean cross-entropy over shifted targets.
    pred = logits[:, :-1, :]
    targets = ids[:, 1:]
    m = pred.max(axis=-1, keepdims=True)
    shifted = pred - m
    logZ = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    logp = shifted - logZ
    rows, cols = np.nonzero(mask)
    loss = -float(logp[rows, cols, targets[rows, cols]].sum()) / n_masked

    dlogits = np.zeros_like(logits)
    probs = np.exp(logp)
    dpred = probs * (mask[:, :, None] / n_masked).astype(dtype)
    dpred[rows, cols, targets[rows, cols]] -= 1.0 / n_masked
    dlogits[:, :-1, :] = dpred

    grads: Parameters = {n: np.zeros_like(params[n]) for n in param_names(config)}

    # Tied output projection: logits = hf @ tok_emb.T
    hf = cache["hf"]
    grads["tok_emb"] += dlogits.reshape(-1, config.vocab_size).T @ hf.reshape(-1, d)
    dhf = dlogits @ params["tok_emb"]

    dx, dg, db = _layer_norm_backward(dhf, params["ln_f.g"], cache["lnfc"])
    grads["ln_f.g"] += dg
    grads["ln_f.b"] += db

    scale = cache["scale"]
    for i in reversed(range(config.n_layers)):
        p = f"layers.{i}."
        c = cache["layers"][i]

        # MLP branch: x_out = x_mid + f
        df = dx
        gu2 = c["gu"].reshape(-1, 4 * d)
        grads[p + "mlp.w2"] += gu2.T @ df.reshape(-1, d)
        grads[p + "mlp.b2"] += df.sum(axis=(0, 1))
        dgu = df @ params[p + "mlp.w2"].T
        du = dgu * gelu_grad(c["u"])
        grads[p + "mlp.w1"] += c["m"].reshape(-1, d).T @ du.reshape(-1, 4 * d)
        grads[p + "mlp.b1"] += du.sum(axis=(0, 1))
        dm = du @ params[p + "mlp.w1"].T

        dx_mid, dg2, db2 = _layer_norm_backward(dm, params[p + "ln2.g"], c["ln2c"])
        grads[p + "ln2.g"] += dg2
        grads[p + "ln2.b"] += db2
        dx_mid = dx_mid + dx  # residual

        # Attention branch: x_mid = x + proj
        dproj = dx_mid
        grads[p + "attn.wo"] += c["ctx"].reshape(-1, d).T @ dproj.reshape(-1, d)
        grads[p + "attn.bo"] += dproj.sum(axis=(0, 1))
        dctx = (dproj @ params[p + "attn.wo"].T).reshape(R, L, H, hd)
        dctx = dctx.transpose(0, 2, 1, 3)

        att, q, k, v = c["att"], c["q"], c["k"], c["v"]
        datt = dctx @ v.transpose(0, 1, 3, 2)
        dv = att.transpose(0, 1, 3, 2) @ dctx
        dscores = att * (datt - (datt * att).sum(axis=-1, keepdims=True))
        dq = dscores @ k * scale
        dk = dscores.transpose(0, 1, 3, 2) @ q * scale

        dq = dq.transpose(0, 2, 1, 3).reshape(R, L, d)
        dk = dk.transpose(0, 2, 1, 3).reshape(R, L, d)
        dv = dv.transpose(0, 2, 1, 3).reshape(R, L, d)
        a2 = c["a"].reshape(-1, d)
        grads[p + "attn.wq"] += a2.T @ dq.reshape(-1, d)
        grads[p + "attn.bq"] += dq.sum(axis=(0, 1))
        grads[p + "attn.wk"] += a2.T @ dk.reshape(-1, d)
        grads[p + "attn.bk"] += dk.sum(axis=(0, 1))
        grads[p + "attn.wv"] += a2.T @ dv.reshape(-1, d)
        grads[p + "attn.bv"] += dv.sum(axis=(0, 1))
        da = dq @ params[p + "attn.wq"].T
        da += dk @ params[p + "attn.wk"].T
        da += dv @ params[p + "attn.wv"].T

        dx_in, dg1, db1 = _layer_norm_backward(da, params[p + "ln1.g"], c["ln1c"])
        grads[p + "ln1.g"] += dg1
        grads[p + "ln1.b"] += db1
        dx = dx_in + dx_mid  # residual

    # Embeddings
    np.add.at(grads["tok_emb"], ids, dx)
    grads["pos_emb"][:L] += dx.sum(axis=0)
    return loss, grads


def sequence_log_prob_fn(
    params: Parameters, config: ModelConfig
) -> Callable[[Sequence[int]], np.ndarray]:
    """Adapter for perplexity: tokens -> per-position next-token log probs.

    The returned callable maps a sequence of length L to an ``(L-1, V)``
    matrix whose row t is the log distribution over ``tokens[t + 1]``.
    """

    def fn(tokens: Sequence[int]) -> np.ndarray:
        lp = log_probs(params, np.asarray(tokens, dtype=np.int64), config)
        return lp[:-1]

    return fn


def as_scorer(
    params: Parameters, config: ModelConfig
) -> Callable[[Sequence[int]], np.ndarray]:
    """Adapter for decoding: prefix -> log-probability row for the next token.

    Prefixes longer than the context window are cropped to their most
    recent ``context`` tokens.
    """

    def scorer(prefix: Sequence[int]) -> np.ndarray:
        ids = np.asarray(prefix, dtype=np.int64)
        if ids.shape[0] > config.context:
            ids = ids[-config.context:]
        return log_probs(params, ids, config)[-1]

    return scorer
