"""Class-conditional causal transformer over token sequences.

The input to the network is ``[class, BOS, x_0, ..., x_{N-2}]`` (N+1
positions). Output row ``t`` (taken from input position ``t+1``) holds the
logits for ``x_t`` given the class and ``x_{<t}``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import numkernel as nk
from .numkernel import ParamStore, SeededRng, Tensor

# bumped on every forward pass; the VA-pi trainer reads it to verify one pass per group
FORWARD_PASSES = 0


@dataclass(frozen=True)
class ArConfig:
    vocab_size: int = 32
    num_classes: int = 8
    seq_len: int = 16
    d_model: int = 32
    num_layers: int = 2
    num_heads: int = 2
    ff_mult: int = 4

    @property
    def class_offset(self) -> int:
        return self.vocab_size

    @property
    def bos(self) -> int:
        return self.vocab_size + self.num_classes

    @property
    def table_rows(self) -> int:
        return self.vocab_size + self.num_classes + 1


TINY_AR = ArConfig(vocab_size=6, num_classes=8, seq_len=4, d_model=8, num_layers=1, num_heads=2)


def init_ar(cfg: ArConfig, rng: SeededRng, scale: float = 1.0) -> ParamStore:
    """Random init; ``scale`` > 1 gives peakier distributions (used by the enumeration oracles)."""
    d, f = cfg.d_model, cfg.ff_mult * cfg.d_model
    resid = 1.0 / math.sqrt(2 * cfg.num_layers)
    arrays = {
        "ar/head": rng.normal((d, cfg.vocab_size)) * scale / math.sqrt(d),
        "ar/ln_f/b": np.zeros(d),
        "ar/ln_f/g": np.ones(d),
        "ar/pos_emb": rng.normal((cfg.seq_len + 1, d)) * 0.1 * scale,
        "ar/tok_emb": rng.normal((cfg.table_rows, d)) * 0.1 * scale,
    }
    for layer in range(cfg.num_layers):
        pre = f"ar/blocks/{layer}"
        arrays.update({
            f"{pre}/attn/bo": np.zeros(d),
            f"{pre}/attn/bq": np.zeros(d),
            f"{pre}/attn/bv": np.zeros(d),
            f"{pre}/attn/wo": rng.normal((d, d)) * scale * resid / math.sqrt(d),
            f"{pre}/attn/wqkv": rng.normal((d, 3 * d)) * scale / math.sqrt(d),
            f"{pre}/ln1/b": np.zeros(d),
            f"{pre}/ln1/g": np.ones(d),
            f"{pre}/ln2/b": np.zeros(d),
            f"{pre}/ln2/g": np.ones(d),
            f"{pre}/mlp/b1": np.zeros(f),
            f"{pre}/mlp/b2": np.zeros(d),
            f"{pre}/mlp/w1": rng.normal((d, f)) * scale / math.sqrt(d),
            f"{pre}/mlp/w2": rng.normal((f, d)) * scale * resid / math.sqrt(f),
        })
    return ParamStore(arrays)


def zero_ar(cfg: ArConfig) -> ParamStore:
    params = init_ar(cfg, SeededRng(0, 0))
    return ParamStore({k: np.zeros_like(v.data) for k, v in params.items()})


def context_independent(params: ParamStore, cfg: ArConfig) -> ParamStore:
    """Ablate attention and the data-token embeddings so every row ignores the prefix."""
    out = params.copy()
    for layer in range(cfg.num_layers):
        out[f"ar/blocks/{layer}/attn/wo"] = np.zeros_like(out[f"ar/blocks/{layer}/attn/wo"].data)
        out[f"ar/blocks/{layer}/attn/bo"] = np.zeros_like(out[f"ar/blocks/{layer}/attn/bo"].data)
    emb = out["ar/tok_emb"].data.copy()
    emb[: cfg.vocab_size] = 0.0
    out["ar/tok_emb"] = emb
    return out


def _input_ids(labels: np.ndarray, prefix: np.ndarray, cfg: ArConfig) -> np.ndarray:
    b = prefix.shape[0]
    head = np.stack([labels + cfg.class_offset, np.full(b, cfg.bos)], axis=1)
    return np.concatenate([head, prefix[:, : cfg.seq_len - 1]], axis=1)


_MASKS: dict[int, np.ndarray] = {}


def _causal_mask(t: int) -> np.ndarray:
    if t not in _MASKS:
        _MASKS[t] = np.tril(np.ones((t, t), dtype=bool))
    return _MASKS[t]


def _attention(x: Tensor, params: ParamStore, pre: str, cfg: ArConfig) -> Tensor:
    b, t, d = x.shape
    h = cfg.num_heads
    hd = d // h
    # no key bias: it shifts every score of a query equally, so softmax ignores it
    bias = nk.concat([params[f"{pre}/bq"], Tensor(np.zeros(d)), params[f"{pre}/bv"]])
    qkv = x @ params[f"{pre}/wqkv"] + bias
    qkv = qkv.reshape(b, t, 3, h, hd).transpose(2, 0, 3, 1, 4)
    q, k, v = qkv[0], qkv[1], qkv[2]
    scores = (q @ k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(hd))
    att = nk.masked_softmax(scores, _causal_mask(t))
    out = (att @ v).transpose(0, 2, 1, 3).reshape(b, t, d)
    return out @ params[f"{pre}/wo"] + params[f"{pre}/bo"]


def forward_logits(params: ParamStore, labels, prefix, cfg: ArConfig) -> Tensor:
    """Logits of shape (N, K) for one sequence or (B, N, K) for a batch.

    Row ``t`` depends only on the label and ``prefix[:t]``.
    """
    global FORWARD_PASSES
    FORWARD_PASSES += 1
    prefix = np.asarray(prefix, dtype=np.int64)
    single = prefix.ndim == 1
    if single:
        prefix = prefix[None]
    labels = np.broadcast_to(np.asarray(labels, dtype=np.int64), (prefix.shape[0],))
    if prefix.shape[1] != cfg.seq_len:
        raise ValueError(f"prefix length must be {cfg.seq_len}")
    if prefix.size and (prefix.min() < 0 or prefix.max() >= cfg.vocab_size):
        raise ValueError("token out of vocabulary")
    ids = _input_ids(labels, prefix, cfg)
    x = nk.embedding(params["ar/tok_emb"], ids) + params["ar/pos_emb"]
    for layer in range(cfg.num_layers):
        pre = f"ar/blocks/{layer}"
        x = x + _attention(nk.layer_norm(x, params[f"{pre}/ln1/g"], params[f"{pre}/ln1/b"]),
                           params, f"{pre}/attn", cfg)
        hdn = nk.layer_norm(x, params[f"{pre}/ln2/g"], params[f"{pre}/ln2/b"])
        hdn = (hdn @ params[f"{pre}/mlp/w1"] + params[f"{pre}/mlp/b1"]).gelu()
        x = x + (hdn @ params[f"{pre}/mlp/w2"] + params[f"{pre}/mlp/b2"])
    x = nk.layer_norm(x, params["ar/ln_f/g"], params["ar/ln_f/b"])
    logits = x[:, 1:, :] @ params["ar/head"]
    return logits[0] if single else logits


def teacher_forced_dist(params: ParamStore, labels, gt_prefix, cfg: ArConfig) -> Tensor:
    """Logits whose softmax rows are the factors of the teacher-forced posterior.

    Same computation as :func:`forward_logits`; sampling each row
    independently draws from ``prod_t pi(. | gt_prefix[:t])``.
    """
    return forward_logits(params, labels, gt_prefix, cfg)


def nll(params: ParamStore, labels, targets, cfg: ArConfig) -> Tensor:
    """Mean teacher-forced negative log-likelihood per token."""
    return nk.cross_entropy_seq(forward_logits(params, labels, targets, cfg), targets)


def sequence_logprob(params: ParamStore, labels, seqs, cfg: ArConfig) -> np.ndarray:
    """Free-running log pi(x) for each sequence, by the chain rule."""
    seqs = np.asarray(seqs, dtype=np.int64)
    with nk.no_grad():
        logp = nk.log_softmax_array(forward_logits(params, labels, seqs, cfg).data)
    return np.take_along_axis(logp, seqs[..., None], axis=-1)[..., 0].sum(axis=-1)


def sample_free_running(params: ParamStore, labels, temperature: float, rng: SeededRng,
                        cfg: ArConfig) -> np.ndarray:
    """Sequential sampling; temperature 0 is argmax with lowest-index tie-break.

    ``labels`` may be a scalar (returns shape (N,)) or a (B,) array (returns (B, N)).
    """
    if temperature < 0:
        raise ValueError("temperature must be nonnegative")
    labels = np.asarray(labels, dtype=np.int64)
    single = labels.ndim == 0
    labels = labels.reshape(-1)
    b = labels.shape[0]
    seq = np.zeros((b, cfg.seq_len), dtype=np.int64)
    with nk.no_grad():
        for t in range(cfg.seq_len):
            row = forward_logits(params, labels, seq, cfg).data[:, t, :]
            if temperature == 0:
                seq[:, t] = np.argmax(row, axis=-1)
            else:
                probs = np.exp(nk.log_softmax_array(row / temperature))
                seq[:, t] = nk.categorical_sample_rows(probs, rng)
    return seq[0] if single else seq


def pretrain_step(params: ParamStore, labels, targets, opt: nk.AdamW, cfg: ArConfig,
                  max_grad_norm: float = 1.0) -> dict:
    """One teacher-forcing AdamW step on the mean NLL."""
    params.zero_grad()
    loss = nll(params, labels, targets, cfg)
    if not np.isfinite(loss.data):
        raise FloatingPointError("diverged")
    loss.backward()
    grads = params.grads()
    norm = nk.clip_grad_norm(grads, max_grad_norm)
    opt.step(params, grads)
    return {"nll": float(loss.data), "grad_norm": norm}
