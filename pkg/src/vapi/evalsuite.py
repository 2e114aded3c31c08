"""Metrics and brute-force oracles.

Enumeration routines here are deliberately naive: they walk every token
sequence of an enumerable configuration (K**N small) and are the ground truth
for the Monte-Carlo estimators used on the full-size models.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.spatial.distance import cdist
from scipy.special import logsumexp

from . import argen, tokenizer
from . import numkernel as nk
from .alignkit import CorruptionSpec, FrozenFeatureBank, corrupt, RewardWeights, default_bank, reward_batch
from .argen import ArConfig
from .numkernel import ParamStore, SeededRng
from .tokenizer import TokenizerConfig

MAX_ENUMERABLE = 10**6
PSNR_INF = float("inf")


@dataclass(frozen=True)
class FeatureStats:
    mu: np.ndarray
    sigma: np.ndarray


@dataclass(frozen=True)
class ElboReport:
    recon: float
    kl: float
    elbo: float
    log_marginal: float | None = None
    slack: float | None = None


# -- pixel likelihood -------------------------------------------------------------

def pixel_loglik(image, decoded, sigma: float = 0.1) -> float | np.ndarray:
    """Isotropic Gaussian log-density of ``image`` around ``decoded``.

    Leading batch axes of ``decoded`` broadcast against ``image``.
    """
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    image = np.asarray(image, dtype=np.float64)
    decoded = np.asarray(decoded, dtype=np.float64)
    p = image.size
    sq = ((decoded - image) ** 2).reshape(decoded.shape[: decoded.ndim - image.ndim] + (-1,)).sum(axis=-1)
    return -sq / (2 * sigma**2) - 0.5 * p * math.log(2 * math.pi * sigma**2)


# -- categorical helpers ------------------------------------------------------------

def categorical_kl(logp: np.ndarray, logq: np.ndarray) -> np.ndarray:
    """KL(p || q) over the last axis from log-probabilities."""
    p = np.exp(logp)
    return np.where(p > 0, p * (logp - logq), 0.0).sum(axis=-1)


def _log_probs(ar: ParamStore, label: int, seqs: np.ndarray, cfg: ArConfig) -> np.ndarray:
    with nk.no_grad():
        return nk.log_softmax_array(argen.forward_logits(ar, label, seqs, cfg).data)


def _check_enumerable(k: int, n: int) -> None:
    if k**n > MAX_ENUMERABLE:
        raise ValueError("not enumerable")


def all_sequences(k: int, n: int) -> np.ndarray:
    _check_enumerable(k, n)
    return np.array(list(itertools.product(range(k), repeat=n)), dtype=np.int64).reshape(-1, n)


# -- ELBO --------------------------------------------------------------------------------

def _posterior_logp(ar, tok, image, label, ar_cfg, tok_cfg) -> tuple[np.ndarray, np.ndarray]:
    x_star = tokenizer.tokenize(tok, image[None], tok_cfg)[0]
    return x_star, _log_probs(ar, label, x_star[None], ar_cfg)[0]  # (N, K)


def elbo_estimate(ar: ParamStore, tok: ParamStore, sample, sigma: float, num_mc: int, rng: SeededRng,
                  ar_cfg: ArConfig, tok_cfg: TokenizerConfig, with_oracle: bool = False) -> ElboReport:
    """Monte-Carlo ELBO under the teacher-forced posterior.

    Reconstruction: mean Gaussian log-likelihood of decodes of posterior
    draws. KL: for each drawn sequence, exact per-position categorical KLs
    between the posterior factor and the free-running conditional given the
    drawn prefix, summed over positions, then averaged over draws.
    """
    if num_mc < 1:
        raise ValueError("num_mc must be >= 1")
    image, label = sample.image, sample.label.id
    _, q_logp = _posterior_logp(ar, tok, image, label, ar_cfg, tok_cfg)
    draws = nk.categorical_sample_rows(np.exp(q_logp)[None], rng, num=num_mc)[:, 0]  # (M, N)
    decoded = tokenizer.decode_array(tok, draws, tok_cfg)
    recon = float(np.mean(pixel_loglik(image, decoded, sigma)))
    pi_logp = _log_probs(ar, label, draws, ar_cfg)  # (M, N, K)
    kl = float(np.mean(categorical_kl(q_logp[None], pi_logp).sum(axis=-1)))
    report = ElboReport(recon=recon, kl=kl, elbo=recon - kl)
    if with_oracle:
        lm = exact_log_marginal(ar, tok, sample, sigma, ar_cfg, tok_cfg)
        report = ElboReport(recon, kl, recon - kl, lm, lm - (recon - kl))
    return report


def exact_elbo(ar: ParamStore, tok: ParamStore, sample, sigma: float, ar_cfg: ArConfig,
               tok_cfg: TokenizerConfig) -> ElboReport:
    """ELBO with both expectations taken by full enumeration of the posterior's support."""
    k, n = ar_cfg.vocab_size, ar_cfg.seq_len
    seqs = all_sequences(k, n)
    image, label = sample.image, sample.label.id
    _, q_logp = _posterior_logp(ar, tok, image, label, ar_cfg, tok_cfg)
    log_q = q_logp[np.arange(n), seqs].sum(axis=1)
    q = np.exp(log_q)
    log_pi = argen.sequence_logprob(ar, label, seqs, ar_cfg)
    loglik = pixel_loglik(image, tokenizer.decode_array(tok, seqs, tok_cfg), sigma)
    recon = float(np.dot(q, loglik))
    kl = float(np.dot(q, log_q - log_pi))
    lm = exact_log_marginal(ar, tok, sample, sigma, ar_cfg, tok_cfg)
    return ElboReport(recon, kl, recon - kl, lm, lm - (recon - kl))


def exact_log_marginal(ar: ParamStore, tok: ParamStore, sample, sigma: float, ar_cfg: ArConfig,
                       tok_cfg: TokenizerConfig) -> float:
    """``log sum_x pi(x) p(I | x)`` over all K**N sequences."""
    k, n = ar_cfg.vocab_size, ar_cfg.seq_len
    seqs = all_sequences(k, n)
    log_pi = argen.sequence_logprob(ar, sample.label.id, seqs, ar_cfg)
    loglik = pixel_loglik(sample.image, tokenizer.decode_array(tok, seqs, tok_cfg), sigma)
    return float(logsumexp(log_pi + loglik))


def exact_log_marginal_reversed(ar: ParamStore, tok: ParamStore, sample, sigma: float, ar_cfg: ArConfig,
                                tok_cfg: TokenizerConfig) -> float:
    """Second enumeration: sequences visited last-position-major, log-probs chained one step at a time."""
    k, n = ar_cfg.vocab_size, ar_cfg.seq_len
    _check_enumerable(k, n)
    terms = []
    for combo in itertools.product(range(k), repeat=n):
        seq = np.array(combo[::-1], dtype=np.int64)
        lp = _log_probs(ar, sample.label.id, seq[None], ar_cfg)[0]
        log_pi = sum(lp[t, seq[t]] for t in range(n))
        img = tokenizer.decode_array(tok, seq[None], tok_cfg)[0]
        terms.append(log_pi + pixel_loglik(sample.image, img, sigma))
    m = max(terms)
    return m + math.log(math.fsum(math.exp(t - m) for t in terms))


# -- KL chain rule --------------------------------------------------------------------------

ArLaw = Callable[[tuple], np.ndarray]
"""Maps a prefix (tuple of ints) to the next-token probability vector."""


def ar_model_law(ar: ParamStore, label: int, cfg: ArConfig) -> ArLaw:
    cache: dict[tuple, np.ndarray] = {}

    def law(prefix: tuple) -> np.ndarray:
        prefix = tuple(int(v) for v in prefix)
        if prefix not in cache:
            seq = np.zeros(cfg.seq_len, dtype=np.int64)
            seq[: len(prefix)] = prefix
            cache[prefix] = np.exp(_log_probs(ar, label, seq[None], cfg)[0, len(prefix)])
        return cache[prefix]
    return law


def table_law(rng: SeededRng, k: int, n: int, sharpness: float = 1.0) -> ArLaw:
    """Random AR law with an independent softmax table entry per prefix."""
    tables = {}
    for t in range(n):
        for prefix in itertools.product(range(k), repeat=t):
            tables[prefix] = np.exp(nk.log_softmax_array(sharpness * rng.normal(k)))
    return lambda prefix: tables[tuple(prefix)]


def kl_chain_check(p_law: ArLaw, q_law: ArLaw, n: int, k: int) -> tuple[float, float, float]:
    """KL(P || Q) by joint enumeration and by the chain rule over prefixes; returns both and |diff|."""
    _check_enumerable(k, n)
    # joint: probabilities of whole sequences
    joint = 0.0
    terms = []
    for seq in itertools.product(range(k), repeat=n):
        lp = lq = 0.0
        for t in range(n):
            pt, qt = p_law(seq[:t])[seq[t]], q_law(seq[:t])[seq[t]]
            if pt == 0:
                lp = -math.inf
                break
            if qt == 0:
                raise ValueError("absolute continuity violated")
            lp += math.log(pt)
            lq += math.log(qt)
        if lp > -math.inf:
            terms.append(math.exp(lp) * (lp - lq))
    joint = math.fsum(terms)
    # chained: sum over t of E_{prefix ~ P} KL(P(.|prefix) || Q(.|prefix))
    chain_terms = []
    for t in range(n):
        for prefix in itertools.product(range(k), repeat=t):
            w = 1.0
            for s in range(t):
                w *= p_law(prefix[:s])[prefix[s]]
            if w == 0:
                continue
            p, q = p_law(prefix), q_law(prefix)
            if np.any((q == 0) & (p > 0)):
                raise ValueError("absolute continuity violated")
            mask = p > 0
            chain_terms.append(w * float(np.sum(p[mask] * (np.log(p[mask]) - np.log(q[mask])))))
    chained = math.fsum(chain_terms)
    return joint, chained, abs(joint - chained)


def posterior_law(ar: ParamStore, label: int, x_star: np.ndarray, cfg: ArConfig) -> ArLaw:
    """Teacher-forced posterior as an AR law: row t ignores the sampled prefix."""
    rows = np.exp(_log_probs(ar, label, np.asarray(x_star)[None], cfg)[0])
    return lambda prefix: rows[len(prefix)]


# -- exposure bias ------------------------------------------------------------------------------

def exposure_bias_estimate(ar: ParamStore, tok: ParamStore, images: np.ndarray, labels: np.ndarray,
                           num_prefix_mc: int, rng: SeededRng, ar_cfg: ArConfig,
                           tok_cfg: TokenizerConfig, return_stderr: bool = False):
    """Mean nats per token of KL(pi(.|x*_<t) || pi(.|x_<t)) with x drawn from the teacher-forced posterior."""
    images = np.asarray(images, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    x_star = tokenizer.tokenize(tok, images, tok_cfg)
    with nk.no_grad():
        q_logp = nk.log_softmax_array(argen.forward_logits(ar, labels, x_star, ar_cfg).data)  # (B,N,K)
    draws = nk.categorical_sample_rows(np.exp(q_logp), rng, num=num_prefix_mc)  # (M,B,N)
    m, b, n = draws.shape
    flat = draws.reshape(m * b, n)
    rep_labels = np.tile(labels, m)
    with nk.no_grad():
        pi_logp = nk.log_softmax_array(argen.forward_logits(ar, rep_labels, flat, ar_cfg).data)
    kl = categorical_kl(np.tile(q_logp, (m, 1, 1)), pi_logp)  # (M*B, N)
    per_seq = kl.mean(axis=-1)
    est = float(per_seq.mean())
    if return_stderr:
        return est, float(per_seq.std() / math.sqrt(per_seq.size))
    return est


# -- Frechet distance on frozen features ----------------------------------------------------------

def feature_stats(images: np.ndarray, bank: FrozenFeatureBank | None = None) -> FeatureStats:
    feats = (bank or default_bank()).pooled(images)
    mu = feats.mean(axis=0)
    centered = feats - mu
    sigma = centered.T @ centered / max(len(feats) - 1, 1)
    return FeatureStats(mu, 0.5 * (sigma + sigma.T))


def _psd_sqrt(m: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh(0.5 * (m + m.T))
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


def frechet_distance(a: FeatureStats, b: FeatureStats, jitter: float = 1e-6) -> float:
    eye = np.eye(len(a.mu))
    s1, s2 = a.sigma + jitter * eye, b.sigma + jitter * eye
    r1 = _psd_sqrt(s1)
    inner = r1 @ s2 @ r1
    w = np.linalg.eigvalsh(0.5 * (inner + inner.T))
    tr_sqrt = float(np.sum(np.sqrt(np.clip(w, 0.0, None))))
    diff = a.mu - b.mu
    return float(diff @ diff + np.trace(s1) + np.trace(s2) - 2.0 * tr_sqrt)


def toy_fid(real: np.ndarray, generated: np.ndarray, bank: FrozenFeatureBank | None = None) -> float:
    if len(real) < 64 or len(generated) < 64:
        raise ValueError("toy_fid needs at least 64 images per set")
    return frechet_distance(feature_stats(real, bank), feature_stats(generated, bank))


# -- reconstruction diagnostics ------------------------------------------------------------------

def recon_psnr(images: np.ndarray, recon: np.ndarray) -> float:
    """PSNR (peak 1.0) of the mean squared error over the whole set."""
    mse = float(np.mean((np.asarray(images) - np.asarray(recon)) ** 2))
    if mse == 0:
        return PSNR_INF
    return 10.0 * math.log10(1.0 / mse)


def codebook_usage(tok: ParamStore, images: np.ndarray, tok_cfg: TokenizerConfig) -> int:
    return int(np.unique(tokenizer.tokenize(tok, images, tok_cfg)).size)


def teacher_forced_reward(ar: ParamStore, tok: ParamStore, images: np.ndarray, labels: np.ndarray,
                          group_size: int, rng: SeededRng, ar_cfg: ArConfig, tok_cfg: TokenizerConfig,
                          lambda_p: float = 0.5, bank: FrozenFeatureBank | None = None,
                          xi: float = 0.0) -> float:
    """Mean reward of decodes of teacher-forced draws against the reference images.

    The context is the ground-truth token sequence, corrupted at rate ``xi``
    when ``xi > 0`` (the same context distribution the rollouts use).
    """
    images = np.asarray(images, dtype=np.float64)
    x_star = tokenizer.tokenize(tok, images, tok_cfg)
    context = x_star
    if xi > 0:
        context = corrupt(x_star, CorruptionSpec(xi, ar_cfg.vocab_size), rng)
    with nk.no_grad():
        logp = nk.log_softmax_array(argen.forward_logits(ar, labels, context, ar_cfg).data)
    draws = nk.categorical_sample_rows(np.exp(logp), rng, num=group_size)  # (G,B,N)
    g, b, n = draws.shape
    decoded = tokenizer.decode_array(tok, draws.reshape(g * b, n), tok_cfg)
    ref = np.tile(images, (g, 1, 1, 1))
    return float(reward_batch(decoded, ref, RewardWeights(lambda_p), bank).mean())


def free_running_reward(generated: np.ndarray, gen_labels: np.ndarray, real: np.ndarray,
                        real_labels: np.ndarray, lambda_p: float = 0.5,
                        bank: FrozenFeatureBank | None = None) -> float:
    """Mean over generated images of the best reward against any real image of the same class.

    The reward is separable into pixel and feature squared distances, so all
    pairs of one class come from two ``cdist`` calls.
    """
    bank = bank or default_bank()
    generated = np.asarray(generated, dtype=np.float64)
    real = np.asarray(real, dtype=np.float64)
    best = np.empty(len(generated))
    for lab in np.unique(gen_labels):
        g_idx = np.flatnonzero(gen_labels == lab)
        refs = real[real_labels == lab]
        if len(refs) == 0:
            raise ValueError(f"no real images of class {lab}")
        gp, rp = generated[g_idx].reshape(len(g_idx), -1), refs.reshape(len(refs), -1)
        pix = cdist(gp, rp, "sqeuclidean") / gp.shape[1]
        gf, rf = bank.features(generated[g_idx]), bank.features(refs)
        feat = cdist(gf, rf, "sqeuclidean") / gf.shape[1]
        best[g_idx] = (-(pix + lambda_p * feat)).max(axis=1)
    return float(best.mean())


def class_probe_accuracy(train_x: np.ndarray, train_y: np.ndarray, test_x: np.ndarray,
                         test_y: np.ndarray, num_classes: int = 8,
                         bank: FrozenFeatureBank | None = None, ridge: float = 1e-3) -> float:
    """Ridge-regression one-vs-rest linear probe on pooled frozen features."""
    bank = bank or default_bank()

    def design(x):
        f = bank.pooled(x)
        return np.concatenate([f, np.ones((len(f), 1))], axis=1)

    a = design(train_x)
    targets = np.eye(num_classes)[train_y]
    w = np.linalg.solve(a.T @ a + ridge * np.eye(a.shape[1]), a.T @ targets)
    pred = np.argmax(design(test_x) @ w, axis=1)
    return float(np.mean(pred == test_y))
