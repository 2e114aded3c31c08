"""VA-pi post-training of the AR generator, plus the STE and decoder post-training baselines.

A VA-pi step, per reference image:

1. ``x* = Q(E(I))`` with the frozen tokenizer;
2. ``x~* ~ K_xi(. | x*)``, one corrupted context;
3. one teacher-forced pass on ``x~*``; G sequences are drawn position-wise
   from its softmax rows and decoded;
4. rewards ``-(MSE + lambda_p * L_p)`` against ``I``, group-normalized;
5. ascend ``clipped surrogate - beta * L_prior(x*, x~*)``, where the prior
   term is next-token cross-entropy of the clean tokens under the corrupted
   context (the same logits as the surrogate).

No reference model is kept: the old policy enters only through the stored
per-token log-probabilities.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import argen, tokenizer
from . import numkernel as nk
from .alignkit import (CorruptionSpec, FrozenFeatureBank, RewardWeights, corrupt, default_bank,
                       group_advantages, reward_groups)
from .argen import ArConfig
from .numkernel import AdamW, ParamStore, SeededRng, Tensor
from .tokenizer import TokenizerConfig

# counts full AR parameter copies made for old-policy snapshots
SNAPSHOT_ALLOCATIONS = 0


@dataclass(frozen=True)
class VapiConfig:
    group_size: int = 8
    beta: float = 0.1
    clip_eps: float = 0.2
    xi: float = 0.5
    lr: float = 1e-4
    steps: int = 200
    batch_size: int = 16
    max_adv_clip: float = 5.0
    inner_epochs: int = 1
    max_grad_norm: float = 1.0
    weight_decay: float = 1e-4
    lambda_p: float = 0.5
    ratio_granularity: str = "token"
    sample_temperature: float = 1.0
    ste_temperature: float = 1.0
    reward_target: str = "reference"

    def __post_init__(self):
        if self.group_size < 2:
            raise ValueError("group_size must be >= 2")
        if not 0.0 < self.clip_eps < 1.0:
            raise ValueError("clip_eps must lie in (0, 1)")
        if self.beta < 0:
            raise ValueError("beta must be >= 0")
        if not 0.0 <= self.xi <= 1.0:
            raise ValueError("xi must lie in [0, 1]")
        if self.inner_epochs < 1:
            raise ValueError("inner_epochs must be >= 1")
        if self.ratio_granularity not in ("token", "sequence"):
            raise ValueError("ratio_granularity must be 'token' or 'sequence'")
        if self.reward_target not in ("reference", "noisy-decode"):
            raise ValueError("reward_target must be 'reference' or 'noisy-decode'")


@dataclass
class RolloutGroup:
    """G teacher-forced samples for one reference image (or a batch of such groups).

    Array fields carry a leading batch axis when built by :func:`rollout_batch`.
    """
    reference: np.ndarray          # (1,S,S) or (B,1,S,S)
    label: np.ndarray              # () or (B,)
    gt_tokens: np.ndarray          # (N,) or (B,N)
    noisy_tokens: np.ndarray       # (N,) or (B,N)
    samples: np.ndarray            # (G,N) or (B,G,N)
    old_logprobs: np.ndarray       # (G,N) or (B,G,N)
    rewards: np.ndarray            # (G,) or (B,G)
    advantages: np.ndarray         # (G,) or (B,G)
    logits: Tensor | None = None   # rollout logits with their graph, when kept for the first update

    @property
    def batched(self) -> bool:
        return self.samples.ndim == 3


@dataclass
class TrainState:
    step: int = 0
    optimizer: AdamW | None = None
    seed: int = 0
    stream: int = 0
    metrics: list[dict] = field(default_factory=list)

    def step_rng(self) -> SeededRng:
        return SeededRng(self.seed, nk.mix64(self.stream, self.step))


def _sample_rows(logp: np.ndarray, group_size: int, temperature: float, rng: SeededRng) -> np.ndarray:
    """(B,N,K) log-probs -> (B,G,N) draws, independent across positions and samples."""
    if temperature == 0:
        best = np.argmax(logp, axis=-1)
        return np.repeat(best[:, None, :], group_size, axis=1)
    if temperature != 1.0:
        logp = nk.log_softmax_array(logp / temperature)
    draws = nk.categorical_sample_rows(np.exp(logp), rng, num=group_size)  # (G,B,N)
    return draws.transpose(1, 0, 2)


def rollout_batch(ar: ParamStore, tok: ParamStore, images: np.ndarray, labels: np.ndarray,
                  cfg: VapiConfig, ar_cfg: ArConfig, tok_cfg: TokenizerConfig, rng: SeededRng,
                  bank: FrozenFeatureBank | None = None, keep_graph: bool = False) -> RolloutGroup:
    """Build B rollout groups with a single teacher-forced AR pass over the batch.

    With ``keep_graph`` the pass is recorded for autodiff and its logits are
    returned on the group, so the first update at ``theta = theta_old`` can
    reuse them instead of running the network again.
    """
    images = np.asarray(images, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    b, g = images.shape[0], cfg.group_size
    x_star = tokenizer.tokenize(tok, images, tok_cfg)
    x_tilde = corrupt(x_star, CorruptionSpec(cfg.xi, ar_cfg.vocab_size), rng)
    if keep_graph:
        kept = argen.teacher_forced_dist(ar, labels, x_tilde, ar_cfg)
    else:
        with nk.no_grad():
            kept = argen.teacher_forced_dist(ar, labels, x_tilde, ar_cfg)
    logits = kept.data
    if not np.all(np.isfinite(logits)):
        raise FloatingPointError("non-finite logits")
    logp = nk.log_softmax_array(logits)
    samples = _sample_rows(logp, g, cfg.sample_temperature, rng)
    old_lp = np.take_along_axis(logp[:, None], samples[..., None], axis=-1)[..., 0]
    decoded = tokenizer.decode_array(tok, samples.reshape(b * g, -1), tok_cfg)
    if cfg.reward_target == "reference":
        target = images
    else:
        target = tokenizer.decode_array(tok, x_tilde, tok_cfg)
    decoded = decoded.reshape((b, g) + decoded.shape[1:])
    rewards = reward_groups(decoded, target, RewardWeights(cfg.lambda_p), bank)
    adv = group_advantages(rewards, cfg.max_adv_clip)
    return RolloutGroup(reference=images, label=labels, gt_tokens=x_star, noisy_tokens=x_tilde,
                        samples=samples, old_logprobs=old_lp, rewards=rewards, advantages=adv,
                        logits=kept if keep_graph else None)


def rollout_group(ar: ParamStore, tok: ParamStore, sample, cfg: VapiConfig, ar_cfg: ArConfig,
                  tok_cfg: TokenizerConfig, rng: SeededRng,
                  bank: FrozenFeatureBank | None = None) -> RolloutGroup:
    """Single-image form of :func:`rollout_batch` (unbatched fields)."""
    batch = rollout_batch(ar, tok, sample.image[None], np.array([sample.label.id]), cfg, ar_cfg,
                          tok_cfg, rng, bank)
    return RolloutGroup(*(getattr(batch, f)[0] for f in
                          ("reference", "label", "gt_tokens", "noisy_tokens", "samples",
                           "old_logprobs", "rewards", "advantages")))


def _batched(group: RolloutGroup) -> RolloutGroup:
    if group.batched:
        return group
    return RolloutGroup(*(np.asarray(getattr(group, f))[None] for f in
                          ("reference", "label", "gt_tokens", "noisy_tokens", "samples",
                           "old_logprobs", "rewards", "advantages")))


def prior_loss(ar: ParamStore, labels, x_star, x_tilde, ar_cfg: ArConfig) -> Tensor:
    """Cross-entropy of the clean tokens ``x*`` under the corrupted context ``x~*``."""
    logits = argen.teacher_forced_dist(ar, labels, x_tilde, ar_cfg)
    return nk.cross_entropy_seq(logits, x_star)


def _gather_samples(logp: Tensor, samples: np.ndarray, k: int) -> Tensor:
    """(B,N,K) log-probs and (B,G,N) samples -> (B,G,N) picked log-probs."""
    onehot = np.eye(k)[samples]
    b, n = logp.shape[0], logp.shape[1]
    return (logp.reshape(b, 1, n, k) * onehot).sum(axis=-1)


def vapi_objective(ar: ParamStore, group: RolloutGroup, cfg: VapiConfig, ar_cfg: ArConfig,
                   stats: dict | None = None, logits: Tensor | None = None) -> Tensor:
    """Clipped surrogate minus ``beta * L_prior``; to be maximized.

    With ``ratio_granularity='token'`` each token carries its own ratio and
    the sample's advantage is broadcast over positions; ``'sequence'`` uses
    one ratio per sample.
    """
    grp = _batched(group)
    if logits is None:
        logits = argen.teacher_forced_dist(ar, grp.label, grp.noisy_tokens, ar_cfg)
    elif logits.ndim == 2:
        logits = logits.reshape(1, *logits.shape)
    logp = nk.log_softmax(logits)
    new_lp = _gather_samples(logp, grp.samples, ar_cfg.vocab_size)
    adv = grp.advantages
    lo, hi = 1.0 - cfg.clip_eps, 1.0 + cfg.clip_eps
    if cfg.ratio_granularity == "token":
        ratio = (new_lp - grp.old_logprobs).exp()
        a = adv[..., None]
    else:
        ratio = (new_lp - grp.old_logprobs).sum(axis=-1).exp()
        a = adv
    surr = nk.minimum(ratio * a, ratio.clip(lo, hi) * a).mean()
    picked = nk.take_along_last(logp, grp.gt_tokens)
    prior = -picked.mean()
    objective = surr - prior * cfg.beta
    if stats is not None:
        r = ratio.data
        stats["surrogate"] = float(surr.data)
        stats["prior_loss"] = float(prior.data)
        stats["clip_frac"] = float(np.mean((r < lo) | (r > hi)))
        stats["mean_ratio"] = float(np.mean(r))
    return objective


def vapi_step(state: TrainState, ar: ParamStore, tok: ParamStore, images: np.ndarray,
              labels: np.ndarray, cfg: VapiConfig, ar_cfg: ArConfig, tok_cfg: TokenizerConfig,
              bank: FrozenFeatureBank | None = None) -> dict:
    """Rollouts for the batch, then ``inner_epochs`` clipped ascent steps on the AR parameters."""
    global SNAPSHOT_ALLOCATIONS
    bank = bank or default_bank()
    rng = state.step_rng()
    passes_before = argen.FORWARD_PASSES
    ar.zero_grad()
    group = rollout_batch(ar, tok, images, labels, cfg, ar_cfg, tok_cfg, rng, bank, keep_graph=True)
    rollout_passes = argen.FORWARD_PASSES - passes_before
    snapshot = None
    if cfg.inner_epochs > 1:
        snapshot = ar.copy()
        SNAPSHOT_ALLOCATIONS += 1
    stats: dict = {}
    for epoch in range(cfg.inner_epochs):
        if epoch > 0:
            ar.zero_grad()
        # epoch 0 runs at theta = theta_old, so the rollout's recorded pass is the same computation
        objective = vapi_objective(ar, group, cfg, ar_cfg, stats, logits=group.logits if epoch == 0 else None)
        if not np.isfinite(objective.data):
            raise FloatingPointError("diverged")
        (-objective).backward()
        grads = ar.grads()
        grad_norm = nk.clip_grad_norm(grads, cfg.max_grad_norm)
        state.optimizer.step(ar, grads)
    metrics = {
        "step": state.step,
        "objective": float(objective.data),
        "mean_reward": float(group.rewards.mean()),
        "mean_abs_adv": float(np.abs(group.advantages).mean()),
        "grad_norm": grad_norm,
        "rollout_passes": rollout_passes,
        "step_passes": argen.FORWARD_PASSES - passes_before,
        **stats,
    }
    if snapshot is not None:
        with nk.no_grad():
            old = nk.log_softmax_array(argen.forward_logits(snapshot, group.label, group.noisy_tokens, ar_cfg).data)
            new = nk.log_softmax_array(argen.forward_logits(ar, group.label, group.noisy_tokens, ar_cfg).data)
        metrics["kl_to_old"] = float(np.mean((np.exp(old) * (old - new)).sum(-1)))
    state.step += 1
    return metrics


def ste_loss(ar: ParamStore, tok: ParamStore, images: np.ndarray, labels: np.ndarray, cfg: VapiConfig,
             ar_cfg: ArConfig, tok_cfg: TokenizerConfig, bank: FrozenFeatureBank | None = None,
             x_star: np.ndarray | None = None) -> tuple[Tensor, dict]:
    """Straight-through reconstruction loss: hard argmax tokens forward, softmax gradient backward."""
    images = np.asarray(images, dtype=np.float64)
    if x_star is None:
        x_star = tokenizer.tokenize(tok, images, tok_cfg)
    logits = argen.teacher_forced_dist(ar, labels, x_star, ar_cfg)
    y_soft = nk._softmax_op(logits, cfg.ste_temperature)
    hard_idx = nk.frozen(np.argmax(logits.data, axis=-1))
    y_hard = np.eye(ar_cfg.vocab_size)[hard_idx]
    y_st = nk.straight_through(y_hard, y_soft)
    ftok = tok.frozen()
    zq = y_st @ ftok["tok/codebook"]
    decoded = tokenizer.decode_latents(ftok, zq, tok_cfg)
    loss, mse, lp = tokenizer.reconstruction_loss(decoded, images, cfg.lambda_p, bank)
    return loss, {"mse": float(mse.data), "perceptual": float(lp.data), "decoded": decoded.data,
                  "hard_tokens": hard_idx}


def ste_finetune_step(state: TrainState, ar: ParamStore, tok: ParamStore, images: np.ndarray,
                      labels: np.ndarray, cfg: VapiConfig, ar_cfg: ArConfig, tok_cfg: TokenizerConfig,
                      bank: FrozenFeatureBank | None = None) -> dict:
    ar.zero_grad()
    loss, comps = ste_loss(ar, tok, images, labels, cfg, ar_cfg, tok_cfg, bank)
    if not np.isfinite(loss.data):
        raise FloatingPointError("diverged")
    loss.backward()
    grads = ar.grads()
    grad_norm = nk.clip_grad_norm(grads, cfg.max_grad_norm)
    state.optimizer.step(ar, grads)
    metrics = {"step": state.step, "loss": float(loss.data), "mse": comps["mse"],
               "perceptual": comps["perceptual"], "grad_norm": grad_norm}
    state.step += 1
    return metrics


DECODER_PREFIX = "tok/dec/"


def posttrain_loss(tok: ParamStore, tokens: np.ndarray, images: np.ndarray, lambda_p: float,
                   tok_cfg: TokenizerConfig, bank: FrozenFeatureBank | None = None) -> tuple[Tensor, Tensor]:
    """L_PT on given tokens with everything but the decoder frozen; returns (loss, mse)."""
    view = tok.frozen(prefixes=("tok/enc/", "tok/codebook"), share=True)
    decoded = tokenizer.decode_latents(view, Tensor(tok["tok/codebook"].data[tokens]), tok_cfg)
    loss, mse, _ = tokenizer.reconstruction_loss(decoded, images, lambda_p, bank)
    return loss, mse


def tokenizer_posttrain_step(state: TrainState, ar: ParamStore, tok: ParamStore, images: np.ndarray,
                             labels: np.ndarray, cfg: VapiConfig, ar_cfg: ArConfig,
                             tok_cfg: TokenizerConfig, bank: FrozenFeatureBank | None = None) -> dict:
    """Decode teacher-forced AR samples and fit only the decoder to the reference images."""
    rng = state.step_rng()
    images = np.asarray(images, dtype=np.float64)
    x_star = tokenizer.tokenize(tok, images, tok_cfg)
    with nk.no_grad():
        logp = nk.log_softmax_array(argen.teacher_forced_dist(ar, labels, x_star, ar_cfg).data)
    tokens = _sample_rows(logp, 1, cfg.sample_temperature, rng)[:, 0]
    tok.zero_grad()
    loss, mse = posttrain_loss(tok, tokens, images, cfg.lambda_p, tok_cfg, bank)
    if not np.isfinite(loss.data):
        raise FloatingPointError("diverged")
    loss.backward()
    grads = tok.grads()
    grad_norm = nk.clip_grad_norm(grads, cfg.max_grad_norm)
    state.optimizer.step(tok, grads, only=(DECODER_PREFIX,))
    metrics = {"step": state.step, "loss": float(loss.data), "mse": float(mse.data), "grad_norm": grad_norm}
    state.step += 1
    return metrics
