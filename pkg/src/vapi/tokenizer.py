"""Patch-wise VQ tokenizer: encode -> nearest-codebook quantize -> decode.

Each 4x4 patch is mapped independently through a one-hidden-layer MLP to a
C-dimensional latent; the decoder mirrors it and ends in a sigmoid so pixels
stay in [0, 1].
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numkernel as nk
from .alignkit import FrozenFeatureBank, default_bank, perceptual_loss
from .numkernel import AdamW, ParamStore, SeededRng, Tensor


@dataclass(frozen=True)
class TokenizerConfig:
    image_size: int = 16
    patch: int = 4
    codebook_size: int = 32
    latent_dim: int = 8
    hidden: int = 32
    lambda_p: float = 0.5
    lambda_q: float = 1.0
    beta_commit: float = 0.25

    @property
    def grid(self) -> int:
        return self.image_size // self.patch

    @property
    def num_tokens(self) -> int:
        return self.grid * self.grid

    @property
    def patch_pixels(self) -> int:
        return self.patch * self.patch


TINY_TOKENIZER = TokenizerConfig(image_size=8, patch=4, codebook_size=6, latent_dim=4, hidden=8)


def init_tokenizer(cfg: TokenizerConfig, rng: SeededRng) -> ParamStore:
    p, h, c, k = cfg.patch_pixels, cfg.hidden, cfg.latent_dim, cfg.codebook_size
    return ParamStore({
        "tok/codebook": rng.normal((k, c)),
        "tok/dec/b1": np.zeros(h),
        "tok/dec/b2": np.zeros(p),
        "tok/dec/w1": rng.normal((c, h)) / np.sqrt(c),
        "tok/dec/w2": rng.normal((h, p)) / np.sqrt(h),
        "tok/enc/b1": np.zeros(h),
        "tok/enc/b2": np.zeros(c),
        "tok/enc/w1": rng.normal((p, h)) / np.sqrt(p),
        "tok/enc/w2": rng.normal((h, c)) / np.sqrt(h),
    })


def patchify(images: np.ndarray, cfg: TokenizerConfig) -> np.ndarray:
    """(B, 1, S, S) -> (B, N, P*P) in raster patch order."""
    images = np.asarray(images, dtype=np.float64)
    s, p, g = cfg.image_size, cfg.patch, cfg.grid
    if images.shape[1:] != (1, s, s):
        raise ValueError("shape mismatch")
    b = images.shape[0]
    return images.reshape(b, g, p, g, p).transpose(0, 1, 3, 2, 4).reshape(b, g * g, p * p)


def unpatchify(patches: Tensor, cfg: TokenizerConfig) -> Tensor:
    g, p = cfg.grid, cfg.patch
    b = patches.shape[0]
    return patches.reshape(b, g, g, p, p).transpose(0, 1, 3, 2, 4).reshape(b, 1, g * p, g * p)


def _as_batch(images: np.ndarray) -> tuple[np.ndarray, bool]:
    images = np.asarray(images, dtype=np.float64)
    if images.ndim == 3:
        return images[None], True
    return images, False


def encode(params: ParamStore, images, cfg: TokenizerConfig) -> Tensor:
    """Images (1,S,S) or (B,1,S,S) -> latents (N,C) or (B,N,C)."""
    images, single = _as_batch(images)
    x = Tensor(patchify(images, cfg))
    hdn = (x @ params["tok/enc/w1"] + params["tok/enc/b1"]).tanh()
    z = hdn @ params["tok/enc/w2"] + params["tok/enc/b2"]
    return z[0] if single else z


def nearest_code(z: np.ndarray, codebook: np.ndarray) -> np.ndarray:
    """Index of the closest codebook row under squared distance; ties go to the lowest index."""
    z = np.asarray(z, dtype=np.float64)
    d = ((z[..., None, :] - codebook) ** 2).sum(axis=-1)
    return np.argmin(d, axis=-1)


def quantize(params: ParamStore, z) -> tuple[np.ndarray, np.ndarray]:
    """Token indices and the selected codebook rows (the quantized latent grid)."""
    zd = z.data if isinstance(z, Tensor) else np.asarray(z, dtype=np.float64)
    codebook = params["tok/codebook"].data
    idx = nearest_code(zd, codebook)
    return idx, codebook[idx]


def tokenize(params: ParamStore, images, cfg: TokenizerConfig) -> np.ndarray:
    with nk.no_grad():
        z = encode(params, images, cfg)
    return quantize(params, z)[0]


def decode_latents(params: ParamStore, e: Tensor, cfg: TokenizerConfig) -> Tensor:
    """(B, N, C) quantized latents -> (B, 1, S, S) images."""
    hdn = (e @ params["tok/dec/w1"] + params["tok/dec/b1"]).tanh()
    out = (hdn @ params["tok/dec/w2"] + params["tok/dec/b2"]).sigmoid()
    return unpatchify(out, cfg)


def decode(params: ParamStore, tokens, cfg: TokenizerConfig) -> Tensor:
    """Tokens (N,) or (B, N) -> images (1,S,S) or (B,1,S,S)."""
    tokens = np.asarray(tokens, dtype=np.int64)
    single = tokens.ndim == 1
    if single:
        tokens = tokens[None]
    e = nk.embedding(params["tok/codebook"], tokens)
    img = decode_latents(params, e, cfg)
    return img[0] if single else img


def decode_array(params: ParamStore, tokens, cfg: TokenizerConfig) -> np.ndarray:
    with nk.no_grad():
        return decode(params, tokens, cfg).data


def reconstruction_loss(decoded: Tensor, reference: np.ndarray, lambda_p: float,
                        bank: FrozenFeatureBank | None = None) -> tuple[Tensor, Tensor, Tensor]:
    """(total, mse, perceptual) with mse averaged over pixels and batch."""
    diff = decoded - Tensor(reference)
    mse = (diff * diff).mean()
    lp = perceptual_loss(decoded, reference, bank)
    return mse + lp * lambda_p, mse, lp


def tokenizer_loss(params: ParamStore, images, cfg: TokenizerConfig,
                   bank: FrozenFeatureBank | None = None) -> tuple[Tensor, dict]:
    """L_MSE + lambda_p L_p + lambda_q L_q with VQ stop-gradient structure.

    The codebook term ``||sg[z] - e||^2`` moves only embeddings, the
    commitment term ``||z - sg[e]||^2`` moves only the encoder, and the
    decoder sees ``e`` in the forward pass with gradients copied onto ``z``.
    """
    images, _ = _as_batch(images)
    z = encode(params, images, cfg)
    idx = nk.frozen(nearest_code(z.data, params["tok/codebook"].data))
    e = nk.embedding(params["tok/codebook"], idx)
    codebook_term = ((nk.stop_gradient(z) - e) ** 2).sum(axis=-1).mean()
    commit_term = ((z - nk.stop_gradient(e)) ** 2).sum(axis=-1).mean()
    lq = codebook_term + commit_term * cfg.beta_commit
    zq = nk.straight_through(e.data, z)
    decoded = decode_latents(params, zq, cfg)
    rec, mse, lp = reconstruction_loss(decoded, images, cfg.lambda_p, bank)
    total = rec + lq * cfg.lambda_q
    comps = {"mse": float(mse.data), "perceptual": float(lp.data), "quant": float(lq.data),
             "codebook": float(codebook_term.data), "commit": float(commit_term.data), "indices": idx}
    return total, comps


def init_codebook_from_data(params: ParamStore, images: np.ndarray, cfg: TokenizerConfig,
                            rng: SeededRng) -> None:
    """Seed codebook rows with encoder outputs of randomly chosen training patches."""
    with nk.no_grad():
        z = encode(params, images, cfg).data.reshape(-1, cfg.latent_dim)
    pick = rng.generator.choice(z.shape[0], size=cfg.codebook_size, replace=z.shape[0] < cfg.codebook_size)
    params["tok/codebook"] = z[np.sort(pick)] + 1e-3 * rng.normal((cfg.codebook_size, cfg.latent_dim))


def train_tokenizer_step(params: ParamStore, images: np.ndarray, opt: AdamW, cfg: TokenizerConfig,
                         bank: FrozenFeatureBank | None = None) -> dict:
    """One AdamW step on the tokenizer loss; returns per-component metrics and codebook usage."""
    if len(images) == 0:
        raise ValueError("empty batch")
    params.zero_grad()
    loss, comps = tokenizer_loss(params, images, cfg, bank or default_bank())
    if not np.isfinite(loss.data):
        raise FloatingPointError("diverged")
    loss.backward()
    opt.step(params, params.grads())
    idx = comps.pop("indices")
    comps["loss"] = float(loss.data)
    comps["usage"] = int(np.unique(idx).size)
    return comps


def reseed_dead_codes(params: ParamStore, images: np.ndarray, usage_counts: np.ndarray,
                      cfg: TokenizerConfig, rng: SeededRng) -> int:
    """Move never-selected codebook rows onto random encoder outputs; returns how many moved."""
    dead = np.flatnonzero(usage_counts == 0)
    if dead.size == 0:
        return 0
    with nk.no_grad():
        z = encode(params, images, cfg).data.reshape(-1, cfg.latent_dim)
    pick = rng.generator.choice(z.shape[0], size=dead.size, replace=z.shape[0] < dead.size)
    cb = params["tok/codebook"].data.copy()
    cb[dead] = z[pick]
    params["tok/codebook"] = cb
    return int(dead.size)
