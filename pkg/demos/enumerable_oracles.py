"""Walk through the exact identities on a model small enough to enumerate.

With N=4 tokens over K=6 codes there are 1296 sequences, so the pixel-space
log marginal, the ELBO and every KL can be computed by brute force and
compared with the Monte-Carlo estimators used at full scale.

    python demos/enumerable_oracles.py
"""
import numpy as np

from vapi import argen, evalsuite as ev, tokenizer as tk
from vapi.argen import TINY_AR
from vapi.numkernel import SeededRng
from vapi.synthdata import ClassLabel, DatasetSpec, ImageSample, downsample, make_dataset, stack_images
from vapi.tokenizer import TINY_TOKENIZER as TOK


def main():
    x, y = stack_images(make_dataset(DatasetSpec(2, 0)))
    x = downsample(x, 8)
    tok = tk.init_tokenizer(TOK, SeededRng(0, 1))
    tk.init_codebook_from_data(tok, x, TOK, SeededRng(0, 2))
    ar = argen.init_ar(TINY_AR, SeededRng(0, 3), scale=2.0)

    print("image  label  log p(I)     exact ELBO   MC ELBO (64)  slack")
    for i in (0, 5, 9, 14):
        s = ImageSample(x[i], ClassLabel(int(y[i])), i)
        exact = ev.exact_elbo(ar, tok, s, 0.1, TINY_AR, TOK)
        mc = ev.elbo_estimate(ar, tok, s, 0.1, 64, SeededRng(i), TINY_AR, TOK)
        print(f"{i:5d}  {s.label.name:>10}  {exact.log_marginal:10.3f}  {exact.elbo:10.3f}  "
              f"{mc.elbo:12.3f}  {exact.slack:6.3f}")

    # the gap between the bound and log p(I) is KL(q || posterior), so it never goes negative;
    # a context-independent prior makes teacher forcing and free running coincide
    ci = argen.context_independent(ar, TINY_AR)
    s = ImageSample(x[0], ClassLabel(int(y[0])), 0)
    print("\ncontext-independent prior: KL term", ev.elbo_estimate(ci, tok, s, 0.1, 8, SeededRng(1), TINY_AR, TOK).kl)

    print("\nKL chain rule on model pairs (joint vs summed per-step KLs):")
    for pair in range(3):
        p = argen.init_ar(TINY_AR, SeededRng(10 + pair, 1), scale=2.0)
        q = argen.init_ar(TINY_AR, SeededRng(10 + pair, 2), scale=2.0)
        joint, chained, diff = ev.kl_chain_check(ev.ar_model_law(p, 0, TINY_AR), ev.ar_model_law(q, 0, TINY_AR),
                                                 TINY_AR.seq_len, TINY_AR.vocab_size)
        print(f"  pair {pair}: {joint:.12f} vs {chained:.12f}  |diff| {diff:.1e}")

    est, se = ev.exposure_bias_estimate(ar, tok, x[:16], y[:16], 64, SeededRng(3), TINY_AR, TOK,
                                        return_stderr=True)
    print(f"\nexposure bias (nats/token, 64 prefix draws): {est:.4f} +- {se:.4f}")


if __name__ == "__main__":
    main()
