"""One post-training step taken apart: corruption, rollout, rewards, advantages, objective.

    python demos/rollout_anatomy.py
"""
import numpy as np

from vapi import argen, tokenizer as tk, vapitrain as vt
from vapi.alignkit import CorruptionSpec, corrupt, group_advantages
from vapi.argen import TINY_AR
from vapi.numkernel import AdamW, SeededRng
from vapi.synthdata import DatasetSpec, downsample, make_dataset, stack_images
from vapi.tokenizer import TINY_TOKENIZER as TOK


def main():
    k = 32
    x = SeededRng(0).integers(0, k, 100_000)
    print("corruption kernel, K=32")
    for xi in (0.0, 0.25, 0.5, 0.95, 1.0):
        out = corrupt(x, CorruptionSpec(xi, k), SeededRng(1, int(100 * xi)))
        print(f"  xi={xi:<5} keep rate {np.mean(out == x):.4f} (expected {1 - xi:.4f})")

    r = np.array([-0.30, -0.12, -0.25, -0.05, -0.12, -0.40, -0.22, -0.18])
    print("\nrewards   ", r)
    print("advantages", group_advantages(r).round(3))
    print("constant group ->", group_advantages(np.full(8, -0.2)))

    imgs, labels = stack_images(make_dataset(DatasetSpec(2, 0)))
    imgs = downsample(imgs, 8)
    tok = tk.init_tokenizer(TOK, SeededRng(0, 1))
    tk.init_codebook_from_data(tok, imgs, TOK, SeededRng(0, 2))
    ar = argen.init_ar(TINY_AR, SeededRng(0, 3))
    cfg = vt.VapiConfig(group_size=8, xi=0.5, beta=0.1)

    before = argen.FORWARD_PASSES
    g = vt.rollout_batch(ar, tok, imgs[:1], labels[:1], cfg, TINY_AR, TOK, SeededRng(4))
    print(f"\nrollout: {argen.FORWARD_PASSES - before} AR forward pass for a group of {cfg.group_size}")
    print("clean tokens ", g.gt_tokens[0])
    print("noisy context", g.noisy_tokens[0])
    for i in range(4):
        print(f"  sample {i}: {g.samples[0, i]}  reward {g.rewards[0, i]:+.4f}  advantage {g.advantages[0, i]:+.3f}")

    stats = {}
    obj = vt.vapi_objective(ar, g, cfg, TINY_AR, stats)
    print(f"\nobjective {obj.item():+.5f} = surrogate {stats['surrogate']:+.1e} "
          f"- beta * prior {cfg.beta} * {stats['prior_loss']:.4f}  (on-policy: ratios are all 1)")

    st = vt.TrainState(optimizer=AdamW(lr=2e-2), seed=0, stream=1)
    fast = vt.VapiConfig(lr=2e-2, beta=0.0)
    rewards = [vt.vapi_step(st, ar, tok, imgs[:4], labels[:4], fast, TINY_AR, TOK)["mean_reward"] for _ in range(60)]
    print(f"\n60 steps on a fixed batch: mean reward {np.mean(rewards[:10]):.4f} -> {np.mean(rewards[-10:]):.4f}")


if __name__ == "__main__":
    main()
