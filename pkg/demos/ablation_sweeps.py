"""Post-training ablations over the prior weight beta, the context noise xi and the reward mix.

Needs a run directory that already holds data and both pretraining
checkpoints (see demos/pipeline.sh). Every sweep point post-trains from the
same base in its own directory under <run>/sweeps and is evaluated with a
lighter eval budget.

    python demos/ablation_sweeps.py runs/default [--steps 200] [--only beta|xi|reward]
"""
import argparse
import dataclasses
import shutil
from pathlib import Path

from vapi.clihost import pipeline
from vapi.clihost.config import RunConfig, load_config

SWEEPS = {
    "beta": [{"beta": b} for b in (0.0, 0.1, 1.0)],
    "xi": [{"xi": x} for x in (0.0, 0.5, 0.95)],
    # lambda_p = 0 keeps only the pixel MSE in the reward
    "reward": [{"lambda_p": lp} for lp in (0.0, 0.5, 2.0)],
}
KEYS = ("toy_fid", "tf_reward", "exposure_bias", "fr_reward")


def _prepare(base: Path, dest: Path) -> None:
    if dest.exists():
        shutil.rmtree(dest)
    shutil.copytree(base / "data", dest / "data")
    (dest / "ckpt").mkdir()
    for tag in ("tok-pretrain", "ar-pretrain"):
        shutil.copy(base / "ckpt" / f"{tag}.vapi", dest / "ckpt")


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("run")
    ap.add_argument("--config")
    ap.add_argument("--steps", type=int, default=200)
    ap.add_argument("--only", choices=sorted(SWEEPS))
    args = ap.parse_args()
    base = Path(args.run)
    cfg = load_config(args.config) if args.config else RunConfig()
    cfg = cfg.with_overrides(out=str(base),
                             eval=dataclasses.replace(cfg.eval, generated_per_class=64, elbo_images=4))
    if not (base / "ckpt" / "ar-pretrain.vapi").exists():
        raise SystemExit(f"{base} has no ar-pretrain checkpoint; run the pretraining stages first")

    ref = pipeline.evaluate_checkpoint(cfg, base / "ckpt" / "ar-pretrain.vapi", base)
    print(f"{'setting':<16}" + "".join(f"{k:>15}" for k in KEYS))
    print(f"{'base':<16}" + "".join(f"{ref[k]:15.5g}" for k in KEYS))
    for axis, points in SWEEPS.items():
        if args.only and axis != args.only:
            continue
        for over in points:
            name = ",".join(f"{k}={v}" for k, v in over.items())
            dest = base / "sweeps" / f"{axis}-{name}"
            _prepare(base, dest)
            pcfg = cfg.with_overrides(out=str(dest), posttrain=dataclasses.replace(
                cfg.posttrain, method="vapi", steps=args.steps, **over))
            ckpt = pipeline.train_posttrain_stage(pcfg)
            rep = pipeline.evaluate_checkpoint(pcfg, dest / "ckpt" / "posttrain-vapi.vapi")
            assert ckpt.step == args.steps
            print(f"{name:<16}" + "".join(f"{rep[k]:15.5g}" for k in KEYS))


if __name__ == "__main__":
    main()
