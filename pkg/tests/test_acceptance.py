"""Acceptance suite: one or more tests per numbered criterion.

Each test records a PASS/FAIL line through ``record``; the terminal summary
hook in conftest prints them grouped by criterion. The end-to-end criteria
(8 and 10) share two full default-config runs, built once per session.
"""
import json
import shutil
import time
from pathlib import Path

import numpy as np
import pytest

from vapi import argen, tokenizer as tk, vapitrain as vt
from vapi import evalsuite as ev
from vapi import numkernel as nk
from vapi.alignkit import CorruptionSpec, corrupt, group_advantages
from vapi.argen import TINY_AR
from vapi.clihost import cli
from vapi.clihost.config import RunConfig
from vapi.clihost.metrics import read_records
from vapi.numkernel import SeededRng, Tensor
from vapi.synthdata import DatasetSpec, ImageSample, ClassLabel, downsample, make_dataset, stack_images
from vapi.tokenizer import TINY_TOKENIZER as TOK

RESULTS: dict[str, list[tuple[str, bool, str]]] = {}


def record(crit: str, name: str, ok: bool, detail: str) -> None:
    RESULTS.setdefault(crit, []).append((name, bool(ok), detail))


@pytest.fixture(scope="module")
def tiny_images():
    x, y = stack_images(make_dataset(DatasetSpec(2, 0)))
    return downsample(x, 8), y


def _tiny_models(seed, data=None):
    tok = tk.init_tokenizer(TOK, SeededRng(seed, 1))
    if data is not None:
        tk.init_codebook_from_data(tok, data, TOK, SeededRng(seed, 2))
    ar = argen.init_ar(TINY_AR, SeededRng(seed, 3), scale=2.0)
    return tok, ar


# -- 1. ELBO oracle -----------------------------------------------------------------------------

def test_c1_elbo_below_exact_log_marginal(tiny_images):
    x, y = tiny_images
    t0 = time.perf_counter()
    worst = np.inf
    for draw in range(20):
        tok, ar = _tiny_models(1000 + draw)
        pick = SeededRng(draw, 9).integers(0, len(x), 5)
        for j, i in enumerate(pick):
            s = ImageSample(x[i], ClassLabel(int(y[i])), int(i))
            rep = ev.elbo_estimate(ar, tok, s, 0.1, 16, SeededRng(draw, j), TINY_AR, TOK, with_oracle=True)
            worst = min(worst, rep.slack)
    dt = time.perf_counter() - t0
    ok = worst >= -1e-9 and dt < 60
    record("1", "elbo <= exact log marginal", ok, f"min slack {worst:.3e}, {dt:.1f}s")
    assert worst >= -1e-9
    assert dt < 60


# -- 2. KL chain rule -------------------------------------------------------------------------------

def test_c2_kl_chain_rule_on_model_pairs():
    worst = 0.0
    for pair in range(20):
        label = pair % TINY_AR.num_classes
        p = argen.init_ar(TINY_AR, SeededRng(2000 + pair, 1), scale=2.0)
        q = argen.init_ar(TINY_AR, SeededRng(2000 + pair, 2), scale=2.0)
        _, _, diff = ev.kl_chain_check(ev.ar_model_law(p, label, TINY_AR), ev.ar_model_law(q, label, TINY_AR),
                                       TINY_AR.seq_len, TINY_AR.vocab_size)
        worst = max(worst, diff)
    record("2", "|joint KL - chained KL|", worst < 1e-10, f"max diff {worst:.3e}")
    assert worst < 1e-10


# -- 3. corruption kernel -----------------------------------------------------------------------------

@pytest.mark.parametrize("xi", [0.0, 0.25, 0.5, 0.95, 1.0])
def test_c3_corruption_kernel_rates(xi):
    k, n = 32, 100_000
    x = SeededRng(3, 1).integers(0, k, n)
    out = corrupt(x, CorruptionSpec(xi, k), SeededRng(3, int(xi * 100) + 2))
    keep = float(np.mean(out == x))
    ok_keep = abs(keep - (1 - xi)) <= 0.01
    # frequency of each replacement offset (K-1 wrong tokens per position)
    off = (out - x) % k
    counts = np.bincount(off[off != 0], minlength=k)[1:]
    p = xi / (k - 1)
    sd = np.sqrt(n * p * (1 - p))
    dev = np.abs(counts - n * p)
    ok_wrong = bool(np.all(dev <= 3 * sd + 1e-12))
    record("3", f"xi={xi}", ok_keep and ok_wrong,
           f"keep {keep:.4f}, max wrong-token dev {dev.max():.1f} (3 sigma {3 * sd:.1f})")
    assert ok_keep and ok_wrong


# -- 4. gradient checks ---------------------------------------------------------------------------------

_GC_START: list[float] = []


def _gc_setup(tiny_images):
    x, y = tiny_images
    tok, ar = _tiny_models(7, x)
    return tok, ar, x[:3], y[:3]


@pytest.mark.parametrize("which", ["tokenizer", "ar_nll", "prior", "ste", "vapi"])
def test_c4_grad_checks(tiny_images, which):
    if not _GC_START:
        _GC_START.append(time.perf_counter())
    tok, ar, x, y = _gc_setup(tiny_images)
    if which == "tokenizer":
        err = nk.grad_check(lambda ps: tk.tokenizer_loss(ps, x[:1], TOK)[0], tok)
    elif which == "ar_nll":
        seqs = tk.tokenize(tok, x, TOK)
        err = nk.grad_check(lambda ps: argen.nll(ps, y, seqs, TINY_AR), ar)
    elif which == "prior":
        xs = tk.tokenize(tok, x, TOK)
        noisy = corrupt(xs, CorruptionSpec(0.5, TINY_AR.vocab_size), SeededRng(4))
        err = nk.grad_check(lambda ps: vt.prior_loss(ps, y[0], xs[0], noisy[0], TINY_AR), ar)
    elif which == "ste":
        cfg = vt.VapiConfig()
        err = nk.grad_check(lambda ps: vt.ste_loss(ps, tok, x, y, cfg, TINY_AR, TOK)[0], ar)
    else:
        cfg = vt.VapiConfig(beta=0.3)
        g = vt.rollout_batch(ar, tok, x, y, cfg, TINY_AR, TOK, SeededRng(9))
        g.old_logprobs = g.old_logprobs + 0.01 * SeededRng(1).normal(g.old_logprobs.shape)
        err = nk.grad_check(lambda ps: vt.vapi_objective(ps, g, cfg, TINY_AR), ar)
    total = time.perf_counter() - _GC_START[0]
    ok = err < 1e-4 and total < 120
    record("4", which, ok, f"max rel err {err:.2e}, cumulative {total:.1f}s")
    assert err < 1e-4
    assert total < 120


# -- 5. advantage normalization ------------------------------------------------------------------------

def test_c5_advantage_normalization():
    rng = SeededRng(5, 0)
    worst_mean = worst_std = worst_shift = 0.0
    for i in range(1000):
        r = rng.normal(8) * 10.0 ** rng.uniform(()).item() * 3
        a = group_advantages(r, max_clip=np.inf)
        worst_mean = max(worst_mean, abs(a.mean()))
        worst_std = max(worst_std, abs(a.std() - 1))
        shifted = group_advantages(r + rng.normal(()).item() * 5, max_clip=np.inf)
        worst_shift = max(worst_shift, float(np.max(np.abs(shifted - a))))
    const = group_advantages(np.full((10, 8), 0.37))
    ok = worst_mean < 1e-12 and worst_std < 1e-9 and worst_shift < 1e-12 and np.all(const == 0)
    record("5", "1000 groups, G=8", ok,
           f"|mean| {worst_mean:.1e}, |std-1| {worst_std:.1e}, shift {worst_shift:.1e}, constant -> 0")
    assert worst_mean < 1e-12
    assert worst_std < 1e-9
    assert worst_shift < 1e-12
    assert np.all(const == 0)


# -- 6. on-policy identity -------------------------------------------------------------------------------

def test_c6_on_policy_identity(tiny_images):
    x, y = tiny_images
    worst_s = worst_o = 0.0
    for seed in range(5):
        tok, ar = _tiny_models(60 + seed, x)
        cfg = vt.VapiConfig(beta=0.1)
        g = vt.rollout_batch(ar, tok, x[:4], y[:4], cfg, TINY_AR, TOK, SeededRng(seed))
        stats = {}
        obj = vt.vapi_objective(ar, g, cfg, TINY_AR, stats).item()
        prior = np.mean([vt.prior_loss(ar, g.label[b], g.gt_tokens[b], g.noisy_tokens[b], TINY_AR).item()
                         for b in range(4)])
        worst_s = max(worst_s, abs(stats["surrogate"]))
        worst_o = max(worst_o, abs(obj + cfg.beta * prior))
    ok = worst_s < 1e-10 and worst_o < 1e-10
    record("6", "theta = theta_old", ok, f"|surrogate| {worst_s:.1e}, |obj + beta*prior| {worst_o:.1e}")
    assert ok


# -- 7. STE contracts --------------------------------------------------------------------------------------

def test_c7_ste_contracts(tiny_images):
    x, y = tiny_images
    tok, ar = _tiny_models(70, x)
    _, comps = vt.ste_loss(ar, tok, x[:3], y[:3], vt.VapiConfig(), TINY_AR, TOK)
    fwd_ok = np.array_equal(comps["decoded"], tk.decode_array(tok, comps["hard_tokens"], TOK))

    ref = x[:2]
    logits = Tensor(SeededRng(2).normal((2, 4, 6)), requires_grad=True)
    y_soft = nk._softmax_op(logits, 1.0)
    y_hard = np.eye(6)[np.argmax(logits.data, axis=-1)]
    ftok = tok.frozen()

    def loss_of(yy):
        dec = tk.decode_latents(ftok, yy @ ftok["tok/codebook"], TOK)
        return tk.reconstruction_loss(dec, ref, 0.5)[0]

    loss_of(nk.straight_through(y_hard, y_soft)).backward()
    leaf = Tensor(y_hard, requires_grad=True)
    loss_of(leaf).backward()
    gy = leaf.grad
    expect = (gy - (gy * y_soft.data).sum(-1, keepdims=True)) * y_soft.data
    err = float(np.max(np.abs(logits.grad - expect)))
    record("7", "forward bitwise / backward soft path", fwd_ok and err < 1e-12,
           f"forward equal {fwd_ok}, grad err {err:.1e}")
    assert fwd_ok
    assert err < 1e-12


# -- 9. efficiency contract -----------------------------------------------------------------------------

def test_c9_one_forward_pass_per_group_and_no_snapshot():
    cfg = RunConfig()
    acfg, tcfg = cfg.ar_config(), cfg.tokenizer_config()
    x, y = stack_images(make_dataset(DatasetSpec(1, 0)))
    tok = tk.init_tokenizer(tcfg, SeededRng(0, 1))
    ar = argen.init_ar(acfg, SeededRng(0, 2))
    pcfg = vt.VapiConfig()
    before = argen.FORWARD_PASSES
    vt.rollout_batch(ar, tok, x[:1], y[:1], pcfg, acfg, tcfg, SeededRng(1))
    one = argen.FORWARD_PASSES - before
    snaps = vt.SNAPSHOT_ALLOCATIONS
    st = vt.TrainState(optimizer=nk.AdamW(lr=pcfg.lr), seed=0, stream=1)
    passes = [vt.vapi_step(st, ar, tok, x[:4], y[:4], pcfg, acfg, tcfg)["rollout_passes"] for _ in range(3)]
    no_copy = vt.SNAPSHOT_ALLOCATIONS == snaps
    ok = one == 1 and passes == [1, 1, 1] and no_copy
    record("9", "G=8 rollout, inner-epochs=1", ok,
           f"forward passes per group {one}, per-step rollout passes {passes}, snapshot copies "
           f"{vt.SNAPSHOT_ALLOCATIONS - snaps}")
    assert ok


# -- 8 and 10: end-to-end runs ------------------------------------------------------------------------------

def _run_pipeline(out: Path, methods=("vapi",)) -> float:
    base = ["--out", str(out), "--seed", "0"]
    t0 = time.perf_counter()
    assert cli.main(["gen-data", *base]) == 0
    assert cli.main(["train", *base, "--stage", "tok-pretrain"]) == 0
    assert cli.main(["train", *base, "--stage", "ar-pretrain"]) == 0
    assert cli.main(["eval", *base, "--stage", "ar-pretrain"]) == 0
    for m in methods:
        assert cli.main(["train", *base, "--stage", "posttrain", "--method", m]) == 0
        assert cli.main(["eval", *base, "--stage", "posttrain", "--method", m]) == 0
    return time.perf_counter() - t0


@pytest.fixture(scope="session")
def run_a(tmp_path_factory):
    out = tmp_path_factory.mktemp("accept") / "run_a"
    snaps = vt.SNAPSHOT_ALLOCATIONS
    wall = _run_pipeline(out)
    snapshot_copies = vt.SNAPSHOT_ALLOCATIONS - snaps
    # baselines only for the per-step cost comparison; not part of the timed run
    for m in ("ste", "tok-pt"):
        assert cli.main(["train", "--out", str(out), "--seed", "0", "--stage", "posttrain", "--method", m]) == 0
    ev_base = json.loads((out / "eval" / "ar-pretrain.json").read_text())
    ev_post = json.loads((out / "eval" / "posttrain-vapi.json").read_text())
    return {"out": out, "wall": wall, "base": ev_base, "post": ev_post, "snapshots": snapshot_copies}


@pytest.fixture(scope="session")
def run_b(tmp_path_factory):
    out = tmp_path_factory.mktemp("accept") / "run_b"
    _run_pipeline(out)
    return out


def test_c8_pretraining_targets(run_a):
    psnr, nll = run_a["base"]["train_psnr"], run_a["base"]["train_nll"]
    record("8", "tokenizer PSNR >= 20 dB", psnr >= 20, f"train PSNR {psnr:.2f} dB")
    record("8", "AR mean NLL < 1.5", nll < 1.5, f"train NLL {nll:.4f}")
    assert psnr >= 20
    assert nll < 1.5


def test_c8a_teacher_forced_reward_gap(run_a):
    before, after = run_a["base"]["tf_reward"], run_a["post"]["tf_reward"]
    closed = (after - before) / (0.0 - before)
    record("8", "(a) tf reward gap closed >= 20%", closed >= 0.2,
           f"{before:.5f} -> {after:.5f}, {100 * closed:.1f}% of gap")
    assert closed >= 0.2


def test_c8b_toy_fid_reduction(run_a):
    before, after = run_a["base"]["toy_fid"], run_a["post"]["toy_fid"]
    drop = 1 - after / before
    record("8", "(b) toy-fid reduced >= 10%", drop >= 0.1,
           f"{before:.6f} -> {after:.6f} ({100 * drop:.1f}% lower; tokenizer floor "
           f"{run_a['base']['toy_fid_recon_floor']:.6f})")
    assert drop >= 0.1


def test_c8c_exposure_bias_decreases(run_a):
    before, after = run_a["base"]["exposure_bias"], run_a["post"]["exposure_bias"]
    record("8", "(c) exposure bias decreases", after < before, f"{before:.4f} -> {after:.4f}")
    assert after < before


def test_c8_wall_clock(run_a):
    wall = run_a["wall"]
    record("8", "total wall-clock < 15 min", wall < 900, f"{wall:.0f}s")
    assert wall < 900


def _median_step_ms(out: Path, tag: str) -> float:
    return float(np.median([r["wall_ms"] for r in read_records(out / "timing" / f"{tag}.jsonl")]))


def test_c8_posttrain_cost_sanity(run_a):
    # the VA-pi step is compared with the STE step, which also runs the AR backward;
    # decoder post-training never touches the AR and is reported only
    out = run_a["out"]
    v, s, t = (_median_step_ms(out, f"posttrain-{m}") for m in ("vapi", "ste", "tok-pt"))
    record("8", "vapi step <= 1.5x STE step", v <= 1.5 * s,
           f"median ms/step vapi {v:.1f}, ste {s:.1f} ({v / s:.2f}x), tok-pt {t:.1f} ({v / t:.2f}x)")
    assert v <= 1.5 * s


def test_c9_full_run_single_pass(run_a):
    recs = read_records(run_a["out"] / "metrics" / "posttrain-vapi.jsonl")
    passes = {r["scalars"]["rollout_passes"] for r in recs}
    ok = passes == {1} and run_a["snapshots"] == 0
    record("9", "default run, 200 steps", ok,
           f"rollout passes per step {sorted(passes)}, snapshot copies {run_a['snapshots']}")
    assert ok


# -- 10. reproducibility ---------------------------------------------------------------------------------------

def _artifacts(out: Path) -> list[Path]:
    files = sorted((out / "ckpt").glob("*.vapi")) + sorted((out / "metrics").glob("*.jsonl"))
    return files + sorted((out / "eval").glob("*.json")) + sorted((out / "data").glob("*.vapd"))


def test_c10_identical_runs_bitwise(run_a, run_b):
    a_files = {p.relative_to(run_a["out"]) for p in _artifacts(run_a["out"])}
    b_files = [p.relative_to(run_b) for p in _artifacts(run_b)]
    mismatched = [str(rel) for rel in b_files if (run_a["out"] / rel).read_bytes() != (run_b / rel).read_bytes()]
    ok = not mismatched and set(b_files) <= a_files and len(b_files) > 0
    record("10", "two seeded runs", ok, f"{len(b_files)} files compared, mismatched {mismatched or 'none'}")
    assert ok


def _copy_prereqs(src: Path, dst: Path, tags):
    shutil.copytree(src / "data", dst / "data")
    (dst / "ckpt").mkdir()
    for tag in tags:
        shutil.copy(src / "ckpt" / f"{tag}.vapi", dst / "ckpt")


def test_c10_resume_posttrain_mid_run(run_a, tmp_path):
    src, work = run_a["out"], tmp_path / "resume_vapi"
    _copy_prereqs(src, work, ("tok-pretrain", "ar-pretrain"))
    base = ["--out", str(work), "--seed", "0", "--stage", "posttrain", "--method", "vapi"]
    assert cli.main(["train", *base, "--stop-after", "100"]) == 0
    assert cli.main(["train", *base, "--resume"]) == 0
    same = [(work / d / f).read_bytes() == (src / d / f).read_bytes()
            for d, f in (("ckpt", "posttrain-vapi.vapi"), ("metrics", "posttrain-vapi.jsonl"))]
    record("10", "resume VA-pi at step 100", all(same), f"checkpoint equal {same[0]}, metrics equal {same[1]}")
    assert all(same)


def test_c10_resume_ar_pretrain_after_crash(run_a, tmp_path):
    # simulate a crash shortly after the step-4000 checkpoint: the newest
    # intermediate checkpoint survives and the metric log runs a little past it
    src, work = run_a["out"], tmp_path / "resume_ar"
    _copy_prereqs(src, work, ("tok-pretrain",))
    shutil.copy(src / "ckpt" / "ar-pretrain-004000.vapi", work / "ckpt")
    for d in ("metrics", "timing"):
        (work / d).mkdir()
        lines = (src / d / "ar-pretrain.jsonl").read_text().splitlines(keepends=True)
        (work / d / "ar-pretrain.jsonl").write_text("".join(lines[:4010]))
    assert cli.main(["train", "--out", str(work), "--seed", "0", "--stage", "ar-pretrain", "--resume"]) == 0
    same = [(work / d / f).read_bytes() == (src / d / f).read_bytes()
            for d, f in (("ckpt", "ar-pretrain.vapi"), ("metrics", "ar-pretrain.jsonl"))]
    record("10", "resume AR pretrain from step 4000", all(same),
           f"checkpoint equal {same[0]}, metrics equal {same[1]}")
    assert all(same)
