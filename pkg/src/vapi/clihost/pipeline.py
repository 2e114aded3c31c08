"""Stage runners: data, tokenizer pretraining, AR pretraining, post-training, evaluation.

Each training stage writes ``ckpt/<tag>-<step>.vapi`` every ``checkpoint_every``
steps and ``ckpt/<tag>.vapi`` when done. With ``resume=True`` a stage restarts
from its newest checkpoint; the result is bitwise identical to an
uninterrupted run because every piece of mutable state (parameters, AdamW
moments, RNG streams, step counters) is in the checkpoint.
"""
from __future__ import annotations

import dataclasses
import json
import re
import time
from pathlib import Path

import numpy as np

from .. import argen, evalsuite, synthdata, tokenizer, vapitrain
from ..alignkit import default_bank
from ..numkernel import AdamW, ParamStore, SeededRng, mix64, no_grad
from . import checkpoint as ck
from .config import RunConfig, dump_config
from .metrics import MetricLog

STAGES = ("tok-pretrain", "ar-pretrain", "posttrain")
STREAM_TOK, STREAM_AR, STREAM_POST, STREAM_POST_BATCH = 101, 202, 303, 304


class MissingPrerequisite(RuntimeError):
    pass


def stage_tag(stage: str, method: str | None = None) -> str:
    if stage not in STAGES:
        raise ValueError(f"unknown stage {stage!r}; expected one of {STAGES}")
    return f"posttrain-{method}" if stage == "posttrain" else stage


class RunDir:
    def __init__(self, cfg: RunConfig, root: str | Path | None = None):
        self.cfg = cfg
        self.root = Path(root if root is not None else cfg.out)

    @property
    def train_data(self) -> Path:
        return self.root / "data" / "train.vapd"

    @property
    def heldout_data(self) -> Path:
        return self.root / "data" / "heldout.vapd"

    def final_ckpt(self, tag: str) -> Path:
        return self.root / "ckpt" / f"{tag}.vapi"

    def step_ckpt(self, tag: str, step: int) -> Path:
        return self.root / "ckpt" / f"{tag}-{step:06d}.vapi"

    def step_ckpts(self, tag: str) -> list[tuple[int, Path]]:
        pat = re.compile(rf"^{re.escape(tag)}-(\d{{6}})\.vapi$")
        found = []
        for p in (self.root / "ckpt").glob(f"{tag}-*.vapi"):
            m = pat.match(p.name)
            if m:
                found.append((int(m.group(1)), p))
        return sorted(found)

    def eval_path(self, tag: str) -> Path:
        return self.root / "eval" / f"{tag}.json"


# -- data -------------------------------------------------------------------------------

def gen_data(cfg: RunConfig, root: str | Path | None = None) -> tuple[Path, Path]:
    rd = RunDir(cfg, root)
    d = cfg.data
    # files always hold 16x16 renders; smaller model sizes are block-averaged on load
    train = synthdata.make_dataset(synthdata.DatasetSpec(d.num_samples_per_class, d.base_seed))
    held = synthdata.make_dataset(synthdata.DatasetSpec(d.heldout_per_class, d.heldout_seed))
    synthdata.write_vapd(rd.train_data, train)
    synthdata.write_vapd(rd.heldout_data, held)
    (rd.root / "config.ini").write_text(dump_config(cfg))
    return rd.train_data, rd.heldout_data


def load_data(rd: RunDir, which: str = "train") -> tuple[np.ndarray, np.ndarray]:
    path = rd.train_data if which == "train" else rd.heldout_data
    if not path.exists():
        raise MissingPrerequisite(f"missing prerequisite stage 'gen-data' (no {path})")
    x, y = synthdata.stack_images(synthdata.read_vapd(path))
    if rd.cfg.data.image_size != x.shape[-1]:
        x = synthdata.downsample(x, rd.cfg.data.image_size)
    return x, y


# -- checkpoint helpers ------------------------------------------------------------------------

def _pack(stage: str, step: int, cfg_hash: str, params: ParamStore, opt: AdamW | None,
          rngs: dict[str, SeededRng], extra: dict[str, np.ndarray] | None = None,
          ints: dict[str, int] | None = None) -> ck.Checkpoint:
    tensors = dict(params.arrays())
    if opt is not None:
        tensors.update({f"opt/{k}": v for k, v in opt.state_arrays().items()})
    for k, v in (extra or {}).items():
        tensors[f"state/{k}"] = v
    all_ints = {"opt/t": opt.t if opt is not None else 0, **(ints or {})}
    return ck.Checkpoint(stage, step, cfg_hash, tensors, all_ints,
                         {k: r.get_state() for k, r in rngs.items()})


def _params_from(ckpt: ck.Checkpoint, prefixes: tuple[str, ...]) -> ParamStore:
    return ParamStore({k: v.copy() for k, v in ckpt.tensors.items() if k.startswith(prefixes)})


def _restore_opt(opt: AdamW, ckpt: ck.Checkpoint) -> None:
    arrays = {k[4:]: v for k, v in ckpt.tensors.items() if k.startswith("opt/")}
    opt.load_state_arrays(arrays, ckpt.ints["opt/t"])


def _require(rd: RunDir, tag: str, stage_name: str) -> ck.Checkpoint:
    path = rd.final_ckpt(tag)
    if not path.exists():
        raise MissingPrerequisite(f"missing prerequisite stage '{stage_name}' (no {path})")
    return ck.load(path, expect_stage=tag)


def _resume_point(rd: RunDir, tag: str, cfg_hash: str, resume: bool) -> ck.Checkpoint | None:
    """Newest checkpoint of ``tag`` when resuming; otherwise clear old intermediates."""
    if not resume:
        for _, p in rd.step_ckpts(tag):
            p.unlink()
        if rd.final_ckpt(tag).exists():
            rd.final_ckpt(tag).unlink()
        return None
    if rd.final_ckpt(tag).exists():
        return ck.load(rd.final_ckpt(tag), expect_hash=cfg_hash, expect_stage=tag)
    steps = rd.step_ckpts(tag)
    if not steps:
        return None
    return ck.load(steps[-1][1], expect_hash=cfg_hash, expect_stage=tag)


class _Timer:
    def __init__(self):
        self.t = time.perf_counter()

    def lap_ms(self) -> float:
        now = time.perf_counter()
        dt, self.t = (now - self.t) * 1000.0, now
        return dt


# -- tokenizer pretraining ---------------------------------------------------------------------------

def train_tokenizer_stage(cfg: RunConfig, root=None, resume: bool = False,
                          stop_after: int | None = None) -> ck.Checkpoint:
    rd, tag = RunDir(cfg, root), "tok-pretrain"
    X, _ = load_data(rd)
    tcfg, st = cfg.tokenizer_config(), cfg.tokenizer
    h = cfg.training_hash("tokenizer")
    bank = default_bank()
    log = MetricLog(rd.root, tag)
    start = _resume_point(rd, tag, h, resume)
    rng = SeededRng(cfg.seed, STREAM_TOK)
    opt = AdamW(st.lr)
    if start is None:
        params = tokenizer.init_tokenizer(tcfg, rng)
        tokenizer.init_codebook_from_data(params, X, tcfg, rng)
        step = 0
        log.reset(0)
    else:
        params = _params_from(start, ("tok/",))
        _restore_opt(opt, start)
        rng.set_state(start.rng_states["batch"])
        step = start.step
        log.reset(step + 1)
    timer = _Timer()
    end = st.steps if stop_after is None else min(st.steps, stop_after)
    while step < end:
        idx = rng.integers(0, len(X), st.batch_size)
        m = tokenizer.train_tokenizer_step(params, X[idx], opt, tcfg, bank)
        if step % st.reseed_every == 0:
            toks = tokenizer.tokenize(params, X, tcfg)
            counts = np.bincount(toks.ravel(), minlength=tcfg.codebook_size)
            rec = tokenizer.decode_array(params, toks, tcfg)
            m["train_psnr"] = evalsuite.recon_psnr(X, rec)
            m["dataset_usage"] = int((counts > 0).sum())
            if step < st.reseed_until:
                m["reseeded"] = tokenizer.reseed_dead_codes(params, X[idx], counts, tcfg, rng)
        step += 1
        log.log(step, m, timer.lap_ms())
        if step % st.checkpoint_every == 0 or step == st.steps:
            ckpt = _pack(tag, step, h, params, opt, {"batch": rng})
            ck.save(ckpt, rd.final_ckpt(tag) if step == st.steps else rd.step_ckpt(tag, step))
    return _pack(tag, step, h, params, opt, {"batch": rng})


# -- AR pretraining ---------------------------------------------------------------------------------

def train_ar_stage(cfg: RunConfig, root=None, resume: bool = False,
                   stop_after: int | None = None) -> ck.Checkpoint:
    rd, tag = RunDir(cfg, root), "ar-pretrain"
    X, y = load_data(rd)
    tok_ck = _require(rd, "tok-pretrain", "tok-pretrain")
    tok = _params_from(tok_ck, ("tok/",))
    tcfg, acfg, st = cfg.tokenizer_config(), cfg.ar_config(), cfg.ar
    tokens = tokenizer.tokenize(tok, X, tcfg)
    h = cfg.training_hash("ar")
    log = MetricLog(rd.root, tag)
    start = _resume_point(rd, tag, h, resume)
    rng = SeededRng(cfg.seed, STREAM_AR)
    opt = AdamW(st.lr)
    if start is None:
        ar = argen.init_ar(acfg, rng)
        step = 0
        log.reset(0)
    else:
        ar = _params_from(start, ("ar/",))
        _restore_opt(opt, start)
        rng.set_state(start.rng_states["batch"])
        step = start.step
        log.reset(step + 1)
    timer = _Timer()
    end = st.steps if stop_after is None else min(st.steps, stop_after)
    while step < end:
        idx = rng.integers(0, len(tokens), st.batch_size)
        m = argen.pretrain_step(ar, y[idx], tokens[idx], opt, acfg, st.max_grad_norm)
        step += 1
        if step % st.checkpoint_every == 0 or step == st.steps:
            m["train_nll"] = _full_nll(ar, y, tokens, acfg)
        log.log(step, m, timer.lap_ms())
        if step % st.checkpoint_every == 0 or step == st.steps:
            ckpt = _pack(tag, step, h, ParamStore({**tok.arrays(), **ar.arrays()}), opt, {"batch": rng})
            ck.save(ckpt, rd.final_ckpt(tag) if step == st.steps else rd.step_ckpt(tag, step))
    return _pack(tag, step, h, ParamStore({**tok.arrays(), **ar.arrays()}), opt, {"batch": rng})


def _full_nll(ar: ParamStore, labels: np.ndarray, tokens: np.ndarray, acfg) -> float:
    with no_grad():
        return float(argen.nll(ar, labels, tokens, acfg).data)


# -- post-training --------------------------------------------------------------------------------------

_POST_STEPS = {
    "vapi": vapitrain.vapi_step,
    "ste": vapitrain.ste_finetune_step,
    "tok-pt": vapitrain.tokenizer_posttrain_step,
}


def train_posttrain_stage(cfg: RunConfig, root=None, resume: bool = False,
                          stop_after: int | None = None, method: str | None = None) -> ck.Checkpoint:
    method = method or cfg.posttrain.method
    if method not in _POST_STEPS:
        raise ValueError(f"unknown post-training method {method!r}")
    if method != cfg.posttrain.method:
        cfg = cfg.with_overrides(posttrain=dataclasses.replace(cfg.posttrain, method=method))
    rd, tag = RunDir(cfg, root), stage_tag("posttrain", method)
    X, y = load_data(rd)
    base = _require(rd, "ar-pretrain", "ar-pretrain")
    tcfg, acfg, vcfg, st = cfg.tokenizer_config(), cfg.ar_config(), cfg.vapi_config(), cfg.posttrain
    h = cfg.training_hash("posttrain")
    bank = default_bank()
    log = MetricLog(rd.root, tag)
    start = _resume_point(rd, tag, h, resume)
    batch_rng = SeededRng(cfg.seed, STREAM_POST_BATCH)
    state = vapitrain.TrainState(optimizer=AdamW(st.lr), seed=cfg.seed, stream=STREAM_POST)
    src = base if start is None else start
    tok = _params_from(src, ("tok/",))
    ar = _params_from(src, ("ar/",))
    if start is None:
        log.reset(0)
    else:
        _restore_opt(state.optimizer, start)
        batch_rng.set_state(start.rng_states["batch"])
        state.step = start.step
        log.reset(start.step + 1)
    step_fn = _POST_STEPS[method]
    timer = _Timer()
    end = st.steps if stop_after is None else min(st.steps, stop_after)
    while state.step < end:
        idx = batch_rng.integers(0, len(X), st.batch_size)
        m = step_fn(state, ar, tok, X[idx], y[idx], vcfg, acfg, tcfg, bank)
        m.pop("step", None)
        log.log(state.step, m, timer.lap_ms())
        step = state.step
        if step % st.checkpoint_every == 0 or step == st.steps:
            ckpt = _pack(tag, step, h, ParamStore({**tok.arrays(), **ar.arrays()}), state.optimizer,
                         {"batch": batch_rng})
            ck.save(ckpt, rd.final_ckpt(tag) if step == st.steps else rd.step_ckpt(tag, step))
    return _pack(tag, state.step, h, ParamStore({**tok.arrays(), **ar.arrays()}), state.optimizer,
                 {"batch": batch_rng})


def run_stage(cfg: RunConfig, stage: str, method: str | None = None, root=None, resume: bool = False,
              stop_after: int | None = None) -> ck.Checkpoint:
    if stage == "tok-pretrain":
        return train_tokenizer_stage(cfg, root, resume, stop_after)
    if stage == "ar-pretrain":
        return train_ar_stage(cfg, root, resume, stop_after)
    if stage == "posttrain":
        return train_posttrain_stage(cfg, root, resume, stop_after, method)
    raise ValueError(f"unknown stage {stage!r}; expected one of {STAGES}")


# -- evaluation ------------------------------------------------------------------------------------------

def evaluate_checkpoint(cfg: RunConfig, ckpt_path: str | Path, root=None) -> dict:
    """All report metrics for one checkpoint; deterministic given (config, checkpoint)."""
    rd = RunDir(cfg, root)
    ckpt = ck.load(ckpt_path)
    if ckpt.stage.startswith("posttrain-"):
        method = ckpt.stage[len("posttrain-"):]
        cfg = cfg.with_overrides(posttrain=dataclasses.replace(cfg.posttrain, method=method))
        expected = cfg.training_hash("posttrain")
    else:
        expected = cfg.training_hash({"tok-pretrain": "tokenizer", "ar-pretrain": "ar"}[ckpt.stage])
    if ckpt.config_hash != expected:
        raise ck.CheckpointError("config hash mismatch: checkpoint was written under a different config")
    if not any(k.startswith("ar/") for k in ckpt.tensors):
        raise ValueError("checkpoint has no AR parameters; evaluate ar-pretrain or a post-training stage")
    tok = _params_from(ckpt, ("tok/",))
    ar = _params_from(ckpt, ("ar/",))
    X, y = load_data(rd, "train")
    HX, Hy = load_data(rd, "heldout")
    tcfg, acfg, ev = cfg.tokenizer_config(), cfg.ar_config(), cfg.eval
    want_exact = ev.exact_elbo == "true" or (ev.exact_elbo == "auto" and cfg.enumerable())
    if ev.exact_elbo == "true" and not cfg.enumerable():
        raise ValueError("not enumerable: exact ELBO requested but codebook_size**num_tokens > 1e6")
    bank = default_bank()

    def rng(i: int) -> SeededRng:
        return SeededRng(cfg.seed, mix64(ev.seed_stream, i))

    tokens = tokenizer.tokenize(tok, X, tcfg)
    recon = tokenizer.decode_array(tok, tokens, tcfg)
    gen_labels = np.repeat(np.arange(8), ev.generated_per_class)
    gen_tokens = argen.sample_free_running(ar, gen_labels, ev.temperature, rng(2), acfg)
    gen = tokenizer.decode_array(tok, gen_tokens, tcfg)
    report = {
        "stage": ckpt.stage,
        "step": ckpt.step,
        "train_psnr": evalsuite.recon_psnr(X, recon),
        "codebook_usage": evalsuite.codebook_usage(tok, X, tcfg),
        "train_nll": _full_nll(ar, y, tokens, acfg),
        "toy_fid": evalsuite.toy_fid(HX, gen, bank),
        "toy_fid_recon_floor": evalsuite.toy_fid(HX, tokenizer.decode_array(
            tok, tokenizer.tokenize(tok, HX, tcfg), tcfg), bank),
        "tf_reward": evalsuite.teacher_forced_reward(ar, tok, X, y, ev.reward_group_size, rng(1), acfg, tcfg,
                                                     cfg.posttrain.lambda_p, bank, xi=ev.reward_xi),
        "tf_reward_clean": evalsuite.teacher_forced_reward(ar, tok, X, y, ev.reward_group_size, rng(4), acfg,
                                                           tcfg, cfg.posttrain.lambda_p, bank, xi=0.0),
        "fr_reward": evalsuite.free_running_reward(gen, gen_labels, HX, Hy, cfg.posttrain.lambda_p, bank),
        "exposure_bias": evalsuite.exposure_bias_estimate(ar, tok, X, y, ev.exposure_mc, rng(3), acfg, tcfg),
        "class_probe_acc": evalsuite.class_probe_accuracy(X, y, gen, gen_labels, bank=bank),
    }
    pick = np.linspace(0, len(X) - 1, ev.elbo_images).round().astype(int)
    samples = [synthdata.ImageSample(X[i], synthdata.ClassLabel(int(y[i])), 0) for i in pick]
    elbos = [evalsuite.elbo_estimate(ar, tok, samples[j], ev.sigma, ev.elbo_mc, rng(10 + j), acfg, tcfg,
                                     with_oracle=want_exact) for j, i in enumerate(pick)]
    report["elbo_recon"] = float(np.mean([e.recon for e in elbos]))
    report["elbo_kl"] = float(np.mean([e.kl for e in elbos]))
    report["elbo"] = float(np.mean([e.elbo for e in elbos]))
    if want_exact:
        report["log_marginal"] = float(np.mean([e.log_marginal for e in elbos]))
        report["elbo_slack_min"] = float(min(e.slack for e in elbos))
    return report


def eval_stage(cfg: RunConfig, stage: str | None = None, method: str | None = None, root=None,
               ckpt_path: str | Path | None = None) -> dict:
    rd = RunDir(cfg, root)
    if ckpt_path is None:
        stage = stage or "posttrain"
        tag = stage_tag(stage, method or cfg.posttrain.method)
        ckpt_path = rd.final_ckpt(tag)
        if not ckpt_path.exists():
            raise MissingPrerequisite(f"missing prerequisite stage '{tag}' (no {ckpt_path})")
    else:
        tag = ck.load(ckpt_path).stage
    report = evaluate_checkpoint(cfg, ckpt_path, rd.root)
    out = rd.eval_path(tag)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    out.with_suffix(".txt").write_text(format_eval(tag, report))
    return report


def format_eval(tag: str, report: dict) -> str:
    width = max(len(k) for k in report)
    lines = [f"evaluation: {tag}"]
    for k in sorted(report):
        v = report[k]
        lines.append(f"  {k:<{width}}  {v:.6g}" if isinstance(v, float) else f"  {k:<{width}}  {v}")
    return "\n".join(lines) + "\n"


def run_all(cfg: RunConfig, root=None, methods: tuple[str, ...] = ("vapi",), evaluate: bool = True) -> dict:
    """gen-data, both pretraining stages, each post-training method, then eval of base and each method."""
    gen_data(cfg, root)
    train_tokenizer_stage(cfg, root)
    train_ar_stage(cfg, root)
    reports = {}
    if evaluate:
        reports["ar-pretrain"] = eval_stage(cfg, "ar-pretrain", root=root)
    for m in methods:
        train_posttrain_stage(cfg, root, method=m)
        if evaluate:
            reports[stage_tag("posttrain", m)] = eval_stage(cfg, "posttrain", m, root=root)
    return reports
