"""Run configuration: an INI-style key/value file validated against typed stage schemas.

Every key has a default, so an empty file is a valid config. Unknown sections
or keys are rejected before anything runs.
"""
from __future__ import annotations

import configparser
import dataclasses
import hashlib
import json
from dataclasses import dataclass, field, fields
from pathlib import Path

from ..argen import ArConfig
from ..tokenizer import TokenizerConfig
from ..vapitrain import VapiConfig

POSTTRAIN_METHODS = ("vapi", "ste", "tok-pt")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DataStage:
    num_samples_per_class: int = 100
    base_seed: int = 0
    image_size: int = 16
    heldout_per_class: int = 128
    heldout_seed: int = 12345


@dataclass(frozen=True)
class TokenizerStage:
    steps: int = 2000
    lr: float = 1e-3
    batch_size: int = 32
    patch: int = 4
    codebook_size: int = 32
    latent_dim: int = 8
    hidden: int = 32
    lambda_p: float = 0.5
    lambda_q: float = 1.0
    beta_commit: float = 0.25
    reseed_every: int = 250
    reseed_until: int = 1500
    checkpoint_every: int = 500


@dataclass(frozen=True)
class ArStage:
    steps: int = 5000
    lr: float = 1e-3
    batch_size: int = 32
    d_model: int = 32
    num_layers: int = 2
    num_heads: int = 2
    ff_mult: int = 4
    max_grad_norm: float = 1.0
    checkpoint_every: int = 1000


@dataclass(frozen=True)
class PosttrainStage:
    method: str = "vapi"
    steps: int = 200
    lr: float = 1e-4
    batch_size: int = 16
    group_size: int = 8
    beta: float = 0.1
    clip_eps: float = 0.2
    xi: float = 0.5
    max_adv_clip: float = 5.0
    inner_epochs: int = 1
    max_grad_norm: float = 1.0
    lambda_p: float = 0.5
    ratio_granularity: str = "token"
    sample_temperature: float = 1.0
    ste_temperature: float = 1.0
    reward_target: str = "reference"
    checkpoint_every: int = 50


@dataclass(frozen=True)
class EvalStage:
    generated_per_class: int = 128
    temperature: float = 1.0
    reward_group_size: int = 8
    reward_xi: float = 0.5
    exposure_mc: int = 4
    elbo_images: int = 16
    elbo_mc: int = 32
    sigma: float = 0.1
    exact_elbo: str = "auto"
    seed_stream: int = 7


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    out: str = "runs/default"
    data: DataStage = field(default_factory=DataStage)
    tokenizer: TokenizerStage = field(default_factory=TokenizerStage)
    ar: ArStage = field(default_factory=ArStage)
    posttrain: PosttrainStage = field(default_factory=PosttrainStage)
    eval: EvalStage = field(default_factory=EvalStage)

    # -- derived model configs --------------------------------------------------------

    def tokenizer_config(self) -> TokenizerConfig:
        t = self.tokenizer
        return TokenizerConfig(image_size=self.data.image_size, patch=t.patch, codebook_size=t.codebook_size,
                               latent_dim=t.latent_dim, hidden=t.hidden, lambda_p=t.lambda_p,
                               lambda_q=t.lambda_q, beta_commit=t.beta_commit)

    def ar_config(self) -> ArConfig:
        a = self.ar
        return ArConfig(vocab_size=self.tokenizer.codebook_size, num_classes=8,
                        seq_len=self.tokenizer_config().num_tokens, d_model=a.d_model,
                        num_layers=a.num_layers, num_heads=a.num_heads, ff_mult=a.ff_mult)

    def vapi_config(self) -> VapiConfig:
        p = self.posttrain
        return VapiConfig(group_size=p.group_size, beta=p.beta, clip_eps=p.clip_eps, xi=p.xi, lr=p.lr,
                          steps=p.steps, batch_size=p.batch_size, max_adv_clip=p.max_adv_clip,
                          inner_epochs=p.inner_epochs, max_grad_norm=p.max_grad_norm,
                          lambda_p=p.lambda_p, ratio_granularity=p.ratio_granularity,
                          sample_temperature=p.sample_temperature, ste_temperature=p.ste_temperature,
                          reward_target=p.reward_target)

    def enumerable(self) -> bool:
        return self.tokenizer.codebook_size ** self.tokenizer_config().num_tokens <= 10**6

    def training_hash(self, upto: str = "posttrain") -> str:
        """SHA-256 over the seed and the training sections up to and including ``upto``."""
        order = ("data", "tokenizer", "ar", "posttrain")
        payload = {"seed": self.seed}
        for name in order[: order.index(upto) + 1]:
            payload[name] = dataclasses.asdict(getattr(self, name))
        blob = json.dumps(payload, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    def with_overrides(self, **kw) -> "RunConfig":
        return dataclasses.replace(self, **kw)


SECTIONS = {"data": DataStage, "tokenizer": TokenizerStage, "ar": ArStage,
            "posttrain": PosttrainStage, "eval": EvalStage}
RUN_KEYS = {"seed": int, "out": str}


def _coerce(section: str, key: str, raw: str, typ):
    try:
        if typ is int:
            return int(raw, 0)
        if typ is float:
            return float(raw)
        return raw.strip()
    except ValueError:
        raise ConfigError(f"[{section}] {key}: cannot parse {raw!r} as {typ.__name__}") from None


def _field_types(cls) -> dict:
    return {f.name: {"int": int, "float": float, "str": str}[f.type] for f in fields(cls)}


def validate(cfg: RunConfig) -> RunConfig:
    """Range checks; model-config constructors raise their own errors too."""
    d, t, a, p, e = cfg.data, cfg.tokenizer, cfg.ar, cfg.posttrain, cfg.eval
    checks = [
        (d.num_samples_per_class >= 1, "data.num_samples_per_class must be >= 1"),
        (d.heldout_per_class >= 1, "data.heldout_per_class must be >= 1"),
        (d.image_size % t.patch == 0, "data.image_size must be a multiple of tokenizer.patch"),
        (d.image_size >= 1 and 16 % d.image_size == 0, "data.image_size must divide 16"),
        (t.steps >= 0 and a.steps >= 0 and p.steps >= 0, "steps must be >= 0"),
        (min(t.batch_size, a.batch_size, p.batch_size) >= 1, "batch sizes must be >= 1"),
        (min(t.lr, a.lr, p.lr) >= 0, "learning rates must be >= 0"),
        (t.codebook_size >= 1, "tokenizer.codebook_size must be >= 1"),
        (min(t.checkpoint_every, a.checkpoint_every, p.checkpoint_every) >= 1, "checkpoint_every must be >= 1"),
        (t.reseed_every >= 1, "tokenizer.reseed_every must be >= 1"),
        (a.d_model % a.num_heads == 0, "ar.d_model must be divisible by ar.num_heads"),
        (p.method in POSTTRAIN_METHODS, f"posttrain.method must be one of {POSTTRAIN_METHODS}"),
        (e.exact_elbo in ("auto", "true", "false"), "eval.exact_elbo must be auto, true or false"),
        (e.sigma > 0, "eval.sigma must be > 0"),
        (e.generated_per_class * 8 >= 64, "eval.generated_per_class too small for toy_fid"),
        (d.heldout_per_class * 8 >= 64, "data.heldout_per_class too small for toy_fid"),
        (e.temperature >= 0, "eval.temperature must be >= 0"),
        (0.0 <= e.reward_xi <= 1.0, "eval.reward_xi must lie in [0, 1]"),
        (min(e.exposure_mc, e.elbo_mc, e.elbo_images) >= 1, "eval Monte-Carlo counts must be >= 1"),
        (e.reward_group_size >= 1, "eval.reward_group_size must be >= 1"),
    ]
    for ok, msg in checks:
        if not ok:
            raise ConfigError(msg)
    try:
        cfg.tokenizer_config()
        cfg.ar_config()
        cfg.vapi_config()
    except ValueError as err:
        raise ConfigError(str(err)) from None
    return cfg


def parse_config(text: str) -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None, default_section="__none__")
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as err:
        raise ConfigError(f"malformed config: {err}") from None
    run_kw: dict = {}
    stages: dict = {}
    for section in parser.sections():
        items = dict(parser.items(section))
        if section == "run":
            for key, raw in items.items():
                if key not in RUN_KEYS:
                    raise ConfigError(f"unknown key [run] {key}")
                run_kw[key] = _coerce(section, key, raw, RUN_KEYS[key])
            continue
        if section not in SECTIONS:
            raise ConfigError(f"unknown section [{section}]")
        types = _field_types(SECTIONS[section])
        kw = {}
        for key, raw in items.items():
            if key not in types:
                raise ConfigError(f"unknown key [{section}] {key}")
            kw[key] = _coerce(section, key, raw, types[key])
        stages[section] = SECTIONS[section](**kw)
    return validate(RunConfig(**run_kw, **stages))


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return validate(RunConfig())
    return parse_config(Path(path).read_text())


def dump_config(cfg: RunConfig) -> str:
    """Canonical text form; ``parse_config(dump_config(c)) == c``."""
    lines = ["[run]", f"seed = {cfg.seed}", f"out = {cfg.out}", ""]
    for name in SECTIONS:
        lines.append(f"[{name}]")
        for key, value in dataclasses.asdict(getattr(cfg, name)).items():
            lines.append(f"{key} = {value!r}" if isinstance(value, float) else f"{key} = {value}")
        lines.append("")
    return "\n".join(lines)
