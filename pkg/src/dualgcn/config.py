"""Run configuration: full-size defaults plus a desk-scale ``toy`` profile."""
from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import yaml

from .metrics import parse_metric_spec
from .model import DECODERS, ENCODER_MODES, ModelConfig


class ConfigError(ValueError):
    pass


ABLATION_ROWS = (
    "F_obj+Transformer", "GCN_obj+Transformer", "F_obj+Transformer+CL", "GCN_obj+Transformer+CL",
    "F_img+Transformer+CL", "GCN_img+Transformer+CL", "GCN_obj&F_img+Transformer+CL",
    "GCN_img&F_obj+Transformer+CL", "Dual-GCN+Transformer", "Dual-GCN+LSTM+CL", "Dual-GCN+Transformer+CL",
)
_DECODER_NAMES = {"Transformer": "transformer", "Trans": "transformer", "LSTM": "recurrent"}


@dataclass(frozen=True)
class AblationVariant:
    """One ablation row. The ``LSTM`` rows run the gated recurrent decoder."""

    encoder_mode: str
    decoder: str
    curriculum: bool

    @property
    def label(self) -> str:
        dec = "Transformer" if self.decoder == "transformer" else "LSTM"
        return f"{self.encoder_mode}+{dec}" + ("+CL" if self.curriculum else "")

    @classmethod
    def parse(cls, label: str) -> "AblationVariant":
        parts = [p.strip() for p in label.replace(" ", "").split("+")]
        cl = parts[-1] == "CL"
        if cl:
            parts = parts[:-1]
        if len(parts) != 2 or parts[1] not in _DECODER_NAMES:
            raise ConfigError(f"cannot parse ablation variant {label!r}")
        v = cls(parts[0], _DECODER_NAMES[parts[1]], cl)
        if v.label not in ABLATION_ROWS:
            raise ConfigError(f"{label!r} is not an ablation row; choose from {list(ABLATION_ROWS)}")
        return v

    def apply(self, cfg: "RunConfig") -> "RunConfig":
        return replace(cfg, encoder_mode=self.encoder_mode, decoder=self.decoder, curriculum=self.curriculum)


# equal_epochs: steps proportional to stage size; equal_steps: the same number of updates per stage
STAGE_BUDGETS = ("equal_epochs", "equal_steps")

DEFAULT_VARIANTS = ("Dual-GCN+Transformer+CL", "GCN_obj+Transformer+CL", "F_obj+Transformer+CL",
                    "Dual-GCN+Transformer")


@dataclass
class RunConfig:
    # architecture (full-size defaults)
    d_g: int = 512
    d_model: int = 512
    d_embed: int = 1000
    n_layers: int = 6
    n_heads: int = 8
    max_regions: int = 36
    feature_dim: int = 2048
    K: int = 6
    encoder_mode: str = "Dual-GCN"
    decoder: str = "transformer"
    self_loop: bool = True
    iou_threshold: float = 0.5
    dist_threshold: float = 0.5
    dropout: float = 0.0
    # curriculum
    curriculum: bool = True
    M: int = 8
    metric: str = "mean(bleu1,bleu4)"
    schedule_mode: str = "literal"
    stage_budget: str = "equal_epochs"
    # optimisation; ``epochs`` is the budget in passes over the training split
    seed: int = 0
    epochs: float = 10.0
    shard_epochs: float = 10.0
    batch_size: int = 32
    lr: float = 3e-4
    warmup_frac: float = 0.05
    clip_norm: float = 1.0
    eval_every_epoch: bool = True
    # decoding
    max_len: int = 20
    beam: int = 1
    length_alpha: float = 0.0
    # synthetic corpus
    n_train: int = 2000
    n_val: int = 200
    n_test: int = 200
    noise: float = 0.1
    contexts: list[str] = field(default_factory=list)
    context_strength: float = 1.0
    n_groups: int = 0
    context_visibility: float = 1.0
    data_seed: int = 0
    # experiments
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2])
    variants: list[str] = field(default_factory=lambda: list(DEFAULT_VARIANTS))
    halt_after_steps: int = 0
    # execution
    workers: int = 1
    out_dir: str = "runs/default"
    data_dir: str = ""

    def model_config(self) -> ModelConfig:
        names = {f.name for f in fields(ModelConfig)}
        return ModelConfig(**{k: v for k, v in asdict(self).items() if k in names})

    def to_dict(self) -> dict:
        return asdict(self)

    def replace(self, **kw) -> "RunConfig":
        return replace(self, **kw)


PROFILES: dict[str, dict] = {
    "full": {},
    "toy": dict(d_g=32, d_model=64, d_embed=64, n_layers=2, n_heads=2, max_regions=6, feature_dim=64,
                lr=1e-3, epochs=12.0, shard_epochs=12.0, batch_size=32, dist_threshold=0.25, max_len=16,
                contexts=["in a park", "on a table", "at the beach", "in the snow"], n_groups=200,
                context_visibility=0.3),
}


def validate(cfg: RunConfig) -> RunConfig:
    def bad(name, why):
        raise ConfigError(f"invalid config field {name!r}: {why}")

    for name in ("d_g", "d_model", "d_embed", "n_layers", "n_heads", "max_regions", "feature_dim", "K",
                 "batch_size", "max_len", "beam", "workers"):
        if getattr(cfg, name) < 1:
            bad(name, "must be >= 1")
    if cfg.d_model % cfg.n_heads:
        bad("n_heads", f"must divide d_model={cfg.d_model}")
    if cfg.encoder_mode not in ENCODER_MODES:
        bad("encoder_mode", f"choose from {sorted(ENCODER_MODES)}")
    if cfg.decoder not in DECODERS:
        bad("decoder", f"choose from {DECODERS}")
    if cfg.schedule_mode not in ("literal", "cumulative"):
        bad("schedule_mode", "choose literal or cumulative")
    if cfg.stage_budget not in STAGE_BUDGETS:
        bad("stage_budget", f"choose from {STAGE_BUDGETS}")
    if cfg.M < 1:
        bad("M", "must be >= 1")
    if cfg.curriculum and cfg.M < 2:
        bad("M", "cross-review needs at least 2 shards")
    if cfg.epochs <= 0 or cfg.shard_epochs <= 0:
        bad("epochs", "must be positive")
    if not 0 <= cfg.warmup_frac < 1:
        bad("warmup_frac", "must be in [0, 1)")
    if not 0 <= cfg.dropout < 1:
        bad("dropout", "must be in [0, 1)")
    if not 0 <= cfg.context_visibility <= 1:
        bad("context_visibility", "must be in [0, 1]")
    if cfg.n_groups < 0 or (cfg.n_groups and not cfg.contexts):
        bad("n_groups", "must be >= 0 and needs at least one context")
    if cfg.n_train < 1 or cfg.n_val < 0 or cfg.n_test < 0:
        bad("n_train", "split sizes must be non-negative with at least one training sample")
    if not cfg.seeds:
        bad("seeds", "need at least one seed")
    for v in cfg.variants:
        try:
            AblationVariant.parse(v)
        except ConfigError as e:
            bad("variants", str(e))
    if cfg.halt_after_steps < 0:
        bad("halt_after_steps", "must be >= 0")
    try:
        parse_metric_spec(cfg.metric)
    except ValueError as e:
        bad("metric", str(e))
    return cfg


def _coerce(cfg: RunConfig, key: str, value):
    known = {f.name: f for f in fields(RunConfig)}
    if key not in known:
        raise ConfigError(f"unknown config field {key!r}")
    current = getattr(cfg, key)
    if isinstance(value, str) and not isinstance(current, str):
        if isinstance(current, bool):
            value = value.lower() in ("1", "true", "yes", "on")
        elif isinstance(current, int):
            value = int(value)
        elif isinstance(current, float):
            value = float(value)
        elif isinstance(current, list):
            value = [v.strip() for v in value.split(",") if v.strip()]
            if key == "seeds":
                value = [int(v) for v in value]
    elif isinstance(current, float) and isinstance(value, int) and not isinstance(value, bool):
        value = float(value)
    return value


def resolve_config(profile: str = "toy", path: str | os.PathLike | None = None,
                   overrides: dict | None = None) -> RunConfig:
    """Profile defaults, then the config file, then explicit overrides, then ``DGCN_SEED``."""
    if profile not in PROFILES:
        raise ConfigError(f"unknown profile {profile!r}; choose from {sorted(PROFILES)}")
    cfg = RunConfig(**PROFILES[profile])
    layers = []
    if path:
        text = Path(path).read_text()
        data = json.loads(text) if str(path).endswith(".json") else yaml.safe_load(text)
        layers.append(data or {})
    if overrides:
        layers.append({k: v for k, v in overrides.items() if v is not None})
    for layer in layers:
        for k, v in layer.items():
            cfg = replace(cfg, **{k: _coerce(cfg, k, v)})
    if os.environ.get("DGCN_SEED"):
        cfg = replace(cfg, seed=int(os.environ["DGCN_SEED"]))
    return validate(cfg)


def save_resolved(cfg: RunConfig, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "resolved_config.json"
    path.write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True))
    return path
