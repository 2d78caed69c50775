"""Run configuration: a nested YAML file mapped onto frozen dataclasses.

Resolution order, later wins: built-in defaults, ``--preset``, the config
file, environment overrides (``AQA_OUTPUT_ROOT``, ``AQA_THREADS``), then
command-line flags.  Unknown keys are rejected.  Per-component seeds are not
configurable on their own; they all derive from the global ``seed``.
"""
from __future__ import annotations

import dataclasses
import os
import typing
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .cga import CgaConfig
from .dataio import SynthConfig
from .encoders import EncoderConfig, SemanticConfig
from .fusion import TrainConfig
from .plugins import HeadConfig


class ConfigError(ValueError):
    """Malformed or inconsistent run configuration."""


@dataclass(frozen=True)
class PathsConfig:
    data: str | None = None
    gave: str | None = None
    checkpoint: str | None = None
    host_scores: str | None = None
    gaze_scores: str | None = None


@dataclass(frozen=True)
class SplitConfig:
    train_fraction: float = 0.8
    val_fraction: float = 0.125
    cga_held_out: int = 0

    def __post_init__(self):
        if not 0.0 < self.train_fraction < 1.0:
            raise ConfigError("split.train_fraction must lie in (0, 1)")
        if not 0.0 < self.val_fraction < 1.0:
            raise ConfigError("split.val_fraction must lie in (0, 1)")
        if self.cga_held_out < 0:
            raise ConfigError("split.cga_held_out must be >= 0")


@dataclass(frozen=True)
class PlugConfig:
    mode: str = "feature"
    host: str = "semantic-linear"
    no_gaze: bool = False
    fit_lambda: bool = True
    lam: float = 0.5
    host_epochs: int = 40
    head: HeadConfig = field(default_factory=HeadConfig)

    def __post_init__(self):
        if self.mode not in ("feature", "score"):
            raise ConfigError(f"plug.mode must be 'feature' or 'score', got {self.mode!r}")
        if self.host not in ("semantic-linear", "patch-pool"):
            raise ConfigError(f"plug.host must be 'semantic-linear' or 'patch-pool', got {self.host!r}")


@dataclass(frozen=True)
class EvalConfig:
    bootstrap: int = 1000
    paired: bool = False
    reference: str | None = None
    subset: str | None = None
    by_category: bool = False
    scatter: bool = True
    metrics: tuple[str, ...] = ("plcc", "srocc", "mse")

    def __post_init__(self):
        object.__setattr__(self, "metrics", tuple(self.metrics))
        if self.bootstrap < 100:
            raise ConfigError("eval.bootstrap must be >= 100")
        bad = [m for m in self.metrics if m not in ("plcc", "srocc", "mse")]
        if bad:
            raise ConfigError(f"unknown metric(s) {bad}")
        if self.subset is not None and not str(self.subset).startswith("lowest-error:"):
            raise ConfigError(f"eval.subset must look like 'lowest-error:<fraction or count>', got {self.subset!r}")


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    output_root: str = "runs"
    threads: int = 1
    paths: PathsConfig = field(default_factory=PathsConfig)
    split: SplitConfig = field(default_factory=SplitConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    semantic: SemanticConfig = field(default_factory=SemanticConfig)
    cga: CgaConfig = field(default_factory=CgaConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    plug: PlugConfig = field(default_factory=PlugConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)


# keys owned by the global seed or by the loaded data, hidden from the file schema
HIDDEN = {
    SynthConfig: {"seed"},
    EncoderConfig: {"init_seed", "image_size", "channels"},
    SemanticConfig: {"image_size", "channels"},
    CgaConfig: {"seed"},
    TrainConfig: {"seed"},
    HeadConfig: {"seed"},
}

DOCS = {
    "seed": "global seed; drives data generation, splits, initialization, batching and bootstrap",
    "output_root": "parent directory for default output locations (env AQA_OUTPUT_ROOT)",
    "threads": "torch intra-op thread count (env AQA_THREADS)",
    "paths.data": "dataset directory holding manifest/images/scanpaths (default <output_root>/synth)",
    "paths.gave": "image-tower weights from pretrain-cga used to initialize or supply the gaze tower",
    "paths.checkpoint": "fusion checkpoint for ablate (default <output_root>/train/model.weights)",
    "paths.host_scores": "score-mode host predictions, JSONL {id, score}; null trains the semantic-linear host",
    "paths.gaze_scores": "score-mode gaze predictions, JSONL {id, score}; null fits a linear head on gaze features",
    "split.train_fraction": "share of ids used for training (floor), the rest is test",
    "split.val_fraction": "share of the training ids held out for validation and score calibration",
    "split.cga_held_out": "images withheld from contrastive pretraining for retrieval evaluation",
    "synth.n_images": "number of synthetic images",
    "synth.image_size": "image height and width in pixels",
    "synth.alpha": "weight of the semantic factor in the score",
    "synth.beta": "weight of the compositional factor in the score",
    "synth.noise_sigma": "standard deviation of additive score noise",
    "synth.observers_per_image": "scanpaths sampled per image",
    "synth.fixations_per_path": "fixations per scanpath",
    "synth.center_bias_sigma": "width of the central fixation density (image units)",
    "synth.saccade_shape": "Gamma shape of saccade amplitudes",
    "synth.saccade_scale": "Gamma scale of saccade amplitudes (image units)",
    "synth.saliency_sigma": "width of the fixation density around the focal point",
    "synth.saliency_weight": "mixture weight of the focal density against the center density",
    "encoder.d": "gaze tower width",
    "encoder.patch_size": "patch side in pixels",
    "encoder.n_layers": "transformer blocks per tower",
    "encoder.n_heads": "self-attention heads",
    "encoder.trainable": "whether tower weights receive gradients",
    "encoder.ffn_mult": "feed-forward expansion factor",
    "semantic.d": "semantic embedding width (must equal encoder.d)",
    "semantic.seed": "seed of the frozen projection (identity of the frozen encoder, not a run seed)",
    "semantic.grid": "luminance grid side",
    "semantic.hist_bins": "per-channel histogram bins",
    "semantic.edge_threshold": "gradient magnitude counted as an edge",
    "cga.tau": "contrastive temperature",
    "cga.batch_size": "image/scanpath pairs per contrastive batch",
    "cga.max_epochs": "pretraining epochs (--epochs)",
    "cga.lr": "AdamW peak learning rate (cosine schedule)",
    "cga.weight_decay": "AdamW weight decay",
    "cga.aggregation": "per-image-mean pools all observers; per-path samples one scanpath per step",
    "cga.eval_interval": "epochs between retrieval evaluations",
    "cga.train_image_tower": "update the image tower",
    "cga.train_gaze_tower": "update the scanpath tower",
    "train.batch_size": "fusion minibatch size",
    "train.max_epochs": "epoch cap (--epochs)",
    "train.patience": "epochs without validation PLCC gain tolerated before stopping",
    "train.lr": "AdamW peak learning rate of attention and head",
    "train.encoder_lr": "AdamW peak learning rate of the gaze tower",
    "train.weight_decay": "AdamW weight decay",
    "train.lam": "PLCC weight in the hybrid loss",
    "train.eps": "stabilizer under the square roots of the PLCC term",
    "train.train_gave": "fine-tune the gaze tower during fusion training",
    "train.mode": "training arm: full, s_only or g_only (--mask)",
    "train.head_hidden": "hidden width of the regression head",
    "train.fusion_heads": "cross-attention heads",
    "plug.mode": "feature (new head on host+gaze features) or score (residual correction)",
    "plug.host": "feature-mode host: semantic-linear or patch-pool",
    "plug.no_gaze": "feature mode with zero-width gaze features (host-only baseline in both arms)",
    "plug.fit_lambda": "score mode: fit the correction weight on the calibration split",
    "plug.lam": "score mode: fixed correction weight when not fitted (--lambda forces it)",
    "plug.host_epochs": "training epochs of the patch-pool host",
    "plug.head.hidden": "hidden width of the fused head (0 = linear)",
    "plug.head.batch_size": "fused-head minibatch size",
    "plug.head.max_epochs": "fused-head epoch cap",
    "plug.head.patience": "fused-head early-stopping patience",
    "plug.head.lr": "fused-head AdamW learning rate",
    "plug.head.weight_decay": "fused-head AdamW weight decay",
    "plug.head.lam": "PLCC weight of the fused-head hybrid loss",
    "plug.head.eps": "stabilizer of the fused-head PLCC term",
    "eval.bootstrap": "bootstrap resamples for intervals and paired tests",
    "eval.paired": "add paired-bootstrap p-values against the reference model",
    "eval.reference": "reference model name for paired tests and subset ranking",
    "eval.subset": "lowest-error:<fraction or count> restricts every model to its best samples",
    "eval.by_category": "per-category decomposition",
    "eval.scatter": "write the prediction-vs-truth density figure",
    "eval.metrics": "metrics to report",
}

PRESETS = {
    "paper-cga": {"synth": {"n_images": 109}},
    "study1-toy": {"synth": {"n_images": 2000, "alpha": 1.0, "beta": 1.0},
                   "train": {"max_epochs": 40, "patience": 15}},
}


def _hints(cls):
    return typing.get_type_hints(cls)


def _visible_fields(cls):
    hidden = HIDDEN.get(cls, set())
    return [f for f in dataclasses.fields(cls) if f.name not in hidden]


def _merge(base: dict, over: dict, where: str = "") -> dict:
    out = dict(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v, f"{where}{k}.")
        else:
            out[k] = v
    return out


def _check_keys(cls, data: dict, where: str = "") -> None:
    if not isinstance(data, dict):
        raise ConfigError(f"{where or 'config'} must be a mapping, got {type(data).__name__}")
    hints = _hints(cls)
    names = {f.name for f in _visible_fields(cls)}
    for k, v in data.items():
        if k not in names:
            raise ConfigError(f"unknown config key {where}{k}")
        t = hints[k]
        if dataclasses.is_dataclass(t):
            _check_keys(t, v, f"{where}{k}.")


def _build(cls, data: dict, seed: int):
    hints = _hints(cls)
    kwargs = {}
    for f in _visible_fields(cls):
        t = hints[f.name]
        if dataclasses.is_dataclass(t):
            kwargs[f.name] = _build(t, data.get(f.name) or {}, seed)
        elif f.name in data:
            kwargs[f.name] = data[f.name]
    for name in HIDDEN.get(cls, set()) & {"seed", "init_seed"}:
        kwargs[name] = seed
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {cls.__name__}: {exc}") from None


def to_dict(cfg) -> dict:
    """Plain nested dict of the visible keys, tuples as lists."""
    out = {}
    for f in _visible_fields(type(cfg)):
        v = getattr(cfg, f.name)
        if dataclasses.is_dataclass(v):
            v = to_dict(v)
        elif isinstance(v, tuple):
            v = list(v)
        out[f.name] = v
    return out


def resolve(config_file=None, preset: str | None = None, overrides: dict | None = None,
            env: typing.Mapping[str, str] | None = None) -> RunConfig:
    """Build a :class:`RunConfig` from the layered sources."""
    env = os.environ if env is None else env
    data: dict = {}
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
        data = _merge(data, PRESETS[preset])
    if config_file is not None:
        try:
            text = Path(config_file).read_text(encoding="utf-8")
        except OSError as exc:
            raise OSError(f"cannot read config {config_file}: {exc}") from exc
        try:
            loaded = yaml.safe_load(text) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"{config_file}: not valid YAML ({exc})") from None
        _check_keys(RunConfig, loaded)
        data = _merge(data, loaded)
    if env.get("AQA_OUTPUT_ROOT"):
        data["output_root"] = env["AQA_OUTPUT_ROOT"]
    if env.get("AQA_THREADS"):
        try:
            data["threads"] = int(env["AQA_THREADS"])
        except ValueError:
            raise ConfigError(f"AQA_THREADS must be an integer, got {env['AQA_THREADS']!r}") from None
    if overrides:
        data = _merge(data, overrides)
    _check_keys(RunConfig, data)
    seed = int(data.get("seed", 0))
    cfg = _build(RunConfig, data, seed)
    if cfg.threads < 1:
        raise ConfigError("threads must be >= 1")
    if cfg.semantic.d != cfg.encoder.d:
        raise ConfigError(f"semantic.d={cfg.semantic.d} must equal encoder.d={cfg.encoder.d}")
    return cfg


def dump(cfg: RunConfig) -> str:
    return yaml.safe_dump(to_dict(cfg), sort_keys=True, default_flow_style=False)


def write_snapshot(cfg: RunConfig, out_dir) -> Path:
    path = Path(out_dir) / "config.yaml"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dump(cfg), encoding="utf-8")
    return path


def documented_defaults() -> str:
    """Default configuration as YAML with one comment per key."""
    lines = []

    def walk(d: dict, prefix: str, indent: int):
        for k in sorted(d):
            key = f"{prefix}{k}"
            v = d[k]
            pad = "  " * indent
            if isinstance(v, dict):
                lines.append(f"{pad}{k}:")
                walk(v, key + ".", indent + 1)
            else:
                val = yaml.safe_dump(v, default_flow_style=True).strip()
                if val.endswith("..."):
                    val = val[:-3].strip()
                lines.append(f"{pad}{k}: {val}  # {DOCS[key]}")

    walk(to_dict(RunConfig()), "", 0)
    return "\n".join(lines) + "\n"
