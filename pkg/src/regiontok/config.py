"""Flat key=value run configuration.

Every tunable of the pipeline lives here with its default. ``validate``
builds each module's config object, so any invariant violation surfaces
before computation starts.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields
from pathlib import Path


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    seed: int = 0
    threads: int = 1
    # model
    d: int = 32
    k: int = 3
    layers: int = 2
    heads: int = 8
    mlp_hidden: int = 64
    dropout: float = 0.1
    rff_sigma: float = 10.0
    # merging / tracking
    tau_token: float = 0.975
    tau_mask: float = 0.8
    binarize_level: float = 0.5
    tau_track: float = 0.65
    # losses
    temperature: float = 0.1
    w_visual: float = 1.0
    w_text: float = 1.0
    w_distill: float = 1.0
    w_attn: float = 1.0
    dice_eps: float = 1.0
    include_positive: bool = False
    # optimization (desk-scale schedule; the reference run peaks at 1e-3 over 60000 steps / 1500 warmup)
    lr: float = 2e-3
    weight_decay: float = 0.01
    warmup: int = 100
    total_steps: int = 1500
    final_lr_fraction: float = 0.5
    clip: float = 5.0
    batch_size: int = 16
    points_per_image: int = 32
    annotations_per_region: int = 3  # synonymous labels per training region
    # synthetic data
    train_grid: int = 8
    eval_grid: int = 16
    min_regions: int = 4
    max_regions: int = 8
    parts_per_region: int = 0
    noise_std: float = 0.05
    num_clusters: int = 6
    synonyms_per_cluster: int = 2
    feature_scale: float = 4.0
    # evaluation
    tau_sim_haystack: float = 0.23
    tau_sim_video: float = 0.18
    ovss_grid: int = 0  # 0 = match the patch grid
    haystack_db: int = 10

    @classmethod
    def from_text(cls, text: str) -> "RunConfig":
        known = {f.name: f for f in fields(cls)}
        values = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected key=value, got {raw!r}")
            key, value = (s.strip() for s in line.split("=", 1))
            if key not in known:
                raise ConfigError(f"line {lineno}: unknown key {key!r}")
            values[key] = _coerce(known[key].type, value, key)
        cfg = cls(**values)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls.from_text(Path(path).read_text())

    def to_text(self) -> str:
        return "".join(f"{k}={_fmt(v)}\n" for k, v in asdict(self).items())

    def replace(self, **changes) -> "RunConfig":
        cfg = RunConfig(**{**asdict(self), **changes})
        cfg.validate()
        return cfg

    # module config views
    def model(self):
        from .encoder import ModelConfig

        return ModelConfig(d=self.d, k=self.k, layers=self.layers, heads=self.heads, mlp_hidden=self.mlp_hidden,
                           dropout=self.dropout, seed=self.seed, rff_sigma=self.rff_sigma)

    def merge(self):
        from .merging import MergeConfig

        return MergeConfig(self.tau_token, self.tau_mask, self.binarize_level)

    def track(self):
        from .tracker import TrackConfig

        return TrackConfig(self.tau_track)

    def loss(self):
        from .training.losses import LossConfig

        return LossConfig(self.temperature, self.w_visual, self.w_text, self.w_distill, self.w_attn,
                          self.dice_eps, self.include_positive)

    def optim(self):
        from .training.trainer import OptimConfig

        return OptimConfig(lr=self.lr, weight_decay=self.weight_decay, warmup=self.warmup,
                           total_steps=self.total_steps, final_fraction=self.final_lr_fraction,
                           clip=self.clip, batch_size=self.batch_size)

    def eval(self):
        from .evaluation import EvalConfig

        return EvalConfig(self.tau_sim_haystack, self.tau_sim_video, self.ovss_grid)

    def validate(self) -> None:
        try:
            self.model()
            self.merge()
            self.track()
            self.loss()
            self.optim()
            self.eval()
        except (ValueError, TypeError) as exc:
            raise ConfigError(str(exc)) from exc
        if self.layers < 1:
            raise ConfigError("layers must be >= 1")
        if self.threads < 1:
            raise ConfigError("threads must be >= 1")
        if not 1 <= self.min_regions <= self.max_regions:
            raise ConfigError("need 1 <= min_regions <= max_regions")
        if self.train_grid < 1 or self.eval_grid < 1 or self.ovss_grid < 0:
            raise ConfigError("grid sizes must be positive")
        if self.points_per_image < 1 or self.haystack_db < 1 or self.annotations_per_region < 1:
            raise ConfigError("points_per_image, haystack_db and annotations_per_region must be >= 1")
        if self.noise_std < 0 or self.feature_scale <= 0:
            raise ConfigError("noise_std must be >= 0 and feature_scale > 0")
        if self.num_clusters < 1 or self.synonyms_per_cluster < 1:
            raise ConfigError("need at least one cluster and one synonym")


def _coerce(typ, value: str, key: str):
    typ = typ if isinstance(typ, str) else typ.__name__
    try:
        if typ == "bool":
            low = value.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(value)
            return low in ("true", "1", "yes")
        if typ == "int":
            return int(value)
        if typ == "float":
            return float(value)
    except ValueError as exc:
        raise ConfigError(f"{key}: cannot parse {value!r} as {typ}") from exc
    return value


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)
