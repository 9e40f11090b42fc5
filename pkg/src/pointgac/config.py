"""Run configuration: flat ``key = value`` sections, validated, with a stable digest."""
import configparser
import dataclasses
import hashlib
import io
import os
from dataclasses import dataclass, field


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    num_classes: int = 4
    per_class: int = 200
    n_points: int = 512
    jitter: float = 0.01
    seed: int = 0
    train_fraction: float = 0.8
    data_dir: str = "pointgac_data"


@dataclass
class GeometryConfig:
    k: int = 16
    mu: float = 0.05


@dataclass
class TransportConfig:
    grouping: str = "gap"
    num_patches: int = 32
    epsilon_scale: float = 0.05
    max_iters: int = 200
    tol: float = 1e-6
    patch_size: int = 32


@dataclass
class ModelConfig:
    dim: int = 48
    heads: int = 4
    encoder_depth: int = 4
    decoder_depth: int = 2
    mlp_ratio: int = 4
    point_hidden: int = 64


@dataclass
class CodebookConfig:
    construction: str = "online-kmeans"
    size: int = 512
    gamma: float = 0.99
    similarity: str = "cosine"
    maintenance: str = "meaningful"
    maintenance_epsilon: float = 0.0
    count_decay: float = 0.5
    heatmap_h: int = 16
    heatmap_w: int = 32


@dataclass
class TrainingConfig:
    epochs: int = 30
    warmup_epochs: int = 3
    batch_size: int = 8
    lr: float = 1e-3
    min_lr: float = 1e-6
    weight_decay: float = 0.04
    beta1: float = 0.9
    beta2: float = 0.999
    mask_ratio: float = 0.8
    tau_t_start: float = 0.07
    tau_t_end: float = 0.04
    tau_s: float = 0.1
    ema_start: float = 0.996
    ema_end: float = 0.9995
    seed: int = 0
    max_steps: int = 0


@dataclass
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    geometry: GeometryConfig = field(default_factory=GeometryConfig)
    transport: TransportConfig = field(default_factory=TransportConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    codebook: CodebookConfig = field(default_factory=CodebookConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)

    SECTIONS = ("data", "geometry", "transport", "model", "codebook", "training")

    def sections(self):
        return {name: getattr(self, name) for name in self.SECTIONS}

    def to_text(self):
        out = io.StringIO()
        for name, sec in self.sections().items():
            out.write(f"[{name}]\n")
            for f in dataclasses.fields(sec):
                out.write(f"{f.name} = {getattr(sec, f.name)!r}\n".replace("'", ""))
            out.write("\n")
        return out.getvalue()

    def digest(self):
        """sha256 over every field except paths, which do not change results."""
        text = self.to_text()
        lines = [ln for ln in text.splitlines() if not ln.startswith("data_dir")]
        return hashlib.sha256("\n".join(lines).encode()).digest()

    def replace(self, **overrides):
        """Copy with ``section__field=value`` overrides."""
        new = RunConfig(**{n: dataclasses.replace(s) for n, s in self.sections().items()})
        for key, value in overrides.items():
            section, _, name = key.partition("__")
            sec = getattr(new, section)
            if not hasattr(sec, name):
                raise ConfigError(f"unknown config key {section}.{name}")
            setattr(sec, name, value)
        return new

    def validate(self):
        d, g, t, m, c, tr = (self.data, self.geometry, self.transport, self.model,
                             self.codebook, self.training)
        checks = [
            (d.num_classes >= 1 and d.per_class >= 1, "data needs at least one class and sample"),
            (d.n_points >= 64, "n_points must be >= 64"),
            (d.jitter >= 0, "jitter must be >= 0"),
            (0 < d.train_fraction < 1, "train_fraction must be in (0, 1)"),
            (1 <= g.k < d.n_points, "k must satisfy 1 <= k < n_points"),
            (g.mu > 0, "mu must be positive"),
            (t.grouping in ("gap", "knn"), "grouping must be gap or knn"),
            (1 <= t.num_patches <= d.n_points, "num_patches must be in [1, n_points]"),
            (t.epsilon_scale > 0 and t.tol > 0 and t.max_iters >= 1, "bad sinkhorn settings"),
            (1 <= t.patch_size <= d.n_points, "patch_size must be in [1, n_points]"),
            (m.dim >= 1 and m.heads >= 1 and m.dim % m.heads == 0, "dim must be divisible by heads"),
            (m.encoder_depth >= 1 and m.decoder_depth >= 1, "depths must be >= 1"),
            (c.construction in ("online-kmeans", "queue", "sinkhorn"), "unknown codebook construction"),
            (c.size >= 1, "codebook size must be >= 1"),
            (0 < c.gamma < 1, "gamma must be in (0, 1)"),
            (c.similarity in ("cosine", "dot"), "similarity must be cosine or dot"),
            (c.maintenance in ("meaningful", "random", "off"), "maintenance must be meaningful|random|off"),
            (c.heatmap_h * c.heatmap_w == c.size, "heatmap_h * heatmap_w must equal codebook size"),
            (tr.epochs >= 1 and tr.batch_size >= 1, "epochs and batch_size must be >= 1"),
            (0 < tr.mask_ratio < 1, "mask_ratio must be in (0, 1)"),
            (int(t.num_patches * tr.mask_ratio) >= 1, "mask ratio masks no patch"),
            (t.num_patches - int(t.num_patches * tr.mask_ratio) >= 1, "mask ratio leaves no visible patch"),
            (tr.tau_t_start > 0 and tr.tau_t_end > 0 and tr.tau_s > 0, "temperatures must be positive"),
            (0 <= tr.ema_start <= 1 and 0 <= tr.ema_end <= 1, "EMA momentum must be in [0, 1]"),
            (tr.lr > 0 and tr.min_lr >= 0, "learning rates must be positive"),
        ]
        for ok, message in checks:
            if not ok:
                raise ConfigError(message)
        return self


def _coerce(value, template):
    if isinstance(template, bool):
        return value.strip().lower() in ("1", "true", "yes", "on")
    if isinstance(template, int):
        return int(value)
    if isinstance(template, float):
        return float(value)
    return value.strip()


def parse_config(text, base=None):
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from None
    cfg = (base or RunConfig()).replace()
    for section in parser.sections():
        if section not in RunConfig.SECTIONS:
            raise ConfigError(f"unknown section [{section}]")
        sec = getattr(cfg, section)
        for key, raw in parser.items(section):
            if not hasattr(sec, key):
                raise ConfigError(f"unknown key {section}.{key}")
            try:
                setattr(sec, key, _coerce(raw, getattr(sec, key)))
            except ValueError:
                raise ConfigError(f"bad value for {section}.{key}: {raw!r}") from None
    return cfg


def load_config(path=None, apply_env=True):
    cfg = RunConfig()
    if path is not None:
        with open(path) as fh:
            cfg = parse_config(fh.read())
    if apply_env and os.environ.get("POINTGAC_SEED"):
        try:
            seed = int(os.environ["POINTGAC_SEED"])
        except ValueError:
            raise ConfigError("POINTGAC_SEED must be an integer") from None
        cfg.training.seed = seed
    return cfg.validate()


def desk_scale():
    return RunConfig()


def full_scale():
    """Full-size hyper-parameters, far too slow for a CPU."""
    return RunConfig().replace(
        data__n_points=1024,
        transport__num_patches=64,
        model__dim=384,
        model__heads=6,
        model__encoder_depth=12,
        model__decoder_depth=4,
        codebook__size=8192,
        codebook__heatmap_h=64,
        codebook__heatmap_w=128,
        training__epochs=300,
        training__warmup_epochs=50,
    )


def micro_scale():
    """Tiny model used for gradient checks."""
    return RunConfig().replace(
        data__n_points=64,
        transport__num_patches=4,
        model__dim=8,
        model__heads=2,
        model__encoder_depth=1,
        model__decoder_depth=1,
        model__point_hidden=6,
        codebook__size=16,
        codebook__heatmap_h=4,
        codebook__heatmap_w=4,
        training__mask_ratio=0.5,
    )
