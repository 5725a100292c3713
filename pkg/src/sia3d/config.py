"""Flat key=value run configuration with typed parsing.

Every field serializes into checkpoints; unknown keys in a config file are
rejected by name.  Booleans accept true/false/1/0.
"""

from dataclasses import dataclass, fields

__all__ = ["TrainConfig", "ConfigError", "parse_config_text", "config_to_text"]

STAGES = ("pretrain", "mle", "scst")
AGGREGATORS = ("netvlad", "gem")
GLOBAL_INPUTS = ("all", "contexts", "single+contexts")


class ConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    # run
    stage: str = "pretrain"
    epochs: int = 60
    batch_size: int = 8
    lr_init: float = 5e-4
    lr_floor: float = 1e-6
    warmup_frac: float = 0.05
    detector_lr_floor: float = 1e-6
    weight_decay: float = 0.1
    grad_clip: float = 0.1
    seed: int = 0
    holdout: int = 0
    eval_every: int = 10
    scst_beam_k: int = 5
    dtype: str = "float32"
    # encoder
    t_tokens: int = 256
    dim: int = 64
    heads: int = 4
    enc_layers: int = 3
    dec_layers: int = 2
    ffn_dim: int = 128
    dropout: float = 0.0
    tokenize_radius: float = 0.4
    tokenize_nsample: int = 32
    mask_radius: float = 0.0          # 0 = derive from token density
    # queries
    m_context: int = 64
    m_instance: int = 32
    context_radius: float = 1.2
    context_nsample: int = 64
    instance_radius: float = 0.3
    instance_nsample: int = 16
    scale_radii: bool = True
    fps_reseed: str = "fixed"   # "fixed": one RNG-drawn seed per scene per stage;
                                # "epoch": redraw every epoch (slower to converge)
    # aggregation + captioning
    k_nearest: int = 16
    clusters: int = 8
    aggregator: str = "netvlad"
    cap_layers: int = 2
    cap_heads: int = 4
    cap_dim: int = 64
    max_len: int = 16
    # ablation wiring
    instance_only: bool = False
    no_global: bool = False
    global_inputs: str = "all"
    # loss weights
    alpha_giou: float = 10.0
    alpha_cls: float = 1.0
    alpha_center: float = 5.0
    alpha_size: float = 1.0
    no_object_weight: float = 0.2
    vote_normalize: str = "positive"   # or "all": divide by every shifted point
    det_on_queries: bool = True        # also apply the detection head to the
                                       # normalized pre-decoder query features
    beta_vote: float = 10.0
    beta_det: float = 1.0
    beta_cap: float = 10.0
    # eval protocol
    nms_iou: float = 0.25
    conf_floor: float = 0.05

    def validate(self):
        if self.stage not in STAGES:
            raise ConfigError(f"stage must be one of {STAGES}, got {self.stage!r}")
        if self.aggregator not in AGGREGATORS:
            raise ConfigError(f"aggregator must be one of {AGGREGATORS}, got {self.aggregator!r}")
        if self.global_inputs not in GLOBAL_INPUTS:
            raise ConfigError(f"global_inputs must be one of {GLOBAL_INPUTS}")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype!r}")
        if self.vote_normalize not in ("all", "positive"):
            raise ConfigError("vote_normalize must be 'all' or 'positive'")
        if self.fps_reseed not in ("fixed", "epoch"):
            raise ConfigError("fps_reseed must be 'fixed' or 'epoch'")
        if self.k_nearest > self.m_context:
            raise ConfigError(f"k_nearest {self.k_nearest} exceeds m_context {self.m_context}")
        if self.lr_init <= 0:
            raise ConfigError("lr_init must be positive")
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("epochs must be >= 0 and batch_size >= 1")
        return self

    def replace(self, **kw):
        vals = {f.name: getattr(self, f.name) for f in fields(self)}
        vals.update(kw)
        return TrainConfig(**vals).validate()

    # keys whose change makes a checkpoint incompatible with a new config
    MODEL_KEYS = (
        "t_tokens", "dim", "heads", "enc_layers", "dec_layers", "ffn_dim",
        "tokenize_radius", "tokenize_nsample", "mask_radius",
        "m_context", "m_instance", "context_radius", "context_nsample",
        "instance_radius", "instance_nsample", "scale_radii",
        "k_nearest", "clusters", "aggregator", "cap_layers", "cap_heads",
        "cap_dim", "max_len", "instance_only", "no_global", "global_inputs",
        "dtype",
    )

    def model_signature(self):
        return {k: getattr(self, k) for k in self.MODEL_KEYS}


def _convert(name, raw, typ):
    raw = raw.strip()
    try:
        if typ is bool:
            if raw.lower() in ("true", "1", "yes"):
                return True
            if raw.lower() in ("false", "0", "no"):
                return False
            raise ValueError(raw)
        return typ(raw)
    except ValueError:
        raise ConfigError(f"bad value {raw!r} for key {name!r} (expected {typ.__name__})") from None


def parse_config_text(text, base=None):
    """Parse key=value lines ('#' comments allowed) over a base config."""
    cfg = base or TrainConfig()
    by_name = {f.name: f.type for f in fields(TrainConfig)}
    types = {"int": int, "float": float, "str": str, "bool": bool}
    updates = {}
    for ln, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {ln}: expected key=value, got {line!r}")
        key, raw = line.split("=", 1)
        key = key.strip()
        if key not in by_name:
            raise ConfigError(f"unknown config key {key!r}")
        typ = by_name[key]
        typ = types[typ] if isinstance(typ, str) else typ
        updates[key] = _convert(key, raw, typ)
    return cfg.replace(**updates)


def config_to_text(cfg: TrainConfig):
    lines = []
    for f in sorted(fields(TrainConfig), key=lambda f: f.name):
        v = getattr(cfg, f.name)
        if isinstance(v, bool):
            v = "true" if v else "false"
        elif isinstance(v, float):
            v = repr(v)
        lines.append(f"{f.name}={v}")
    return "\n".join(lines) + "\n"
