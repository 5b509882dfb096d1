"""Plain-text experiment configs: ``dotted.key = value`` lines, ``#`` comments."""

from pathlib import Path

from .data import PROFILES
from .losses import LossSpec
from .optim import InitScheme, make_optimizer

_STR, _INT, _FLOAT, _BOOL = str, int, float, bool

# key -> (type, default); None defaults are optional values
SCHEMA = {
    "arch": (_STR, "dcgan"),
    "seed": (_INT, 0),
    "output_dir": (_STR, "runs/default"),
    "deterministic": (_BOOL, True),

    "data.source": (_STR, "synthetic"),
    "data.n": (_INT, 200),
    "data.res": (_INT, 32),
    "data.modes": (_INT, 2),
    "data.augment": (_STR, "none"),

    "model.base_filters": (_INT, 32),
    "model.use_bn": (_BOOL, True),
    "model.dropout": (_FLOAT, 0.0),
    "model.latent": (_INT, 256),
    "model.base_res": (_INT, 8),
    "model.g_filters": (_INT, 256),
    "model.d_filters": (_INT, 64),
    "model.disc_final_res": (_INT, 8),
    "model.kernel": (_INT, 5),
    "model.minibatch_std": (_BOOL, False),
    "model.n_res_blocks": (_INT, 16),
    "model.d_res_act": (_STR, "lrelu"),
    "model.fbase": (_INT, 4096),
    "model.fmax": (_INT, 512),
    "model.pixelnorm": (_BOOL, True),

    "loss.kind": (_STR, "gan_original"),
    "loss.lambda_adv": (_FLOAT, 1.0),
    "loss.lambda_gp": (_FLOAT, 0.25),
    "loss.one_sided_smoothing": (_BOOL, False),
    "loss.clip_threshold": (_FLOAT, None),
    "loss.eps_drift": (_FLOAT, None),
    "loss.dice_smooth": (_FLOAT, 1.0),

    "opt.kind": (_STR, "adam"),
    "opt.lr": (_FLOAT, 1e-3),
    "opt.beta1": (_FLOAT, 0.9),
    "opt.beta2": (_FLOAT, 0.999),
    "opt.momentum": (_FLOAT, 0.9),
    "g_opt.kind": (_STR, "adam"),
    "g_opt.lr": (_FLOAT, 2e-4),
    "g_opt.beta1": (_FLOAT, 0.5),
    "g_opt.beta2": (_FLOAT, 0.999),
    "g_opt.momentum": (_FLOAT, 0.9),
    "d_opt.kind": (_STR, "adam"),
    "d_opt.lr": (_FLOAT, 2e-4),
    "d_opt.beta1": (_FLOAT, 0.5),
    "d_opt.beta2": (_FLOAT, 0.999),
    "d_opt.momentum": (_FLOAT, 0.9),

    "train.batch_size": (_INT, 16),
    "train.epochs": (_INT, 1),
    "train.steps_per_epoch": (_INT, 0),
    "train.max_steps": (_INT, 0),
    "train.gen_disc_rate": (_INT, 1),
    "train.latent": (_STR, "uniform"),
    "train.init": (_STR, "normal_002"),
    "train.init_fan_in": (_BOOL, False),
    "train.sample_every": (_INT, 0),
    "train.checkpoint_every": (_INT, 0),

    "disc.input_noise_std": (_FLOAT, 0.0),

    "progan.stabilize_epochs": (_INT, 1),
    "progan.transition_epochs": (_INT, 1),

    "eval.n_generate": (_INT, 0),
}

LATENTS = ("uniform", "normal", "normal_normalized")
ARCHS = ("unet", "dcgan", "srresgan", "progan")


class ConfigError(ValueError):
    pass


def _coerce(key, typ, text, lineno):
    where = f"line {lineno}: " if lineno else ""
    if text.lower() in ("none", "null", "") and SCHEMA[key][1] is None:
        return None
    try:
        if typ is _BOOL:
            low = text.lower()
            if low in ("true", "yes", "on", "1"):
                return True
            if low in ("false", "no", "off", "0"):
                return False
            raise ValueError(text)
        if typ is _INT:
            return int(text)
        if typ is _FLOAT:
            return float(text)
        return text
    except ValueError:
        raise ConfigError(f"{where}key '{key}' expects {typ.__name__}, got {text!r}") from None


class ExperimentConfig:
    """Fully resolved config. Every schema key has a value after parsing."""

    def __init__(self, values=None):
        self.values = {k: d for k, (_, d) in SCHEMA.items()}
        self.explicit = set()
        for k, v in (values or {}).items():
            self.set(k, v)
        self._validate()

    def set(self, key, value, lineno=None):
        if key not in SCHEMA:
            where = f"line {lineno}: " if lineno else ""
            raise ConfigError(f"{where}unknown key '{key}'")
        typ = SCHEMA[key][0]
        if isinstance(value, str):
            value = _coerce(key, typ, value.strip(), lineno)
        elif value is not None and typ is _FLOAT:
            value = float(value)
        self.values[key] = value
        self.explicit.add(key)

    def __getitem__(self, key):
        return self.values[key]

    def _validate(self):
        v = self.values
        if v["arch"] not in ARCHS:
            raise ConfigError(f"arch must be one of {', '.join(ARCHS)}, got {v['arch']!r}")
        if v["train.gen_disc_rate"] < 1:
            raise ConfigError("train.gen_disc_rate must be >= 1")
        if v["train.epochs"] < 1:
            raise ConfigError("train.epochs must be >= 1")
        if v["train.latent"] not in LATENTS:
            raise ConfigError(f"train.latent must be one of {', '.join(LATENTS)}")
        if v["data.augment"] not in PROFILES:
            raise ConfigError(f"data.augment must be one of {', '.join(PROFILES)}")
        if v["loss.kind"] == "wgan" and v["loss.clip_threshold"] is None:
            v["loss.clip_threshold"] = 0.01
        self.loss_spec()
        self.init_scheme()

    def loss_spec(self):
        v = self.values
        kind = v["loss.kind"]
        return LossSpec(kind, v["loss.lambda_adv"], v["loss.lambda_gp"] if kind in ("wgan_gp", "dragan") else 0.0,
                        v["loss.one_sided_smoothing"], v["loss.clip_threshold"] if kind == "wgan" else None,
                        v["loss.eps_drift"])

    def init_scheme(self):
        return InitScheme(self.values["train.init"], self.values["train.init_fan_in"])

    def optimizer(self, section):
        v = self.values
        return make_optimizer(v[f"{section}.kind"], v[f"{section}.lr"], v[f"{section}.beta1"],
                              v[f"{section}.beta2"], momentum=v[f"{section}.momentum"])

    def to_text(self):
        def fmt(x):
            if x is None:
                return "none"
            if isinstance(x, bool):
                return "true" if x else "false"
            return repr(x) if isinstance(x, float) else str(x)
        return "".join(f"{k} = {fmt(self.values[k])}\n" for k in SCHEMA)

    def echo(self, directory=None):
        d = Path(directory or self.values["output_dir"])
        d.mkdir(parents=True, exist_ok=True)
        (d / "config.resolved").write_text(self.to_text())
        return d / "config.resolved"


def parse_config_text(text, overrides=None):
    cfg = ExperimentConfig()
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        cfg.set(key, value, lineno)
    for k, val in (overrides or {}).items():
        cfg.set(k, val)
    cfg._validate()
    return cfg


def parse_config(path, overrides=None, echo=True):
    """Read a config file, materialize defaults and echo the result to the output directory."""
    cfg = parse_config_text(Path(path).read_text(), overrides)
    if echo:
        cfg.echo()
    return cfg
