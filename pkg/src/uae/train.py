"""Run configuration, training loop and checkpoint round trips."""
import math
import os
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import autodiff as ad
from .data import load_dataset, Split
from .errors import ConfigError, IncompatibleCheckpoint, UAEError
from .gaussian_core import DEFAULT_KAPPA, Heuristic
from .losses import DEFAULT_K, PRESETS, DecoderReg, build_loss, preset
from .nets import AdamState, DenseNet, Encoder, adam_step, checkpoint_bytes, encode, forward, load_checkpoint, make_models

METRICS_HEADER = "epoch\tlr\ttrain_rec\ttrain_reg\ttrain_decreg\tval_rec"
CHECKPOINT_NAME = "model.uae1"
METRICS_NAME = "metrics.tsv"


class Diverged(UAEError):
    pass


@dataclass
class RunConfig:
    preset: str = "uae"
    dataset: str = "moons"
    latent_dim: int = 2
    k: int = DEFAULT_K
    kappa: float = DEFAULT_KAPPA
    beta: float = None  # None: preset default
    gamma: float = None
    epochs: int = 30
    batch_size: int = 64
    lr: float = 0.005
    patience: int = 5
    seed: int = 0
    out: str = "runs/uae"
    heuristic: str = "random"
    hidden: tuple = (64, 64)
    r_sigma: int = 50
    r_mc: int = 200

    def validate(self):
        if self.preset not in PRESETS:
            raise ConfigError(f"unknown preset {self.preset!r}")
        if self.latent_dim < 1 or self.k < 1 or self.batch_size < 1:
            raise ConfigError("latent_dim, k and batch_size must be positive")
        if self.epochs < 0:
            raise ConfigError("epochs must be non-negative")
        if not (self.lr > 0.0) or self.patience < 1:
            raise ConfigError("lr must be positive and patience at least 1")
        for name in ("beta", "gamma"):
            value = getattr(self, name)
            if value is not None and not (value >= 0.0 and math.isfinite(value)):
                raise ConfigError(f"{name} must be a finite non-negative number")
        try:
            Heuristic(self.heuristic)
        except ValueError:
            raise ConfigError(f"unknown heuristic {self.heuristic!r}") from None
        if not self.hidden or any(h < 1 for h in self.hidden):
            raise ConfigError("hidden widths must be positive")
        spec = self.loss_spec()
        spec.validate(self.latent_dim)
        return spec

    def loss_spec(self):
        overrides = {"K": self.k, "kappa": self.kappa, "heuristic": self.heuristic}
        if self.beta is not None:
            overrides["beta"] = self.beta
        if self.gamma is not None:
            overrides["gamma"] = self.gamma
        return preset(self.preset, **overrides)


_CASTS = {"int": int, "float": float, "str": str}


def _cast(name, raw):
    if raw is None:
        return None
    f = {fl.name: fl for fl in fields(RunConfig)}[name]
    if name == "hidden":
        if isinstance(raw, (tuple, list)):
            return tuple(int(h) for h in raw)
        return tuple(int(h) for h in str(raw).split(",") if h.strip())
    kind = f.type if isinstance(f.type, str) else f.type.__name__
    try:
        if isinstance(raw, str) and raw.strip().lower() == "none" and name in ("beta", "gamma"):
            return None
        return _CASTS[kind](raw)
    except (ValueError, KeyError) as exc:
        raise ConfigError(f"bad value {raw!r} for {name}") from exc


def config_key(key):
    return key.strip().replace("-", "_")


def parse_config_text(text):
    """Flat ``key=value`` lines; ``#`` starts a comment."""
    known = {f.name for f in fields(RunConfig)}
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, val = line.partition("=")
        key = config_key(key)
        if not sep or key not in known:
            raise ConfigError(f"config line {lineno}: expected known key=value, got {line!r}")
        values[key] = _cast(key, val.strip())
    return values


def make_config(file_values=None, overrides=None):
    """Defaults, then config-file values, then explicit overrides."""
    merged = {}
    for source in (file_values or {}, overrides or {}):
        for key, val in source.items():
            if val is not None:
                merged[config_key(key)] = _cast(config_key(key), val)
    return RunConfig(**merged)


def config_text(config):
    lines = []
    for key, val in asdict(config).items():
        if key == "hidden":
            val = ",".join(str(h) for h in val)
        lines.append(f"{key}={val}")
    return "\n".join(lines) + "\n"


class PlateauHalver:
    """Halve the learning rate after ``patience`` consecutive epochs without
    a strict improvement of the monitored value."""

    def __init__(self, lr, patience):
        self.lr = lr
        self.patience = patience
        self.best = math.inf
        self.stale = 0

    def step(self, value):
        if value < self.best:
            self.best = value
            self.stale = 0
        else:
            self.stale += 1
            if self.stale >= self.patience:
                self.lr *= 0.5
                self.stale = 0
        return self.lr


def posterior_means(encoder, x):
    return ad.value_of(encode(encoder, x).posterior.mean)


def decode(decoder, z):
    return forward(decoder, np.asarray(z, dtype=np.float64), decoder.effective_weights(advance=False)).value


def reconstruction_error(encoder, decoder, x):
    """Mean over inputs of ``|x - D(mu(x))|^2`` (posterior-mean decode)."""
    recon = decode(decoder, posterior_means(encoder, x))
    return float(np.mean(np.sum((x - recon) ** 2, axis=1)))


@dataclass
class TrainResult:
    encoder: Encoder
    decoder: DenseNet
    metrics: list = field(default_factory=list)  # tuples matching METRICS_HEADER
    best_epoch: int = 0
    best_val: float = math.inf
    checkpoint: bytes = b""
    splits: dict = None


def _fmt(v):
    return repr(float(v)) if isinstance(v, float) else str(v)


def metrics_text(rows):
    body = "".join("\t".join(_fmt(v) for v in row) + "\n" for row in rows)
    return METRICS_HEADER + "\n" + body


def checkpoint_meta(config, spec, data_shape, epoch, val):
    return {
        "preset": config.preset,
        "dataset": config.dataset,
        "data_shape": ",".join(str(s) for s in data_shape),
        "latent_dim": config.latent_dim,
        "kind": spec.posterior,
        "hidden": ",".join(str(h) for h in config.hidden),
        "kappa": repr(float(config.kappa)),
        "seed": config.seed,
        "epoch": epoch,
        "val_rec": repr(float(val)),
    }


def train(config, splits=None, log=None):
    """Train ``config`` and return the models as of the best validation epoch.

    ``log`` (optional) receives each metrics row as it is produced.
    """
    spec = config.validate()
    rng = np.random.default_rng(config.seed)
    splits = splits or load_dataset(config.dataset, seed=config.seed)
    x_train, x_val = splits[Split.TRAIN].items, splits[Split.VAL].items
    data_shape = splits[Split.TRAIN].shape
    encoder, decoder = make_models(x_train.shape[1], config.latent_dim, spec.posterior, rng,
                                   hidden=config.hidden,
                                   spectral_norm=spec.decoder_reg is DecoderReg.SPECTRAL_NORM)
    params = encoder.net.parameters() + decoder.parameters()
    adam = AdamState()
    schedule = PlateauHalver(config.lr, config.patience)

    best_val = reconstruction_error(encoder, decoder, x_val)
    result = TrainResult(encoder, decoder, best_val=best_val, splits=splits)
    result.checkpoint = checkpoint_bytes([encoder.net, decoder],
                                         checkpoint_meta(config, spec, data_shape, 0, best_val))
    count = x_train.shape[0]
    for epoch in range(1, config.epochs + 1):
        lr = schedule.lr
        perm = rng.permutation(count)
        sums = np.zeros(3)
        for start in range(0, count, config.batch_size):
            xb = x_train[perm[start:start + config.batch_size]]
            loss = build_loss(xb, encoder, decoder, spec, int(rng.integers(2**63 - 1)))
            objective = loss.objective()
            if not np.isfinite(objective.value):
                raise Diverged(f"non-finite loss at epoch {epoch}")
            grads = ad.grad_of(objective, params)
            adam_step(params, grads, adam, lr)
            sums += [np.sum(loss.parts[k].value) for k in ("rec", "reg", "dec_reg")]
        train_rec, train_reg, train_dec = sums / count
        val = reconstruction_error(encoder, decoder, x_val)
        if not np.isfinite(val):
            raise Diverged(f"non-finite validation loss at epoch {epoch}")
        row = (epoch, lr, float(train_rec), float(train_reg), float(train_dec), val)
        result.metrics.append(row)
        if log is not None:
            log(row)
        if val < result.best_val:
            result.best_val, result.best_epoch = val, epoch
            result.checkpoint = checkpoint_bytes([encoder.net, decoder],
                                                 checkpoint_meta(config, spec, data_shape, epoch, val))
        schedule.step(val)
    return result


def write_run(config, result):
    os.makedirs(config.out, exist_ok=True)
    with open(os.path.join(config.out, CHECKPOINT_NAME), "wb") as fh:
        fh.write(result.checkpoint)
    with open(os.path.join(config.out, "config.txt"), "w") as fh:
        fh.write(config_text(config))


def load_models(path):
    """Encoder/decoder pair and metadata from a checkpoint file."""
    nets, meta = load_checkpoint(path)
    try:
        latent = int(meta["latent_dim"])
        kind = meta["kind"]
        shape = tuple(int(s) for s in meta["data_shape"].split(","))
    except (KeyError, ValueError) as exc:
        raise IncompatibleCheckpoint(f"{path}: missing model metadata") from exc
    if len(nets) != 2 or nets[1].in_dim != latent:
        raise IncompatibleCheckpoint(f"{path}: expected an encoder/decoder pair with latent width {latent}")
    encoder = Encoder(nets[0], latent, kind)
    if nets[0].out_dim != encoder.head_width():
        raise IncompatibleCheckpoint(f"{path}: encoder head does not match kind {kind!r}")
    return encoder, nets[1], meta, shape
