"""Command-line entry point: ``uae {train,eval,sample,interp,gradstats,appendixg}``.

Exit codes: 0 success, 1 usage error, 2 runtime or validation error.
"""
import argparse
import os
import sys

import numpy as np

from . import autodiff as ad
from . import diagnostics, gmm
from .data import Split, load_dataset, write_csv, write_image_grid
from .errors import ConfigError, IncompatibleCheckpoint, UAEError
from .gaussian_core import Heuristic
from .losses import PRESETS, slerp_midpoint
from .posterior_metrics import aggregated_vs_persample_wasserstein
from .nets import encode
from .train import (
    CHECKPOINT_NAME,
    METRICS_NAME,
    decode,
    load_models,
    make_config,
    metrics_text,
    parse_config_text,
    posterior_means,
    train,
    write_run,
)

EVAL_GMM_COMPONENTS = gmm.DEFAULT_COMPONENTS


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _add_run_flags(p):
    p.add_argument("--config", help="flat key=value file; flags override it")
    p.add_argument("--preset", help=f"one of: {', '.join(PRESETS)}")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="output directory")
    p.add_argument("--dataset", help="moons | grid | fmnist:PATH")
    p.add_argument("--latent-dim", type=int)
    p.add_argument("--k", type=int, help="latent samples per input")
    p.add_argument("--kappa", type=float)
    p.add_argument("--beta", type=float)
    p.add_argument("--gamma", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--patience", type=int)
    p.add_argument("--heuristic", choices=[h.value for h in Heuristic])
    p.add_argument("--hidden", help="comma-separated hidden widths, e.g. 64,64")
    p.add_argument("--r-sigma", type=int, help="sigma-pair repetitions (gradstats)")
    p.add_argument("--r-mc", type=int, help="Monte Carlo repetitions (gradstats)")


_RUN_KEYS = ("preset", "seed", "out", "dataset", "latent_dim", "k", "kappa", "beta", "gamma",
             "epochs", "batch_size", "lr", "patience", "heuristic", "hidden", "r_sigma", "r_mc")


def build_parser():
    parser = _Parser(prog="uae", description="Sigma-point autoencoder toolkit.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", help="train a preset and write checkpoint + metrics")
    _add_run_flags(p)

    for name, text in (("eval", "reconstruction / sampling / interpolation scores"),
                       ("sample", "decode ex-post GMM samples"),
                       ("interp", "decode slerp midpoints of validation pairs"),
                       ("gradstats", "gradient CV and bias of sigma-point vs Monte Carlo sampling"),
                       ("appendixg", "aggregated vs per-sample Wasserstein on encoded data")):
        p = sub.add_parser(name, help=text)
        p.add_argument("checkpoint")
        _add_run_flags(p)
        if name in ("sample", "interp"):
            p.add_argument("--count", type=int, default=16)
    return parser


def resolve_config(args):
    file_values = {}
    if args.config:
        try:
            with open(args.config) as fh:
                file_values = parse_config_text(fh.read())
        except OSError as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from exc
    overrides = {k: getattr(args, k) for k in _RUN_KEYS if getattr(args, k, None) is not None}
    return file_values, overrides


def _echo(line, out=None):
    print(line, file=out or sys.stdout)


def cmd_train(config, out=None):
    spec = config.validate()
    os.makedirs(config.out, exist_ok=True)
    result = train(config, log=lambda row: _echo("\t".join(str(v) for v in row), out))
    write_run(config, result)
    with open(os.path.join(config.out, METRICS_NAME), "w") as fh:
        fh.write(metrics_text(result.metrics))
    _echo(f"best epoch {result.best_epoch} val_rec {result.best_val!r} -> "
          f"{os.path.join(config.out, CHECKPOINT_NAME)}", out)
    return result


def _checkpoint_data(path, dataset, seed):
    encoder, decoder, meta, shape = load_models(path)
    dataset = dataset or meta.get("dataset", "moons")
    seed = int(meta.get("seed", 0)) if seed is None else seed
    splits = load_dataset(dataset, seed=seed)
    if splits[Split.TRAIN].dim != decoder.out_dim:
        raise IncompatibleCheckpoint(
            f"checkpoint decodes {decoder.out_dim} values but {dataset} items have {splits[Split.TRAIN].dim}")
    return encoder, decoder, meta, shape, splits


def _gmm_samples(encoder, decoder, splits, count, seed):
    model = gmm.fit_em(posterior_means(encoder, splits[Split.TRAIN].items), K=EVAL_GMM_COMPONENTS, seed=seed)
    return decode(decoder, gmm.gmm_sample(model, count, seed + 1))


def _val_pairs(encoder, splits, count, rng):
    val = splits[Split.VAL].items
    idx = np.stack([rng.choice(len(val), size=2, replace=False) for _ in range(count)])
    mu = posterior_means(encoder, val)
    return mu[idx[:, 0]], mu[idx[:, 1]]


def _midpoints(z1, z2):
    return np.stack([slerp_midpoint(a, b) for a, b in zip(z1, z2)])


def cmd_eval(checkpoint, dataset=None, seed=None, out=None):
    """Gaussian-Frechet scores of reconstructions, GMM samples and slerp
    midpoints, each measured against the test items."""
    encoder, decoder, meta, _, splits = _checkpoint_data(checkpoint, dataset, seed)
    seed = int(meta.get("seed", 0)) if seed is None else seed
    test = splits[Split.TEST].items
    rng = np.random.default_rng(seed)
    recon = decode(decoder, posterior_means(encoder, test))
    samples = _gmm_samples(encoder, decoder, splits, len(test), seed)
    z1, z2 = _val_pairs(encoder, splits, len(test), rng)
    interp = decode(decoder, _midpoints(z1, z2))
    scores = {
        "reconstruction": diagnostics.gaussian_frechet_score(recon, test),
        "sampling": diagnostics.gaussian_frechet_score(samples, test),
        "interpolation": diagnostics.gaussian_frechet_score(interp, test),
    }
    _echo(diagnostics.format_record("eval", checkpoint=os.path.basename(checkpoint), **scores), out)
    return scores


def _emit_points(points, shape, path_base, columns=None):
    if len(shape) == 3:
        path = path_base + (".pgm" if shape[0] == 1 else ".ppm")
        write_image_grid(points, shape, path, columns=columns)
    else:
        path = path_base + ".csv"
        if points.shape[1] != 2:
            raise ConfigError("only 2-D synthetic outputs can be exported as CSV")
        write_csv(points, path)
    return path


def cmd_sample(checkpoint, count, seed, out_dir, dataset=None, out=None):
    encoder, decoder, meta, shape, splits = _checkpoint_data(checkpoint, dataset, None)
    if count < 1:
        raise ConfigError("count must be at least 1")
    os.makedirs(out_dir, exist_ok=True)
    samples = _gmm_samples(encoder, decoder, splits, count, seed)
    path = _emit_points(samples, shape, os.path.join(out_dir, f"samples_seed{seed}"))
    _echo(path, out)
    return path


def cmd_interp(checkpoint, count, seed, out_dir, dataset=None, out=None):
    """Rows of (D(z1), D(slerp midpoint), D(z2)) for random validation pairs;
    2-D data writes only the midpoint decodes."""
    encoder, decoder, meta, shape, splits = _checkpoint_data(checkpoint, dataset, None)
    if count < 1:
        raise ConfigError("count must be at least 1")
    os.makedirs(out_dir, exist_ok=True)
    z1, z2 = _val_pairs(encoder, splits, count, np.random.default_rng(seed))
    mids = decode(decoder, _midpoints(z1, z2))
    base = os.path.join(out_dir, f"interp_seed{seed}")
    if len(shape) == 3:
        triples = np.stack([decode(decoder, z1), mids, decode(decoder, z2)], axis=1)
        path = _emit_points(triples.reshape(-1, mids.shape[1]), shape, base, columns=3)
    else:
        path = _emit_points(mids, shape, base)
    _echo(path, out)
    return path


def cmd_gradstats(checkpoint, config, dataset=None, data_seed=None, out=None):
    encoder, decoder, meta, _, splits = _checkpoint_data(checkpoint, dataset, data_seed)
    batch = splits[Split.TRAIN].items[: config.batch_size]
    ut, mc = diagnostics.compare_samplers(encoder, decoder, batch, R_sigma=config.r_sigma,
                                          R_mc=config.r_mc, seed=config.seed, kappa=config.kappa)
    records = diagnostics.gradstats_records(ut, mc)
    for line in records:
        _echo(line, out)
    return ut, mc


def cmd_appendixg(checkpoint, dataset=None, seed=None, out=None):
    """Per latent dimension: squared W2 of the aggregated posterior versus the
    average per-input value, over the encoded training set."""
    encoder, _, meta, _, splits = _checkpoint_data(checkpoint, dataset, seed)
    post = encode(encoder, splits[Split.TRAIN].items).posterior
    mu = ad.value_of(post.mean)
    L = ad.value_of(post.scale)
    sigma = np.sqrt(np.sum(L * L, axis=-1))
    rows = []
    for i in range(mu.shape[1]):
        agg, per = aggregated_vs_persample_wasserstein(list(zip(mu[:, i], sigma[:, i])))
        rows.append((agg, per))
        _echo(diagnostics.format_record("appendixg", dim=i, aggregated=agg, persample=per,
                                        holds=bool(agg <= per + 1e-12)), out)
    return rows


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        file_values, overrides = resolve_config(args)
        config = make_config(file_values, overrides)
        if args.command == "train":
            cmd_train(config)
            return 0
        explicit_dataset = overrides.get("dataset") or file_values.get("dataset")
        explicit_seed = overrides.get("seed", file_values.get("seed"))
        if args.command == "eval":
            cmd_eval(args.checkpoint, explicit_dataset, explicit_seed)
        elif args.command == "sample":
            cmd_sample(args.checkpoint, args.count, config.seed, config.out, explicit_dataset)
        elif args.command == "interp":
            cmd_interp(args.checkpoint, args.count, config.seed, config.out, explicit_dataset)
        elif args.command == "gradstats":
            cmd_gradstats(args.checkpoint, config, explicit_dataset, explicit_seed)
        elif args.command == "appendixg":
            cmd_appendixg(args.checkpoint, explicit_dataset, explicit_seed)
    except UAEError as exc:
        print(f"uae: error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"uae: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
