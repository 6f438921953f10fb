"""Estimator-quality and posterior-health measurements.

* gradient coefficient of variation and relative bias of decoder gradients
  under sigma-point versus reparameterized sampling,
* a Gaussian-Frechet distance between two feature sets (moment-matched
  squared 2-Wasserstein), used as a desk-scale sample-quality score,
* per-dimension summaries of encoded posteriors with a collapse flag.

Measurements are emitted as JSON lines, one record per measurement.
"""
import json
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import EmptyInput, InconsistentSpec, LengthMismatch, TooFewRepetitions, TooFewSamples
from .gaussian_core import DEFAULT_KAPPA, Heuristic, SigmaSelection
from .losses import LossSpec, Reconstruction, Sampler, build_loss
from .nets import encode
from .posterior_metrics import RegularizerKind

MEAN_FLOOR = 1e-12
COLLAPSE_MEAN = 0.05
COLLAPSE_VAR = (0.9, 1.1)


@dataclass
class GradStats:
    cv_median: float
    bias_rel_median: float
    per_parameter: dict = None


def gradient_cv(grad_draws):
    """Median over parameters of std/|mean| across repetitions.

    ``grad_draws`` is ``(R, P)``.  Uses the population (1/R) standard
    deviation; parameters with ``|mean| < 1e-12`` are left out.  Returns 0
    when every parameter is left out.
    """
    g = np.asarray(grad_draws, dtype=np.float64)
    if g.ndim == 1:
        g = g[:, None]
    if g.shape[0] < 2:
        raise TooFewRepetitions(f"need at least 2 repetitions, got {g.shape[0]}")
    m = g.mean(axis=0)
    keep = np.abs(m) >= MEAN_FLOOR
    if not np.any(keep):
        return 0.0
    return float(np.median(g.std(axis=0)[keep] / np.abs(m[keep])))


def gradient_relative_bias(estimate_means, reference_means):
    """Median of ``|m - m'| / |m'|`` over parameters with ``|m'| >= 1e-12``."""
    m = np.ravel(np.asarray(estimate_means, dtype=np.float64))
    ref = np.ravel(np.asarray(reference_means, dtype=np.float64))
    if m.shape != ref.shape:
        raise LengthMismatch(f"{m.size} estimates against {ref.size} references")
    keep = np.abs(ref) >= MEAN_FLOOR
    if not np.any(keep):
        return 0.0
    return float(np.median(np.abs(m[keep] - ref[keep]) / np.abs(ref[keep])))


def _decoder_gradient(x, encoder, decoder, spec, seed):
    loss = build_loss(x, encoder, decoder, spec, seed).objective()
    params = decoder.parameters()
    return np.concatenate([g.ravel() for g in ad.grad_of(loss, params)])


def _draws(x, encoder, decoder, spec, reps, rng):
    seeds = rng.integers(0, 2**63 - 1, size=reps)
    return np.stack([_decoder_gradient(x, encoder, decoder, spec, int(s)) for s in seeds])


def compare_samplers(encoder, decoder, batch, R_sigma=50, R_mc=200, seed=0, kappa=DEFAULT_KAPPA):
    """Decoder-gradient statistics of the two samplers on frozen parameters.

    UT: ``R_sigma`` losses, each from one random sigma pair per input.
    MC: ``R_mc`` losses, each from two reparameterized draws per input.
    Both use the mean-image reconstruction and no posterior regularizer
    (it does not touch the decoder).  The MC mean gradient is the reference
    for the bias, so the MC record's own bias is 0.

    Returns ``(ut_stats, mc_stats)``.
    """
    if encoder.kind == "mean":
        raise InconsistentSpec("sampler comparison needs a stochastic encoder")
    if R_sigma < 2 or R_mc < 2:
        raise TooFewRepetitions(f"need at least 2 repetitions, got R_sigma={R_sigma}, R_mc={R_mc}")
    rng = np.random.default_rng(seed)
    common = dict(reconstruction=Reconstruction.MEAN_IMAGE, regularizer=RegularizerKind.NONE,
                  K=2, beta=0.0, gamma=0.0, kappa=kappa, posterior=encoder.kind)
    ut_spec = LossSpec(sampler=Sampler.SIGMA_POINTS,
                       sigma_selection=SigmaSelection(Heuristic.RANDOM_PAIRS, 2), **common)
    mc_spec = LossSpec(sampler=Sampler.REPARAM, **common)
    ut = _draws(batch, encoder, decoder, ut_spec, R_sigma, rng)
    mc = _draws(batch, encoder, decoder, mc_spec, R_mc, rng)
    ut_mean, mc_mean = ut.mean(axis=0), mc.mean(axis=0)
    ut_stats = GradStats(gradient_cv(ut), gradient_relative_bias(ut_mean, mc_mean),
                         {"mean": ut_mean, "std": ut.std(axis=0)})
    mc_stats = GradStats(gradient_cv(mc), 0.0, {"mean": mc_mean, "std": mc.std(axis=0)})
    return ut_stats, mc_stats


def _psd_sqrt(a):
    a = 0.5 * (a + a.T)
    w, v = np.linalg.eigh(a)
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


def _moments(x):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    if x.shape[0] < x.shape[1] + 1:
        raise TooFewSamples(f"{x.shape[0]} samples cannot estimate a {x.shape[1]}-dim covariance")
    mu = x.mean(axis=0)
    diff = x - mu
    return mu, diff.T @ diff / (x.shape[0] - 1)


def gaussian_frechet_score(set_a, set_b):
    """``|mu_a - mu_b|^2 + tr(S_a + S_b - 2 (S_b^1/2 S_a S_b^1/2)^1/2)``,
    clipped at zero."""
    mu_a, cov_a = _moments(set_a)
    mu_b, cov_b = _moments(set_b)
    if mu_a.shape != mu_b.shape:
        raise LengthMismatch(f"feature dims differ: {mu_a.size} vs {mu_b.size}")
    root_b = _psd_sqrt(cov_b)
    cross = np.trace(_psd_sqrt(root_b @ cov_a @ root_b))
    score = np.sum((mu_a - mu_b) ** 2) + np.trace(cov_a) + np.trace(cov_b) - 2.0 * cross
    return float(max(score, 0.0))


@dataclass
class DimensionStats:
    abs_mean: np.ndarray  # (n, 3): min / median / max of |mu_i|
    variance: np.ndarray  # (n, 3): min / median / max of sigma_i^2
    collapsed: np.ndarray  # (n,) bool

    @property
    def collapsed_count(self):
        return int(np.sum(self.collapsed))


def _quantiles(a):
    return np.stack([a.min(axis=0), np.median(a, axis=0), a.max(axis=0)], axis=1)


def posterior_dimension_stats(encoder, dataset_sample):
    """Per-dimension spread of ``|mu_i|`` and ``sigma_i^2`` over encoded inputs.

    A dimension counts as collapsed when its median ``|mu_i|`` is below 0.05
    and its median variance lies in [0.9, 1.1], i.e. it matches the prior.
    """
    x = np.asarray(dataset_sample, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise EmptyInput("need at least two inputs")
    post = encode(encoder, x).posterior
    mu = ad.value_of(post.mean)
    L = ad.value_of(post.scale)
    var = np.sum(L * L, axis=-1)
    abs_mean = _quantiles(np.abs(mu))
    variance = _quantiles(var)
    collapsed = (abs_mean[:, 1] < COLLAPSE_MEAN) & (variance[:, 1] >= COLLAPSE_VAR[0]) & (variance[:, 1] <= COLLAPSE_VAR[1])
    return DimensionStats(abs_mean, variance, collapsed)


def _plain(value):
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, np.generic):
        return value.item()
    return value


def format_record(measurement, **fields):
    """One JSON line: ``{"measurement": ..., **fields}`` with sorted keys."""
    record = {"measurement": measurement}
    record.update({k: _plain(v) for k, v in fields.items()})
    return json.dumps(record, sort_keys=True)


def gradstats_records(ut, mc):
    return [
        format_record("grad_cv", sampler="ut", value=ut.cv_median),
        format_record("grad_cv", sampler="mc", value=mc.cv_median),
        format_record("grad_bias_rel", sampler="ut", reference="mc", value=ut.bias_rel_median),
    ]
