"""Closed-form regularizers on per-sample Gaussian posteriors.

All regularizers use the doubled form with constants kept, so
``kl_to_standard_normal`` is ``2 * KL(q || N(0, I))`` and the Wasserstein
term is the squared 2-Wasserstein distance to ``N(0, I)``.  They reduce
over the trailing posterior axes and keep any leading batch axes.
"""
import enum

import numpy as np

from . import autodiff as ad
from .errors import DegenerateVariance, EmptyInput
from .gaussian_core import GaussianPosterior, largest_eigenvalue_tensor
from .nets import decoder_input_gradient

KL_FLOOR = 1e-12


class RegularizerKind(enum.Enum):
    KL_DIAGONAL = "kl-diagonal"
    KL_FULL = "kl-full"
    WASSERSTEIN_DIAGONAL = "wasserstein-diagonal"
    WASSERSTEIN_FULL = "wasserstein-full"
    NONE = "none"


def _sq_norm(x, axes):
    out = ad.square(x)
    for axis in axes:
        out = ad.sum_(out, axis=axis)
    return out


def _diag(scale):
    n = scale.shape[-1]
    return ad.sum_(scale * np.eye(n), axis=-1)


def kl_to_standard_normal(posterior):
    """``|mu|^2 + tr(Sigma) - n - 2 sum_i log L_ii``."""
    mu = ad.as_node(posterior.mean)
    L = ad.as_node(posterior.scale)
    n = mu.shape[-1]
    d = _diag(L)
    if np.any(d.value < KL_FLOOR):
        raise DegenerateVariance("posterior scale diagonal below 1e-12; KL diverges")
    return _sq_norm(mu, [-1]) + _sq_norm(L, [-1, -1]) - n - 2.0 * ad.sum_(ad.log(d), axis=-1)


def wasserstein_to_standard_normal(posterior):
    """``|mu|^2 + |L - I|_F^2``, i.e. ``|mu|^2 + tr(Sigma) + n - 2 tr(L)``."""
    mu = ad.as_node(posterior.mean)
    L = ad.as_node(posterior.scale)
    n = mu.shape[-1]
    return _sq_norm(mu, [-1]) + _sq_norm(L - np.eye(n), [-1, -1])


def regularize(kind, posterior):
    if kind in (RegularizerKind.KL_DIAGONAL, RegularizerKind.KL_FULL):
        return kl_to_standard_normal(posterior)
    if kind in (RegularizerKind.WASSERSTEIN_DIAGONAL, RegularizerKind.WASSERSTEIN_FULL):
        return wasserstein_to_standard_normal(posterior)
    mu = ad.as_node(posterior.mean)
    return ad.Node(np.zeros(mu.shape[:-1]))


def decoder_penalty(posterior, decoder, weights=None):
    """Largest covariance eigenvalue times the squared decoder Jacobian norm at the mean."""
    lam = largest_eigenvalue_tensor(posterior.scale, posterior.kind)
    return lam * decoder_input_gradient(decoder, posterior.mean, weights=weights)


def iwae_bound(log_weights):
    """Negative log-mean-exp over the last axis (max-shifted)."""
    w = ad.as_node(log_weights) if not isinstance(log_weights, (list, tuple)) else ad.stack(log_weights, axis=-1)
    if w.ndim == 0 or w.shape[-1] == 0:
        raise EmptyInput("iwae_bound needs at least one log weight")
    k = w.shape[-1]
    shift = np.max(w.value, axis=-1, keepdims=True)
    lse = ad.log(ad.sum_(ad.exp(w - shift), axis=-1)) + np.squeeze(shift, -1)
    return -(lse - np.log(k))


def _one_dim(posteriors):
    mus, sigmas = [], []
    for p in posteriors:
        if isinstance(p, GaussianPosterior):
            mus.append(float(np.ravel(ad.value_of(p.mean))[0]))
            sigmas.append(float(np.ravel(ad.value_of(p.scale))[0]))
        else:
            mu, sigma = p
            mus.append(float(mu))
            sigmas.append(float(sigma))
    return np.array(mus), np.array(sigmas)


def aggregated_vs_persample_wasserstein(posteriors):
    """Squared W2 to N(0,1) of the moment-matched aggregate versus the average
    per-posterior value, for 1-D posteriors given as GaussianPosterior or
    ``(mu, sigma)`` pairs. The first never exceeds the second."""
    if len(posteriors) == 0:
        raise EmptyInput("no posteriors")
    mu, sigma = _one_dim(posteriors)
    if np.any(sigma <= 0.0):
        raise ValueError("sigmas must be positive")
    agg_mean = mu.mean()
    agg_var = max(np.mean(sigma ** 2 + mu ** 2) - agg_mean ** 2, 0.0)
    aggregated = agg_mean ** 2 + (np.sqrt(agg_var) - 1.0) ** 2
    persample = float(np.mean(mu ** 2 + (sigma - 1.0) ** 2))
    if aggregated > persample + 1e-12:
        raise AssertionError(f"aggregate {aggregated} exceeds per-sample average {persample}")
    return float(aggregated), persample
